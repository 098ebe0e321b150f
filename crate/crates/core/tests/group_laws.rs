//! Group-law properties of H_1 against an independently written product.

use hindex::expr::{parse, VarKind};
use hindex::heisenberg::{
    apply_vector_field, dilate, inverse, multiply, taylor_multiply, GroupPoint, HeisenbergDim, TaylorCoordinate,
    VectorFieldSpec,
};
use proptest::prelude::*;

/// `(z, a, b)·(w, c, d) = (z + w + (ad − cb)/2, a + c, b + d)`.
fn law(p: [f64; 3], q: [f64; 3]) -> [f64; 3] {
    [p[0] + q[0] + 0.5 * (p[1] * q[2] - q[1] * p[2]), p[1] + q[1], p[2] + q[2]]
}

fn pt(c: [f64; 3]) -> GroupPoint {
    GroupPoint::new(c.to_vec()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
}

fn coord() -> impl Strategy<Value = [f64; 3]> {
    prop::array::uniform3(-5.0f64..5.0)
}

proptest! {
    #[test]
    fn product_matches_reference(p in coord(), q in coord()) {
        let got = multiply(&pt(p), &pt(q)).unwrap();
        prop_assert!(close(got.coords(), &law(p, q), 1e-14));
    }

    #[test]
    fn associativity_and_inverse(p in coord(), q in coord(), r in coord()) {
        let (a, b, c) = (pt(p), pt(q), pt(r));
        let left = multiply(&multiply(&a, &b).unwrap(), &c).unwrap();
        let right = multiply(&a, &multiply(&b, &c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) < 1e-12);
        let e = multiply(&a, &inverse(&a)).unwrap();
        prop_assert!(e.max_abs_diff(&GroupPoint::identity(HeisenbergDim::new(1).unwrap())) == 0.0);
    }

    #[test]
    fn dilations_are_automorphisms(p in coord(), q in coord(), s in 0.1f64..4.0, t in 0.1f64..4.0) {
        let (a, b) = (pt(p), pt(q));
        let lhs = dilate(t, &multiply(&a, &b).unwrap()).unwrap();
        let rhs = multiply(&dilate(t, &a).unwrap(), &dilate(t, &b).unwrap()).unwrap();
        prop_assert!(close(lhs.coords(), rhs.coords(), 1e-13));
        let st = dilate(s * t, &a).unwrap();
        prop_assert!(close(st.coords(), dilate(s, &dilate(t, &a).unwrap()).unwrap().coords(), 1e-13));
        // δ_t scales the centre quadratically
        prop_assert!((st.coords()[0] - (s * t).powi(2) * p[0]).abs() <= 1e-12 * (1.0 + p[0].abs() * (s * t).powi(2)));
    }

    #[test]
    fn taylor_product_is_the_group_product(p in coord(), q in coord()) {
        let got = taylor_multiply(&TaylorCoordinate::from_point(&pt(p)), &TaylorCoordinate::from_point(&pt(q))).unwrap();
        prop_assert!(close(got.to_point().coords(), &law(p, q), 1e-14));
    }

    /// `X_i f(x) = d/ds f(s e_i · x)` at s = 0, by central differences.
    #[test]
    fn vector_fields_generate_left_translations(x in coord(), i in 0usize..3) {
        let d = HeisenbergDim::new(1).unwrap();
        let f = parse("x0*x1 + x2^3 - x0^2*x2").unwrap();
        let xf = apply_vector_field(VectorFieldSpec::new(i, d).unwrap(), &f, d).unwrap();
        let (pf, px) = (f.compile(3, VarKind::X), xf.compile(3, VarKind::X));
        let mut sc = Default::default();
        let h = 1e-4;
        let mut e = [0.0; 3];
        e[i] = h;
        let fwd = law(e, x);
        e[i] = -h;
        let bwd = law(e, x);
        let fd = (pf.eval(&fwd, &mut sc) - pf.eval(&bwd, &mut sc)).re / (2.0 * h);
        let exact = px.eval(&x, &mut sc).re;
        prop_assert!((fd - exact).abs() < 1e-5 * (1.0 + exact.abs()), "{fd} vs {exact}");
    }
}

#[test]
fn dimension_mismatch_and_bad_scale_are_rejected() {
    let a = GroupPoint::new(vec![0.0; 3]).unwrap();
    let b = GroupPoint::new(vec![0.0; 5]).unwrap();
    assert!(multiply(&a, &b).is_err());
    assert!(dilate(0.0, &a).is_err());
    assert!(dilate(-1.0, &a).is_err());
    assert!(GroupPoint::new(vec![0.0; 2]).is_err());
}
