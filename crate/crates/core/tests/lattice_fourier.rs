//! Quadrature and the fiberwise Fourier transform.

use hindex::expr::parse_matrix;
use hindex::heisenberg::HeisenbergDim;
use hindex::lattice::{
    evaluate, fiber_fourier, fiber_fourier_inverse, integrate, l2_norm, Fiber, Grid, SampledFunction,
};
use hindex::C64;
use proptest::prelude::*;
use std::f64::consts::PI;

fn grid(points: usize, extent: f64) -> Grid {
    Grid::new(HeisenbergDim::new(1).unwrap(), points, extent).unwrap()
}

#[test]
fn gaussian_integral_matches_closed_form() {
    // ∫ e^{−|x|²} over ℝ³ is π^{3/2}; the truncation at L = 6 is negligible
    let g = grid(49, 6.0);
    let f = evaluate(&parse_matrix("exp(-sqnorm(x))").unwrap(), &g).unwrap();
    let v = integrate(&f).unwrap();
    assert!((v.re - PI.powf(1.5)).abs() < 1e-10, "{v}");
    assert!(v.im.abs() < 1e-14);
}

#[test]
fn gaussian_transform_matches_closed_form_at_origin() {
    // f̂(0) = ∫ f, and f̂(ξ) = π^{3/2} e^{−|ξ|²/4}
    let g = grid(41, 6.0);
    let f = evaluate(&parse_matrix("exp(-sqnorm(x))").unwrap(), &g).unwrap();
    let fh = fiber_fourier(&f);
    let o = fh.grid().origin();
    assert!((fh.values()[o].re - PI.powf(1.5)).abs() < 1e-9);
    let mut xi = vec![0.0; 3];
    let mut worst = 0.0f64;
    for s in 0..fh.grid().sites() {
        fh.grid().point(s, &mut xi);
        let want = PI.powf(1.5) * (-xi.iter().map(|c| c * c).sum::<f64>() / 4.0).exp();
        worst = worst.max((fh.values()[s] - want).norm());
    }
    assert!(worst < 1e-9, "{worst}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn parseval_and_inversion(vals in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 125), extent in 0.5f64..4.0) {
        let g = grid(5, extent);
        let f = SampledFunction::new(g, Fiber::Vector(1), vals.iter().map(|&(a, b)| C64::new(a, b)).collect()).unwrap();
        let fh = fiber_fourier(&f);
        let (n0, n1) = (l2_norm(&f), l2_norm(&fh));
        prop_assert!((n0 - n1).abs() <= 1e-12 * n0.max(1e-300));
        let back = fiber_fourier_inverse(&fh);
        let err = back.values().iter().zip(f.values()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        prop_assert!(err < 1e-12);
    }
}
