//! Exact arithmetic on the Heisenberg group `H_n` in exponential coordinates.
//!
//! A point is `(x_0, x_1, …, x_{2n})` with `x_0` central. The product is
//! `(x·y)_0 = x_0 + y_0 + ½ Σ_j (x_j y_{n+j} − y_j x_{n+j})`, the other
//! coordinates add. Inversion is negation and `δ_t` scales the centre by `t²`.

use crate::expr::{Expr, Polynomial, Var, VarKind};
use crate::{Error, Result};

/// Group dimension parameter; the group has `2n+1` coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HeisenbergDim {
    n: usize,
}

impl HeisenbergDim {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("Heisenberg dimension n must be at least 1".into()));
        }
        Ok(HeisenbergDim { n })
    }
    pub fn n(self) -> usize {
        self.n
    }
    /// Topological dimension `2n+1`.
    pub fn dim(self) -> usize {
        2 * self.n + 1
    }
    /// Homogeneous dimension `2n+2`: the exponent of `t` in the Jacobian of `δ_t`.
    pub fn homogeneous_dim(self) -> usize {
        2 * self.n + 2
    }
}

/// A point of `H_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupPoint {
    coords: Vec<f64>,
}

impl GroupPoint {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.len() % 2 == 0 || coords.len() < 3 {
            return Err(Error::InvalidArgument(format!(
                "a point of H_n needs 2n+1 >= 3 coordinates, got {}",
                coords.len()
            )));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument("non-finite coordinate".into()));
        }
        Ok(GroupPoint { coords })
    }
    pub fn identity(d: HeisenbergDim) -> Self {
        GroupPoint { coords: vec![0.0; d.dim()] }
    }
    pub fn coords(&self) -> &[f64] {
        &self.coords
    }
    pub fn dim(&self) -> HeisenbergDim {
        HeisenbergDim { n: self.coords.len() / 2 }
    }
    pub fn max_abs_diff(&self, o: &GroupPoint) -> f64 {
        self.coords.iter().zip(&o.coords).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Centre term `½ Σ_j (a_j b_{n+j} − b_j a_{n+j})` of the product of two points.
#[inline]
pub fn symplectic_half(n: usize, a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for j in 1..=n {
        s += a[j] * b[n + j] - b[j] * a[n + j];
    }
    0.5 * s
}

/// Slice-level product for hot loops; `out` may not alias the inputs.
#[inline]
pub fn mul_into(n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    out[0] = a[0] + b[0] + symplectic_half(n, a, b);
    for k in 1..=2 * n {
        out[k] = a[k] + b[k];
    }
}

/// Slice-level dilation.
#[inline]
pub fn dilate_into(t: f64, a: &[f64], out: &mut [f64]) {
    out[0] = t * t * a[0];
    for k in 1..a.len() {
        out[k] = t * a[k];
    }
}

fn same_dim(a: &GroupPoint, b: &GroupPoint) -> Result<usize> {
    if a.coords.len() != b.coords.len() {
        return Err(Error::DimensionMismatch { expected: a.coords.len(), found: b.coords.len() });
    }
    Ok(a.coords.len() / 2)
}

/// Heisenberg product `a·b`.
pub fn multiply(a: &GroupPoint, b: &GroupPoint) -> Result<GroupPoint> {
    let n = same_dim(a, b)?;
    let mut out = vec![0.0; 2 * n + 1];
    mul_into(n, &a.coords, &b.coords, &mut out);
    Ok(GroupPoint { coords: out })
}

/// Group inverse; in exponential coordinates it is negation.
pub fn inverse(a: &GroupPoint) -> GroupPoint {
    GroupPoint { coords: a.coords.iter().map(|c| -c).collect() }
}

/// Anisotropic dilation `δ_t`.
pub fn dilate(t: f64, a: &GroupPoint) -> Result<GroupPoint> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::InvalidArgument(format!("dilation factor must be positive, got {t}")));
    }
    let mut out = vec![0.0; a.coords.len()];
    dilate_into(t, &a.coords, &mut out);
    Ok(GroupPoint { coords: out })
}

/// Exponential map at `base`: `exp_x(v) = v·x`.
pub fn heisenberg_exp(base: &GroupPoint, v: &GroupPoint) -> Result<GroupPoint> {
    multiply(v, base)
}

/// Taylor coordinates of a parabolic arrow: horizontal part `h` and normal part `nn`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaylorCoordinate {
    pub h: Vec<f64>,
    pub nn: f64,
}

impl TaylorCoordinate {
    pub fn new(h: Vec<f64>, nn: f64) -> Result<Self> {
        if h.is_empty() || h.len() % 2 != 0 {
            return Err(Error::InvalidArgument(format!("horizontal part needs even length, got {}", h.len())));
        }
        if !nn.is_finite() || h.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite Taylor coordinate".into()));
        }
        Ok(TaylorCoordinate { h, nn })
    }
    pub fn from_point(p: &GroupPoint) -> Self {
        TaylorCoordinate { h: p.coords[1..].to_vec(), nn: p.coords[0] }
    }
    pub fn to_point(&self) -> GroupPoint {
        let mut c = Vec::with_capacity(self.h.len() + 1);
        c.push(self.nn);
        c.extend_from_slice(&self.h);
        GroupPoint { coords: c }
    }
}

/// The 2-form `b(h, h') = ½ Σ_j (h_j h'_{n+j} − h_{n+j} h'_j)`, indices of `h` starting at 1.
pub fn b_form(h: &[f64], hp: &[f64]) -> f64 {
    let n = h.len() / 2;
    let mut s = 0.0;
    for j in 0..n {
        s += h[j] * hp[n + j] - h[n + j] * hp[j];
    }
    0.5 * s
}

/// `(h, nn) * (h', nn') = (h + h', nn + nn' + b(h, h'))`.
pub fn taylor_multiply(p: &TaylorCoordinate, q: &TaylorCoordinate) -> Result<TaylorCoordinate> {
    if p.h.len() != q.h.len() {
        return Err(Error::DimensionMismatch { expected: p.h.len(), found: q.h.len() });
    }
    Ok(TaylorCoordinate { h: p.h.iter().zip(&q.h).map(|(a, b)| a + b).collect(), nn: p.nn + q.nn + b_form(&p.h, &q.h) })
}

/// One of the right-invariant fields `X_0, …, X_{2n}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VectorFieldSpec {
    index: usize,
}

impl VectorFieldSpec {
    pub fn new(index: usize, d: HeisenbergDim) -> Result<Self> {
        if index >= d.dim() {
            return Err(Error::InvalidArgument(format!("vector field index {index} out of range for n = {}", d.n())));
        }
        Ok(VectorFieldSpec { index })
    }
    pub fn index(self) -> usize {
        self.index
    }
    /// Weight in the Heisenberg order: 2 for the central field, 1 otherwise.
    pub fn weight(self) -> usize {
        if self.index == 0 {
            2
        } else {
            1
        }
    }
}

/// Symbolic `X f` with `X_0 = ∂_0`, `X_i = ∂_i + ½x_{i+n}∂_0`,
/// `X_{i+n} = ∂_{i+n} − ½x_i∂_0`, acting on the `x` variables.
pub fn apply_vector_field(x: VectorFieldSpec, f: &Expr, d: HeisenbergDim) -> Result<Expr> {
    let n = d.n();
    let f = f.expand_sqnorm(d.dim(), VarKind::X);
    let d0 = f.diff(Var::x(0))?;
    let i = x.index;
    let out = if i == 0 {
        d0
    } else if i <= n {
        Expr::add(f.diff(Var::x(i))?, Expr::mul(Expr::mul(Expr::real(0.5), Expr::var(Var::x(i + n))), d0))
    } else {
        Expr::sub(f.diff(Var::x(i))?, Expr::mul(Expr::mul(Expr::real(0.5), Expr::var(Var::x(i - n))), d0))
    };
    Ok(out.simplify())
}

/// Symbolic coordinates of `x·g` for the variable point `x` and a fixed `g`.
pub fn right_translate_exprs(g: &GroupPoint) -> Vec<Expr> {
    let n = g.coords.len() / 2;
    let c = |v: f64| Expr::real(v);
    let x = |k: usize| Expr::var(Var::x(k));
    let mut center = Expr::add(x(0), c(g.coords[0]));
    for j in 1..=n {
        let term = Expr::sub(Expr::mul(x(j), c(g.coords[n + j])), Expr::mul(c(g.coords[j]), x(n + j)));
        center = Expr::add(center, Expr::mul(c(0.5), term));
    }
    let mut out = vec![center];
    for k in 1..=2 * n {
        out.push(Expr::add(x(k), c(g.coords[k])));
    }
    out
}

/// Residual polynomial of the right-invariance identity
/// `(X f)(x·g) − X(y ↦ f(y·g))(x)` for polynomial `f`.
pub fn right_invariance_residual(x: VectorFieldSpec, f: &Expr, g: &GroupPoint, d: HeisenbergDim) -> Result<Polynomial> {
    let f = f.expand_sqnorm(d.dim(), VarKind::X);
    let xg = right_translate_exprs(g);
    let subst = |e: &Expr| e.substitute(&|v: Var| (v.kind == VarKind::X).then(|| xg[v.index].clone()));
    let lhs = subst(&apply_vector_field(x, &f, d)?);
    let rhs = apply_vector_field(x, &subst(&f), d)?;
    Ok(Polynomial::from_expr(&lhs)?.sub(&Polynomial::from_expr(&rhs)?))
}

/// Normal form of `[X_a, X_b] f`.
pub fn commutator_on(a: VectorFieldSpec, b: VectorFieldSpec, f: &Expr, d: HeisenbergDim) -> Result<Polynomial> {
    let ab = apply_vector_field(a, &apply_vector_field(b, f, d)?, d)?;
    let ba = apply_vector_field(b, &apply_vector_field(a, f, d)?, d)?;
    Ok(Polynomial::from_expr(&ab)?.sub(&Polynomial::from_expr(&ba)?))
}

/// Extrapolated limit of `δ_s^{-1}(γ₁(s) γ₂(s)^{-1})` as `s → 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParabolicLimit {
    pub limit: GroupPoint,
    /// `(s, |v(s) − limit|_∞)` in the order of the input grid.
    pub residuals: Vec<(f64, f64)>,
}

/// Richardson (polynomial) extrapolation to `s = 0` of the rescaled quotient
/// of two curves. Fails if successive differences grow as `s` shrinks.
pub fn parabolic_limit(
    gamma1: &dyn Fn(f64) -> GroupPoint,
    gamma2: &dyn Fn(f64) -> GroupPoint,
    s_grid: &[f64],
) -> Result<ParabolicLimit> {
    if s_grid.len() < 2 {
        return Err(Error::InvalidArgument("parabolic_limit needs at least two scales".into()));
    }
    if s_grid.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::InvalidArgument("scales must be positive".into()));
    }
    let mut grid = s_grid.to_vec();
    grid.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut samples = Vec::with_capacity(grid.len());
    for &s in &grid {
        let q = multiply(&gamma1(s), &inverse(&gamma2(s)))?;
        samples.push(dilate(1.0 / s, &q)?);
    }
    let steps: Vec<f64> = samples.windows(2).map(|w| w[1].max_abs_diff(&w[0])).collect();
    let scale = samples.iter().flat_map(|p| p.coords.iter()).fold(1.0f64, |m, c| m.max(c.abs()));
    let noise = 1e-12 * scale;
    for w in steps.windows(2) {
        if w[1] > noise && w[1] > w[0] * (1.0 + 1e-9) {
            return Err(Error::Divergent { ratio: w[1] / w[0].max(f64::MIN_POSITIVE) });
        }
    }
    let dim = samples[0].coords.len();
    let mut limit = vec![0.0; dim];
    for (k, l) in limit.iter_mut().enumerate() {
        let ys: Vec<f64> = samples.iter().map(|p| p.coords[k]).collect();
        *l = neville_at_zero(&grid, &ys);
    }
    let limit = GroupPoint { coords: limit };
    let residuals = grid.iter().zip(&samples).map(|(s, p)| (*s, p.max_abs_diff(&limit))).collect();
    Ok(ParabolicLimit { limit, residuals })
}

fn neville_at_zero(xs: &[f64], ys: &[f64]) -> f64 {
    let mut p = ys.to_vec();
    let m = xs.len();
    for k in 1..m {
        for i in 0..m - k {
            p[i] = (xs[i + k] * p[i] - xs[i] * p[i + 1]) / (xs[i + k] - xs[i]);
        }
    }
    p[0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;

    fn p(c: &[f64]) -> GroupPoint {
        GroupPoint::new(c.to_vec()).unwrap()
    }

    #[test]
    fn product_example() {
        assert_eq!(multiply(&p(&[0.0, 1.0, 0.0]), &p(&[0.0, 0.0, 1.0])).unwrap(), p(&[0.5, 1.0, 1.0]));
        let e = GroupPoint::identity(HeisenbergDim::new(1).unwrap());
        assert_eq!(multiply(&e, &p(&[1.0, 2.0, 3.0])).unwrap(), p(&[1.0, 2.0, 3.0]));
    }

    #[test]
    fn inverse_and_dilation_examples() {
        assert_eq!(inverse(&p(&[1.0, -2.0, 3.0])), p(&[-1.0, 2.0, -3.0]));
        assert_eq!(dilate(2.0, &p(&[1.0, 1.0, 0.0])).unwrap(), p(&[4.0, 2.0, 0.0]));
        assert!(dilate(0.0, &p(&[1.0, 1.0, 0.0])).is_err());
        assert!(multiply(&p(&[0.0; 3]), &p(&[0.0; 5])).is_err());
    }

    #[test]
    fn commutator_sign() {
        let d = HeisenbergDim::new(1).unwrap();
        let x1 = VectorFieldSpec::new(1, d).unwrap();
        let x2 = VectorFieldSpec::new(2, d).unwrap();
        let c = commutator_on(x1, x2, &parse("x0").unwrap(), d).unwrap();
        assert_eq!(c, Polynomial::constant(crate::C64::new(-1.0, 0.0)));
        let sq = apply_vector_field(x1, &parse("x1^2").unwrap(), d).unwrap();
        assert_eq!(Polynomial::from_expr(&sq).unwrap(), Polynomial::from_expr(&parse("2*x1").unwrap()).unwrap());
        let x0 = VectorFieldSpec::new(0, d).unwrap();
        assert_eq!(apply_vector_field(x0, &parse("x0").unwrap(), d).unwrap().simplify(), Expr::real(1.0));
    }

    #[test]
    fn parabolic_limit_recovers_g() {
        let g = p(&[0.7, -0.3, 1.1]);
        let base = p(&[0.2, 0.5, -0.4]);
        let (gc, bc) = (g.clone(), base.clone());
        let r = parabolic_limit(
            &move |s| multiply(&dilate(s, &gc).unwrap(), &bc).unwrap(),
            &move |_| base.clone(),
            &[0.5, 0.25, 0.125, 0.0625],
        )
        .unwrap();
        assert!(r.limit.max_abs_diff(&g) < 1e-12);
        assert!(r.residuals.iter().all(|(_, e)| *e < 1e-12));
    }

    #[test]
    fn parabolic_limit_detects_divergence() {
        let r = parabolic_limit(&|s| p(&[0.0, s.sqrt(), 0.0]), &|_| p(&[0.0, 0.0, 0.0]), &[0.5, 0.25, 0.125]);
        assert!(matches!(r, Err(Error::Divergent { .. })));
    }
}
