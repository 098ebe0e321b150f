//! Dense complex linear algebra on top of `faer`.

use crate::{Error, Result, C64};
use faer::linalg::matmul::matmul;
use faer::{Accum, Mat, MatRef, Par, Side};

pub type CMat = Mat<C64>;

/// Contiguous column `j` of a column-major matrix.
#[inline]
pub fn col(a: MatRef<'_, C64>, j: usize) -> &[C64] {
    a.col(j).try_as_col_major().expect("column-major storage").as_slice()
}

/// `y = A x`.
pub fn matvec(a: MatRef<'_, C64>, x: &[C64], y: &mut [C64]) {
    assert_eq!(a.ncols(), x.len());
    assert_eq!(a.nrows(), y.len());
    let xm = MatRef::from_column_major_slice(x, x.len(), 1);
    let ym = faer::MatMut::from_column_major_slice_mut(y, a.nrows(), 1);
    matmul(ym, Accum::Replace, a, xm, C64::new(1.0, 0.0), Par::Seq);
}

/// `y = A* x`.
pub fn matvec_adjoint(a: MatRef<'_, C64>, x: &[C64], y: &mut [C64]) {
    assert_eq!(a.nrows(), x.len());
    assert_eq!(a.ncols(), y.len());
    let xm = MatRef::from_column_major_slice(x, x.len(), 1);
    let ym = faer::MatMut::from_column_major_slice_mut(y, a.ncols(), 1);
    matmul(ym, Accum::Replace, a.adjoint(), xm, C64::new(1.0, 0.0), Par::Seq);
}

fn norm2(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

fn dot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// A linear map known only through its action and the action of its adjoint.
pub trait LinearOp: Sync {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    fn apply(&self, x: &[C64], y: &mut [C64]);
    fn apply_adjoint(&self, x: &[C64], y: &mut [C64]);
}

impl LinearOp for MatRef<'_, C64> {
    fn nrows(&self) -> usize {
        let s: MatRef<'_, C64> = *self;
        s.nrows()
    }
    fn ncols(&self) -> usize {
        let s: MatRef<'_, C64> = *self;
        s.ncols()
    }
    fn apply(&self, x: &[C64], y: &mut [C64]) {
        matvec(*self, x, y)
    }
    fn apply_adjoint(&self, x: &[C64], y: &mut [C64]) {
        matvec_adjoint(*self, x, y)
    }
}

/// Options for [`operator_norm`].
#[derive(Debug, Clone, Copy)]
pub struct NormOptions {
    /// Relative tolerance on the norm.
    pub tol: f64,
    /// Matrices with both sides at most this size use an exact SVD.
    pub exact_below: usize,
    pub max_iter: usize,
}

impl Default for NormOptions {
    fn default() -> Self {
        NormOptions { tol: 1e-8, exact_below: 512, max_iter: 5000 }
    }
}

/// Largest singular value. Exact SVD for small matrices, otherwise a Krylov
/// iteration on `A*A` from a fixed start vector.
pub fn operator_norm(a: MatRef<'_, C64>, opts: NormOptions) -> Result<f64> {
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidArgument("norm tolerance must be positive".into()));
    }
    let (m, n) = (a.nrows(), a.ncols());
    if m == 0 || n == 0 {
        return Ok(0.0);
    }
    if m.max(n) <= opts.exact_below {
        return Ok(singular_values(a)?.first().copied().unwrap_or(0.0));
    }
    lanczos_norm(&a, opts)
}

fn start_vector(n: usize) -> Vec<C64> {
    let mut v: Vec<C64> = (0..n)
        .map(|k| {
            let s = ((k as f64 + 1.0) * 0.618_033_988_749_895).fract();
            C64::new(0.5 + s, 0.25 * (1.0 - s))
        })
        .collect();
    let nv = norm2(&v);
    v.iter_mut().for_each(|z| *z /= nv);
    v
}

/// Power iteration on `A*A`; the estimate is `‖A v‖` for the current unit vector.
pub fn power_norm(a: &dyn LinearOp, opts: NormOptions) -> Result<f64> {
    let (m, n) = (a.nrows(), a.ncols());
    if m == 0 || n == 0 {
        return Ok(0.0);
    }
    let mut v = start_vector(n);
    let mut av = vec![C64::new(0.0, 0.0); m];
    let mut w = vec![C64::new(0.0, 0.0); n];
    let mut sigma = 0.0f64;
    let mut residual = f64::INFINITY;
    for it in 0..opts.max_iter {
        a.apply(&v, &mut av);
        let s_new = norm2(&av);
        if s_new == 0.0 {
            return Ok(0.0);
        }
        a.apply_adjoint(&av, &mut w);
        let mu = s_new * s_new;
        residual = w.iter().zip(&v).map(|(wi, vi)| (wi - vi * mu).norm_sqr()).sum::<f64>().sqrt() / mu;
        let nw = norm2(&w);
        w.iter().zip(v.iter_mut()).for_each(|(wi, vi)| *vi = wi / nw);
        let rel = (s_new - sigma).abs() / s_new;
        sigma = s_new;
        if it > 2 && (residual < opts.tol || rel < opts.tol * 1e-3) {
            a.apply(&v, &mut av);
            return Ok(norm2(&av).max(sigma));
        }
    }
    Err(Error::NoConvergence { iterations: opts.max_iter, residual })
}

/// Lanczos on `A*A` with full reorthogonalization and restarts from the top
/// Ritz vector. Converges in the same Krylov space as power iteration but
/// in far fewer products.
pub fn lanczos_norm(a: &dyn LinearOp, opts: NormOptions) -> Result<f64> {
    const BLOCK: usize = 60;
    let (m, n) = (a.nrows(), a.ncols());
    if m == 0 || n == 0 {
        return Ok(0.0);
    }
    let mut start = start_vector(n);
    let mut av = vec![C64::new(0.0, 0.0); m];
    let mut used = 0usize;
    let mut residual = f64::INFINITY;
    while used < opts.max_iter {
        let kmax = BLOCK.min(n);
        let mut basis: Vec<Vec<C64>> = vec![start.clone()];
        let mut alpha: Vec<f64> = Vec::new();
        let mut beta: Vec<f64> = Vec::new();
        let mut w = vec![C64::new(0.0, 0.0); n];
        let mut done = false;
        for j in 0..kmax {
            a.apply(&basis[j], &mut av);
            a.apply_adjoint(&av, &mut w);
            used += 1;
            let aj = dot(&basis[j], &w).re;
            alpha.push(aj);
            for _ in 0..2 {
                for q in &basis {
                    let c = dot(q, &w);
                    w.iter_mut().zip(q).for_each(|(wi, qi)| *wi -= qi * c);
                }
            }
            let bj = norm2(&w);
            if bj <= 1e-14 * aj.abs().max(1e-300) || j + 1 == kmax || used >= opts.max_iter {
                done = bj <= 1e-14 * aj.abs().max(1e-300);
                beta.push(bj);
                break;
            }
            beta.push(bj);
            basis.push(w.iter().map(|z| z / bj).collect());
        }
        let k = alpha.len();
        let t = Mat::from_fn(k, k, |i, j| {
            if i == j {
                alpha[i]
            } else if i + 1 == j {
                beta[i]
            } else if j + 1 == i {
                beta[j]
            } else {
                0.0
            }
        });
        let e = t.as_ref().self_adjoint_eigen(Side::Lower).map_err(|e| Error::Linalg(format!("{e:?}")))?;
        let theta = e.S().column_vector()[k - 1];
        if theta <= 0.0 {
            return Ok(0.0);
        }
        let y = e.U().col(k - 1);
        residual = (beta[k - 1] * y[k - 1]).abs() / theta;
        // Ritz-value error for a hermitian problem is quadratic in the residual.
        if done || residual * residual < opts.tol || residual < opts.tol {
            return Ok(theta.sqrt());
        }
        let mut r = vec![C64::new(0.0, 0.0); n];
        for (i, q) in basis.iter().enumerate().take(k) {
            r.iter_mut().zip(q).for_each(|(ri, qi)| *ri += qi * y[i]);
        }
        let nr = norm2(&r);
        start = r.into_iter().map(|z| z / nr).collect();
    }
    Err(Error::NoConvergence { iterations: opts.max_iter, residual })
}

/// One factor of a [`Chain`] term.
#[derive(Clone, Copy)]
pub enum Factor<'a> {
    Mat(MatRef<'a, C64>),
    Adjoint(MatRef<'a, C64>),
    Diag(&'a [C64]),
}

/// Implicit `Σ_k c_k F_k1 F_k2 ⋯`, applied right to left, on square factors.
pub struct Chain<'a> {
    n: usize,
    terms: Vec<(C64, Vec<Factor<'a>>)>,
}

impl<'a> Chain<'a> {
    pub fn new(n: usize) -> Self {
        Chain { n, terms: Vec::new() }
    }
    pub fn term(mut self, c: f64, factors: Vec<Factor<'a>>) -> Self {
        self.terms.push((C64::new(c, 0.0), factors));
        self
    }
    fn run(&self, x: &[C64], y: &mut [C64], adjoint: bool) {
        let mut buf = vec![C64::new(0.0, 0.0); self.n];
        let mut tmp = vec![C64::new(0.0, 0.0); self.n];
        y.iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
        for (c, fs) in &self.terms {
            buf.copy_from_slice(x);
            let order: Box<dyn Iterator<Item = &Factor>> =
                if adjoint { Box::new(fs.iter()) } else { Box::new(fs.iter().rev()) };
            for f in order {
                match (*f, adjoint) {
                    (Factor::Mat(m), false) | (Factor::Adjoint(m), true) => matvec(m, &buf, &mut tmp),
                    (Factor::Mat(m), true) | (Factor::Adjoint(m), false) => matvec_adjoint(m, &buf, &mut tmp),
                    (Factor::Diag(d), adj) => {
                        for ((t, b), dv) in tmp.iter_mut().zip(&buf).zip(d) {
                            *t = if adj { dv.conj() * b } else { dv * b };
                        }
                    }
                }
                std::mem::swap(&mut buf, &mut tmp);
            }
            let c = if adjoint { c.conj() } else { *c };
            y.iter_mut().zip(&buf).for_each(|(yi, b)| *yi += c * b);
        }
    }
}

impl LinearOp for Chain<'_> {
    fn nrows(&self) -> usize {
        self.n
    }
    fn ncols(&self) -> usize {
        self.n
    }
    fn apply(&self, x: &[C64], y: &mut [C64]) {
        self.run(x, y, false)
    }
    fn apply_adjoint(&self, x: &[C64], y: &mut [C64]) {
        self.run(x, y, true)
    }
}

/// Norm of an implicit operator; exact through a dense materialization
/// when small.
pub fn implicit_norm(op: &dyn LinearOp, opts: NormOptions) -> Result<f64> {
    let n = op.ncols();
    if n == 0 {
        return Ok(0.0);
    }
    if op.nrows().max(n) <= opts.exact_below {
        let mut e = vec![C64::new(0.0, 0.0); n];
        let mut colv = vec![C64::new(0.0, 0.0); op.nrows()];
        let mut m = Mat::<C64>::zeros(op.nrows(), n);
        for j in 0..n {
            e[j] = C64::new(1.0, 0.0);
            op.apply(&e, &mut colv);
            e[j] = C64::new(0.0, 0.0);
            for (i, v) in colv.iter().enumerate() {
                m[(i, j)] = *v;
            }
        }
        return Ok(singular_values(m.as_ref())?.first().copied().unwrap_or(0.0));
    }
    lanczos_norm(op, opts)
}

pub fn singular_values(a: MatRef<'_, C64>) -> Result<Vec<f64>> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Ok(Vec::new());
    }
    a.singular_values().map_err(|e| Error::Linalg(format!("{e:?}")))
}

/// Largest entry of `|A − A*|` relative to `max(1, max |A|)`.
pub fn hermitian_asymmetry(a: MatRef<'_, C64>) -> f64 {
    let n = a.nrows();
    let mut asym = 0.0f64;
    let mut scale = 1.0f64;
    for j in 0..n {
        for i in 0..=j {
            let x = a[(i, j)];
            scale = scale.max(x.norm());
            asym = asym.max((x - a[(j, i)].conj()).norm());
        }
    }
    asym / scale
}

/// Eigendecomposition of a hermitian matrix, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct HermitianEigen {
    pub values: Vec<f64>,
    pub vectors: CMat,
}

impl HermitianEigen {
    /// Decompose `a`, refusing inputs whose asymmetry exceeds `1e−10`.
    pub fn new(a: MatRef<'_, C64>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::Shape(format!("{}x{} matrix is not square", a.nrows(), a.ncols())));
        }
        let asym = hermitian_asymmetry(a);
        if asym > 1e-10 {
            return Err(Error::NotHermitian(asym));
        }
        let e = a.self_adjoint_eigen(Side::Lower).map_err(|e| Error::Linalg(format!("{e:?}")))?;
        let values = e.S().column_vector().iter().map(|z| z.re).collect();
        Ok(HermitianEigen { values, vectors: e.U().to_owned() })
    }

    /// Decompose a real symmetric matrix given as complex entries with zero imaginary part.
    pub fn new_real(a: MatRef<'_, f64>) -> Result<Self> {
        let e = a.self_adjoint_eigen(Side::Lower).map_err(|e| Error::Linalg(format!("{e:?}")))?;
        let values = e.S().column_vector().iter().copied().collect();
        let u = e.U();
        let vectors = Mat::from_fn(u.nrows(), u.ncols(), |i, j| C64::new(u[(i, j)], 0.0));
        Ok(HermitianEigen { values, vectors })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// `f(A) = V diag(f(λ)) V*`.
    pub fn apply(&self, f: impl Fn(f64) -> C64) -> CMat {
        let fl: Vec<C64> = self.values.iter().map(|&l| f(l)).collect();
        weighted_outer(self.vectors.as_ref(), &fl)
    }
}

/// `V diag(w) V*`.
pub fn weighted_outer(v: MatRef<'_, C64>, w: &[C64]) -> CMat {
    let n = v.nrows();
    let scaled = Mat::from_fn(n, v.ncols(), |i, j| v[(i, j)] * w[j]);
    &scaled * v.adjoint()
}

pub fn identity(n: usize) -> CMat {
    Mat::from_fn(n, n, |i, j| if i == j { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) })
}

pub fn max_abs(a: MatRef<'_, C64>) -> f64 {
    let mut m = 0.0f64;
    for j in 0..a.ncols() {
        for z in col(a, j) {
            m = m.max(z.norm());
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, m: usize, seed: u64) -> CMat {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(n, m, |_, _| C64::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)))
    }

    #[test]
    fn norm_examples() {
        let opts = NormOptions::default();
        assert!((operator_norm(identity(7).as_ref(), opts).unwrap() - 1.0).abs() < 1e-12);
        let d = Mat::from_fn(3, 3, |i, j| if i == j { C64::new([3.0, 1.0, 0.5][i], 0.0) } else { C64::new(0.0, 0.0) });
        assert!((operator_norm(d.as_ref(), opts).unwrap() - 3.0).abs() < 1e-12);
        let a = random(50, 50, 7);
        let exact = singular_values(a.as_ref()).unwrap()[0];
        for p in [
            power_norm(&a.as_ref(), NormOptions { tol: 1e-12, ..opts }).unwrap(),
            lanczos_norm(&a.as_ref(), NormOptions { tol: 1e-12, ..opts }).unwrap(),
        ] {
            assert!((p - exact).abs() / exact < 1e-8, "{p} vs {exact}");
        }
        let big = random(700, 600, 9);
        let exact = singular_values(big.as_ref()).unwrap()[0];
        let l = operator_norm(big.as_ref(), opts).unwrap();
        assert!((l - exact).abs() / exact < 1e-8, "{l} vs {exact}");
        let b = random(700, 700, 10);
        let sq = Mat::from_fn(700, 700, |i, j| big[(i, j.min(599))] * if j < 600 { 1.0 } else { 0.0 });
        let diff = &(&b * &sq) - &sq;
        let chain = Chain::new(700)
            .term(1.0, vec![Factor::Mat(b.as_ref()), Factor::Mat(sq.as_ref())])
            .term(-1.0, vec![Factor::Mat(sq.as_ref())]);
        let exact = singular_values(diff.as_ref()).unwrap()[0];
        let l = implicit_norm(&chain, opts).unwrap();
        assert!((l - exact).abs() / exact < 1e-8, "{l} vs {exact}");
    }

    #[test]
    fn eigen_reconstructs() {
        let a = random(20, 20, 3);
        let h = &a + a.adjoint();
        let e = HermitianEigen::new(h.as_ref()).unwrap();
        let back = e.apply(|l| C64::new(l, 0.0));
        assert!(max_abs((&back - &h).as_ref()) < 1e-12);
        assert!(matches!(HermitianEigen::new(a.as_ref()), Err(Error::NotHermitian(_))));
    }
}
