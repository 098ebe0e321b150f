//! Convolution algebra of the bundle of groups `T_H G ≅ G × G`, its
//! involution, and the identification of kernels with compact operators.
//!
//! A symbol `α(x, w)` has base point `x` and fiber variable `w`. In the
//! expression language the fiber variable is `y0, y1, …` and bare `sqnorm`
//! means `|y|²`.

use crate::expr::{Expr, MatExpr, Program, Scratch, Var, VarKind};
use crate::heisenberg::{mul_into, HeisenbergDim};
use crate::lattice::Grid;
use crate::linalg::{self, CMat, NormOptions};
use crate::par::{map_range, Execution};
use crate::{Error, Result, C64};
use faer::Mat;
use std::sync::Arc;

/// Decay information for the fiber variable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Support {
    /// Negligible when any fiber coordinate exceeds the radius.
    Radius(f64),
    /// Gaussian-type decay; `Radius(r)` with `r` chosen so the tail is below `1e−10`.
    GaussianDecay { radius: f64 },
}

impl Support {
    pub fn radius(self) -> f64 {
        match self {
            Support::Radius(r) | Support::GaussianDecay { radius: r } => r,
        }
    }
}

/// Scratch buffers for kernel evaluation.
#[derive(Debug, Default, Clone)]
pub struct KernelScratch {
    pub expr: Scratch,
    pub args: Vec<f64>,
    pub pt: Vec<f64>,
    pub tmp: Vec<C64>,
    pub tmp2: Vec<C64>,
    pub tmp3: Vec<C64>,
}

/// A matrix-valued function `α(x, w)` on `G × G`, evaluated pointwise.
pub trait FiberKernel: Send + Sync {
    fn fiber_dim(&self) -> usize;
    /// Number of group coordinates `2n+1`.
    fn ndim(&self) -> usize;
    fn x_independent(&self) -> bool;
    fn support(&self) -> Support;
    /// Per-axis half-widths of a box outside which the kernel is negligible.
    fn support_box(&self) -> Vec<f64> {
        vec![self.support().radius(); self.ndim()]
    }
    /// Write the `d × d` row-major value at `(x, w)` into `out`.
    fn eval(&self, x: &[f64], w: &[f64], out: &mut [C64], sc: &mut KernelScratch);
    /// `α(x, w) = ρ(x) β(w)` with scalar `ρ`, if known.
    fn separable(&self) -> Option<(&Program, &dyn FiberKernel)> {
        None
    }
}

/// Closed-form symbol backed by a matrix expression in `x` and `y`.
#[derive(Debug, Clone)]
pub struct KernelSymbol {
    expr: MatExpr,
    dim: HeisenbergDim,
    support: Support,
    programs: Vec<Program>,
    x_independent: bool,
    split: Option<Box<(Expr, Program, KernelSymbol)>>,
}

impl KernelSymbol {
    pub fn new(expr: MatExpr, dim: HeisenbergDim, support: Support) -> Result<Self> {
        if !expr.is_square() {
            return Err(Error::Shape(format!("symbol must be square, got {}x{}", expr.rows, expr.cols)));
        }
        let m = dim.dim();
        for v in expr.free_vars() {
            if v.kind == VarKind::Xi || v.index >= m {
                return Err(Error::UnboundSymbol(v.to_string()));
            }
        }
        if !(support.radius() > 0.0) {
            return Err(Error::InvalidArgument("support radius must be positive".into()));
        }
        let programs = expr.entries.iter().map(|e| e.compile(m, VarKind::Y)).collect();
        let x_independent = expr.independent_of(VarKind::X, VarKind::Y);
        let split = Self::try_split(&expr, dim, support);
        Ok(KernelSymbol { expr, dim, support, programs, x_independent, split })
    }

    /// Parse-and-build convenience with Gaussian decay radius `radius`.
    pub fn parse(src: &str, dim: HeisenbergDim, radius: f64) -> Result<Self> {
        KernelSymbol::new(crate::expr::parse_matrix(src)?, dim, Support::GaussianDecay { radius })
    }

    fn try_split(expr: &MatExpr, dim: HeisenbergDim, support: Support) -> Option<Box<(Expr, Program, KernelSymbol)>> {
        if expr.rows != 1 || expr.independent_of(VarKind::X, VarKind::Y) {
            return None;
        }
        if let Expr::Mul(a, b) = &expr.entries[0] {
            for (r, g) in [(a, b), (b, a)] {
                if r.independent_of(VarKind::Y, VarKind::Y) && g.independent_of(VarKind::X, VarKind::Y) {
                    let inner = KernelSymbol::new(MatExpr::scalar((**g).clone()), dim, support).ok()?;
                    return Some(Box::new(((**r).clone(), r.compile(dim.dim(), VarKind::Y), inner)));
                }
            }
        }
        None
    }

    /// `(ρ, β)` with `α(x, w) = ρ(x) β(w)`, when the top-level product splits.
    pub fn split_parts(&self) -> Option<(&Expr, &KernelSymbol)> {
        self.split.as_ref().map(|b| (&b.0, &b.2))
    }

    pub fn expr(&self) -> &MatExpr {
        &self.expr
    }
    pub fn dim(&self) -> HeisenbergDim {
        self.dim
    }

    /// Zero-argument convenience evaluation.
    pub fn value(&self, x: &[f64], w: &[f64]) -> Vec<C64> {
        let d = self.fiber_dim();
        let mut out = vec![C64::new(0.0, 0.0); d * d];
        self.eval(x, w, &mut out, &mut KernelScratch::default());
        out
    }
}

impl FiberKernel for KernelSymbol {
    fn fiber_dim(&self) -> usize {
        self.expr.rows
    }
    fn ndim(&self) -> usize {
        self.dim.dim()
    }
    fn x_independent(&self) -> bool {
        self.x_independent
    }
    fn support(&self) -> Support {
        self.support
    }
    fn eval(&self, x: &[f64], w: &[f64], out: &mut [C64], sc: &mut KernelScratch) {
        let m = self.dim.dim();
        sc.args.clear();
        sc.args.extend_from_slice(x);
        sc.args.extend_from_slice(w);
        for (o, p) in out.iter_mut().zip(&self.programs) {
            *o = p.eval(&sc.args, &mut sc.expr);
        }
        debug_assert_eq!(sc.args.len(), 2 * m);
    }
    fn separable(&self) -> Option<(&Program, &dyn FiberKernel)> {
        self.split.as_ref().map(|b| (&b.1, &b.2 as &dyn FiberKernel))
    }
}

/// `α*(x, w) = α(x, w⁻¹)*` (conjugate transpose in the fiber).
#[derive(Clone)]
pub struct Involuted {
    inner: Arc<dyn FiberKernel>,
}

impl Involuted {
    pub fn new(inner: Arc<dyn FiberKernel>) -> Self {
        Involuted { inner }
    }
}

impl FiberKernel for Involuted {
    fn fiber_dim(&self) -> usize {
        self.inner.fiber_dim()
    }
    fn ndim(&self) -> usize {
        self.inner.ndim()
    }
    fn x_independent(&self) -> bool {
        self.inner.x_independent()
    }
    fn support(&self) -> Support {
        self.inner.support()
    }
    fn support_box(&self) -> Vec<f64> {
        self.inner.support_box()
    }
    fn eval(&self, x: &[f64], w: &[f64], out: &mut [C64], sc: &mut KernelScratch) {
        let d = self.fiber_dim();
        let mut winv = std::mem::take(&mut sc.pt);
        winv.clear();
        winv.extend(w.iter().map(|c| -c));
        let mut tmp = std::mem::take(&mut sc.tmp3);
        tmp.resize(d * d, C64::new(0.0, 0.0));
        self.inner.eval(x, &winv, &mut tmp, sc);
        for r in 0..d {
            for c in 0..d {
                out[r * d + c] = tmp[c * d + r].conj();
            }
        }
        sc.pt = winv;
        sc.tmp3 = tmp;
    }
}

/// Symbolic involution of a closed-form symbol.
pub fn involute(a: &KernelSymbol) -> Result<KernelSymbol> {
    let inv = a.expr.adjoint_with(|e| {
        e.expand_sqnorm(a.dim.dim(), VarKind::Y)
            .substitute(&|v: Var| (v.kind == VarKind::Y).then(|| Expr::neg(Expr::var(v))))
    });
    let inv = inv.map(|e| e.simplify());
    KernelSymbol::new(inv, a.dim, a.support)
}

/// `ρ(x) β(w)`.
pub struct Separable {
    rho: Program,
    inner: Arc<dyn FiberKernel>,
}

impl Separable {
    pub fn new(rho: Program, inner: Arc<dyn FiberKernel>) -> Self {
        Separable { rho, inner }
    }
}

impl FiberKernel for Separable {
    fn fiber_dim(&self) -> usize {
        self.inner.fiber_dim()
    }
    fn ndim(&self) -> usize {
        self.inner.ndim()
    }
    fn x_independent(&self) -> bool {
        false
    }
    fn support(&self) -> Support {
        self.inner.support()
    }
    fn support_box(&self) -> Vec<f64> {
        self.inner.support_box()
    }
    fn eval(&self, x: &[f64], w: &[f64], out: &mut [C64], sc: &mut KernelScratch) {
        self.inner.eval(x, w, out, sc);
        let r = self.rho.eval(x, &mut sc.expr);
        out.iter_mut().for_each(|o| *o *= r);
    }
    fn separable(&self) -> Option<(&Program, &dyn FiberKernel)> {
        Some((&self.rho, self.inner.as_ref()))
    }
}

/// x-independent kernel tabulated on a lattice in `w`, trilinearly
/// interpolated and zero outside the lattice.
#[derive(Debug, Clone)]
pub struct GridKernel {
    grid: Grid,
    d: usize,
    values: Vec<C64>,
}

impl GridKernel {
    pub fn new(grid: Grid, d: usize, values: Vec<C64>) -> Result<Self> {
        if values.len() != grid.sites() * d * d {
            return Err(Error::Shape(format!("{} values for {} sites of fiber {d}", values.len(), grid.sites())));
        }
        Ok(GridKernel { grid, d, values })
    }
    pub fn grid(&self) -> &Grid {
        &self.grid
    }
    pub fn values(&self) -> &[C64] {
        &self.values
    }
    pub fn at_site(&self, s: usize) -> &[C64] {
        let dd = self.d * self.d;
        &self.values[s * dd..(s + 1) * dd]
    }
    /// Sample any x-independent kernel on `grid`.
    pub fn tabulate(k: &dyn FiberKernel, grid: Grid, exec: Execution) -> Result<Self> {
        if !k.x_independent() {
            return Err(Error::InvalidArgument("only x-independent kernels can be tabulated".into()));
        }
        let d = k.fiber_dim();
        let m = grid.ndim();
        let x0 = vec![0.0; m];
        let rows = map_range(exec, grid.sites(), |s| {
            let mut sc = KernelScratch::default();
            let mut w = vec![0.0; m];
            grid.point(s, &mut w);
            let mut out = vec![C64::new(0.0, 0.0); d * d];
            k.eval(&x0, &w, &mut out, &mut sc);
            out
        });
        GridKernel::new(grid, d, rows.into_iter().flatten().collect())
    }
}

impl FiberKernel for GridKernel {
    fn fiber_dim(&self) -> usize {
        self.d
    }
    fn ndim(&self) -> usize {
        self.grid.ndim()
    }
    fn x_independent(&self) -> bool {
        true
    }
    fn support(&self) -> Support {
        Support::Radius(self.grid.extent())
    }
    fn eval(&self, _x: &[f64], w: &[f64], out: &mut [C64], _sc: &mut KernelScratch) {
        out.iter_mut().for_each(|o| *o = C64::new(0.0, 0.0));
        let g = &self.grid;
        let h = g.spacing();
        let npts = g.points();
        let m = g.ndim();
        let dd = self.d * self.d;
        let mut base = [0usize; 8];
        let mut frac = [0.0f64; 8];
        for k in 0..m {
            let u = (w[k] + g.extent()) / h;
            if u < 0.0 || u > (npts - 1) as f64 {
                return;
            }
            let i = (u.floor() as usize).min(npts - 2);
            base[k] = i;
            frac[k] = u - i as f64;
        }
        for corner in 0..(1usize << m) {
            let mut wt = 1.0;
            let mut site = 0usize;
            for k in 0..m {
                let bit = (corner >> k) & 1;
                wt *= if bit == 1 { frac[k] } else { 1.0 - frac[k] };
                site = site * npts + base[k] + bit;
            }
            if wt == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(&self.values[site * dd..(site + 1) * dd]) {
                *o += v * wt;
            }
        }
    }
}

#[inline]
fn fiber_matmul_acc(d: usize, a: &[C64], b: &[C64], out: &mut [C64], scale: f64) {
    for r in 0..d {
        for c in 0..d {
            let mut s = C64::new(0.0, 0.0);
            for k in 0..d {
                s += a[r * d + k] * b[k * d + c];
            }
            out[r * d + c] += s * scale;
        }
    }
}

/// Lazy convolution `(a ∗ b)(x, w) = ∫ a(x, w z⁻¹) b(x, z) dz`, with the
/// integral replaced by the Riemann sum over `grid`.
pub struct Convolved {
    a: Arc<dyn FiberKernel>,
    b: Arc<dyn FiberKernel>,
    grid: Grid,
    /// Sites where `b` is not negligible, with the values of `b` when x-independent.
    b_sites: Vec<usize>,
    b_cache: Option<Vec<C64>>,
    mass_loss: f64,
    support_box: Vec<f64>,
}

impl Convolved {
    pub fn new(a: Arc<dyn FiberKernel>, b: Arc<dyn FiberKernel>, grid: Grid) -> Result<Self> {
        let d = a.fiber_dim();
        if b.fiber_dim() != d {
            return Err(Error::DimensionMismatch { expected: d, found: b.fiber_dim() });
        }
        let m = grid.ndim();
        let mut sc = KernelScratch::default();
        let x0 = vec![0.0; m];
        let mut z = vec![0.0; m];
        let mut val = vec![C64::new(0.0, 0.0); d * d];
        let mut mags = Vec::with_capacity(grid.sites());
        let mut all = Vec::with_capacity(grid.sites() * d * d);
        for s in 0..grid.sites() {
            grid.point(s, &mut z);
            b.eval(&x0, &z, &mut val, &mut sc);
            mags.push(val.iter().map(|v| v.norm()).fold(0.0, f64::max));
            all.extend_from_slice(&val);
        }
        let peak = mags.iter().copied().fold(0.0, f64::max);
        let r = b.support().radius();
        let mut b_sites = Vec::new();
        let mut cache = Vec::new();
        let (mut edge, mut total) = (0.0, 0.0);
        let lim = grid.extent() - 0.5 * grid.spacing();
        for s in 0..grid.sites() {
            grid.point(s, &mut z);
            total += mags[s];
            if z.iter().any(|c| c.abs() > lim) {
                edge += mags[s];
            }
            let inside = z.iter().all(|c| c.abs() <= r);
            if !b.x_independent() || (inside && mags[s] > 1e-16 * peak) {
                b_sites.push(s);
                cache.extend_from_slice(&all[s * d * d..(s + 1) * d * d]);
            }
        }
        let mass_loss = if total > 0.0 { edge / total } else { 0.0 };
        let b_cache = b.x_independent().then_some(cache);
        let mut conv = Convolved { a, b, grid, b_sites, b_cache, mass_loss, support_box: Vec::new() };
        conv.support_box = conv.scan_support();
        Ok(conv)
    }

    /// Per-axis extent found by marching out along each coordinate axis
    /// from the identity until the value has dropped by `1e−12`.
    fn scan_support(&self) -> Vec<f64> {
        let m = self.grid.ndim();
        let d = self.fiber_dim();
        let bound = self.a.support().radius() + self.b.support().radius();
        let x0 = vec![0.0; m];
        let mut sc = KernelScratch::default();
        let mut out = vec![C64::new(0.0, 0.0); d * d];
        let mut mag = |w: &[f64], sc: &mut KernelScratch| {
            self.eval(&x0, w, &mut out, sc);
            out.iter().map(|v| v.norm()).fold(0.0, f64::max)
        };
        let peak = mag(&x0, &mut sc);
        if peak == 0.0 {
            return vec![self.grid.spacing(); m];
        }
        let step = 0.125;
        (0..m)
            .map(|k| {
                let mut w = vec![0.0; m];
                let mut r = 0.0;
                let mut quiet = 0;
                let mut last = 0.0;
                while r < bound && quiet < 4 {
                    r += step;
                    let mut v = 0.0f64;
                    for s in [-1.0, 1.0] {
                        w[k] = s * r;
                        v = v.max(mag(&w, &mut sc));
                    }
                    if v < 1e-12 * peak {
                        quiet += 1;
                    } else {
                        quiet = 0;
                        last = r;
                    }
                }
                (1.1 * last + 2.0 * step).min(bound)
            })
            .collect()
    }

    /// Fraction of `|b|` sitting on the outer layer of the grid; a proxy for
    /// the mass the truncated quadrature loses.
    pub fn mass_loss(&self) -> f64 {
        self.mass_loss
    }
}

impl FiberKernel for Convolved {
    fn fiber_dim(&self) -> usize {
        self.a.fiber_dim()
    }
    fn ndim(&self) -> usize {
        self.grid.ndim()
    }
    fn x_independent(&self) -> bool {
        self.a.x_independent() && self.b.x_independent()
    }
    fn support(&self) -> Support {
        let r = self.support_box.iter().copied().fold(0.0, f64::max);
        Support::GaussianDecay {
            radius: if r > 0.0 { r } else { self.a.support().radius() + self.b.support().radius() },
        }
    }
    fn support_box(&self) -> Vec<f64> {
        self.support_box.clone()
    }
    fn eval(&self, x: &[f64], w: &[f64], out: &mut [C64], sc: &mut KernelScratch) {
        let d = self.fiber_dim();
        let dd = d * d;
        let m = self.grid.ndim();
        let n = (m - 1) / 2;
        let vol = self.grid.cell_volume();
        out.iter_mut().for_each(|o| *o = C64::new(0.0, 0.0));
        let mut z = vec![0.0; m];
        let mut zinv = vec![0.0; m];
        let mut wz = vec![0.0; m];
        let mut av = std::mem::take(&mut sc.tmp);
        let mut bv = std::mem::take(&mut sc.tmp2);
        av.resize(dd, C64::new(0.0, 0.0));
        bv.resize(dd, C64::new(0.0, 0.0));
        let ra = self.a.support().radius();
        for (k, &s) in self.b_sites.iter().enumerate() {
            self.grid.point(s, &mut z);
            zinv.iter_mut().zip(&z).for_each(|(o, c)| *o = -c);
            mul_into(n, w, &zinv, &mut wz);
            if wz.iter().any(|c| c.abs() > ra) {
                continue;
            }
            self.a.eval(x, &wz, &mut av, sc);
            match &self.b_cache {
                Some(c) => bv.copy_from_slice(&c[k * dd..(k + 1) * dd]),
                None => self.b.eval(x, &z, &mut bv, sc),
            }
            fiber_matmul_acc(d, &av, &bv, out, vol);
        }
        sc.tmp = av;
        sc.tmp2 = bv;
    }
}

/// Symbol samples on grid × grid: `values[(xs * sites + ws) * d² + k]`, or
/// one row when the symbol does not depend on `x`.
#[derive(Debug, Clone)]
pub struct SampledSymbol {
    pub grid: Grid,
    pub d: usize,
    pub x_independent: bool,
    pub values: Vec<C64>,
    /// Boundary-mass proxy for quadrature truncation.
    pub mass_loss: f64,
}

impl SampledSymbol {
    pub fn at(&self, xs: usize, ws: usize) -> &[C64] {
        let dd = self.d * self.d;
        let row = if self.x_independent { 0 } else { xs };
        let k = row * self.grid.sites() + ws;
        &self.values[k * dd..(k + 1) * dd]
    }
}

/// x-independent kernel tabulated on the cubic lattice `spacing·ℤ^m` around the
/// identity. Lattice points are returned exactly; other points use
/// Catmull–Rom interpolation per axis. Zero outside the table.
#[derive(Debug, Clone)]
pub struct TabulatedKernel {
    d: usize,
    spacing: f64,
    half: Vec<usize>,
    values: Vec<C64>,
}

impl TabulatedKernel {
    pub fn new(d: usize, spacing: f64, half: Vec<usize>, values: Vec<C64>) -> Result<Self> {
        let total: usize = half.iter().map(|h| 2 * h + 1).product();
        if values.len() != total * d * d {
            return Err(Error::Shape(format!("{} values for {total} nodes of fiber {d}", values.len())));
        }
        if !(spacing > 0.0) {
            return Err(Error::InvalidArgument(format!("spacing must be positive, got {spacing}")));
        }
        Ok(TabulatedKernel { d, spacing, half, values })
    }
    pub fn spacing(&self) -> f64 {
        self.spacing
    }
    pub fn half(&self) -> &[usize] {
        &self.half
    }
    pub fn values(&self) -> &[C64] {
        &self.values
    }

    fn offset(&self, idx: &[i64]) -> Option<usize> {
        let mut k = 0usize;
        for (a, &i) in idx.iter().enumerate() {
            let h = self.half[a] as i64;
            if i < -h || i > h {
                return None;
            }
            k = k * (2 * self.half[a] + 1) + (i + h) as usize;
        }
        Some(k)
    }

    /// Trim to the bounding box (symmetric per axis) of values above `tol·peak`.
    fn trimmed(self, tol: f64) -> Self {
        let m = self.half.len();
        let dd = self.d * self.d;
        let peak = self.values.iter().map(|v| v.norm()).fold(0.0, f64::max);
        let dims: Vec<usize> = self.half.iter().map(|h| 2 * h + 1).collect();
        let mut reach = vec![0usize; m];
        for (k, chunk) in self.values.chunks(dd).enumerate() {
            if chunk.iter().map(|v| v.norm()).fold(0.0, f64::max) <= tol * peak {
                continue;
            }
            let mut r = k;
            for a in (0..m).rev() {
                let i = r % dims[a];
                r /= dims[a];
                reach[a] = reach[a].max((i as i64 - self.half[a] as i64).unsigned_abs() as usize);
            }
        }
        let total: usize = reach.iter().map(|h| 2 * h + 1).product();
        let mut values = Vec::with_capacity(total * dd);
        let mut idx = vec![0i64; m];
        for k in 0..total {
            let mut r = k;
            for a in (0..m).rev() {
                let w = 2 * reach[a] + 1;
                idx[a] = (r % w) as i64 - reach[a] as i64;
                r /= w;
            }
            let o = self.offset(&idx).expect("trimmed box lies inside");
            values.extend_from_slice(&self.values[o * dd..(o + 1) * dd]);
        }
        TabulatedKernel { d: self.d, spacing: self.spacing, half: reach, values }
    }

    /// Sample an x-independent kernel over its support box.
    pub fn sample(k: &dyn FiberKernel, spacing: f64, tol: f64, exec: Execution) -> Result<Self> {
        if !k.x_independent() {
            return Err(Error::InvalidArgument("only x-independent kernels can be tabulated".into()));
        }
        let m = k.ndim();
        let d = k.fiber_dim();
        let half: Vec<usize> = k.support_box().iter().map(|r| (r / spacing).ceil().max(1.0) as usize).collect();
        let dims: Vec<usize> = half.iter().map(|h| 2 * h + 1).collect();
        let total: usize = dims.iter().product();
        let rows = map_range(exec, total, |idx| {
            let mut w = vec![0.0; m];
            let mut r = idx;
            for a in (0..m).rev() {
                w[a] = ((r % dims[a]) as f64 - half[a] as f64) * spacing;
                r /= dims[a];
            }
            let mut out = vec![C64::new(0.0, 0.0); d * d];
            k.eval(&vec![0.0; m], &w, &mut out, &mut KernelScratch::default());
            out
        });
        Ok(TabulatedKernel::new(d, spacing, half, rows.into_iter().flatten().collect())?.trimmed(tol))
    }
}

fn catmull_rom(u: f64) -> [f64; 4] {
    let u2 = u * u;
    let u3 = u2 * u;
    [0.5 * (-u3 + 2.0 * u2 - u), 0.5 * (3.0 * u3 - 5.0 * u2 + 2.0), 0.5 * (-3.0 * u3 + 4.0 * u2 + u), 0.5 * (u3 - u2)]
}

impl FiberKernel for TabulatedKernel {
    fn fiber_dim(&self) -> usize {
        self.d
    }
    fn ndim(&self) -> usize {
        self.half.len()
    }
    fn x_independent(&self) -> bool {
        true
    }
    fn support(&self) -> Support {
        let r = self.half.iter().copied().max().unwrap_or(0) as f64 * self.spacing;
        Support::GaussianDecay { radius: r }
    }
    fn support_box(&self) -> Vec<f64> {
        self.half.iter().map(|&h| h as f64 * self.spacing).collect()
    }
    fn eval(&self, _x: &[f64], w: &[f64], out: &mut [C64], _sc: &mut KernelScratch) {
        let m = self.half.len();
        let dd = self.d * self.d;
        out.iter_mut().for_each(|o| *o = C64::new(0.0, 0.0));
        let mut base = [0i64; 8];
        let mut wts = [[0.0f64; 4]; 8];
        let mut exact = true;
        for a in 0..m {
            let u = w[a] / self.spacing;
            let r = u.round();
            if (u - r).abs() < 1e-9 {
                base[a] = r as i64;
                wts[a] = [0.0, 1.0, 0.0, 0.0];
            } else {
                exact = false;
                let f = u.floor();
                base[a] = f as i64;
                wts[a] = catmull_rom(u - f);
            }
        }
        if exact {
            if let Some(o) = self.offset(&base[..m]) {
                out.copy_from_slice(&self.values[o * dd..(o + 1) * dd]);
            }
            return;
        }
        let mut idx = [0i64; 8];
        for combo in 0..4usize.pow(m as u32) {
            let mut r = combo;
            let mut wt = 1.0;
            for a in 0..m {
                let j = r % 4;
                r /= 4;
                wt *= wts[a][j];
                idx[a] = base[a] + j as i64 - 1;
            }
            if wt == 0.0 {
                continue;
            }
            if let Some(o) = self.offset(&idx[..m]) {
                for (q, v) in out.iter_mut().zip(&self.values[o * dd..(o + 1) * dd]) {
                    *q += v * wt;
                }
            }
        }
    }
}

/// `a ∗ b` for x-independent kernels, tabulated on `spacing·ℤ^m`.
///
/// The inner integral is a lattice sum over `u`. In the central variable it is
/// a one-dimensional convolution evaluated at the sheared point
/// `w_0 − ½ω(u_h, w_h)`, done exactly on trigonometric interpolants by an FFT
/// whose period leaves no aliasing inside the supports.
pub fn convolve_tabulated(
    a: &dyn FiberKernel,
    b: &dyn FiberKernel,
    spacing: f64,
    tol: f64,
    exec: Execution,
) -> Result<TabulatedKernel> {
    use rustfft::FftPlanner;
    let d = a.fiber_dim();
    if b.fiber_dim() != d || b.ndim() != a.ndim() {
        return Err(Error::DimensionMismatch { expected: d, found: b.fiber_dim() });
    }
    let m = a.ndim();
    let n = (m - 1) / 2;
    let dd = d * d;
    let s = spacing;
    let ta = TabulatedKernel::sample(a, s, tol, exec)?;
    let tb = TabulatedKernel::sample(b, s, tol, exec)?;
    // horizontal boxes
    let ha: Vec<i64> = ta.half[1..].iter().map(|&h| h as i64).collect();
    let hb: Vec<i64> = tb.half[1..].iter().map(|&h| h as i64).collect();
    let ho: Vec<i64> = ha.iter().zip(&hb).map(|(x, y)| x + y).collect();
    let shear_max: f64 = (0..n).map(|j| 0.5 * s * s * (ha[j] * ho[n + j] + ho[j] * ha[n + j]) as f64).sum();
    let (ja, jb) = (ta.half[0] as i64, tb.half[0] as i64);
    let jo = ja + jb + (shear_max / s).ceil() as i64;
    let period = jo as f64 * s + shear_max + (ja + jb) as f64 * s;
    let mut mlen = ((period / s).ceil() as usize + 1).max(2 * jo as usize + 1);
    if mlen % 2 == 0 {
        mlen += 1;
    }
    let fwd = FftPlanner::<f64>::new().plan_fft_forward(mlen);
    let inv = FftPlanner::<f64>::new().plan_fft_inverse(mlen);
    let boxes = |h: &[i64]| -> Vec<Vec<i64>> {
        let dims: Vec<usize> = h.iter().map(|&x| (2 * x + 1) as usize).collect();
        let total: usize = dims.iter().product();
        (0..total)
            .map(|k| {
                let mut r = k;
                let mut v = vec![0i64; h.len()];
                for a in (0..h.len()).rev() {
                    v[a] = (r % dims[a]) as i64 - h[a];
                    r /= dims[a];
                }
                v
            })
            .collect()
    };
    // central transforms, layout [horizontal][fiber][frequency]
    let spectra = |t: &TabulatedKernel, hs: &[Vec<i64>]| -> Vec<C64> {
        let j = t.half[0] as i64;
        let mut out = vec![C64::new(0.0, 0.0); hs.len() * dd * mlen];
        let mut idx = vec![0i64; m];
        for (k, h) in hs.iter().enumerate() {
            idx[1..].copy_from_slice(h);
            for f in 0..dd {
                let buf = &mut out[(k * dd + f) * mlen..(k * dd + f + 1) * mlen];
                for c in -j..=j {
                    idx[0] = c;
                    if let Some(o) = t.offset(&idx) {
                        buf[c.rem_euclid(mlen as i64) as usize] = t.values[o * dd + f];
                    }
                }
                fwd.process(buf);
            }
        }
        out
    };
    let ua = boxes(&ha);
    let ub = boxes(&hb);
    let wo = boxes(&ho);
    let sa = spectra(&ta, &ua);
    let sb = spectra(&tb, &ub);
    let b_index = |v: &[i64]| -> Option<usize> {
        let mut k = 0usize;
        for (a, &x) in v.iter().enumerate() {
            if x.abs() > hb[a] {
                return None;
            }
            k = k * (2 * hb[a] + 1) as usize + (x + hb[a]) as usize;
        }
        Some(k)
    };
    let lam: Vec<f64> = (0..mlen)
        .map(|k| {
            let kk = if k <= mlen / 2 { k as f64 } else { k as f64 - mlen as f64 };
            2.0 * std::f64::consts::PI * kk / (mlen as f64 * s)
        })
        .collect();
    let weight = s.powi(m as i32) / mlen as f64;
    let rows = map_range(exec, wo.len(), |k| {
        let w = &wo[k];
        let mut acc = vec![C64::new(0.0, 0.0); dd * mlen];
        let mut v = vec![0i64; 2 * n];
        let mut phase = vec![C64::new(0.0, 0.0); mlen];
        for (ku, u) in ua.iter().enumerate() {
            for a in 0..2 * n {
                v[a] = w[a] - u[a];
            }
            let Some(kb) = b_index(&v) else { continue };
            let c: f64 = (0..n).map(|j| 0.5 * s * s * (u[j] * w[n + j] - w[j] * u[n + j]) as f64).sum();
            for (p, l) in phase.iter_mut().zip(&lam) {
                *p = C64::from_polar(1.0, -l * c);
            }
            for r in 0..d {
                for q in 0..d {
                    let out = &mut acc[(r * d + q) * mlen..(r * d + q + 1) * mlen];
                    for kk in 0..d {
                        let fa = &sa[(ku * dd + r * d + kk) * mlen..(ku * dd + r * d + kk + 1) * mlen];
                        let fb = &sb[(kb * dd + kk * d + q) * mlen..(kb * dd + kk * d + q + 1) * mlen];
                        for i in 0..mlen {
                            out[i] += fa[i] * fb[i] * phase[i];
                        }
                    }
                }
            }
        }
        let mut col = vec![C64::new(0.0, 0.0); (2 * jo + 1) as usize * dd];
        for f in 0..dd {
            let buf = &mut acc[f * mlen..(f + 1) * mlen];
            inv.process(buf);
            for (jj, c) in (-jo..=jo).enumerate() {
                col[jj * dd + f] = buf[c.rem_euclid(mlen as i64) as usize] * weight;
            }
        }
        col
    });
    // reorder to [central][horizontal] row-major with the central axis first
    let nh = wo.len();
    let nc = (2 * jo + 1) as usize;
    let mut values = vec![C64::new(0.0, 0.0); nc * nh * dd];
    for (k, col) in rows.iter().enumerate() {
        for jj in 0..nc {
            let o = (jj * nh + k) * dd;
            values[o..o + dd].copy_from_slice(&col[jj * dd..(jj + 1) * dd]);
        }
    }
    let mut half = vec![jo as usize];
    half.extend(ho.iter().map(|&h| h as usize));
    Ok(TabulatedKernel::new(d, s, half, values)?.trimmed(tol))
}

/// Lattice for the inner integral of `a ∗ b`: covers the support of `b`
/// with spacing at most `spacing` and at most the spacing of `base`.
pub fn quadrature_grid(b: &dyn FiberKernel, base: &Grid, spacing: f64) -> Result<Grid> {
    if !(spacing > 0.0) {
        return Err(Error::InvalidArgument(format!("quadrature spacing must be positive, got {spacing}")));
    }
    let s = spacing.min(base.spacing());
    let r = b.support_box().into_iter().fold(0.0, f64::max);
    let r = if r > 0.0 { r } else { base.extent() };
    let half = (r / s).ceil().max(1.0) as usize;
    Grid::new(base.heisenberg(), 2 * half + 1, half as f64 * s)
}

/// Sample `a ∗ b` at every grid pair `(x, w)`.
pub fn convolve(a: Arc<dyn FiberKernel>, b: Arc<dyn FiberKernel>, g: &Grid, exec: Execution) -> Result<SampledSymbol> {
    let conv = Convolved::new(a, b, *g)?;
    let d = conv.fiber_dim();
    let xi = conv.x_independent();
    let m = g.ndim();
    let sites = g.sites();
    let xrows = if xi { 1 } else { sites };
    let rows = map_range(exec, xrows * sites, |k| {
        let (xs, ws) = (k / sites, k % sites);
        let mut sc = KernelScratch::default();
        let mut x = vec![0.0; m];
        let mut w = vec![0.0; m];
        if !xi {
            g.point(xs, &mut x);
        }
        g.point(ws, &mut w);
        let mut out = vec![C64::new(0.0, 0.0); d * d];
        conv.eval(&x, &w, &mut out, &mut sc);
        out
    });
    Ok(SampledSymbol {
        grid: *g,
        d,
        x_independent: xi,
        values: rows.into_iter().flatten().collect(),
        mass_loss: conv.mass_loss(),
    })
}

/// Element of `K(L²(G) ⊗ ℂ^d)` on a lattice. Index `site * d + a`; the
/// quadrature weight is part of the entries.
#[derive(Debug, Clone)]
pub struct CompactOperatorMatrix {
    grid: Grid,
    d: usize,
    mat: CMat,
}

impl CompactOperatorMatrix {
    pub fn new(grid: Grid, d: usize, mat: CMat) -> Result<Self> {
        let side = grid.sites() * d;
        if mat.nrows() != side || mat.ncols() != side {
            return Err(Error::Shape(format!("expected {side}x{side}, got {}x{}", mat.nrows(), mat.ncols())));
        }
        Ok(CompactOperatorMatrix { grid, d, mat })
    }
    pub fn zeros(grid: Grid, d: usize) -> Self {
        let side = grid.sites() * d;
        CompactOperatorMatrix { grid, d, mat: Mat::zeros(side, side) }
    }
    pub fn identity(grid: Grid, d: usize) -> Self {
        CompactOperatorMatrix { grid, d, mat: linalg::identity(grid.sites() * d) }
    }
    pub fn grid(&self) -> &Grid {
        &self.grid
    }
    pub fn fiber_dim(&self) -> usize {
        self.d
    }
    pub fn side(&self) -> usize {
        self.mat.nrows()
    }
    pub fn mat(&self) -> &CMat {
        &self.mat
    }
    pub fn into_mat(self) -> CMat {
        self.mat
    }
    fn check(&self, o: &Self) -> Result<()> {
        if self.side() != o.side() || self.d != o.d {
            return Err(Error::DimensionMismatch { expected: self.side(), found: o.side() });
        }
        Ok(())
    }
    pub fn add(&self, o: &Self) -> Result<Self> {
        self.check(o)?;
        Ok(CompactOperatorMatrix { grid: self.grid, d: self.d, mat: &self.mat + &o.mat })
    }
    pub fn sub(&self, o: &Self) -> Result<Self> {
        self.check(o)?;
        Ok(CompactOperatorMatrix { grid: self.grid, d: self.d, mat: &self.mat - &o.mat })
    }
    pub fn scale(&self, s: C64) -> Self {
        let mat = Mat::from_fn(self.side(), self.side(), |i, j| self.mat[(i, j)] * s);
        CompactOperatorMatrix { grid: self.grid, d: self.d, mat }
    }
    pub fn matmul(&self, o: &Self) -> Result<Self> {
        self.check(o)?;
        Ok(CompactOperatorMatrix { grid: self.grid, d: self.d, mat: &self.mat * &o.mat })
    }
    pub fn adjoint(&self) -> Self {
        CompactOperatorMatrix { grid: self.grid, d: self.d, mat: self.mat.adjoint().to_owned() }
    }
    /// `diag(f) A` with one scalar per site.
    pub fn mul_sites_left(&self, f: &[C64]) -> Self {
        let d = self.d;
        let mat = Mat::from_fn(self.side(), self.side(), |i, j| f[i / d] * self.mat[(i, j)]);
        CompactOperatorMatrix { grid: self.grid, d, mat }
    }
    /// `A diag(f)` with one scalar per site.
    pub fn mul_sites_right(&self, f: &[C64]) -> Self {
        let d = self.d;
        let mat = Mat::from_fn(self.side(), self.side(), |i, j| self.mat[(i, j)] * f[j / d]);
        CompactOperatorMatrix { grid: self.grid, d, mat }
    }
    /// Compression to the sites where `mask` is true.
    pub fn restrict(&self, mask: &[bool]) -> CMat {
        let idx: Vec<usize> = (0..self.side()).filter(|&i| mask[i / self.d]).collect();
        Mat::from_fn(idx.len(), idx.len(), |i, j| self.mat[(idx[i], idx[j])])
    }
    pub fn apply(&self, v: &[C64]) -> Vec<C64> {
        let mut out = vec![C64::new(0.0, 0.0); self.side()];
        linalg::matvec(self.mat.as_ref(), v, &mut out);
        out
    }
}

/// Operator kernel `K(x, y)` sampled on grid × grid (no quadrature weight).
#[derive(Debug, Clone)]
pub struct PairKernel {
    pub grid: Grid,
    pub d: usize,
    /// Side `sites · d`, entry `(x·d + a, y·d + b)`.
    pub values: CMat,
}

/// `(Op K) f (x) = Σ_y K(x, y) f(y) h^{2n+1}`.
pub fn kernel_to_operator(k: &PairKernel, g: &Grid) -> Result<CompactOperatorMatrix> {
    if k.grid != *g {
        return Err(Error::InvalidArgument("kernel sampled on a different grid".into()));
    }
    let w = g.cell_volume();
    let mat = Mat::from_fn(k.values.nrows(), k.values.ncols(), |i, j| k.values[(i, j)] * w);
    CompactOperatorMatrix::new(*g, k.d, mat)
}

/// Largest singular value with relative tolerance `tol`.
pub fn operator_norm(a: &CompactOperatorMatrix, tol: f64) -> Result<f64> {
    linalg::operator_norm(a.mat.as_ref(), NormOptions { tol, ..NormOptions::default() })
}

/// Sum of the diagonal, fiber-traced.
pub fn trace(a: &CompactOperatorMatrix) -> C64 {
    (0..a.side()).map(|i| a.mat[(i, i)]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize, l: f64) -> Grid {
        Grid::new(HeisenbergDim::new(1).unwrap(), n, l).unwrap()
    }

    #[test]
    fn tabulated_product_matches_direct_quadrature() {
        let d = HeisenbergDim::new(1).unwrap();
        let a = KernelSymbol::parse("(1 + y1 + i*y0)*exp(-sqnorm)", d, 3.5).unwrap();
        let b = KernelSymbol::parse("(y2 - 0.5*i*y0)*exp(-2*sqnorm(y)/3)", d, 3.5).unwrap();
        let s = 0.25;
        let tab = convolve_tabulated(&a, &b, s, 1e-14, Execution::Sequential).unwrap();
        let q = Grid::new(d, 57, 28.0 * s).unwrap();
        let direct = Convolved::new(Arc::new(a), Arc::new(b), q).unwrap();
        let mut sc = KernelScratch::default();
        let (mut o1, mut o2) = (vec![C64::new(0.0, 0.0)], vec![C64::new(0.0, 0.0)]);
        // lattice points are exact up to the central interpolant; off-lattice
        // points carry the cubic interpolation error
        for (w, tol) in [
            ([0.0, 0.0, 0.0], 1e-6),
            ([0.5, -0.25, 0.75], 1e-6),
            ([-1.0, 0.5, 0.25], 1e-6),
            ([0.25, 1.0, -1.5], 1e-6),
            ([1.125, 0.0, 0.5], 1e-3),
        ] {
            tab.eval(&[0.0; 3], &w, &mut o1, &mut sc);
            direct.eval(&[0.0; 3], &w, &mut o2, &mut sc);
            assert!((o1[0] - o2[0]).norm() < tol, "{w:?}: {} vs {}", o1[0], o2[0]);
        }
    }

    #[test]
    fn separable_split_detected() {
        let d = HeisenbergDim::new(1).unwrap();
        let a = KernelSymbol::parse("(1 + x1^2)*exp(-sqnorm)", d, 5.0).unwrap();
        assert!(a.separable().is_some());
        assert!(!a.x_independent());
        let b = KernelSymbol::parse("exp(-sqnorm - x1^2)", d, 5.0).unwrap();
        assert!(b.separable().is_none());
        let c = KernelSymbol::parse("exp(-sqnorm)", d, 5.0).unwrap();
        assert!(c.x_independent());
    }

    #[test]
    fn involution_matches_lazy_form() {
        let d = HeisenbergDim::new(1).unwrap();
        let a = KernelSymbol::parse("[[x1*exp(-sqnorm), i*y1], [y0 + 2*i*x2, exp(-sqnorm(y)/2)*y2]]", d, 5.0).unwrap();
        let sym = involute(&a).unwrap();
        let lazy = Involuted::new(Arc::new(a.clone()));
        let (x, w) = ([0.3, -0.2, 0.5], [0.7, 0.1, -0.4]);
        let mut o1 = vec![C64::new(0.0, 0.0); 4];
        let mut o2 = o1.clone();
        let mut sc = KernelScratch::default();
        sym.eval(&x, &w, &mut o1, &mut sc);
        lazy.eval(&x, &w, &mut o2, &mut sc);
        for (p, q) in o1.iter().zip(&o2) {
            assert!((p - q).norm() < 1e-14);
        }
        let back = involute(&sym).unwrap();
        let mut o3 = o1.clone();
        back.eval(&x, &w, &mut o3, &mut sc);
        a.eval(&x, &w, &mut o1, &mut sc);
        for (p, q) in o1.iter().zip(&o3) {
            assert!((p - q).norm() < 1e-14);
        }
    }

    #[test]
    fn grid_kernel_interpolates_linear_functions_exactly() {
        let g = grid(5, 2.0);
        let d = HeisenbergDim::new(1).unwrap();
        let lin = KernelSymbol::parse("1 + y0 - 2*y1 + 0.5*y2", d, 3.0).unwrap();
        let t = GridKernel::tabulate(&lin, g, Execution::Sequential).unwrap();
        let w = [0.33, -0.71, 1.2];
        let mut out = [C64::new(0.0, 0.0)];
        t.eval(&[0.0; 3], &w, &mut out, &mut KernelScratch::default());
        assert!((out[0].re - (1.0 + 0.33 + 1.42 + 0.6)).abs() < 1e-12);
        t.eval(&[0.0; 3], &[3.0, 0.0, 0.0], &mut out, &mut KernelScratch::default());
        assert_eq!(out[0], C64::new(0.0, 0.0));
    }

    #[test]
    fn delta_is_approximate_unit() {
        let g = grid(7, 3.0);
        let d = HeisenbergDim::new(1).unwrap();
        let a: Arc<dyn FiberKernel> = Arc::new(KernelSymbol::parse("(1 + x1/4)*exp(-sqnorm)", d, 6.0).unwrap());
        let mut vals = vec![C64::new(0.0, 0.0); g.sites()];
        vals[g.origin()] = C64::new(1.0 / g.cell_volume(), 0.0);
        let delta: Arc<dyn FiberKernel> = Arc::new(GridKernel::new(g, 1, vals).unwrap());
        let s = convolve(a.clone(), delta, &g, Execution::Sequential).unwrap();
        let mut sc = KernelScratch::default();
        let mut out = [C64::new(0.0, 0.0)];
        for (xs, ws) in [(0usize, 5usize), (100, 171), (200, 200)] {
            a.eval(&g.point_vec(xs), &g.point_vec(ws), &mut out, &mut sc);
            assert!((s.at(xs, ws)[0] - out[0]).norm() < 1e-12);
        }
    }

    #[test]
    fn operator_helpers() {
        let g = grid(3, 1.0);
        let mut k = PairKernel { grid: g, d: 1, values: Mat::zeros(27, 27) };
        for i in 0..27 {
            k.values[(i, i)] = C64::new(1.0 / g.cell_volume(), 0.0);
        }
        let op = kernel_to_operator(&k, &g).unwrap();
        assert!((trace(&op) - C64::new(27.0, 0.0)).norm() < 1e-12);
        assert!((operator_norm(&op, 1e-10).unwrap() - 1.0).abs() < 1e-12);
        let z = kernel_to_operator(&PairKernel { grid: g, d: 1, values: Mat::zeros(27, 27) }, &g).unwrap();
        assert_eq!(operator_norm(&z, 1e-10).unwrap(), 0.0);
    }
}
