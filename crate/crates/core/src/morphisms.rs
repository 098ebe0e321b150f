//! The Heisenberg asymptotic morphism `T^t_H`, the ordinary (Higson)
//! morphism `T^t`, the correspondence `α ↦ α̃`, and the defect and
//! equivariance diagnostics.
//!
//! Both morphisms send a symbol to the operator with kernel
//! `c_t α(x, φ_t(x, y))`, where `φ_t(x, y) = δ_t(x y⁻¹)` in the Heisenberg
//! case and `t (x − y)` in the abelian case. Two discretizations are offered:
//!
//! * [`Assembly::Collocation`] samples that kernel at lattice pairs.
//! * [`Assembly::HatProjected`] substitutes `w = φ_t(x, y)`, integrates the
//!   symbol on a node lattice in `w` and deposits onto trilinear hats in `y`.
//!   It stays accurate when the kernel is narrower than the lattice spacing.

use crate::expr::{Expr, MatExpr, Program, Scratch, VarKind};
use crate::groupoid::{
    convolve_tabulated, involute, quadrature_grid, CompactOperatorMatrix, Convolved, FiberKernel, KernelScratch,
    KernelSymbol, Separable,
};
use crate::heisenberg::{dilate_into, mul_into, HeisenbergDim};
use crate::lattice::Grid;
use crate::linalg::{implicit_norm, CMat, Chain, Factor, NormOptions};
use crate::par::{map_range, Execution};
use crate::{Error, Result, C64};
use faer::{Mat, MatRef};
use std::sync::Arc;

/// Scale parameter `t > 0`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct TScale(f64);

impl TScale {
    pub fn new(t: f64) -> Result<Self> {
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::InvalidArgument(format!("scale must be positive, got {t}")));
        }
        Ok(TScale(t))
    }
    pub fn value(self) -> f64 {
        self.0
    }
    /// `t0 · r^k` for `k = 0..count`.
    pub fn geometric(t0: f64, ratio: f64, count: usize) -> Result<Vec<TScale>> {
        if !(ratio > 1.0) {
            return Err(Error::InvalidArgument(format!("ratio must exceed 1, got {ratio}")));
        }
        (0..count).map(|k| TScale::new(t0 * ratio.powi(k as i32))).collect()
    }
    pub fn list(ts: &[f64]) -> Result<Vec<TScale>> {
        ts.iter().map(|&t| TScale::new(t)).collect()
    }
}

/// Power of `t` in front of the Heisenberg kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalization {
    /// `t^{2n+2}`, the homogeneous dimension; `T^t_H` then has a finite nonzero limit.
    #[default]
    Homogeneous,
    /// `t^{2n+1}`, the topological dimension.
    Topological,
}

impl Normalization {
    pub fn prefactor(self, t: f64, d: HeisenbergDim) -> f64 {
        match self {
            Normalization::Homogeneous => t.powi(d.homogeneous_dim() as i32),
            Normalization::Topological => t.powi(d.dim() as i32),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Assembly {
    Collocation,
    #[default]
    HatProjected,
}

#[derive(Debug, Clone, Copy)]
pub struct MorphismOptions {
    pub normalization: Normalization,
    pub assembly: Assembly,
    /// Node spacing for integrating the symbol in `w`.
    pub node_spacing: f64,
    /// Pulled-back nodes are at most `h / resolution` apart.
    pub resolution: f64,
    /// Nodes below this fraction of the peak value are skipped.
    pub drop_tol: f64,
    /// Characteristic width of the symbol in `w`; used for the under-resolution flag.
    pub kernel_width: f64,
    /// Quadrature spacing for symbol products `a ∗ b`; capped by the lattice spacing.
    pub quadrature_spacing: f64,
    /// Defects and norms are measured on sites with every coordinate within
    /// this fraction of the extent; `None` measures on the whole lattice.
    pub band: Option<f64>,
    pub exec: Execution,
    pub norm: NormOptions,
}

impl Default for MorphismOptions {
    fn default() -> Self {
        MorphismOptions {
            normalization: Normalization::default(),
            assembly: Assembly::default(),
            node_spacing: 0.5,
            resolution: 3.0,
            drop_tol: 1e-10,
            kernel_width: 1.0,
            quadrature_spacing: 0.25,
            band: Some(0.5),
            exec: Execution::default(),
            norm: NormOptions { tol: 1e-6, ..NormOptions::default() },
        }
    }
}

/// Which group law the kernel variable is read in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Law {
    Heisenberg,
    Abelian,
}

impl Law {
    /// `φ_t(x, y)`.
    fn forward(self, n: usize, t: f64, x: &[f64], y: &[f64], out: &mut [f64], tmp: &mut [f64]) {
        match self {
            Law::Heisenberg => {
                let yinv: Vec<f64> = y.iter().map(|c| -c).collect();
                mul_into(n, x, &yinv, tmp);
                dilate_into(t, tmp, out);
            }
            Law::Abelian => {
                for k in 0..x.len() {
                    out[k] = t * (x[k] - y[k]);
                }
            }
        }
    }
    /// `w ↦ w'` with `φ_1(x, y) = w'` whenever `φ_t(x, y) = w`.
    fn pull(self, t: f64, w: &[f64], out: &mut [f64]) {
        match self {
            Law::Heisenberg => dilate_into(1.0 / t, w, out),
            Law::Abelian => out.iter_mut().zip(w).for_each(|(o, c)| *o = c / t),
        }
    }
    /// `y` with `φ_1(x, y) = w'`.
    fn source(self, n: usize, wp: &[f64], x: &[f64], out: &mut [f64], tmp: &mut [f64]) {
        match self {
            Law::Heisenberg => {
                tmp.iter_mut().zip(wp).for_each(|(o, c)| *o = -c);
                mul_into(n, tmp, x, out);
            }
            Law::Abelian => out.iter_mut().zip(x.iter().zip(wp)).for_each(|(o, (a, b))| *o = a - b),
        }
    }
    /// Jacobian of `y ↦ φ_t(x, y)`.
    fn jacobian(self, t: f64, d: HeisenbergDim) -> f64 {
        match self {
            Law::Heisenberg => t.powi(d.homogeneous_dim() as i32),
            Law::Abelian => t.powi(d.dim() as i32),
        }
    }
}

/// Values of an x-independent kernel on a cubic node lattice centered at the identity.
#[derive(Debug, Clone)]
struct NodeTable {
    spacing: f64,
    half: Vec<usize>,
    d: usize,
    values: Vec<C64>,
    peak: f64,
}

impl NodeTable {
    fn build(k: &dyn FiberKernel, spacing: f64, exec: Execution) -> NodeTable {
        let m = k.ndim();
        let d = k.fiber_dim();
        let half: Vec<usize> = k.support_box().iter().map(|r| (r / spacing).ceil().max(1.0) as usize).collect();
        let dims: Vec<usize> = half.iter().map(|h| 2 * h + 1).collect();
        let total: usize = dims.iter().product();
        let rows = map_range(exec, total, |idx| {
            let mut w = vec![0.0; m];
            let mut r = idx;
            for a in (0..m).rev() {
                w[a] = (r % dims[a]) as f64 * spacing - half[a] as f64 * spacing;
                r /= dims[a];
            }
            let mut out = vec![C64::new(0.0, 0.0); d * d];
            k.eval(&vec![0.0; m], &w, &mut out, &mut KernelScratch::default());
            out
        });
        let values: Vec<C64> = rows.into_iter().flatten().collect();
        let peak = values.iter().map(|v| v.norm()).fold(0.0, f64::max);
        NodeTable { spacing, half, d, values, peak }
    }

    /// Nodes on the sublattice of spacing `stride · spacing`.
    fn nodes(&self, stride: usize, drop_tol: f64) -> Nodes {
        let m = self.half.len();
        let dd = self.d * self.d;
        let dims: Vec<usize> = self.half.iter().map(|h| 2 * h + 1).collect();
        let total: usize = dims.iter().product();
        let spacing = self.spacing * stride as f64;
        let mut nodes = Nodes { m, d: self.d, weight: spacing.powi(m as i32), w: Vec::new(), v: Vec::new() };
        let mut w = vec![0.0; m];
        'outer: for idx in 0..total {
            let mut r = idx;
            for a in (0..m).rev() {
                let i = r % dims[a];
                r /= dims[a];
                let off = i as i64 - self.half[a] as i64;
                if off % stride as i64 != 0 {
                    continue 'outer;
                }
                w[a] = off as f64 * self.spacing;
            }
            let val = &self.values[idx * dd..(idx + 1) * dd];
            if val.iter().map(|v| v.norm()).fold(0.0, f64::max) <= drop_tol * self.peak {
                continue;
            }
            nodes.w.extend_from_slice(&w);
            nodes.v.extend_from_slice(val);
        }
        nodes
    }
}

#[derive(Debug, Clone)]
struct Nodes {
    m: usize,
    d: usize,
    weight: f64,
    w: Vec<f64>,
    v: Vec<C64>,
}

impl Nodes {
    fn len(&self) -> usize {
        self.w.len() / self.m
    }
}

/// Node spacing used at scale `t`: `node_spacing / 2^k` with the least `k`
/// such that the pulled-back spacing is at most `h / resolution`.
fn node_spacing_for(t: f64, g: &Grid, opts: &MorphismOptions) -> (f64, u32) {
    let target = t * g.spacing() / opts.resolution;
    let mut k = 0u32;
    while opts.node_spacing / f64::from(1u32 << k) > target && k < 12 {
        k += 1;
    }
    (opts.node_spacing / f64::from(1u32 << k), k)
}

/// Result of assembling one member of an asymptotic family.
#[derive(Debug, Clone)]
pub struct MorphismImage {
    pub t: TScale,
    pub op: CompactOperatorMatrix,
    /// Kernel narrower than two lattice spacings (collocation only).
    pub under_resolved: bool,
}

/// A symbol prepared for repeated assembly over a list of scales.
pub struct PreparedSymbol {
    kernel: Arc<dyn FiberKernel>,
    law: Law,
    table: Option<NodeTable>,
    finest_level: u32,
}

impl PreparedSymbol {
    pub fn new(kernel: Arc<dyn FiberKernel>, g: &Grid, ts: &[TScale], opts: &MorphismOptions) -> Result<Self> {
        Self::with_law(kernel, Law::Heisenberg, g, ts, opts)
    }

    pub fn with_law(
        kernel: Arc<dyn FiberKernel>,
        law: Law,
        g: &Grid,
        ts: &[TScale],
        opts: &MorphismOptions,
    ) -> Result<Self> {
        if kernel.ndim() != g.ndim() {
            return Err(Error::DimensionMismatch { expected: g.ndim(), found: kernel.ndim() });
        }
        if !(opts.node_spacing > 0.0) || !(opts.resolution > 0.0) {
            return Err(Error::InvalidArgument("node spacing and resolution must be positive".into()));
        }
        let finest_level = ts.iter().map(|t| node_spacing_for(t.value(), g, opts).1).max().unwrap_or(0);
        let table = if opts.assembly == Assembly::HatProjected {
            let inner: Option<&dyn FiberKernel> =
                if kernel.x_independent() { Some(kernel.as_ref()) } else { kernel.separable().map(|(_, i)| i) };
            inner.map(|k| NodeTable::build(k, opts.node_spacing / f64::from(1u32 << finest_level), opts.exec))
        } else {
            None
        };
        Ok(PreparedSymbol { kernel, law, table, finest_level })
    }

    pub fn kernel(&self) -> &Arc<dyn FiberKernel> {
        &self.kernel
    }

    fn prefactor(&self, t: f64, g: &Grid, opts: &MorphismOptions) -> f64 {
        match self.law {
            Law::Heisenberg => opts.normalization.prefactor(t, g.heisenberg()),
            Law::Abelian => t.powi(g.ndim() as i32),
        }
    }

    pub fn assemble(&self, t: TScale, g: &Grid, opts: &MorphismOptions) -> Result<MorphismImage> {
        let tv = t.value();
        let d = self.kernel.fiber_dim();
        let h = g.spacing();
        let width = match self.law {
            Law::Heisenberg | Law::Abelian => opts.kernel_width / tv,
        };
        let (mat, under_resolved) = match opts.assembly {
            Assembly::Collocation => (self.collocate(tv, g, opts), width < 2.0 * h),
            Assembly::HatProjected => (self.hat(tv, g, opts)?, false),
        };
        Ok(MorphismImage { t, op: CompactOperatorMatrix::new(*g, d, mat)?, under_resolved })
    }

    fn collocate(&self, t: f64, g: &Grid, opts: &MorphismOptions) -> CMat {
        let k = self.kernel.as_ref();
        let law = self.law;
        let scale = self.prefactor(t, g, opts) * g.cell_volume();
        collocation_matrix(g, k.fiber_dim(), opts.exec, &k.support_box(), |x, y, w, tmp, out, sc| {
            law.forward(g.heisenberg().n(), t, x, y, w, tmp);
            k.eval(x, w, out, sc);
            out.iter_mut().for_each(|o| *o *= scale);
        })
    }

    fn hat(&self, t: f64, g: &Grid, opts: &MorphismOptions) -> Result<CMat> {
        let scale = self.prefactor(t, g, opts) / self.law.jacobian(t, g.heisenberg());
        let (spacing, level) = node_spacing_for(t, g, opts);
        match &self.table {
            Some(table) => {
                let stride = 1usize << (self.finest_level - level);
                let nodes = table.nodes(stride, opts.drop_tol);
                debug_assert!((nodes.weight - spacing.powi(g.ndim() as i32)).abs() < 1e-12);
                let mut e = deposit_invariant(&nodes, self.law, t, g, scale, opts.exec);
                if let Some((rho, _)) = self.kernel.separable() {
                    let f = sample_program(rho, g);
                    scale_rows(&mut e, &f, nodes.d);
                }
                Ok(e)
            }
            None => Ok(deposit_general(self.kernel.as_ref(), self.law, t, spacing, g, scale, opts)),
        }
    }
}

/// Evaluate an x-only program at every site.
pub(crate) fn sample_program(p: &Program, g: &Grid) -> Vec<C64> {
    let mut sc = Scratch::default();
    let mut x = vec![0.0; g.ndim()];
    (0..g.sites())
        .map(|s| {
            g.point(s, &mut x);
            p.eval(&x, &mut sc)
        })
        .collect()
}

fn scale_rows(e: &mut CMat, f: &[C64], d: usize) {
    for j in 0..e.ncols() {
        for i in 0..e.nrows() {
            e[(i, j)] *= f[i / d];
        }
    }
}

/// Dense matrix from a kernel closure `(x, y, scratch w, scratch, out, sc)`;
/// pairs with `w` outside `support` are skipped.
fn collocation_matrix<F>(g: &Grid, d: usize, exec: Execution, support: &[f64], f: F) -> CMat
where
    F: Fn(&[f64], &[f64], &mut [f64], &mut [f64], &mut [C64], &mut KernelScratch) + Sync,
{
    let sites = g.sites();
    let m = g.ndim();
    let side = sites * d;
    let mut e = Mat::<C64>::zeros(side, side);
    let block = 64;
    for start in (0..sites).step_by(block) {
        let end = (start + block).min(sites);
        let rows = map_range(exec, end - start, |r| {
            let i = start + r;
            let mut sc = KernelScratch::default();
            let (mut x, mut y, mut w, mut tmp) = (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
            g.point(i, &mut x);
            let mut out = vec![C64::new(0.0, 0.0); d * d];
            let mut row = Vec::new();
            for j in 0..sites {
                g.point(j, &mut y);
                f(&x, &y, &mut w, &mut tmp, &mut out, &mut sc);
                if w.iter().zip(support).any(|(c, r)| c.abs() > *r) {
                    continue;
                }
                row.push((j, out.clone()));
            }
            row
        });
        for (r, row) in rows.into_iter().enumerate() {
            let i = start + r;
            for (j, v) in row {
                for a in 0..d {
                    for b in 0..d {
                        e[(i * d + a, j * d + b)] = v[a * d + b];
                    }
                }
            }
        }
    }
    e
}

/// Trilinear hat weights of a point in lattice units: per axis the lower
/// index and the fraction.
#[inline]
fn hat_coords(g: &Grid, y: &[f64], lo: &mut [i64], fr: &mut [f64]) {
    let h = g.spacing();
    for k in 0..y.len() {
        let u = (y[k] + g.extent()) / h;
        let b = u.floor();
        lo[k] = b as i64;
        fr[k] = u - b;
    }
}

/// Hat-projected assembly for an x-independent symbol given on nodes.
///
/// Rows sharing their horizontal coordinates differ only by a lattice shift
/// in the central coordinate, so one stencil per horizontal pattern serves
/// all of them.
fn deposit_invariant(nodes: &Nodes, law: Law, t: f64, g: &Grid, scale: f64, exec: Execution) -> CMat {
    let m = g.ndim();
    let n = g.heisenberg().n();
    let np = g.points();
    let d = nodes.d;
    let dd = d * d;
    let nh = np.pow((m - 1) as u32);
    let mid = g.half() as i64;
    let side = g.sites() * d;
    let mut e = Mat::<C64>::zeros(side, side);
    let wscale = scale * nodes.weight;
    let count = nodes.len();
    let block = 16;
    for start in (0..nh).step_by(block) {
        let end = (start + block).min(nh);
        let stencils = map_range(exec, end - start, |r| {
            let hp = start + r;
            let mut x = vec![0.0; m];
            g.point(mid as usize * nh + hp, &mut x);
            let (mut wp, mut y, mut tmp) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
            let mut lo = vec![0i64; m];
            let mut fr = vec![0.0; m];
            // First pass: span of the central index.
            let (mut jmin, mut jmax) = (i64::MAX, i64::MIN);
            for q in 0..count {
                law.pull(t, &nodes.w[q * m..(q + 1) * m], &mut wp);
                law.source(n, &wp, &x, &mut y, &mut tmp);
                let u = ((y[0] + g.extent()) / g.spacing()).floor() as i64;
                jmin = jmin.min(u);
                jmax = jmax.max(u + 1);
            }
            if count == 0 {
                return Vec::new();
            }
            let span = (jmax - jmin + 1) as usize;
            let mut acc = vec![C64::new(0.0, 0.0); nh * span * dd];
            let mut touched = vec![false; nh * span];
            for q in 0..count {
                law.pull(t, &nodes.w[q * m..(q + 1) * m], &mut wp);
                law.source(n, &wp, &x, &mut y, &mut tmp);
                hat_coords(g, &y, &mut lo, &mut fr);
                let val = &nodes.v[q * dd..(q + 1) * dd];
                'corner: for corner in 0..(1usize << m) {
                    let mut wt = wscale;
                    let mut hc = 0usize;
                    for k in 1..m {
                        let bit = ((corner >> k) & 1) as i64;
                        let idx = lo[k] + bit;
                        if idx < 0 || idx >= np as i64 {
                            continue 'corner;
                        }
                        wt *= if bit == 1 { fr[k] } else { 1.0 - fr[k] };
                        hc = hc * np + idx as usize;
                    }
                    let bit0 = (corner & 1) as i64;
                    wt *= if bit0 == 1 { fr[0] } else { 1.0 - fr[0] };
                    if wt == 0.0 {
                        continue;
                    }
                    let slot = hc * span + (lo[0] + bit0 - jmin) as usize;
                    touched[slot] = true;
                    for (a, v) in acc[slot * dd..(slot + 1) * dd].iter_mut().zip(val) {
                        *a += v * wt;
                    }
                }
            }
            let mut out = Vec::new();
            for (slot, &tch) in touched.iter().enumerate() {
                if tch {
                    let (hc, j0) = (slot / span, (slot % span) as i64 + jmin - mid);
                    out.push((hc, j0, acc[slot * dd..(slot + 1) * dd].to_vec()));
                }
            }
            out
        });
        for (r, st) in stencils.into_iter().enumerate() {
            let hp = start + r;
            for i0 in 0..np as i64 {
                let row = i0 as usize * nh + hp;
                for (hc, j0ref, v) in &st {
                    let j0 = j0ref + i0;
                    if j0 < 0 || j0 >= np as i64 {
                        continue;
                    }
                    let col = j0 as usize * nh + hc;
                    for a in 0..d {
                        for b in 0..d {
                            e[(row * d + a, col * d + b)] += v[a * d + b];
                        }
                    }
                }
            }
        }
    }
    e
}

/// Hat-projected assembly evaluating the symbol afresh for every row.
fn deposit_general(
    k: &dyn FiberKernel,
    law: Law,
    t: f64,
    spacing: f64,
    g: &Grid,
    scale: f64,
    opts: &MorphismOptions,
) -> CMat {
    let m = g.ndim();
    let n = g.heisenberg().n();
    let np = g.points() as i64;
    let d = k.fiber_dim();
    let dd = d * d;
    let sites = g.sites();
    let half: Vec<i64> = k.support_box().iter().map(|r| (r / spacing).ceil().max(1.0) as i64).collect();
    let dims: Vec<usize> = half.iter().map(|h| (2 * h + 1) as usize).collect();
    let total: usize = dims.iter().product();
    let wscale = scale * spacing.powi(m as i32);
    let side = sites * d;
    let mut e = Mat::<C64>::zeros(side, side);
    let block = 32;
    for start in (0..sites).step_by(block) {
        let end = (start + block).min(sites);
        let rows = map_range(opts.exec, end - start, |r| {
            let i = start + r;
            let mut sc = KernelScratch::default();
            let (mut x, mut w, mut wp, mut y, mut tmp) =
                (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
            g.point(i, &mut x);
            let mut vals = vec![C64::new(0.0, 0.0); total * dd];
            for idx in 0..total {
                let mut rr = idx;
                for a in (0..m).rev() {
                    w[a] = ((rr % dims[a]) as i64 - half[a]) as f64 * spacing;
                    rr /= dims[a];
                }
                k.eval(&x, &w, &mut vals[idx * dd..(idx + 1) * dd], &mut sc);
            }
            let peak = vals.iter().map(|v| v.norm()).fold(0.0, f64::max);
            let mut acc = vec![C64::new(0.0, 0.0); sites * dd];
            let mut lo = vec![0i64; m];
            let mut fr = vec![0.0; m];
            for idx in 0..total {
                let val = &vals[idx * dd..(idx + 1) * dd];
                if val.iter().map(|v| v.norm()).fold(0.0, f64::max) <= opts.drop_tol * peak {
                    continue;
                }
                let mut rr = idx;
                for a in (0..m).rev() {
                    w[a] = ((rr % dims[a]) as i64 - half[a]) as f64 * spacing;
                    rr /= dims[a];
                }
                law.pull(t, &w, &mut wp);
                law.source(n, &wp, &x, &mut y, &mut tmp);
                hat_coords(g, &y, &mut lo, &mut fr);
                'corner: for corner in 0..(1usize << m) {
                    let mut wt = wscale;
                    let mut site = 0usize;
                    for kk in 0..m {
                        let bit = ((corner >> (m - 1 - kk)) & 1) as i64;
                        let idx = lo[kk] + bit;
                        if idx < 0 || idx >= np {
                            continue 'corner;
                        }
                        wt *= if bit == 1 { fr[kk] } else { 1.0 - fr[kk] };
                        site = site * np as usize + idx as usize;
                    }
                    for (a, v) in acc[site * dd..(site + 1) * dd].iter_mut().zip(val) {
                        *a += v * wt;
                    }
                }
            }
            acc
        });
        for (r, acc) in rows.into_iter().enumerate() {
            let i = start + r;
            for j in 0..sites {
                for a in 0..d {
                    for b in 0..d {
                        let v = acc[j * dd + a * d + b];
                        if v != C64::new(0.0, 0.0) {
                            e[(i * d + a, j * d + b)] = v;
                        }
                    }
                }
            }
        }
    }
    e
}

/// `T^t_H α` with default options.
pub fn t_heisenberg(alpha: &KernelSymbol, t: TScale, g: &Grid) -> Result<MorphismImage> {
    t_heisenberg_with(Arc::new(alpha.clone()), t, g, &MorphismOptions::default())
}

pub fn t_heisenberg_with(
    alpha: Arc<dyn FiberKernel>,
    t: TScale,
    g: &Grid,
    opts: &MorphismOptions,
) -> Result<MorphismImage> {
    PreparedSymbol::new(alpha, g, &[t], opts)?.assemble(t, g, opts)
}

/// Matrix-valued symbol `α̂(x, ξ)` on the cotangent side, in variables `x` and `xi`.
#[derive(Debug, Clone)]
pub struct CotangentSymbol {
    expr: MatExpr,
    dim: HeisenbergDim,
    /// `α̂` is negligible outside `|ξ_k| ≤ radius`.
    radius: f64,
    rho: Option<Program>,
    programs: Vec<Program>,
}

impl CotangentSymbol {
    pub fn new(expr: MatExpr, dim: HeisenbergDim, radius: f64) -> Result<Self> {
        if !expr.is_square() {
            return Err(Error::Shape(format!("symbol must be square, got {}x{}", expr.rows, expr.cols)));
        }
        let m = dim.dim();
        for v in expr.free_vars() {
            if v.kind == VarKind::Y || v.index >= m {
                return Err(Error::UnboundSymbol(v.to_string()));
            }
        }
        if !(radius > 0.0) {
            return Err(Error::InvalidArgument("frequency radius must be positive".into()));
        }
        let (rho, body) = if expr.independent_of(VarKind::X, VarKind::Xi) {
            (None, expr.clone())
        } else {
            match (expr.rows, &expr.entries[0]) {
                (1, Expr::Mul(a, b))
                    if a.independent_of(VarKind::Xi, VarKind::Xi) && b.independent_of(VarKind::X, VarKind::Xi) =>
                {
                    (Some(a.compile(m, VarKind::Xi)), MatExpr::scalar((**b).clone()))
                }
                _ => {
                    return Err(Error::InvalidArgument(
                        "the Fourier path needs an x-independent symbol or a product rho(x)*beta(xi)".into(),
                    ))
                }
            }
        };
        // Arguments are laid out as [x, y, xi]; `xi` programs read the third block.
        let programs = body.entries.iter().map(|e| e.compile(m, VarKind::Xi)).collect();
        Ok(CotangentSymbol { expr, dim, radius, rho, programs })
    }
    pub fn parse(src: &str, dim: HeisenbergDim, radius: f64) -> Result<Self> {
        CotangentSymbol::new(crate::expr::parse_matrix(src)?, dim, radius)
    }
    pub fn expr(&self) -> &MatExpr {
        &self.expr
    }
}

/// Input of the ordinary morphism.
#[derive(Debug, Clone)]
pub enum HigsonSymbol {
    /// `α̂` on the cotangent side; `α̃` is obtained by the inverse Fourier transform.
    Cotangent(CotangentSymbol),
    /// `α̃` given directly on the tangent side, `y` read as the tangent vector.
    Tangent(KernelSymbol),
}

#[derive(Debug, Clone, Copy)]
pub struct HigsonOptions {
    /// `α̃` is assumed negligible beyond this radius; fixes the frequency step.
    pub tangent_radius: f64,
    /// Cap on frequency samples per axis.
    pub max_points_per_axis: usize,
    pub base: MorphismOptions,
}

impl Default for HigsonOptions {
    fn default() -> Self {
        HigsonOptions {
            tangent_radius: 12.0,
            max_points_per_axis: 401,
            base: MorphismOptions { assembly: Assembly::Collocation, ..MorphismOptions::default() },
        }
    }
}

/// Ordinary morphism: kernel `t^m α̃(x, t (x − y))`.
pub fn t_higson(alpha: &HigsonSymbol, t: TScale, g: &Grid, opts: &HigsonOptions) -> Result<MorphismImage> {
    match alpha {
        HigsonSymbol::Tangent(k) => {
            let p = PreparedSymbol::with_law(Arc::new(k.clone()), Law::Abelian, g, &[t], &opts.base)?;
            p.assemble(t, g, &opts.base)
        }
        HigsonSymbol::Cotangent(c) => higson_fourier(c, t, g, opts),
    }
}

/// `α̃(t h k)` for all lattice differences `k`, as a dense array over
/// `k ∈ [−(N−1), N−1]^m`, by the trigonometric sum over a frequency lattice.
fn tangent_samples(c: &CotangentSymbol, t: f64, g: &Grid, opts: &HigsonOptions) -> Result<Vec<C64>> {
    let m = g.ndim();
    let d = c.expr.rows;
    let dd = d * d;
    let h = g.spacing();
    let vmax = t * 2.0 * g.extent();
    let period = vmax + opts.tangent_radius;
    let dxi = 2.0 * std::f64::consts::PI / period;
    let kxi = (c.radius / dxi).ceil() as usize;
    let nxi = 2 * kxi + 1;
    if nxi > opts.max_points_per_axis {
        return Err(Error::InvalidArgument(format!(
            "frequency lattice needs {nxi} points per axis (cap {})",
            opts.max_points_per_axis
        )));
    }
    let kk = 2 * g.points() - 1;
    let koff = (g.points() - 1) as f64;
    // Samples of α̂ on the frequency lattice, axis 0 slowest.
    let total = nxi.pow(m as u32);
    let samples = map_range(opts.base.exec, total, |idx| {
        let mut args = vec![0.0; 3 * m];
        let mut r = idx;
        for a in (0..m).rev() {
            args[2 * m + a] = ((r % nxi) as f64 - kxi as f64) * dxi;
            r /= nxi;
        }
        let mut sc = Scratch::default();
        c.programs.iter().map(|p| p.eval(&args, &mut sc)).collect::<Vec<_>>()
    });
    let mut cur: Vec<C64> = samples.into_iter().flatten().collect();
    // Phase table e^{i t h k ξ}.
    let phase: Vec<C64> = (0..kk)
        .flat_map(|ki| {
            let v = t * h * (ki as f64 - koff);
            (0..nxi).map(move |j| C64::from_polar(1.0, v * (j as f64 - kxi as f64) * dxi))
        })
        .collect();
    // Contract axis by axis; `dims` tracks the current shape.
    let mut dims = vec![nxi; m];
    for axis in 0..m {
        let outer: usize = dims[..axis].iter().product();
        let inner: usize = dims[axis + 1..].iter().product::<usize>() * dd;
        let mut next = vec![C64::new(0.0, 0.0); outer * kk * inner];
        for o in 0..outer {
            for ki in 0..kk {
                let ph = &phase[ki * nxi..(ki + 1) * nxi];
                let dst = &mut next[(o * kk + ki) * inner..(o * kk + ki + 1) * inner];
                for (j, p) in ph.iter().enumerate() {
                    let src = &cur[(o * nxi + j) * inner..(o * nxi + j + 1) * inner];
                    for (dv, sv) in dst.iter_mut().zip(src) {
                        *dv += sv * p;
                    }
                }
            }
        }
        dims[axis] = kk;
        cur = next;
    }
    let w = (dxi / (2.0 * std::f64::consts::PI)).powi(m as i32);
    cur.iter_mut().for_each(|v| *v *= w);
    Ok(cur)
}

fn higson_fourier(c: &CotangentSymbol, t: TScale, g: &Grid, opts: &HigsonOptions) -> Result<MorphismImage> {
    if c.dim != g.heisenberg() {
        return Err(Error::DimensionMismatch { expected: g.ndim(), found: c.dim.dim() });
    }
    let tv = t.value();
    let m = g.ndim();
    let d = c.expr.rows;
    let dd = d * d;
    let np = g.points();
    let kk = 2 * np - 1;
    let table = tangent_samples(c, tv, g, opts)?;
    let rho = c.rho.as_ref().map(|p| sample_program(p, g));
    let scale = tv.powi(m as i32) * g.cell_volume();
    let sites = g.sites();
    let mut e = Mat::<C64>::zeros(sites * d, sites * d);
    let (mut ia, mut ib) = (vec![0usize; m], vec![0usize; m]);
    for i in 0..sites {
        g.multi_index(i, &mut ia);
        let r = rho.as_ref().map_or(C64::new(1.0, 0.0), |f| f[i]);
        for j in 0..sites {
            g.multi_index(j, &mut ib);
            let mut idx = 0usize;
            for a in 0..m {
                idx = idx * kk + (ia[a] + np - 1 - ib[a]);
            }
            for a in 0..d {
                for b in 0..d {
                    e[(i * d + a, j * d + b)] = table[idx * dd + a * d + b] * r * scale;
                }
            }
        }
    }
    let under_resolved = opts.base.kernel_width / tv < 2.0 * g.spacing();
    Ok(MorphismImage { t, op: CompactOperatorMatrix::new(*g, d, e)?, under_resolved })
}

/// Numerical evidence for `|α(x, δ_t y) − α̃(x, t y)| = O(t^{−k})`.
#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    pub t_values: Vec<f64>,
    /// `(k, max over samples of t^k |α(x, δ_t y) − α̃(x, t y)|)`.
    pub by_order: Vec<(u32, f64)>,
    pub samples: usize,
    pub threshold: f64,
}

impl Certificate {
    /// The order-1 value, the one the acceptance threshold applies to.
    pub fn order_one(&self) -> f64 {
        self.by_order.iter().find(|(k, _)| *k == 1).map_or(0.0, |p| p.1)
    }
}

#[derive(Debug, Clone)]
pub struct Correspondence {
    pub tilde: KernelSymbol,
    pub certificate: Certificate,
}

#[derive(Debug, Clone)]
pub struct CertificateOptions {
    pub t_values: Vec<f64>,
    pub orders: Vec<u32>,
    pub threshold: f64,
}

impl Default for CertificateOptions {
    fn default() -> Self {
        CertificateOptions { t_values: vec![1.0, 2.0, 4.0, 8.0, 16.0], orders: vec![1, 2, 3, 4], threshold: 2.0 }
    }
}

/// Fixed sample set: a few base points and the fiber points in `{±½, ±1}^m`.
fn certificate_samples(m: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let xs = vec![
        vec![0.0; m],
        (0..m).map(|k| 0.5 - 0.25 * k as f64).collect(),
        (0..m).map(|k| -0.75 + 0.5 * k as f64).collect(),
    ];
    let levels = [-1.0, -0.5, 0.5, 1.0];
    let ys = (0..levels.len().pow(m as u32))
        .map(|mut i| {
            (0..m)
                .map(|_| {
                    let v = levels[i % levels.len()];
                    i /= levels.len();
                    v
                })
                .collect()
        })
        .collect();
    (xs, ys)
}

/// `α̃` is the same closed form read in abelian coordinates.
pub fn correspond(alpha: &KernelSymbol) -> Result<Correspondence> {
    correspond_with(alpha, &CertificateOptions::default())
}

pub fn correspond_with(alpha: &KernelSymbol, opts: &CertificateOptions) -> Result<Correspondence> {
    let m = alpha.dim().dim();
    let (xs, ys) = certificate_samples(m);
    let d = alpha.fiber_dim();
    let mut sc = KernelScratch::default();
    let (mut a1, mut a2) = (vec![C64::new(0.0, 0.0); d * d], vec![C64::new(0.0, 0.0); d * d]);
    let (mut wd, mut wa) = (vec![0.0; m], vec![0.0; m]);
    let mut by_order: Vec<(u32, f64)> = opts.orders.iter().map(|&k| (k, 0.0)).collect();
    for &t in &opts.t_values {
        for x in &xs {
            for y in &ys {
                dilate_into(t, y, &mut wd);
                wa.iter_mut().zip(y).for_each(|(o, c)| *o = t * c);
                alpha.eval(x, &wd, &mut a1, &mut sc);
                alpha.eval(x, &wa, &mut a2, &mut sc);
                let diff = a1.iter().zip(&a2).map(|(p, q)| (p - q).norm()).fold(0.0, f64::max);
                for (k, v) in by_order.iter_mut() {
                    *v = v.max(t.powi(*k as i32) * diff);
                }
            }
        }
    }
    let certificate = Certificate {
        t_values: opts.t_values.clone(),
        by_order,
        samples: xs.len() * ys.len(),
        threshold: opts.threshold,
    };
    if !(certificate.order_one() <= opts.threshold) {
        return Err(Error::Certificate(certificate.order_one()));
    }
    Ok(Correspondence { tilde: alpha.clone(), certificate })
}

/// Least-squares slope of `log norm` against `log t` and the RMS residual.
pub fn fit_decay(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    if points.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 points, got {}", points.len())));
    }
    if let Some(p) = points.iter().find(|p| !(p.1 > 0.0) || !(p.0 > 0.0)) {
        return Err(Error::InvalidArgument(format!("nonpositive value in fit: ({}, {})", p.0, p.1)));
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("all scales equal".into()));
    }
    let slope = sxy / sxx;
    let icpt = my - slope * mx;
    let res = (lx.iter().zip(&ly).map(|(x, y)| (y - icpt - slope * x).powi(2)).sum::<f64>() / n).sqrt();
    Ok((slope, res))
}

/// Slope above which consecutive points count as no longer decaying.
const FLOOR_SLOPE: f64 = -0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct DefectReport {
    pub t_values: Vec<f64>,
    pub defect_norms: Vec<f64>,
    /// `None` when every defect vanishes identically.
    pub fitted_exponent: Option<f64>,
    pub fit_residual: f64,
    pub discretization_floor: f64,
    /// Scales left out of the fit, either under-resolved or on the floor.
    pub excluded: Vec<bool>,
    pub under_resolved: Vec<bool>,
    /// `‖T^t_α‖` per scale, when the report computed it.
    pub operator_norms: Vec<f64>,
}

impl DefectReport {
    /// Fit the resolved part. Once the local slope rises above −0.2 after a
    /// decline, the remaining points are taken as the discretization floor.
    pub fn new(t_values: Vec<f64>, defect_norms: Vec<f64>, under_resolved: Vec<bool>) -> Result<Self> {
        if t_values.len() < 3 || t_values.len() != defect_norms.len() || under_resolved.len() != t_values.len() {
            return Err(Error::InvalidArgument("a report needs at least 3 scales with matching lists".into()));
        }
        let scale = defect_norms.iter().copied().fold(0.0, f64::max);
        let mut excluded = under_resolved.clone();
        if scale == 0.0 {
            return Ok(DefectReport {
                t_values,
                defect_norms,
                fitted_exponent: None,
                fit_residual: 0.0,
                discretization_floor: 0.0,
                excluded,
                under_resolved,
                operator_norms: Vec::new(),
            });
        }
        let live: Vec<usize> = (0..t_values.len()).filter(|&i| !excluded[i] && defect_norms[i] > 0.0).collect();
        let mut floor_from = live.len();
        let mut declined = false;
        for k in 1..live.len() {
            let (i, j) = (live[k - 1], live[k]);
            let s = (defect_norms[j] / defect_norms[i]).ln() / (t_values[j] / t_values[i]).ln();
            if s <= FLOOR_SLOPE {
                declined = true;
            } else if declined {
                floor_from = k;
                break;
            }
        }
        let mut floor = 0.0;
        if floor_from < live.len() {
            floor = live[floor_from..].iter().map(|&i| defect_norms[i]).fold(f64::INFINITY, f64::min);
            for &i in &live[floor_from..] {
                excluded[i] = true;
            }
        }
        let pts: Vec<(f64, f64)> = live[..floor_from].iter().map(|&i| (t_values[i], defect_norms[i])).collect();
        let (fitted_exponent, fit_residual) = if pts.len() >= 2 {
            let (e, r) = fit_decay(&pts)?;
            (Some(e), r)
        } else {
            (None, 0.0)
        };
        Ok(DefectReport {
            t_values,
            defect_norms,
            fitted_exponent,
            fit_residual,
            discretization_floor: floor,
            excluded,
            under_resolved,
            operator_norms: Vec::new(),
        })
    }

    /// Ratio of the largest to the smallest recorded `‖T^t_α‖`.
    pub fn boundedness_ratio(&self) -> Option<f64> {
        let max = self.operator_norms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = self.operator_norms.iter().copied().fold(f64::INFINITY, f64::min);
        (min > 0.0 && max.is_finite()).then(|| max / min)
    }
}

/// `a ∗ b`, kept separable when both factors are.
pub fn product_kernel(
    a: &KernelSymbol,
    b: &KernelSymbol,
    g: &Grid,
    ts: &[TScale],
    opts: &MorphismOptions,
) -> Result<Arc<dyn FiberKernel>> {
    let fine = finest_node_spacing(ts, g, opts);
    let tol = 1e-12;
    if a.x_independent() && b.x_independent() {
        return Ok(Arc::new(convolve_tabulated(a, b, fine, tol, opts.exec)?));
    }
    match (a.split_parts(), b.split_parts()) {
        (Some((ra, a0)), Some((rb, b0))) => {
            let rho = Expr::mul(ra.clone(), rb.clone()).compile(g.ndim(), VarKind::Y);
            let conv: Arc<dyn FiberKernel> = if a0.x_independent() && b0.x_independent() {
                Arc::new(convolve_tabulated(a0, b0, fine, tol, opts.exec)?)
            } else {
                let q = quadrature_grid(b0, g, opts.quadrature_spacing)?;
                Arc::new(Convolved::new(Arc::new(a0.clone()), Arc::new(b0.clone()), q)?)
            };
            Ok(Arc::new(Separable::new(rho, conv)))
        }
        _ => {
            let q = quadrature_grid(b, g, opts.quadrature_spacing)?;
            Ok(Arc::new(Convolved::new(Arc::new(a.clone()), Arc::new(b.clone()), q)?))
        }
    }
}

/// Finest node spacing reached over `ts`.
pub fn finest_node_spacing(ts: &[TScale], g: &Grid, opts: &MorphismOptions) -> f64 {
    ts.iter().map(|t| node_spacing_for(t.value(), g, opts).0).fold(opts.node_spacing, f64::min)
}

/// 0/1 diagonal of the measurement band, expanded over the fiber.
fn band_projector(g: &Grid, d: usize, opts: &MorphismOptions) -> Option<Vec<C64>> {
    opts.band.map(|frac| {
        g.inner_mask(frac)
            .into_iter()
            .flat_map(|b| std::iter::repeat_n(C64::new(if b { 1.0 } else { 0.0 }, 0.0), d))
            .collect()
    })
}

/// `P F_1 ⋯ F_k P` with `P` the band projector, when there is one.
fn banded<'a>(p: &'a Option<Vec<C64>>, mut fs: Vec<Factor<'a>>) -> Vec<Factor<'a>> {
    if let Some(p) = p {
        fs.insert(0, Factor::Diag(p));
        fs.push(Factor::Diag(p));
    }
    fs
}

fn banded_norm(m: MatRef<'_, C64>, p: &Option<Vec<C64>>, opts: &MorphismOptions) -> Result<f64> {
    match p {
        Some(_) => implicit_norm(&Chain::new(m.nrows()).term(1.0, banded(p, vec![Factor::Mat(m)])), opts.norm),
        None => crate::linalg::operator_norm(m, opts.norm),
    }
}

fn check_scales(ts: &[TScale]) -> Result<()> {
    if ts.len() < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 scales, got {}", ts.len())));
    }
    Ok(())
}

fn finish(ts: &[TScale], norms: Vec<f64>, under: Vec<bool>, op_norms: Vec<f64>) -> Result<DefectReport> {
    let mut r = DefectReport::new(ts.iter().map(|t| t.value()).collect(), norms, under)?;
    r.operator_norms = op_norms;
    Ok(r)
}

/// `‖T^t_a T^t_b − T^t_{a∗b}‖` per scale.
pub fn defect_multiplicativity(
    a: &KernelSymbol,
    b: &KernelSymbol,
    ts: &[TScale],
    g: &Grid,
    opts: &MorphismOptions,
) -> Result<DefectReport> {
    check_scales(ts)?;
    let same = a.expr() == b.expr();
    let pa = PreparedSymbol::new(Arc::new(a.clone()), g, ts, opts)?;
    let pb = if same { None } else { Some(PreparedSymbol::new(Arc::new(b.clone()), g, ts, opts)?) };
    let pab = PreparedSymbol::new(product_kernel(a, b, g, ts, opts)?, g, ts, opts)?;
    let band = band_projector(g, a.fiber_dim(), opts);
    let (mut norms, mut under, mut op_norms) = (Vec::new(), Vec::new(), Vec::new());
    for &t in ts {
        let ea = pa.assemble(t, g, opts)?;
        let eb = match &pb {
            Some(p) => Some(p.assemble(t, g, opts)?),
            None => None,
        };
        let eab = pab.assemble(t, g, opts)?;
        let ebm = eb.as_ref().unwrap_or(&ea).op.mat();
        let n = ea.op.side();
        let chain = Chain::new(n)
            .term(1.0, banded(&band, vec![Factor::Mat(ea.op.mat().as_ref()), Factor::Mat(ebm.as_ref())]))
            .term(-1.0, banded(&band, vec![Factor::Mat(eab.op.mat().as_ref())]));
        norms.push(implicit_norm(&chain, opts.norm)?);
        op_norms.push(banded_norm(ea.op.mat().as_ref(), &band, opts)?);
        under.push(ea.under_resolved || eab.under_resolved);
    }
    finish(ts, norms, under, op_norms)
}

/// `‖T^t_{a*} − (T^t_a)*‖` per scale.
pub fn defect_adjoint(a: &KernelSymbol, ts: &[TScale], g: &Grid, opts: &MorphismOptions) -> Result<DefectReport> {
    check_scales(ts)?;
    let astar = involute(a)?;
    let pa = PreparedSymbol::new(Arc::new(a.clone()), g, ts, opts)?;
    let ps = PreparedSymbol::new(Arc::new(astar), g, ts, opts)?;
    let band = band_projector(g, a.fiber_dim(), opts);
    let (mut norms, mut under, mut op_norms) = (Vec::new(), Vec::new(), Vec::new());
    for &t in ts {
        let ea = pa.assemble(t, g, opts)?;
        let es = ps.assemble(t, g, opts)?;
        let chain = Chain::new(ea.op.side())
            .term(1.0, banded(&band, vec![Factor::Mat(es.op.mat().as_ref())]))
            .term(-1.0, banded(&band, vec![Factor::Adjoint(ea.op.mat().as_ref())]));
        norms.push(implicit_norm(&chain, opts.norm)?);
        op_norms.push(banded_norm(ea.op.mat().as_ref(), &band, opts)?);
        under.push(ea.under_resolved);
    }
    finish(ts, norms, under, op_norms)
}

/// `‖M_f T^t_a − T^t_a M_f‖` per scale, `f` an expression in `x`.
pub fn defect_commutator(
    f: &Expr,
    a: &KernelSymbol,
    ts: &[TScale],
    g: &Grid,
    opts: &MorphismOptions,
) -> Result<DefectReport> {
    check_scales(ts)?;
    for v in f.free_vars() {
        if v.kind != VarKind::X || v.index >= g.ndim() {
            return Err(Error::UnboundSymbol(v.to_string()));
        }
    }
    let fs = sample_program(&f.compile(g.ndim(), VarKind::X), g);
    let d = a.fiber_dim();
    let diag: Vec<C64> = fs.iter().flat_map(|v| std::iter::repeat_n(*v, d)).collect();
    let pa = PreparedSymbol::new(Arc::new(a.clone()), g, ts, opts)?;
    let band = band_projector(g, d, opts);
    let (mut norms, mut under, mut op_norms) = (Vec::new(), Vec::new(), Vec::new());
    for &t in ts {
        let ea = pa.assemble(t, g, opts)?;
        let m = ea.op.mat().as_ref();
        let chain = Chain::new(ea.op.side())
            .term(1.0, banded(&band, vec![Factor::Diag(&diag), Factor::Mat(m)]))
            .term(-1.0, banded(&band, vec![Factor::Mat(m), Factor::Diag(&diag)]));
        norms.push(implicit_norm(&chain, opts.norm)?);
        op_norms.push(banded_norm(m, &band, opts)?);
        under.push(ea.under_resolved);
    }
    finish(ts, norms, under, op_norms)
}

/// `‖T^t_α‖` per scale.
pub fn uniform_norms(a: &KernelSymbol, ts: &[TScale], g: &Grid, opts: &MorphismOptions) -> Result<Vec<f64>> {
    let pa = PreparedSymbol::new(Arc::new(a.clone()), g, ts, opts)?;
    let band = band_projector(g, a.fiber_dim(), opts);
    ts.iter()
        .map(|&t| {
            let e = pa.assemble(t, g, opts)?;
            banded_norm(e.op.mat().as_ref(), &band, opts)
        })
        .collect()
}

/// A diffeomorphism `Φ` preserving the contact structure, together with the
/// group automorphism `ψ` it induces on the fibers:
/// `Φ(x) Φ(y)⁻¹ = ψ(x y⁻¹)`.
#[derive(Debug, Clone)]
pub struct ContactChart {
    pub forward: Vec<Expr>,
    pub inverse: Vec<Expr>,
    pub fiber: Vec<Expr>,
    pub fiber_inverse: Vec<Expr>,
    /// Constant Jacobian determinant of `Φ`.
    pub jacobian: f64,
    dim: HeisenbergDim,
}

fn compile_all(es: &[Expr], m: usize) -> Vec<Program> {
    es.iter().map(|e| e.compile(m, VarKind::X)).collect()
}

fn run_all(ps: &[Program], x: &[f64], out: &mut [f64], sc: &mut Scratch) {
    for (o, p) in out.iter_mut().zip(ps) {
        *o = p.eval(x, sc).re;
    }
}

impl ContactChart {
    pub fn new(
        forward: Vec<Expr>,
        inverse: Vec<Expr>,
        fiber: Vec<Expr>,
        fiber_inverse: Vec<Expr>,
        jacobian: f64,
        dim: HeisenbergDim,
    ) -> Result<Self> {
        let m = dim.dim();
        for es in [&forward, &inverse, &fiber, &fiber_inverse] {
            if es.len() != m {
                return Err(Error::DimensionMismatch { expected: m, found: es.len() });
            }
        }
        if !(jacobian > 0.0) {
            return Err(Error::Chart("jacobian must be positive".into()));
        }
        Ok(ContactChart { forward, inverse, fiber, fiber_inverse, jacobian, dim })
    }

    pub fn identity(dim: HeisenbergDim) -> Self {
        let id: Vec<Expr> = (0..dim.dim()).map(|k| Expr::var(crate::expr::Var::x(k))).collect();
        ContactChart {
            forward: id.clone(),
            inverse: id.clone(),
            fiber: id.clone(),
            fiber_inverse: id,
            jacobian: 1.0,
            dim,
        }
    }

    /// Right translation `x ↦ x·g0`, which commutes with the right-invariant
    /// contact structure; its fiber map is the identity.
    pub fn translation(g0: &[f64], dim: HeisenbergDim) -> Result<Self> {
        if g0.len() != dim.dim() {
            return Err(Error::DimensionMismatch { expected: dim.dim(), found: g0.len() });
        }
        let fwd = crate::heisenberg::right_translate_exprs(&crate::heisenberg::GroupPoint::new(g0.to_vec())?);
        let inv_pt: Vec<f64> = g0.iter().map(|c| -c).collect();
        let inv = crate::heisenberg::right_translate_exprs(&crate::heisenberg::GroupPoint::new(inv_pt)?);
        let id: Vec<Expr> = (0..dim.dim()).map(|k| Expr::var(crate::expr::Var::x(k))).collect();
        ContactChart::new(fwd, inv, id.clone(), id, 1.0, dim)
    }

    /// `δ_s`, a graded automorphism; the Jacobian is `s^{2n+2}`.
    pub fn dilation(s: f64, dim: HeisenbergDim) -> Result<Self> {
        if !(s > 0.0) {
            return Err(Error::Chart("dilation factor must be positive".into()));
        }
        let make = |s: f64| -> Vec<Expr> {
            (0..dim.dim())
                .map(|k| {
                    let f = if k == 0 { s * s } else { s };
                    Expr::mul(Expr::real(f), Expr::var(crate::expr::Var::x(k)))
                })
                .collect()
        };
        let (f, i) = (make(s), make(1.0 / s));
        ContactChart::new(f.clone(), i.clone(), f, i, s.powi(dim.homogeneous_dim() as i32), dim)
    }

    /// Check `Φ∘Φ⁻¹ = id` and `Φ(x)Φ(y)⁻¹ = ψ(xy⁻¹)` on grid samples; returns the largest residual.
    pub fn validate(&self, g: &Grid) -> Result<f64> {
        let m = self.dim.dim();
        let n = self.dim.n();
        let (f, i, p) = (compile_all(&self.forward, m), compile_all(&self.inverse, m), compile_all(&self.fiber, m));
        let mut sc = Scratch::default();
        let (mut a, mut b, mut fa, mut fb, mut tmp, mut lhs, mut rhs) =
            (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
        let mut worst = 0.0f64;
        let sites = g.sites();
        let picks: Vec<usize> = (0..23).map(|k| (k * 7919 + 13) % sites).collect();
        for (q, &s1) in picks.iter().enumerate() {
            let s2 = picks[(q * 5 + 3) % picks.len()];
            g.point(s1, &mut a);
            g.point(s2, &mut b);
            run_all(&i, &a, &mut tmp, &mut sc);
            run_all(&f, &tmp, &mut fa, &mut sc);
            worst = worst.max(fa.iter().zip(&a).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max));
            run_all(&f, &a, &mut fa, &mut sc);
            run_all(&f, &b, &mut fb, &mut sc);
            fb.iter_mut().for_each(|c| *c = -*c);
            mul_into(n, &fa, &fb, &mut lhs);
            b.iter_mut().for_each(|c| *c = -*c);
            mul_into(n, &a, &b, &mut tmp);
            run_all(&p, &tmp, &mut rhs, &mut sc);
            worst = worst.max(lhs.iter().zip(&rhs).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max));
        }
        if worst > 1e-8 {
            return Err(Error::Chart(format!("chart invariants violated by {worst:e}")));
        }
        Ok(worst)
    }
}

/// `‖T^t_{α∘Φ̃} − U_Φ T^t_α U_Φ⁻¹‖` with `(α∘Φ̃)(x, w) = J⁻¹ α(Φ⁻¹x, ψ⁻¹w)`
/// and the unitary `U_Φ f = J^{−1/2} f∘Φ⁻¹`. The conjugated operator is
/// assembled by composing the continuous kernel with `Φ⁻¹`.
pub fn equivariance_check(
    phi: &ContactChart,
    a: &KernelSymbol,
    t: TScale,
    g: &Grid,
    opts: &MorphismOptions,
) -> Result<f64> {
    phi.validate(g)?;
    let m = g.ndim();
    let n = g.heisenberg().n();
    let tv = t.value();
    let inv = compile_all(&phi.inverse, m);
    let finv = compile_all(&phi.fiber_inverse, m);
    let scale = opts.normalization.prefactor(tv, g.heisenberg()) * g.cell_volume() / phi.jacobian;
    let none = vec![f64::INFINITY; m];
    let d = a.fiber_dim();
    let pulled = collocation_matrix(g, d, opts.exec, &none, |x, y, w, tmp, out, sc| {
        let mut esc = Scratch::default();
        let mut px = vec![0.0; m];
        let mut u = vec![0.0; m];
        run_all(&inv, x, &mut px, &mut esc);
        Law::Heisenberg.forward(n, tv, x, y, &mut u, tmp);
        run_all(&finv, &u, w, &mut esc);
        a.eval(&px, w, out, sc);
        out.iter_mut().for_each(|o| *o *= scale);
        w.iter_mut().for_each(|c| *c = 0.0);
    });
    let conj = collocation_matrix(g, d, opts.exec, &none, |x, y, w, tmp, out, sc| {
        let mut esc = Scratch::default();
        let (mut px, mut py) = (vec![0.0; m], vec![0.0; m]);
        run_all(&inv, x, &mut px, &mut esc);
        run_all(&inv, y, &mut py, &mut esc);
        Law::Heisenberg.forward(n, tv, &px, &py, w, tmp);
        a.eval(&px, w, out, sc);
        out.iter_mut().for_each(|o| *o *= scale);
        w.iter_mut().for_each(|c| *c = 0.0);
    });
    let diff = &pulled - &conj;
    crate::linalg::operator_norm(diff.as_ref(), NormOptions { tol: 1e-10, ..opts.norm })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dim() -> HeisenbergDim {
        HeisenbergDim::new(1).unwrap()
    }

    #[test]
    fn fit_examples() {
        let ts = [1.0, 2.0, 4.0, 8.0];
        let (e, r) = fit_decay(&ts.map(|t| (t, 3.0 / t))).unwrap();
        assert!((e + 1.0).abs() < 1e-12 && r < 1e-12);
        let (e, _) = fit_decay(&ts.map(|t| (t, 3.0))).unwrap();
        assert!(e.abs() < 1e-12);
        assert!(fit_decay(&[(1.0, 1.0), (2.0, 0.0)]).is_err());
        let t6 = [1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0];
        let rep = DefectReport::new(t6.to_vec(), t6.iter().map(|t| 1.0 / t + 0.2).collect(), vec![false; 7]).unwrap();
        let e = rep.fitted_exponent.unwrap();
        assert!(e > -1.0 && e < 0.0, "{e}");
        assert!(rep.excluded.iter().any(|&x| x));
        assert!(rep.discretization_floor > 0.2 && rep.discretization_floor < 0.25);
    }

    #[test]
    fn zero_symbol_gives_zero_operator() {
        let g = Grid::new(dim(), 5, 2.0).unwrap();
        let z = KernelSymbol::parse("0", dim(), 3.0).unwrap();
        for assembly in [Assembly::Collocation, Assembly::HatProjected] {
            let opts = MorphismOptions { assembly, ..Default::default() };
            let img = t_heisenberg_with(Arc::new(z.clone()), TScale::new(2.0).unwrap(), &g, &opts).unwrap();
            assert_eq!(crate::linalg::max_abs(img.op.mat().as_ref()), 0.0);
        }
    }

    #[test]
    fn collocation_at_t_one_is_the_pair_kernel() {
        let g = Grid::new(dim(), 5, 2.0).unwrap();
        let a = KernelSymbol::parse("(1 + x1/3)*exp(-sqnorm)*(1 + i*y1)", dim(), 8.0).unwrap();
        let opts = MorphismOptions {
            assembly: Assembly::Collocation,
            normalization: Normalization::Topological,
            ..Default::default()
        };
        let img = t_heisenberg_with(Arc::new(a.clone()), TScale::new(1.0).unwrap(), &g, &opts).unwrap();
        for (i, j) in [(0usize, 0usize), (17, 99), (60, 61), (124, 3)] {
            let (x, y) = (g.point_vec(i), g.point_vec(j));
            let yinv: Vec<f64> = y.iter().map(|c| -c).collect();
            let mut w = vec![0.0; 3];
            mul_into(1, &x, &yinv, &mut w);
            let v = a.value(&x, &w)[0] * g.cell_volume();
            assert!((img.op.mat()[(i, j)] - v).norm() < 1e-14);
        }
    }

    #[test]
    fn hat_rows_integrate_the_symbol() {
        // Interior rows of the hat assembly sum to ∫ α(x, w) dw.
        let g = Grid::new(dim(), 9, 4.0).unwrap();
        let a = KernelSymbol::parse("exp(-sqnorm)", dim(), 6.0).unwrap();
        let opts = MorphismOptions::default();
        let exact = std::f64::consts::PI.powf(1.5);
        for t in [1.0, 4.0] {
            let img = t_heisenberg_with(Arc::new(a.clone()), TScale::new(t).unwrap(), &g, &opts).unwrap();
            let i = g.origin();
            let s: C64 = (0..g.sites()).map(|j| img.op.mat()[(i, j)]).sum();
            assert!((s.re - exact).abs() < 1e-6 * exact, "t={t}: {}", s.re);
        }
    }

    #[test]
    fn hat_separable_and_general_paths_agree() {
        let g = Grid::new(dim(), 5, 2.0).unwrap();
        let sep = KernelSymbol::parse("(1 + x1/4)*exp(-sqnorm)", dim(), 6.0).unwrap();
        assert!(sep.separable().is_some());
        let gen = KernelSymbol::parse("exp(-sqnorm)*(1 + x1/4)*(1 + 0*x2)", dim(), 6.0).unwrap();
        assert!(gen.separable().is_none());
        let opts = MorphismOptions::default();
        let t = TScale::new(2.0).unwrap();
        let a = t_heisenberg_with(Arc::new(sep), t, &g, &opts).unwrap();
        let b = t_heisenberg_with(Arc::new(gen), t, &g, &opts).unwrap();
        let diff = a.op.sub(&b.op).unwrap();
        assert!(crate::linalg::max_abs(diff.mat().as_ref()) < 1e-12);
    }

    #[test]
    fn higson_paths_agree_on_a_small_grid() {
        let g = Grid::new(dim(), 7, 3.0).unwrap();
        let hat = CotangentSymbol::parse("exp(-sqnorm(xi)/2)", dim(), 9.0).unwrap();
        let tilde = KernelSymbol::parse("(2*pi)^(-1.5)*exp(-sqnorm/2)", dim(), 9.0).unwrap();
        let opts = HigsonOptions::default();
        for t in [1.0, 2.0] {
            let t = TScale::new(t).unwrap();
            let a = t_higson(&HigsonSymbol::Cotangent(hat.clone()), t, &g, &opts).unwrap();
            let b = t_higson(&HigsonSymbol::Tangent(tilde.clone()), t, &g, &opts).unwrap();
            let diff = a.op.sub(&b.op).unwrap();
            let rel = crate::linalg::max_abs(diff.mat().as_ref()) / crate::linalg::max_abs(b.op.mat().as_ref());
            assert!(rel < 1e-8, "{rel}");
        }
    }

    #[test]
    fn certificate_examples() {
        let a = KernelSymbol::parse("exp(-sqnorm)", dim(), 6.0).unwrap();
        let c = correspond(&a).unwrap();
        assert_eq!(c.tilde.expr(), a.expr());
        assert!(c.certificate.order_one() > 0.0);
        let flat = KernelSymbol::parse("exp(-y1^2 - y2^2)", dim(), 6.0).unwrap();
        assert_eq!(correspond(&flat).unwrap().certificate.order_one(), 0.0);
        let bad = KernelSymbol::parse("cos(y0)", dim(), 6.0).unwrap();
        assert!(matches!(correspond(&bad), Err(Error::Certificate(_))));
    }

    #[test]
    fn equivariance_for_translations_and_dilations() {
        let g = Grid::new(dim(), 5, 2.0).unwrap();
        let a = KernelSymbol::parse("(1 + x1/4)*exp(-sqnorm)", dim(), 8.0).unwrap();
        let opts = MorphismOptions { assembly: Assembly::Collocation, ..Default::default() };
        let t = TScale::new(2.0).unwrap();
        let id = equivariance_check(&ContactChart::identity(dim()), &a, t, &g, &opts).unwrap();
        assert_eq!(id, 0.0);
        let tr = ContactChart::translation(&[1.0, 0.0, 0.0], dim()).unwrap();
        assert!(equivariance_check(&tr, &a, t, &g, &opts).unwrap() < 1e-10);
        let dl = ContactChart::dilation(2.0, dim()).unwrap();
        assert!(equivariance_check(&dl, &a, t, &g, &opts).unwrap() < 1e-10);
    }
}
