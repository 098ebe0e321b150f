//! Model hypoelliptic operators `P = Σ a_α X^α` on `H_n`.
//!
//! Operators are discretized with central finite differences of the
//! right-invariant fields and zero extension past the box. The graded
//! operator on `E ⊕ F` is
//!
//! ```text
//! D = [ 0    −iP* ]      ε = diag(−1_E, 1_F)
//!     [ iP    0   ]
//! ```
//!
//! so that `½ Tr ε(U − 1) = dim ker P − dim ker P*` for the Cayley transform
//! `U = (D + i)(D − i)^{-1}`. Spectral work uses the block layout
//! (all of `E`, then all of `F`); operators handed to the morphisms module use
//! the site-major layout with fiber `d_E + d_F`.
//!
//! Schrödinger convention: `dπ_λ(X_j) = ∂_{u_j}`, `dπ_λ(X_{n+j}) = iλu_j`,
//! `dπ_λ(X_0) = −iλ`, which respects `[X_j, X_{n+j}] = −X_0`. With it
//! `dπ_λ(Δ_H + iγX_0)` has spectrum `|λ|(2k+1) + γλ`.

use std::sync::Arc;

use faer::Mat;

use crate::expr::{Expr, Var, VarKind};
use crate::groupoid::{CompactOperatorMatrix, FiberKernel, GridKernel, KernelScratch, KernelSymbol};
use crate::heisenberg::{dilate_into, mul_into, HeisenbergDim};
use crate::lattice::{Fiber, Grid, SampledFunction};
use crate::linalg::{self, implicit_norm, CMat, Chain, Factor, HermitianEigen, NormOptions};
use crate::morphisms::{fit_decay, Assembly, DefectReport, MorphismOptions, Normalization, PreparedSymbol, TScale};
use crate::par::{map_range, Execution};
use crate::{Error, Result, C64};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
const ONE: C64 = C64 { re: 1.0, im: 0.0 };
const I: C64 = C64 { re: 0.0, im: 1.0 };

// ---------------------------------------------------------------------------
// Sparse matrices

/// Compressed sparse rows with sorted column indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<C64>,
}

impl SparseMatrix {
    /// Sum duplicate entries and drop exact zeros.
    pub fn from_triplets(nrows: usize, ncols: usize, mut trip: Vec<(usize, usize, C64)>) -> Result<Self> {
        if let Some(&(i, j, _)) = trip.iter().find(|(i, j, _)| *i >= nrows || *j >= ncols) {
            return Err(Error::Shape(format!("entry ({i}, {j}) outside {nrows}x{ncols}")));
        }
        trip.sort_by_key(|&(i, j, _)| (i, j));
        let mut indptr = vec![0usize; nrows + 1];
        let mut indices = Vec::with_capacity(trip.len());
        let mut values: Vec<C64> = Vec::with_capacity(trip.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, v) in trip {
            if last == Some((i, j)) {
                *values.last_mut().unwrap() += v;
            } else {
                indices.push(j);
                values.push(v);
                indptr[i + 1] += 1;
                last = Some((i, j));
            }
        }
        for i in 0..nrows {
            indptr[i + 1] += indptr[i];
        }
        Ok(SparseMatrix { nrows, ncols, indptr, indices, values }.pruned())
    }

    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        SparseMatrix { nrows, ncols, indptr: vec![0; nrows + 1], indices: Vec::new(), values: Vec::new() }
    }

    pub fn identity(n: usize) -> Self {
        Self::diagonal(&vec![ONE; n])
    }

    pub fn diagonal(d: &[C64]) -> Self {
        let n = d.len();
        SparseMatrix { nrows: n, ncols: n, indptr: (0..=n).collect(), indices: (0..n).collect(), values: d.to_vec() }
            .pruned()
    }

    fn pruned(self) -> Self {
        let mut indptr = vec![0usize; self.nrows + 1];
        let mut indices = Vec::with_capacity(self.indices.len());
        let mut values = Vec::with_capacity(self.values.len());
        for i in 0..self.nrows {
            for k in self.indptr[i]..self.indptr[i + 1] {
                if self.values[k] != ZERO {
                    indices.push(self.indices[k]);
                    values.push(self.values[k]);
                }
            }
            indptr[i + 1] = indices.len();
        }
        SparseMatrix { nrows: self.nrows, ncols: self.ncols, indptr, indices, values }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }
    pub fn ncols(&self) -> usize {
        self.ncols
    }
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Entries of row `i` as `(column, value)`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, C64)> + '_ {
        (self.indptr[i]..self.indptr[i + 1]).map(move |k| (self.indices[k], self.values[k]))
    }

    pub fn get(&self, i: usize, j: usize) -> C64 {
        let r = &self.indices[self.indptr[i]..self.indptr[i + 1]];
        match r.binary_search(&j) {
            Ok(k) => self.values[self.indptr[i] + k],
            Err(_) => ZERO,
        }
    }

    pub fn scale(&self, c: C64) -> Self {
        let mut s = self.clone();
        s.values.iter_mut().for_each(|v| *v *= c);
        s.pruned()
    }

    /// `self + c·o`.
    pub fn add_scaled(&self, c: C64, o: &Self) -> Result<Self> {
        if (self.nrows, self.ncols) != (o.nrows, o.ncols) {
            return Err(Error::Shape(format!("{}x{} + {}x{}", self.nrows, self.ncols, o.nrows, o.ncols)));
        }
        let mut trip = Vec::with_capacity(self.nnz() + o.nnz());
        for i in 0..self.nrows {
            trip.extend(self.row(i).map(|(j, v)| (i, j, v)));
            trip.extend(o.row(i).map(|(j, v)| (i, j, c * v)));
        }
        Self::from_triplets(self.nrows, self.ncols, trip)
    }

    pub fn matmul(&self, o: &Self) -> Result<Self> {
        if self.ncols != o.nrows {
            return Err(Error::Shape(format!("{}x{} * {}x{}", self.nrows, self.ncols, o.nrows, o.ncols)));
        }
        let mut acc = vec![ZERO; o.ncols];
        let mut mark = vec![usize::MAX; o.ncols];
        let mut cols = Vec::new();
        let mut indptr = vec![0usize; self.nrows + 1];
        let (mut indices, mut values) = (Vec::new(), Vec::new());
        for i in 0..self.nrows {
            cols.clear();
            for (k, a) in self.row(i) {
                for (j, b) in o.row(k) {
                    if mark[j] != i {
                        mark[j] = i;
                        acc[j] = ZERO;
                        cols.push(j);
                    }
                    acc[j] += a * b;
                }
            }
            cols.sort_unstable();
            for &j in &cols {
                indices.push(j);
                values.push(acc[j]);
            }
            indptr[i + 1] = indices.len();
        }
        Ok(SparseMatrix { nrows: self.nrows, ncols: o.ncols, indptr, indices, values }.pruned())
    }

    pub fn adjoint(&self) -> Self {
        let mut trip = Vec::with_capacity(self.nnz());
        for i in 0..self.nrows {
            trip.extend(self.row(i).map(|(j, v)| (j, i, v.conj())));
        }
        Self::from_triplets(self.ncols, self.nrows, trip).expect("transposed indices are in range")
    }

    pub fn apply(&self, x: &[C64]) -> Vec<C64> {
        (0..self.nrows).map(|i| self.row(i).map(|(j, v)| v * x[j]).sum()).collect()
    }

    pub fn to_dense(&self) -> CMat {
        let mut m = Mat::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                m[(i, j)] = v;
            }
        }
        m
    }

    /// Largest `|A_ij − conj(A_ji)|` relative to `max(1, max |A|)`; infinite when not square.
    pub fn hermitian_asymmetry(&self) -> f64 {
        if self.nrows != self.ncols {
            return f64::INFINITY;
        }
        let mut asym = 0.0f64;
        let mut scale = 1.0f64;
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                scale = scale.max(v.norm());
                asym = asym.max((v - self.get(j, i).conj()).norm());
            }
        }
        asym / scale
    }

    /// `A ⊗ c` in site-major order: entry `(s·r + a, s'·c + b) = A[s, s']·c[a, b]`,
    /// with `c` an `r × q` row-major block.
    pub fn kron_fiber(&self, c: &[C64], r: usize, q: usize) -> Result<Self> {
        if c.len() != r * q {
            return Err(Error::Shape(format!("{} coefficients for a {r}x{q} block", c.len())));
        }
        let mut trip = Vec::with_capacity(self.nnz() * r * q);
        for s in 0..self.nrows {
            for (t, v) in self.row(s) {
                for a in 0..r {
                    for b in 0..q {
                        let w = v * c[a * q + b];
                        if w != ZERO {
                            trip.push((s * r + a, t * q + b, w));
                        }
                    }
                }
            }
        }
        Self::from_triplets(self.nrows * r, self.ncols * q, trip)
    }

    /// Copy without row `r`.
    pub fn without_row(&self, r: usize) -> Result<Self> {
        if r >= self.nrows {
            return Err(Error::InvalidArgument(format!("row {r} out of range for {} rows", self.nrows)));
        }
        let mut trip = Vec::with_capacity(self.nnz());
        for i in (0..self.nrows).filter(|&i| i != r) {
            let ii = if i > r { i - 1 } else { i };
            trip.extend(self.row(i).map(|(j, v)| (ii, j, v)));
        }
        Self::from_triplets(self.nrows - 1, self.ncols, trip)
    }
}

// ---------------------------------------------------------------------------
// Specs and discretization

/// One term `a_α X^α`; `coeff` is a `d_F × d_E` row-major block.
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub indices: Vec<usize>,
    pub coeff: Vec<C64>,
}

/// Constant-coefficient operator `P = Σ a_α X^α : C^∞(G, ℂ^{d_E}) → C^∞(G, ℂ^{d_F})`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOperatorSpec {
    dim: HeisenbergDim,
    d_e: usize,
    d_f: usize,
    terms: Vec<Term>,
}

fn scalar(c: C64) -> Vec<C64> {
    vec![c]
}

impl ModelOperatorSpec {
    pub fn new(dim: HeisenbergDim, d_e: usize, d_f: usize, terms: Vec<Term>) -> Result<Self> {
        if d_e == 0 || d_f == 0 {
            return Err(Error::InvalidArgument("fiber dimensions must be positive".into()));
        }
        for t in &terms {
            if t.coeff.len() != d_e * d_f {
                return Err(Error::Shape(format!("coefficient of length {} for a {d_f}x{d_e} block", t.coeff.len())));
            }
            if let Some(&i) = t.indices.iter().find(|&&i| i >= dim.dim()) {
                return Err(Error::InvalidArgument(format!("field index {i} out of range for n = {}", dim.n())));
            }
            if t.coeff.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
                return Err(Error::InvalidArgument("non-finite coefficient".into()));
            }
        }
        Ok(ModelOperatorSpec { dim, d_e, d_f, terms })
    }

    /// Scalar operator from `(indices, coefficient)` pairs.
    pub fn scalar(dim: HeisenbergDim, terms: &[(&[usize], C64)]) -> Result<Self> {
        let terms = terms.iter().map(|(ix, c)| Term { indices: ix.to_vec(), coeff: scalar(*c) }).collect();
        Self::new(dim, 1, 1, terms)
    }

    /// `Δ_H = −Σ_{j=1}^{2n} X_j²`.
    pub fn sub_laplacian(dim: HeisenbergDim) -> Self {
        let terms = (1..dim.dim()).map(|j| Term { indices: vec![j, j], coeff: scalar(-ONE) }).collect();
        ModelOperatorSpec { dim, d_e: 1, d_f: 1, terms }
    }

    /// Folland–Stein operator `Δ_H + iγX_0`.
    pub fn folland_stein(dim: HeisenbergDim, gamma: f64) -> Self {
        let mut s = Self::sub_laplacian(dim);
        s.terms.push(Term { indices: vec![0], coeff: scalar(C64::new(0.0, gamma)) });
        s
    }

    /// Zero-order identity on `ℂ^d`.
    pub fn identity(dim: HeisenbergDim, d: usize) -> Self {
        let coeff = (0..d * d).map(|k| if k / d == k % d { ONE } else { ZERO }).collect();
        ModelOperatorSpec { dim, d_e: d, d_f: d, terms: vec![Term { indices: Vec::new(), coeff }] }
    }

    pub fn dim(&self) -> HeisenbergDim {
        self.dim
    }
    pub fn d_e(&self) -> usize {
        self.d_e
    }
    pub fn d_f(&self) -> usize {
        self.d_f
    }
    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    /// Coefficients scaled by `1 + rel·e^{iθ_k}` on a fixed angle sequence.
    pub fn perturbed(&self, rel: f64) -> Self {
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let mut k = 0usize;
        let terms = self
            .terms
            .iter()
            .map(|t| Term {
                indices: t.indices.clone(),
                coeff: t
                    .coeff
                    .iter()
                    .map(|c| {
                        k += 1;
                        *c * (ONE + C64::from_polar(rel, golden * k as f64))
                    })
                    .collect(),
            })
            .collect();
        ModelOperatorSpec { terms, ..self.clone() }
    }

    /// True when terms of different Heisenberg order are present.
    pub fn is_mixed_order(&self) -> bool {
        let orders: Vec<usize> = self.nonzero_terms().map(|t| weighted_length(&t.indices)).collect();
        orders.windows(2).any(|w| w[0] != w[1])
    }

    fn nonzero_terms(&self) -> impl Iterator<Item = &Term> {
        self.terms.iter().filter(|t| t.coeff.iter().any(|c| *c != ZERO))
    }
}

fn weighted_length(ix: &[usize]) -> usize {
    ix.iter().map(|&i| if i == 0 { 2 } else { 1 }).sum()
}

/// Largest 2-weighted length among terms with a nonzero coefficient.
pub fn heisenberg_order(spec: &ModelOperatorSpec) -> usize {
    spec.nonzero_terms().map(|t| weighted_length(&t.indices)).max().unwrap_or(0)
}

/// Central first-difference stencils.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stencil {
    Second,
    #[default]
    Fourth,
}

impl Stencil {
    fn weights(self) -> &'static [(isize, f64)] {
        match self {
            Stencil::Second => &[(-1, -0.5), (1, 0.5)],
            Stencil::Fourth => &[(-2, 1.0 / 12.0), (-1, -8.0 / 12.0), (1, 8.0 / 12.0), (2, -1.0 / 12.0)],
        }
    }
    pub fn reach(self) -> usize {
        match self {
            Stencil::Second => 1,
            Stencil::Fourth => 2,
        }
    }
}

/// Which vector fields the multi-indices name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FieldKind {
    /// Right-invariant Heisenberg fields.
    #[default]
    Heisenberg,
    /// Coordinate derivatives `∂_j`: the abelianized operator.
    Abelian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Discretization {
    pub stencil: Stencil,
    pub fields: FieldKind,
}

/// `∂_k` on the lattice with zero extension.
pub fn derivative_matrix(g: &Grid, axis: usize, stencil: Stencil) -> SparseMatrix {
    let h = g.spacing();
    let npts = g.points() as isize;
    let stride = g.stride(axis);
    let mut idx = vec![0usize; g.ndim()];
    let mut trip = Vec::with_capacity(g.sites() * 4);
    for s in 0..g.sites() {
        g.multi_index(s, &mut idx);
        let i = idx[axis] as isize;
        for &(off, w) in stencil.weights() {
            let j = i + off;
            if (0..npts).contains(&j) {
                let t = (s as isize + off * stride as isize) as usize;
                trip.push((s, t, C64::new(w / h, 0.0)));
            }
        }
    }
    SparseMatrix::from_triplets(g.sites(), g.sites(), trip).expect("neighbours are in range")
}

/// Scalar matrix of one field `X_j` (or `∂_j` for the abelian kind).
pub fn field_matrix(g: &Grid, j: usize, disc: Discretization) -> Result<SparseMatrix> {
    let m = g.ndim();
    if j >= m {
        return Err(Error::InvalidArgument(format!("field index {j} out of range")));
    }
    let dj = derivative_matrix(g, j, disc.stencil);
    if j == 0 || disc.fields == FieldKind::Abelian {
        return Ok(dj);
    }
    let n = (m - 1) / 2;
    let (other, sign) = if j <= n { (j + n, 0.5) } else { (j - n, -0.5) };
    let coords: Vec<C64> = (0..g.sites()).map(|s| C64::new(sign * g.coord(coord_index(g, s, other)), 0.0)).collect();
    let d0 = derivative_matrix(g, 0, disc.stencil);
    dj.add_scaled(ONE, &SparseMatrix::diagonal(&coords).matmul(&d0)?)
}

fn coord_index(g: &Grid, s: usize, axis: usize) -> usize {
    (s / g.stride(axis)) % g.points()
}

/// Discretized `P` together with the data the spectral routines need.
#[derive(Debug, Clone)]
pub struct OperatorMatrix {
    grid: Grid,
    d_e: usize,
    d_f: usize,
    p: SparseMatrix,
    hermitian: bool,
    boundary_band: Vec<bool>,
    horder: usize,
    experimental: bool,
}

impl OperatorMatrix {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }
    pub fn d_e(&self) -> usize {
        self.d_e
    }
    pub fn d_f(&self) -> usize {
        self.d_f
    }
    /// The `P` block, `n_F × n_E`, site-major on each side.
    pub fn p(&self) -> &SparseMatrix {
        &self.p
    }
    /// True when `P` is square and hermitian.
    pub fn is_hermitian(&self) -> bool {
        self.hermitian
    }
    /// Sites within stencil reach of the boundary.
    pub fn boundary_band(&self) -> &[bool] {
        &self.boundary_band
    }
    pub fn horder(&self) -> usize {
        self.horder
    }
    /// Mixed-order specs are accepted but marked.
    pub fn is_experimental(&self) -> bool {
        self.experimental
    }
    pub fn n_e(&self) -> usize {
        self.p.ncols()
    }
    pub fn n_f(&self) -> usize {
        self.p.nrows()
    }
    /// Side of `D`.
    pub fn side(&self) -> usize {
        self.n_e() + self.n_f()
    }
    /// Both sides are full sections over the grid, so site-major views exist.
    pub fn has_site_layout(&self) -> bool {
        let s = self.grid.sites();
        self.n_e() == s * self.d_e && self.n_f() == s * self.d_f
    }

    /// `ε` in block layout.
    pub fn epsilon(&self) -> Vec<f64> {
        (0..self.side()).map(|i| if i < self.n_e() { -1.0 } else { 1.0 }).collect()
    }

    /// Dense `D` in block layout.
    pub fn graded(&self) -> CMat {
        let ne = self.n_e();
        let mut d = Mat::zeros(self.side(), self.side());
        for i in 0..self.n_f() {
            for (j, v) in self.p.row(i) {
                d[(ne + i, j)] = I * v;
                d[(j, ne + i)] = -I * v.conj();
            }
        }
        d
    }

    /// The rank-deficient test block: `P` with one row of `F` removed, so
    /// that `dim ker P − dim ker P* = 1` whenever `P` was invertible.
    pub fn without_target_row(&self, row: usize) -> Result<Self> {
        let p = self.p.without_row(row)?;
        Ok(OperatorMatrix { p, hermitian: false, ..self.clone() })
    }

    /// Block-layout index of site-major fiber slot `(site, a)`, `a < d_E + d_F`.
    pub fn block_index(&self, site: usize, a: usize) -> usize {
        if a < self.d_e {
            site * self.d_e + a
        } else {
            self.n_e() + site * self.d_f + (a - self.d_e)
        }
    }

    /// Reorder a block-layout matrix into site-major order.
    pub fn to_site_major(&self, m: &CMat) -> Result<CompactOperatorMatrix> {
        if !self.has_site_layout() {
            return Err(Error::Shape("operator has no site-major layout".into()));
        }
        let d = self.d_e + self.d_f;
        let perm: Vec<usize> = (0..self.side()).map(|k| self.block_index(k / d, k % d)).collect();
        let out = Mat::from_fn(self.side(), self.side(), |i, j| m[(perm[i], perm[j])]);
        CompactOperatorMatrix::new(self.grid, d, out)
    }
}

pub fn build_model_operator(spec: &ModelOperatorSpec, g: &Grid) -> Result<OperatorMatrix> {
    build_model_operator_with(spec, g, Discretization::default())
}

pub fn build_model_operator_with(spec: &ModelOperatorSpec, g: &Grid, disc: Discretization) -> Result<OperatorMatrix> {
    if g.heisenberg() != spec.dim {
        return Err(Error::DimensionMismatch { expected: spec.dim.dim(), found: g.ndim() });
    }
    let horder = heisenberg_order(spec);
    let max_len = spec.terms.iter().map(|t| t.indices.len()).max().unwrap_or(0);
    let reach = max_len * disc.stencil.reach();
    if 2 * reach + 1 > g.points() {
        return Err(Error::InvalidArgument(format!(
            "stencil reach {reach} does not fit {} points per axis",
            g.points()
        )));
    }
    let fields: Vec<SparseMatrix> = (0..g.ndim()).map(|j| field_matrix(g, j, disc)).collect::<Result<_>>()?;
    let sites = g.sites();
    let mut p = SparseMatrix::zeros(sites * spec.d_f, sites * spec.d_e);
    for t in spec.nonzero_terms() {
        let mut mono = SparseMatrix::identity(sites);
        for &j in &t.indices {
            mono = mono.matmul(&fields[j])?;
        }
        p = p.add_scaled(ONE, &mono.kron_fiber(&t.coeff, spec.d_f, spec.d_e)?)?;
    }
    let hermitian = p.hermitian_asymmetry() <= 1e-12;
    let mut idx = vec![0usize; g.ndim()];
    let boundary_band = (0..sites)
        .map(|s| {
            g.multi_index(s, &mut idx);
            idx.iter().any(|&i| i < reach || i + reach >= g.points())
        })
        .collect();
    Ok(OperatorMatrix {
        grid: *g,
        d_e: spec.d_e,
        d_f: spec.d_f,
        p,
        hermitian,
        boundary_band,
        horder,
        experimental: spec.is_mixed_order(),
    })
}

// ---------------------------------------------------------------------------
// Rockland condition

/// Truncated Hermite model of the Schrödinger representation with Planck constant `λ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchroedingerRep {
    planck: f64,
    cutoff: usize,
}

impl SchroedingerRep {
    pub fn new(planck: f64, cutoff: usize) -> Result<Self> {
        if planck == 0.0 || !planck.is_finite() {
            return Err(Error::InvalidArgument(format!("Planck constant must be nonzero and finite, got {planck}")));
        }
        if cutoff < 4 {
            return Err(Error::InvalidArgument(format!("Hermite cutoff must be at least 4, got {cutoff}")));
        }
        Ok(SchroedingerRep { planck, cutoff })
    }
    pub fn planck(&self) -> f64 {
        self.planck
    }
    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    /// `dπ_λ(P)` from the span of the first `K` modes per degree of freedom
    /// into a range padded by the longest monomial, so no product is truncated.
    /// Rows: `d_F · (K+pad)^n`; columns: `d_E · K^n`.
    pub fn image(&self, spec: &ModelOperatorSpec) -> CMat {
        let n = spec.dim.n();
        let k = self.cutoff;
        let pad = spec.terms.iter().map(|t| t.indices.len()).max().unwrap_or(0);
        let kp = k + pad;
        let big = kp.pow(n as u32);
        let lam = self.planck;
        let w = lam.abs();
        // one degree of freedom, padded basis
        let ladder = |up: bool| -> CMat {
            Mat::from_fn(kp, kp, |r, c| {
                if up && r == c + 1 {
                    C64::new((c as f64 + 1.0).sqrt(), 0.0)
                } else if !up && c == r + 1 {
                    C64::new((c as f64).sqrt(), 0.0)
                } else {
                    ZERO
                }
            })
        };
        let (a, ad) = (ladder(false), ladder(true));
        let du = Mat::from_fn(kp, kp, |r, c| (a[(r, c)] - ad[(r, c)]) * (w / 2.0).sqrt());
        let mult_u = Mat::from_fn(kp, kp, |r, c| (a[(r, c)] + ad[(r, c)]) / (2.0 * w).sqrt());
        let embed = |op: &CMat, dof: usize| -> CMat {
            // identity on every other degree of freedom
            let stride = kp.pow((n - 1 - dof) as u32);
            Mat::from_fn(big, big, |r, c| {
                let (ri, ci) = ((r / stride) % kp, (c / stride) % kp);
                if r - ri * stride == c - ci * stride {
                    op[(ri, ci)]
                } else {
                    ZERO
                }
            })
        };
        let fields: Vec<CMat> = (0..spec.dim.dim())
            .map(|j| {
                if j == 0 {
                    Mat::from_fn(big, big, |r, c| if r == c { C64::new(0.0, -lam) } else { ZERO })
                } else if j <= n {
                    embed(&du, j - 1)
                } else {
                    let m = embed(&mult_u, j - n - 1);
                    Mat::from_fn(big, big, |r, c| m[(r, c)] * C64::new(0.0, lam))
                }
            })
            .collect();
        let domain: Vec<usize> = (0..big).filter(|&s| (0..n).all(|dof| (s / kp.pow(dof as u32)) % kp < k)).collect();
        let (de, df) = (spec.d_e, spec.d_f);
        let mut out = Mat::zeros(df * big, de * domain.len());
        for t in spec.nonzero_terms() {
            let mut mono = linalg::identity(big);
            for &j in &t.indices {
                mono = &mono * &fields[j];
            }
            for r in 0..df {
                for c in 0..de {
                    let coef = t.coeff[r * de + c];
                    if coef == ZERO {
                        continue;
                    }
                    for (cj, &s) in domain.iter().enumerate() {
                        for i in 0..big {
                            out[(r * big + i, c * domain.len() + cj)] += coef * mono[(i, s)];
                        }
                    }
                }
            }
        }
        out
    }

    /// Fraction of squared mass in the top `K/8` modes (any degree of freedom)
    /// for a vector on the column space of [`SchroedingerRep::image`].
    fn tail_mass(&self, n: usize, v: &[C64]) -> f64 {
        let k = self.cutoff;
        let per = k.pow(n as u32);
        let top = k - (k / 8).max(1);
        let (mut tail, mut total) = (0.0, 0.0);
        for (idx, z) in v.iter().enumerate() {
            let s = idx % per;
            let m = z.norm_sqr();
            total += m;
            if (0..n).any(|dof| (s / k.pow(dof as u32)) % k >= top) {
                tail += m;
            }
        }
        if total > 0.0 {
            tail / total
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocklandReport {
    pub lambdas: Vec<f64>,
    /// Smallest singular value of `dπ_λ(P)` per `λ`.
    pub min_singular: Vec<f64>,
    /// Hermite tail mass of the corresponding right singular vector.
    pub tail_mass: Vec<f64>,
    /// Smallest singular value of the top-order principal part over unit
    /// horizontal characters (`λ = 0`).
    pub character_min: f64,
}

impl RocklandReport {
    /// Every representation, including the characters, stays above `floor` relative to `|λ|^{k/2}`.
    pub fn holds(&self, floor: f64, horder: usize) -> bool {
        self.lambdas.iter().zip(&self.min_singular).all(|(l, s)| *s > floor * l.abs().powf(horder as f64 / 2.0))
            && self.character_min > floor
    }
}

/// Injectivity probe for `dπ_λ(P)` on the given `λ`, plus the `λ = 0` characters.
pub fn rockland_check(spec: &ModelOperatorSpec, lambdas: &[f64], cutoff: usize) -> Result<RocklandReport> {
    if lambdas.is_empty() {
        return Err(Error::InvalidArgument("no Planck constants given".into()));
    }
    let n = spec.dim.n();
    let mut min_singular = Vec::with_capacity(lambdas.len());
    let mut tail = Vec::with_capacity(lambdas.len());
    for &lam in lambdas {
        let rep = SchroedingerRep::new(lam, cutoff)?;
        let m = rep.image(spec);
        if linalg::max_abs(m.as_ref()) == 0.0 || m.nrows() < m.ncols() {
            // zero operator, or more unknowns than equations: not injective
            min_singular.push(0.0);
            tail.push(0.0);
            continue;
        }
        let svd = m.svd().map_err(|e| Error::Linalg(format!("{e:?}")))?;
        let s = svd.S().column_vector();
        let last = s.nrows() - 1;
        let v = svd.V();
        // a degenerate minimum leaves the vector free inside its eigenspace
        let near = s[last].re * (1.0 + 1e-8) + 1e-14;
        let mass = (0..=last)
            .filter(|&j| s[j].re <= near)
            .map(|j| {
                let vec: Vec<C64> = (0..v.nrows()).map(|i| v[(i, j)]).collect();
                rep.tail_mass(n, &vec)
            })
            .fold(f64::INFINITY, f64::min);
        if mass > 0.01 {
            return Err(Error::CutoffTooSmall(mass));
        }
        min_singular.push(s[last].re);
        tail.push(mass);
    }
    Ok(RocklandReport { lambdas: lambdas.to_vec(), min_singular, tail_mass: tail, character_min: character_min(spec)? })
}

/// `min_{|ξ|=1} σ_min(Σ_{top order} a_α Π iξ_{α_i})` over sampled horizontal directions.
fn character_min(spec: &ModelOperatorSpec) -> Result<f64> {
    let m = spec.dim.dim() - 1;
    let k = heisenberg_order(spec);
    let samples = 64;
    let dirs: Vec<Vec<f64>> = if m == 2 {
        (0..samples)
            .map(|s| {
                let a = 2.0 * std::f64::consts::PI * s as f64 / samples as f64;
                vec![a.cos(), a.sin()]
            })
            .collect()
    } else {
        // axes and diagonals of the unit sphere
        let mut v = Vec::new();
        for i in 0..m {
            for sign in [1.0, -1.0] {
                let mut e = vec![0.0; m];
                e[i] = sign;
                v.push(e);
            }
            for j in i + 1..m {
                for (si, sj) in [(1.0, 1.0), (1.0, -1.0)] {
                    let mut e = vec![0.0; m];
                    e[i] = si / 2f64.sqrt();
                    e[j] = sj / 2f64.sqrt();
                    v.push(e);
                }
            }
        }
        v
    };
    let (de, df) = (spec.d_e, spec.d_f);
    let mut best = f64::INFINITY;
    for xi in dirs {
        let mut mat: CMat = Mat::zeros(df, de);
        for t in spec.nonzero_terms().filter(|t| weighted_length(&t.indices) == k) {
            let mut f = ONE;
            for &j in &t.indices {
                f *= if j == 0 { ZERO } else { C64::new(0.0, xi[j - 1]) };
            }
            for r in 0..df {
                for c in 0..de {
                    mat[(r, c)] += t.coeff[r * de + c] * f;
                }
            }
        }
        let s = if df < de { 0.0 } else { linalg::singular_values(mat.as_ref())?.last().copied().unwrap_or(0.0) };
        best = best.min(s);
    }
    Ok(best)
}

/// `max ‖Au‖ / (‖Pu‖ + ‖u‖)` over probes: a lower bound for the a-priori constant.
pub fn apriori_constant(p: &OperatorMatrix, a: &OperatorMatrix, probes: &[SampledFunction]) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::InvalidArgument("no probes given".into()));
    }
    let norm = |v: &[C64]| v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    let mut best = 0.0f64;
    for u in probes {
        let v = u.values();
        if v.len() != p.n_e() || v.len() != a.n_e() {
            return Err(Error::DimensionMismatch { expected: p.n_e(), found: v.len() });
        }
        let nu = norm(v);
        if nu == 0.0 {
            return Err(Error::InvalidArgument("zero probe".into()));
        }
        let r = norm(&a.p.apply(v)) / (norm(&p.p.apply(v)) + nu);
        best = best.max(r);
    }
    Ok(best)
}

/// Lowest Landau-level probes `e^{iσx_0} e^{−|σ||z|²/4}` times a Gaussian bump of
/// radius `bump`; for `σ > 0` they are annihilated by `X_j + iX_{n+j}`.
pub fn landau_probes(g: &Grid, sigmas: &[f64], bump: f64) -> Result<Vec<SampledFunction>> {
    let m = g.ndim();
    let mut x = vec![0.0; m];
    sigmas
        .iter()
        .map(|&s| {
            let vals = (0..g.sites())
                .map(|site| {
                    g.point(site, &mut x);
                    let z2: f64 = x[1..].iter().map(|c| c * c).sum();
                    let r2: f64 = x.iter().map(|c| c * c).sum();
                    C64::from_polar((-s.abs() * z2 / 4.0 - r2 / (bump * bump)).exp(), s * x[0])
                })
                .collect();
            SampledFunction::new(*g, Fiber::Vector(1), vals)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Spectral calculus of D

#[derive(Debug, Clone)]
enum SpectrumKind {
    /// `P` hermitian: eigenpairs `(μ, v)` of `P` give `±μ` with `(v, ±iv)/√2`.
    Paired(HermitianEigen),
    Full(HermitianEigen),
}

/// Eigendecomposition of the graded operator `D`.
#[derive(Debug, Clone)]
pub struct GradedSpectrum {
    n_e: usize,
    n_f: usize,
    kind: SpectrumKind,
}

fn real_part(m: &CMat) -> Option<Mat<f64>> {
    let mut out = Mat::zeros(m.nrows(), m.ncols());
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if m[(i, j)].im != 0.0 {
                return None;
            }
            out[(i, j)] = m[(i, j)].re;
        }
    }
    Some(out)
}

impl GradedSpectrum {
    pub fn new(op: &OperatorMatrix) -> Result<Self> {
        let (n_e, n_f) = (op.n_e(), op.n_f());
        let kind = if op.hermitian {
            let p = op.p.to_dense();
            let e = match real_part(&p) {
                Some(r) => HermitianEigen::new_real(r.as_ref())?,
                None => HermitianEigen::new(p.as_ref())?,
            };
            SpectrumKind::Paired(e)
        } else {
            SpectrumKind::Full(HermitianEigen::new(op.graded().as_ref())?)
        };
        Ok(GradedSpectrum { n_e, n_f, kind })
    }

    pub fn side(&self) -> usize {
        self.n_e + self.n_f
    }

    /// Spectrum of `D`, ascending.
    pub fn eigenvalues(&self) -> Vec<f64> {
        match &self.kind {
            SpectrumKind::Full(e) => e.values.clone(),
            SpectrumKind::Paired(e) => {
                let mut v: Vec<f64> = e.values.iter().flat_map(|&m| [m, -m]).collect();
                v.sort_by(f64::total_cmp);
                v
            }
        }
    }

    /// `f(D)` in block layout.
    pub fn apply(&self, f: impl Fn(f64) -> C64) -> CMat {
        let rows: Vec<usize> = (0..self.side()).collect();
        self.apply_restricted(f, &rows)
    }

    /// Rows and columns `idx` (block layout) of `f(D)`.
    pub fn apply_restricted(&self, f: impl Fn(f64) -> C64, idx: &[usize]) -> CMat {
        match &self.kind {
            SpectrumKind::Full(e) => {
                let v = Mat::from_fn(idx.len(), e.dim(), |i, j| e.vectors[(idx[i], j)]);
                let fl: Vec<C64> = e.values.iter().map(|&l| f(l)).collect();
                linalg::weighted_outer(v.as_ref(), &fl)
            }
            SpectrumKind::Paired(e) => {
                // f(D) = [[f_e(P), −i f_o(P)], [i f_o(P), f_e(P)]]
                let ne = self.n_e;
                let mut pidx: Vec<usize> = idx.iter().map(|&i| if i < ne { i } else { i - ne }).collect();
                pidx.sort_unstable();
                pidx.dedup();
                let pos = |p: usize| pidx.binary_search(&p).unwrap();
                let v = Mat::from_fn(pidx.len(), e.dim(), |i, j| e.vectors[(pidx[i], j)]);
                let fe: Vec<C64> = e.values.iter().map(|&l| (f(l) + f(-l)) * 0.5).collect();
                let fo: Vec<C64> = e.values.iter().map(|&l| (f(l) - f(-l)) * 0.5).collect();
                let we = linalg::weighted_outer(v.as_ref(), &fe);
                let wo = linalg::weighted_outer(v.as_ref(), &fo);
                Mat::from_fn(idx.len(), idx.len(), |i, j| {
                    let (bi, bj) = (idx[i] >= ne, idx[j] >= ne);
                    let (pi, pj) =
                        (pos(if bi { idx[i] - ne } else { idx[i] }), pos(if bj { idx[j] - ne } else { idx[j] }));
                    match (bi, bj) {
                        (false, false) | (true, true) => we[(pi, pj)],
                        (false, true) => -I * wo[(pi, pj)],
                        (true, false) => I * wo[(pi, pj)],
                    }
                })
            }
        }
    }

    /// `Tr(ε f(D))` with `ε = diag(−1_E, 1_F)`.
    pub fn epsilon_trace(&self, f: impl Fn(f64) -> C64) -> C64 {
        match &self.kind {
            SpectrumKind::Full(e) => {
                let ne = self.n_e;
                (0..e.dim())
                    .map(|j| {
                        let w: f64 = (0..e.vectors.nrows())
                            .map(|i| {
                                let m = e.vectors[(i, j)].norm_sqr();
                                if i < ne {
                                    -m
                                } else {
                                    m
                                }
                            })
                            .sum();
                        f(e.values[j]) * w
                    })
                    .sum()
            }
            SpectrumKind::Paired(e) => {
                // both diagonal blocks equal f_e(P)
                let tr: C64 = e.values.iter().map(|&l| (f(l) + f(-l)) * 0.5).sum();
                tr - tr
            }
        }
    }
}

fn cayley_fn(s: f64) -> impl Fn(f64) -> C64 {
    move |l: f64| (C64::new(s * l, 0.0) + I) / (C64::new(s * l, 0.0) - I)
}

/// `U_t = (t^{−k}D + i)(t^{−k}D − i)^{-1}` in site-major layout.
pub fn cayley(d: &OperatorMatrix, t: TScale, k: usize) -> Result<CompactOperatorMatrix> {
    let spec = GradedSpectrum::new(d)?;
    d.to_site_major(&spec.apply(cayley_fn(t.value().powi(-(k as i32)))))
}

/// `‖U*U − I‖` for a dense operator.
pub fn unitarity_defect(u: &CMat) -> Result<f64> {
    let n = u.nrows();
    let ones = vec![ONE; n];
    let chain = Chain::new(n)
        .term(1.0, vec![Factor::Adjoint(u.as_ref()), Factor::Mat(u.as_ref())])
        .term(-1.0, vec![Factor::Diag(&ones)]);
    implicit_norm(&chain, NormOptions::default())
}

/// `α(D)` and the convolution kernel read off its columns at the origin.
#[derive(Debug, Clone)]
pub struct FunctionalCalculus {
    pub op: CompactOperatorMatrix,
    /// `k(w)` with `α(D)(x, y) = k(x y^{-1})`, fiber `d_E + d_F`.
    pub kernel: GridKernel,
}

/// Real-variable function from a one-variable expression.
pub fn scalar_function(alpha: &Expr) -> Result<impl Fn(f64) -> C64 + Sync> {
    let vars = alpha.free_vars();
    if vars.len() > 1 {
        return Err(Error::InvalidArgument(format!("expected a function of one variable, found {}", vars.len())));
    }
    let e = alpha.substitute(&|_| Some(Expr::var(Var::x(0))));
    let prog = e.compile(1, VarKind::X);
    Ok(move |l: f64| prog.eval(&[l], &mut Default::default()))
}

fn extract_kernel(op: &OperatorMatrix, m: &CompactOperatorMatrix) -> Result<GridKernel> {
    let g = op.grid;
    let d = m.fiber_dim();
    let o = g.origin();
    let vol = g.cell_volume();
    let mat = m.mat();
    let mut vals = Vec::with_capacity(g.sites() * d * d);
    for s in 0..g.sites() {
        for a in 0..d {
            for b in 0..d {
                vals.push(mat[(s * d + a, o * d + b)] / vol);
            }
        }
    }
    GridKernel::new(g, d, vals)
}

/// `α(D)` by the spectral theorem, with the kernel extracted from delta columns.
pub fn functional_calculus(alpha: &Expr, d: &OperatorMatrix) -> Result<FunctionalCalculus> {
    let f = scalar_function(alpha)?;
    let spec = GradedSpectrum::new(d)?;
    let op = d.to_site_major(&spec.apply(f))?;
    let kernel = extract_kernel(d, &op)?;
    Ok(FunctionalCalculus { op, kernel })
}

// ---------------------------------------------------------------------------
// Symbol classes and indices

/// `[½(εu+1)] − [½(ε+1)]` for the Cayley transform `u` of `D` at `t_ref`.
#[derive(Debug, Clone)]
pub struct SymbolClassData {
    pub op: OperatorMatrix,
    pub spectrum: GradedSpectrum,
    pub t_ref: TScale,
    pub k: usize,
    /// `ε` in block layout.
    pub epsilon: Vec<f64>,
    /// `u` in block layout.
    pub u: CMat,
    /// Kernel of `u − 1` when the operator has a site-major layout.
    pub u_kernel: Option<GridKernel>,
    /// `‖p₁² − p₁‖`.
    pub quasi_projection_defect: f64,
}

impl SymbolClassData {
    /// `p₁ = ½(εu + 1)`.
    pub fn p1(&self) -> CMat {
        Mat::from_fn(self.u.nrows(), self.u.ncols(), |i, j| {
            let id = if i == j { 1.0 } else { 0.0 };
            (self.u[(i, j)] * self.epsilon[i] + id) * 0.5
        })
    }
    /// `p₀ = ½(ε + 1)`, the projection onto `F`.
    pub fn p0(&self) -> CMat {
        Mat::from_fn(self.u.nrows(), self.u.ncols(), |i, j| {
            C64::new(if i == j { (self.epsilon[i] + 1.0) * 0.5 } else { 0.0 }, 0.0)
        })
    }
}

pub fn symbol_class(spec: &ModelOperatorSpec, g: &Grid, t_ref: TScale) -> Result<SymbolClassData> {
    symbol_class_of(build_model_operator(spec, g)?, t_ref)
}

/// Symbol class of an already discretized operator.
pub fn symbol_class_of(op: OperatorMatrix, t_ref: TScale) -> Result<SymbolClassData> {
    let k = op.horder.max(1);
    let spectrum = GradedSpectrum::new(&op)?;
    let s = t_ref.value().powi(-(k as i32));
    let u = spectrum.apply(cayley_fn(s));
    let epsilon = op.epsilon();
    let n = u.nrows();
    let ones = vec![ONE; n];
    let eps: Vec<C64> = epsilon.iter().map(|&e| C64::new(e, 0.0)).collect();
    // p₁² − p₁ = ¼(εuεu − 1)
    let chain = Chain::new(n)
        .term(0.25, vec![Factor::Diag(&eps), Factor::Mat(u.as_ref()), Factor::Diag(&eps), Factor::Mat(u.as_ref())])
        .term(-0.25, vec![Factor::Diag(&ones)]);
    let defect = implicit_norm(&chain, NormOptions::default())?;
    if defect > 0.1 {
        return Err(Error::QuasiProjection(defect));
    }
    let u_kernel = if op.has_site_layout() {
        let um1 = spectrum.apply(|l| cayley_fn(s)(l) - ONE);
        Some(extract_kernel(&op, &op.to_site_major(&um1)?)?)
    } else {
        None
    };
    Ok(SymbolClassData { op, spectrum, t_ref, k, epsilon, u, u_kernel, quasi_projection_defect: defect })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndexEstimate {
    pub t: f64,
    /// Real part of `Tr(T^t(p₁) − T^t(p₀))`.
    pub trace: f64,
    pub imag: f64,
    pub rounded: i64,
    pub distance: f64,
    /// Distance to the nearest integer exceeds 0.1.
    pub flagged: bool,
}

/// `Tr(T^t(p₁) − T^t(p₀)) = ½ Tr ε(U_t − 1)` with `U_t` the Cayley transform of `t^{−k}D`.
pub fn index_from_class(s: &SymbolClassData, t: TScale) -> IndexEstimate {
    let c = cayley_fn(t.value().powi(-(s.k as i32)));
    let tr = s.spectrum.epsilon_trace(|l| (c(l) - ONE) * 0.5);
    let rounded = tr.re.round();
    let distance = (tr.re - rounded).abs();
    IndexEstimate {
        t: t.value(),
        trace: tr.re,
        imag: tr.im,
        rounded: rounded as i64,
        distance,
        flagged: distance > 0.1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndexOracle {
    pub index: i64,
    pub kernel_dim: usize,
    pub cokernel_dim: usize,
    pub rank_tol: f64,
    /// Smallest singular value above the threshold over the largest below (∞ when none below).
    pub gap: f64,
}

/// `dim ker P − dim ker P*` from the singular values of the `P` block.
/// The default threshold is `1e−6·σ_max`; any singular value within a factor
/// `√10` of it makes the rank ambiguous.
pub fn index_oracle(d: &OperatorMatrix, rank_tol: Option<f64>) -> Result<IndexOracle> {
    let sv = linalg::singular_values(d.p.to_dense().as_ref())?;
    let smax = sv.first().copied().unwrap_or(0.0);
    let tol = rank_tol.unwrap_or(1e-6 * smax);
    let above = sv.iter().copied().filter(|&s| s > tol).fold(f64::INFINITY, f64::min);
    let below = sv.iter().copied().filter(|&s| s <= tol).fold(0.0, f64::max);
    let window = 10f64.sqrt();
    if sv.iter().any(|&s| s > tol / window && s < tol * window) {
        return Err(Error::AmbiguousRank { below, above, tol });
    }
    let rank = sv.iter().filter(|&&s| s > tol).count();
    let (ke, kf) = (d.n_e() - rank, d.n_f() - rank);
    let gap = if below > 0.0 { above / below } else { f64::INFINITY };
    Ok(IndexOracle { index: ke as i64 - kf as i64, kernel_dim: ke, cokernel_dim: kf, rank_tol: tol, gap })
}

/// Outcome of the vanishing-criterion probe.
#[derive(Debug, Clone, PartialEq)]
pub struct VanishingDecision {
    pub t_values: Vec<f64>,
    /// `t^{2n+1} max_{x,y} |α(x, δ_t(xy^{-1}))|` over lattice pairs.
    pub scaled_sup: Vec<f64>,
    /// Fitted log–log slope of `scaled_sup`, when every value is positive.
    pub slope: Option<f64>,
    pub fires: bool,
    /// `Tr T^t_α` from the collocated kernel diagonal.
    pub traces: Vec<C64>,
    /// `Some(0)` when the criterion fires.
    pub index: Option<i64>,
}

/// Probe `α(x, δ_t(xy^{-1})) = o(t^{−2n−1})` on the lattice: fires when the
/// scaled supremum is identically zero or, over the last three scales,
/// decreases and either reaches zero or falls off at least like `1/t`.
pub fn vanishing_criterion(
    alpha: &KernelSymbol,
    ts: &[TScale],
    g: &Grid,
    exec: Execution,
) -> Result<VanishingDecision> {
    if ts.is_empty() {
        return Err(Error::InvalidArgument("empty t-grid".into()));
    }
    let m = g.ndim();
    let n = (m - 1) / 2;
    let sites = g.sites();
    let mut scaled = Vec::with_capacity(ts.len());
    let mut traces = Vec::with_capacity(ts.len());
    for &t in ts {
        let tv = t.value();
        let rows = map_range(exec, sites, |xs| {
            let mut sc = KernelScratch::default();
            let (mut x, mut y, mut w, mut wt) = (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
            let mut out = vec![ZERO; alpha.fiber_dim().pow(2)];
            g.point(xs, &mut x);
            let mut best = 0.0f64;
            let mut diag = ZERO;
            for ys in 0..sites {
                g.point(ys, &mut y);
                y.iter_mut().for_each(|c| *c = -*c);
                mul_into(n, &x, &y, &mut w);
                dilate_into(tv, &w, &mut wt);
                alpha.eval(&x, &wt, &mut out, &mut sc);
                best = best.max(out.iter().map(|v| v.norm()).fold(0.0, f64::max));
                if ys == xs {
                    let d = alpha.fiber_dim();
                    diag = (0..d).map(|a| out[a * d + a]).sum();
                }
            }
            (best, diag)
        });
        let sup = rows.iter().map(|r| r.0).fold(0.0, f64::max);
        scaled.push(tv.powi(m as i32) * sup);
        let pref = Normalization::Topological.prefactor(tv, g.heisenberg());
        traces.push(rows.iter().map(|r| r.1).sum::<C64>() * pref * g.cell_volume());
    }
    let t_values: Vec<f64> = ts.iter().map(|t| t.value()).collect();
    let all_zero = scaled.iter().all(|&v| v == 0.0);
    // only the large-t tail matters: fit the last three scales
    let tail = ts.len().saturating_sub(3);
    let slope = if scaled[tail..].iter().all(|&v| v > 0.0) && ts.len() - tail >= 2 {
        let pts: Vec<(f64, f64)> = t_values[tail..].iter().zip(&scaled[tail..]).map(|(&t, &v)| (t, v)).collect();
        Some(fit_decay(&pts)?.0)
    } else {
        None
    };
    let decreasing = scaled[tail..].windows(2).all(|w| w[1] <= w[0]);
    // a tail that reaches exactly zero decays faster than any power
    let underflow = scaled.last().is_some_and(|&v| v == 0.0);
    let fires = all_zero || (decreasing && (underflow || slope.is_some_and(|s| s <= -1.0)));
    Ok(VanishingDecision { t_values, scaled_sup: scaled, slope, fires, traces, index: fires.then_some(0) })
}

/// `‖T^t(α(σ_H(D))) − α(t^{−k}D)‖` compressed to the sites inside `band·L`.
/// The symbol `α(σ_H(D))` is the kernel of `α(D)` extracted at `t = 1`.
/// Scales with `t^k` below the spectral radius of the lattice `D` are
/// marked under-resolved.
pub fn functional_calculus_defect(
    d: &OperatorMatrix,
    alpha: &Expr,
    ts: &[TScale],
    band: f64,
    opts: &MorphismOptions,
) -> Result<DefectReport> {
    if !d.has_site_layout() {
        return Err(Error::Shape("operator has no site-major layout".into()));
    }
    let f = scalar_function(alpha)?;
    let g = d.grid;
    let spec = GradedSpectrum::new(d)?;
    let kernel = extract_kernel(d, &d.to_site_major(&spec.apply(&f))?)?;
    let kernel: Arc<dyn FiberKernel> = Arc::new(kernel);
    let mut o = opts.clone();
    o.normalization = Normalization::Homogeneous;
    o.assembly = Assembly::HatProjected;
    let prepared = PreparedSymbol::new(kernel, &g, ts, &o)?;
    let mask = g.inner_mask(band);
    let dd = d.d_e + d.d_f;
    let sm_idx: Vec<usize> =
        (0..g.sites()).filter(|&s| mask[s]).flat_map(|s| (0..dd).map(move |a| s * dd + a)).collect();
    let blk_idx: Vec<usize> = sm_idx.iter().map(|&k| d.block_index(k / dd, k % dd)).collect();
    let k = d.horder.max(1) as i32;
    // α(t^{−k}D) leaves its small-argument regime while t^{−k}ρ(D) > 1;
    // those scales are flagged and left out of the fit
    let rho = spec.eigenvalues().iter().fold(0.0f64, |m, l| m.max(l.abs()));
    let (mut norms, mut under) = (Vec::new(), Vec::new());
    for &t in ts {
        let img = prepared.assemble(t, &g, &o)?;
        let s = t.value().powi(-k);
        let reference = spec.apply_restricted(|l| f(s * l), &blk_idx);
        let e = img.op.mat();
        let diff = Mat::from_fn(sm_idx.len(), sm_idx.len(), |i, j| e[(sm_idx[i], sm_idx[j])] - reference[(i, j)]);
        norms.push(linalg::singular_values(diff.as_ref())?.first().copied().unwrap_or(0.0));
        under.push(img.under_resolved || rho * s > 1.0);
    }
    DefectReport::new(ts.iter().map(|t| t.value()).collect(), norms, under)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;

    fn h1() -> HeisenbergDim {
        HeisenbergDim::new(1).unwrap()
    }

    fn coarse(spec: &ModelOperatorSpec, g: &Grid) -> Result<OperatorMatrix> {
        build_model_operator_with(spec, g, Discretization { stencil: Stencil::Second, ..Default::default() })
    }

    #[test]
    fn sparse_basics() {
        let a = SparseMatrix::from_triplets(2, 3, vec![(0, 1, ONE), (0, 1, ONE), (1, 2, I), (1, 0, ZERO)]).unwrap();
        assert_eq!(a.nnz(), 2);
        assert_eq!(a.get(0, 1), C64::new(2.0, 0.0));
        let b = a.adjoint();
        assert_eq!(b.get(2, 1), -I);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.get(0, 0), C64::new(4.0, 0.0));
        assert_eq!(c.get(1, 1), ONE);
        assert_eq!(a.apply(&[ONE, ONE, ONE]), vec![C64::new(2.0, 0.0), I]);
        let k = SparseMatrix::identity(2).kron_fiber(&[ONE, I], 1, 2).unwrap();
        assert_eq!((k.nrows(), k.ncols()), (2, 4));
        assert_eq!(k.get(1, 3), I);
        assert_eq!(a.without_row(0).unwrap().get(0, 2), I);
    }

    #[test]
    fn order_examples() {
        let d = h1();
        let x1x2 = ModelOperatorSpec::scalar(d, &[(&[1, 2], ONE)]).unwrap();
        assert_eq!(heisenberg_order(&x1x2), 2);
        let x0 = ModelOperatorSpec::scalar(d, &[(&[0], ONE)]).unwrap();
        assert_eq!(heisenberg_order(&x0), 2);
        assert_eq!(heisenberg_order(&ModelOperatorSpec::folland_stein(d, 0.5)), 2);
        let mixed = ModelOperatorSpec::scalar(d, &[(&[1], ONE), (&[1, 1], ONE)]).unwrap();
        assert!(mixed.is_mixed_order());
        assert!(!ModelOperatorSpec::sub_laplacian(d).is_mixed_order());
    }

    #[test]
    fn x0_of_x0_is_one_inside() {
        let g = Grid::new(h1(), 11, 2.0).unwrap();
        let spec = ModelOperatorSpec::scalar(h1(), &[(&[0], ONE)]).unwrap();
        let op = build_model_operator(&spec, &g).unwrap();
        let f: Vec<C64> = (0..g.sites()).map(|s| C64::new(g.point_vec(s)[0], 0.0)).collect();
        let r = op.p().apply(&f);
        for s in 0..g.sites() {
            if !op.boundary_band()[s] {
                assert!((r[s] - ONE).norm() < 1e-8);
            }
        }
    }

    #[test]
    fn zero_spec_is_zero_matrix() {
        let g = Grid::new(h1(), 9, 1.0).unwrap();
        let spec = ModelOperatorSpec::scalar(h1(), &[(&[1, 2], ZERO)]).unwrap();
        assert_eq!(build_model_operator(&spec, &g).unwrap().p().nnz(), 0);
    }

    #[test]
    fn sub_laplacian_on_central_gaussian() {
        // x0-independent: Δ_H f = −(∂_1² + ∂_2²) f; analytic (4 − 4|z|²) e^{−|z|²}
        let g = Grid::new(h1(), 61, 2.4).unwrap();
        let op = build_model_operator(&ModelOperatorSpec::sub_laplacian(h1()), &g).unwrap();
        assert!(op.is_hermitian());
        let f: Vec<C64> = (0..g.sites())
            .map(|s| {
                let x = g.point_vec(s);
                C64::new((-(x[1] * x[1] + x[2] * x[2])).exp(), 0.0)
            })
            .collect();
        let r = op.p().apply(&f);
        let mut err = 0.0f64;
        for s in 0..g.sites() {
            let x = g.point_vec(s);
            if x.iter().all(|c| c.abs() <= 1.5) {
                let z2 = x[1] * x[1] + x[2] * x[2];
                err = err.max((r[s].re - (4.0 - 4.0 * z2) * (-z2).exp()).abs());
            }
        }
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn fields_are_antisymmetric_and_commute_to_minus_x0() {
        let g = Grid::new(h1(), 9, 2.0).unwrap();
        let disc = Discretization::default();
        let x1 = field_matrix(&g, 1, disc).unwrap();
        assert!(x1.add_scaled(ONE, &x1.adjoint()).unwrap().nnz() == 0);
        // [X1, X2] f = −X0 f on a polynomial, away from the boundary
        let x2 = field_matrix(&g, 2, disc).unwrap();
        let x0 = field_matrix(&g, 0, disc).unwrap();
        let f: Vec<C64> = (0..g.sites()).map(|s| C64::new(g.point_vec(s)[0], 0.0)).collect();
        let a = x1.apply(&x2.apply(&f));
        let b = x2.apply(&x1.apply(&f));
        let c = x0.apply(&f);
        let op = build_model_operator(&ModelOperatorSpec::scalar(h1(), &[(&[1, 2], ONE)]).unwrap(), &g).unwrap();
        for s in 0..g.sites() {
            if !op.boundary_band()[s] {
                assert!((a[s] - b[s] + c[s]).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn rockland_sub_laplacian_and_folland_stein() {
        let d = h1();
        let lams = [-2.0, -0.5, 0.5, 2.0];
        let r = rockland_check(&ModelOperatorSpec::sub_laplacian(d), &lams, 32).unwrap();
        for (l, s) in lams.iter().zip(&r.min_singular) {
            assert!((s - l.abs()).abs() < 0.01 * l.abs(), "{l} {s}");
        }
        assert!((r.character_min - 1.0).abs() < 1e-12);
        let fs1 = rockland_check(&ModelOperatorSpec::folland_stein(d, 1.0), &lams, 32).unwrap();
        assert!(fs1.min_singular.iter().copied().fold(f64::INFINITY, f64::min) < 1e-3);
        let fs05 = rockland_check(&ModelOperatorSpec::folland_stein(d, 0.5), &lams, 32).unwrap();
        assert!(fs05.min_singular.iter().zip(&lams).all(|(s, l)| *s > 0.1 * l.abs()));
        let zero = ModelOperatorSpec::scalar(d, &[(&[1], ZERO)]).unwrap();
        assert!(rockland_check(&zero, &lams, 8).unwrap().min_singular.iter().all(|&s| s == 0.0));
        // X0 alone fails on the characters
        let x0 = ModelOperatorSpec::scalar(d, &[(&[0], ONE)]).unwrap();
        assert_eq!(rockland_check(&x0, &[1.0], 8).unwrap().character_min, 0.0);
        assert!(SchroedingerRep::new(0.0, 8).is_err());
        assert!(SchroedingerRep::new(1.0, 3).is_err());
    }

    #[test]
    fn creation_operator_is_injective_with_padding() {
        // X1 − iX2 ↦ ∂_u + λu, creation for λ > 0 up to scale
        let d = h1();
        let s = ModelOperatorSpec::scalar(d, &[(&[1], ONE), (&[2], -I)]).unwrap();
        let r = rockland_check(&s, &[1.0, -1.0], 16).unwrap();
        assert!(r.min_singular.iter().any(|&v| v < 1e-10));
        assert!(r.min_singular.iter().any(|&v| v > 0.5));
    }

    #[test]
    fn cayley_examples() {
        let g = Grid::new(h1(), 5, 1.0).unwrap();
        let zero = build_model_operator(&ModelOperatorSpec::scalar(h1(), &[(&[1], ZERO)]).unwrap(), &g).unwrap();
        let u = cayley(&zero, TScale::new(1.0).unwrap(), 2).unwrap();
        let n = u.side();
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { -ONE } else { ZERO };
                assert!((u.mat()[(i, j)] - want).norm() < 1e-12);
            }
        }
        assert!((cayley_fn(1.0)(1.0) - I).norm() < 1e-15);
        let op = coarse(&ModelOperatorSpec::sub_laplacian(h1()), &g).unwrap();
        let u = cayley(&op, TScale::new(2.0).unwrap(), 2).unwrap();
        assert!(unitarity_defect(u.mat()).unwrap() < 1e-10);
    }

    #[test]
    fn functional_calculus_examples() {
        let g = Grid::new(h1(), 5, 1.0).unwrap();
        let op = coarse(&ModelOperatorSpec::sub_laplacian(h1()), &g).unwrap();
        let id = functional_calculus(&parse("1").unwrap(), &op).unwrap();
        let n = id.op.side();
        assert!((0..n).all(|i| (0..n).all(|j| (id.op.mat()[(i, j)] - if i == j { ONE } else { ZERO }).norm() < 1e-10)));
        let lin = functional_calculus(&parse("x0").unwrap(), &op).unwrap();
        let dd = op.to_site_major(&op.graded()).unwrap();
        assert!(linalg::max_abs((lin.op.mat() - dd.mat()).as_ref()) < 1e-10);
        // heat-kernel positivity of the extracted column
        let g = Grid::new(h1(), 9, 3.0).unwrap();
        let op = coarse(&ModelOperatorSpec::sub_laplacian(h1()), &g).unwrap();
        // even α gives α(Δ_H) on both diagonal blocks; e^{−s|x|} is the heat semigroup
        let heat = functional_calculus(&parse("exp(-0.05*abs(x0))").unwrap(), &op).unwrap();
        let v = heat.kernel.values();
        let peak = v.iter().map(|z| z.norm()).fold(0.0, f64::max);
        let low = v.chunks(4).map(|c| c[0].re.min(c[3].re)).fold(f64::INFINITY, f64::min);
        // the discretized shear terms are not an M-matrix, so positivity holds only approximately
        assert!(low >= -1e-3 * peak, "{low} {peak}");
    }

    #[test]
    fn index_examples() {
        let g = Grid::new(h1(), 5, 1.5).unwrap();
        let t = TScale::new(1.0).unwrap();
        for spec in [ModelOperatorSpec::sub_laplacian(h1()), ModelOperatorSpec::identity(h1(), 1)] {
            let s = symbol_class_of(coarse(&spec, &g).unwrap(), t).unwrap();
            assert!(s.quasi_projection_defect < 1e-10);
            let e = index_from_class(&s, t);
            assert_eq!(e.rounded, 0);
            assert!(e.distance < 1e-10);
            assert_eq!(index_oracle(&s.op, None).unwrap().index, 0);
        }
        let lap = coarse(&ModelOperatorSpec::sub_laplacian(h1()), &g).unwrap();
        let rect = lap.without_target_row(0).unwrap();
        assert_eq!(index_oracle(&rect, None).unwrap().index, 1);
        let s = symbol_class_of(rect, t).unwrap();
        for tv in [0.5, 1.0, 4.0] {
            let e = index_from_class(&s, TScale::new(tv).unwrap());
            assert_eq!(e.rounded, 1);
            assert!(e.distance < 1e-8, "{e:?}");
        }
    }

    #[test]
    fn oracle_rejects_straddling_rank() {
        let g = Grid::new(h1(), 5, 1.0).unwrap();
        let op = build_model_operator(&ModelOperatorSpec::identity(h1(), 1), &g).unwrap();
        assert!(matches!(index_oracle(&op, Some(1.0)), Err(Error::AmbiguousRank { .. })));
        assert_eq!(index_oracle(&op, Some(1e-3)).unwrap().gap, f64::INFINITY);
    }

    #[test]
    fn vanishing_examples() {
        let g = Grid::new(h1(), 5, 2.0).unwrap();
        let ts = TScale::list(&[1.0, 2.0, 4.0, 8.0]).unwrap();
        let vanishing = KernelSymbol::parse("sqnorm^4*exp(-sqnorm)", h1(), 8.0).unwrap();
        let r = vanishing_criterion(&vanishing, &ts, &g, Execution::Sequential).unwrap();
        assert!(r.fires, "{r:?}");
        assert!(r.traces.iter().all(|t| t.norm() < 1e-12));
        let diag = KernelSymbol::parse("exp(-sqnorm)", h1(), 8.0).unwrap();
        let r = vanishing_criterion(&diag, &ts, &g, Execution::Sequential).unwrap();
        assert!(!r.fires);
        let zero = KernelSymbol::parse("0", h1(), 1.0).unwrap();
        assert_eq!(vanishing_criterion(&zero, &ts, &g, Execution::Sequential).unwrap().index, Some(0));
        // finer lattice: the scaled supremum peaks at t = 4 and only the longer grid sees the tail
        let g = Grid::new(h1(), 9, 3.0).unwrap();
        let long = TScale::geometric(1.0, 2.0, 6).unwrap();
        let r = vanishing_criterion(&vanishing, &long, &g, Execution::Sequential).unwrap();
        assert!(r.fires && r.scaled_sup[2] > r.scaled_sup[1], "{r:?}");
        assert!(!vanishing_criterion(&vanishing, &ts, &g, Execution::Sequential).unwrap().fires);
    }

    #[test]
    fn apriori_identity_bound() {
        let g = Grid::new(h1(), 9, 3.0).unwrap();
        let p = coarse(&ModelOperatorSpec::sub_laplacian(h1()), &g).unwrap();
        let a = build_model_operator(&ModelOperatorSpec::identity(h1(), 1), &g).unwrap();
        let probes = landau_probes(&g, &[0.5, 1.0, -1.0], 1.5).unwrap();
        let c = apriori_constant(&p, &a, &probes).unwrap();
        assert!(c <= 1.0 && c > 0.0);
        assert!(apriori_constant(&p, &a, &[]).is_err());
    }
}
