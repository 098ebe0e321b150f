//! Finite lattices in `G ≅ ℝ^{2n+1}`, sampled functions, quadrature and the
//! fiberwise Fourier transform.
//!
//! The Fourier convention is `f̂(ξ) = ∫ f(y) e^{−i y·ξ} dy`. The discrete
//! forward transform carries the weight `h^{2n+1}`; the inverse carries
//! `(2π)^{−(2n+1)} Δξ^{2n+1}` with `Δξ = 2π / (N h)`, so both are exact
//! inverses and Parseval holds to rounding.

use crate::expr::{MatExpr, Program, Scratch, VarKind};
use crate::heisenberg::HeisenbergDim;
use crate::par::{map_range, Execution};
use crate::{Error, Result, C64};
use rustfft::FftPlanner;
use std::f64::consts::PI;

/// Uniform lattice `{−L, −L+h, …, L}^{2n+1}` with `N` odd points per axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    dim: HeisenbergDim,
    points: usize,
    extent: f64,
}

impl Grid {
    pub fn new(dim: HeisenbergDim, points: usize, extent: f64) -> Result<Grid> {
        if points < 3 || points % 2 == 0 {
            return Err(Error::InvalidArgument(format!("points per axis must be odd and >= 3, got {points}")));
        }
        if !(extent > 0.0) || !extent.is_finite() {
            return Err(Error::InvalidArgument(format!("extent must be positive, got {extent}")));
        }
        Ok(Grid { dim, points, extent })
    }
    pub fn heisenberg(&self) -> HeisenbergDim {
        self.dim
    }
    /// Number of coordinates, `2n+1`.
    pub fn ndim(&self) -> usize {
        self.dim.dim()
    }
    pub fn points(&self) -> usize {
        self.points
    }
    pub fn extent(&self) -> f64 {
        self.extent
    }
    pub fn spacing(&self) -> f64 {
        2.0 * self.extent / (self.points as f64 - 1.0)
    }
    /// Quadrature weight of one site, `h^{2n+1}`.
    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.ndim() as i32)
    }
    pub fn sites(&self) -> usize {
        self.points.pow(self.ndim() as u32)
    }
    /// Half-width in lattice steps, `M = (N−1)/2`.
    pub fn half(&self) -> usize {
        (self.points - 1) / 2
    }
    /// Axis stride of coordinate `k` (coordinate 0 varies slowest).
    pub fn stride(&self, k: usize) -> usize {
        self.points.pow((self.ndim() - 1 - k) as u32)
    }
    /// Per-axis indices of a site.
    pub fn multi_index(&self, site: usize, out: &mut [usize]) {
        let mut r = site;
        for k in (0..self.ndim()).rev() {
            out[k] = r % self.points;
            r /= self.points;
        }
    }
    pub fn site_of(&self, idx: &[usize]) -> usize {
        idx.iter().fold(0, |acc, &i| acc * self.points + i)
    }
    pub fn coord(&self, i: usize) -> f64 {
        -self.extent + i as f64 * self.spacing()
    }
    /// Coordinates of a site.
    pub fn point(&self, site: usize, out: &mut [f64]) {
        let mut r = site;
        let h = self.spacing();
        for k in (0..self.ndim()).rev() {
            out[k] = -self.extent + (r % self.points) as f64 * h;
            r /= self.points;
        }
    }
    pub fn point_vec(&self, site: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.ndim()];
        self.point(site, &mut v);
        v
    }
    /// Site index of the origin.
    pub fn origin(&self) -> usize {
        let m = self.half();
        self.site_of(&vec![m; self.ndim()])
    }
    /// Sites whose every coordinate lies in `[−frac·L, frac·L]`.
    pub fn inner_mask(&self, frac: f64) -> Vec<bool> {
        let lim = frac * self.extent + 1e-12;
        let mut x = vec![0.0; self.ndim()];
        (0..self.sites())
            .map(|s| {
                self.point(s, &mut x);
                x.iter().all(|c| c.abs() <= lim)
            })
            .collect()
    }
    /// Dual lattice of the discrete Fourier transform: same `N`, spacing `2π/(N h)`.
    pub fn dual(&self) -> Grid {
        let dxi = 2.0 * PI / (self.points as f64 * self.spacing());
        Grid { dim: self.dim, points: self.points, extent: self.half() as f64 * dxi }
    }
}

/// Fiber shape of a sampled function.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fiber {
    /// `d` components per site (a section of a rank-`d` bundle).
    Vector(usize),
    /// `d × d` row-major block per site.
    Matrix(usize),
}

impl Fiber {
    pub fn len(self) -> usize {
        match self {
            Fiber::Vector(d) => d,
            Fiber::Matrix(d) => d * d,
        }
    }
    pub fn is_empty(self) -> bool {
        self.len() == 0
    }
    pub fn dim(self) -> usize {
        match self {
            Fiber::Vector(d) | Fiber::Matrix(d) => d,
        }
    }
}

/// Which side of the Fourier transform a sample lives on; fixes the quadrature weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Space,
    Frequency,
}

/// Values on a grid, site-major: `values[site * fiber.len() + k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledFunction {
    grid: Grid,
    fiber: Fiber,
    domain: Domain,
    values: Vec<C64>,
}

impl SampledFunction {
    pub fn new(grid: Grid, fiber: Fiber, values: Vec<C64>) -> Result<Self> {
        Self::with_domain(grid, fiber, Domain::Space, values)
    }
    pub fn with_domain(grid: Grid, fiber: Fiber, domain: Domain, values: Vec<C64>) -> Result<Self> {
        if fiber.is_empty() {
            return Err(Error::Shape("fiber dimension must be positive".into()));
        }
        if values.len() != grid.sites() * fiber.len() {
            return Err(Error::Shape(format!(
                "{} values for {} sites with fiber {}",
                values.len(),
                grid.sites(),
                fiber.len()
            )));
        }
        if values.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::InvalidArgument("non-finite sample".into()));
        }
        Ok(SampledFunction { grid, fiber, domain, values })
    }
    pub fn zeros(grid: Grid, fiber: Fiber) -> Self {
        SampledFunction {
            grid,
            fiber,
            domain: Domain::Space,
            values: vec![C64::new(0.0, 0.0); grid.sites() * fiber.len()],
        }
    }
    pub fn grid(&self) -> &Grid {
        &self.grid
    }
    pub fn fiber(&self) -> Fiber {
        self.fiber
    }
    pub fn domain(&self) -> Domain {
        self.domain
    }
    pub fn values(&self) -> &[C64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [C64] {
        &mut self.values
    }
    pub fn into_values(self) -> Vec<C64> {
        self.values
    }
    pub fn at(&self, site: usize) -> &[C64] {
        let d = self.fiber.len();
        &self.values[site * d..(site + 1) * d]
    }
    /// Quadrature weight per site on this function's side of the transform.
    pub fn weight(&self) -> f64 {
        match self.domain {
            Domain::Space => self.grid.cell_volume(),
            Domain::Frequency => {
                let m = self.grid.ndim() as i32;
                (self.grid.spacing() / (2.0 * PI)).powi(m)
            }
        }
    }
}

fn check_vars(e: &MatExpr, dim: usize, kind: VarKind) -> Result<()> {
    for v in e.free_vars() {
        if v.kind != kind || v.index >= dim {
            return Err(Error::UnboundSymbol(v.to_string()));
        }
    }
    for entry in &e.entries {
        for k in entry.sqnorm_families().into_iter().flatten() {
            if k != kind {
                return Err(Error::UnboundSymbol(format!("sqnorm({})", k.prefix())));
            }
        }
    }
    Ok(())
}

/// Sample an expression on the grid. A column yields a vector fiber, a square
/// array of side `d > 1` a matrix fiber.
pub fn evaluate(e: &MatExpr, g: &Grid) -> Result<SampledFunction> {
    evaluate_as(e, g, VarKind::X, Execution::default())
}

/// Sample with the grid coordinates bound to the family `kind`.
pub fn evaluate_as(e: &MatExpr, g: &Grid, kind: VarKind, exec: Execution) -> Result<SampledFunction> {
    let dim = g.ndim();
    check_vars(e, dim, kind)?;
    let fiber = if e.cols == 1 {
        Fiber::Vector(e.rows)
    } else if e.is_square() {
        Fiber::Matrix(e.rows)
    } else {
        return Err(Error::Shape(format!("cannot sample a {}x{} array as a fiber", e.rows, e.cols)));
    };
    let progs: Vec<Program> = e.entries.iter().map(|x| x.compile(dim, kind)).collect();
    let base = match kind {
        VarKind::X => 0,
        VarKind::Y => dim,
        VarKind::Xi => 2 * dim,
    };
    let rows = map_range(exec, g.sites(), |s| {
        let mut args = vec![0.0; 3 * dim];
        g.point(s, &mut args[base..base + dim]);
        let mut sc = Scratch::default();
        progs.iter().map(|p| p.eval(&args, &mut sc)).collect::<Vec<_>>()
    });
    let domain = if kind == VarKind::Xi { Domain::Frequency } else { Domain::Space };
    SampledFunction::with_domain(*g, fiber, domain, rows.into_iter().flatten().collect())
}

/// Riemann sum `Σ f · w` of a scalar function.
pub fn integrate(f: &SampledFunction) -> Result<C64> {
    if f.fiber.len() != 1 {
        return Err(Error::Shape("integrate expects a scalar fiber".into()));
    }
    Ok(f.values.iter().sum::<C64>() * f.weight())
}

/// `L²` norm with the quadrature weight of the function's side.
pub fn l2_norm(f: &SampledFunction) -> f64 {
    (f.values.iter().map(|v| v.norm_sqr()).sum::<f64>() * f.weight()).sqrt()
}

fn transform(f: &SampledFunction, inverse: bool) -> SampledFunction {
    let g = f.grid;
    let (npts, m) = (g.points, g.half() as i64);
    let comps = f.fiber.len();
    let mut planner = FftPlanner::<f64>::new();
    let fft = if inverse { planner.plan_fft_inverse(npts) } else { planner.plan_fft_forward(npts) };
    let sign = if inverse { -1.0 } else { 1.0 };
    // out[k+M] = F[k mod N] · e^{±2πi M k / N}
    let phase: Vec<C64> =
        (-m..=m).map(|k| C64::from_polar(1.0, sign * 2.0 * PI * (m * k) as f64 / npts as f64)).collect();
    let mut data = f.values.clone();
    let mut line = vec![C64::new(0.0, 0.0); npts];
    let mut buf = vec![C64::new(0.0, 0.0); npts];
    let sites = g.sites();
    for axis in 0..g.ndim() {
        let stride = g.stride(axis);
        for start in 0..sites {
            if (start / stride) % npts != 0 {
                continue;
            }
            for c in 0..comps {
                for (j, l) in line.iter_mut().enumerate() {
                    *l = data[(start + j * stride) * comps + c];
                }
                fft.process(&mut line);
                for (kk, b) in buf.iter_mut().enumerate() {
                    let k = kk as i64 - m;
                    let src = k.rem_euclid(npts as i64) as usize;
                    *b = line[src] * phase[kk];
                }
                for (j, b) in buf.iter().enumerate() {
                    data[(start + j * stride) * comps + c] = *b;
                }
            }
        }
    }
    let (grid, domain, w) = if inverse {
        let space = Grid { extent: (npts - 1) as f64 / 2.0 * 2.0 * PI / (npts as f64 * g.spacing()), ..g };
        (space, Domain::Space, f.weight())
    } else {
        (g.dual(), Domain::Frequency, g.cell_volume())
    };
    data.iter_mut().for_each(|v| *v *= w);
    SampledFunction { grid, fiber: f.fiber, domain, values: data }
}

/// Discrete `f̂(ξ) = Σ f(y) e^{−i y·ξ} h^{2n+1}` on the dual grid.
pub fn fiber_fourier(f: &SampledFunction) -> SampledFunction {
    transform(f, false)
}

/// Inverse of [`fiber_fourier`].
pub fn fiber_fourier_inverse(f: &SampledFunction) -> SampledFunction {
    transform(f, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_matrix;

    fn grid(n: usize, l: f64) -> Grid {
        Grid::new(HeisenbergDim::new(1).unwrap(), n, l).unwrap()
    }

    #[test]
    fn evaluate_examples() {
        let g = grid(5, 2.0);
        let one = evaluate(&parse_matrix("1").unwrap(), &g).unwrap();
        assert!(one.values().iter().all(|v| *v == C64::new(1.0, 0.0)));
        let sq = evaluate(&parse_matrix("sqnorm").unwrap(), &g).unwrap();
        let s = g.site_of(&[3, 3, 3]);
        assert_eq!(sq.at(s)[0], C64::new(3.0, 0.0));
        let gauss = evaluate(&parse_matrix("exp(-sqnorm)").unwrap(), &g).unwrap();
        assert_eq!(gauss.at(g.origin())[0], C64::new(1.0, 0.0));
        assert!(matches!(evaluate(&parse_matrix("y1").unwrap(), &g), Err(Error::UnboundSymbol(_))));
        assert!(matches!(evaluate(&parse_matrix("x5").unwrap(), &g), Err(Error::UnboundSymbol(_))));
        let m = evaluate(&parse_matrix("[[1, x1], [x2, 0]]").unwrap(), &g).unwrap();
        assert_eq!(m.fiber(), Fiber::Matrix(2));
        assert!(evaluate(&parse_matrix("[[1, 2]]").unwrap(), &g).is_err());
    }

    #[test]
    fn dft_round_trip_and_parseval() {
        let g = grid(9, 3.0);
        let f = evaluate(&parse_matrix("[[exp(-sqnorm/2)*(1 + i*x1)], [x0*exp(-sqnorm)]]").unwrap(), &g).unwrap();
        let fh = fiber_fourier(&f);
        let back = fiber_fourier_inverse(&fh);
        let err = f.values().iter().zip(back.values()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(err < 1e-12, "{err}");
        assert!((back.grid().spacing() - g.spacing()).abs() < 1e-14);
        assert!((l2_norm(&f) - l2_norm(&fh)).abs() < 1e-10 * l2_norm(&f));
    }

    #[test]
    fn delta_transforms_to_constant() {
        let g = grid(7, 3.0);
        let mut v = vec![C64::new(0.0, 0.0); g.sites()];
        v[g.origin()] = C64::new(1.0 / g.cell_volume(), 0.0);
        let fh = fiber_fourier(&SampledFunction::new(g, Fiber::Vector(1), v).unwrap());
        assert!(fh.values().iter().all(|z| (z - C64::new(1.0, 0.0)).norm() < 1e-12));
    }
}
