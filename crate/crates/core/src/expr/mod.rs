//! Closed-form expressions over group coordinates.
//!
//! Symbols, test functions and their Fourier-side counterparts are kept as
//! ASTs and sampled on demand, so a kernel can be evaluated at any dilated
//! argument without interpolation.

mod compile;
mod diff;
mod parse;
mod poly;

pub use compile::{Program, Scratch};
pub use parse::{parse, parse_matrix};
pub use poly::Polynomial;

use crate::{Error, Result, C64};
use std::collections::BTreeSet;
use std::fmt;

/// Coordinate families. `X` is the base point, `Y` the fiber (tangent) variable
/// of a kernel symbol, `Xi` the cotangent variable of a Fourier-side symbol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VarKind {
    X,
    Y,
    Xi,
}

impl VarKind {
    pub fn prefix(self) -> &'static str {
        match self {
            VarKind::X => "x",
            VarKind::Y => "y",
            VarKind::Xi => "xi",
        }
    }
    fn slot_base(self) -> usize {
        match self {
            VarKind::X => 0,
            VarKind::Y => 1,
            VarKind::Xi => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var {
    pub kind: VarKind,
    pub index: usize,
}

impl Var {
    pub fn x(index: usize) -> Var {
        Var { kind: VarKind::X, index }
    }
    pub fn y(index: usize) -> Var {
        Var { kind: VarKind::Y, index }
    }
    pub fn xi(index: usize) -> Var {
        Var { kind: VarKind::Xi, index }
    }
    /// Position in a flat argument vector holding `dim` coordinates per family.
    pub fn slot(self, dim: usize) -> usize {
        self.kind.slot_base() * dim + self.index
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.kind.prefix(), self.index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Exp,
    Sin,
    Cos,
    Sqrt,
    Abs,
    Conj,
}

impl Func {
    pub fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Conj => "conj",
        }
    }
    pub fn from_name(s: &str) -> Option<Func> {
        Some(match s {
            "exp" => Func::Exp,
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            "conj" => Func::Conj,
            _ => return None,
        })
    }
    pub fn apply(self, z: C64) -> C64 {
        match self {
            Func::Exp => z.exp(),
            Func::Sin => z.sin(),
            Func::Cos => z.cos(),
            Func::Sqrt => C64::new(z.re, z.im + 0.0).sqrt(),
            Func::Abs => C64::new(z.norm(), 0.0),
            Func::Conj => z.conj(),
        }
    }
}

/// Scalar expression tree.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(C64),
    Var(Var),
    /// Euclidean squared norm of a coordinate family; `None` means the
    /// context's default family.
    Sqnorm(Option<VarKind>),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

#[allow(clippy::should_implement_trait)]
impl Expr {
    pub fn real(v: f64) -> Expr {
        Expr::Const(C64::new(v, 0.0))
    }
    pub fn zero() -> Expr {
        Expr::real(0.0)
    }
    pub fn one() -> Expr {
        Expr::real(1.0)
    }
    pub fn imag_unit() -> Expr {
        Expr::Const(C64::new(0.0, 1.0))
    }
    pub fn var(v: Var) -> Expr {
        Expr::Var(v)
    }
    pub fn add(a: Expr, b: Expr) -> Expr {
        Expr::Add(Box::new(a), Box::new(b))
    }
    pub fn sub(a: Expr, b: Expr) -> Expr {
        Expr::Sub(Box::new(a), Box::new(b))
    }
    pub fn mul(a: Expr, b: Expr) -> Expr {
        Expr::Mul(Box::new(a), Box::new(b))
    }
    pub fn div(a: Expr, b: Expr) -> Expr {
        Expr::Div(Box::new(a), Box::new(b))
    }
    pub fn pow(a: Expr, b: Expr) -> Expr {
        Expr::Pow(Box::new(a), Box::new(b))
    }
    pub fn neg(a: Expr) -> Expr {
        Expr::Neg(Box::new(a))
    }
    pub fn call(f: Func, a: Expr) -> Expr {
        Expr::Call(f, Box::new(a))
    }

    pub fn as_const(&self) -> Option<C64> {
        match self {
            Expr::Const(c) => Some(*c),
            _ => None,
        }
    }

    /// Replace every `sqnorm` node by an explicit sum of squares over `dim` coordinates.
    pub fn expand_sqnorm(&self, dim: usize, default: VarKind) -> Expr {
        self.map_leaves(&|e| match e {
            Expr::Sqnorm(k) => {
                let kind = k.unwrap_or(default);
                let mut acc: Option<Expr> = None;
                for i in 0..dim {
                    let v = Expr::var(Var { kind, index: i });
                    let sq = Expr::mul(v.clone(), v);
                    acc = Some(match acc {
                        None => sq,
                        Some(a) => Expr::add(a, sq),
                    });
                }
                Some(acc.unwrap_or_else(Expr::zero))
            }
            _ => None,
        })
    }

    /// Substitute variables. Variables for which `f` returns `None` are kept.
    pub fn substitute(&self, f: &dyn Fn(Var) -> Option<Expr>) -> Expr {
        self.map_leaves(&|e| match e {
            Expr::Var(v) => f(*v),
            _ => None,
        })
    }

    fn map_leaves(&self, f: &dyn Fn(&Expr) -> Option<Expr>) -> Expr {
        if let Some(r) = f(self) {
            return r;
        }
        let b = |e: &Expr| Box::new(e.map_leaves(f));
        match self {
            Expr::Const(_) | Expr::Var(_) | Expr::Sqnorm(_) => self.clone(),
            Expr::Neg(a) => Expr::Neg(b(a)),
            Expr::Add(x, y) => Expr::Add(b(x), b(y)),
            Expr::Sub(x, y) => Expr::Sub(b(x), b(y)),
            Expr::Mul(x, y) => Expr::Mul(b(x), b(y)),
            Expr::Div(x, y) => Expr::Div(b(x), b(y)),
            Expr::Pow(x, y) => Expr::Pow(b(x), b(y)),
            Expr::Call(g, a) => Expr::Call(*g, b(a)),
        }
    }

    /// Free variables. `sqnorm` nodes contribute their family through `families`.
    pub fn free_vars(&self) -> BTreeSet<Var> {
        let mut out = BTreeSet::new();
        self.visit(&mut |e| {
            if let Expr::Var(v) = e {
                out.insert(*v);
            }
        });
        out
    }

    /// Families referenced through `sqnorm` (with `None` for the bare form).
    pub fn sqnorm_families(&self) -> BTreeSet<Option<VarKind>> {
        let mut out = BTreeSet::new();
        self.visit(&mut |e| {
            if let Expr::Sqnorm(k) = e {
                out.insert(*k);
            }
        });
        out
    }

    /// True if the expression mentions no variable of `kind`, counting bare
    /// `sqnorm` as belonging to `default`.
    pub fn independent_of(&self, kind: VarKind, default: VarKind) -> bool {
        !self.free_vars().iter().any(|v| v.kind == kind)
            && !self.sqnorm_families().iter().any(|k| k.unwrap_or(default) == kind)
    }

    fn visit(&self, f: &mut dyn FnMut(&Expr)) {
        f(self);
        match self {
            Expr::Const(_) | Expr::Var(_) | Expr::Sqnorm(_) => {}
            Expr::Neg(a) | Expr::Call(_, a) => a.visit(f),
            Expr::Add(x, y) | Expr::Sub(x, y) | Expr::Mul(x, y) | Expr::Div(x, y) | Expr::Pow(x, y) => {
                x.visit(f);
                y.visit(f);
            }
        }
    }

    /// Constant folding and neutral-element removal.
    pub fn simplify(&self) -> Expr {
        use Expr::*;
        let zero = C64::new(0.0, 0.0);
        let one = C64::new(1.0, 0.0);
        match self {
            Const(_) | Var(_) | Sqnorm(_) => self.clone(),
            Neg(a) => match a.simplify() {
                Const(c) => Const(-c),
                Neg(b) => *b,
                s => Neg(Box::new(s)),
            },
            Add(x, y) => match (x.simplify(), y.simplify()) {
                (Const(a), Const(b)) => Const(a + b),
                (Const(a), s) | (s, Const(a)) if a == zero => s,
                (s, Neg(t)) => Sub(Box::new(s), t),
                (s, t) => Add(Box::new(s), Box::new(t)),
            },
            Sub(x, y) => match (x.simplify(), y.simplify()) {
                (Const(a), Const(b)) => Const(a - b),
                (s, Const(b)) if b == zero => s,
                (Const(a), s) if a == zero => Neg(Box::new(s)).simplify(),
                (s, t) => Sub(Box::new(s), Box::new(t)),
            },
            Mul(x, y) => match (x.simplify(), y.simplify()) {
                (Const(a), Const(b)) => Const(a * b),
                (Const(a), _) | (_, Const(a)) if a == zero => Const(zero),
                (Const(a), s) | (s, Const(a)) if a == one => s,
                (Const(a), s) | (s, Const(a)) if a == -one => Neg(Box::new(s)),
                (s, t) => Mul(Box::new(s), Box::new(t)),
            },
            Div(x, y) => match (x.simplify(), y.simplify()) {
                (Const(a), Const(b)) if b != zero => Const(a / b),
                (Const(a), _) if a == zero => Const(zero),
                (s, Const(b)) if b == one => s,
                (s, t) => Div(Box::new(s), Box::new(t)),
            },
            Pow(x, y) => match (x.simplify(), y.simplify()) {
                (Const(a), Const(b)) => Const(compile::cpow(a, b)),
                (_, Const(b)) if b == zero => Const(one),
                (s, Const(b)) if b == one => s,
                (s, t) => Pow(Box::new(s), Box::new(t)),
            },
            Call(Func::Conj, a) => conj_of(a.simplify()),
            Call(g, a) => match a.simplify() {
                Const(c) => Const(g.apply(c)),
                s => Call(*g, Box::new(s)),
            },
        }
    }

    /// Compile for fast evaluation with `dim` coordinates per family.
    pub fn compile(&self, dim: usize, default: VarKind) -> Program {
        Program::new(&self.expand_sqnorm(dim, default), dim)
    }
}

/// Push a conjugation down to the leaves; variables are real.
fn conj_of(e: Expr) -> Expr {
    use Expr::*;
    let bx = |e: Expr| Box::new(conj_of(e));
    match e {
        Const(c) => Const(c.conj()),
        Var(_) | Sqnorm(_) => e,
        Neg(a) => Neg(bx(*a)),
        Add(a, b) => Add(bx(*a), bx(*b)),
        Sub(a, b) => Sub(bx(*a), bx(*b)),
        Mul(a, b) => Mul(bx(*a), bx(*b)),
        Div(a, b) => Div(bx(*a), bx(*b)),
        Pow(a, b) if matches!(b.as_const(), Some(c) if c.im == 0.0 && c.re == c.re.trunc()) => Pow(bx(*a), b),
        Call(Func::Conj, a) => *a,
        Call(g @ (Func::Exp | Func::Sin | Func::Cos), a) => Call(g, bx(*a)),
        Call(Func::Abs, a) => Call(Func::Abs, a),
        other => Call(Func::Conj, Box::new(other)),
    }
}

fn fmt_const(c: C64, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    let r = |v: f64, f: &mut fmt::Formatter<'_>| -> fmt::Result {
        if v.is_finite() && v == v.trunc() && v.abs() < 1e15 {
            write!(f, "{}", v as i64)
        } else {
            write!(f, "{:e}", v)
        }
    };
    if c.im == 0.0 {
        if c.re < 0.0 {
            write!(f, "(-")?;
            r(-c.re, f)?;
            write!(f, ")")
        } else {
            r(c.re, f)
        }
    } else if c.re == 0.0 && c.im == 1.0 {
        write!(f, "i")
    } else if c.re == 0.0 {
        write!(f, "(")?;
        if c.im < 0.0 {
            write!(f, "-")?;
        }
        r(c.im.abs(), f)?;
        write!(f, "*i)")
    } else {
        write!(f, "(")?;
        r(c.re, f)?;
        write!(f, "{}", if c.im < 0.0 { "-" } else { "+" })?;
        r(c.im.abs(), f)?;
        write!(f, "*i)")
    }
}

impl Expr {
    fn precedence(&self) -> u8 {
        match self {
            Expr::Add(..) | Expr::Sub(..) => 1,
            Expr::Mul(..) | Expr::Div(..) => 2,
            Expr::Neg(..) => 3,
            Expr::Pow(..) => 4,
            _ => 5,
        }
    }
    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, min: u8) -> fmt::Result {
        let p = self.precedence();
        if p < min {
            write!(f, "(")?;
        }
        match self {
            Expr::Const(c) => fmt_const(*c, f)?,
            Expr::Var(v) => write!(f, "{v}")?,
            Expr::Sqnorm(None) => write!(f, "sqnorm")?,
            Expr::Sqnorm(Some(k)) => write!(f, "sqnorm({})", k.prefix())?,
            Expr::Neg(a) => {
                write!(f, "-")?;
                a.fmt_prec(f, 4)?;
            }
            Expr::Add(a, b) => {
                a.fmt_prec(f, 1)?;
                write!(f, " + ")?;
                b.fmt_prec(f, 2)?;
            }
            Expr::Sub(a, b) => {
                a.fmt_prec(f, 1)?;
                write!(f, " - ")?;
                b.fmt_prec(f, 2)?;
            }
            Expr::Mul(a, b) => {
                a.fmt_prec(f, 2)?;
                write!(f, "*")?;
                b.fmt_prec(f, 3)?;
            }
            Expr::Div(a, b) => {
                a.fmt_prec(f, 2)?;
                write!(f, "/")?;
                b.fmt_prec(f, 3)?;
            }
            Expr::Pow(a, b) => {
                a.fmt_prec(f, 5)?;
                write!(f, "^")?;
                b.fmt_prec(f, 4)?;
            }
            Expr::Call(g, a) => {
                write!(f, "{}(", g.name())?;
                a.fmt_prec(f, 0)?;
                write!(f, ")")?;
            }
        }
        if p < min {
            write!(f, ")")?;
        }
        Ok(())
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, 0)
    }
}

/// Rectangular array of scalar expressions (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct MatExpr {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<Expr>,
}

impl MatExpr {
    pub fn new(rows: usize, cols: usize, entries: Vec<Expr>) -> Result<MatExpr> {
        if rows == 0 || cols == 0 || entries.len() != rows * cols {
            return Err(Error::Shape(format!("{} entries cannot form a {rows}x{cols} matrix", entries.len())));
        }
        Ok(MatExpr { rows, cols, entries })
    }
    pub fn scalar(e: Expr) -> MatExpr {
        MatExpr { rows: 1, cols: 1, entries: vec![e] }
    }
    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }
    pub fn get(&self, r: usize, c: usize) -> &Expr {
        &self.entries[r * self.cols + c]
    }
    pub fn map(&self, f: impl Fn(&Expr) -> Expr) -> MatExpr {
        MatExpr { rows: self.rows, cols: self.cols, entries: self.entries.iter().map(f).collect() }
    }
    /// Conjugate transpose with `f` applied to each entry before conjugation.
    pub fn adjoint_with(&self, f: impl Fn(&Expr) -> Expr) -> MatExpr {
        let mut entries = Vec::with_capacity(self.entries.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                entries.push(Expr::call(Func::Conj, f(self.get(r, c))));
            }
        }
        MatExpr { rows: self.cols, cols: self.rows, entries }
    }
    pub fn free_vars(&self) -> BTreeSet<Var> {
        self.entries.iter().flat_map(|e| e.free_vars()).collect()
    }
    pub fn independent_of(&self, kind: VarKind, default: VarKind) -> bool {
        self.entries.iter().all(|e| e.independent_of(kind, default))
    }
}

impl fmt::Display for MatExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.rows == 1 && self.cols == 1 {
            return write!(f, "{}", self.entries[0]);
        }
        write!(f, "[")?;
        for r in 0..self.rows {
            if r > 0 {
                write!(f, ", ")?;
            }
            write!(f, "[")?;
            for c in 0..self.cols {
                if c > 0 {
                    write!(f, ", ")?;
                }
                write!(f, "{}", self.get(r, c))?;
            }
            write!(f, "]")?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_round_trips() {
        for src in [
            "exp(-sqnorm)",
            "x1*exp(-sqnorm(y)/2) + 3",
            "-x0^2 - (x1 - y2)/(1 + x0)",
            "2^-1*x1",
            "(1+2*i)*cos(xi0) - conj(y1)",
            "x1 - (x2 - x0)",
            "-(x1 + x2)^3",
        ] {
            let e = parse(src).unwrap();
            let back = parse(&e.to_string()).unwrap();
            assert_eq!(e, back, "{src} -> {e}");
        }
    }

    #[test]
    fn simplify_folds() {
        let e = parse("0*x1 + 1*x2 + (2+3)").unwrap().simplify();
        assert_eq!(e, Expr::add(Expr::var(Var::x(2)), Expr::real(5.0)));
    }

    #[test]
    fn independence() {
        let e = parse("x1*exp(-sqnorm)").unwrap();
        assert!(e.independent_of(VarKind::Xi, VarKind::Y));
        assert!(!e.independent_of(VarKind::Y, VarKind::Y));
        assert!(e.independent_of(VarKind::Y, VarKind::X));
    }
}
