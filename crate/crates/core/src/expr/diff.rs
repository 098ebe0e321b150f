//! Symbolic differentiation.

use super::{Expr, Func, Var};
use crate::{Error, Result, C64};

impl Expr {
    /// Partial derivative with respect to `v`. `sqnorm` must already be expanded.
    pub fn diff(&self, v: Var) -> Result<Expr> {
        Ok(self.diff_raw(v)?.simplify())
    }

    fn diff_raw(&self, v: Var) -> Result<Expr> {
        use Expr::*;
        Ok(match self {
            Const(_) => Expr::zero(),
            Var(w) => Expr::real(if *w == v { 1.0 } else { 0.0 }),
            Sqnorm(_) => return Err(Error::NotDifferentiable("sqnorm must be expanded before differentiation".into())),
            Neg(a) => Expr::neg(a.diff_raw(v)?),
            Add(a, b) => Expr::add(a.diff_raw(v)?, b.diff_raw(v)?),
            Sub(a, b) => Expr::sub(a.diff_raw(v)?, b.diff_raw(v)?),
            Mul(a, b) => Expr::add(Expr::mul(a.diff_raw(v)?, (**b).clone()), Expr::mul((**a).clone(), b.diff_raw(v)?)),
            Div(a, b) => Expr::div(
                Expr::sub(Expr::mul(a.diff_raw(v)?, (**b).clone()), Expr::mul((**a).clone(), b.diff_raw(v)?)),
                Expr::pow((**b).clone(), Expr::real(2.0)),
            ),
            Pow(a, b) => {
                let bs = b.simplify();
                if let Some(c) = bs.as_const() {
                    Expr::mul(
                        Expr::mul(Expr::Const(c), Expr::pow((**a).clone(), Expr::Const(c - C64::new(1.0, 0.0)))),
                        a.diff_raw(v)?,
                    )
                } else if let Some(base) = a.simplify().as_const().filter(|c| c.im == 0.0 && c.re > 0.0) {
                    Expr::mul(Expr::mul(self.clone(), Expr::real(base.re.ln())), bs.diff_raw(v)?)
                } else {
                    return Err(Error::NotDifferentiable(format!("variable exponent in `{self}`")));
                }
            }
            Call(f, a) => {
                let da = a.diff_raw(v)?;
                let inner = (**a).clone();
                match f {
                    Func::Exp => Expr::mul(self.clone(), da),
                    Func::Sin => Expr::mul(Expr::call(Func::Cos, inner), da),
                    Func::Cos => Expr::mul(Expr::neg(Expr::call(Func::Sin, inner)), da),
                    Func::Sqrt => Expr::div(da, Expr::mul(Expr::real(2.0), self.clone())),
                    Func::Conj => Expr::call(Func::Conj, da),
                    Func::Abs => return Err(Error::NotDifferentiable(format!("`{self}`"))),
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::{parse, Scratch, VarKind};
    use super::*;

    fn num_diff(src: &str, v: Var, at: &[f64]) -> (C64, C64) {
        let e = parse(src).unwrap().expand_sqnorm(3, VarKind::X);
        let d = e.diff(v).unwrap().compile(3, VarKind::X);
        let p = e.compile(3, VarKind::X);
        let mut s = Scratch::default();
        let h = 1e-6;
        let (mut ap, mut am) = (at.to_vec(), at.to_vec());
        ap[v.slot(3)] += h;
        am[v.slot(3)] -= h;
        let fd = (p.eval(&ap, &mut s) - p.eval(&am, &mut s)) / (2.0 * h);
        (d.eval(at, &mut s), fd)
    }

    #[test]
    fn matches_finite_differences() {
        let at = [0.3, -0.4, 0.9];
        for src in ["exp(-sqnorm)*x1", "sin(x0*x1)/(2+cos(x2))", "sqrt(1+x1^2)", "2^x1", "(x0 + i*x2)^3"] {
            for k in 0..3 {
                let (a, b) = num_diff(src, Var::x(k), &at);
                assert!((a - b).norm() < 1e-7, "{src} d/dx{k}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn refuses_abs_and_variable_exponent() {
        assert!(parse("abs(x1)").unwrap().diff(Var::x(1)).is_err());
        assert!(parse("x1^x2").unwrap().diff(Var::x(1)).is_err());
        assert!(parse("sqnorm").unwrap().diff(Var::x(1)).is_err());
    }
}
