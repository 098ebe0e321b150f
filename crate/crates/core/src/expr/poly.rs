//! Exact polynomial normal form, used to decide identities between
//! polynomial expressions without floating-point tolerance.

use super::{Expr, Var};
use crate::{Error, Result, C64};
use std::collections::BTreeMap;
use std::fmt;

/// Polynomial in finitely many variables with complex coefficients.
/// Coefficient arithmetic is exact as long as all inputs are dyadic rationals
/// of moderate size, which is how the identity checks use it.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Polynomial {
    terms: BTreeMap<Vec<(Var, u32)>, C64>,
}

impl Polynomial {
    pub fn constant(c: C64) -> Polynomial {
        let mut p = Polynomial::default();
        if c != C64::new(0.0, 0.0) {
            p.terms.insert(Vec::new(), c);
        }
        p
    }

    pub fn var(v: Var) -> Polynomial {
        let mut p = Polynomial::default();
        p.terms.insert(vec![(v, 1)], C64::new(1.0, 0.0));
        p
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    fn insert(&mut self, mono: Vec<(Var, u32)>, c: C64) {
        let e = self.terms.entry(mono).or_insert(C64::new(0.0, 0.0));
        *e += c;
        if *e == C64::new(0.0, 0.0) {
            self.terms.retain(|_, v| *v != C64::new(0.0, 0.0));
        }
    }

    pub fn add(&self, o: &Polynomial) -> Polynomial {
        let mut r = self.clone();
        for (m, c) in &o.terms {
            r.insert(m.clone(), *c);
        }
        r
    }

    pub fn scale(&self, s: C64) -> Polynomial {
        let mut r = Polynomial::default();
        for (m, c) in &self.terms {
            r.insert(m.clone(), *c * s);
        }
        r
    }

    pub fn sub(&self, o: &Polynomial) -> Polynomial {
        self.add(&o.scale(C64::new(-1.0, 0.0)))
    }

    pub fn mul(&self, o: &Polynomial) -> Polynomial {
        let mut r = Polynomial::default();
        for (m1, c1) in &self.terms {
            for (m2, c2) in &o.terms {
                let mut m: BTreeMap<Var, u32> = m1.iter().copied().collect();
                for (v, k) in m2 {
                    *m.entry(*v).or_insert(0) += k;
                }
                r.insert(m.into_iter().collect(), c1 * c2);
            }
        }
        r
    }

    pub fn powu(&self, n: u32) -> Polynomial {
        let mut r = Polynomial::constant(C64::new(1.0, 0.0));
        for _ in 0..n {
            r = r.mul(self);
        }
        r
    }

    /// Normal form of an expression (with `sqnorm` already expanded).
    pub fn from_expr(e: &Expr) -> Result<Polynomial> {
        Ok(match e {
            Expr::Const(c) => Polynomial::constant(*c),
            Expr::Var(v) => Polynomial::var(*v),
            Expr::Neg(a) => Polynomial::from_expr(a)?.scale(C64::new(-1.0, 0.0)),
            Expr::Add(a, b) => Polynomial::from_expr(a)?.add(&Polynomial::from_expr(b)?),
            Expr::Sub(a, b) => Polynomial::from_expr(a)?.sub(&Polynomial::from_expr(b)?),
            Expr::Mul(a, b) => Polynomial::from_expr(a)?.mul(&Polynomial::from_expr(b)?),
            Expr::Div(a, b) => match b.simplify().as_const() {
                Some(c) if c != C64::new(0.0, 0.0) => Polynomial::from_expr(a)?.scale(C64::new(1.0, 0.0) / c),
                _ => return Err(Error::NotPolynomial(format!("division by `{b}`"))),
            },
            Expr::Pow(a, b) => match b.simplify().as_const() {
                Some(c) if c.im == 0.0 && c.re >= 0.0 && c.re == c.re.trunc() && c.re <= 64.0 => {
                    Polynomial::from_expr(a)?.powu(c.re as u32)
                }
                _ => return Err(Error::NotPolynomial(format!("exponent `{b}`"))),
            },
            Expr::Sqnorm(_) => return Err(Error::NotPolynomial("unexpanded sqnorm".into())),
            Expr::Call(f, _) => return Err(Error::NotPolynomial(format!("call to `{}`", f.name()))),
        })
    }
}

impl fmt::Display for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        for (k, (m, c)) in self.terms.iter().enumerate() {
            if k > 0 {
                write!(f, " + ")?;
            }
            write!(f, "({c})")?;
            for (v, e) in m {
                write!(f, "*{v}^{e}")?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::super::parse;
    use super::*;

    #[test]
    fn normal_form_identities() {
        let a = Polynomial::from_expr(&parse("(x1 + x2)^2").unwrap()).unwrap();
        let b = Polynomial::from_expr(&parse("x1^2 + 2*x1*x2 + x2^2").unwrap()).unwrap();
        assert_eq!(a, b);
        let z = Polynomial::from_expr(&parse("(x1 - x2)*(x1 + x2) - x1^2 + x2^2").unwrap()).unwrap();
        assert!(z.is_zero());
        assert!(Polynomial::from_expr(&parse("exp(x1)").unwrap()).is_err());
        assert!(Polynomial::from_expr(&parse("1/x1").unwrap()).is_err());
    }
}
