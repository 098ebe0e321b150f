//! Stack bytecode for repeated evaluation.

use super::{Expr, Func};
use crate::C64;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Const(C64),
    Load(usize),
    Neg,
    Add,
    Sub,
    Mul,
    Div,
    PowI(i32),
    Pow,
    Call(Func),
}

/// Compiled expression. Arguments are a flat slice of real coordinates laid
/// out as `[x_0..x_{d-1}, y_0..y_{d-1}, xi_0..xi_{d-1}]`.
#[derive(Debug, Clone)]
pub struct Program {
    ops: Vec<Op>,
    dim: usize,
    max_stack: usize,
    /// Every intermediate value is real whenever the inputs are real.
    real: bool,
}

/// Reusable evaluation stack.
#[derive(Debug, Default, Clone)]
pub struct Scratch {
    c: Vec<C64>,
    r: Vec<f64>,
}

pub(crate) fn cpow(a: C64, b: C64) -> C64 {
    if b.im == 0.0 && b.re == b.re.trunc() && b.re.abs() <= 64.0 {
        return ipow(a, b.re as i32);
    }
    if a.im == 0.0 && a.re >= 0.0 && b.im == 0.0 {
        return C64::new(a.re.powf(b.re), 0.0);
    }
    a.powc(b)
}

fn ipow(a: C64, n: i32) -> C64 {
    let mut base = if n < 0 { C64::new(1.0, 0.0) / a } else { a };
    let mut e = n.unsigned_abs();
    let mut acc = C64::new(1.0, 0.0);
    while e > 0 {
        if e & 1 == 1 {
            acc *= base;
        }
        base *= base;
        e >>= 1;
    }
    acc
}

fn ipow_real(a: f64, n: i32) -> f64 {
    a.powi(n)
}

impl Program {
    pub(crate) fn new(e: &Expr, dim: usize) -> Program {
        let mut ops = Vec::new();
        emit(e, dim, &mut ops);
        let (mut depth, mut max_stack) = (0i64, 0i64);
        for op in &ops {
            depth += match op {
                Op::Const(_) | Op::Load(_) => 1,
                Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Pow => -1,
                _ => 0,
            };
            max_stack = max_stack.max(depth);
        }
        let real = ops.iter().all(|op| match op {
            Op::Const(c) => c.im == 0.0,
            Op::Pow | Op::Call(Func::Sqrt) => false,
            _ => true,
        });
        Program { ops, dim, max_stack: max_stack as usize, real }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// True if the program never leaves the reals on real input.
    pub fn is_real(&self) -> bool {
        self.real
    }

    /// Constant value, if the program has no loads.
    pub fn constant(&self) -> Option<C64> {
        if self.ops.iter().any(|o| matches!(o, Op::Load(_))) {
            return None;
        }
        Some(self.eval(&[], &mut Scratch::default()))
    }

    pub fn eval(&self, args: &[f64], s: &mut Scratch) -> C64 {
        if self.real {
            return C64::new(self.eval_real(args, s), 0.0);
        }
        let st = &mut s.c;
        st.clear();
        st.reserve(self.max_stack);
        for op in &self.ops {
            match *op {
                Op::Const(c) => st.push(c),
                Op::Load(k) => st.push(C64::new(args.get(k).copied().unwrap_or(0.0), 0.0)),
                Op::Neg => {
                    let a = st.last_mut().unwrap();
                    *a = -*a;
                }
                Op::Add => {
                    let b = st.pop().unwrap();
                    *st.last_mut().unwrap() += b;
                }
                Op::Sub => {
                    let b = st.pop().unwrap();
                    *st.last_mut().unwrap() -= b;
                }
                Op::Mul => {
                    let b = st.pop().unwrap();
                    *st.last_mut().unwrap() *= b;
                }
                Op::Div => {
                    let b = st.pop().unwrap();
                    *st.last_mut().unwrap() /= b;
                }
                Op::PowI(n) => {
                    let a = st.last_mut().unwrap();
                    *a = ipow(*a, n);
                }
                Op::Pow => {
                    let b = st.pop().unwrap();
                    let a = st.last_mut().unwrap();
                    *a = cpow(*a, b);
                }
                Op::Call(f) => {
                    let a = st.last_mut().unwrap();
                    *a = f.apply(*a);
                }
            }
        }
        st.pop().unwrap_or_default()
    }

    fn eval_real(&self, args: &[f64], s: &mut Scratch) -> f64 {
        let st = &mut s.r;
        st.clear();
        st.reserve(self.max_stack);
        for op in &self.ops {
            match *op {
                Op::Const(c) => st.push(c.re),
                Op::Load(k) => st.push(args.get(k).copied().unwrap_or(0.0)),
                Op::Neg => {
                    let a = st.last_mut().unwrap();
                    *a = -*a;
                }
                Op::Add => {
                    let b = st.pop().unwrap();
                    *st.last_mut().unwrap() += b;
                }
                Op::Sub => {
                    let b = st.pop().unwrap();
                    *st.last_mut().unwrap() -= b;
                }
                Op::Mul => {
                    let b = st.pop().unwrap();
                    *st.last_mut().unwrap() *= b;
                }
                Op::Div => {
                    let b = st.pop().unwrap();
                    *st.last_mut().unwrap() /= b;
                }
                Op::PowI(n) => {
                    let a = st.last_mut().unwrap();
                    *a = ipow_real(*a, n);
                }
                Op::Call(f) => {
                    let a = st.last_mut().unwrap();
                    *a = match f {
                        Func::Exp => a.exp(),
                        Func::Sin => a.sin(),
                        Func::Cos => a.cos(),
                        Func::Abs => a.abs(),
                        Func::Conj => *a,
                        Func::Sqrt => unreachable!("sqrt is compiled on the complex path"),
                    };
                }
                Op::Pow => unreachable!("general powers are compiled on the complex path"),
            }
        }
        st.pop().unwrap_or(0.0)
    }
}

fn emit(e: &Expr, dim: usize, ops: &mut Vec<Op>) {
    match e {
        Expr::Const(c) => ops.push(Op::Const(*c)),
        Expr::Var(v) => ops.push(Op::Load(v.slot(dim))),
        Expr::Sqnorm(_) => unreachable!("sqnorm is expanded before compilation"),
        Expr::Neg(a) => {
            emit(a, dim, ops);
            ops.push(Op::Neg);
        }
        Expr::Add(a, b) => bin(a, b, Op::Add, dim, ops),
        Expr::Sub(a, b) => bin(a, b, Op::Sub, dim, ops),
        Expr::Mul(a, b) => bin(a, b, Op::Mul, dim, ops),
        Expr::Div(a, b) => bin(a, b, Op::Div, dim, ops),
        Expr::Pow(a, b) => {
            let k = b.simplify();
            match k.as_const() {
                Some(c) if c.im == 0.0 && c.re == c.re.trunc() && c.re.abs() <= 64.0 => {
                    emit(a, dim, ops);
                    ops.push(Op::PowI(c.re as i32));
                }
                _ => bin(a, &k, Op::Pow, dim, ops),
            }
        }
        Expr::Call(f, a) => {
            emit(a, dim, ops);
            ops.push(Op::Call(*f));
        }
    }
}

fn bin(a: &Expr, b: &Expr, op: Op, dim: usize, ops: &mut Vec<Op>) {
    emit(a, dim, ops);
    emit(b, dim, ops);
    ops.push(op);
}

#[cfg(test)]
mod tests {
    use super::super::{parse, VarKind};
    use super::*;

    fn ev(src: &str, args: &[f64]) -> C64 {
        parse(src).unwrap().compile(3, VarKind::X).eval(args, &mut Scratch::default())
    }

    #[test]
    fn basic_values() {
        assert_eq!(ev("1", &[]), C64::new(1.0, 0.0));
        assert_eq!(ev("sqnorm", &[1.0, 1.0, 1.0]), C64::new(3.0, 0.0));
        assert_eq!(ev("exp(-sqnorm)", &[0.0; 3]), C64::new(1.0, 0.0));
        assert_eq!(ev("i*i", &[]), C64::new(-1.0, 0.0));
        assert_eq!(ev("y1", &[0.0, 0.0, 0.0, 5.0, 7.0, 0.0]), C64::new(7.0, 0.0));
        assert!((ev("x1^0.5", &[0.0, 4.0, 0.0]) - C64::new(2.0, 0.0)).norm() < 1e-15);
        assert!((ev("sqrt(-4)", &[]) - C64::new(0.0, 2.0)).norm() < 1e-15);
        assert_eq!(ev("2^-2", &[]), C64::new(0.25, 0.0));
    }

    #[test]
    fn real_and_complex_paths_agree() {
        let e = parse("exp(-sqnorm/2)*cos(x1) - x2^3/(1+x0^2)").unwrap().expand_sqnorm(3, VarKind::X);
        let p = Program::new(&e, 3);
        assert!(p.is_real());
        let q = Program::new(&Expr::mul(e.clone(), Expr::Const(C64::new(1.0, 1e-300))), 3);
        assert!(!q.is_real());
        let args = [0.3, -1.2, 0.7];
        let a = p.eval(&args, &mut Scratch::default());
        let b = q.eval(&args, &mut Scratch::default());
        assert!((a - b).norm() < 1e-14);
    }
}
