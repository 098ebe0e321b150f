//! LL(1) recursive-descent parser for the expression language.
//!
//! ```text
//! matrix := '[' row (',' row)* ']' | expr
//! row    := '[' expr (',' expr)* ']'
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := ('-' | '+') unary | power
//! power  := atom ('^' unary)?
//! atom   := number | ident | ident '(' expr ')' | 'sqnorm' ('(' family ')')? | '(' expr ')'
//! ```

use super::{Expr, Func, MatExpr, Var, VarKind};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Sym(char),
    Eof,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    column: usize,
}

fn lex(src: &str) -> Result<Vec<Token>> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);
    while i < chars.len() {
        let c = chars[i];
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        let (l0, c0) = (line, col);
        if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text: String = chars[start..i].iter().collect();
            let v = text.parse::<f64>().map_err(|_| Error::Parse {
                line: l0,
                column: c0,
                message: format!("malformed number `{text}`"),
            })?;
            col += i - start;
            out.push(Token { tok: Tok::Num(v), line: l0, column: c0 });
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            col += i - start;
            out.push(Token { tok: Tok::Ident(chars[start..i].iter().collect()), line: l0, column: c0 });
            continue;
        }
        if "+-*/^()[],".contains(c) {
            out.push(Token { tok: Tok::Sym(c), line: l0, column: c0 });
            i += 1;
            col += 1;
            continue;
        }
        return Err(Error::Parse { line: l0, column: c0, message: format!("unexpected character `{c}`") });
    }
    out.push(Token { tok: Tok::Eof, line, column: col });
    Ok(out)
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
    /// Positions of currently open brackets, innermost last.
    open: Vec<(char, usize, usize)>,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.toks[self.pos]
    }
    fn bump(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }
    fn error_at(&self, t: &Token, message: String) -> Error {
        if t.tok == Tok::Eof {
            if let Some(&(c, line, column)) = self.open.last() {
                return Error::Parse { line, column, message: format!("unclosed `{c}`: {message}") };
            }
        }
        Error::Parse { line: t.line, column: t.column, message }
    }
    fn is_sym(&self, c: char) -> bool {
        self.peek().tok == Tok::Sym(c)
    }
    fn open_bracket(&mut self, c: char) -> Result<()> {
        let t = self.bump();
        if t.tok != Tok::Sym(c) {
            return Err(self.error_at(&t, format!("expected `{c}`")));
        }
        self.open.push((c, t.line, t.column));
        Ok(())
    }
    fn close_bracket(&mut self, c: char) -> Result<()> {
        let t = self.peek().clone();
        if t.tok != Tok::Sym(c) {
            return Err(self.error_at(&t, format!("expected `{c}`")));
        }
        self.bump();
        self.open.pop();
        Ok(())
    }

    fn matrix(&mut self) -> Result<MatExpr> {
        if !self.is_sym('[') {
            return Ok(MatExpr::scalar(self.expr()?));
        }
        self.open_bracket('[')?;
        let mut rows: Vec<Vec<Expr>> = Vec::new();
        loop {
            self.open_bracket('[')?;
            let mut row = vec![self.expr()?];
            while self.is_sym(',') {
                self.bump();
                row.push(self.expr()?);
            }
            self.close_bracket(']')?;
            if let Some(first) = rows.first() {
                if first.len() != row.len() {
                    let t = self.peek().clone();
                    return Err(Error::Parse {
                        line: t.line,
                        column: t.column,
                        message: format!(
                            "ragged matrix: row of length {} after rows of length {}",
                            row.len(),
                            first.len()
                        ),
                    });
                }
            }
            rows.push(row);
            if self.is_sym(',') {
                self.bump();
            } else {
                break;
            }
        }
        self.close_bracket(']')?;
        let (r, c) = (rows.len(), rows[0].len());
        MatExpr::new(r, c, rows.into_iter().flatten().collect())
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            if self.is_sym('+') {
                self.bump();
                lhs = Expr::add(lhs, self.term()?);
            } else if self.is_sym('-') {
                self.bump();
                lhs = Expr::sub(lhs, self.term()?);
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            if self.is_sym('*') {
                self.bump();
                lhs = Expr::mul(lhs, self.unary()?);
            } else if self.is_sym('/') {
                self.bump();
                lhs = Expr::div(lhs, self.unary()?);
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.is_sym('-') {
            self.bump();
            return Ok(Expr::neg(self.unary()?));
        }
        if self.is_sym('+') {
            self.bump();
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if self.is_sym('^') {
            self.bump();
            return Ok(Expr::pow(base, self.unary()?));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr> {
        let t = self.bump();
        match &t.tok {
            Tok::Num(v) => Ok(Expr::real(*v)),
            Tok::Sym('(') => {
                self.open.push(('(', t.line, t.column));
                let e = self.expr()?;
                self.close_bracket(')')?;
                Ok(e)
            }
            Tok::Ident(name) => self.ident(name.clone(), &t),
            Tok::Eof => Err(self.error_at(&t, "unexpected end of input".into())),
            Tok::Sym(c) => Err(self.error_at(&t, format!("unexpected `{c}`"))),
        }
    }

    fn ident(&mut self, name: String, t: &Token) -> Result<Expr> {
        if name == "i" {
            return Ok(Expr::imag_unit());
        }
        if name == "pi" {
            return Ok(Expr::real(std::f64::consts::PI));
        }
        if name == "sqnorm" {
            if !self.is_sym('(') {
                return Ok(Expr::Sqnorm(None));
            }
            self.open_bracket('(')?;
            let a = self.bump();
            let kind = match &a.tok {
                Tok::Ident(s) if s == "x" => VarKind::X,
                Tok::Ident(s) if s == "y" => VarKind::Y,
                Tok::Ident(s) if s == "xi" => VarKind::Xi,
                _ => return Err(self.error_at(&a, "sqnorm takes one of `x`, `y`, `xi`".into())),
            };
            self.close_bracket(')')?;
            return Ok(Expr::Sqnorm(Some(kind)));
        }
        if let Some(f) = Func::from_name(&name) {
            self.open_bracket('(')?;
            let e = self.expr()?;
            self.close_bracket(')')?;
            return Ok(Expr::call(f, e));
        }
        if let Some(v) = parse_var(&name) {
            return Ok(Expr::var(v));
        }
        Err(Error::Parse { line: t.line, column: t.column, message: format!("unknown identifier `{name}`") })
    }
}

fn parse_var(name: &str) -> Option<Var> {
    let (kind, rest) = if let Some(r) = name.strip_prefix("xi") {
        (VarKind::Xi, r)
    } else if let Some(r) = name.strip_prefix('x') {
        (VarKind::X, r)
    } else if let Some(r) = name.strip_prefix('y') {
        (VarKind::Y, r)
    } else {
        return None;
    };
    if rest.is_empty() || !rest.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    Some(Var { kind, index: rest.parse().ok()? })
}

fn run<T>(src: &str, f: impl FnOnce(&mut Parser) -> Result<T>) -> Result<T> {
    let mut p = Parser { toks: lex(src)?, pos: 0, open: Vec::new() };
    let out = f(&mut p)?;
    let t = p.peek().clone();
    if t.tok != Tok::Eof {
        return Err(p.error_at(&t, "trailing input".into()));
    }
    Ok(out)
}

/// Parse a scalar expression.
pub fn parse(src: &str) -> Result<Expr> {
    run(src, |p| p.expr())
}

/// Parse a scalar or a matrix literal `[[..],[..]]`.
pub fn parse_matrix(src: &str) -> Result<MatExpr> {
    run(src, |p| p.matrix())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn err_pos(src: &str) -> (usize, usize) {
        match parse_matrix(src) {
            Err(Error::Parse { line, column, .. }) => (line, column),
            other => panic!("expected parse error for {src:?}, got {other:?}"),
        }
    }

    #[test]
    fn gaussian() {
        let e = parse("exp(-sqnorm)").unwrap();
        assert_eq!(e, Expr::call(Func::Exp, Expr::neg(Expr::Sqnorm(None))));
    }

    #[test]
    fn dangling_paren_column() {
        assert_eq!(err_pos("exp(-"), (1, 4));
        assert_eq!(err_pos("(x1 + 2"), (1, 1));
        assert_eq!(err_pos("x1 +\n  (y0"), (2, 3));
    }

    #[test]
    fn other_errors() {
        assert_eq!(err_pos("x1 $ 2"), (1, 4));
        assert_eq!(err_pos("foo(1)"), (1, 1));
        assert_eq!(err_pos("x1 x2"), (1, 4));
        assert_eq!(err_pos("[[1, 2], [3]]"), (1, 13));
    }

    #[test]
    fn precedence() {
        let e = parse("-x1^2").unwrap();
        assert_eq!(e, Expr::neg(Expr::pow(Expr::var(Var::x(1)), Expr::real(2.0))));
        let e = parse("2^3^2").unwrap().simplify();
        assert_eq!(e, Expr::real(512.0));
        let e = parse("8/2/2").unwrap().simplify();
        assert_eq!(e, Expr::real(2.0));
    }

    #[test]
    fn matrix_literal() {
        let m = parse_matrix("[[1, x1], [-i, xi2]]").unwrap();
        assert_eq!((m.rows, m.cols), (2, 2));
        assert_eq!(m.get(1, 1), &Expr::var(Var::xi(2)));
    }

    #[test]
    fn numbers() {
        assert_eq!(parse("1.5e-3").unwrap(), Expr::real(1.5e-3));
        assert_eq!(parse(".25").unwrap(), Expr::real(0.25));
    }
}
