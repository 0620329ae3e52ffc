//! Tiny arithmetic expression language for weights, costs, and minorants.
//!
//! Grammar: numeric literals, the coordinates `x` (alias `z`, meaning the
//! first coordinate) and `x1`..`x4` (alias `z1`..`z4`), the binary operators
//! `+ - * / ^` (exponents must be constants), unary minus, parentheses, and
//! the functions `tanh`, `exp`, `abs`. Expressions evaluate on points and
//! differentiate symbolically, so gradients are exact.

use ergokit::DVector;

/// A parsed expression tree.
#[derive(Clone, Debug)]
pub enum Expr {
    /// Numeric literal.
    Const(f64),
    /// Coordinate `x_{i+1}`.
    Var(usize),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    /// Power with a constant exponent.
    Pow(Box<Expr>, f64),
    Neg(Box<Expr>),
    Tanh(Box<Expr>),
    Exp(Box<Expr>),
    Abs(Box<Expr>),
    /// Sign of the argument (`0` at `0`); produced by differentiation of
    /// `abs`, not parseable.
    Sign(Box<Expr>),
}

impl Expr {
    /// Evaluates at a point. Coordinates beyond `x.len()` read as an error
    /// at parse-binding time, never here; see [`Expr::max_var`].
    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Var(i) => x[*i],
            Expr::Add(a, b) => a.eval(x) + b.eval(x),
            Expr::Sub(a, b) => a.eval(x) - b.eval(x),
            Expr::Mul(a, b) => a.eval(x) * b.eval(x),
            Expr::Div(a, b) => a.eval(x) / b.eval(x),
            Expr::Pow(a, c) => {
                let base = a.eval(x);
                if c.fract() == 0.0 && c.abs() <= i32::MAX as f64 {
                    base.powi(*c as i32)
                } else {
                    base.powf(*c)
                }
            }
            Expr::Neg(a) => -a.eval(x),
            Expr::Tanh(a) => a.eval(x).tanh(),
            Expr::Exp(a) => a.eval(x).exp(),
            Expr::Abs(a) => a.eval(x).abs(),
            Expr::Sign(a) => {
                let v = a.eval(x);
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Number of coordinates the expression reads (max index + 1).
    pub fn max_var(&self) -> usize {
        match self {
            Expr::Const(_) => 0,
            Expr::Var(i) => i + 1,
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.max_var().max(b.max_var())
            }
            Expr::Pow(a, _)
            | Expr::Neg(a)
            | Expr::Tanh(a)
            | Expr::Exp(a)
            | Expr::Abs(a)
            | Expr::Sign(a) => a.max_var(),
        }
    }

    /// Symbolic partial derivative with respect to coordinate `i`.
    pub fn diff(&self, i: usize) -> Expr {
        match self {
            Expr::Const(_) => Expr::Const(0.0),
            Expr::Var(j) => Expr::Const(if *j == i { 1.0 } else { 0.0 }),
            Expr::Add(a, b) => Expr::Add(Box::new(a.diff(i)), Box::new(b.diff(i))),
            Expr::Sub(a, b) => Expr::Sub(Box::new(a.diff(i)), Box::new(b.diff(i))),
            Expr::Mul(a, b) => Expr::Add(
                Box::new(Expr::Mul(Box::new(a.diff(i)), b.clone())),
                Box::new(Expr::Mul(a.clone(), Box::new(b.diff(i)))),
            ),
            Expr::Div(a, b) => Expr::Div(
                Box::new(Expr::Sub(
                    Box::new(Expr::Mul(Box::new(a.diff(i)), b.clone())),
                    Box::new(Expr::Mul(a.clone(), Box::new(b.diff(i)))),
                )),
                Box::new(Expr::Pow(b.clone(), 2.0)),
            ),
            Expr::Pow(a, c) => Expr::Mul(
                Box::new(Expr::Mul(
                    Box::new(Expr::Const(*c)),
                    Box::new(Expr::Pow(a.clone(), c - 1.0)),
                )),
                Box::new(a.diff(i)),
            ),
            Expr::Neg(a) => Expr::Neg(Box::new(a.diff(i))),
            Expr::Tanh(a) => Expr::Mul(
                Box::new(Expr::Sub(
                    Box::new(Expr::Const(1.0)),
                    Box::new(Expr::Pow(Box::new(Expr::Tanh(a.clone())), 2.0)),
                )),
                Box::new(a.diff(i)),
            ),
            Expr::Exp(a) => Expr::Mul(Box::new(Expr::Exp(a.clone())), Box::new(a.diff(i))),
            Expr::Abs(a) => Expr::Mul(Box::new(Expr::Sign(a.clone())), Box::new(a.diff(i))),
            // sign is piecewise constant; its derivative is zero wherever it
            // exists.
            Expr::Sign(_) => Expr::Const(0.0),
        }
    }

    /// Gradient as one expression per coordinate, `dim` entries.
    pub fn gradient(&self, dim: usize) -> Vec<Expr> {
        (0..dim).map(|i| self.diff(i)).collect()
    }

    /// Constant value, if the expression contains no coordinates.
    fn as_const(&self) -> Option<f64> {
        match self {
            Expr::Const(c) => Some(*c),
            Expr::Var(_) => None,
            Expr::Add(a, b) => Some(a.as_const()? + b.as_const()?),
            Expr::Sub(a, b) => Some(a.as_const()? - b.as_const()?),
            Expr::Mul(a, b) => Some(a.as_const()? * b.as_const()?),
            Expr::Div(a, b) => Some(a.as_const()? / b.as_const()?),
            Expr::Pow(a, c) => Some(a.as_const()?.powf(*c)),
            Expr::Neg(a) => Some(-a.as_const()?),
            Expr::Tanh(a) => Some(a.as_const()?.tanh()),
            Expr::Exp(a) => Some(a.as_const()?.exp()),
            Expr::Abs(a) => Some(a.as_const()?.abs()),
            Expr::Sign(a) => {
                let v = a.as_const()?;
                Some(if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
}

fn tokenize(src: &str) -> Result<Vec<Token>, String> {
    let mut out = Vec::new();
    let chars: Vec<char> = src.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '+' => {
                out.push(Token::Plus);
                i += 1;
            }
            '-' | '\u{2212}' => {
                out.push(Token::Minus);
                i += 1;
            }
            '*' | '\u{b7}' | '\u{22c5}' => {
                out.push(Token::Star);
                i += 1;
            }
            '/' => {
                out.push(Token::Slash);
                i += 1;
            }
            '^' => {
                out.push(Token::Caret);
                i += 1;
            }
            '(' => {
                out.push(Token::LParen);
                i += 1;
            }
            ')' => {
                out.push(Token::RParen);
                i += 1;
            }
            '0'..='9' | '.' => {
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
                let v: f64 = text
                    .parse()
                    .map_err(|_| format!("bad numeric literal {text:?}"))?;
                out.push(Token::Num(v));
            }
            _ if c.is_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                out.push(Token::Ident(chars[start..i].iter().collect()));
            }
            _ => return Err(format!("unexpected character {c:?} in expression")),
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expr(&mut self) -> Result<Expr, String> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(Token::Plus) => {
                    self.pos += 1;
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Some(Token::Minus) => {
                    self.pos += 1;
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr, String> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Some(Token::Star) => {
                    self.pos += 1;
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
                }
                Some(Token::Slash) => {
                    self.pos += 1;
                    lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, String> {
        if matches!(self.peek(), Some(Token::Minus)) {
            self.pos += 1;
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, String> {
        let base = self.atom()?;
        if matches!(self.peek(), Some(Token::Caret)) {
            self.pos += 1;
            let exponent = self.unary()?;
            let c = exponent
                .as_const()
                .ok_or_else(|| "exponent must be a constant".to_string())?;
            return Ok(Expr::Pow(Box::new(base), c));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, String> {
        match self.next() {
            Some(Token::Num(v)) => Ok(Expr::Const(v)),
            Some(Token::Ident(name)) => match name.as_str() {
                "x" | "z" => Ok(Expr::Var(0)),
                "x1" | "z1" => Ok(Expr::Var(0)),
                "x2" | "z2" => Ok(Expr::Var(1)),
                "x3" | "z3" => Ok(Expr::Var(2)),
                "x4" | "z4" => Ok(Expr::Var(3)),
                "tanh" | "exp" | "abs" => {
                    if !matches!(self.peek(), Some(Token::LParen)) {
                        return Err(format!("{name} must be followed by a parenthesized argument"));
                    }
                    self.pos += 1;
                    let arg = self.expr()?;
                    match self.next() {
                        Some(Token::RParen) => {}
                        _ => return Err(format!("missing closing parenthesis after {name}(...")),
                    }
                    Ok(match name.as_str() {
                        "tanh" => Expr::Tanh(Box::new(arg)),
                        "exp" => Expr::Exp(Box::new(arg)),
                        _ => Expr::Abs(Box::new(arg)),
                    })
                }
                _ => Err(format!(
                    "unknown name {name:?}; expected x, x1..x4, tanh, exp, abs, or a number"
                )),
            },
            Some(Token::LParen) => {
                let inner = self.expr()?;
                match self.next() {
                    Some(Token::RParen) => Ok(inner),
                    _ => Err("missing closing parenthesis".to_string()),
                }
            }
            other => Err(format!("expected a value, found {other:?}")),
        }
    }
}

/// Parses an expression source string.
pub fn parse(src: &str) -> Result<Expr, String> {
    let tokens = tokenize(src)?;
    if tokens.is_empty() {
        return Err("empty expression".to_string());
    }
    let mut p = Parser { tokens, pos: 0 };
    let e = p.expr()?;
    if p.pos != p.tokens.len() {
        return Err(format!(
            "trailing tokens after expression: {:?}",
            &p.tokens[p.pos..]
        ));
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(src: &str, x: &[f64]) -> f64 {
        parse(src).unwrap().eval(&DVector::from_column_slice(x))
    }

    #[test]
    fn arithmetic_and_precedence() {
        assert_eq!(ev("1+2*3", &[0.0]), 7.0);
        assert_eq!(ev("(1+2)*3", &[0.0]), 9.0);
        assert_eq!(ev("2^3", &[0.0]), 8.0);
        assert_eq!(ev("-x^2", &[3.0]), -9.0);
        assert_eq!(ev("0.1*x^2", &[2.0]), 0.4);
        assert_eq!(ev("1+x1^2+x2^2", &[1.0, 2.0]), 6.0);
        assert_eq!(ev("6/3/2", &[0.0]), 1.0);
        assert_eq!(ev("2-3-4", &[0.0]), -5.0);
        assert!((ev("tanh(x)+exp(-x)", &[0.5]) - (0.5f64.tanh() + (-0.5f64).exp())).abs() < 1e-15);
        assert_eq!(ev("abs(-3*x)", &[2.0]), 6.0);
        assert_eq!(ev("1e-2*x", &[3.0]), 0.03);
    }

    #[test]
    fn unicode_operators_parse() {
        assert_eq!(ev("0.1\u{b7}x^2", &[2.0]), 0.4);
        assert_eq!(ev("1\u{2212}x", &[0.25]), 0.75);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let cases = [
            "0.1*x^2",
            "tanh(x)",
            "exp(-0.5*x^2)",
            "x^3 - 2*x + 1",
            "abs(x)",
            "x1*x2 + x2^2",
            "(x+1)/(x^2+2)",
        ];
        for src in cases {
            let e = parse(src).unwrap();
            let dim = e.max_var().max(1);
            let grads = e.gradient(dim);
            for trial in 0..5 {
                let x = DVector::from_fn(dim, |i, _| 0.3 + 0.7 * (trial as f64) + 0.1 * i as f64);
                for i in 0..dim {
                    let h = 1e-6;
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[i] += h;
                    xm[i] -= h;
                    let fd = (e.eval(&xp) - e.eval(&xm)) / (2.0 * h);
                    let sym = grads[i].eval(&x);
                    assert!(
                        (fd - sym).abs() < 1e-6 * (1.0 + sym.abs()),
                        "{src}: d/dx{i} symbolic {sym} vs fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn abs_derivative_is_zero_at_the_kink() {
        let e = parse("abs(x)").unwrap();
        assert_eq!(e.diff(0).eval(&DVector::from_column_slice(&[0.0])), 0.0);
    }

    #[test]
    fn variable_count_is_reported() {
        assert_eq!(parse("3.5").unwrap().max_var(), 0);
        assert_eq!(parse("x").unwrap().max_var(), 1);
        assert_eq!(parse("x3 + x1").unwrap().max_var(), 3);
    }

    #[test]
    fn malformed_expressions_are_rejected() {
        assert!(parse("").is_err());
        assert!(parse("x +").is_err());
        assert!(parse("y + 1").is_err());
        assert!(parse("x ^ x").is_err());
        assert!(parse("tanh x").is_err());
        assert!(parse("(x + 1").is_err());
        assert!(parse("1 2").is_err());
        assert!(parse("x @ 2").is_err());
    }

    #[test]
    fn constant_exponents_may_be_expressions() {
        assert_eq!(ev("x^(1+1)", &[3.0]), 9.0);
        assert_eq!(ev("2^-1", &[0.0]), 0.5);
    }
}
