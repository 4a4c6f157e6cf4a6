//! Arithmetic expression language for auxiliary reward terms.
//!
//! Grammar (recursive descent, whitespace ignored):
//!
//! ```text
//! expr  := term (("+" | "-") term)*
//! term  := unary (("*" | "/") unary)*
//! unary := "-" unary | power
//! power := atom ("^" unary)?
//! atom  := NUMBER | IDENT | IDENT "(" expr ("," expr)* ")" | "(" expr ")"
//! ```
//!
//! `^` is right-associative and binds tighter than unary minus, so `-2^2`
//! is `-4` and `2^3^2` is `512`. Identifiers match `[a-z_][a-z0-9_]*`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("syntax error at byte {offset}: expected {expected}")]
    Syntax { offset: usize, expected: String },
    #[error("unknown function `{name}` at byte {offset}")]
    UnknownFunction { name: String, offset: usize },
    #[error("function `{name}` takes {expected} argument(s), got {found}")]
    ArityMismatch {
        name: String,
        expected: usize,
        found: usize,
    },
}

impl ParseError {
    /// Byte offset of the problem, where one is known.
    pub fn offset(&self) -> Option<usize> {
        match self {
            ParseError::Syntax { offset, .. } | ParseError::UnknownFunction { offset, .. } => {
                Some(*offset)
            }
            ParseError::ArityMismatch { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("unbound variable `{0}`")]
    UnboundVariable(String),
    #[error("non-finite result in {0}")]
    NonFiniteResult(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinaryOp {
    fn symbol(self) -> char {
        match self {
            BinaryOp::Add => '+',
            BinaryOp::Sub => '-',
            BinaryOp::Mul => '*',
            BinaryOp::Div => '/',
            BinaryOp::Pow => '^',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Function {
    Exp,
    Log,
    Tanh,
    Abs,
    Sqrt,
    Min,
    Max,
    Clamp,
}

impl Function {
    pub const ALL: [Function; 8] = [
        Function::Exp,
        Function::Log,
        Function::Tanh,
        Function::Abs,
        Function::Sqrt,
        Function::Min,
        Function::Max,
        Function::Clamp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Function::Exp => "exp",
            Function::Log => "log",
            Function::Tanh => "tanh",
            Function::Abs => "abs",
            Function::Sqrt => "sqrt",
            Function::Min => "min",
            Function::Max => "max",
            Function::Clamp => "clamp",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Function::Min | Function::Max => 2,
            Function::Clamp => 3,
            _ => 1,
        }
    }

    pub fn from_name(name: &str) -> Option<Function> {
        Function::ALL.into_iter().find(|f| f.name() == name)
    }

    fn apply(self, args: &[f64]) -> f64 {
        match self {
            Function::Exp => args[0].exp(),
            Function::Log => args[0].ln(),
            Function::Tanh => args[0].tanh(),
            Function::Abs => args[0].abs(),
            Function::Sqrt => args[0].sqrt(),
            Function::Min => args[0].min(args[1]),
            Function::Max => args[0].max(args[1]),
            // lo > hi resolves to hi, never panics
            Function::Clamp => args[0].max(args[1]).min(args[2]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Number(f64),
    Variable(String),
    Neg(Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
    Call(Function, Vec<Expr>),
}

impl Expr {
    pub fn binary(op: BinaryOp, left: Expr, right: Expr) -> Expr {
        Expr::Binary(op, Box::new(left), Box::new(right))
    }

    pub fn neg(child: Expr) -> Expr {
        Expr::Neg(Box::new(child))
    }

    pub fn var(name: &str) -> Expr {
        Expr::Variable(name.to_string())
    }
}

/// Prints a fully parenthesized form that parses back to an equivalent tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Number(v) if *v < 0.0 || (*v == 0.0 && v.is_sign_negative()) => {
                write!(f, "(-{})", -v)
            }
            Expr::Number(v) => write!(f, "{v}"),
            Expr::Variable(name) => f.write_str(name),
            Expr::Neg(child) => write!(f, "(-{child})"),
            Expr::Binary(op, l, r) => write!(f, "({l} {} {r})", op.symbol()),
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
        }
    }
}

/// Variable values for one evaluation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Bindings {
    values: BTreeMap<String, f64>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, name: impl Into<String>, value: f64) -> &mut Self {
        self.values.insert(name.into(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }
}

impl<S: Into<String>> FromIterator<(S, f64)> for Bindings {
    fn from_iter<I: IntoIterator<Item = (S, f64)>>(iter: I) -> Self {
        Bindings {
            values: iter.into_iter().map(|(k, v)| (k.into(), v)).collect(),
        }
    }
}

pub fn parse_expr(text: &str) -> Result<Expr, ParseError> {
    let mut parser = Parser { src: text.as_bytes(), pos: 0 };
    let expr = parser.expr()?;
    parser.skip_ws();
    if parser.pos != parser.src.len() {
        return Err(parser.error("operator or end of input"));
    }
    Ok(expr)
}

pub fn eval_expr(expr: &Expr, bindings: &Bindings) -> Result<f64, EvalError> {
    let value = match expr {
        Expr::Number(v) => *v,
        Expr::Variable(name) => bindings
            .get(name)
            .ok_or_else(|| EvalError::UnboundVariable(name.clone()))?,
        Expr::Neg(child) => -eval_expr(child, bindings)?,
        Expr::Binary(op, l, r) => {
            let a = eval_expr(l, bindings)?;
            let b = eval_expr(r, bindings)?;
            let v = match op {
                BinaryOp::Add => a + b,
                BinaryOp::Sub => a - b,
                BinaryOp::Mul => a * b,
                BinaryOp::Div => a / b,
                BinaryOp::Pow => a.powf(b),
            };
            if !v.is_finite() {
                return Err(EvalError::NonFiniteResult(format!("`{a} {} {b}`", op.symbol())));
            }
            v
        }
        Expr::Call(func, args) => {
            let vals = args
                .iter()
                .map(|a| eval_expr(a, bindings))
                .collect::<Result<Vec<_>, _>>()?;
            let v = func.apply(&vals);
            if !v.is_finite() {
                return Err(EvalError::NonFiniteResult(format!(
                    "`{}` of {vals:?}",
                    func.name()
                )));
            }
            v
        }
    };
    if !value.is_finite() {
        return Err(EvalError::NonFiniteResult(format!("`{expr}`")));
    }
    Ok(value)
}

pub fn free_vars(expr: &Expr) -> BTreeSet<String> {
    fn walk(e: &Expr, out: &mut BTreeSet<String>) {
        match e {
            Expr::Number(_) => {}
            Expr::Variable(name) => {
                out.insert(name.clone());
            }
            Expr::Neg(c) => walk(c, out),
            Expr::Binary(_, l, r) => {
                walk(l, out);
                walk(r, out);
            }
            Expr::Call(_, args) => args.iter().for_each(|a| walk(a, out)),
        }
    }
    let mut out = BTreeSet::new();
    walk(expr, &mut out);
    out
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, expected: &str) -> ParseError {
        ParseError::Syntax {
            offset: self.pos,
            expected: expected.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Some(b'+') => BinaryOp::Add,
                Some(b'-') => BinaryOp::Sub,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Expr::binary(op, lhs, rhs);
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Some(b'*') => BinaryOp::Mul,
                Some(b'/') => BinaryOp::Div,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Expr::binary(op, lhs, rhs);
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.eat(b'-') {
            return Ok(Expr::neg(self.unary()?));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if self.eat(b'^') {
            let exponent = self.unary()?;
            return Ok(Expr::binary(BinaryOp::Pow, base, exponent));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        match self.peek() {
            Some(c) if c.is_ascii_digit() => self.number(),
            Some(c) if c.is_ascii_lowercase() || c == b'_' => self.ident_or_call(),
            Some(b'(') => {
                self.pos += 1;
                let inner = self.expr()?;
                if !self.eat(b')') {
                    return Err(self.error("`)`"));
                }
                Ok(inner)
            }
            _ => Err(self.error("number, identifier or `(`")),
        }
    }

    fn digits(&mut self) -> usize {
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        self.pos - start
    }

    fn number(&mut self) -> Result<Expr, ParseError> {
        let start = self.pos;
        self.digits();
        if self.src.get(self.pos) == Some(&b'.') {
            self.pos += 1;
            if self.digits() == 0 {
                return Err(self.error("digit after `.`"));
            }
        }
        if matches!(self.src.get(self.pos), Some(b'e' | b'E')) {
            self.pos += 1;
            if matches!(self.src.get(self.pos), Some(b'+' | b'-')) {
                self.pos += 1;
            }
            if self.digits() == 0 {
                return Err(self.error("exponent digits"));
            }
        }
        // the slice is pure ASCII digits/sign/exponent, so both conversions hold
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
        let value: f64 = text.parse().map_err(|_| ParseError::Syntax {
            offset: start,
            expected: "number".into(),
        })?;
        if !value.is_finite() {
            return Err(ParseError::Syntax {
                offset: start,
                expected: "finite number".into(),
            });
        }
        Ok(Expr::Number(value))
    }

    fn ident_or_call(&mut self) -> Result<Expr, ParseError> {
        let start = self.pos;
        while self.pos < self.src.len() {
            let c = self.src[self.pos];
            if c.is_ascii_lowercase() || c.is_ascii_digit() || c == b'_' {
                self.pos += 1;
            } else {
                break;
            }
        }
        let name = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
        if self.peek() != Some(b'(') {
            return Ok(Expr::var(name));
        }
        let func = Function::from_name(name).ok_or_else(|| ParseError::UnknownFunction {
            name: name.to_string(),
            offset: start,
        })?;
        self.pos += 1;
        let mut args = vec![self.expr()?];
        while self.eat(b',') {
            args.push(self.expr()?);
        }
        if !self.eat(b')') {
            return Err(self.error("`,` or `)`"));
        }
        if args.len() != func.arity() {
            return Err(ParseError::ArityMismatch {
                name: name.to_string(),
                expected: func.arity(),
                found: args.len(),
            });
        }
        Ok(Expr::Call(func, args))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval_str(s: &str) -> f64 {
        eval_expr(&parse_expr(s).unwrap(), &Bindings::new()).unwrap()
    }

    #[test]
    fn precedence_shapes() {
        assert_eq!(
            parse_expr("2*3+1").unwrap(),
            Expr::binary(
                BinaryOp::Add,
                Expr::binary(BinaryOp::Mul, Expr::Number(2.0), Expr::Number(3.0)),
                Expr::Number(1.0)
            )
        );
        assert_eq!(
            parse_expr("exp(-dist)").unwrap(),
            Expr::Call(Function::Exp, vec![Expr::neg(Expr::var("dist"))])
        );
    }

    #[test]
    fn precedence_values() {
        assert_eq!(eval_str("2*3+1"), 7.0);
        assert_eq!(eval_str("1+2*3"), 7.0);
        assert_eq!(eval_str("2^3^2"), 512.0);
        assert_eq!(eval_str("-2^2"), -4.0);
        assert_eq!(eval_str("2^-1"), 0.5);
        assert_eq!(eval_str("8/4/2"), 1.0);
        assert_eq!(eval_str("1-2-3"), -4.0);
        assert_eq!(eval_str("clamp(5, 0, 1) + min(3, 2) + max(-1, 0)"), 3.0);
        assert_eq!(eval_str("1.5e2 + 2E-1"), 150.2);
    }

    #[test]
    fn hand_evaluated_bindings() {
        let e = parse_expr("-(x^2) - 0.1*abs(v)").unwrap();
        let b: Bindings = [("x", 2.0), ("v", -3.0)].into_iter().collect();
        assert!((eval_expr(&e, &b).unwrap() - (-4.3)).abs() < 1e-12);

        let e = parse_expr("exp(-d)").unwrap();
        let b: Bindings = [("d", 0.0)].into_iter().collect();
        assert_eq!(eval_expr(&e, &b).unwrap(), 1.0);
    }

    #[test]
    fn function_table_errors() {
        assert!(matches!(
            parse_expr("min(1,2,3)"),
            Err(ParseError::ArityMismatch { expected: 2, found: 3, .. })
        ));
        assert!(matches!(
            parse_expr("foo(1)"),
            Err(ParseError::UnknownFunction { offset: 0, .. })
        ));
    }

    #[test]
    fn syntax_errors_carry_offsets() {
        for (src, off) in [("1 +", 3), ("(1", 2), ("1 2", 2), ("X", 0), ("1.", 2), ("", 0), ("2e", 2)] {
            match parse_expr(src) {
                Err(ParseError::Syntax { offset, .. }) => assert_eq!(offset, off, "{src}"),
                other => panic!("{src}: {other:?}"),
            }
        }
    }

    #[test]
    fn non_finite_results_are_errors() {
        for src in ["1/0", "0/0", "log(0)", "log(-1)", "sqrt(-1)", "exp(1000)", "(-8)^(1/3)", "10^400"] {
            let r = eval_expr(&parse_expr(src).unwrap(), &Bindings::new());
            assert!(matches!(r, Err(EvalError::NonFiniteResult(_))), "{src}: {r:?}");
        }
    }

    #[test]
    fn unbound_variable() {
        let r = eval_expr(&parse_expr("a + b").unwrap(), &[("a", 1.0)].into_iter().collect());
        assert_eq!(r, Err(EvalError::UnboundVariable("b".into())));
    }

    #[test]
    fn free_variables() {
        assert!(free_vars(&parse_expr("1+2").unwrap()).is_empty());
        let v: Vec<_> = free_vars(&parse_expr("exp(-d) + v").unwrap()).into_iter().collect();
        assert_eq!(v, ["d", "v"]);
        assert_eq!(free_vars(&parse_expr("x + x").unwrap()).len(), 1);
    }

    #[test]
    fn printed_form_reparses() {
        let e = parse_expr("-2^2 + clamp(x, -1, 1) * 3 / (y - 4)").unwrap();
        assert_eq!(parse_expr(&e.to_string()).unwrap(), e);
    }
}
