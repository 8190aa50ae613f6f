//! Tiny analytic expressions over the coordinates `x`, `y`, `z`.
//!
//! Boundary data and conductivities are given in configs as strings such as
//! `"1"`, `"x"`, `"x^2 - y^2"`, `"exp(x)"`, `"1 + 0.5*y"`. The grammar is
//! `+ - * / ^` with unary minus, parentheses, the functions
//! `exp, sin, cos, ln, sqrt`, and numeric literals. Expressions evaluate
//! exactly at quadrature points and differentiate symbolically (needed for
//! conductivity gradients in the dipole constant).

use crate::error::{CmError, Result};
use crate::geom::Vec3;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Num(f64),
    Var(usize),
    Add(Arc<Node>, Arc<Node>),
    Sub(Arc<Node>, Arc<Node>),
    Mul(Arc<Node>, Arc<Node>),
    Div(Arc<Node>, Arc<Node>),
    Pow(Arc<Node>, i32),
    Neg(Arc<Node>),
    Exp(Arc<Node>),
    Sin(Arc<Node>),
    Cos(Arc<Node>),
    Ln(Arc<Node>),
    Sqrt(Arc<Node>),
}

/// A parsed expression; cheap to clone, evaluable at any point.
#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    root: Arc<Node>,
    text: String,
}

impl Expr {
    pub fn parse(text: &str) -> Result<Expr> {
        let mut p = Parser {
            src: text.as_bytes(),
            pos: 0,
        };
        let root = p.parse_expr()?;
        p.skip_ws();
        if p.pos != p.src.len() {
            return Err(CmError::ExprParse(format!(
                "trailing input at byte {} in {text:?}",
                p.pos
            )));
        }
        Ok(Expr {
            root: Arc::new(root),
            text: text.to_string(),
        })
    }

    pub fn constant(v: f64) -> Expr {
        Expr {
            root: Arc::new(Node::Num(v)),
            text: format!("{v}"),
        }
    }

    pub fn eval(&self, p: Vec3) -> f64 {
        eval_node(&self.root, p)
    }

    /// Symbolic partial derivative with respect to axis 0, 1 or 2.
    pub fn derivative(&self, axis: usize) -> Expr {
        let d = diff(&self.root, axis);
        Expr {
            text: format!("d/d{}({})", ["x", "y", "z"][axis], self.text),
            root: d,
        }
    }

    pub fn gradient_at(&self, p: Vec3) -> Vec3 {
        [
            eval_node(&diff(&self.root, 0), p),
            eval_node(&diff(&self.root, 1), p),
            eval_node(&diff(&self.root, 2), p),
        ]
    }

    /// True if the expression is a literal constant.
    pub fn as_constant(&self) -> Option<f64> {
        match &*self.root {
            Node::Num(v) => Some(*v),
            Node::Neg(inner) => match &**inner {
                Node::Num(v) => Some(-v),
                _ => None,
            },
            _ => None,
        }
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

impl Serialize for Expr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.text)
    }
}

impl<'de> Deserialize<'de> for Expr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Expr, D::Error> {
        let s = String::deserialize(d)?;
        Expr::parse(&s).map_err(serde::de::Error::custom)
    }
}

fn eval_node(n: &Node, p: Vec3) -> f64 {
    match n {
        Node::Num(v) => *v,
        Node::Var(k) => p[*k],
        Node::Add(a, b) => eval_node(a, p) + eval_node(b, p),
        Node::Sub(a, b) => eval_node(a, p) - eval_node(b, p),
        Node::Mul(a, b) => eval_node(a, p) * eval_node(b, p),
        Node::Div(a, b) => eval_node(a, p) / eval_node(b, p),
        Node::Pow(a, k) => eval_node(a, p).powi(*k),
        Node::Neg(a) => -eval_node(a, p),
        Node::Exp(a) => eval_node(a, p).exp(),
        Node::Sin(a) => eval_node(a, p).sin(),
        Node::Cos(a) => eval_node(a, p).cos(),
        Node::Ln(a) => eval_node(a, p).ln(),
        Node::Sqrt(a) => eval_node(a, p).sqrt(),
    }
}

fn num(v: f64) -> Arc<Node> {
    Arc::new(Node::Num(v))
}

fn diff(n: &Node, axis: usize) -> Arc<Node> {
    use Node::*;
    match n {
        Num(_) => num(0.0),
        Var(k) => num(if *k == axis { 1.0 } else { 0.0 }),
        Add(a, b) => Arc::new(Add(diff(a, axis), diff(b, axis))),
        Sub(a, b) => Arc::new(Sub(diff(a, axis), diff(b, axis))),
        Mul(a, b) => Arc::new(Add(
            Arc::new(Mul(diff(a, axis), b.clone())),
            Arc::new(Mul(a.clone(), diff(b, axis))),
        )),
        Div(a, b) => Arc::new(Div(
            Arc::new(Sub(
                Arc::new(Mul(diff(a, axis), b.clone())),
                Arc::new(Mul(a.clone(), diff(b, axis))),
            )),
            Arc::new(Pow(b.clone(), 2)),
        )),
        Pow(a, k) => Arc::new(Mul(
            Arc::new(Mul(num(*k as f64), Arc::new(Pow(a.clone(), k - 1)))),
            diff(a, axis),
        )),
        Neg(a) => Arc::new(Neg(diff(a, axis))),
        Exp(a) => Arc::new(Mul(Arc::new(Exp(a.clone())), diff(a, axis))),
        Sin(a) => Arc::new(Mul(Arc::new(Cos(a.clone())), diff(a, axis))),
        Cos(a) => Arc::new(Neg(Arc::new(Mul(Arc::new(Sin(a.clone())), diff(a, axis))))),
        Ln(a) => Arc::new(Div(diff(a, axis), a.clone())),
        Sqrt(a) => Arc::new(Div(
            diff(a, axis),
            Arc::new(Mul(num(2.0), Arc::new(Sqrt(a.clone())))),
        )),
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn parse_expr(&mut self) -> Result<Node> {
        let mut lhs = self.parse_term()?;
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    let rhs = self.parse_term()?;
                    lhs = Node::Add(Arc::new(lhs), Arc::new(rhs));
                }
                Some(b'-') => {
                    self.pos += 1;
                    let rhs = self.parse_term()?;
                    lhs = Node::Sub(Arc::new(lhs), Arc::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn parse_term(&mut self) -> Result<Node> {
        let mut lhs = self.parse_factor()?;
        loop {
            match self.peek() {
                Some(b'*') => {
                    self.pos += 1;
                    let rhs = self.parse_factor()?;
                    lhs = Node::Mul(Arc::new(lhs), Arc::new(rhs));
                }
                Some(b'/') => {
                    self.pos += 1;
                    let rhs = self.parse_factor()?;
                    lhs = Node::Div(Arc::new(lhs), Arc::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn parse_factor(&mut self) -> Result<Node> {
        match self.peek() {
            Some(b'-') => {
                self.pos += 1;
                let inner = self.parse_factor()?;
                return Ok(Node::Neg(Arc::new(inner)));
            }
            Some(b'+') => {
                self.pos += 1;
                return self.parse_factor();
            }
            _ => {}
        }
        let base = self.parse_atom()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            self.skip_ws();
            let mut sign = 1i32;
            if self.peek() == Some(b'-') {
                sign = -1;
                self.pos += 1;
            }
            let start = self.pos;
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            if start == self.pos {
                return Err(CmError::ExprParse("expected integer exponent after ^".into()));
            }
            let k: i32 = std::str::from_utf8(&self.src[start..self.pos])
                .unwrap()
                .parse()
                .map_err(|e| CmError::ExprParse(format!("bad exponent: {e}")))?;
            return Ok(Node::Pow(Arc::new(base), sign * k));
        }
        Ok(base)
    }

    fn parse_atom(&mut self) -> Result<Node> {
        self.skip_ws();
        let Some(c) = self.src.get(self.pos).copied() else {
            return Err(CmError::ExprParse("unexpected end of input".into()));
        };
        if c == b'(' {
            self.pos += 1;
            let inner = self.parse_expr()?;
            if self.peek() != Some(b')') {
                return Err(CmError::ExprParse("missing closing parenthesis".into()));
            }
            self.pos += 1;
            return Ok(inner);
        }
        if c.is_ascii_digit() || c == b'.' {
            let start = self.pos;
            while self.pos < self.src.len() {
                let d = self.src[self.pos];
                if d.is_ascii_digit() || d == b'.' {
                    self.pos += 1;
                } else if (d == b'e' || d == b'E')
                    && self
                        .src
                        .get(self.pos + 1)
                        .is_some_and(|n| n.is_ascii_digit() || *n == b'+' || *n == b'-')
                {
                    self.pos += 2;
                    while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                        self.pos += 1;
                    }
                } else {
                    break;
                }
            }
            let v: f64 = std::str::from_utf8(&self.src[start..self.pos])
                .unwrap()
                .parse()
                .map_err(|e| CmError::ExprParse(format!("bad number: {e}")))?;
            return Ok(Node::Num(v));
        }
        if c.is_ascii_alphabetic() {
            let start = self.pos;
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_alphanumeric() {
                self.pos += 1;
            }
            let name = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
            match name {
                "x" | "x1" => return Ok(Node::Var(0)),
                "y" | "x2" => return Ok(Node::Var(1)),
                "z" | "x3" => return Ok(Node::Var(2)),
                "pi" => return Ok(Node::Num(std::f64::consts::PI)),
                _ => {}
            }
            if self.peek() != Some(b'(') {
                return Err(CmError::ExprParse(format!("unknown symbol {name:?}")));
            }
            self.pos += 1;
            let arg = Arc::new(self.parse_expr()?);
            if self.peek() != Some(b')') {
                return Err(CmError::ExprParse(format!("missing ) after {name}(")));
            }
            self.pos += 1;
            let node = match name {
                "exp" => Node::Exp(arg),
                "sin" => Node::Sin(arg),
                "cos" => Node::Cos(arg),
                "ln" | "log" => Node::Ln(arg),
                "sqrt" => Node::Sqrt(arg),
                _ => return Err(CmError::ExprParse(format!("unknown function {name:?}"))),
            };
            return Ok(node);
        }
        Err(CmError::ExprParse(format!(
            "unexpected character {:?} at byte {}",
            c as char, self.pos
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn parse_and_eval() {
        let e = Expr::parse("x^2 - y^2").unwrap();
        assert_relative_eq!(e.eval([3.0, 2.0, 0.0]), 5.0);
        let e = Expr::parse("exp(x)").unwrap();
        assert_relative_eq!(e.eval([1.0, 0.0, 0.0]), std::f64::consts::E);
        let e = Expr::parse("1 + 0.5*y").unwrap();
        assert_relative_eq!(e.eval([0.0, 2.0, 0.0]), 2.0);
        let e = Expr::parse("(1 - exp(-x)) / (1 - exp(-1))").unwrap();
        assert_relative_eq!(e.eval([1.0, 0.0, 0.0]), 1.0, epsilon = 1e-12);
        let e = Expr::parse("-x*sin(pi*z)").unwrap();
        assert_relative_eq!(e.eval([2.0, 0.0, 0.5]), -2.0, epsilon = 1e-12);
    }

    #[test]
    fn symbolic_gradient_matches_finite_differences() {
        let exprs = ["exp(x)*sin(y) + z^3", "1 + x*y*z", "sqrt(1 + x^2)", "x/(2 + y)"];
        let p = [0.3, -0.7, 0.9];
        let h = 1e-6;
        for text in exprs {
            let e = Expr::parse(text).unwrap();
            let g = e.gradient_at(p);
            for axis in 0..3 {
                let mut pp = p;
                let mut pm = p;
                pp[axis] += h;
                pm[axis] -= h;
                let fd = (e.eval(pp) - e.eval(pm)) / (2.0 * h);
                assert_relative_eq!(g[axis], fd, epsilon = 1e-7, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn constants_detected() {
        assert_eq!(Expr::parse("1").unwrap().as_constant(), Some(1.0));
        assert_eq!(Expr::parse("2.5").unwrap().as_constant(), Some(2.5));
        assert_eq!(Expr::parse("x").unwrap().as_constant(), None);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Expr::parse("x +").is_err());
        assert!(Expr::parse("foo(x)").is_err());
        assert!(Expr::parse("x^y").is_err());
        assert!(Expr::parse("(x").is_err());
    }
}
