//! Small arithmetic expressions for coefficients and schedule values.
//!
//! Grammar: numbers, `pi`, the variables `x1 x2 y1 y2 t`, `+ - * / ^`, unary
//! minus, parentheses and the functions `sin`, `cos`. Nothing else is
//! accepted.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{msg} at position {pos} in `{src}`")]
pub struct ExprError {
    pub src: String,
    pub pos: usize,
    pub msg: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    X1,
    X2,
    Y1,
    Y2,
    T,
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(f64),
    Var(Var),
    Neg(Box<Node>),
    Bin(char, Box<Node>, Box<Node>),
    Sin(Box<Node>),
    Cos(Box<Node>),
}

/// Variable values for evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct Env {
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub t: f64,
}

/// A parsed expression.
#[derive(Clone)]
pub struct Expr {
    src: String,
    root: Arc<Node>,
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr({})", self.src)
    }
}

impl Expr {
    pub fn parse(src: &str) -> Result<Expr, ExprError> {
        let mut p = Parser { src, bytes: src.as_bytes(), pos: 0 };
        let root = p.expr()?;
        p.skip_ws();
        if p.pos != p.bytes.len() {
            return Err(p.err("unexpected input"));
        }
        Ok(Expr { src: src.to_string(), root: Arc::new(root) })
    }

    pub fn source(&self) -> &str {
        &self.src
    }

    pub fn eval(&self, env: &Env) -> f64 {
        eval(&self.root, env)
    }

    /// Variables the expression depends on.
    pub fn uses(&self, v: Var) -> bool {
        fn walk(n: &Node, v: Var) -> bool {
            match n {
                Node::Num(_) => false,
                Node::Var(w) => *w == v,
                Node::Neg(a) | Node::Sin(a) | Node::Cos(a) => walk(a, v),
                Node::Bin(_, a, b) => walk(a, v) || walk(b, v),
            }
        }
        walk(&self.root, v)
    }

    /// Constant value, or an error naming the first variable used.
    pub fn constant(&self) -> Result<f64, ExprError> {
        for (v, name) in [(Var::X1, "x1"), (Var::X2, "x2"), (Var::Y1, "y1"), (Var::Y2, "y2"), (Var::T, "t")] {
            if self.uses(v) {
                return Err(ExprError { src: self.src.clone(), pos: 0, msg: format!("expected a constant, found `{name}`") });
            }
        }
        Ok(self.eval(&Env::default()))
    }
}

/// Parse and evaluate a constant expression such as `1/4`.
pub fn constant(src: &str) -> Result<f64, ExprError> {
    Expr::parse(src)?.constant()
}

fn eval(n: &Node, env: &Env) -> f64 {
    match n {
        Node::Num(v) => *v,
        Node::Var(Var::X1) => env.x[0],
        Node::Var(Var::X2) => env.x[1],
        Node::Var(Var::Y1) => env.y[0],
        Node::Var(Var::Y2) => env.y[1],
        Node::Var(Var::T) => env.t,
        Node::Neg(a) => -eval(a, env),
        Node::Sin(a) => eval(a, env).sin(),
        Node::Cos(a) => eval(a, env).cos(),
        Node::Bin(op, a, b) => {
            let (a, b) = (eval(a, env), eval(b, env));
            match op {
                '+' => a + b,
                '-' => a - b,
                '*' => a * b,
                '/' => a / b,
                _ => {
                    // integer powers stay exact for negative bases
                    if b.fract() == 0.0 && b.abs() <= 64.0 {
                        a.powi(b as i32)
                    } else {
                        a.powf(b)
                    }
                }
            }
        }
    }
}

struct Parser<'a> {
    src: &'a str,
    bytes: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn err(&self, msg: &str) -> ExprError {
        ExprError { src: self.src.to_string(), pos: self.pos, msg: msg.to_string() }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.bytes.get(self.pos).copied()
    }

    fn expr(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.term()?;
        while let Some(c @ (b'+' | b'-')) = self.peek() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Node::Bin(c as char, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.unary()?;
        while let Some(c @ (b'*' | b'/')) = self.peek() {
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Node::Bin(c as char, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Node, ExprError> {
        match self.peek() {
            Some(b'-') => {
                self.pos += 1;
                Ok(Node::Neg(Box::new(self.unary()?)))
            }
            Some(b'+') => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    // right associative, binds tighter than unary minus: -2^2 = -4
    fn power(&mut self) -> Result<Node, ExprError> {
        let base = self.atom()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            let exp = self.unary()?;
            return Ok(Node::Bin('^', Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node, ExprError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                if self.peek() != Some(b')') {
                    return Err(self.err("expected `)`"));
                }
                self.pos += 1;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => {
                let start = self.pos;
                while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_alphanumeric() {
                    self.pos += 1;
                }
                let name = &self.src[start..self.pos];
                let var = |v| Ok(Node::Var(v));
                match name {
                    "x1" => var(Var::X1),
                    "x2" => var(Var::X2),
                    "y1" => var(Var::Y1),
                    "y2" => var(Var::Y2),
                    "t" => var(Var::T),
                    "pi" => Ok(Node::Num(std::f64::consts::PI)),
                    "sin" | "cos" => {
                        if self.peek() != Some(b'(') {
                            return Err(self.err("expected `(` after function name"));
                        }
                        let arg = self.atom()?;
                        Ok(if name == "sin" { Node::Sin(Box::new(arg)) } else { Node::Cos(Box::new(arg)) })
                    }
                    _ => {
                        self.pos = start;
                        Err(self.err(&format!("unknown name `{name}`")))
                    }
                }
            }
            Some(_) => Err(self.err("unexpected character")),
            None => Err(self.err("unexpected end of expression")),
        }
    }

    fn number(&mut self) -> Result<Node, ExprError> {
        let start = self.pos;
        let b = self.bytes;
        while self.pos < b.len() && (b[self.pos].is_ascii_digit() || b[self.pos] == b'.') {
            self.pos += 1;
        }
        if self.pos < b.len() && (b[self.pos] == b'e' || b[self.pos] == b'E') {
            let save = self.pos;
            self.pos += 1;
            if self.pos < b.len() && (b[self.pos] == b'+' || b[self.pos] == b'-') {
                self.pos += 1;
            }
            if self.pos < b.len() && b[self.pos].is_ascii_digit() {
                while self.pos < b.len() && b[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
            } else {
                self.pos = save;
            }
        }
        self.src[start..self.pos].parse::<f64>().map(Node::Num).map_err(|_| {
            self.pos = start;
            self.err("malformed number")
        })
    }
}
