//! A small arithmetic expression language for drivers `f(t, x, y, z)` and
//! terminal conditions `g(x)` supplied through configuration files.
//!
//! Grammar:
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := factor (('*' | '/') factor)*
//! factor := '-' factor | base ('^' factor)?
//! base   := number | ident | ident '(' expr (',' expr)? ')' | '(' expr ')'
//! ```
//!
//! `^` binds tighter than unary minus (`-x1^2` is `-(x1^2)`) and is
//! right-associative. Identifiers are `t`, `y`, `z`, `x1`..`xd` and the
//! functions `sin cos exp log sqrt abs tanh` (unary) and `max min` (binary).
//!
//! Parsed expressions are compiled to a postfix program for evaluation; the
//! tree is kept for printing and error reporting.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at offset {offset}")]
    UnknownIdentifier { offset: usize, name: String },
    #[error("function `{name}` at offset {offset} takes {expected} argument(s), got {found}")]
    Arity {
        offset: usize,
        name: String,
        expected: usize,
        found: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("division by zero in `{node}`")]
    DivisionByZero { node: String },
    #[error("argument outside the domain of `{node}`")]
    Domain { node: String },
    #[error("non-finite value produced by `{node}`")]
    NonFinite { node: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    T,
    /// Zero-based coordinate index (`x1` is `X(0)`).
    X(usize),
    Y,
    Z,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
    Abs,
    Tanh,
    Max,
    Min,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            "tanh" => Func::Tanh,
            "max" => Func::Max,
            "min" => Func::Min,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Tanh => "tanh",
            Func::Max => "max",
            Func::Min => "min",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Max | Func::Min => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Const(f64),
    Var(Var),
    Neg(Box<Node>),
    Binary(BinOp, Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
}

/// Variable bindings for evaluation.
#[derive(Debug, Clone, Copy)]
pub struct Bindings<'a> {
    pub t: f64,
    pub x: &'a [f64],
    pub y: f64,
    pub z: f64,
}

impl<'a> Bindings<'a> {
    pub fn new(t: f64, x: &'a [f64], y: f64, z: f64) -> Self {
        Bindings { t, x, y, z }
    }

    pub fn space(x: &'a [f64]) -> Self {
        Bindings {
            t: 0.0,
            x,
            y: 0.0,
            z: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Instr {
    Const(f64),
    Var(Var),
    Neg,
    Binary(BinOp),
    Call(Func),
}

const STACK_LIMIT: usize = 32;

fn var_bit(v: Var) -> u64 {
    match v {
        Var::T => 1,
        Var::Y => 2,
        Var::Z => 4,
        Var::X(k) if k < 60 => 8 << k,
        Var::X(_) => 1 << 63,
    }
}

/// A parsed, validated expression.
#[derive(Debug, Clone)]
pub struct Expression {
    root: Node,
    dimension: usize,
    program: Vec<Instr>,
    max_stack: usize,
    vars: u64,
}

impl PartialEq for Expression {
    fn eq(&self, other: &Self) -> bool {
        self.root == other.root && self.dimension == other.dimension
    }
}

impl Expression {
    pub fn parse(text: &str, dimension: usize) -> Result<Self, ParseError> {
        let root = Parser::new(text, dimension).parse()?;
        Ok(Self::from_node(root, dimension))
    }

    /// Builds an expression from a tree. Variable references beyond
    /// `dimension` are reported when evaluated with a short `x`.
    pub fn from_node(root: Node, dimension: usize) -> Self {
        let mut program = Vec::new();
        compile(&root, &mut program);
        let max_stack = stack_depth(&program);
        let vars = program.iter().fold(0u64, |m, i| match i {
            Instr::Var(v) => m | var_bit(*v),
            _ => m,
        });
        Expression {
            root,
            dimension,
            program,
            max_stack,
            vars,
        }
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn uses(&self, var: Var) -> bool {
        self.vars & var_bit(var) != 0
    }

    /// Returns the value as a constant if the expression has no variables.
    pub fn as_constant(&self) -> Option<f64> {
        match self.root {
            Node::Const(c) => Some(c),
            _ => None,
        }
    }

    pub fn eval(&self, env: &Bindings<'_>) -> Result<f64, EvalError> {
        if self.max_stack > STACK_LIMIT {
            return eval_node(&self.root, env);
        }
        let mut stack = [0.0f64; STACK_LIMIT];
        let mut sp = 0usize;
        for instr in &self.program {
            match *instr {
                Instr::Const(c) => {
                    stack[sp] = c;
                    sp += 1;
                }
                Instr::Var(v) => {
                    stack[sp] = lookup(v, env);
                    sp += 1;
                }
                Instr::Neg => stack[sp - 1] = -stack[sp - 1],
                Instr::Binary(op) => {
                    sp -= 1;
                    let (a, b) = (stack[sp - 1], stack[sp]);
                    match apply_binary(op, a, b) {
                        Some(v) => stack[sp - 1] = v,
                        None => return eval_node(&self.root, env),
                    }
                }
                Instr::Call(f) => {
                    let value = if f.arity() == 2 {
                        sp -= 1;
                        apply_call(f, stack[sp - 1], stack[sp])
                    } else {
                        apply_call(f, stack[sp - 1], 0.0)
                    };
                    match value {
                        Some(v) => stack[sp - 1] = v,
                        None => return eval_node(&self.root, env),
                    }
                }
            }
        }
        let out = stack[0];
        if out.is_finite() {
            Ok(out)
        } else {
            // rerun on the tree to name the offending node
            eval_node(&self.root, env)
        }
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.root)
    }
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Const(c) if *c < 0.0 || (*c == 0.0 && c.is_sign_negative()) => {
                write!(f, "(-{:?})", -c)
            }
            Node::Const(c) => write!(f, "{c:?}"),
            Node::Var(Var::T) => write!(f, "t"),
            Node::Var(Var::Y) => write!(f, "y"),
            Node::Var(Var::Z) => write!(f, "z"),
            Node::Var(Var::X(i)) => write!(f, "x{}", i + 1),
            Node::Neg(a) => write!(f, "(-{a})"),
            Node::Binary(op, a, b) => {
                let sym = match op {
                    BinOp::Add => "+",
                    BinOp::Sub => "-",
                    BinOp::Mul => "*",
                    BinOp::Div => "/",
                    BinOp::Pow => "^",
                };
                write!(f, "({a} {sym} {b})")
            }
            Node::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (k, a) in args.iter().enumerate() {
                    if k > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{a}")?;
                }
                write!(f, ")")
            }
        }
    }
}

fn lookup(v: Var, env: &Bindings<'_>) -> f64 {
    match v {
        Var::T => env.t,
        Var::Y => env.y,
        Var::Z => env.z,
        Var::X(i) => env.x.get(i).copied().unwrap_or(f64::NAN),
    }
}

/// `None` flags a domain violation or a non-finite result.
#[inline]
fn apply_binary(op: BinOp, a: f64, b: f64) -> Option<f64> {
    let v = match op {
        BinOp::Add => a + b,
        BinOp::Sub => a - b,
        BinOp::Mul => a * b,
        BinOp::Div => {
            if b == 0.0 {
                return None;
            }
            a / b
        }
        BinOp::Pow => {
            if b == 2.0 {
                a * a
            } else {
                a.powf(b)
            }
        }
    };
    v.is_finite().then_some(v)
}

#[inline]
fn apply_call(f: Func, a: f64, b: f64) -> Option<f64> {
    let v = match f {
        Func::Sin => a.sin(),
        Func::Cos => a.cos(),
        Func::Exp => a.exp(),
        Func::Log => {
            if a <= 0.0 {
                return None;
            }
            a.ln()
        }
        Func::Sqrt => {
            if a < 0.0 {
                return None;
            }
            a.sqrt()
        }
        Func::Abs => a.abs(),
        Func::Tanh => a.tanh(),
        Func::Max => a.max(b),
        Func::Min => a.min(b),
    };
    v.is_finite().then_some(v)
}

fn eval_node(node: &Node, env: &Bindings<'_>) -> Result<f64, EvalError> {
    let non_finite = |v: f64| -> Result<f64, EvalError> {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(EvalError::NonFinite {
                node: node.to_string(),
            })
        }
    };
    match node {
        Node::Const(c) => non_finite(*c),
        Node::Var(v) => non_finite(lookup(*v, env)),
        Node::Neg(a) => Ok(-eval_node(a, env)?),
        Node::Binary(op, a, b) => {
            let (a, b) = (eval_node(a, env)?, eval_node(b, env)?);
            if *op == BinOp::Div && b == 0.0 {
                return Err(EvalError::DivisionByZero {
                    node: node.to_string(),
                });
            }
            match apply_binary(*op, a, b) {
                Some(v) => Ok(v),
                None if *op == BinOp::Pow && a < 0.0 => Err(EvalError::Domain {
                    node: node.to_string(),
                }),
                None => non_finite(f64::NAN),
            }
        }
        Node::Call(f, args) => {
            let a = eval_node(&args[0], env)?;
            let b = match args.get(1) {
                Some(arg) => eval_node(arg, env)?,
                None => 0.0,
            };
            match apply_call(*f, a, b) {
                Some(v) => Ok(v),
                None if matches!(f, Func::Log | Func::Sqrt) => Err(EvalError::Domain {
                    node: node.to_string(),
                }),
                None => non_finite(f64::NAN),
            }
        }
    }
}

fn compile(node: &Node, out: &mut Vec<Instr>) {
    match node {
        Node::Const(c) => out.push(Instr::Const(*c)),
        Node::Var(v) => out.push(Instr::Var(*v)),
        Node::Neg(a) => {
            compile(a, out);
            out.push(Instr::Neg);
        }
        Node::Binary(op, a, b) => {
            compile(a, out);
            compile(b, out);
            out.push(Instr::Binary(*op));
        }
        Node::Call(f, args) => {
            for a in args {
                compile(a, out);
            }
            out.push(Instr::Call(*f));
        }
    }
}

fn stack_depth(program: &[Instr]) -> usize {
    let (mut depth, mut max) = (0usize, 0usize);
    for instr in program {
        match instr {
            Instr::Const(_) | Instr::Var(_) => depth += 1,
            Instr::Neg => {}
            Instr::Binary(_) => depth -= 1,
            Instr::Call(f) => depth -= f.arity() - 1,
        }
        max = max.max(depth);
    }
    max
}

struct Parser<'a> {
    src: &'a str,
    bytes: &'a [u8],
    pos: usize,
    dimension: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str, dimension: usize) -> Self {
        Parser {
            src,
            bytes: src.as_bytes(),
            pos: 0,
            dimension,
        }
    }

    fn parse(mut self) -> Result<Node, ParseError> {
        self.skip_ws();
        if self.pos >= self.bytes.len() {
            return Err(self.syntax("empty expression"));
        }
        let node = self.expr()?;
        self.skip_ws();
        if self.pos < self.bytes.len() {
            return Err(self.syntax(&format!(
                "unexpected `{}`",
                self.src[self.pos..].chars().next().unwrap_or(' ')
            )));
        }
        Ok(node)
    }

    fn syntax(&self, message: &str) -> ParseError {
        ParseError::Syntax {
            offset: self.pos,
            message: message.to_string(),
        }
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

    fn expr(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.term()?;
        while let Some(c @ (b'+' | b'-')) = self.peek() {
            self.pos += 1;
            let rhs = self.term()?;
            let op = if c == b'+' { BinOp::Add } else { BinOp::Sub };
            lhs = Node::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.factor()?;
        while let Some(c @ (b'*' | b'/')) = self.peek() {
            self.pos += 1;
            let rhs = self.factor()?;
            let op = if c == b'*' { BinOp::Mul } else { BinOp::Div };
            lhs = Node::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn factor(&mut self) -> Result<Node, ParseError> {
        if self.peek() == Some(b'-') {
            self.pos += 1;
            let inner = self.factor()?;
            return Ok(Node::Neg(Box::new(inner)));
        }
        let base = self.base()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            let exponent = self.factor()?;
            return Ok(Node::Binary(BinOp::Pow, Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn base(&mut self) -> Result<Node, ParseError> {
        match self.peek() {
            None => Err(self.syntax("unexpected end of input")),
            Some(b'(') => {
                self.pos += 1;
                let inner = self.expr()?;
                if self.peek() != Some(b')') {
                    return Err(self.syntax("expected `)`"));
                }
                self.pos += 1;
                Ok(inner)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => self.ident(),
            Some(_) => Err(self.syntax(&format!(
                "unexpected `{}`",
                self.src[self.pos..].chars().next().unwrap_or(' ')
            ))),
        }
    }

    fn number(&mut self) -> Result<Node, ParseError> {
        let start = self.pos;
        let b = self.bytes;
        let mut i = self.pos;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        if i < b.len() && b[i] == b'.' {
            i += 1;
            while i < b.len() && b[i].is_ascii_digit() {
                i += 1;
            }
        }
        if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
            let mut j = i + 1;
            if j < b.len() && (b[j] == b'+' || b[j] == b'-') {
                j += 1;
            }
            if j < b.len() && b[j].is_ascii_digit() {
                while j < b.len() && b[j].is_ascii_digit() {
                    j += 1;
                }
                i = j;
            } else {
                self.pos = j;
                return Err(self.syntax("malformed exponent"));
            }
        }
        let text = &self.src[start..i];
        match text.parse::<f64>() {
            Ok(v) => {
                self.pos = i;
                Ok(Node::Const(v))
            }
            Err(_) => Err(self.syntax(&format!("malformed number `{text}`"))),
        }
    }

    fn ident(&mut self) -> Result<Node, ParseError> {
        let start = self.pos;
        let mut i = self.pos;
        while i < self.bytes.len() && (self.bytes[i].is_ascii_alphanumeric() || self.bytes[i] == b'_')
        {
            i += 1;
        }
        let name = &self.src[start..i];
        self.pos = i;
        if self.peek() == Some(b'(') {
            let func = Func::from_name(name).ok_or_else(|| ParseError::UnknownIdentifier {
                offset: start,
                name: name.to_string(),
            })?;
            self.pos += 1;
            let mut args = vec![self.expr()?];
            while self.peek() == Some(b',') {
                self.pos += 1;
                args.push(self.expr()?);
            }
            if self.peek() != Some(b')') {
                return Err(self.syntax("expected `)` or `,`"));
            }
            self.pos += 1;
            if args.len() != func.arity() {
                return Err(ParseError::Arity {
                    offset: start,
                    name: name.to_string(),
                    expected: func.arity(),
                    found: args.len(),
                });
            }
            return Ok(Node::Call(func, args));
        }
        let var = match name {
            "t" => Var::T,
            "y" => Var::Y,
            "z" => Var::Z,
            _ => match name.strip_prefix('x').and_then(|n| n.parse::<usize>().ok()) {
                Some(k) if k >= 1 && k <= self.dimension && !name[1..].starts_with('0') => {
                    Var::X(k - 1)
                }
                _ => {
                    let err = if Func::from_name(name).is_some() {
                        ParseError::Syntax {
                            offset: self.pos,
                            message: format!("function `{name}` requires arguments"),
                        }
                    } else {
                        ParseError::UnknownIdentifier {
                            offset: start,
                            name: name.to_string(),
                        }
                    };
                    return Err(err);
                }
            },
        };
        Ok(Node::Var(var))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(v: f64) -> Box<Node> {
        Box::new(Node::Const(v))
    }

    fn eval_str(text: &str, t: f64, x: &[f64], y: f64, z: f64) -> Result<f64, EvalError> {
        Expression::parse(text, x.len().max(1))
            .unwrap()
            .eval(&Bindings::new(t, x, y, z))
    }

    #[test]
    fn single_variable() {
        let e = Expression::parse("y", 1).unwrap();
        assert_eq!(e.root(), &Node::Var(Var::Y));
    }

    #[test]
    fn precedence_of_sum_and_product() {
        let e = Expression::parse("2*x1 + sin(t)", 1).unwrap();
        let expected = Node::Binary(
            BinOp::Add,
            Box::new(Node::Binary(
                BinOp::Mul,
                c(2.0),
                Box::new(Node::Var(Var::X(0))),
            )),
            Box::new(Node::Call(Func::Sin, vec![Node::Var(Var::T)])),
        );
        assert_eq!(e.root(), &expected);
    }

    #[test]
    fn incomplete_input_reports_offset() {
        match Expression::parse("x1 +", 1) {
            Err(ParseError::Syntax { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn power_is_right_associative_and_binds_tighter_than_negation() {
        assert_eq!(eval_str("2^3^2", 0.0, &[0.0], 0.0, 0.0).unwrap(), 512.0);
        assert_eq!(eval_str("-x1^2", 0.0, &[3.0], 0.0, 0.0).unwrap(), -9.0);
        assert_eq!(eval_str("2^-1", 0.0, &[0.0], 0.0, 0.0).unwrap(), 0.5);
        assert_eq!(eval_str("8/4/2", 0.0, &[0.0], 0.0, 0.0).unwrap(), 1.0);
        assert_eq!(eval_str("1-2-3", 0.0, &[0.0], 0.0, 0.0).unwrap(), -4.0);
    }

    #[test]
    fn unknown_identifiers_and_arity() {
        assert!(matches!(
            Expression::parse("w + 1", 1),
            Err(ParseError::UnknownIdentifier { offset: 0, .. })
        ));
        assert!(matches!(
            Expression::parse("x2", 1),
            Err(ParseError::UnknownIdentifier { .. })
        ));
        assert!(Expression::parse("x2", 2).is_ok());
        assert!(matches!(
            Expression::parse("max(y)", 1),
            Err(ParseError::Arity { expected: 2, found: 1, .. })
        ));
        assert!(matches!(
            Expression::parse("sin(y, z)", 1),
            Err(ParseError::Arity { expected: 1, found: 2, .. })
        ));
        assert!(matches!(
            Expression::parse("foo(y)", 1),
            Err(ParseError::UnknownIdentifier { .. })
        ));
        assert!(Expression::parse("", 1).is_err());
        assert!(Expression::parse("(y", 1).is_err());
        assert!(Expression::parse("1e", 1).is_err());
    }

    #[test]
    fn evaluation_examples() {
        assert_eq!(eval_str("max(z, 0)", 0.0, &[0.0], 0.0, -2.0).unwrap(), 0.0);
        assert_eq!(eval_str("exp(0) + tanh(0)", 0.0, &[0.0], 0.0, 0.0).unwrap(), 1.0);
        assert_eq!(eval_str("1.5e2 + .5", 0.0, &[0.0], 0.0, 0.0).unwrap(), 150.5);
        assert!(matches!(
            eval_str("1/x1", 0.0, &[0.0], 0.0, 0.0),
            Err(EvalError::DivisionByZero { .. })
        ));
        assert!(matches!(
            eval_str("log(y)", 0.0, &[0.0], -1.0, 0.0),
            Err(EvalError::Domain { .. })
        ));
        assert!(matches!(
            eval_str("sqrt(y - 1)", 0.0, &[0.0], 0.0, 0.0),
            Err(EvalError::Domain { node }) if node == "sqrt((y - 1.0))"
        ));
        assert!(matches!(
            eval_str("exp(y)", 0.0, &[0.0], 1e4, 0.0),
            Err(EvalError::NonFinite { .. })
        ));
    }

    #[test]
    fn variable_usage() {
        let e = Expression::parse("0.5*y + t", 1).unwrap();
        assert!(e.uses(Var::Y));
        assert!(e.uses(Var::T));
        assert!(!e.uses(Var::Z));
        assert_eq!(Expression::parse("3.5", 1).unwrap().as_constant(), Some(3.5));
    }

    fn arb_node(dim: usize) -> impl Strategy<Value = Node> {
        let leaf = prop_oneof![
            (0.0f64..100.0).prop_map(Node::Const),
            Just(Node::Var(Var::T)),
            Just(Node::Var(Var::Y)),
            Just(Node::Var(Var::Z)),
            (0..dim).prop_map(|i| Node::Var(Var::X(i))),
        ];
        leaf.prop_recursive(5, 48, 3, |inner| {
            prop_oneof![
                inner.clone().prop_map(|a| Node::Neg(Box::new(a))),
                (
                    prop_oneof![
                        Just(BinOp::Add),
                        Just(BinOp::Sub),
                        Just(BinOp::Mul),
                        Just(BinOp::Div),
                        Just(BinOp::Pow)
                    ],
                    inner.clone(),
                    inner.clone()
                )
                    .prop_map(|(op, a, b)| Node::Binary(op, Box::new(a), Box::new(b))),
                (
                    prop_oneof![
                        Just(Func::Sin),
                        Just(Func::Cos),
                        Just(Func::Exp),
                        Just(Func::Log),
                        Just(Func::Sqrt),
                        Just(Func::Abs),
                        Just(Func::Tanh)
                    ],
                    inner.clone()
                )
                    .prop_map(|(f, a)| Node::Call(f, vec![a])),
                (prop_oneof![Just(Func::Max), Just(Func::Min)], inner.clone(), inner)
                    .prop_map(|(f, a, b)| Node::Call(f, vec![a, b])),
            ]
        })
    }

    proptest! {
        #[test]
        fn print_parse_is_a_fixpoint(node in arb_node(2)) {
            let printed = Expression::from_node(node, 2).to_string();
            let once = Expression::parse(&printed, 2).unwrap();
            let twice = Expression::parse(&once.to_string(), 2).unwrap();
            prop_assert_eq!(&once, &twice);
            prop_assert_eq!(once.to_string(), twice.to_string());
        }

        #[test]
        fn compiled_and_tree_evaluation_agree(
            node in arb_node(2),
            t in -2.0f64..2.0, x1 in -2.0f64..2.0, x2 in -2.0f64..2.0,
            y in -2.0f64..2.0, z in -2.0f64..2.0,
        ) {
            let e = Expression::from_node(node, 2);
            let x = [x1, x2];
            let env = Bindings::new(t, &x, y, z);
            let fast = e.eval(&env);
            let slow = eval_node(e.root(), &env);
            match (fast, slow) {
                (Ok(a), Ok(b)) => prop_assert_eq!(a.to_bits(), b.to_bits()),
                (Err(_), Err(_)) => {}
                (a, b) => prop_assert!(false, "mismatch {:?} vs {:?}", a, b),
            }
            // determinism
            prop_assert_eq!(format!("{:?}", e.eval(&env)), format!("{:?}", e.eval(&env)));
        }
    }
}
