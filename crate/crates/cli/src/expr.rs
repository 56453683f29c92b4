//! Scalar expression language for inline problem coefficients.
//!
//! Grammar: numbers, the variables `s t x y z u v a`, the horizon `T`,
//! `+ - * / ^`, unary minus and the functions `sin cos exp min max`.
//! `^` binds tighter than unary minus and associates to the right.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Var {
    S,
    T,
    X,
    Y,
    Z,
    U,
    V,
    A,
}

impl Var {
    pub const ALL: [Var; 8] = [Var::S, Var::T, Var::X, Var::Y, Var::Z, Var::U, Var::V, Var::A];

    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "s" => Var::S,
            "t" => Var::T,
            "x" => Var::X,
            "y" => Var::Y,
            "z" => Var::Z,
            "u" => Var::U,
            "v" => Var::V,
            "a" => Var::A,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Var::S => "s",
            Var::T => "t",
            Var::X => "x",
            Var::Y => "y",
            Var::Z => "z",
            Var::U => "u",
            Var::V => "v",
            Var::A => "a",
        }
    }

    pub fn slot(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Min,
    Max,
}

impl Func {
    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "min" => Func::Min,
            "max" => Func::Max,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Min => "min",
            Func::Max => "max",
        }
    }

    fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Pow => "^",
        }
    }

    fn precedence(self) -> u8 {
        match self {
            BinOp::Add | BinOp::Sub => 1,
            BinOp::Mul | BinOp::Div => 2,
            BinOp::Pow => 4,
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
            BinOp::Pow => a.powf(b),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(Var),
    /// The horizon `T`, bound when the expression is compiled.
    Horizon,
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{message} at position {position}")]
pub struct ParseError {
    /// Byte offset into the source text.
    pub position: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("cannot differentiate {0}")]
pub struct DiffError(pub String);

pub fn parse(text: &str) -> Result<Expr, ParseError> {
    let mut p = Parser { src: text.as_bytes(), pos: 0 };
    let e = p.expr()?;
    p.skip_ws();
    if p.pos < p.src.len() {
        return Err(p.error(format!("unexpected '{}'", p.src[p.pos] as char)));
    }
    Ok(e.simplify())
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, message: String) -> ParseError {
        ParseError { position: self.pos, message }
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

    fn expect(&mut self, c: u8) -> Result<(), ParseError> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(format!("expected '{}'", c as char)))
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        while let Some(c @ (b'+' | b'-')) = self.peek() {
            self.pos += 1;
            let rhs = self.term()?;
            let op = if c == b'+' { BinOp::Add } else { BinOp::Sub };
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        while let Some(c @ (b'*' | b'/')) = self.peek() {
            self.pos += 1;
            let rhs = self.unary()?;
            let op = if c == b'*' { BinOp::Mul } else { BinOp::Div };
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.peek() == Some(b'-') {
            self.pos += 1;
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        if self.peek() == Some(b'+') {
            self.pos += 1;
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            let exp = self.unary()?;
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        match self.peek() {
            None => Err(self.error("unexpected end of expression".into())),
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(b')')?;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => {
                let start = self.pos;
                while self.pos < self.src.len() && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_') {
                    self.pos += 1;
                }
                let name = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
                if let Some(f) = Func::from_name(name) {
                    self.expect(b'(')?;
                    let mut args = vec![self.expr()?];
                    while self.peek() == Some(b',') {
                        self.pos += 1;
                        args.push(self.expr()?);
                    }
                    self.expect(b')')?;
                    if args.len() != f.arity() {
                        return Err(ParseError { position: start, message: format!("{name} takes {} argument(s), got {}", f.arity(), args.len()) });
                    }
                    return Ok(Expr::Call(f, args));
                }
                if name == "T" {
                    return Ok(Expr::Horizon);
                }
                Var::from_name(name).map(Expr::Var).ok_or(ParseError { position: start, message: format!("unknown name '{name}'") })
            }
            Some(c) => Err(self.error(format!("unexpected '{}'", c as char))),
        }
    }

    fn number(&mut self) -> Result<Expr, ParseError> {
        let start = self.pos;
        let digits = |p: &mut Self| {
            while p.pos < p.src.len() && p.src[p.pos].is_ascii_digit() {
                p.pos += 1;
            }
        };
        digits(self);
        if self.src.get(self.pos) == Some(&b'.') {
            self.pos += 1;
            digits(self);
        }
        if matches!(self.src.get(self.pos), Some(b'e' | b'E')) {
            let save = self.pos;
            self.pos += 1;
            if matches!(self.src.get(self.pos), Some(b'+' | b'-')) {
                self.pos += 1;
            }
            if self.src.get(self.pos).is_some_and(u8::is_ascii_digit) {
                digits(self);
            } else {
                self.pos = save;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
        text.parse::<f64>().map(Expr::Num).map_err(|_| ParseError { position: start, message: format!("malformed number '{text}'") })
    }
}

fn num(v: f64) -> Expr {
    Expr::Num(v)
}

fn bin(op: BinOp, a: Expr, b: Expr) -> Expr {
    Expr::Bin(op, Box::new(a), Box::new(b)).simplify_node()
}

impl Expr {
    pub fn as_num(&self) -> Option<f64> {
        match self {
            Expr::Num(v) => Some(*v),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.as_num() == Some(0.0)
    }

    /// Does the expression mention `var`?
    pub fn uses(&self, var: Var) -> bool {
        match self {
            Expr::Var(v) => *v == var,
            Expr::Num(_) | Expr::Horizon => false,
            Expr::Neg(e) => e.uses(var),
            Expr::Bin(_, a, b) => a.uses(var) || b.uses(var),
            Expr::Call(_, args) => args.iter().any(|e| e.uses(var)),
        }
    }

    /// Variables used, in canonical order.
    pub fn variables(&self) -> Vec<Var> {
        Var::ALL.into_iter().filter(|v| self.uses(*v)).collect()
    }

    /// Replaces `T` by a value and folds constants.
    pub fn bind_horizon(&self, horizon: f64) -> Expr {
        match self {
            Expr::Horizon => num(horizon),
            Expr::Num(_) | Expr::Var(_) => self.clone(),
            Expr::Neg(e) => Expr::Neg(Box::new(e.bind_horizon(horizon))).simplify_node(),
            Expr::Bin(op, a, b) => bin(*op, a.bind_horizon(horizon), b.bind_horizon(horizon)),
            Expr::Call(f, args) => Expr::Call(*f, args.iter().map(|e| e.bind_horizon(horizon)).collect()).simplify_node(),
        }
    }

    /// Bottom-up constant folding and identity removal.
    pub fn simplify(&self) -> Expr {
        match self {
            Expr::Num(_) | Expr::Var(_) | Expr::Horizon => self.clone(),
            Expr::Neg(e) => Expr::Neg(Box::new(e.simplify())).simplify_node(),
            Expr::Bin(op, a, b) => bin(*op, a.simplify(), b.simplify()),
            Expr::Call(f, args) => Expr::Call(*f, args.iter().map(Expr::simplify).collect()).simplify_node(),
        }
    }

    fn simplify_node(self) -> Expr {
        match self {
            Expr::Neg(e) => match *e {
                Expr::Num(v) => num(-v),
                Expr::Neg(inner) => *inner,
                other => Expr::Neg(Box::new(other)),
            },
            Expr::Call(f, args) => {
                if let Some(vals) = args.iter().map(Expr::as_num).collect::<Option<Vec<f64>>>() {
                    return num(apply_func(f, &vals));
                }
                Expr::Call(f, args)
            }
            Expr::Bin(op, a, b) => {
                if let (Some(x), Some(y)) = (a.as_num(), b.as_num()) {
                    return num(op.apply(x, y));
                }
                match (op, a.as_num(), b.as_num()) {
                    (BinOp::Add, Some(z), _) if z == 0.0 => *b,
                    (BinOp::Add | BinOp::Sub, _, Some(z)) if z == 0.0 => *a,
                    (BinOp::Sub, Some(z), _) if z == 0.0 => Expr::Neg(b).simplify_node(),
                    (BinOp::Mul, Some(z), _) | (BinOp::Mul, _, Some(z)) if z == 0.0 => num(0.0),
                    (BinOp::Mul, Some(o), _) if o == 1.0 => *b,
                    (BinOp::Mul | BinOp::Div, _, Some(o)) if o == 1.0 => *a,
                    (BinOp::Div, Some(z), _) if z == 0.0 => num(0.0),
                    (BinOp::Pow, _, Some(o)) if o == 1.0 => *a,
                    (BinOp::Pow, _, Some(z)) if z == 0.0 => num(1.0),
                    _ => Expr::Bin(op, a, b),
                }
            }
            other => other,
        }
    }

    /// Symbolic partial derivative. Exponents must not depend on `var`;
    /// `min` and `max` only when both branches have the same derivative.
    pub fn derivative(&self, var: Var) -> Result<Expr, DiffError> {
        if !self.uses(var) {
            return Ok(num(0.0));
        }
        Ok(match self {
            Expr::Var(v) => num(if *v == var { 1.0 } else { 0.0 }),
            Expr::Num(_) | Expr::Horizon => num(0.0),
            Expr::Neg(e) => Expr::Neg(Box::new(e.derivative(var)?)).simplify_node(),
            Expr::Bin(op, a, b) => {
                let (da, db) = (a.derivative(var)?, b.derivative(var)?);
                let (a, b) = ((**a).clone(), (**b).clone());
                match op {
                    BinOp::Add => bin(BinOp::Add, da, db),
                    BinOp::Sub => bin(BinOp::Sub, da, db),
                    BinOp::Mul => bin(BinOp::Add, bin(BinOp::Mul, da, b), bin(BinOp::Mul, a, db)),
                    BinOp::Div => bin(
                        BinOp::Div,
                        bin(BinOp::Sub, bin(BinOp::Mul, da, b.clone()), bin(BinOp::Mul, a, db)),
                        bin(BinOp::Pow, b, num(2.0)),
                    ),
                    BinOp::Pow => {
                        if b.uses(var) {
                            return Err(DiffError(format!("{self} with respect to {}: exponent depends on it", var.name())));
                        }
                        let reduced = bin(BinOp::Sub, b.clone(), num(1.0));
                        bin(BinOp::Mul, bin(BinOp::Mul, b, bin(BinOp::Pow, a, reduced)), da)
                    }
                }
            }
            Expr::Call(f, args) => match f {
                Func::Sin => bin(BinOp::Mul, Expr::Call(Func::Cos, args.clone()), args[0].derivative(var)?),
                Func::Cos => bin(BinOp::Mul, Expr::Neg(Box::new(Expr::Call(Func::Sin, args.clone()))), args[0].derivative(var)?),
                Func::Exp => bin(BinOp::Mul, self.clone(), args[0].derivative(var)?),
                Func::Min | Func::Max => {
                    let (da, db) = (args[0].derivative(var)?, args[1].derivative(var)?);
                    if da != db {
                        return Err(DiffError(format!("{self} with respect to {}: branches differ", var.name())));
                    }
                    da
                }
            },
        })
    }

    pub fn compile(&self, horizon: f64) -> Compiled {
        let e = self.bind_horizon(horizon);
        let mut code = Vec::new();
        let mut depth = 0usize;
        let mut max_depth = 0usize;
        emit(&e, &mut code, &mut depth, &mut max_depth);
        Compiled { constant: e.as_num(), code, max_depth }
    }
}

fn apply_func(f: Func, v: &[f64]) -> f64 {
    match f {
        Func::Sin => v[0].sin(),
        Func::Cos => v[0].cos(),
        Func::Exp => v[0].exp(),
        Func::Min => v[0].min(v[1]),
        Func::Max => v[0].max(v[1]),
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_expr(self, f, 0)
    }
}

/// Prints with the minimal parentheses for the grammar; the output
/// re-parses to the same tree.
fn write_expr(e: &Expr, f: &mut fmt::Formatter<'_>, ctx: u8) -> fmt::Result {
    match e {
        Expr::Num(v) => {
            if *v < 0.0 || (v.is_sign_negative() && *v == 0.0) {
                write!(f, "(-{})", fmt_num(-v))
            } else {
                write!(f, "{}", fmt_num(*v))
            }
        }
        Expr::Var(v) => write!(f, "{}", v.name()),
        Expr::Horizon => write!(f, "T"),
        Expr::Neg(inner) => {
            let paren = ctx > 3;
            if paren {
                write!(f, "(")?;
            }
            write!(f, "-")?;
            write_expr(inner, f, 3)?;
            if paren {
                write!(f, ")")?;
            }
            Ok(())
        }
        Expr::Bin(op, a, b) => {
            let p = op.precedence();
            let paren = p < ctx;
            if paren {
                write!(f, "(")?;
            }
            if *op == BinOp::Pow {
                write_expr(a, f, p + 1)?;
                write!(f, "^")?;
                write_expr(b, f, 3)?;
            } else {
                write_expr(a, f, p)?;
                write!(f, " {} ", op.symbol())?;
                write_expr(b, f, p + 1)?;
            }
            if paren {
                write!(f, ")")?;
            }
            Ok(())
        }
        Expr::Call(func, args) => {
            write!(f, "{}(", func.name())?;
            for (k, a) in args.iter().enumerate() {
                if k > 0 {
                    write!(f, ", ")?;
                }
                write_expr(a, f, 0)?;
            }
            write!(f, ")")
        }
    }
}

fn fmt_num(v: f64) -> String {
    if v.is_finite() {
        let s = format!("{v:?}");
        s.strip_suffix(".0").map(str::to_string).unwrap_or(s)
    } else if v.is_nan() {
        "(0/0)".into()
    } else {
        "(1/0)".into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Const(f64),
    Load(u8),
    Neg,
    Bin(BinOp),
    Square,
    Call(Func),
}

/// Stack-machine form of an expression with `T` bound.
#[derive(Debug, Clone, PartialEq)]
pub struct Compiled {
    constant: Option<f64>,
    code: Vec<Op>,
    max_depth: usize,
}

fn emit(e: &Expr, code: &mut Vec<Op>, depth: &mut usize, max_depth: &mut usize) {
    let mut push = |code: &mut Vec<Op>, op: Op, delta: isize| {
        code.push(op);
        *depth = (*depth as isize + delta) as usize;
        *max_depth = (*max_depth).max(*depth);
    };
    match e {
        Expr::Num(v) => push(code, Op::Const(*v), 1),
        Expr::Horizon => unreachable!("horizon is bound before compilation"),
        Expr::Var(v) => push(code, Op::Load(v.slot() as u8), 1),
        Expr::Neg(a) => {
            emit(a, code, depth, max_depth);
            code.push(Op::Neg);
        }
        Expr::Bin(BinOp::Pow, a, b) if b.as_num() == Some(2.0) => {
            emit(a, code, depth, max_depth);
            code.push(Op::Square);
        }
        Expr::Bin(op, a, b) => {
            emit(a, code, depth, max_depth);
            emit(b, code, depth, max_depth);
            *depth -= 1;
            code.push(Op::Bin(*op));
        }
        Expr::Call(f, args) => {
            for a in args {
                emit(a, code, depth, max_depth);
            }
            *depth -= args.len() - 1;
            code.push(Op::Call(*f));
        }
    }
}

impl Compiled {
    /// Value if the expression is constant.
    pub fn constant(&self) -> Option<f64> {
        self.constant
    }

    /// Evaluates with `vars` indexed by [`Var::slot`].
    #[inline]
    pub fn eval(&self, vars: &[f64; 8]) -> f64 {
        if let Some(c) = self.constant {
            return c;
        }
        if self.max_depth <= 16 {
            let mut stack = [0.0f64; 16];
            self.run(vars, &mut stack)
        } else {
            let mut stack = vec![0.0f64; self.max_depth];
            self.run(vars, &mut stack)
        }
    }

    #[inline]
    fn run(&self, vars: &[f64; 8], stack: &mut [f64]) -> f64 {
        let mut sp = 0usize;
        for op in &self.code {
            match *op {
                Op::Const(c) => {
                    stack[sp] = c;
                    sp += 1;
                }
                Op::Load(k) => {
                    stack[sp] = vars[k as usize];
                    sp += 1;
                }
                Op::Neg => stack[sp - 1] = -stack[sp - 1],
                Op::Square => stack[sp - 1] *= stack[sp - 1],
                Op::Bin(b) => {
                    sp -= 1;
                    stack[sp - 1] = b.apply(stack[sp - 1], stack[sp]);
                }
                Op::Call(f) => {
                    if f.arity() == 2 {
                        sp -= 1;
                        stack[sp - 1] = apply_func(f, &stack[sp - 1..sp + 1]);
                    } else {
                        stack[sp - 1] = apply_func(f, &stack[sp - 1..sp]);
                    }
                }
            }
        }
        stack[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(text: &str, vars: [f64; 8]) -> f64 {
        parse(text).unwrap().compile(2.0).eval(&vars)
    }

    #[test]
    fn precedence_and_associativity() {
        let v = [0.0; 8];
        assert_eq!(eval("1 + 2 * 3", v), 7.0);
        assert_eq!(eval("2 ^ 3 ^ 2", v), 512.0);
        assert_eq!(eval("-2 ^ 2", v), -4.0);
        assert_eq!(eval("(1 - 2) - 3", v), -4.0);
        assert_eq!(eval("8 / 4 / 2", v), 1.0);
        assert_eq!(eval("T * 1.5e1", v), 30.0);
        assert_eq!(eval("max(1, min(3, 2))", v), 2.0);
        assert_eq!(eval(".5 + 1e-1", v), 0.6);
    }

    #[test]
    fn variables_take_their_slots() {
        let mut v = [0.0; 8];
        for (k, var) in Var::ALL.iter().enumerate() {
            v[k] = (k + 1) as f64;
            assert_eq!(eval(var.name(), v), (k + 1) as f64);
        }
        assert_eq!(eval("s*x + sin(u) - exp(a) / v", v), 1.0 * 3.0 + 6f64.sin() - 8f64.exp() / 7.0);
    }

    #[test]
    fn errors_carry_positions() {
        let e = parse("1 + * 2").unwrap_err();
        assert_eq!(e.position, 4);
        let e = parse("sin(x").unwrap_err();
        assert_eq!(e.position, 5);
        let e = parse("x + w").unwrap_err();
        assert_eq!((e.position, e.message.as_str()), (4, "unknown name 'w'"));
        assert!(parse("min(1)").is_err());
        assert!(parse("1 2").is_err());
        assert!(parse("").is_err());
    }

    #[test]
    fn display_round_trips() {
        for text in ["1 - (2 - x)", "-x^2", "(-x)^2", "x^(y^2)", "(x^y)^2", "sin(x + 1) * cos(-y)", "-(s - t) * 0.5", "1 / (2 * u)", "-1.5e-7 * z", "x - -1"] {
            let e = parse(text).unwrap();
            let shown = e.to_string();
            assert_eq!(parse(&shown).unwrap(), e, "{text} -> {shown}");
        }
        assert_eq!(parse("u").unwrap().to_string(), "u");
        assert_eq!(parse("0.5*z+0.5*v").unwrap().to_string(), "0.5 * z + 0.5 * v");
    }

    #[test]
    fn simplification() {
        assert_eq!(parse("0 * x + 1 * y - 0").unwrap(), Expr::Var(Var::Y));
        assert_eq!(parse("2 * 3 + sin(0)").unwrap(), Expr::Num(6.0));
        assert_eq!(parse("x^1 + 0").unwrap(), Expr::Var(Var::X));
        assert_eq!(parse("T").unwrap().bind_horizon(0.25), Expr::Num(0.25));
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let cases = ["s*y + sin(s*x)", "exp(-y) / (1 + z^2)", "cos(u) * v^3 - s^2", "(s + y)^2.5", "max(x, 1) + z * y"];
        let mut vars = [0.3, 0.2, 0.7, 0.9, -0.4, 0.5, 1.1, 0.0];
        for text in cases {
            let e = parse(text).unwrap();
            for var in [Var::S, Var::Y, Var::Z, Var::U, Var::V] {
                let d = e.derivative(var).unwrap().compile(1.0);
                let c = e.compile(1.0);
                let h = 1e-6;
                let k = var.slot();
                let x0 = vars[k];
                vars[k] = x0 + h;
                let up = c.eval(&vars);
                vars[k] = x0 - h;
                let dn = c.eval(&vars);
                vars[k] = x0;
                let fd = (up - dn) / (2.0 * h);
                assert!((d.eval(&vars) - fd).abs() < 1e-6 * (1.0 + fd.abs()), "{text} d/d{}", var.name());
            }
        }
        assert!(parse("x^y").unwrap().derivative(Var::Y).is_err());
        assert!(parse("min(y, 2*y)").unwrap().derivative(Var::Y).is_err());
        assert_eq!(parse("u").unwrap().derivative(Var::Y).unwrap(), Expr::Num(0.0));
    }

    #[test]
    fn constants_are_detected() {
        assert_eq!(parse("2 * T").unwrap().compile(3.0).constant(), Some(6.0));
        assert_eq!(parse("x").unwrap().compile(3.0).constant(), None);
    }

    #[test]
    fn deep_expressions_use_a_heap_stack() {
        let text = (0..40).map(|_| "(1 + ").collect::<String>() + "x" + &")".repeat(40);
        let mut v = [0.0; 8];
        v[Var::X.slot()] = 2.0;
        assert_eq!(eval(&text, v), 42.0);
        let nested = (0..20).fold("x".to_string(), |acc, _| format!("x + ({acc}) * 1.0001"));
        assert!(eval(&nested, v).is_finite());
    }
}
