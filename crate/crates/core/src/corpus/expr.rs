use num_rational::Ratio;
use num_traits::{CheckedAdd, CheckedDiv, CheckedMul, CheckedSub, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::tokenize::{slot_index, slot_marker};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Operator {
    Add,
    Sub,
    Mul,
    Div,
}

impl Operator {
    pub const ALL: [Operator; 4] = [Operator::Add, Operator::Sub, Operator::Mul, Operator::Div];

    pub fn token(self) -> &'static str {
        match self {
            Operator::Add => "+",
            Operator::Sub => "-",
            Operator::Mul => "*",
            Operator::Div => "/",
        }
    }

    pub fn from_token(token: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|op| op.token() == token)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constant {
    pub token: String,
    pub value: f64,
}

/// The target-side vocabulary shared by every problem: operators V_O and
/// constants V_N. A problem's full output vocabulary adds its own slots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Symbols {
    pub operators: Vec<Operator>,
    pub constants: Vec<Constant>,
}

impl Default for Symbols {
    fn default() -> Self {
        Self {
            operators: Operator::ALL.to_vec(),
            constants: vec![
                Constant {
                    token: "1".into(),
                    value: 1.0,
                },
                Constant {
                    token: "pi".into(),
                    value: std::f64::consts::PI,
                },
            ],
        }
    }
}

impl Symbols {
    pub fn num_operators(&self) -> usize {
        self.operators.len()
    }

    pub fn operator_index(&self, op: Operator) -> Option<usize> {
        self.operators.iter().position(|&o| o == op)
    }

    pub fn constant_index(&self, token: &str) -> Option<usize> {
        self.constants.iter().position(|c| c.token == token)
    }

    pub fn is_symbol_token(&self, token: &str) -> bool {
        Operator::from_token(token).is_some() || self.constant_index(token).is_some()
    }

    pub fn symbol(&self, token: &str, num_slots: usize) -> Result<Symbol, ExprError> {
        if let Some(op) = Operator::from_token(token).filter(|op| self.operators.contains(op)) {
            return Ok(Symbol::Op(op));
        }
        if let Some(c) = self.constant_index(token) {
            return Ok(Symbol::Const(c));
        }
        if let Some(i) = slot_index(token) {
            return if i <= num_slots {
                Ok(Symbol::Slot(i))
            } else {
                Err(ExprError::SlotOutOfRange { slot: i, k: num_slots })
            };
        }
        Err(ExprError::UnknownSymbol(token.to_string()))
    }

    pub fn token(&self, symbol: Symbol) -> String {
        match symbol {
            Symbol::Op(op) => op.token().to_string(),
            Symbol::Const(c) => self.constants[c].token.clone(),
            Symbol::Slot(i) => slot_marker(i),
        }
    }
}

/// One output symbol: operator, constant (index into `Symbols::constants`),
/// or 1-based slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Symbol {
    Op(Operator),
    Const(usize),
    Slot(usize),
}

impl Symbol {
    /// Change in the number of pending operands after emitting this symbol.
    pub fn arity_delta(self) -> i64 {
        match self {
            Symbol::Op(_) => 1,
            _ => -1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Binary(Operator, Box<Expr>, Box<Expr>),
    Const(usize),
    Slot(usize),
}

impl Expr {
    pub fn to_prefix(&self, symbols: &Symbols) -> Vec<String> {
        let mut out = Vec::new();
        self.write_prefix(symbols, &mut out);
        out
    }

    fn write_prefix(&self, symbols: &Symbols, out: &mut Vec<String>) {
        match self {
            Expr::Binary(op, l, r) => {
                out.push(op.token().to_string());
                l.write_prefix(symbols, out);
                r.write_prefix(symbols, out);
            }
            Expr::Const(c) => out.push(symbols.token(Symbol::Const(*c))),
            Expr::Slot(i) => out.push(slot_marker(*i)),
        }
    }

    pub fn num_operators(&self) -> usize {
        match self {
            Expr::Binary(_, l, r) => 1 + l.num_operators() + r.num_operators(),
            _ => 0,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("empty expression")]
    Empty,
    #[error("operator at position {position} is missing an operand")]
    Underflow { position: usize },
    #[error("{count} leftover token(s) after a complete expression")]
    Leftover { count: usize },
    #[error("unknown symbol {0:?}")]
    UnknownSymbol(String),
    #[error("slot NUM{slot} referenced but the problem has {k} number(s)")]
    SlotOutOfRange { slot: usize, k: usize },
}

/// Parses a prefix token list over operators, constants and `NUM1..NUMk`.
pub fn parse_prefix<S: AsRef<str>>(tokens: &[S], k: usize, symbols: &Symbols) -> Result<Expr, ExprError> {
    if tokens.is_empty() {
        return Err(ExprError::Empty);
    }
    let syms = tokens
        .iter()
        .map(|t| symbols.symbol(t.as_ref(), k))
        .collect::<Result<Vec<_>, _>>()?;
    let mut pos = 0;
    let expr = parse_node(&syms, &mut pos)?;
    if pos < syms.len() {
        return Err(ExprError::Leftover {
            count: syms.len() - pos,
        });
    }
    Ok(expr)
}

fn parse_node(syms: &[Symbol], pos: &mut usize) -> Result<Expr, ExprError> {
    let here = *pos;
    let sym = *syms.get(here).ok_or(ExprError::Underflow {
        position: here.saturating_sub(1),
    })?;
    *pos += 1;
    match sym {
        Symbol::Op(op) => {
            let left = parse_node(syms, pos).map_err(|e| underflow_at(e, here))?;
            let right = parse_node(syms, pos).map_err(|e| underflow_at(e, here))?;
            Ok(Expr::Binary(op, Box::new(left), Box::new(right)))
        }
        Symbol::Const(c) => Ok(Expr::Const(c)),
        Symbol::Slot(i) => Ok(Expr::Slot(i)),
    }
}

// Reports the innermost operator that ran out of operands.
fn underflow_at(e: ExprError, position: usize) -> ExprError {
    match e {
        ExprError::Underflow { position: p } if p < position => ExprError::Underflow { position },
        other => other,
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("division by zero")]
    DivisionByZero,
    #[error("slot NUM{0} is not bound")]
    UnboundSlot(usize),
    #[error("non-finite intermediate value")]
    NonFinite,
}

#[derive(Clone, Copy, Debug)]
enum Num {
    Exact(Ratio<i128>),
    Float(f64),
}

impl Num {
    fn from_f64(v: f64) -> Num {
        exact_decimal(v).map_or(Num::Float(v), Num::Exact)
    }

    fn to_f64(self) -> f64 {
        match self {
            Num::Exact(r) => r.to_f64().unwrap_or(f64::NAN),
            Num::Float(f) => f,
        }
    }

    fn is_zero(self) -> bool {
        match self {
            Num::Exact(r) => r.is_zero(),
            Num::Float(f) => f == 0.0,
        }
    }
}

/// Exact rational for values whose shortest decimal form is short enough.
fn exact_decimal(v: f64) -> Option<Ratio<i128>> {
    if !v.is_finite() {
        return None;
    }
    let text = format!("{v}");
    let (neg, digits) = match text.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, text.as_str()),
    };
    let (int_part, frac_part) = digits.split_once('.').unwrap_or((digits, ""));
    if int_part.len() + frac_part.len() > 30 {
        return None;
    }
    let numer: i128 = format!("{int_part}{frac_part}").parse().ok()?;
    let denom = 10i128.checked_pow(frac_part.len() as u32)?;
    let r = Ratio::new(numer, denom);
    Some(if neg { -r } else { r })
}

fn apply(op: Operator, a: Num, b: Num) -> Result<Num, EvalError> {
    if op == Operator::Div && b.is_zero() {
        return Err(EvalError::DivisionByZero);
    }
    if let (Num::Exact(x), Num::Exact(y)) = (a, b) {
        let exact = match op {
            Operator::Add => x.checked_add(&y),
            Operator::Sub => x.checked_sub(&y),
            Operator::Mul => x.checked_mul(&y),
            Operator::Div => x.checked_div(&y),
        };
        if let Some(r) = exact {
            return Ok(Num::Exact(r));
        }
    }
    let (x, y) = (a.to_f64(), b.to_f64());
    let v = match op {
        Operator::Add => x + y,
        Operator::Sub => x - y,
        Operator::Mul => x * y,
        Operator::Div => x / y,
    };
    if v.is_finite() {
        Ok(Num::Float(v))
    } else {
        Err(EvalError::NonFinite)
    }
}

fn eval_node(expr: &Expr, values: &[f64], symbols: &Symbols) -> Result<Num, EvalError> {
    match expr {
        Expr::Binary(op, l, r) => {
            let a = eval_node(l, values, symbols)?;
            let b = eval_node(r, values, symbols)?;
            apply(*op, a, b)
        }
        Expr::Const(c) => {
            let v = symbols.constants[*c].value;
            Ok(if v.fract() == 0.0 && v.abs() < 1e15 {
                Num::Exact(Ratio::from_integer(v as i128))
            } else {
                Num::Float(v)
            })
        }
        Expr::Slot(i) => values
            .get(i.wrapping_sub(1))
            .map(|&v| Num::from_f64(v))
            .ok_or(EvalError::UnboundSlot(*i)),
    }
}

/// Evaluates left to right, exactly when every leaf is a short decimal or an
/// integer constant.
pub fn evaluate_expression(expr: &Expr, values: &[f64], symbols: &Symbols) -> Result<f64, EvalError> {
    let v = eval_node(expr, values, symbols)?.to_f64();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(EvalError::NonFinite)
    }
}

/// `|a − b| ≤ 1e-4 · max(1, |b|)`
pub fn answers_match(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-4 * 1f64.max(b.abs())
}
