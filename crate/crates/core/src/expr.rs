//! Expression language shared by guards, conditions, source values,
//! eligibility criteria, rewards and output series.
//!
//! Evaluation is generic over an [`Env`] so the same evaluator serves the
//! engine (live world) and unit tests (hand-built environments).

use std::fmt;

use serde::Serialize;
use thiserror::Error;

/// Scalar runtime value.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum Value {
    Int(i64),
    Real(f64),
    Bool(bool),
    Text(String),
    Symbol(String),
}

impl Value {
    pub fn kind(&self) -> Type {
        match self {
            Value::Int(_) => Type::Int,
            Value::Real(_) => Type::Real,
            Value::Bool(_) => Type::Bool,
            Value::Text(_) => Type::Text,
            Value::Symbol(_) => Type::Symbol,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            Value::Int(v) => Some(v as f64),
            Value::Real(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match *self {
            Value::Bool(b) => Some(b),
            _ => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(v) => write!(f, "{v}"),
            Value::Real(v) => f.write_str(&format_real_literal(*v)),
            Value::Bool(b) => write!(f, "{b}"),
            Value::Text(s) => write_quoted(f, s),
            Value::Symbol(s) => write!(f, ":{s}"),
        }
    }
}

/// Static type of an expression.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Type {
    Int,
    Real,
    Bool,
    Text,
    Symbol,
}

impl Type {
    pub fn is_numeric(self) -> bool {
        matches!(self, Type::Int | Type::Real)
    }
}

impl fmt::Display for Type {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Type::Int => "integer",
            Type::Real => "real",
            Type::Bool => "boolean",
            Type::Text => "text",
            Type::Symbol => "identifier",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Not,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
    And,
    Or,
}

impl BinaryOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinaryOp::Add => "+",
            BinaryOp::Sub => "-",
            BinaryOp::Mul => "*",
            BinaryOp::Div => "/",
            BinaryOp::Lt => "<",
            BinaryOp::Le => "<=",
            BinaryOp::Gt => ">",
            BinaryOp::Ge => ">=",
            BinaryOp::Eq => "==",
            BinaryOp::Ne => "!=",
            BinaryOp::And => "and",
            BinaryOp::Or => "or",
        }
    }

    pub(crate) fn precedence(self) -> u8 {
        match self {
            BinaryOp::Or => 1,
            BinaryOp::And => 2,
            BinaryOp::Lt
            | BinaryOp::Le
            | BinaryOp::Gt
            | BinaryOp::Ge
            | BinaryOp::Eq
            | BinaryOp::Ne => 4,
            BinaryOp::Add | BinaryOp::Sub => 5,
            BinaryOp::Mul | BinaryOp::Div => 6,
        }
    }

    fn is_comparison(self) -> bool {
        self.precedence() == 4
    }
}

/// Expression tree.
///
/// `Attr` reads an attribute of the agent or entity the expression is
/// evaluated for; inside `Count`/`Sum` filters that is the population member.
#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Int(i64),
    Real(f64),
    Bool(bool),
    Text(String),
    Symbol(String),
    Tick,
    Attr(String),
    Ref { owner: String, attr: String },
    Unary { op: UnaryOp, expr: Box<Expr> },
    Binary { op: BinaryOp, lhs: Box<Expr>, rhs: Box<Expr> },
    Count { population: String, filter: Option<Box<Expr>> },
    Sum { population: String, value: Box<Expr>, filter: Option<Box<Expr>> },
    InState { machine: String, state: String },
    Deaths(String),
    EverInfected(String),
    Stopped,
    Queued,
    Arrivals,
}

/// Words that cannot be used as element or attribute names because the
/// expression grammar gives them meaning.
pub const RESERVED: &[&str] = &[
    "true",
    "false",
    "and",
    "or",
    "not",
    "tick",
    "self",
    "where",
    "count",
    "sum",
    "in_state",
    "deaths",
    "ever_infected",
    "stopped",
    "queued",
    "arrivals",
];

impl Expr {
    pub fn binary(op: BinaryOp, lhs: Expr, rhs: Expr) -> Expr {
        Expr::Binary { op, lhs: Box::new(lhs), rhs: Box::new(rhs) }
    }

    pub fn not(expr: Expr) -> Expr {
        Expr::Unary { op: UnaryOp::Not, expr: Box::new(expr) }
    }

    pub fn neg(expr: Expr) -> Expr {
        Expr::Unary { op: UnaryOp::Neg, expr: Box::new(expr) }
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Binary { op, .. } => op.precedence(),
            Expr::Unary { op: UnaryOp::Not, .. } => 3,
            Expr::Unary { op: UnaryOp::Neg, .. } => 7,
            Expr::Int(v) if *v < 0 => 7,
            Expr::Real(v) if v.is_sign_negative() => 7,
            _ => 8,
        }
    }

    /// True when the tree contains a population aggregate.
    pub fn has_aggregate(&self) -> bool {
        let mut found = false;
        self.visit(&mut |e| {
            if matches!(e, Expr::Count { .. } | Expr::Sum { .. }) {
                found = true;
            }
        });
        found
    }

    /// Pre-order traversal of every node, including aggregate bodies.
    pub fn visit(&self, f: &mut dyn FnMut(&Expr)) {
        f(self);
        match self {
            Expr::Unary { expr, .. } => expr.visit(f),
            Expr::Binary { lhs, rhs, .. } => {
                lhs.visit(f);
                rhs.visit(f);
            }
            Expr::Count { filter, .. } => {
                if let Some(filter) = filter {
                    filter.visit(f);
                }
            }
            Expr::Sum { value, filter, .. } => {
                value.visit(f);
                if let Some(filter) = filter {
                    filter.visit(f);
                }
            }
            _ => {}
        }
    }

    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, min: u8) -> fmt::Result {
        let wrap = self.precedence() < min;
        if wrap {
            f.write_str("(")?;
        }
        match self {
            Expr::Int(v) => write!(f, "{v}")?,
            Expr::Real(v) => f.write_str(&format_real_literal(*v))?,
            Expr::Bool(b) => write!(f, "{b}")?,
            Expr::Text(s) => write_quoted(f, s)?,
            Expr::Symbol(s) => write!(f, ":{s}")?,
            Expr::Tick => f.write_str("tick")?,
            Expr::Attr(name) => f.write_str(name)?,
            Expr::Ref { owner, attr } => write!(f, "{owner}.{attr}")?,
            Expr::Unary { op: UnaryOp::Not, expr } => {
                f.write_str("not ")?;
                expr.fmt_prec(f, 3)?;
            }
            Expr::Unary { op: UnaryOp::Neg, expr } => {
                f.write_str("-")?;
                // `- -1` must not collapse into a literal on re-parse
                let inner_min = if matches!(**expr, Expr::Int(_) | Expr::Real(_)) { 9 } else { 7 };
                expr.fmt_prec(f, inner_min)?;
            }
            Expr::Binary { op, lhs, rhs } => {
                let p = op.precedence();
                let (lmin, rmin) = if op.is_comparison() { (p + 1, p + 1) } else { (p, p + 1) };
                lhs.fmt_prec(f, lmin)?;
                write!(f, " {} ", op.symbol())?;
                rhs.fmt_prec(f, rmin)?;
            }
            Expr::Count { population, filter } => {
                write!(f, "count({population}")?;
                if let Some(filter) = filter {
                    f.write_str(" where ")?;
                    filter.fmt_prec(f, 0)?;
                }
                f.write_str(")")?;
            }
            Expr::Sum { population, value, filter } => {
                write!(f, "sum({population}, ")?;
                value.fmt_prec(f, 0)?;
                if let Some(filter) = filter {
                    f.write_str(" where ")?;
                    filter.fmt_prec(f, 0)?;
                }
                f.write_str(")")?;
            }
            Expr::InState { machine, state } => write!(f, "in_state({machine}, {state})")?,
            Expr::Deaths(d) => write!(f, "deaths({d})")?,
            Expr::EverInfected(d) => write!(f, "ever_infected({d})")?,
            Expr::Stopped => f.write_str("stopped()")?,
            Expr::Queued => f.write_str("queued()")?,
            Expr::Arrivals => f.write_str("arrivals()")?,
        }
        if wrap {
            f.write_str(")")?;
        }
        Ok(())
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, 0)
    }
}

/// Formats a real so that it re-lexes as a real (always carries a `.`).
pub fn format_real_literal(v: f64) -> String {
    let s = format!("{v}");
    if s.contains('.') || s.contains("inf") || s.contains("NaN") {
        s
    } else {
        format!("{s}.0")
    }
}

fn write_quoted(f: &mut fmt::Formatter<'_>, s: &str) -> fmt::Result {
    f.write_str("\"")?;
    for c in s.chars() {
        match c {
            '"' => f.write_str("\\\"")?,
            '\\' => f.write_str("\\\\")?,
            '\n' => f.write_str("\\n")?,
            '\t' => f.write_str("\\t")?,
            c => write!(f, "{c}")?,
        }
    }
    f.write_str("\"")
}

#[derive(Clone, Debug, PartialEq, Error)]
pub enum EvalError {
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error("attribute reference `{0}` has no agent in scope")]
    NoSelf(String),
    #[error("unknown population `{0}`")]
    UnknownPopulation(String),
    #[error("unknown state machine `{0}`")]
    UnknownMachine(String),
    #[error("`{0}` is only defined for traffic signal controllers")]
    NotAController(String),
    #[error("type mismatch: {0}")]
    Type(String),
    #[error("division by zero")]
    DivisionByZero,
    #[error("integer overflow")]
    Overflow,
    #[error("{what} must be in [{lo}, {hi}], got {value}")]
    OutOfRange { what: &'static str, value: f64, lo: f64, hi: f64 },
}

/// Lookup surface the evaluator needs from its surroundings.
pub trait Env {
    fn tick(&self) -> u64;
    fn attr(&self, owner: Option<&str>, name: &str) -> Result<Value, EvalError>;
    fn in_state(&self, machine: &str, state: &str) -> Result<bool, EvalError>;
    /// Evaluates `f` once per population member with that member bound as self.
    fn for_each_member(
        &self,
        population: &str,
        f: &mut dyn FnMut(&dyn Env) -> Result<(), EvalError>,
    ) -> Result<(), EvalError>;
    fn deaths(&self, disease: &str) -> Result<i64, EvalError>;
    fn ever_infected(&self, disease: &str) -> Result<i64, EvalError>;
    fn stopped(&self) -> Result<i64, EvalError>;
    fn queued(&self) -> Result<i64, EvalError>;
    fn arrivals(&self) -> i64;
}

pub fn eval(expr: &Expr, env: &dyn Env) -> Result<Value, EvalError> {
    Ok(match expr {
        Expr::Int(v) => Value::Int(*v),
        Expr::Real(v) => Value::Real(*v),
        Expr::Bool(b) => Value::Bool(*b),
        Expr::Text(s) => Value::Text(s.clone()),
        Expr::Symbol(s) => Value::Symbol(s.clone()),
        Expr::Tick => Value::Int(env.tick() as i64),
        Expr::Attr(name) => env.attr(None, name)?,
        Expr::Ref { owner, attr } => env.attr(Some(owner), attr)?,
        Expr::Unary { op: UnaryOp::Neg, expr } => match eval(expr, env)? {
            Value::Int(v) => Value::Int(v.checked_neg().ok_or(EvalError::Overflow)?),
            Value::Real(v) => Value::Real(-v),
            other => return Err(EvalError::Type(format!("cannot negate {}", other.kind()))),
        },
        Expr::Unary { op: UnaryOp::Not, expr } => Value::Bool(!eval_bool(expr, env)?),
        Expr::Binary { op: BinaryOp::And, lhs, rhs } => {
            Value::Bool(eval_bool(lhs, env)? && eval_bool(rhs, env)?)
        }
        Expr::Binary { op: BinaryOp::Or, lhs, rhs } => {
            Value::Bool(eval_bool(lhs, env)? || eval_bool(rhs, env)?)
        }
        Expr::Binary { op, lhs, rhs } => binary(*op, eval(lhs, env)?, eval(rhs, env)?)?,
        Expr::Count { population, filter } => {
            let mut n = 0i64;
            env.for_each_member(population, &mut |member| {
                let keep = match filter {
                    Some(filter) => eval_bool(filter, member)?,
                    None => true,
                };
                if keep {
                    n += 1;
                }
                Ok(())
            })?;
            Value::Int(n)
        }
        Expr::Sum { population, value, filter } => {
            let mut int_total = 0i64;
            let mut real_total = 0f64;
            let mut any_real = false;
            env.for_each_member(population, &mut |member| {
                if let Some(filter) = filter {
                    if !eval_bool(filter, member)? {
                        return Ok(());
                    }
                }
                match eval(value, member)? {
                    Value::Int(v) => {
                        int_total = int_total.checked_add(v).ok_or(EvalError::Overflow)?
                    }
                    Value::Real(v) => {
                        any_real = true;
                        real_total += v;
                    }
                    other => {
                        return Err(EvalError::Type(format!("cannot sum {}", other.kind())))
                    }
                }
                Ok(())
            })?;
            if any_real {
                Value::Real(real_total + int_total as f64)
            } else {
                Value::Int(int_total)
            }
        }
        Expr::InState { machine, state } => Value::Bool(env.in_state(machine, state)?),
        Expr::Deaths(d) => Value::Int(env.deaths(d)?),
        Expr::EverInfected(d) => Value::Int(env.ever_infected(d)?),
        Expr::Stopped => Value::Int(env.stopped()?),
        Expr::Queued => Value::Int(env.queued()?),
        Expr::Arrivals => Value::Int(env.arrivals()),
    })
}

pub fn eval_bool(expr: &Expr, env: &dyn Env) -> Result<bool, EvalError> {
    match eval(expr, env)? {
        Value::Bool(b) => Ok(b),
        other => Err(EvalError::Type(format!("expected boolean, got {}", other.kind()))),
    }
}

pub fn eval_number(expr: &Expr, env: &dyn Env) -> Result<f64, EvalError> {
    let v = eval(expr, env)?;
    v.as_f64()
        .ok_or_else(|| EvalError::Type(format!("expected number, got {}", v.kind())))
}

fn binary(op: BinaryOp, lhs: Value, rhs: Value) -> Result<Value, EvalError> {
    use BinaryOp::*;
    match op {
        Eq | Ne => {
            let equal = match (&lhs, &rhs) {
                (Value::Int(a), Value::Int(b)) => a == b,
                _ => match (lhs.as_f64(), rhs.as_f64()) {
                    (Some(a), Some(b)) => a == b,
                    _ if lhs.kind() == rhs.kind() => lhs == rhs,
                    _ => {
                        return Err(EvalError::Type(format!(
                            "cannot compare {} with {}",
                            lhs.kind(),
                            rhs.kind()
                        )))
                    }
                },
            };
            Ok(Value::Bool(if op == Eq { equal } else { !equal }))
        }
        Lt | Le | Gt | Ge => {
            let (a, b) = numeric_pair(&lhs, &rhs, op)?;
            Ok(Value::Bool(match op {
                Lt => a < b,
                Le => a <= b,
                Gt => a > b,
                _ => a >= b,
            }))
        }
        Add | Sub | Mul => {
            if let (Value::Int(a), Value::Int(b)) = (&lhs, &rhs) {
                let r = match op {
                    Add => a.checked_add(*b),
                    Sub => a.checked_sub(*b),
                    _ => a.checked_mul(*b),
                };
                return r.map(Value::Int).ok_or(EvalError::Overflow);
            }
            let (a, b) = numeric_pair(&lhs, &rhs, op)?;
            Ok(Value::Real(match op {
                Add => a + b,
                Sub => a - b,
                _ => a * b,
            }))
        }
        Div => {
            let (a, b) = numeric_pair(&lhs, &rhs, op)?;
            if b == 0.0 {
                return Err(EvalError::DivisionByZero);
            }
            Ok(Value::Real(a / b))
        }
        And | Or => unreachable!("short-circuit operators are handled by eval"),
    }
}

fn numeric_pair(lhs: &Value, rhs: &Value, op: BinaryOp) -> Result<(f64, f64), EvalError> {
    match (lhs.as_f64(), rhs.as_f64()) {
        (Some(a), Some(b)) => Ok((a, b)),
        _ => Err(EvalError::Type(format!(
            "operator `{}` needs numbers, got {} and {}",
            op.symbol(),
            lhs.kind(),
            rhs.kind()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed;

    impl Env for Fixed {
        fn tick(&self) -> u64 {
            7
        }
        fn attr(&self, _owner: Option<&str>, name: &str) -> Result<Value, EvalError> {
            match name {
                "energy" => Ok(Value::Int(5)),
                "weight" => Ok(Value::Real(2.5)),
                _ => Err(EvalError::UnknownAttribute(name.into())),
            }
        }
        fn in_state(&self, _machine: &str, state: &str) -> Result<bool, EvalError> {
            Ok(state == "I")
        }
        fn for_each_member(
            &self,
            _population: &str,
            f: &mut dyn FnMut(&dyn Env) -> Result<(), EvalError>,
        ) -> Result<(), EvalError> {
            for _ in 0..3 {
                f(self)?;
            }
            Ok(())
        }
        fn deaths(&self, _disease: &str) -> Result<i64, EvalError> {
            Ok(2)
        }
        fn ever_infected(&self, _disease: &str) -> Result<i64, EvalError> {
            Ok(9)
        }
        fn stopped(&self) -> Result<i64, EvalError> {
            Ok(0)
        }
        fn queued(&self) -> Result<i64, EvalError> {
            Ok(0)
        }
        fn arrivals(&self) -> i64 {
            0
        }
    }

    #[test]
    fn arithmetic_promotes_to_real() {
        let e = Expr::binary(BinaryOp::Add, Expr::Attr("energy".into()), Expr::Attr("weight".into()));
        assert_eq!(eval(&e, &Fixed).unwrap(), Value::Real(7.5));
        let d = Expr::binary(BinaryOp::Div, Expr::Int(3), Expr::Int(2));
        assert_eq!(eval(&d, &Fixed).unwrap(), Value::Real(1.5));
    }

    #[test]
    fn division_by_zero_is_an_error() {
        let d = Expr::binary(BinaryOp::Div, Expr::Int(3), Expr::Int(0));
        assert_eq!(eval(&d, &Fixed), Err(EvalError::DivisionByZero));
    }

    #[test]
    fn aggregates_fold_over_members() {
        let c = Expr::Count {
            population: "X".into(),
            filter: Some(Box::new(Expr::InState { machine: "M".into(), state: "I".into() })),
        };
        assert_eq!(eval(&c, &Fixed).unwrap(), Value::Int(3));
        let s = Expr::Sum { population: "X".into(), value: Box::new(Expr::Attr("weight".into())), filter: None };
        assert_eq!(eval(&s, &Fixed).unwrap(), Value::Real(7.5));
    }

    #[test]
    fn display_inserts_only_needed_parentheses() {
        let e = Expr::binary(
            BinaryOp::Sub,
            Expr::Int(1),
            Expr::binary(BinaryOp::Sub, Expr::Int(2), Expr::Int(3)),
        );
        assert_eq!(e.to_string(), "1 - (2 - 3)");
        let e = Expr::binary(
            BinaryOp::Mul,
            Expr::binary(BinaryOp::Add, Expr::Int(1), Expr::Int(2)),
            Expr::Int(3),
        );
        assert_eq!(e.to_string(), "(1 + 2) * 3");
        let e = Expr::not(Expr::binary(BinaryOp::Le, Expr::Attr("energy".into()), Expr::Int(0)));
        assert_eq!(e.to_string(), "not energy <= 0");
        assert_eq!(Expr::Real(10.0).to_string(), "10.0");
    }

    #[test]
    fn mixed_equality() {
        let e = Expr::binary(BinaryOp::Eq, Expr::Int(2), Expr::Real(2.0));
        assert_eq!(eval(&e, &Fixed).unwrap(), Value::Bool(true));
        let e = Expr::binary(BinaryOp::Eq, Expr::Symbol("a".into()), Expr::Int(1));
        assert!(eval(&e, &Fixed).is_err());
    }
}
