use crate::disease::disease_graph;
use crate::expr::{BinaryOp, Expr, Type, UnaryOp};
use crate::statemachine::DEAD;

use super::Model;

/// Where an expression is evaluated.
#[derive(Clone, Debug)]
pub struct TypeScope<'a> {
    pub model: &'a Model,
    /// Types the bound agent or entity may have; empty when nothing is bound.
    pub self_types: Vec<&'a str>,
    /// Whether population aggregates are permitted.
    pub aggregates: bool,
}

impl<'a> TypeScope<'a> {
    pub fn new(model: &'a Model, self_types: Vec<&'a str>, aggregates: bool) -> Self {
        TypeScope { model, self_types, aggregates }
    }

    fn member(&self, population: &'a str) -> TypeScope<'a> {
        TypeScope { model: self.model, self_types: vec![population], aggregates: true }
    }

    fn attribute(&self, name: &str) -> Result<Type, String> {
        if self.self_types.is_empty() {
            return Err(format!("attribute `{name}` referenced outside an agent context"));
        }
        let mut found: Option<Type> = None;
        for t in &self.self_types {
            let attrs = self.model.attributes_of(t).unwrap_or(&[]);
            let Some(a) = attrs.iter().find(|a| a.name == name) else {
                return Err(format!("type `{t}` has no attribute `{name}`"));
            };
            let ty = a.kind.value_type();
            match found {
                Some(prev) if prev != ty => {
                    return Err(format!("attribute `{name}` has different kinds across types"))
                }
                _ => found = Some(ty),
            }
        }
        Ok(found.expect("self_types is non-empty"))
    }

    fn is_controller_scope(&self) -> bool {
        !self.self_types.is_empty()
            && self
                .self_types
                .iter()
                .all(|t| self.model.agent(t).is_some_and(|a| a.flow_control().is_some()))
    }
}

/// Static type of `expr` in `scope`, or a description of the first error.
pub fn type_of(expr: &Expr, scope: &TypeScope<'_>) -> Result<Type, String> {
    Ok(match expr {
        Expr::Int(_) | Expr::Tick => Type::Int,
        Expr::Real(_) => Type::Real,
        Expr::Bool(_) => Type::Bool,
        Expr::Text(_) => Type::Text,
        Expr::Symbol(_) => Type::Symbol,
        Expr::Attr(name) => scope.attribute(name)?,
        Expr::Ref { owner, attr } => {
            if owner != "self" {
                if scope.model.attributes_of(owner).is_none() {
                    return Err(format!("unknown type `{owner}`"));
                }
                if scope.self_types != [owner.as_str()] {
                    return Err(format!(
                        "`{owner}.{attr}` is evaluated for agents that are not all `{owner}`"
                    ));
                }
            }
            scope.attribute(attr)?
        }
        Expr::Unary { op: UnaryOp::Neg, expr } => {
            let t = type_of(expr, scope)?;
            if !t.is_numeric() {
                return Err(format!("cannot negate {t}"));
            }
            t
        }
        Expr::Unary { op: UnaryOp::Not, expr } => {
            expect(expr, scope, Type::Bool, "operand of `not`")?;
            Type::Bool
        }
        Expr::Binary { op, lhs, rhs } => {
            let l = type_of(lhs, scope)?;
            let r = type_of(rhs, scope)?;
            match op {
                BinaryOp::And | BinaryOp::Or => {
                    if l != Type::Bool || r != Type::Bool {
                        return Err(format!("`{}` needs booleans, got {l} and {r}", op.symbol()));
                    }
                    Type::Bool
                }
                BinaryOp::Eq | BinaryOp::Ne => {
                    if !(l == r || (l.is_numeric() && r.is_numeric())) {
                        return Err(format!("cannot compare {l} with {r}"));
                    }
                    Type::Bool
                }
                BinaryOp::Lt | BinaryOp::Le | BinaryOp::Gt | BinaryOp::Ge => {
                    numeric_operands(*op, l, r)?;
                    Type::Bool
                }
                BinaryOp::Div => {
                    numeric_operands(*op, l, r)?;
                    Type::Real
                }
                BinaryOp::Add | BinaryOp::Sub | BinaryOp::Mul => {
                    numeric_operands(*op, l, r)?;
                    if l == Type::Int && r == Type::Int {
                        Type::Int
                    } else {
                        Type::Real
                    }
                }
            }
        }
        Expr::Count { population, filter } => {
            population_scope(scope, population)?;
            if let Some(f) = filter {
                expect(f, &scope.member(population), Type::Bool, "filter")?;
            }
            Type::Int
        }
        Expr::Sum { population, value, filter } => {
            population_scope(scope, population)?;
            let member = scope.member(population);
            let t = type_of(value, &member)?;
            if !t.is_numeric() {
                return Err(format!("cannot sum {t}"));
            }
            if let Some(f) = filter {
                expect(f, &member, Type::Bool, "filter")?;
            }
            t
        }
        Expr::InState { machine, state } => {
            let states = machine_states(scope.model, machine)
                .ok_or_else(|| format!("unknown state machine `{machine}`"))?;
            if !states.iter().any(|s| s == state) {
                return Err(format!("`{machine}` has no state `{state}`"));
            }
            Type::Bool
        }
        Expr::Deaths(d) | Expr::EverInfected(d) => {
            if scope.model.disease(d).is_none() {
                return Err(format!("unknown disease `{d}`"));
            }
            Type::Int
        }
        Expr::Stopped | Expr::Queued => {
            if !scope.is_controller_scope() {
                return Err(format!("`{expr}` is only defined for flow-control agents"));
            }
            Type::Int
        }
        Expr::Arrivals => Type::Int,
    })
}

fn expect(expr: &Expr, scope: &TypeScope<'_>, want: Type, what: &str) -> Result<(), String> {
    let t = type_of(expr, scope)?;
    if t != want {
        return Err(format!("{what} must be {want}, got {t}"));
    }
    Ok(())
}

fn numeric_operands(op: BinaryOp, l: Type, r: Type) -> Result<(), String> {
    if l.is_numeric() && r.is_numeric() {
        Ok(())
    } else {
        Err(format!("`{}` needs numbers, got {l} and {r}", op.symbol()))
    }
}

fn population_scope(scope: &TypeScope<'_>, population: &str) -> Result<(), String> {
    if !scope.aggregates {
        return Err("aggregates are not allowed here".into());
    }
    if scope.model.attributes_of(population).is_none() {
        return Err(format!("unknown population `{population}`"));
    }
    Ok(())
}

/// States an `in_state` test may name for a machine, plan or disease.
pub(crate) fn machine_states(model: &Model, name: &str) -> Option<Vec<String>> {
    if let Some(m) = model.machine(name) {
        return Some(m.states.clone());
    }
    if let Some(p) = model.plan(name) {
        return Some(p.phases.iter().map(|p| p.name.clone()).collect());
    }
    model.disease(name).map(|d| {
        let mut states = disease_graph(d).states;
        states.push(DEAD.to_string());
        states
    })
}
