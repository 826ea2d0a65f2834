use std::collections::BTreeSet;

use serde::Serialize;
use thiserror::Error;

use crate::expr::Expr;

use super::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementKind {
    Agent,
    Entity,
    Disease,
    StateMachine,
    Plan,
    Output,
    /// A capability of an agent type; named `Agent/keyword`.
    Capability,
    /// A provided value; named `Owner/role`.
    Source,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct ElementRef {
    pub kind: ElementKind,
    pub name: String,
}

impl ElementRef {
    pub fn new(kind: ElementKind, name: impl Into<String>) -> Self {
        ElementRef { kind, name: name.into() }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConcernError {
    #[error("unknown concern `{0}`")]
    Unknown(String),
}

/// Read-only view of the elements a concern reaches.
#[derive(Clone, Debug)]
pub struct ConcernView<'a> {
    pub model: &'a Model,
    pub name: String,
    elements: BTreeSet<ElementRef>,
}

impl<'a> ConcernView<'a> {
    pub fn contains(&self, kind: ElementKind, name: &str) -> bool {
        self.elements.contains(&ElementRef::new(kind, name))
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ElementRef> {
        self.elements.iter()
    }

    pub fn names(&self, kind: ElementKind) -> Vec<&str> {
        self.elements.iter().filter(|e| e.kind == kind).map(|e| e.name.as_str()).collect()
    }
}

/// Members of `concern` plus everything reachable from them.
pub fn resolve_concern<'a>(model: &'a Model, concern: &str) -> Result<ConcernView<'a>, ConcernError> {
    let c = model
        .concerns()
        .find(|c| c.name == concern)
        .ok_or_else(|| ConcernError::Unknown(concern.to_string()))?;
    let mut closure = Closure { model, seen: BTreeSet::new() };
    for m in &c.members {
        for r in lookup(model, m) {
            closure.visit(r);
        }
    }
    Ok(ConcernView { model, name: c.name.clone(), elements: closure.seen })
}

/// Elements a concern member name may denote.
pub(crate) fn lookup(model: &Model, name: &str) -> Vec<ElementRef> {
    let mut refs = Vec::new();
    if model.agent(name).is_some() {
        refs.push(ElementRef::new(ElementKind::Agent, name));
    }
    if model.entity(name).is_some() {
        refs.push(ElementRef::new(ElementKind::Entity, name));
    }
    if model.disease(name).is_some() {
        refs.push(ElementRef::new(ElementKind::Disease, name));
    }
    if model.machine(name).is_some() {
        refs.push(ElementRef::new(ElementKind::StateMachine, name));
    }
    if model.plan(name).is_some() {
        refs.push(ElementRef::new(ElementKind::Plan, name));
    }
    if model.outputs().any(|o| o.name == name) {
        refs.push(ElementRef::new(ElementKind::Output, name));
    }
    refs
}

struct Closure<'a> {
    model: &'a Model,
    seen: BTreeSet<ElementRef>,
}

impl Closure<'_> {
    fn visit(&mut self, r: ElementRef) {
        if !self.seen.insert(r.clone()) {
            return;
        }
        let model = self.model;
        match r.kind {
            ElementKind::Agent => {
                let Some(a) = model.agent(&r.name) else { return };
                self.attributes(&a.attributes);
                for cap in &a.capabilities {
                    self.visit(ElementRef::new(ElementKind::Capability, format!("{}/{}", a.name, cap.kind.keyword())));
                    match &cap.kind {
                        Capability::Disease { disease } => self.visit(ElementRef::new(ElementKind::Disease, disease)),
                        Capability::StateMachine { machine } => {
                            for r in lookup(model, machine) {
                                self.visit(r);
                            }
                        }
                        Capability::QLearning(q) => {
                            for p in &q.plans {
                                self.visit(ElementRef::new(ElementKind::Plan, p));
                            }
                            if let Some(e) = &q.reward {
                                self.source(&a.name, "reward", e);
                            }
                        }
                        _ => {}
                    }
                }
            }
            ElementKind::Entity => {
                if let Some(e) = model.entity(&r.name) {
                    self.attributes(&e.attributes);
                }
            }
            ElementKind::Disease => {
                let Some(d) = model.disease(&r.name) else { return };
                // the disease is itself a state machine
                self.seen.insert(ElementRef::new(ElementKind::StateMachine, &d.name));
                if let Some(t) = &d.transmission {
                    self.source(&d.name, "transmission.probability", &t.probability.to_expr());
                    if let Some(c) = &t.condition {
                        self.source(&d.name, "transmission.condition", c);
                    }
                    for e in &t.entity_sources {
                        self.visit(ElementRef::new(ElementKind::Entity, e));
                    }
                }
                for dur in &d.durations {
                    self.trigger(&d.name, &format!("duration.{}", dur.compartment), &dur.trigger);
                }
                if let Some(t) = &d.passive_immunity {
                    self.trigger(&d.name, "immunity.passive", t);
                }
                if let Some(t) = &d.recovered_immunity {
                    self.trigger(&d.name, "immunity.recovered", t);
                }
                for (i, m) in d.mortality.iter().enumerate() {
                    self.source(&d.name, &format!("mortality.{i}.rate"), &m.rate.to_expr());
                    if let DeathRateEvaluation::WhenCondition(e) = &m.evaluation {
                        self.source(&d.name, &format!("mortality.{i}.condition"), e);
                    }
                }
            }
            ElementKind::StateMachine => {
                let Some(m) = model.machine(&r.name) else { return };
                for (i, t) in m.transitions.iter().enumerate() {
                    self.trigger(&m.name, &format!("transition.{i}"), &t.trigger);
                    if let Some(g) = &t.guard {
                        self.source(&m.name, &format!("transition.{i}.guard"), g);
                    }
                    if let Some(a) = &t.abortion {
                        self.source(&m.name, &format!("transition.{i}.abort"), &a.probability.to_expr());
                    }
                }
            }
            ElementKind::Plan => {
                // realized as a cyclic state machine of the same name
                self.seen.insert(ElementRef::new(ElementKind::StateMachine, &r.name));
            }
            ElementKind::Output => {
                let Some(o) = model.outputs().find(|o| o.name == r.name) else { return };
                for s in &o.series {
                    self.references(&s.expr);
                }
            }
            ElementKind::Capability | ElementKind::Source => {}
        }
    }

    fn attributes(&mut self, attrs: &[AttributeSpec]) {
        for a in attrs {
            self.references(&a.default);
        }
    }

    fn trigger(&mut self, owner: &str, role: &str, t: &Trigger) {
        match t {
            Trigger::Probabilistic { rate } => self.source(owner, &format!("{role}.rate"), &rate.to_expr()),
            Trigger::Deterministic { ticks } => self.source(owner, &format!("{role}.ticks"), &ticks.to_expr()),
            Trigger::Conditional { condition } => self.source(owner, &format!("{role}.condition"), condition),
            Trigger::Custom { triggers, .. } => {
                for (i, t) in triggers.iter().enumerate() {
                    self.trigger(owner, &format!("{role}.{i}"), t);
                }
            }
            Trigger::Interaction => {}
        }
    }

    fn source(&mut self, owner: &str, role: &str, e: &Expr) {
        self.seen.insert(ElementRef::new(ElementKind::Source, format!("{owner}/{role}")));
        self.references(e);
    }

    /// Follows populations, machines and diseases named inside an expression.
    fn references(&mut self, e: &Expr) {
        let mut found = Vec::new();
        e.visit(&mut |n| match n {
            Expr::Count { population, .. } | Expr::Sum { population, .. } => found.push(population.clone()),
            Expr::InState { machine, .. } => found.push(machine.clone()),
            Expr::Deaths(d) | Expr::EverInfected(d) => found.push(d.clone()),
            Expr::Ref { owner, .. } if owner != "self" => found.push(owner.clone()),
            _ => {}
        });
        for name in found {
            for r in lookup(self.model, &name) {
                self.visit(r);
            }
        }
    }
}
