//! Expression environments over a world.

use rand::Rng;

use crate::disease::{attempt_transmission, Candidate};
use crate::expr::{eval, eval_bool, eval_number, EvalError, Env, Expr, Value};
use crate::metamodel::SourceValue;
use crate::statemachine::{check_probability, StepContext};
use crate::traffic::stopped_vehicles;

use super::{Instance, World};

/// Evaluation scope: the world plus the instance bound as `self`, if any.
#[derive(Clone, Copy)]
pub(crate) struct Scope<'w> {
    pub world: &'w World,
    pub subject: Option<&'w Instance>,
}

impl<'w> Scope<'w> {
    pub fn global(world: &'w World) -> Self {
        Scope { world, subject: None }
    }

    pub fn of(world: &'w World, subject: &'w Instance) -> Self {
        Scope { world, subject: Some(subject) }
    }

    fn subject(&self, what: &str) -> Result<&'w Instance, EvalError> {
        self.subject.ok_or_else(|| EvalError::NoSelf(what.to_string()))
    }
}

impl Env for Scope<'_> {
    fn tick(&self) -> u64 {
        self.world.tick
    }

    fn attr(&self, owner: Option<&str>, name: &str) -> Result<Value, EvalError> {
        let who = self.subject(name)?;
        let ty = &self.world.types[who.type_id];
        if let Some(owner) = owner {
            if owner != "self" && owner != ty.name {
                return Err(EvalError::UnknownAttribute(format!("{owner}.{name} on a {}", ty.name)));
            }
        }
        let i = ty.attr_index(name).ok_or_else(|| EvalError::UnknownAttribute(name.to_string()))?;
        Ok(who.attrs[i].clone())
    }

    fn in_state(&self, machine: &str, state: &str) -> Result<bool, EvalError> {
        let who = self.subject(machine)?;
        Ok(self.world.state_name(who, machine).is_some_and(|s| s == state))
    }

    fn for_each_member(
        &self,
        population: &str,
        f: &mut dyn FnMut(&dyn Env) -> Result<(), EvalError>,
    ) -> Result<(), EvalError> {
        let t = self
            .world
            .type_id(population)
            .ok_or_else(|| EvalError::UnknownPopulation(population.to_string()))?;
        let members = if self.world.types[t].is_agent { &self.world.agents } else { &self.world.entities };
        for m in members.iter().filter(|m| m.type_id == t) {
            f(&Scope::of(self.world, m))?;
        }
        Ok(())
    }

    fn deaths(&self, disease: &str) -> Result<i64, EvalError> {
        Ok(self.world.counters.deaths.get(disease).copied().unwrap_or(0) as i64)
    }

    fn ever_infected(&self, disease: &str) -> Result<i64, EvalError> {
        Ok(self.world.counters.ever_infected.get(disease).copied().unwrap_or(0) as i64)
    }

    fn stopped(&self) -> Result<i64, EvalError> {
        let c = self.controller("stopped()")?;
        Ok(stopped_vehicles(&c.queue_lengths(), &c.green(self.world)) as i64)
    }

    fn queued(&self) -> Result<i64, EvalError> {
        let c = self.controller("queued()")?;
        Ok(c.queue_lengths().iter().sum::<usize>() as i64)
    }

    fn arrivals(&self) -> i64 {
        self.world.counters.arrivals as i64
    }
}

impl<'w> Scope<'w> {
    fn controller(&self, what: &str) -> Result<&'w super::Controller, EvalError> {
        self.subject
            .and_then(|s| s.controller.as_ref())
            .ok_or_else(|| EvalError::NotAController(what.to_string()))
    }

    pub fn number(&self, e: &Expr) -> Result<f64, EvalError> {
        eval_number(e, self)
    }

    pub fn value(&self, e: &Expr) -> Result<Value, EvalError> {
        eval(e, self)
    }
}

/// Machine stepping context for one agent. `disease` selects the disease
/// whose interaction trigger is being resolved.
pub(crate) struct AgentStep<'w> {
    pub scope: Scope<'w>,
    pub disease: Option<usize>,
}

impl StepContext for AgentStep<'_> {
    fn number(&mut self, value: &SourceValue) -> Result<f64, EvalError> {
        match value {
            SourceValue::Literal(v) => {
                v.as_f64().ok_or_else(|| EvalError::Type(format!("{v} is not a number")))
            }
            other => eval_number(&other.to_expr(), &self.scope),
        }
    }

    fn condition(&mut self, expr: &Expr) -> Result<bool, EvalError> {
        eval_bool(expr, &self.scope)
    }

    fn interact<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<bool, EvalError> {
        let Some(d) = self.disease else { return Ok(false) };
        let world = self.scope.world;
        let me = self.scope.subject(&world.diseases[d].name)?;
        let disease = &world.diseases[d];
        let spec = &disease.transmission;
        let p = check_probability("transmission probability", self.number(&spec.probability)?)?;
        let radius = spec.interaction.distance();
        let mut candidates = Vec::new();
        for other in &world.agents {
            if other.id == me.id {
                continue;
            }
            let Some(slot) = world.types[other.type_id].diseases.iter().position(|&x| x == d) else {
                continue;
            };
            let distance = world.space.distance(me.pos, other.pos);
            if distance <= radius {
                let state = other.diseases[slot].current;
                candidates.push(Candidate { id: other.id, distance, infectious: disease.infectious[state] });
            }
        }
        for entity in &world.entities {
            if !disease.entity_sources.contains(&entity.type_id) {
                continue;
            }
            let distance = world.space.distance(me.pos, entity.pos);
            if distance > radius {
                continue;
            }
            let infectious = match &spec.condition {
                Some(c) => eval_bool(c, &Scope::of(world, entity))?,
                None => true,
            };
            candidates.push(Candidate { id: entity.id, distance, infectious });
        }
        Ok(attempt_transmission(&candidates, spec, p, rng))
    }
}
