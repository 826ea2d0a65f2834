//! Triggered state machines.
//!
//! A [`Machine`] is the resolved form of a [`StateMachineSpec`]: state names
//! become indices and each state keeps its outgoing transitions in
//! declaration order. Stepping is tick-synchronous: at most one transition
//! fires per step and the first one (in declaration order) whose guard holds
//! and whose trigger fires wins.

use rand::Rng;
use thiserror::Error;

use crate::expr::{EvalError, Expr};
use crate::metamodel::{Combinator, SourceValue, StateMachineSpec, Trigger};

/// Name of the absorbing pseudo-state used by disease machines.
pub const DEAD: &str = "Dead";

#[derive(Clone, Debug, PartialEq, Error)]
pub enum MachineError {
    #[error("machine `{machine}`: unknown state `{state}`")]
    UnknownState { machine: String, state: String },
    #[error("machine `{0}` has no states")]
    Empty(String),
}

#[derive(Clone, Debug, PartialEq, Error)]
#[error("{path}: {source}")]
pub struct StepError {
    pub path: String,
    #[source]
    pub source: EvalError,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompiledTransition {
    pub from: usize,
    pub to: usize,
    pub trigger: Trigger,
    pub guard: Option<Expr>,
    pub abortion: Option<(SourceValue, usize)>,
    /// Element path used in error messages.
    pub path: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Machine {
    pub name: String,
    pub states: Vec<String>,
    pub initial: usize,
    /// Index of the absorbing [`DEAD`] state, when present.
    pub dead: Option<usize>,
    pub transitions: Vec<CompiledTransition>,
    outgoing: Vec<Vec<usize>>,
}

/// Per-agent runtime state of a machine.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MachineInstance {
    pub current: usize,
    /// Completed ticks spent in `current`.
    pub dwell: u64,
    pub terminated: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransitionEvent {
    None,
    Moved { from: usize, to: usize },
    Aborted { from: usize, abort_to: usize },
}

impl TransitionEvent {
    /// State entered by this event, if any.
    pub fn entered(self) -> Option<usize> {
        match self {
            TransitionEvent::None => None,
            TransitionEvent::Moved { to, .. } => Some(to),
            TransitionEvent::Aborted { abort_to, .. } => Some(abort_to),
        }
    }
}

/// What a machine needs from its surroundings to evaluate triggers.
pub trait StepContext {
    fn number(&mut self, value: &SourceValue) -> Result<f64, EvalError>;
    fn condition(&mut self, expr: &Expr) -> Result<bool, EvalError>;
    /// Resolves an interaction (transmission) trigger.
    fn interact<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<bool, EvalError>;
}

/// Context for machines whose triggers use only literal values.
#[derive(Debug, Default)]
pub struct LiteralContext;

impl StepContext for LiteralContext {
    fn number(&mut self, value: &SourceValue) -> Result<f64, EvalError> {
        value
            .literal()
            .ok_or_else(|| EvalError::NoSelf(value.to_string()))
    }

    fn condition(&mut self, expr: &Expr) -> Result<bool, EvalError> {
        match expr {
            Expr::Bool(b) => Ok(*b),
            other => Err(EvalError::NoSelf(other.to_string())),
        }
    }

    fn interact<R: Rng + ?Sized>(&mut self, _rng: &mut R) -> Result<bool, EvalError> {
        Ok(false)
    }
}

pub fn bernoulli<R: Rng + ?Sized>(rng: &mut R, p: f64) -> bool {
    rng.random::<f64>() < p
}

pub(crate) fn check_probability(what: &'static str, p: f64) -> Result<f64, EvalError> {
    if (0.0..=1.0).contains(&p) {
        Ok(p)
    } else {
        Err(EvalError::OutOfRange { what, value: p, lo: 0.0, hi: 1.0 })
    }
}

impl Machine {
    pub fn from_spec(spec: &StateMachineSpec) -> Result<Machine, MachineError> {
        if spec.states.is_empty() {
            return Err(MachineError::Empty(spec.name.clone()));
        }
        let index = |state: &str| {
            spec.states.iter().position(|s| s == state).ok_or_else(|| {
                MachineError::UnknownState { machine: spec.name.clone(), state: state.to_string() }
            })
        };
        let initial = index(&spec.initial)?;
        let mut transitions = Vec::with_capacity(spec.transitions.len());
        for (i, t) in spec.transitions.iter().enumerate() {
            let abortion = match &t.abortion {
                Some(a) => Some((a.probability.clone(), index(&a.abort_to)?)),
                None => None,
            };
            transitions.push(CompiledTransition {
                from: index(&t.from)?,
                to: index(&t.to)?,
                trigger: t.trigger.clone(),
                guard: t.guard.clone(),
                abortion,
                path: format!("{}/transition {} {}->{}", spec.name, i, t.from, t.to),
            });
        }
        let mut outgoing = vec![Vec::new(); spec.states.len()];
        for (i, t) in transitions.iter().enumerate() {
            outgoing[t.from].push(i);
        }
        Ok(Machine {
            name: spec.name.clone(),
            states: spec.states.clone(),
            initial,
            dead: spec.states.iter().position(|s| s == DEAD),
            transitions,
            outgoing,
        })
    }

    pub fn state_index(&self, name: &str) -> Option<usize> {
        self.states.iter().position(|s| s == name)
    }

    pub fn outgoing(&self, state: usize) -> impl Iterator<Item = &CompiledTransition> {
        self.outgoing[state].iter().map(move |&i| &self.transitions[i])
    }

    pub fn instantiate(&self) -> MachineInstance {
        MachineInstance { current: self.initial, dwell: 0, terminated: false }
    }

    /// Advances `instance` by one tick.
    ///
    /// A deterministic trigger of `d` ticks fires on the step that completes
    /// the `d`-th tick in the state, so the state is occupied for exactly `d`
    /// ticks. When the fired transition carries an abortion clause a
    /// Bernoulli draw decides between the target and the abortion state.
    pub fn step<C: StepContext, R: Rng + ?Sized>(
        &self,
        instance: &mut MachineInstance,
        ctx: &mut C,
        rng: &mut R,
    ) -> Result<TransitionEvent, StepError> {
        debug_assert!(!instance.terminated, "stepped a terminated machine");
        if instance.terminated {
            return Ok(TransitionEvent::None);
        }
        let elapsed = instance.dwell + 1;
        for &ti in &self.outgoing[instance.current] {
            let t = &self.transitions[ti];
            let wrap = |source| StepError { path: t.path.clone(), source };
            if let Some(guard) = &t.guard {
                if !ctx.condition(guard).map_err(wrap)? {
                    continue;
                }
            }
            if !trigger_fires(&t.trigger, elapsed, ctx, rng).map_err(wrap)? {
                continue;
            }
            let from = instance.current;
            if let Some((probability, abort_to)) = &t.abortion {
                let p = ctx
                    .number(probability)
                    .and_then(|p| check_probability("abortion probability", p))
                    .map_err(wrap)?;
                if bernoulli(rng, p) {
                    self.enter(instance, *abort_to);
                    return Ok(TransitionEvent::Aborted { from, abort_to: *abort_to });
                }
            }
            self.enter(instance, t.to);
            return Ok(TransitionEvent::Moved { from, to: t.to });
        }
        instance.dwell = elapsed;
        Ok(TransitionEvent::None)
    }

    fn enter(&self, instance: &mut MachineInstance, state: usize) {
        instance.current = state;
        instance.dwell = 0;
        instance.terminated = self.dead == Some(state);
    }
}

fn trigger_fires<C: StepContext, R: Rng + ?Sized>(
    trigger: &Trigger,
    elapsed: u64,
    ctx: &mut C,
    rng: &mut R,
) -> Result<bool, EvalError> {
    match trigger {
        Trigger::Probabilistic { rate } => {
            let r = check_probability("rate", ctx.number(rate)?)?;
            Ok(bernoulli(rng, r))
        }
        Trigger::Deterministic { ticks } => {
            let d = ctx.number(ticks)?;
            if d < 0.0 || d.fract() != 0.0 || !d.is_finite() {
                return Err(EvalError::OutOfRange {
                    what: "deterministic ticks",
                    value: d,
                    lo: 0.0,
                    hi: f64::INFINITY,
                });
            }
            Ok(elapsed as f64 >= d)
        }
        Trigger::Conditional { condition } => ctx.condition(condition),
        Trigger::Custom { combinator, triggers } => {
            // every sub-trigger is evaluated so the draw count per tick does
            // not depend on earlier outcomes
            let mut outcomes = Vec::with_capacity(triggers.len());
            for t in triggers {
                outcomes.push(trigger_fires(t, elapsed, ctx, rng)?);
            }
            Ok(match combinator {
                Combinator::AllOf => outcomes.iter().all(|&b| b),
                Combinator::AnyOf => outcomes.iter().any(|&b| b),
            })
        }
        Trigger::Interaction => ctx.interact(rng),
    }
}

/// Mean number of ticks spent in a state governed by `trigger`.
///
/// Deterministic `d` gives `d`; probabilistic `r` gives `1/r`, the mean of
/// the geometric distribution of per-tick Bernoulli(r) trials. Conditional,
/// custom and non-literal triggers have no closed form.
pub fn expected_dwell(trigger: &Trigger) -> Option<f64> {
    match trigger {
        Trigger::Deterministic { ticks } => ticks.literal(),
        Trigger::Probabilistic { rate } => rate.literal().filter(|r| *r > 0.0).map(|r| 1.0 / r),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::metamodel::{Abortion, Transition};

    fn spec(states: &[&str], transitions: Vec<Transition>) -> StateMachineSpec {
        StateMachineSpec {
            name: "m".into(),
            states: states.iter().map(|s| s.to_string()).collect(),
            initial: states[0].to_string(),
            transitions,
            span: Default::default(),
        }
    }

    fn tr(from: &str, to: &str, trigger: Trigger) -> Transition {
        Transition {
            from: from.into(),
            to: to.into(),
            trigger,
            guard: None,
            abortion: None,
            span: Default::default(),
        }
    }

    #[test]
    fn instantiate_starts_at_initial() {
        let m = Machine::from_spec(&spec(&["phaseA", "phaseB"], vec![])).unwrap();
        let i = m.instantiate();
        assert_eq!(m.states[i.current], "phaseA");
        assert_eq!(i.dwell, 0);
        assert!(!i.terminated);
    }

    #[test]
    fn deterministic_fires_on_exact_dwell() {
        let m = Machine::from_spec(&spec(&["a", "b"], vec![tr("a", "b", Trigger::deterministic(3))]))
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut inst = m.instantiate();
        let mut events = vec![];
        for _ in 0..3 {
            events.push(m.step(&mut inst, &mut LiteralContext, &mut rng).unwrap());
        }
        assert_eq!(
            events,
            vec![
                TransitionEvent::None,
                TransitionEvent::None,
                TransitionEvent::Moved { from: 0, to: 1 }
            ]
        );
    }

    #[test]
    fn certain_probabilistic_moves_immediately() {
        let m = Machine::from_spec(&spec(&["a", "b"], vec![tr("a", "b", Trigger::probabilistic(1.0))]))
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut inst = m.instantiate();
        assert_eq!(
            m.step(&mut inst, &mut LiteralContext, &mut rng).unwrap(),
            TransitionEvent::Moved { from: 0, to: 1 }
        );
    }

    #[test]
    fn certain_abortion_goes_to_dead() {
        let mut t = tr("I", "R", Trigger::deterministic(2));
        t.abortion = Some(Abortion { probability: SourceValue::real(1.0), abort_to: DEAD.into() });
        let m = Machine::from_spec(&spec(&["I", "R", DEAD], vec![t])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut inst = m.instantiate();
        assert_eq!(m.step(&mut inst, &mut LiteralContext, &mut rng).unwrap(), TransitionEvent::None);
        assert_eq!(
            m.step(&mut inst, &mut LiteralContext, &mut rng).unwrap(),
            TransitionEvent::Aborted { from: 0, abort_to: 2 }
        );
        assert!(inst.terminated);
    }

    #[test]
    fn first_declared_transition_wins() {
        let m = Machine::from_spec(&spec(
            &["a", "b", "c"],
            vec![tr("a", "b", Trigger::probabilistic(1.0)), tr("a", "c", Trigger::probabilistic(1.0))],
        ))
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut inst = m.instantiate();
        m.step(&mut inst, &mut LiteralContext, &mut rng).unwrap();
        assert_eq!(inst.current, 1);
    }

    #[test]
    fn false_guard_blocks_and_out_of_range_rate_errors() {
        let mut t = tr("a", "b", Trigger::probabilistic(1.0));
        t.guard = Some(Expr::Bool(false));
        let m = Machine::from_spec(&spec(&["a", "b"], vec![t])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut inst = m.instantiate();
        assert_eq!(m.step(&mut inst, &mut LiteralContext, &mut rng).unwrap(), TransitionEvent::None);
        assert_eq!(inst.dwell, 1);

        let m = Machine::from_spec(&spec(&["a", "b"], vec![tr("a", "b", Trigger::probabilistic(1.5))]))
            .unwrap();
        let mut inst = m.instantiate();
        let err = m.step(&mut inst, &mut LiteralContext, &mut rng).unwrap_err();
        assert!(err.path.contains("transition 0"));
    }

    #[test]
    fn custom_all_of_requires_every_subtrigger() {
        let t = Trigger::Custom {
            combinator: Combinator::AllOf,
            triggers: vec![Trigger::deterministic(2), Trigger::probabilistic(1.0)],
        };
        let m = Machine::from_spec(&spec(&["a", "b"], vec![tr("a", "b", t)])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut inst = m.instantiate();
        assert_eq!(m.step(&mut inst, &mut LiteralContext, &mut rng).unwrap(), TransitionEvent::None);
        assert!(matches!(
            m.step(&mut inst, &mut LiteralContext, &mut rng).unwrap(),
            TransitionEvent::Moved { .. }
        ));
    }

    #[test]
    fn unknown_state_is_rejected() {
        let err = Machine::from_spec(&spec(&["a"], vec![tr("a", "zzz", Trigger::deterministic(1))]))
            .unwrap_err();
        assert!(matches!(err, MachineError::UnknownState { .. }));
    }

    #[test]
    fn expected_dwell_closed_forms() {
        assert_eq!(expected_dwell(&Trigger::deterministic(20)), Some(20.0));
        assert_eq!(expected_dwell(&Trigger::probabilistic(0.1)), Some(10.0));
        assert_eq!(expected_dwell(&Trigger::probabilistic(0.5)), Some(2.0));
        assert_eq!(expected_dwell(&Trigger::Conditional { condition: Expr::Bool(true) }), None);
    }

    #[test]
    fn monte_carlo_dwell_matches_geometric_mean() {
        // independent oracle: count Bernoulli trials until first success
        for rate in [0.1, 0.5] {
            let m = Machine::from_spec(&spec(&["a", "b"], vec![tr("a", "b", Trigger::probabilistic(rate))]))
                .unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let trials = 100_000;
            let mut total = 0u64;
            for _ in 0..trials {
                let mut inst = m.instantiate();
                let mut steps = 0;
                loop {
                    steps += 1;
                    if m.step(&mut inst, &mut LiteralContext, &mut rng).unwrap() != TransitionEvent::None {
                        break;
                    }
                }
                total += steps;
            }
            let mean = total as f64 / trials as f64;
            let expected = 1.0 / rate;
            assert!((mean - expected).abs() / expected < 0.02, "rate {rate}: mean {mean}");
        }
    }
}
