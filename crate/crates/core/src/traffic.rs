//! Adaptive traffic signal control: plans as cyclic state machines,
//! queue-state discretization and tabular Q-learning.

use std::collections::BTreeMap;

use rand::Rng;

use crate::metamodel::{PlanSpec, QLearningSpec, StateMachineSpec, Transition, Trigger};

/// Realizes a plan as a cyclic machine: one state per phase, phase `i`
/// moving to phase `i + 1 (mod n)` after its duration.
pub fn plan_to_machine(plan: &PlanSpec) -> StateMachineSpec {
    let n = plan.phases.len();
    let transitions = plan
        .phases
        .iter()
        .enumerate()
        .map(|(i, phase)| Transition {
            from: phase.name.clone(),
            to: plan.phases[(i + 1) % n].name.clone(),
            trigger: Trigger::deterministic(phase.duration),
            guard: None,
            abortion: None,
            span: phase.span.clone(),
        })
        .collect();
    StateMachineSpec {
        name: plan.name.clone(),
        states: plan.phases.iter().map(|p| p.name.clone()).collect(),
        initial: plan.phases.first().map(|p| p.name.clone()).unwrap_or_default(),
        transitions,
        span: plan.span.clone(),
    }
}

/// Discretized learner state: one bin index per stream.
pub type StateKey = Vec<usize>;

/// Maps each queue length to the index of the first threshold `>=` it (or
/// `bins.len()` when above every threshold).
pub fn discretize_state(queues: &[usize], bins: &[i64]) -> StateKey {
    queues
        .iter()
        .map(|&q| bins.iter().position(|&t| t >= q as i64).unwrap_or(bins.len()))
        .collect()
}

/// Action values; unvisited pairs read as zero.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct QTable {
    entries: BTreeMap<(StateKey, usize), f64>,
}

impl QTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, state: &[usize], action: usize) -> f64 {
        self.entries.get(&(state.to_vec(), action)).copied().unwrap_or(0.0)
    }

    pub fn set(&mut self, state: &[usize], action: usize, value: f64) {
        self.entries.insert((state.to_vec(), action), value);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&StateKey, usize, f64)> {
        self.entries.iter().map(|((s, a), v)| (s, *a, *v))
    }

    pub fn max_value(&self, state: &[usize], actions: usize) -> f64 {
        if actions == 0 {
            return 0.0;
        }
        (0..actions).map(|a| self.get(state, a)).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Greedy action, ties broken by the lowest index.
    pub fn argmax(&self, state: &[usize], actions: usize) -> usize {
        let mut best = 0;
        let mut best_value = f64::NEG_INFINITY;
        for a in 0..actions {
            let v = self.get(state, a);
            if v > best_value {
                best = a;
                best_value = v;
            }
        }
        best
    }
}

/// `Q(s,a) <- Q(s,a) + alpha * (r + gamma * max_a' Q(s',a') - Q(s,a))`.
pub fn q_update(
    table: &mut QTable,
    state: &[usize],
    action: usize,
    reward: f64,
    next: &[usize],
    spec: &QLearningSpec,
) {
    let old = table.get(state, action);
    let future = table.max_value(next, spec.plans.len());
    let updated = old + spec.alpha * (reward + spec.gamma * future - old);
    table.set(state, action, updated);
}

/// Epsilon-greedy selection. One uniform draw decides exploration; an
/// exploring step draws a second value for the action.
pub fn select_action<R: Rng + ?Sized>(
    table: &QTable,
    state: &[usize],
    actions: usize,
    epsilon: f64,
    rng: &mut R,
) -> usize {
    assert!(actions > 0, "select_action needs at least one action");
    if rng.random::<f64>() < epsilon {
        rng.random_range(0..actions)
    } else {
        table.argmax(state, actions)
    }
}

/// Vehicles waiting on streams that are currently red.
pub fn stopped_vehicles(queues: &[usize], green: &[bool]) -> usize {
    queues
        .iter()
        .zip(green)
        .filter(|(_, &g)| !g)
        .map(|(q, _)| q)
        .sum()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::metamodel::PhaseSpec;
    use crate::statemachine::{LiteralContext, Machine};

    fn phase(name: &str, duration: i64) -> PhaseSpec {
        PhaseSpec { name: name.into(), green: vec!["north".into()], duration, span: Default::default() }
    }

    fn spec(alpha: f64, gamma: f64) -> QLearningSpec {
        QLearningSpec {
            alpha,
            gamma,
            epsilon: 0.0,
            plans: vec!["a".into(), "b".into()],
            bins: vec![2, 5],
            reward: None,
        }
    }

    #[test]
    fn two_phase_plan_cycles_in_twenty_ticks() {
        let plan = PlanSpec {
            name: "p".into(),
            phases: vec![phase("NS", 10), phase("EW", 10)],
            span: Default::default(),
        };
        let m = plan_to_machine(&plan);
        assert_eq!(m.states, ["NS", "EW"]);
        assert_eq!(m.transitions[0].to, "EW");
        assert_eq!(m.transitions[1].to, "NS");
        assert_eq!(plan.cycle_length(), 20);
        let machine = Machine::from_spec(&m).unwrap();
        let mut inst = machine.instantiate();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut switches = vec![];
        for tick in 1..=20 {
            if machine.step(&mut inst, &mut LiteralContext, &mut rng).unwrap() != crate::statemachine::TransitionEvent::None {
                switches.push(tick);
            }
        }
        assert_eq!(switches, [10, 20]);
        assert_eq!(inst.current, 0);
    }

    #[test]
    fn single_phase_plan_is_a_self_loop() {
        let plan = PlanSpec { name: "p".into(), phases: vec![phase("all", 5)], span: Default::default() };
        let m = plan_to_machine(&plan);
        assert_eq!(m.transitions.len(), 1);
        assert_eq!(m.transitions[0].from, m.transitions[0].to);
    }

    #[test]
    fn discretization_examples() {
        assert_eq!(discretize_state(&[0, 0], &[2, 5]), vec![0, 0]);
        assert_eq!(discretize_state(&[3, 7], &[2, 5]), vec![1, 2]);
        assert_eq!(discretize_state(&[2, 5], &[2, 5]), vec![0, 1]);
    }

    #[test]
    fn q_update_examples() {
        let mut t = QTable::new();
        q_update(&mut t, &[0], 0, 1.0, &[1], &spec(0.5, 0.9));
        assert_eq!(t.get(&[0], 0), 0.5);
        assert_eq!(t.len(), 1);

        let before = t.clone();
        q_update(&mut t, &[0], 0, 7.0, &[1], &spec(0.0, 0.9));
        assert_eq!(t, before);

        let mut t = QTable::new();
        t.set(&[0], 0, 2.0);
        q_update(&mut t, &[0], 0, 0.0, &[0], &spec(0.5, 0.0));
        assert_eq!(t.get(&[0], 0), 1.0);
    }

    #[test]
    fn greedy_selection_and_tie_break() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut t = QTable::new();
        assert_eq!(select_action(&t, &[0], 3, 0.0, &mut rng), 0);
        t.set(&[0], 0, 1.0);
        t.set(&[0], 1, 0.0);
        assert_eq!(select_action(&t, &[0], 2, 0.0, &mut rng), 0);
        t.set(&[0], 1, 3.0);
        assert_eq!(select_action(&t, &[0], 2, 0.0, &mut rng), 1);
    }

    #[test]
    fn full_exploration_is_uniform() {
        // chi-square goodness of fit, 3 actions, 2 dof: 13.82 is the 0.999 quantile
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let t = QTable::new();
        let draws = 10_000;
        let mut counts = [0f64; 3];
        for _ in 0..draws {
            counts[select_action(&t, &[0], 3, 1.0, &mut rng)] += 1.0;
        }
        let expected = draws as f64 / 3.0;
        let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        assert!(chi2 < 13.82, "chi2 = {chi2}");
    }

    #[test]
    fn stopped_vehicle_counts() {
        assert_eq!(stopped_vehicles(&[4, 2], &[true, true]), 0);
        assert_eq!(stopped_vehicles(&[3, 2], &[false, true]), 3);
        assert_eq!(stopped_vehicles(&[], &[]), 0);
    }
}
