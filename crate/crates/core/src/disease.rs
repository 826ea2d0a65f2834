//! Spread-of-disease extension: compartmental models expressed as state
//! machines, transmission, mortality and infection introduction.
//!
//! The functions here are pure decisions over explicit views and a PRNG
//! stream; the engine gathers the views and applies the outcomes.

use rand::seq::index;
use rand::Rng;

use crate::expr::{EvalError, Expr};
use crate::metamodel::{
    Abortion, CompartmentKind, DeathRateEvaluation, DiseaseIntroductionSpec, DiseaseModelSpec,
    MortalitySpec, Periodicity, Quantity, Selection, StateMachineSpec, Transition,
    TransmissionSpec, Trigger,
};
use crate::statemachine::{bernoulli, check_probability, Machine, StepContext, DEAD};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeKind {
    Infection,
    Progression,
    Mortality,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphEdge {
    pub from: String,
    pub to: String,
    pub kind: EdgeKind,
}

/// States and allowed transitions of a compartmental model, triggers unbound.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompartmentGraph {
    pub states: Vec<String>,
    pub initial: String,
    pub susceptible: String,
    /// Compartment entered on infection.
    pub infected: String,
    pub edges: Vec<GraphEdge>,
}

impl CompartmentGraph {
    pub fn has_edge(&self, from: &str, to: &str) -> bool {
        self.edges.iter().any(|e| e.from == from && e.to == to)
    }

    /// Successor of `state` along its progression edge.
    pub fn progression_target(&self, state: &str) -> Option<&str> {
        self.edges
            .iter()
            .find(|e| e.from == state && e.kind == EdgeKind::Progression)
            .map(|e| e.to.as_str())
    }
}

fn edge(from: &str, to: &str, kind: EdgeKind) -> GraphEdge {
    GraphEdge { from: from.into(), to: to.into(), kind }
}

/// Canonical graph of a standard compartmental model.
///
/// The `R -> S` edge is allowed; it only exists at run time when the
/// recovered compartment has a duration (temporary immunity). `Custom` has
/// no canonical graph and yields an empty skeleton; see [`disease_graph`].
pub fn compartment_graph(kind: CompartmentKind) -> CompartmentGraph {
    use EdgeKind::*;
    let (states, edges): (&[&str], Vec<GraphEdge>) = match kind {
        CompartmentKind::SIR => (
            &["S", "I", "R"],
            vec![edge("S", "I", Infection), edge("I", "R", Progression), edge("R", "S", Progression)],
        ),
        CompartmentKind::SEIR => (
            &["S", "E", "I", "R"],
            vec![
                edge("S", "E", Infection),
                edge("E", "I", Progression),
                edge("I", "R", Progression),
                edge("R", "S", Progression),
            ],
        ),
        CompartmentKind::PSIR => (
            &["P", "S", "I", "R"],
            vec![
                edge("P", "S", Progression),
                edge("S", "I", Infection),
                edge("I", "R", Progression),
                edge("R", "S", Progression),
            ],
        ),
        CompartmentKind::Custom => {
            return CompartmentGraph {
                states: vec![],
                initial: String::new(),
                susceptible: String::new(),
                infected: String::new(),
                edges: vec![],
            }
        }
    };
    let susceptible = "S".to_string();
    let infected = edges
        .iter()
        .find(|e| e.kind == Infection)
        .map(|e| e.to.clone())
        .unwrap_or_default();
    CompartmentGraph {
        states: states.iter().map(|s| s.to_string()).collect(),
        initial: states[0].to_string(),
        susceptible,
        infected,
        edges,
    }
}

/// The graph a particular disease declares: the canonical graph (or the
/// declared custom compartments and edges) plus one mortality edge to
/// [`DEAD`] per compartment named by a mortality spec.
pub fn disease_graph(spec: &DiseaseModelSpec) -> CompartmentGraph {
    let mut graph = if spec.kind == CompartmentKind::Custom {
        let states = spec.compartments.clone();
        let mut edges = Vec::new();
        let (susceptible, infected) = match &spec.infection {
            Some(e) => {
                edges.push(edge(&e.from, &e.to, EdgeKind::Infection));
                (e.from.clone(), e.to.clone())
            }
            None => (String::new(), String::new()),
        };
        for d in &spec.durations {
            if let Some(target) = &d.target {
                edges.push(edge(&d.compartment, target, EdgeKind::Progression));
            }
        }
        CompartmentGraph {
            initial: states.first().cloned().unwrap_or_default(),
            states,
            susceptible,
            infected,
            edges,
        }
    } else {
        compartment_graph(spec.kind)
    };
    let mut named: Vec<&str> = Vec::new();
    for m in &spec.mortality {
        if !named.contains(&m.compartment.as_str()) {
            named.push(&m.compartment);
        }
    }
    for c in named {
        graph.edges.push(edge(c, DEAD, EdgeKind::Mortality));
    }
    graph
}

/// The duration trigger governing departure from `compartment`, if any.
pub fn duration_of<'a>(spec: &'a DiseaseModelSpec, compartment: &str) -> Option<&'a Trigger> {
    if let Some(d) = spec.durations.iter().find(|d| d.compartment == compartment) {
        return Some(&d.trigger);
    }
    if spec.kind == CompartmentKind::Custom {
        return None;
    }
    match compartment {
        "R" => spec.recovered_immunity.as_ref(),
        "P" => spec.passive_immunity.as_ref(),
        _ => None,
    }
}

/// Realizes a disease model as a state machine specialization.
///
/// Per compartment, transitions are emitted in priority order: tick-based
/// mortality (guarded probabilistic transitions to `Dead`), then the
/// infection transition out of the susceptible state, then the progression
/// transition, which carries the `leaving_compartment` death rate as an
/// abortion clause.
pub fn disease_machine(spec: &DiseaseModelSpec) -> StateMachineSpec {
    let graph = disease_graph(spec);
    let mut states = graph.states.clone();
    if !spec.mortality.is_empty() {
        states.push(DEAD.to_string());
    }
    let mut transitions = Vec::new();
    for c in &graph.states {
        for m in spec.mortality.iter().filter(|m| &m.compartment == c) {
            let guard = match &m.evaluation {
                DeathRateEvaluation::EveryTimeunit => None,
                DeathRateEvaluation::SpecificTimeunit(t) => Some(Expr::binary(
                    crate::expr::BinaryOp::Eq,
                    Expr::Tick,
                    Expr::Int(*t),
                )),
                DeathRateEvaluation::WhenCondition(e) => Some(e.clone()),
                DeathRateEvaluation::LeavingCompartment => continue,
            };
            transitions.push(Transition {
                from: c.clone(),
                to: DEAD.into(),
                trigger: Trigger::Probabilistic { rate: m.rate.clone() },
                guard,
                abortion: None,
                span: m.span.clone(),
            });
        }
        if *c == graph.susceptible && !graph.infected.is_empty() {
            transitions.push(Transition {
                from: c.clone(),
                to: graph.infected.clone(),
                trigger: Trigger::Interaction,
                guard: None,
                abortion: None,
                span: spec.span.clone(),
            });
        }
        let (Some(trigger), Some(target)) = (duration_of(spec, c), graph.progression_target(c)) else {
            continue;
        };
        let abortion = spec
            .mortality
            .iter()
            .find(|m| &m.compartment == c && m.evaluation == DeathRateEvaluation::LeavingCompartment)
            .map(|m| Abortion { probability: m.rate.clone(), abort_to: DEAD.into() });
        transitions.push(Transition {
            from: c.clone(),
            to: target.to_string(),
            trigger: trigger.clone(),
            guard: None,
            abortion,
            span: spec.span.clone(),
        });
    }
    StateMachineSpec {
        name: spec.name.clone(),
        states,
        initial: graph.initial.clone(),
        transitions,
        span: spec.span.clone(),
    }
}

/// Resolved disease ready for simulation.
#[derive(Clone, Debug)]
pub struct CompiledDisease {
    pub name: String,
    pub machine: Machine,
    pub susceptible: usize,
    pub infected: usize,
    /// Indexed by state.
    pub infectious: Vec<bool>,
    pub transmission: TransmissionSpec,
}

impl CompiledDisease {
    /// Expects a validated spec.
    pub fn compile(spec: &DiseaseModelSpec) -> Result<Self, String> {
        let graph = disease_graph(spec);
        let machine = Machine::from_spec(&disease_machine(spec)).map_err(|e| e.to_string())?;
        let transmission = spec
            .transmission
            .clone()
            .ok_or_else(|| format!("disease `{}` has no transmission", spec.name))?;
        let find = |s: &str| {
            machine
                .state_index(s)
                .ok_or_else(|| format!("disease `{}`: unknown compartment `{s}`", spec.name))
        };
        let susceptible = find(&graph.susceptible)?;
        let infected = find(&graph.infected)?;
        let mut infectious = vec![false; machine.states.len()];
        for s in transmission.infectious_states() {
            infectious[find(s)?] = true;
        }
        Ok(CompiledDisease {
            name: spec.name.clone(),
            machine,
            susceptible,
            infected,
            infectious,
            transmission,
        })
    }
}

/// A potential source of infection near a susceptible agent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub id: u64,
    pub distance: f64,
    /// In an infectious compartment, or a contaminating entity whose
    /// contamination condition holds.
    pub infectious: bool,
}

/// One independent Bernoulli(`probability`) trial per infectious candidate
/// within interaction distance, in ascending id order; true on the first
/// success. At most one infection results per call.
pub fn attempt_transmission<R: Rng + ?Sized>(
    candidates: &[Candidate],
    spec: &TransmissionSpec,
    probability: f64,
    rng: &mut R,
) -> bool {
    let threshold = spec.interaction.distance();
    let mut ordered: Vec<&Candidate> = candidates
        .iter()
        .filter(|c| c.infectious && c.distance <= threshold)
        .collect();
    ordered.sort_by_key(|c| c.id);
    ordered.into_iter().any(|_| bernoulli(rng, probability))
}

/// Member of the introduction pool, in ascending id order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolMember {
    pub id: u64,
    pub susceptible: bool,
    /// Outcome of the eligibility criterion (true for arbitrary selection).
    pub eligible: bool,
}

pub fn introduction_fires(periodicity: &Periodicity, tick: u64) -> bool {
    match *periodicity {
        Periodicity::Aperiodic => tick == 0,
        Periodicity::Periodic(k) => k >= 1 && tick.is_multiple_of(k as u64),
    }
}

/// Ids of the agents to infect at `tick`.
///
/// Only susceptible members are considered, filtered by eligibility when the
/// selection is `eligible`. A deterministic quantity samples `min(n, pool)`
/// members uniformly without replacement; a probabilistic one draws an
/// independent Bernoulli(p) per pool member.
pub fn introduce<R: Rng + ?Sized>(
    population: &[PoolMember],
    spec: &DiseaseIntroductionSpec,
    tick: u64,
    rng: &mut R,
) -> Vec<u64> {
    if !introduction_fires(&spec.periodicity, tick) {
        return Vec::new();
    }
    let use_eligibility = matches!(spec.selection, Selection::Eligible(_));
    let pool: Vec<u64> = population
        .iter()
        .filter(|m| m.susceptible && (!use_eligibility || m.eligible))
        .map(|m| m.id)
        .collect();
    match spec.quantity {
        Quantity::Deterministic(n) => {
            let amount = (n.max(0) as usize).min(pool.len());
            let mut picked: Vec<usize> = index::sample(rng, pool.len(), amount).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| pool[i]).collect()
        }
        Quantity::Probabilistic(p) => pool.into_iter().filter(|_| bernoulli(rng, p)).collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MortalityEvent {
    /// Ordinary tick in the compartment.
    Tick,
    /// The compartment's progression trigger fired this tick.
    Leaving,
}

/// Decides whether an agent dies under the mortality specs of its current
/// compartment. Tick events evaluate every circumstance except
/// `leaving_compartment`; leaving events evaluate only that one.
pub fn evaluate_mortality<C: StepContext, R: Rng + ?Sized>(
    specs: &[MortalitySpec],
    event: MortalityEvent,
    tick: u64,
    ctx: &mut C,
    rng: &mut R,
) -> Result<bool, EvalError> {
    for m in specs {
        let applies = match (&m.evaluation, event) {
            (DeathRateEvaluation::EveryTimeunit, MortalityEvent::Tick) => true,
            (DeathRateEvaluation::SpecificTimeunit(t), MortalityEvent::Tick) => *t as u64 == tick,
            (DeathRateEvaluation::WhenCondition(e), MortalityEvent::Tick) => ctx.condition(e)?,
            (DeathRateEvaluation::LeavingCompartment, MortalityEvent::Leaving) => true,
            _ => false,
        };
        if applies {
            let rate = check_probability("death rate", ctx.number(&m.rate)?)?;
            if bernoulli(rng, rate) {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::expr::{BinaryOp, Value};
    use crate::metamodel::{DurationSpec, Interaction, SourceValue};
    use crate::statemachine::{LiteralContext, TransitionEvent};

    fn edges(g: &CompartmentGraph) -> Vec<(&str, &str)> {
        g.edges.iter().map(|e| (e.from.as_str(), e.to.as_str())).collect()
    }

    #[test]
    fn standard_graphs() {
        let sir = compartment_graph(CompartmentKind::SIR);
        assert_eq!(sir.states, ["S", "I", "R"]);
        assert_eq!(edges(&sir), [("S", "I"), ("I", "R"), ("R", "S")]);
        let seir = compartment_graph(CompartmentKind::SEIR);
        assert!(seir.has_edge("S", "E"));
        assert!(!seir.has_edge("S", "I"));
        assert_eq!(seir.infected, "E");
        let psir = compartment_graph(CompartmentKind::PSIR);
        assert_eq!(psir.initial, "P");
        assert_eq!(psir.progression_target("P"), Some("S"));
    }

    fn transmission(interaction: Interaction) -> TransmissionSpec {
        TransmissionSpec {
            interaction,
            probability: SourceValue::real(1.0),
            infectious: vec![],
            condition: None,
            entity_sources: vec![],
            span: Default::default(),
        }
    }

    fn sir() -> DiseaseModelSpec {
        let mut d = DiseaseModelSpec::new("Measles", CompartmentKind::SIR);
        d.transmission = Some(transmission(Interaction::Proximity { distance: 1.0 }));
        d.durations.push(DurationSpec {
            compartment: "I".into(),
            target: None,
            trigger: Trigger::deterministic(3),
            span: Default::default(),
        });
        d
    }

    #[test]
    fn disease_machine_orders_mortality_before_progression() {
        let mut d = sir();
        d.mortality.push(MortalitySpec {
            compartment: "I".into(),
            rate: SourceValue::real(0.1),
            evaluation: DeathRateEvaluation::EveryTimeunit,
            span: Default::default(),
        });
        d.mortality.push(MortalitySpec {
            compartment: "I".into(),
            rate: SourceValue::real(0.5),
            evaluation: DeathRateEvaluation::LeavingCompartment,
            span: Default::default(),
        });
        let m = disease_machine(&d);
        assert_eq!(m.states, ["S", "I", "R", "Dead"]);
        let from_i: Vec<_> = m.transitions.iter().filter(|t| t.from == "I").collect();
        assert_eq!(from_i[0].to, "Dead");
        assert_eq!(from_i[1].to, "R");
        assert_eq!(from_i[1].abortion.as_ref().unwrap().abort_to, "Dead");
        // no R duration: permanent immunity, no R -> S transition
        assert!(!m.transitions.iter().any(|t| t.from == "R"));
    }

    #[test]
    fn leaving_compartment_certain_death_never_reaches_r() {
        let mut d = sir();
        d.mortality.push(MortalitySpec {
            compartment: "I".into(),
            rate: SourceValue::real(1.0),
            evaluation: DeathRateEvaluation::LeavingCompartment,
            span: Default::default(),
        });
        let c = CompiledDisease::compile(&d).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let mut inst = c.machine.instantiate();
            inst.current = c.infected;
            let mut last = TransitionEvent::None;
            while !inst.terminated && last == TransitionEvent::None {
                last = c.machine.step(&mut inst, &mut LiteralContext, &mut rng).unwrap();
            }
            assert!(matches!(last, TransitionEvent::Aborted { .. }));
        }
    }

    #[test]
    fn transmission_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let near = [Candidate { id: 4, distance: 0.5, infectious: true }];
        let prox = transmission(Interaction::Proximity { distance: 1.0 });
        assert!(!attempt_transmission(&near, &prox, 0.0, &mut rng));
        assert!(attempt_transmission(&near, &prox, 1.0, &mut rng));
        let contact = transmission(Interaction::Contact);
        let one_away = [Candidate { id: 4, distance: 1.0, infectious: true }];
        assert!(!attempt_transmission(&one_away, &contact, 1.0, &mut rng));
        let not_infectious = [Candidate { id: 4, distance: 0.0, infectious: false }];
        assert!(!attempt_transmission(&not_infectious, &contact, 1.0, &mut rng));
    }

    fn intro(quantity: Quantity, periodicity: Periodicity) -> DiseaseIntroductionSpec {
        DiseaseIntroductionSpec {
            disease: "Measles".into(),
            quantity,
            selection: Selection::Arbitrary,
            periodicity,
            span: Default::default(),
        }
    }

    fn pool(n: u64) -> Vec<PoolMember> {
        (0..n).map(|id| PoolMember { id, susceptible: true, eligible: true }).collect()
    }

    #[test]
    fn introduction_quantities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let five = intro(Quantity::Deterministic(5), Periodicity::Aperiodic);
        let ids = introduce(&pool(100), &five, 0, &mut rng);
        assert_eq!(ids.len(), 5);
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(introduce(&pool(3), &five, 0, &mut rng), vec![0, 1, 2]);
        let all = intro(Quantity::Probabilistic(1.0), Periodicity::Aperiodic);
        assert_eq!(introduce(&pool(10), &all, 0, &mut rng).len(), 10);
        assert!(introduce(&pool(10), &all, 1, &mut rng).is_empty());
    }

    #[test]
    fn periodic_introduction_fires_on_multiples_including_zero() {
        let p = Periodicity::Periodic(7);
        let fired: Vec<u64> = (0..30).filter(|&t| introduction_fires(&p, t)).collect();
        assert_eq!(fired, [0, 7, 14, 21, 28]);
    }

    #[test]
    fn only_susceptible_eligible_members_are_picked() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let members = vec![
            PoolMember { id: 1, susceptible: false, eligible: true },
            PoolMember { id: 2, susceptible: true, eligible: false },
            PoolMember { id: 3, susceptible: true, eligible: true },
        ];
        let mut spec = intro(Quantity::Deterministic(10), Periodicity::Aperiodic);
        spec.selection = Selection::Eligible(Expr::Bool(true));
        assert_eq!(introduce(&members, &spec, 0, &mut rng), vec![3]);
    }

    struct Energy(i64);

    impl StepContext for Energy {
        fn number(&mut self, value: &SourceValue) -> Result<f64, EvalError> {
            LiteralContext.number(value)
        }
        fn condition(&mut self, expr: &Expr) -> Result<bool, EvalError> {
            // only `energy <= 0` is used below
            match expr {
                Expr::Binary { op: BinaryOp::Le, .. } => Ok(self.0 <= 0),
                _ => LiteralContext.condition(expr),
            }
        }
        fn interact<R: Rng + ?Sized>(&mut self, _rng: &mut R) -> Result<bool, EvalError> {
            Ok(false)
        }
    }

    #[test]
    fn mortality_circumstances() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = |evaluation, rate| MortalitySpec {
            compartment: "I".into(),
            rate: SourceValue::Literal(Value::Real(rate)),
            evaluation,
            span: Default::default(),
        };
        let never = [spec(DeathRateEvaluation::EveryTimeunit, 0.0)];
        for _ in 0..100 {
            assert!(!evaluate_mortality(&never, MortalityEvent::Tick, 0, &mut Energy(0), &mut rng).unwrap());
        }
        let starving = [spec(
            DeathRateEvaluation::WhenCondition(Expr::binary(
                BinaryOp::Le,
                Expr::Attr("energy".into()),
                Expr::Int(0),
            )),
            1.0,
        )];
        assert!(!evaluate_mortality(&starving, MortalityEvent::Tick, 0, &mut Energy(5), &mut rng).unwrap());
        assert!(evaluate_mortality(&starving, MortalityEvent::Tick, 0, &mut Energy(0), &mut rng).unwrap());
        let at_ten = [spec(DeathRateEvaluation::SpecificTimeunit(10), 1.0)];
        assert!(!evaluate_mortality(&at_ten, MortalityEvent::Tick, 9, &mut Energy(5), &mut rng).unwrap());
        assert!(evaluate_mortality(&at_ten, MortalityEvent::Tick, 10, &mut Energy(5), &mut rng).unwrap());
        let leaving = [spec(DeathRateEvaluation::LeavingCompartment, 1.0)];
        assert!(!evaluate_mortality(&leaving, MortalityEvent::Tick, 0, &mut Energy(5), &mut rng).unwrap());
        assert!(evaluate_mortality(&leaving, MortalityEvent::Leaving, 0, &mut Energy(5), &mut rng).unwrap());
    }
}
