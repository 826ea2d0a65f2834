//! Semantic model of an agent-based simulation.
//!
//! Every declaration is a plain value; specializations (a disease model is a
//! state machine, a plan is a state machine) are separate variants rather than
//! a type hierarchy. `validate` checks whole-model well-formedness and
//! `resolve_concern` computes read-only views over a partition of the model.

mod concern;
mod typecheck;
mod validate;

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::expr::{Expr, Type, Value};

pub use concern::{resolve_concern, ConcernError, ConcernView, ElementKind, ElementRef};
pub use typecheck::{type_of, TypeScope};
pub use validate::{validate, Diagnostic, Severity, ValidationReport};

pub type Ident = String;

/// Location of an element in its source text.
///
/// Spans never take part in structural equality: two models that differ only
/// in where their elements were written compare equal.
#[derive(Clone, Debug, Default, Serialize)]
pub struct Span {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<Arc<str>>,
    pub start: usize,
    pub end: usize,
    pub line: u32,
    pub column: u32,
    pub end_line: u32,
    pub end_column: u32,
}

impl PartialEq for Span {
    fn eq(&self, _other: &Self) -> bool {
        true
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(file) = &self.file {
            write!(f, "{file}:")?;
        }
        write!(f, "{}:{}", self.line, self.column)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub name: Ident,
    pub environment: EnvironmentSpec,
    /// Declarations in source order.
    pub items: Vec<Item>,
    pub span: Span,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Item {
    Entity(EntityTypeSpec),
    Agent(AgentTypeSpec),
    Machine(StateMachineSpec),
    Plan(PlanSpec),
    Disease(DiseaseModelSpec),
    Introduce(DiseaseIntroductionSpec),
    Output(OutputDatasetSpec),
    Concern(Concern),
}

macro_rules! item_accessor {
    ($name:ident, $variant:ident, $ty:ty) => {
        pub fn $name(&self) -> impl Iterator<Item = &$ty> + '_ {
            self.items.iter().filter_map(|item| match item {
                Item::$variant(x) => Some(x),
                _ => None,
            })
        }
    };
}

impl Model {
    pub fn new(name: impl Into<Ident>, topology: Topology) -> Self {
        Model {
            name: name.into(),
            environment: EnvironmentSpec { topology, span: Span::default() },
            items: Vec::new(),
            span: Span::default(),
        }
    }

    item_accessor!(entities, Entity, EntityTypeSpec);
    item_accessor!(agents, Agent, AgentTypeSpec);
    item_accessor!(machines, Machine, StateMachineSpec);
    item_accessor!(plans, Plan, PlanSpec);
    item_accessor!(diseases, Disease, DiseaseModelSpec);
    item_accessor!(introductions, Introduce, DiseaseIntroductionSpec);
    item_accessor!(outputs, Output, OutputDatasetSpec);
    item_accessor!(concerns, Concern, Concern);

    pub fn agent(&self, name: &str) -> Option<&AgentTypeSpec> {
        self.agents().find(|a| a.name == name)
    }

    pub fn entity(&self, name: &str) -> Option<&EntityTypeSpec> {
        self.entities().find(|e| e.name == name)
    }

    pub fn disease(&self, name: &str) -> Option<&DiseaseModelSpec> {
        self.diseases().find(|d| d.name == name)
    }

    pub fn machine(&self, name: &str) -> Option<&StateMachineSpec> {
        self.machines().find(|m| m.name == name)
    }

    pub fn plan(&self, name: &str) -> Option<&PlanSpec> {
        self.plans().find(|p| p.name == name)
    }

    /// Attribute list of an agent or entity type.
    pub fn attributes_of(&self, type_name: &str) -> Option<&[AttributeSpec]> {
        self.agent(type_name)
            .map(|a| a.attributes.as_slice())
            .or_else(|| self.entity(type_name).map(|e| e.attributes.as_slice()))
    }

    /// Agent types that carry the named disease.
    pub fn carriers_of<'a>(&'a self, disease: &'a str) -> impl Iterator<Item = &'a AgentTypeSpec> + 'a {
        self.agents().filter(move |a| {
            a.capabilities
                .iter()
                .any(|c| matches!(&c.kind, Capability::Disease { disease: d } if d == disease))
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvironmentSpec {
    pub topology: Topology,
    pub span: Span,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Topology {
    Grid { width: i64, height: i64, wrap: bool },
    Cartesian { x_min: f64, x_max: f64, y_min: f64, y_max: f64 },
    Graph { source: CreationalStrategy },
}

impl Topology {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Topology::Grid { .. } => "grid",
            Topology::Cartesian { .. } => "cartesian",
            Topology::Graph { .. } => "graph",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum AttrKind {
    Integer,
    Real,
    Boolean,
    Identifier,
    Text,
}

impl AttrKind {
    pub fn keyword(self) -> &'static str {
        match self {
            AttrKind::Integer => "integer",
            AttrKind::Real => "real",
            AttrKind::Boolean => "boolean",
            AttrKind::Identifier => "identifier",
            AttrKind::Text => "text",
        }
    }

    pub fn from_keyword(s: &str) -> Option<Self> {
        Some(match s {
            "integer" => AttrKind::Integer,
            "real" => AttrKind::Real,
            "boolean" => AttrKind::Boolean,
            "identifier" => AttrKind::Identifier,
            "text" => AttrKind::Text,
            _ => return None,
        })
    }

    pub fn value_type(self) -> Type {
        match self {
            AttrKind::Integer => Type::Int,
            AttrKind::Real => Type::Real,
            AttrKind::Boolean => Type::Bool,
            AttrKind::Identifier => Type::Symbol,
            AttrKind::Text => Type::Text,
        }
    }

    /// Whether a value of type `t` may be stored in an attribute of this kind.
    pub fn accepts(self, t: Type) -> bool {
        t == self.value_type() || (self == AttrKind::Real && t == Type::Int)
    }

    /// Coerces a stored value to this kind (integers widen to reals).
    pub fn coerce(self, v: Value) -> Value {
        match (self, v) {
            (AttrKind::Real, Value::Int(i)) => Value::Real(i as f64),
            (_, v) => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributeSpec {
    pub name: Ident,
    pub kind: AttrKind,
    pub default: Expr,
    pub span: Span,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntityTypeSpec {
    pub name: Ident,
    pub attributes: Vec<AttributeSpec>,
    pub creation: CreationalStrategy,
    pub span: Span,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentTypeSpec {
    pub name: Ident,
    pub attributes: Vec<AttributeSpec>,
    pub creation: CreationalStrategy,
    pub capabilities: Vec<CapabilityRef>,
    pub span: Span,
}

impl AgentTypeSpec {
    pub fn mobility(&self) -> Option<f64> {
        self.capabilities.iter().find_map(|c| match c.kind {
            Capability::Mobility { step } => Some(step),
            _ => None,
        })
    }

    pub fn flow_control(&self) -> Option<&FlowControlSpec> {
        self.capabilities.iter().find_map(|c| match &c.kind {
            Capability::FlowControl(f) => Some(f),
            _ => None,
        })
    }

    pub fn qlearning(&self) -> Option<&QLearningSpec> {
        self.capabilities.iter().find_map(|c| match &c.kind {
            Capability::QLearning(q) => Some(q),
            _ => None,
        })
    }

    pub fn diseases(&self) -> impl Iterator<Item = &str> {
        self.capabilities.iter().filter_map(|c| match &c.kind {
            Capability::Disease { disease } => Some(disease.as_str()),
            _ => None,
        })
    }

    pub fn state_machines(&self) -> impl Iterator<Item = &str> {
        self.capabilities.iter().filter_map(|c| match &c.kind {
            Capability::StateMachine { machine } => Some(machine.as_str()),
            _ => None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CapabilityRef {
    pub kind: Capability,
    pub span: Span,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Capability {
    /// Random walk with the given displacement per tick.
    Mobility { step: f64 },
    /// A generic machine or a traffic signal plan.
    StateMachine { machine: Ident },
    FlowControl(FlowControlSpec),
    QLearning(QLearningSpec),
    Disease { disease: Ident },
    External { library: String, entry: Ident },
    /// Reserved; rejected by validation.
    Adaptation { criterion: Ident },
}

impl Capability {
    pub fn keyword(&self) -> &'static str {
        match self {
            Capability::Mobility { .. } => "mobility",
            Capability::StateMachine { .. } => "state_machine",
            Capability::FlowControl(_) => "flow_control",
            Capability::QLearning(_) => "qlearning",
            Capability::Disease { .. } => "disease",
            Capability::External { .. } => "external",
            Capability::Adaptation { .. } => "adaptation",
        }
    }
}

/// Approach directions a stream can bind to.
pub const STREAM_DIRECTIONS: [&str; 4] = ["north", "south", "east", "west"];

#[derive(Clone, Debug, PartialEq)]
pub struct StreamSpec {
    /// One of [`STREAM_DIRECTIONS`]: vehicles approaching from that side.
    pub id: Ident,
    pub capacity: Option<i64>,
    pub span: Span,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowControlSpec {
    pub streams: Vec<StreamSpec>,
    /// Pairs of streams that may be green at the same time.
    pub compatible: Vec<(Ident, Ident)>,
}

impl FlowControlSpec {
    pub fn stream_index(&self, id: &str) -> Option<usize> {
        self.streams.iter().position(|s| s.id == id)
    }

    pub fn are_compatible(&self, a: &str, b: &str) -> bool {
        a == b
            || self
                .compatible
                .iter()
                .any(|(x, y)| (x == a && y == b) || (x == b && y == a))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QLearningSpec {
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon: f64,
    /// Actions: the plans the learner chooses between.
    pub plans: Vec<Ident>,
    /// Queue-length thresholds used to discretize each stream.
    pub bins: Vec<i64>,
    /// Per-tick reward; defaults to `-stopped()`.
    pub reward: Option<Expr>,
}

impl QLearningSpec {
    pub fn reward_expr(&self) -> Expr {
        self.reward.clone().unwrap_or_else(|| Expr::neg(Expr::Stopped))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Placement {
    Random,
    At(Vec<(f64, f64)>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct InlineNode {
    pub name: Ident,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InlineEdge {
    pub a: Ident,
    pub b: Ident,
    /// Euclidean distance between the endpoints when absent.
    pub length: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum CreationalStrategy {
    FixedCount { count: i64, placement: Placement },
    GisPoints { path: String },
    OsmGraph { path: String },
    InlineEdgeList { nodes: Vec<InlineNode>, edges: Vec<InlineEdge> },
    /// One instance per graph node of degree three or more.
    Intersections,
}

/// Provision of a numeric value.
#[derive(Clone, Debug, PartialEq)]
pub enum SourceValue {
    Literal(Value),
    AttributeRef { owner: Ident, attribute: Ident },
    Expr(Expr),
}

impl SourceValue {
    pub fn real(v: f64) -> Self {
        SourceValue::Literal(Value::Real(v))
    }

    pub fn int(v: i64) -> Self {
        SourceValue::Literal(Value::Int(v))
    }

    /// Classifies a parsed expression into the most specific form.
    pub fn from_expr(e: Expr) -> Self {
        match e {
            Expr::Int(v) => SourceValue::Literal(Value::Int(v)),
            Expr::Real(v) => SourceValue::Literal(Value::Real(v)),
            Expr::Ref { owner, attr } => SourceValue::AttributeRef { owner, attribute: attr },
            Expr::Attr(attr) => SourceValue::AttributeRef { owner: "self".into(), attribute: attr },
            e => SourceValue::Expr(e),
        }
    }

    pub fn to_expr(&self) -> Expr {
        match self {
            SourceValue::Literal(Value::Int(v)) => Expr::Int(*v),
            SourceValue::Literal(Value::Real(v)) => Expr::Real(*v),
            SourceValue::Literal(Value::Bool(b)) => Expr::Bool(*b),
            SourceValue::Literal(Value::Text(s)) => Expr::Text(s.clone()),
            SourceValue::Literal(Value::Symbol(s)) => Expr::Symbol(s.clone()),
            SourceValue::AttributeRef { owner, attribute } => {
                Expr::Ref { owner: owner.clone(), attr: attribute.clone() }
            }
            SourceValue::Expr(e) => e.clone(),
        }
    }

    pub fn literal(&self) -> Option<f64> {
        match self {
            SourceValue::Literal(v) => v.as_f64(),
            _ => None,
        }
    }
}

impl fmt::Display for SourceValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_expr())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputDatasetSpec {
    pub name: Ident,
    pub interval: i64,
    pub path: String,
    pub series: Vec<SeriesSpec>,
    pub span: Span,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeriesSpec {
    pub label: Ident,
    pub expr: Expr,
    pub span: Span,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Concern {
    pub name: Ident,
    pub members: Vec<Ident>,
    pub span: Span,
}

// ---------------------------------------------------------------------------
// State machines

#[derive(Clone, Debug, PartialEq)]
pub struct StateMachineSpec {
    pub name: Ident,
    pub states: Vec<Ident>,
    pub initial: Ident,
    pub transitions: Vec<Transition>,
    pub span: Span,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub from: Ident,
    pub to: Ident,
    pub trigger: Trigger,
    pub guard: Option<Expr>,
    pub abortion: Option<Abortion>,
    pub span: Span,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Abortion {
    pub probability: SourceValue,
    pub abort_to: Ident,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Combinator {
    AllOf,
    AnyOf,
}

impl Combinator {
    pub fn keyword(self) -> &'static str {
        match self {
            Combinator::AllOf => "all_of",
            Combinator::AnyOf => "any_of",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Trigger {
    /// Fires with the given probability on every tick.
    Probabilistic { rate: SourceValue },
    /// Fires once the state has been occupied for the given number of ticks.
    Deterministic { ticks: SourceValue },
    /// Fires on the first tick the condition holds.
    Conditional { condition: Expr },
    Custom { combinator: Combinator, triggers: Vec<Trigger> },
    /// Disease transmission; only produced when compiling disease models.
    Interaction,
}

impl Trigger {
    pub fn probabilistic(rate: f64) -> Self {
        Trigger::Probabilistic { rate: SourceValue::real(rate) }
    }

    pub fn deterministic(ticks: i64) -> Self {
        Trigger::Deterministic { ticks: SourceValue::int(ticks) }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Trigger::Probabilistic { .. } => "probabilistic",
            Trigger::Deterministic { .. } => "deterministic",
            Trigger::Conditional { .. } => "conditional",
            Trigger::Custom { .. } => "custom",
            Trigger::Interaction => "interaction",
        }
    }
}

// ---------------------------------------------------------------------------
// Traffic signal plans

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseSpec {
    pub name: Ident,
    pub green: Vec<Ident>,
    pub duration: i64,
    pub span: Span,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanSpec {
    pub name: Ident,
    pub phases: Vec<PhaseSpec>,
    pub span: Span,
}

impl PlanSpec {
    pub fn cycle_length(&self) -> i64 {
        self.phases.iter().map(|p| p.duration).sum()
    }
}

// ---------------------------------------------------------------------------
// Diseases

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum CompartmentKind {
    SIR,
    SEIR,
    PSIR,
    Custom,
}

impl CompartmentKind {
    pub fn keyword(self) -> &'static str {
        match self {
            CompartmentKind::SIR => "SIR",
            CompartmentKind::SEIR => "SEIR",
            CompartmentKind::PSIR => "PSIR",
            CompartmentKind::Custom => "custom",
        }
    }

    pub fn from_keyword(s: &str) -> Option<Self> {
        Some(match s {
            "SIR" => CompartmentKind::SIR,
            "SEIR" => CompartmentKind::SEIR,
            "PSIR" => CompartmentKind::PSIR,
            "custom" => CompartmentKind::Custom,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompartmentEdge {
    pub from: Ident,
    pub to: Ident,
    pub span: Span,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiseaseModelSpec {
    pub name: Ident,
    pub kind: CompartmentKind,
    /// Declared compartments; only meaningful (and required) for custom models.
    pub compartments: Vec<Ident>,
    /// Explicit infection edge. Optional for the standard models, required
    /// for custom ones.
    pub infection: Option<CompartmentEdge>,
    pub transmission: Option<TransmissionSpec>,
    pub durations: Vec<DurationSpec>,
    pub mortality: Vec<MortalitySpec>,
    pub passive_immunity: Option<Trigger>,
    pub recovered_immunity: Option<Trigger>,
    pub span: Span,
}

impl DiseaseModelSpec {
    pub fn new(name: impl Into<Ident>, kind: CompartmentKind) -> Self {
        DiseaseModelSpec {
            name: name.into(),
            kind,
            compartments: Vec::new(),
            infection: None,
            transmission: None,
            durations: Vec::new(),
            mortality: Vec::new(),
            passive_immunity: None,
            recovered_immunity: None,
            span: Span::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DurationSpec {
    pub compartment: Ident,
    /// Successor compartment; implied by the standard models.
    pub target: Option<Ident>,
    pub trigger: Trigger,
    pub span: Span,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Interaction {
    Proximity { distance: f64 },
    Contact,
}

impl Interaction {
    pub fn distance(&self) -> f64 {
        match *self {
            Interaction::Proximity { distance } => distance,
            Interaction::Contact => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransmissionSpec {
    pub interaction: Interaction,
    pub probability: SourceValue,
    /// Infectious compartments; `[I]` when empty.
    pub infectious: Vec<Ident>,
    pub condition: Option<Expr>,
    /// Entity types whose instances can contaminate.
    pub entity_sources: Vec<Ident>,
    pub span: Span,
}

impl TransmissionSpec {
    pub fn infectious_states(&self) -> Vec<&str> {
        if self.infectious.is_empty() {
            vec!["I"]
        } else {
            self.infectious.iter().map(String::as_str).collect()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DeathRateEvaluation {
    EveryTimeunit,
    SpecificTimeunit(i64),
    WhenCondition(Expr),
    LeavingCompartment,
}

impl DeathRateEvaluation {
    pub fn keyword(&self) -> &'static str {
        match self {
            DeathRateEvaluation::EveryTimeunit => "every_timeunit",
            DeathRateEvaluation::SpecificTimeunit(_) => "specific_timeunit",
            DeathRateEvaluation::WhenCondition(_) => "when_condition",
            DeathRateEvaluation::LeavingCompartment => "leaving_compartment",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MortalitySpec {
    pub compartment: Ident,
    pub rate: SourceValue,
    pub evaluation: DeathRateEvaluation,
    pub span: Span,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Quantity {
    Deterministic(i64),
    Probabilistic(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Selection {
    Arbitrary,
    Eligible(Expr),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Periodicity {
    Aperiodic,
    Periodic(i64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiseaseIntroductionSpec {
    pub disease: Ident,
    pub quantity: Quantity,
    pub selection: Selection,
    pub periodicity: Periodicity,
    pub span: Span,
}
