//! Discrete-time simulation runtime.
//!
//! A run is single-threaded and consumes one ChaCha8 stream in a fixed
//! schedule, so a `(model, seed, ticks)` triple always produces the same
//! world history. Each tick runs these phases in order:
//!
//! 1. periodic disease introductions (applied immediately);
//! 2. per agent in ascending id: mobility, signal-plan step, generic state
//!    machines (applied immediately), disease machines (buffered);
//! 3. buffered disease changes applied, dead agents removed;
//! 4. signal controllers release one queued vehicle per green stream;
//! 5. learning controllers accumulate reward and, when their plan cycle has
//!    completed, update their Q-table and pick the next plan;
//! 6. output datasets sampled when `(tick + 1) % interval == 0`.
//!
//! Reordering any of these consumes the random stream differently and is a
//! breaking change to every golden output.

mod io;
mod scope;
mod space;

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::disease::{introduce, CompiledDisease, PoolMember};
use crate::expr::{EvalError, Expr, Value};
use crate::metamodel::{
    validate, AttributeSpec, Capability, CreationalStrategy, FlowControlSpec, Model, Placement,
    QLearningSpec, Selection, Topology, TransmissionSpec,
};
use crate::statemachine::{Machine, MachineInstance, StepError, TransitionEvent};
use crate::traffic::{discretize_state, plan_to_machine, q_update, select_action, QTable, StateKey};

pub use io::{format_g, haversine, load_gis_points, load_osm_graph, parse_gis_points, parse_osm, GisPoint, LoadError};
pub use space::{approach_direction, Graph, GraphEdge, GraphNode, Point, Space};

use scope::{AgentStep, Scope};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("model is not valid:\n{0}")]
    Invalid(String),
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error("{0}")]
    Build(String),
    #[error("tick {tick}: {path}: {source}")]
    Eval { tick: u64, path: String, source: EvalError },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub max_ticks: u64,
    /// Where output datasets are written; nothing is written when absent.
    pub out_dir: Option<PathBuf>,
    /// Directory that relative input paths (GIS, OSM, libraries) resolve against.
    pub base_dir: PathBuf,
    pub record_events: bool,
}

impl RunConfig {
    pub fn new(seed: u64, max_ticks: u64) -> Self {
        RunConfig { seed, max_ticks, out_dir: None, base_dir: PathBuf::from("."), record_events: false }
    }

    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = dir.into();
        self
    }

    pub fn with_out_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.out_dir = Some(dir.into());
        self
    }

    pub fn recording(mut self) -> Self {
        self.record_events = true;
        self
    }
}

// ---------------------------------------------------------------------------
// Runtime data

/// Static per-type information derived from the model.
#[derive(Clone, Debug)]
pub struct TypeInfo {
    pub name: String,
    pub is_agent: bool,
    pub attributes: Vec<AttributeSpec>,
    pub mobility: Option<f64>,
    /// Indices into [`World::machines`] of attached generic machines.
    pub machines: Vec<usize>,
    /// Indices into [`World::diseases`].
    pub diseases: Vec<usize>,
    pub controller: Option<ControllerInfo>,
    attr_index: HashMap<String, usize>,
}

impl TypeInfo {
    pub fn attr_index(&self, name: &str) -> Option<usize> {
        self.attr_index.get(name).copied()
    }
}

#[derive(Clone, Debug)]
pub struct ControllerInfo {
    pub flow: FlowControlSpec,
    /// Indices into [`World::machines`] of the plans this controller runs.
    pub plans: Vec<usize>,
    /// Per plan, per phase: green flag per declared stream.
    pub green: Vec<Vec<Vec<bool>>>,
    pub learning: Option<QLearningSpec>,
}

#[derive(Clone, Debug)]
pub struct DiseaseRuntime {
    pub name: String,
    pub machine: Machine,
    pub susceptible: usize,
    pub infected: usize,
    pub infectious: Vec<bool>,
    pub transmission: TransmissionSpec,
    /// Entity type ids that can contaminate.
    pub entity_sources: Vec<usize>,
}

/// Where a vehicle is on the road graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Vehicle {
    AtNode(usize),
    /// Travelling `from -> to`; arrives when `remaining` reaches zero.
    OnEdge { from: usize, to: usize, remaining: u64 },
    /// Waiting in a controller's stream queue at `node`.
    Queued { node: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Learner {
    pub table: QTable,
    pub state: StateKey,
    pub action: usize,
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Controller {
    pub node: Option<usize>,
    /// FIFO of vehicle ids per declared stream.
    pub queues: Vec<VecDeque<u64>>,
    /// Index into the controller's plan list.
    pub plan: usize,
    pub phase: MachineInstance,
    pub cycle_completed: bool,
    pub learner: Option<Learner>,
    type_id: usize,
}

impl Controller {
    pub fn queue_lengths(&self) -> Vec<usize> {
        self.queues.iter().map(VecDeque::len).collect()
    }

    pub fn green(&self, world: &World) -> Vec<bool> {
        let info = world.types[self.type_id].controller.as_ref().expect("controller type");
        info.green[self.plan][self.phase.current].clone()
    }
}

/// An agent or entity.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub id: u64,
    pub type_id: usize,
    pub pos: Point,
    /// Values in attribute declaration order.
    pub attrs: Vec<Value>,
    pub machines: Vec<MachineInstance>,
    pub diseases: Vec<MachineInstance>,
    pub vehicle: Option<Vehicle>,
    pub controller: Option<Controller>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Counters {
    pub deaths: BTreeMap<String, u64>,
    pub ever_infected: BTreeMap<String, u64>,
    /// Vehicles released through signalized intersections.
    pub arrivals: u64,
    pub created: BTreeMap<String, u64>,
    pub dead: BTreeMap<String, u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum EventKind {
    Introduced { disease: String },
    Transition { machine: String, from: String, to: String },
    Died { disease: String },
    Released { node: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Event {
    pub tick: u64,
    pub agent: u64,
    pub kind: EventKind,
}

/// Rows of one output dataset; the first column is the tick.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputTable {
    pub name: String,
    pub path: String,
    pub interval: u64,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

impl OutputTable {
    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(csv_cell).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn column(&self, label: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == label)?;
        Some(self.rows.iter().map(|r| r[i].as_f64().unwrap_or(f64::NAN)).collect())
    }
}

fn csv_cell(v: &Value) -> String {
    match v {
        Value::Int(i) => i.to_string(),
        Value::Real(r) => format_g(*r),
        Value::Bool(b) => (*b as u8).to_string(),
        other => other.to_string(),
    }
}

pub struct World {
    pub tick: u64,
    pub space: Space,
    pub types: Vec<TypeInfo>,
    pub machines: Vec<Machine>,
    pub diseases: Vec<DiseaseRuntime>,
    /// Alive agents in ascending id order.
    pub agents: Vec<Instance>,
    pub entities: Vec<Instance>,
    pub counters: Counters,
    pub outputs: Vec<OutputTable>,
    pub events: Vec<Event>,
    model: Arc<Model>,
    record_events: bool,
    next_id: u64,
    rng: ChaCha8Rng,
    type_ids: HashMap<String, usize>,
    /// Controller agent id per graph node.
    node_controller: HashMap<usize, u64>,
}

impl World {
    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn type_id(&self, name: &str) -> Option<usize> {
        self.type_ids.get(name).copied()
    }

    pub fn agent(&self, id: u64) -> Option<&Instance> {
        self.agents.binary_search_by_key(&id, |a| a.id).ok().map(|i| &self.agents[i])
    }

    /// Current state of `machine` (generic machine, disease or active plan)
    /// on `who`.
    pub fn state_name(&self, who: &Instance, machine: &str) -> Option<&str> {
        let ty = &self.types[who.type_id];
        for (slot, &m) in ty.machines.iter().enumerate() {
            if self.machines[m].name == machine {
                return Some(&self.machines[m].states[who.machines[slot].current]);
            }
        }
        for (slot, &d) in ty.diseases.iter().enumerate() {
            if self.diseases[d].name == machine {
                return Some(&self.diseases[d].machine.states[who.diseases[slot].current]);
            }
        }
        let (info, c) = (ty.controller.as_ref()?, who.controller.as_ref()?);
        let plan = &self.machines[info.plans[c.plan]];
        (plan.name == machine).then(|| plan.states[c.phase.current].as_str())
    }

    /// Alive agents per compartment of `disease`, in compartment order.
    pub fn compartment_counts(&self, disease: &str) -> Vec<(String, usize)> {
        let Some(d) = self.diseases.iter().position(|x| x.name == disease) else { return Vec::new() };
        let machine = &self.diseases[d].machine;
        let mut counts = vec![0usize; machine.states.len()];
        for a in &self.agents {
            if let Some(slot) = self.types[a.type_id].diseases.iter().position(|&x| x == d) {
                counts[a.diseases[slot].current] += 1;
            }
        }
        machine.states.iter().cloned().zip(counts).collect()
    }

    /// SHA-256 over the complete simulation state, hex encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.tick.to_le_bytes());
        h.update(self.rng.get_word_pos().to_le_bytes());
        h.update(self.next_id.to_le_bytes());
        for inst in self.agents.iter().chain(&self.entities) {
            h.update(inst.id.to_le_bytes());
            h.update((inst.type_id as u64).to_le_bytes());
            h.update(inst.pos.x.to_bits().to_le_bytes());
            h.update(inst.pos.y.to_bits().to_le_bytes());
            for v in &inst.attrs {
                h.update(v.to_string().as_bytes());
                h.update([0]);
            }
            for m in inst.machines.iter().chain(&inst.diseases) {
                h.update((m.current as u64).to_le_bytes());
                h.update(m.dwell.to_le_bytes());
            }
            if let Some(v) = &inst.vehicle {
                h.update(format!("{v:?}").as_bytes());
            }
            if let Some(c) = &inst.controller {
                for q in &c.queues {
                    h.update((q.len() as u64).to_le_bytes());
                    for id in q {
                        h.update(id.to_le_bytes());
                    }
                }
                h.update((c.plan as u64).to_le_bytes());
                h.update((c.phase.current as u64).to_le_bytes());
                h.update(c.phase.dwell.to_le_bytes());
                if let Some(l) = &c.learner {
                    for (s, a, v) in l.table.iter() {
                        h.update(format!("{s:?}{a}").as_bytes());
                        h.update(v.to_bits().to_le_bytes());
                    }
                    h.update(l.reward.to_bits().to_le_bytes());
                }
            }
        }
        h.update(format!("{:?}", self.counters).as_bytes());
        let mut hex = String::with_capacity(64);
        for b in h.finalize() {
            write!(hex, "{b:02x}").unwrap();
        }
        hex
    }

    fn event(&mut self, agent: u64, kind: EventKind) {
        if self.record_events {
            self.events.push(Event { tick: self.tick, agent, kind });
        }
    }

    fn eval_error(&self, path: impl Into<String>, source: EvalError) -> EngineError {
        EngineError::Eval { tick: self.tick, path: path.into(), source }
    }

    fn step_error(&self, e: StepError) -> EngineError {
        EngineError::Eval { tick: self.tick, path: e.path, source: e.source }
    }

    /// Agents within `radius` of `pos` (toroidal on wrapped grids), ascending
    /// id, excluding `exclude`.
    pub fn neighbors_within(&self, pos: Point, radius: f64, exclude: Option<u64>) -> Vec<u64> {
        self.agents
            .iter()
            .filter(|a| Some(a.id) != exclude && self.space.distance(pos, a.pos) <= radius)
            .map(|a| a.id)
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Construction

/// Realizes the environment, runs every creational strategy in declaration
/// order, applies tick-0 introductions and samples the outputs at tick 0.
pub fn build_world(model: &Model, config: &RunConfig) -> Result<World, EngineError> {
    let model = Arc::new(model.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let resolve = |p: &str| config.base_dir.join(p);

    let space = match &model.environment.topology {
        Topology::Grid { width, height, wrap } => Space::Grid { width: *width, height: *height, wrap: *wrap },
        Topology::Cartesian { x_min, x_max, y_min, y_max } => {
            Space::Cartesian { x_min: *x_min, x_max: *x_max, y_min: *y_min, y_max: *y_max }
        }
        Topology::Graph { source } => Space::Graph(match source {
            CreationalStrategy::OsmGraph { path } => load_osm_graph(&resolve(path))?,
            CreationalStrategy::InlineEdgeList { nodes, edges } => inline_graph(nodes, edges)?,
            _ => return Err(EngineError::Build("graph source must be an OSM file or an edge list".into())),
        }),
    };

    // machines: generic machines and plans share one namespace
    let mut machines = Vec::new();
    let mut machine_ids = HashMap::new();
    for m in model.machines() {
        machine_ids.insert(m.name.clone(), machines.len());
        machines.push(Machine::from_spec(m).map_err(|e| EngineError::Build(e.to_string()))?);
    }
    for p in model.plans() {
        machine_ids.insert(p.name.clone(), machines.len());
        machines.push(Machine::from_spec(&plan_to_machine(p)).map_err(|e| EngineError::Build(e.to_string()))?);
    }

    let mut type_ids = HashMap::new();
    let mut type_names = Vec::new();
    for item in &model.items {
        match item {
            crate::metamodel::Item::Agent(a) => type_names.push((a.name.clone(), true)),
            crate::metamodel::Item::Entity(e) => type_names.push((e.name.clone(), false)),
            _ => {}
        }
    }
    for (i, (n, _)) in type_names.iter().enumerate() {
        type_ids.insert(n.clone(), i);
    }

    let mut diseases = Vec::new();
    let mut disease_ids = HashMap::new();
    for d in model.diseases() {
        let c = CompiledDisease::compile(d).map_err(EngineError::Build)?;
        let entity_sources = c.transmission.entity_sources.iter().filter_map(|e| type_ids.get(e).copied()).collect();
        disease_ids.insert(d.name.clone(), diseases.len());
        diseases.push(DiseaseRuntime {
            name: c.name,
            machine: c.machine,
            susceptible: c.susceptible,
            infected: c.infected,
            infectious: c.infectious,
            transmission: c.transmission,
            entity_sources,
        });
    }

    let mut types = Vec::new();
    for (name, is_agent) in &type_names {
        let (attributes, caps): (Vec<AttributeSpec>, &[crate::metamodel::CapabilityRef]) = if *is_agent {
            let a = model.agent(name).expect("declared agent");
            (a.attributes.clone(), &a.capabilities)
        } else {
            (model.entity(name).expect("declared entity").attributes.clone(), &[])
        };
        let mut info = TypeInfo {
            name: name.clone(),
            is_agent: *is_agent,
            attr_index: attributes.iter().enumerate().map(|(i, a)| (a.name.clone(), i)).collect(),
            attributes,
            mobility: None,
            machines: Vec::new(),
            diseases: Vec::new(),
            controller: None,
        };
        let mut flow = None;
        let mut plans = Vec::new();
        let mut learning = None;
        for cap in caps {
            match &cap.kind {
                Capability::Mobility { step } => info.mobility = Some(*step),
                Capability::Disease { disease } => info.diseases.push(lookup(&disease_ids, disease, "disease")?),
                Capability::StateMachine { machine } => {
                    let id = lookup(&machine_ids, machine, "state machine")?;
                    if model.plan(machine).is_some() {
                        plans.push(id);
                    } else {
                        info.machines.push(id);
                    }
                }
                Capability::FlowControl(f) => flow = Some(f.clone()),
                Capability::QLearning(q) => {
                    for p in &q.plans {
                        plans.push(lookup(&machine_ids, p, "plan")?);
                    }
                    learning = Some(q.clone());
                }
                Capability::External { library, .. } => {
                    let path = resolve(library);
                    if !path.exists() {
                        return Err(EngineError::Build(format!(
                            "agent {name}: external library {} not found",
                            path.display()
                        )));
                    }
                }
                Capability::Adaptation { .. } => {
                    return Err(EngineError::Build("adaptation capability is not supported".into()))
                }
            }
        }
        if let Some(flow) = flow {
            if plans.is_empty() {
                return Err(EngineError::Build(format!("agent {name}: flow control without a plan")));
            }
            let green = plans
                .iter()
                .map(|&p| {
                    let plan = model.plan(&machines[p].name).expect("plan");
                    plan.phases
                        .iter()
                        .map(|ph| flow.streams.iter().map(|s| ph.green.contains(&s.id)).collect())
                        .collect()
                })
                .collect();
            info.controller = Some(ControllerInfo { flow, plans, green, learning });
        }
        types.push(info);
    }

    let mut world = World {
        tick: 0,
        space,
        types,
        machines,
        diseases,
        agents: Vec::new(),
        entities: Vec::new(),
        counters: Counters::default(),
        outputs: Vec::new(),
        events: Vec::new(),
        model: model.clone(),
        record_events: config.record_events,
        next_id: 0,
        rng: ChaCha8Rng::seed_from_u64(0),
        type_ids,
        node_controller: HashMap::new(),
    };
    for d in model.diseases() {
        world.counters.deaths.insert(d.name.clone(), 0);
        world.counters.ever_infected.insert(d.name.clone(), 0);
    }
    for (name, _) in &type_names {
        world.counters.created.insert(name.clone(), 0);
        world.counters.dead.insert(name.clone(), 0);
    }

    for item in &model.items {
        let (name, creation) = match item {
            crate::metamodel::Item::Agent(a) => (&a.name, &a.creation),
            crate::metamodel::Item::Entity(e) => (&e.name, &e.creation),
            _ => continue,
        };
        let t = world.type_ids[name];
        create(&mut world, t, creation, config, &mut rng)?;
    }

    for o in model.outputs() {
        let mut columns = vec!["tick".to_string()];
        columns.extend(o.series.iter().map(|s| s.label.clone()));
        world.outputs.push(OutputTable {
            name: o.name.clone(),
            path: o.path.clone(),
            interval: o.interval.max(1) as u64,
            columns,
            rows: Vec::new(),
        });
    }

    introductions(&mut world, &mut rng)?;
    sample_outputs(&mut world, true)?;
    world.rng = rng;
    Ok(world)
}

fn lookup(ids: &HashMap<String, usize>, name: &str, what: &str) -> Result<usize, EngineError> {
    ids.get(name).copied().ok_or_else(|| EngineError::Build(format!("unknown {what} `{name}`")))
}

fn inline_graph(
    nodes: &[crate::metamodel::InlineNode],
    edges: &[crate::metamodel::InlineEdge],
) -> Result<Graph, EngineError> {
    let index: HashMap<&str, usize> = nodes.iter().enumerate().map(|(i, n)| (n.name.as_str(), i)).collect();
    let gnodes: Vec<GraphNode> =
        nodes.iter().map(|n| GraphNode { key: n.name.clone(), pos: Point::new(n.x, n.y) }).collect();
    let mut gedges = Vec::new();
    for e in edges {
        let find = |k: &str| {
            index.get(k).copied().ok_or_else(|| EngineError::Build(format!("edge references unknown node `{k}`")))
        };
        let (a, b) = (find(&e.a)?, find(&e.b)?);
        let length = e.length.unwrap_or_else(|| {
            let (p, q) = (gnodes[a].pos, gnodes[b].pos);
            (p.x - q.x).hypot(p.y - q.y)
        });
        gedges.push(GraphEdge { a, b, length });
    }
    Ok(Graph::new(gnodes, gedges))
}

fn create(
    world: &mut World,
    t: usize,
    creation: &CreationalStrategy,
    config: &RunConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(), EngineError> {
    let name = world.types[t].name.clone();
    let mut placements: Vec<(Point, Option<usize>, Vec<(String, String)>)> = Vec::new();
    match creation {
        CreationalStrategy::FixedCount { count, placement } => match placement {
            Placement::Random => {
                for _ in 0..(*count).max(0) {
                    let (p, node) = world.space.random_point(rng);
                    placements.push((p, node, Vec::new()));
                }
            }
            Placement::At(points) => {
                for &(x, y) in points {
                    let p = Point::new(x, y);
                    if !world.space.contains(p) || matches!(world.space, Space::Graph(_)) {
                        return Err(EngineError::Build(format!("{name}: position ({x}, {y}) is outside the environment")));
                    }
                    placements.push((p, None, Vec::new()));
                }
            }
        },
        CreationalStrategy::GisPoints { path } => {
            for gp in load_gis_points(&config.base_dir.join(path))? {
                let p = match world.space {
                    // points map to the cell containing them
                    Space::Grid { .. } => Point::new(gp.x.floor(), gp.y.floor()),
                    _ => Point::new(gp.x, gp.y),
                };
                if !world.space.contains(p) || matches!(world.space, Space::Graph(_)) {
                    return Err(EngineError::Build(format!(
                        "{name}: point ({}, {}) from {path} is outside the environment",
                        gp.x, gp.y
                    )));
                }
                placements.push((p, None, gp.attributes));
            }
        }
        CreationalStrategy::Intersections => {
            let Space::Graph(g) = &world.space else {
                return Err(EngineError::Build(format!("{name}: intersections need a graph environment")));
            };
            for n in g.intersections() {
                placements.push((g.nodes[n].pos, Some(n), Vec::new()));
            }
        }
        CreationalStrategy::OsmGraph { .. } | CreationalStrategy::InlineEdgeList { .. } => {
            return Err(EngineError::Build(format!("{name}: graph sources cannot create instances")))
        }
    }
    for (pos, node, overrides) in placements {
        spawn(world, t, pos, node, &overrides, rng)?;
    }
    Ok(())
}

fn spawn(
    world: &mut World,
    t: usize,
    pos: Point,
    node: Option<usize>,
    overrides: &[(String, String)],
    rng: &mut ChaCha8Rng,
) -> Result<(), EngineError> {
    let info = &world.types[t];
    let mut attrs = Vec::with_capacity(info.attributes.len());
    for a in &info.attributes {
        let v = Scope::global(world)
            .value(&a.default)
            .map_err(|e| world.eval_error(format!("{}/attr {}", info.name, a.name), e))?;
        attrs.push(a.kind.coerce(v));
    }
    // unknown keys in point files are ignored
    for (k, raw) in overrides {
        if let Some(i) = info.attr_index(k) {
            let kind = info.attributes[i].kind;
            attrs[i] = parse_attribute(kind, raw)
                .ok_or_else(|| EngineError::Build(format!("{}: cannot read {k}={raw} as {}", info.name, kind.keyword())))?;
        }
    }
    let machines = info.machines.iter().map(|&m| world.machines[m].instantiate()).collect();
    let diseases = info.diseases.iter().map(|&d| world.diseases[d].machine.instantiate()).collect();
    let on_graph = matches!(world.space, Space::Graph(_));
    let vehicle = (on_graph && info.mobility.is_some() && info.is_agent).then(|| Vehicle::AtNode(node.unwrap_or(0)));
    let controller = match &info.controller {
        Some(ci) => {
            let learner = match &ci.learning {
                Some(q) => {
                    let table = QTable::new();
                    let state = discretize_state(&vec![0; ci.flow.streams.len()], &q.bins);
                    let action = select_action(&table, &state, ci.plans.len(), q.epsilon, rng);
                    Some(Learner { table, state, action, reward: 0.0 })
                }
                None => None,
            };
            let plan = learner.as_ref().map_or(0, |l| l.action);
            Some(Controller {
                node,
                queues: vec![VecDeque::new(); ci.flow.streams.len()],
                plan,
                phase: world.machines[ci.plans[plan]].instantiate(),
                cycle_completed: false,
                learner,
                type_id: t,
            })
        }
        None => None,
    };
    let id = world.next_id;
    world.next_id += 1;
    if let (Some(_), Some(n)) = (&controller, node) {
        world.node_controller.entry(n).or_insert(id);
    }
    let inst = Instance { id, type_id: t, pos, attrs, machines, diseases, vehicle, controller };
    let name = world.types[t].name.clone();
    *world.counters.created.get_mut(&name).expect("type counter") += 1;
    if world.types[t].is_agent {
        world.agents.push(inst);
    } else {
        world.entities.push(inst);
    }
    Ok(())
}

fn parse_attribute(kind: crate::metamodel::AttrKind, raw: &str) -> Option<Value> {
    use crate::metamodel::AttrKind::*;
    Some(match kind {
        Integer => Value::Int(raw.parse().ok()?),
        Real => Value::Real(raw.parse::<f64>().ok().filter(|v| v.is_finite())?),
        Boolean => Value::Bool(raw.parse().ok()?),
        Identifier => Value::Symbol(raw.trim_start_matches(':').to_string()),
        Text => Value::Text(raw.to_string()),
    })
}

// ---------------------------------------------------------------------------
// Scheduling

/// Introductions due at the current tick, in declaration order.
fn introductions(world: &mut World, rng: &mut ChaCha8Rng) -> Result<(), EngineError> {
    let model = world.model.clone();
    for (i, spec) in model.introductions().enumerate() {
        if !crate::disease::introduction_fires(&spec.periodicity, world.tick) {
            continue;
        }
        let Some(d) = world.diseases.iter().position(|x| x.name == spec.disease) else { continue };
        let mut pool = Vec::new();
        for a in &world.agents {
            let Some(slot) = world.types[a.type_id].diseases.iter().position(|&x| x == d) else { continue };
            let susceptible = a.diseases[slot].current == world.diseases[d].susceptible;
            let eligible = match &spec.selection {
                Selection::Arbitrary => true,
                Selection::Eligible(e) if susceptible => crate::expr::eval_bool(e, &Scope::of(world, a))
                    .map_err(|err| world.eval_error(format!("introduce {i} {}", spec.disease), err))?,
                Selection::Eligible(_) => false,
            };
            pool.push(PoolMember { id: a.id, susceptible, eligible });
        }
        let chosen = introduce(&pool, spec, world.tick, rng);
        let infected = world.diseases[d].infected;
        for id in &chosen {
            let idx = world.agents.binary_search_by_key(id, |a| a.id).expect("pool member is alive");
            let slot = world.types[world.agents[idx].type_id].diseases.iter().position(|&x| x == d).unwrap();
            world.agents[idx].diseases[slot] = MachineInstance { current: infected, dwell: 0, terminated: false };
            world.event(*id, EventKind::Introduced { disease: spec.disease.clone() });
        }
        *world.counters.ever_infected.get_mut(&spec.disease).expect("disease counter") += chosen.len() as u64;
    }
    Ok(())
}

struct DiseaseUpdate {
    agent: usize,
    slot: usize,
    next: MachineInstance,
    event: TransitionEvent,
}

/// Advances the world by one tick.
pub fn tick(world: &mut World) -> Result<(), EngineError> {
    let mut rng = std::mem::replace(&mut world.rng, ChaCha8Rng::seed_from_u64(0));
    let result = run_phases(world, &mut rng);
    world.rng = rng;
    result
}

fn run_phases(world: &mut World, rng: &mut ChaCha8Rng) -> Result<(), EngineError> {
    // 1. controller tasks
    if world.tick > 0 {
        introductions(world, rng)?;
    }

    // 2. agents in ascending id
    let mut buffer = Vec::new();
    for i in 0..world.agents.len() {
        mobility(world, i, rng)?;
        signal_plan(world, i, rng)?;
        generic_machines(world, i, rng)?;
        disease_steps(world, i, rng, &mut buffer)?;
    }

    // 3. synchronous disease update
    apply_disease_updates(world, buffer);

    // 4. queue service
    release_vehicles(world, rng);

    // 5. learning epochs
    learning(world, rng)?;

    // 6. outputs
    world.tick += 1;
    sample_outputs(world, false)
}

fn mobility(world: &mut World, i: usize, rng: &mut ChaCha8Rng) -> Result<(), EngineError> {
    let a = &world.agents[i];
    let Some(step) = world.types[a.type_id].mobility else { return Ok(()) };
    let Some(vehicle) = a.vehicle else {
        let pos = world.space.random_walk(a.pos, step, rng);
        world.agents[i].pos = pos;
        return Ok(());
    };
    let Space::Graph(graph) = &world.space else { return Ok(()) };
    let next = match vehicle {
        Vehicle::AtNode(n) => depart(graph, n, step, rng),
        Vehicle::OnEdge { from, to, remaining } if remaining > 1 => Vehicle::OnEdge { from, to, remaining: remaining - 1 },
        Vehicle::OnEdge { from, to, .. } => {
            let arrived = Vehicle::OnEdge { from, to, remaining: 0 };
            world.agents[i].pos = graph.nodes[to].pos;
            match world.node_controller.get(&to).copied() {
                Some(cid) => {
                    let id = world.agents[i].id;
                    let dir = approach_direction(graph.nodes[to].pos, graph.nodes[from].pos);
                    match enqueue(world, cid, dir, id) {
                        Enqueue::Queued => Vehicle::Queued { node: to },
                        Enqueue::Full => arrived,
                        Enqueue::Uncontrolled => depart_graph(world, to, step, rng),
                    }
                }
                None => depart_graph(world, to, step, rng),
            }
        }
        Vehicle::Queued { node } => Vehicle::Queued { node },
    };
    world.agents[i].vehicle = Some(next);
    Ok(())
}

fn depart_graph(world: &World, node: usize, speed: f64, rng: &mut ChaCha8Rng) -> Vehicle {
    match &world.space {
        Space::Graph(g) => depart(g, node, speed, rng),
        _ => Vehicle::AtNode(node),
    }
}

/// Picks a uniformly random incident edge and starts traversing it.
fn depart(graph: &Graph, node: usize, speed: f64, rng: &mut ChaCha8Rng) -> Vehicle {
    let options = graph.neighbors(node);
    if options.is_empty() || speed <= 0.0 {
        return Vehicle::AtNode(node);
    }
    let (to, e) = options[rng.random_range(0..options.len())];
    let ticks = (graph.edges[e].length / speed).ceil().max(1.0) as u64;
    Vehicle::OnEdge { from: node, to, remaining: ticks }
}

enum Enqueue {
    Queued,
    Full,
    Uncontrolled,
}

fn enqueue(world: &mut World, controller_id: u64, dir: &str, vehicle: u64) -> Enqueue {
    let Ok(ci) = world.agents.binary_search_by_key(&controller_id, |a| a.id) else {
        return Enqueue::Uncontrolled;
    };
    let t = world.agents[ci].type_id;
    let info = world.types[t].controller.as_ref().expect("controller type");
    let Some(s) = info.flow.stream_index(dir) else { return Enqueue::Uncontrolled };
    let capacity = info.flow.streams[s].capacity;
    let c = world.agents[ci].controller.as_mut().expect("controller state");
    if capacity.is_some_and(|cap| c.queues[s].len() as i64 >= cap) {
        return Enqueue::Full;
    }
    c.queues[s].push_back(vehicle);
    Enqueue::Queued
}

fn signal_plan(world: &mut World, i: usize, rng: &mut ChaCha8Rng) -> Result<(), EngineError> {
    let a = &world.agents[i];
    let Some(c) = &a.controller else { return Ok(()) };
    let info = world.types[a.type_id].controller.as_ref().expect("controller type");
    let machine = &world.machines[info.plans[c.plan]];
    let mut next = c.phase;
    let mut ctx = AgentStep { scope: Scope::of(world, a), disease: None };
    let ev = machine.step(&mut next, &mut ctx, rng).map_err(|e| world.step_error(e))?;
    let completed = matches!(ev, TransitionEvent::Moved { to, .. } if to == machine.initial);
    let (id, name) = (a.id, machine.name.clone());
    let names = machine.states.clone();
    let c = world.agents[i].controller.as_mut().expect("controller state");
    c.phase = next;
    c.cycle_completed |= completed;
    if let TransitionEvent::Moved { from, to } = ev {
        world.event(id, EventKind::Transition { machine: name, from: names[from].clone(), to: names[to].clone() });
    }
    Ok(())
}

fn generic_machines(world: &mut World, i: usize, rng: &mut ChaCha8Rng) -> Result<(), EngineError> {
    let t = world.agents[i].type_id;
    for slot in 0..world.types[t].machines.len() {
        let a = &world.agents[i];
        let machine = &world.machines[world.types[t].machines[slot]];
        let mut next = a.machines[slot];
        let mut ctx = AgentStep { scope: Scope::of(world, a), disease: None };
        let ev = machine.step(&mut next, &mut ctx, rng).map_err(|e| world.step_error(e))?;
        let record = transition_kind(machine, ev);
        let id = a.id;
        world.agents[i].machines[slot] = next;
        if let Some(kind) = record {
            world.event(id, kind);
        }
    }
    Ok(())
}

fn transition_kind(machine: &Machine, ev: TransitionEvent) -> Option<EventKind> {
    let (from, to) = match ev {
        TransitionEvent::None => return None,
        TransitionEvent::Moved { from, to } => (from, to),
        TransitionEvent::Aborted { from, abort_to } => (from, abort_to),
    };
    Some(EventKind::Transition {
        machine: machine.name.clone(),
        from: machine.states[from].clone(),
        to: machine.states[to].clone(),
    })
}

fn disease_steps(
    world: &World,
    i: usize,
    rng: &mut ChaCha8Rng,
    buffer: &mut Vec<DiseaseUpdate>,
) -> Result<(), EngineError> {
    let a = &world.agents[i];
    for (slot, &d) in world.types[a.type_id].diseases.iter().enumerate() {
        let inst = a.diseases[slot];
        if inst.terminated {
            continue;
        }
        let machine = &world.diseases[d].machine;
        let mut next = inst;
        let mut ctx = AgentStep { scope: Scope::of(world, a), disease: Some(d) };
        let event = machine.step(&mut next, &mut ctx, rng).map_err(|e| world.step_error(e))?;
        buffer.push(DiseaseUpdate { agent: i, slot, next, event });
    }
    Ok(())
}

fn apply_disease_updates(world: &mut World, buffer: Vec<DiseaseUpdate>) {
    let mut dead = vec![false; world.agents.len()];
    for u in buffer {
        if dead[u.agent] {
            continue;
        }
        let t = world.agents[u.agent].type_id;
        let d = world.types[t].diseases[u.slot];
        let id = world.agents[u.agent].id;
        world.agents[u.agent].diseases[u.slot] = u.next;
        let disease = &world.diseases[d];
        let name = disease.name.clone();
        if let TransitionEvent::Moved { from, to } = u.event {
            if from == disease.susceptible && to == disease.infected {
                *world.counters.ever_infected.get_mut(&name).expect("disease counter") += 1;
            }
        }
        if let Some(kind) = transition_kind(&world.diseases[d].machine, u.event) {
            world.event(id, kind);
        }
        if u.next.terminated {
            dead[u.agent] = true;
            *world.counters.deaths.get_mut(&name).expect("disease counter") += 1;
            let type_name = world.types[t].name.clone();
            *world.counters.dead.get_mut(&type_name).expect("type counter") += 1;
            world.event(id, EventKind::Died { disease: name });
        }
    }
    if dead.iter().any(|&x| x) {
        let mut i = 0;
        let removed: Vec<u64> = world.agents.iter().zip(&dead).filter(|(_, &d)| d).map(|(a, _)| a.id).collect();
        world.agents.retain(|_| {
            let keep = !dead[i];
            i += 1;
            keep
        });
        // dead vehicles leave their queues; dead controllers stop serving
        for a in &mut world.agents {
            if let Some(c) = &mut a.controller {
                for q in &mut c.queues {
                    q.retain(|v| !removed.contains(v));
                }
            }
        }
        world.node_controller.retain(|_, cid| !removed.contains(cid));
    }
}

fn release_vehicles(world: &mut World, rng: &mut ChaCha8Rng) {
    for i in 0..world.agents.len() {
        let Some(c) = &world.agents[i].controller else { continue };
        let Some(node) = c.node else { continue };
        let green = c.green(world);
        let mut released = Vec::new();
        let c = world.agents[i].controller.as_mut().expect("controller state");
        for (s, q) in c.queues.iter_mut().enumerate() {
            if green[s] {
                if let Some(v) = q.pop_front() {
                    released.push(v);
                }
            }
        }
        let cid = world.agents[i].id;
        for v in released {
            let Ok(vi) = world.agents.binary_search_by_key(&v, |a| a.id) else { continue };
            let speed = world.types[world.agents[vi].type_id].mobility.unwrap_or(0.0);
            let next = depart_graph(world, node, speed, rng);
            world.agents[vi].vehicle = Some(next);
            world.counters.arrivals += 1;
            world.event(v, EventKind::Released { node });
            let _ = cid;
        }
    }
}

fn learning(world: &mut World, rng: &mut ChaCha8Rng) -> Result<(), EngineError> {
    for i in 0..world.agents.len() {
        let a = &world.agents[i];
        let Some(c) = &a.controller else { continue };
        let ty = &world.types[a.type_id];
        let Some(info) = ty.controller.as_ref() else { continue };
        let Some(q) = &info.learning else {
            world.agents[i].controller.as_mut().unwrap().cycle_completed = false;
            continue;
        };
        let reward_expr: Expr = q.reward_expr();
        let r = Scope::of(world, a)
            .number(&reward_expr)
            .map_err(|e| world.eval_error(format!("agent {}/capability qlearning", ty.name), e))?;
        let completed = c.cycle_completed;
        let queues = c.queue_lengths();
        let q = q.clone();
        let plans = info.plans.clone();
        let c = world.agents[i].controller.as_mut().unwrap();
        let learner = c.learner.as_mut().expect("learning controller");
        learner.reward += r;
        if completed {
            let next = discretize_state(&queues, &q.bins);
            q_update(&mut learner.table, &learner.state, learner.action, learner.reward, &next, &q);
            let action = select_action(&learner.table, &next, plans.len(), q.epsilon, rng);
            learner.state = next;
            learner.action = action;
            learner.reward = 0.0;
            c.plan = action;
            c.phase = world.machines[plans[action]].instantiate();
        }
        c.cycle_completed = false;
    }
    Ok(())
}

fn sample_outputs(world: &mut World, initial: bool) -> Result<(), EngineError> {
    let model = world.model.clone();
    for (k, o) in model.outputs().enumerate() {
        let interval = world.outputs[k].interval;
        if !initial && !world.tick.is_multiple_of(interval) {
            continue;
        }
        let mut row = vec![Value::Int(world.tick as i64)];
        for s in &o.series {
            let v = Scope::global(world)
                .value(&s.expr)
                .map_err(|e| world.eval_error(format!("output {}/series {}", o.name, s.label), e))?;
            if let Value::Real(x) = v {
                if !x.is_finite() {
                    return Err(world.eval_error(
                        format!("output {}/series {}", o.name, s.label),
                        EvalError::Type(format!("non-finite value {x}")),
                    ));
                }
            }
            row.push(v);
        }
        world.outputs[k].rows.push(row);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Runs

#[derive(Clone, Debug, PartialEq)]
pub struct WorldSummary {
    pub ticks: u64,
    pub alive: BTreeMap<String, u64>,
    pub counters: Counters,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub tables: Vec<OutputTable>,
    /// World digest after build (index 0) and after every tick.
    pub digests: Vec<String>,
    pub events: Vec<Event>,
    pub summary: WorldSummary,
}

impl World {
    pub fn summary(&self) -> WorldSummary {
        let mut alive: BTreeMap<String, u64> = self.types.iter().map(|t| (t.name.clone(), 0)).collect();
        for a in self.agents.iter().chain(&self.entities) {
            *alive.get_mut(&self.types[a.type_id].name).unwrap() += 1;
        }
        WorldSummary { ticks: self.tick, alive, counters: self.counters.clone() }
    }
}

/// Validates, builds and runs a model for `config.max_ticks` ticks, writing
/// each output dataset as CSV under `config.out_dir` when set.
pub fn run(model: &Model, config: &RunConfig) -> Result<RunResult, EngineError> {
    let report = validate(model);
    if report.has_errors() {
        let lines: Vec<String> = report.errors().map(|d| d.to_string()).collect();
        return Err(EngineError::Invalid(lines.join("\n")));
    }
    let mut world = build_world(model, config)?;
    let mut digests = vec![world.digest()];
    while world.tick < config.max_ticks {
        tick(&mut world)?;
        digests.push(world.digest());
    }
    if let Some(dir) = &config.out_dir {
        write_outputs(&world.outputs, dir)?;
    }
    Ok(RunResult {
        summary: world.summary(),
        tables: std::mem::take(&mut world.outputs),
        events: std::mem::take(&mut world.events),
        digests,
    })
}

pub fn write_outputs(tables: &[OutputTable], dir: &Path) -> Result<(), EngineError> {
    for t in tables {
        let path = dir.join(&t.path);
        let io_err = |source| EngineError::Io { path: path.display().to_string(), source };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err)?;
        }
        std::fs::write(&path, t.to_csv()).map_err(io_err)?;
    }
    Ok(())
}
