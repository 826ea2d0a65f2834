use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;

use serde::Serialize;

use crate::disease::{compartment_graph, disease_graph, duration_of, EdgeKind};
use crate::expr::{Expr, Type, RESERVED};
use crate::statemachine::DEAD;

use super::typecheck::{type_of, TypeScope};
use super::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Diagnostic {
    pub severity: Severity,
    /// Element path, e.g. `disease Measles/transmission`.
    pub path: String,
    pub message: String,
    #[serde(skip)]
    pub span: Span,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        if self.span.line > 0 {
            write!(f, "{}: ", self.span)?;
        }
        write!(f, "{sev}: {}: {}", self.path, self.message)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub diagnostics: Vec<Diagnostic>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.diagnostics.is_empty()
    }

    pub fn has_errors(&self) -> bool {
        self.errors().next().is_some()
    }

    pub fn errors(&self) -> impl Iterator<Item = &Diagnostic> {
        self.diagnostics.iter().filter(|d| d.severity == Severity::Error)
    }

    pub fn contains(&self, needle: &str) -> bool {
        self.diagnostics.iter().any(|d| d.message.contains(needle))
    }
}

/// Checks every well-formedness rule of the model. Diagnostics are data:
/// the report is empty iff the model is valid, and is ordered by element
/// path.
pub fn validate(model: &Model) -> ValidationReport {
    let mut v = Validator { model, diags: Vec::new() };
    v.names();
    v.environment();
    for item in &model.items {
        match item {
            Item::Entity(e) => v.entity(e),
            Item::Agent(a) => v.agent(a),
            Item::Machine(m) => v.machine(m),
            Item::Plan(p) => v.plan(p),
            Item::Disease(d) => v.disease(d),
            Item::Introduce(_) | Item::Output(_) | Item::Concern(_) => {}
        }
    }
    for (i, intro) in model.introductions().enumerate() {
        v.introduction(i, intro);
    }
    for o in model.outputs() {
        v.output(o);
    }
    for c in model.concerns() {
        v.concern(c);
    }
    let mut diagnostics = v.diags;
    diagnostics.sort_by(|a, b| a.path.cmp(&b.path));
    ValidationReport { diagnostics }
}

struct Validator<'a> {
    model: &'a Model,
    diags: Vec<Diagnostic>,
}

impl<'a> Validator<'a> {
    fn push(&mut self, severity: Severity, path: &str, span: &Span, message: impl Into<String>) {
        self.diags.push(Diagnostic {
            severity,
            path: path.to_string(),
            message: message.into(),
            span: span.clone(),
        });
    }

    fn error(&mut self, path: &str, span: &Span, message: impl Into<String>) {
        self.push(Severity::Error, path, span, message);
    }

    fn warn(&mut self, path: &str, span: &Span, message: impl Into<String>) {
        self.push(Severity::Warning, path, span, message);
    }

    fn names(&mut self) {
        let mut namespaces: HashMap<&str, HashSet<&str>> = HashMap::new();
        for item in &self.model.items {
            let (ns, kind, name, span) = match item {
                Item::Entity(e) => ("type", "entity", &e.name, &e.span),
                Item::Agent(a) => ("type", "agent", &a.name, &a.span),
                Item::Machine(m) => ("machine", "machine", &m.name, &m.span),
                Item::Plan(p) => ("machine", "plan", &p.name, &p.span),
                Item::Disease(d) => ("disease", "disease", &d.name, &d.span),
                Item::Output(o) => ("output", "output", &o.name, &o.span),
                Item::Concern(c) => ("concern", "concern", &c.name, &c.span),
                Item::Introduce(_) => continue,
            };
            let path = format!("{kind} {name}");
            if !namespaces.entry(ns).or_default().insert(name) {
                self.error(&path, span, format!("duplicate declaration of `{name}`"));
            }
            if RESERVED.contains(&name.as_str()) || name == DEAD {
                self.error(&path, span, format!("`{name}` is a reserved word"));
            }
        }
    }

    fn environment(&mut self) {
        let span = self.model.environment.span.clone();
        let path = "environment";
        match &self.model.environment.topology {
            Topology::Grid { width, height, .. } => {
                if *width < 1 || *height < 1 {
                    self.error(path, &span, "grid dimensions must be at least 1");
                }
            }
            Topology::Cartesian { x_min, x_max, y_min, y_max } => {
                let finite = [x_min, x_max, y_min, y_max].iter().all(|v| v.is_finite());
                if !finite || x_min >= x_max || y_min >= y_max {
                    self.error(path, &span, "cartesian bounds need min < max");
                }
            }
            Topology::Graph { source } => match source {
                CreationalStrategy::OsmGraph { path: file } => {
                    if file.is_empty() {
                        self.error(path, &span, "file path must not be empty");
                    }
                }
                CreationalStrategy::InlineEdgeList { nodes, edges } => {
                    let mut names = HashSet::new();
                    for n in nodes {
                        if !names.insert(n.name.as_str()) {
                            self.error(path, &span, format!("duplicate graph node `{}`", n.name));
                        }
                        if !n.x.is_finite() || !n.y.is_finite() {
                            self.error(path, &span, format!("node `{}` has non-finite coordinates", n.name));
                        }
                    }
                    for e in edges {
                        for end in [&e.a, &e.b] {
                            if !names.contains(end.as_str()) {
                                self.error(path, &span, format!("edge references unknown node `{end}`"));
                            }
                        }
                        if e.a == e.b {
                            self.error(path, &span, format!("edge `{}`-`{}` is a self-loop", e.a, e.b));
                        }
                        if let Some(len) = e.length {
                            if !(len > 0.0 && len.is_finite()) {
                                self.error(path, &span, "edge length must be positive");
                            }
                        }
                    }
                }
                _ => self.error(
                    path,
                    &span,
                    "graph source must be an OSM file or an inline edge list",
                ),
            },
        }
    }

    fn is_graph(&self) -> bool {
        matches!(self.model.environment.topology, Topology::Graph { .. })
    }

    fn attributes(&mut self, owner: &str, attrs: &[AttributeSpec]) {
        let mut seen = HashSet::new();
        for a in attrs {
            let path = format!("{owner}/attr {}", a.name);
            if !seen.insert(a.name.as_str()) {
                self.error(&path, &a.span, format!("duplicate attribute `{}`", a.name));
            }
            if RESERVED.contains(&a.name.as_str()) {
                self.error(&path, &a.span, format!("`{}` is a reserved word", a.name));
            }
            if !is_constant(&a.default) {
                self.error(&path, &a.span, "attribute default must be a constant expression");
                continue;
            }
            let scope = TypeScope::new(self.model, vec![], false);
            match type_of(&a.default, &scope) {
                Ok(t) if a.kind.accepts(t) => {}
                Ok(t) => self.error(
                    &path,
                    &a.span,
                    format!("default of kind {t} does not fit a {} attribute", a.kind.keyword()),
                ),
                Err(e) => self.error(&path, &a.span, e),
            }
        }
    }

    fn creation(&mut self, owner: &str, strategy: &CreationalStrategy, span: &Span, is_controller: bool) {
        let path = format!("{owner}/create");
        match strategy {
            CreationalStrategy::FixedCount { count, placement } => {
                if *count < 0 {
                    self.error(&path, span, "count must not be negative");
                }
                if let Placement::At(points) = placement {
                    if points.len() as i64 != *count {
                        self.error(&path, span, format!("count {count} does not match {} positions", points.len()));
                    }
                    for &(x, y) in points {
                        if let Some(msg) = self.position_problem(x, y) {
                            self.error(&path, span, msg);
                        }
                    }
                }
            }
            CreationalStrategy::GisPoints { path: file } => {
                if file.is_empty() {
                    self.error(&path, span, "file path must not be empty");
                }
                if self.is_graph() {
                    self.error(&path, span, "GIS placement is not supported on graph environments");
                }
            }
            CreationalStrategy::OsmGraph { .. } | CreationalStrategy::InlineEdgeList { .. } => {
                self.error(&path, span, "graph sources can only create the environment")
            }
            CreationalStrategy::Intersections => {
                if !self.is_graph() {
                    self.error(&path, span, "intersection placement requires graph topology");
                }
                if !is_controller {
                    self.error(&path, span, "intersection placement requires a flow_control capability");
                }
            }
        }
    }

    fn position_problem(&self, x: f64, y: f64) -> Option<String> {
        match self.model.environment.topology {
            Topology::Grid { width, height, .. } => {
                let ok = x.fract() == 0.0
                    && y.fract() == 0.0
                    && x >= 0.0
                    && y >= 0.0
                    && x < width as f64
                    && y < height as f64;
                (!ok).then(|| format!("position ({x}, {y}) is not a cell of the grid"))
            }
            Topology::Cartesian { x_min, x_max, y_min, y_max } => {
                let ok = (x_min..=x_max).contains(&x) && (y_min..=y_max).contains(&y);
                (!ok).then(|| format!("position ({x}, {y}) is outside the environment"))
            }
            Topology::Graph { .. } => Some("explicit positions are not supported on graphs".into()),
        }
    }

    fn entity(&mut self, e: &EntityTypeSpec) {
        let owner = format!("entity {}", e.name);
        self.attributes(&owner, &e.attributes);
        self.creation(&owner, &e.creation, &e.span, false);
    }

    fn agent(&mut self, a: &'a AgentTypeSpec) {
        let owner = format!("agent {}", a.name);
        self.attributes(&owner, &a.attributes);
        let flow = a.flow_control();
        self.creation(&owner, &a.creation, &a.span, flow.is_some());

        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut diseases = HashSet::new();
        let mut machines = HashSet::new();
        let mut plan_drivers = 0;
        for cap in &a.capabilities {
            let kw = cap.kind.keyword();
            let path = format!("{owner}/capability {kw}");
            *counts.entry(kw).or_default() += 1;
            match &cap.kind {
                Capability::Mobility { step } => {
                    if !(*step > 0.0 && step.is_finite()) {
                        self.error(&path, &cap.span, "mobility step must be positive");
                    }
                }
                Capability::Disease { disease } => {
                    if self.model.disease(disease).is_none() {
                        self.error(&path, &cap.span, format!("unknown disease `{disease}`"));
                    }
                    if !diseases.insert(disease.as_str()) {
                        self.error(&path, &cap.span, format!("disease `{disease}` attached twice"));
                    }
                }
                Capability::StateMachine { machine } => {
                    if !machines.insert(machine.as_str()) {
                        self.error(&path, &cap.span, format!("state machine `{machine}` attached twice"));
                    }
                    if self.model.plan(machine).is_some() {
                        plan_drivers += 1;
                        match flow {
                            Some(f) => self.plan_fits(&path, &cap.span, machine, f),
                            None => self.error(&path, &cap.span, "signal plans require a flow_control capability"),
                        }
                    } else if self.model.machine(machine).is_none() {
                        self.error(&path, &cap.span, format!("unknown state machine `{machine}`"));
                    }
                }
                Capability::FlowControl(f) => {
                    if !self.is_graph() {
                        self.error(&path, &cap.span, "flow control requires graph topology");
                    }
                    self.flow_control(&path, &cap.span, f);
                }
                Capability::QLearning(q) => {
                    plan_drivers += 1;
                    self.qlearning(&path, &cap.span, a, q, flow);
                }
                Capability::External { library, entry } => {
                    if library.is_empty() {
                        self.error(&path, &cap.span, "external library path must not be empty");
                    }
                    if entry.is_empty() {
                        self.error(&path, &cap.span, "external entry point must not be empty");
                    }
                }
                Capability::Adaptation { .. } => {
                    self.error(&path, &cap.span, "adaptation capability is not supported")
                }
            }
        }
        for kw in ["mobility", "flow_control", "qlearning"] {
            if counts.get(kw).copied().unwrap_or(0) > 1 {
                self.error(&owner, &a.span, format!("at most one {kw} capability is allowed"));
            }
        }
        if flow.is_some() && plan_drivers == 0 {
            self.error(&owner, &a.span, "flow control needs a signal plan or a qlearning capability");
        }
        if plan_drivers > 1 {
            self.error(&owner, &a.span, "at most one signal plan or qlearning capability is allowed");
        }
    }

    fn flow_control(&mut self, path: &str, span: &Span, f: &FlowControlSpec) {
        if f.streams.is_empty() {
            self.error(path, span, "flow control needs at least one stream");
        }
        let mut seen = HashSet::new();
        for s in &f.streams {
            if !STREAM_DIRECTIONS.contains(&s.id.as_str()) {
                self.error(
                    path,
                    &s.span,
                    format!("stream `{}` must be one of north, south, east, west", s.id),
                );
            }
            if !seen.insert(s.id.as_str()) {
                self.error(path, &s.span, format!("duplicate stream `{}`", s.id));
            }
            if let Some(c) = s.capacity {
                if c < 1 {
                    self.error(path, &s.span, "stream capacity must be at least 1");
                }
            }
        }
        for (a, b) in &f.compatible {
            for s in [a, b] {
                if f.stream_index(s).is_none() {
                    self.error(path, span, format!("compatibility references unknown stream `{s}`"));
                }
            }
        }
    }

    fn plan_fits(&mut self, path: &str, span: &Span, plan: &str, flow: &FlowControlSpec) {
        let Some(plan) = self.model.plan(plan) else { return };
        for phase in &plan.phases {
            for s in &phase.green {
                if flow.stream_index(s).is_none() {
                    self.error(
                        path,
                        span,
                        format!("plan `{}` phase `{}` uses undeclared stream `{s}`", plan.name, phase.name),
                    );
                }
            }
            for (i, a) in phase.green.iter().enumerate() {
                for b in &phase.green[i + 1..] {
                    if !flow.are_compatible(a, b) {
                        self.error(
                            path,
                            span,
                            format!(
                                "plan `{}` phase `{}`: streams `{a}` and `{b}` are not declared compatible",
                                plan.name, phase.name
                            ),
                        );
                    }
                }
            }
        }
    }

    fn qlearning(
        &mut self,
        path: &str,
        span: &Span,
        agent: &'a AgentTypeSpec,
        q: &QLearningSpec,
        flow: Option<&FlowControlSpec>,
    ) {
        for (name, v) in [("alpha", q.alpha), ("gamma", q.gamma), ("epsilon", q.epsilon)] {
            if !(0.0..=1.0).contains(&v) {
                self.error(path, span, format!("{name} must be in [0, 1]"));
            }
        }
        let Some(flow) = flow else {
            self.error(path, span, "qlearning requires a flow_control capability");
            return;
        };
        if q.plans.is_empty() {
            self.error(path, span, "qlearning needs at least one plan");
        } else if q.plans.len() < 2 {
            self.warn(path, span, "qlearning with a single plan cannot learn anything");
        }
        let mut seen = HashSet::new();
        for p in &q.plans {
            if !seen.insert(p.as_str()) {
                self.error(path, span, format!("plan `{p}` listed twice"));
            }
            if self.model.plan(p).is_none() {
                self.error(path, span, format!("unknown plan `{p}`"));
            } else {
                self.plan_fits(path, span, p, flow);
            }
        }
        if q.bins.iter().any(|b| *b < 0) || q.bins.windows(2).any(|w| w[0] >= w[1]) {
            self.error(path, span, "bins must be non-negative and strictly increasing");
        }
        if let Some(reward) = &q.reward {
            let scope = TypeScope::new(self.model, vec![agent.name.as_str()], true);
            self.expect_type(path, span, reward, &scope, Type::Real, "reward");
        }
    }

    /// `Type::Real` stands for any numeric type.
    fn expect_type(&mut self, path: &str, span: &Span, e: &Expr, scope: &TypeScope<'_>, want: Type, what: &str) {
        match type_of(e, scope) {
            Ok(t) if t == want || (want == Type::Real && t.is_numeric()) => {}
            Ok(t) => {
                let want = if want == Type::Real { "numeric".to_string() } else { want.to_string() };
                self.error(path, span, format!("{what} must be {want}, got {t}"))
            }
            Err(msg) => self.error(path, span, format!("{what}: {msg}")),
        }
    }

    fn source(&mut self, path: &str, span: &Span, value: &SourceValue, self_types: &[&'a str], what: &str, probability: bool) {
        if let SourceValue::Expr(e) = value {
            if e.has_aggregate() {
                self.error(path, span, format!("{what}: aggregates are not allowed in source values"));
                return;
            }
        }
        let scope = TypeScope::new(self.model, self_types.to_vec(), false);
        self.expect_type(path, span, &value.to_expr(), &scope, Type::Real, what);
        if let Some(v) = value.literal() {
            if probability && !(0.0..=1.0).contains(&v) {
                self.error(path, span, format!("{what} must be in [0, 1], got {v}"));
            }
        }
    }

    fn trigger(&mut self, path: &str, span: &Span, trigger: &Trigger, self_types: &[&'a str]) {
        match trigger {
            Trigger::Probabilistic { rate } => self.source(path, span, rate, self_types, "rate", true),
            Trigger::Deterministic { ticks } => {
                self.source(path, span, ticks, self_types, "ticks", false);
                if let Some(v) = ticks.literal() {
                    if v < 0.0 || v.fract() != 0.0 {
                        self.error(path, span, "ticks must be a non-negative integer");
                    }
                }
            }
            Trigger::Conditional { condition } => {
                let scope = TypeScope::new(self.model, self_types.to_vec(), true);
                self.expect_type(path, span, condition, &scope, Type::Bool, "condition");
            }
            Trigger::Custom { triggers, .. } => {
                if triggers.is_empty() {
                    self.error(path, span, "custom trigger needs at least one sub-trigger");
                }
                for t in triggers {
                    if matches!(t, Trigger::Interaction) {
                        self.error(path, span, "interaction triggers cannot be combined");
                    }
                    self.trigger(path, span, t, self_types);
                }
            }
            Trigger::Interaction => {}
        }
    }

    fn machine_carriers(&self, name: &str) -> Vec<&'a str> {
        self.model
            .agents()
            .filter(|a| a.state_machines().any(|m| m == name))
            .map(|a| a.name.as_str())
            .collect()
    }

    fn machine(&mut self, m: &'a StateMachineSpec) {
        let owner = format!("machine {}", m.name);
        let carriers = self.machine_carriers(&m.name);
        if carriers.is_empty() {
            self.warn(&owner, &m.span, "state machine is not attached to any agent type");
        }
        if m.states.is_empty() {
            self.error(&owner, &m.span, "state machine needs at least one state");
        }
        let mut seen = HashSet::new();
        for s in &m.states {
            if !seen.insert(s.as_str()) {
                self.error(&owner, &m.span, format!("duplicate state `{s}`"));
            }
            if s == DEAD {
                self.error(&owner, &m.span, "`Dead` is reserved for disease models");
            }
        }
        if !m.states.contains(&m.initial) {
            self.error(&owner, &m.span, format!("initial state `{}` is not declared", m.initial));
        }
        for (i, t) in m.transitions.iter().enumerate() {
            let path = format!("{owner}/transition {i}");
            for s in [&t.from, &t.to] {
                if !m.states.contains(s) {
                    self.error(&path, &t.span, format!("unknown state `{s}`"));
                }
            }
            if matches!(t.trigger, Trigger::Interaction) {
                self.error(&path, &t.span, "interaction triggers are only valid in disease models");
            }
            self.trigger(&path, &t.span, &t.trigger, &carriers);
            if let Some(g) = &t.guard {
                let scope = TypeScope::new(self.model, carriers.clone(), true);
                self.expect_type(&path, &t.span, g, &scope, Type::Bool, "guard");
            }
            if let Some(a) = &t.abortion {
                self.source(&path, &t.span, &a.probability, &carriers, "abortion probability", true);
                if !m.states.contains(&a.abort_to) {
                    self.error(&path, &t.span, format!("unknown abortion state `{}`", a.abort_to));
                }
            }
        }
        // deterministic transitions from one state that would fire together
        let mut fixed: HashMap<(&str, i64), usize> = HashMap::new();
        for (i, t) in m.transitions.iter().enumerate() {
            if t.guard.is_some() {
                continue;
            }
            if let Trigger::Deterministic { ticks } = &t.trigger {
                if let Some(d) = ticks.literal() {
                    if let Some(first) = fixed.insert((t.from.as_str(), d as i64), i) {
                        self.error(
                            &format!("{owner}/transition {i}"),
                            &t.span,
                            format!(
                                "fires deterministically at the same dwell ({d}) as transition {first}"
                            ),
                        );
                    }
                }
            }
        }
    }

    fn plan(&mut self, p: &PlanSpec) {
        let owner = format!("plan {}", p.name);
        if p.phases.is_empty() {
            self.error(&owner, &p.span, "plan needs at least one phase");
        }
        let mut seen = HashSet::new();
        for phase in &p.phases {
            let path = format!("{owner}/phase {}", phase.name);
            if !seen.insert(phase.name.as_str()) {
                self.error(&path, &phase.span, format!("duplicate phase `{}`", phase.name));
            }
            if phase.duration < 1 {
                self.error(&path, &phase.span, "phase duration must be at least 1 tick");
            }
            if phase.green.is_empty() {
                self.error(&path, &phase.span, "phase needs at least one green stream");
            }
            let mut streams = HashSet::new();
            for s in &phase.green {
                if !STREAM_DIRECTIONS.contains(&s.as_str()) {
                    self.error(&path, &phase.span, format!("unknown stream `{s}`"));
                }
                if !streams.insert(s.as_str()) {
                    self.error(&path, &phase.span, format!("stream `{s}` listed twice"));
                }
            }
        }
    }

    fn disease_carriers(&self, name: &str) -> Vec<&'a str> {
        self.model
            .agents()
            .filter(|a| a.diseases().any(|d| d == name))
            .map(|a| a.name.as_str())
            .collect()
    }

    fn disease(&mut self, d: &'a DiseaseModelSpec) {
        let owner = format!("disease {}", d.name);
        let carriers = self.disease_carriers(&d.name);
        if carriers.is_empty() {
            self.warn(&owner, &d.span, "disease is not attached to any agent type");
        }
        let graph = disease_graph(d);
        let states: Vec<&str> = graph.states.iter().map(String::as_str).collect();
        let violates = "transition violates compartmental model";

        if d.kind == CompartmentKind::Custom {
            if d.compartments.is_empty() {
                self.error(&owner, &d.span, "custom model must declare its compartments");
            }
            let mut seen = HashSet::new();
            for c in &d.compartments {
                if !seen.insert(c.as_str()) {
                    self.error(&owner, &d.span, format!("duplicate compartment `{c}`"));
                }
                if c == DEAD {
                    self.error(&owner, &d.span, "`Dead` is a pseudo-state and cannot be declared");
                }
            }
            if d.infection.is_none() {
                self.error(&owner, &d.span, "custom model must declare its infection edge");
            }
            if d.passive_immunity.is_some() || d.recovered_immunity.is_some() {
                self.error(&owner, &d.span, "custom models specify immunity with duration clauses");
            }
            for e in &graph.edges {
                if e.kind == EdgeKind::Mortality {
                    continue;
                }
                let path = format!("{owner}/edge {}->{}", e.from, e.to);
                for end in [&e.from, &e.to] {
                    if !states.contains(&end.as_str()) {
                        self.error(&path, &d.span, format!("{violates}: unknown compartment `{end}`"));
                    }
                }
                if e.from == e.to {
                    self.error(&path, &d.span, format!("{violates}: self-loop"));
                }
            }
            let mut pairs = HashSet::new();
            for e in &graph.edges {
                if !pairs.insert((&e.from, &e.to)) {
                    self.error(&owner, &d.span, format!("{violates}: duplicate edge {}->{}", e.from, e.to));
                }
            }
            // reachability from the initial compartment
            let mut reached: BTreeSet<&str> = BTreeSet::new();
            if let Some(first) = states.first() {
                let mut stack = vec![*first];
                while let Some(s) = stack.pop() {
                    if reached.insert(s) {
                        stack.extend(graph.edges.iter().filter(|e| e.from == s).map(|e| e.to.as_str()));
                    }
                }
            }
            for s in &states {
                if !reached.contains(s) {
                    self.error(&owner, &d.span, format!("compartment `{s}` is unreachable"));
                }
            }
        } else {
            let canonical = compartment_graph(d.kind);
            if !d.compartments.is_empty() && d.compartments != canonical.states {
                self.error(
                    &owner,
                    &d.span,
                    format!("{} compartments are {:?}", d.kind.keyword(), canonical.states),
                );
            }
            if let Some(e) = &d.infection {
                if e.from != canonical.susceptible || e.to != canonical.infected {
                    self.error(
                        &format!("{owner}/infection"),
                        &e.span,
                        format!("{violates}: {} infection goes {}->{}", d.kind.keyword(), canonical.susceptible, canonical.infected),
                    );
                }
            }
            if d.passive_immunity.is_some() && d.kind != CompartmentKind::PSIR {
                self.error(&owner, &d.span, "passive immunity requires the PSIR model");
            }
        }

        // durations
        let mut seen = HashSet::new();
        for dur in &d.durations {
            let path = format!("{owner}/duration {}", dur.compartment);
            if !states.contains(&dur.compartment.as_str()) {
                self.error(&path, &dur.span, format!("unknown compartment `{}`", dur.compartment));
            }
            if !seen.insert(dur.compartment.as_str()) {
                self.error(&path, &dur.span, "compartment has more than one duration");
            }
            if dur.compartment == graph.susceptible {
                self.error(&path, &dur.span, format!("{violates}: the susceptible compartment is left only by infection"));
            }
            match (&dur.target, d.kind) {
                (None, CompartmentKind::Custom) => {
                    self.error(&path, &dur.span, "custom durations must name their target compartment")
                }
                (Some(target), kind) if kind != CompartmentKind::Custom => {
                    if graph.progression_target(&dur.compartment) != Some(target.as_str()) {
                        self.error(&path, &dur.span, format!("{violates}: {}->{target}", dur.compartment));
                    }
                }
                _ => {}
            }
            self.trigger(&path, &dur.span, &dur.trigger, &carriers);
        }
        if d.kind != CompartmentKind::Custom {
            if seen.contains("R") && d.recovered_immunity.is_some() {
                self.error(&owner, &d.span, "R duration and recovered immunity both given");
            }
            if seen.contains("P") && d.passive_immunity.is_some() {
                self.error(&owner, &d.span, "P duration and passive immunity both given");
            }
            for s in &states {
                let optional = *s == "R" || *s == graph.susceptible;
                if !optional && duration_of(d, s).is_none() {
                    self.error(&owner, &d.span, format!("compartment `{s}` needs a duration"));
                }
            }
        }
        for t in [&d.passive_immunity, &d.recovered_immunity].into_iter().flatten() {
            self.trigger(&format!("{owner}/immunity"), &d.span, t, &carriers);
        }

        // transmission
        match &d.transmission {
            None => self.error(&owner, &d.span, "disease needs a transmission clause"),
            Some(t) => {
                let path = format!("{owner}/transmission");
                if let Interaction::Proximity { distance } = t.interaction {
                    if !(distance > 0.0 && distance.is_finite()) {
                        self.error(&path, &t.span, "proximity distance must be positive");
                    }
                }
                self.source(&path, &t.span, &t.probability, &carriers, "transmission probability", true);
                for s in t.infectious_states() {
                    if !states.contains(&s) {
                        self.error(&path, &t.span, format!("unknown infectious compartment `{s}`"));
                    }
                }
                for e in &t.entity_sources {
                    if self.model.entity(e).is_none() {
                        self.error(&path, &t.span, format!("unknown entity type `{e}`"));
                    }
                }
                if let Some(c) = &t.condition {
                    if t.entity_sources.is_empty() {
                        self.warn(&path, &t.span, "contamination condition has no entity sources to apply to");
                    } else {
                        let sources: Vec<&str> = t.entity_sources.iter().map(String::as_str).collect();
                        let scope = TypeScope::new(self.model, sources, true);
                        self.expect_type(&path, &t.span, c, &scope, Type::Bool, "contamination condition");
                    }
                }
            }
        }

        // mortality
        let mut leaving = HashSet::new();
        for (i, m) in d.mortality.iter().enumerate() {
            let path = format!("{owner}/mortality {i}");
            if !states.contains(&m.compartment.as_str()) {
                self.error(&path, &m.span, format!("unknown compartment `{}`", m.compartment));
            }
            self.source(&path, &m.span, &m.rate, &carriers, "death rate", true);
            match &m.evaluation {
                DeathRateEvaluation::SpecificTimeunit(t) if *t < 0 => {
                    self.error(&path, &m.span, "specific timeunit must not be negative")
                }
                DeathRateEvaluation::WhenCondition(e) => {
                    let scope = TypeScope::new(self.model, carriers.clone(), true);
                    self.expect_type(&path, &m.span, e, &scope, Type::Bool, "mortality guard");
                }
                DeathRateEvaluation::LeavingCompartment => {
                    if !leaving.insert(m.compartment.as_str()) {
                        self.error(&path, &m.span, "compartment has more than one leaving_compartment rate");
                    }
                    let has_progression = duration_of(d, &m.compartment).is_some()
                        && graph.progression_target(&m.compartment).is_some();
                    if !has_progression {
                        self.error(
                            &path,
                            &m.span,
                            "leaving_compartment needs an outgoing progression transition",
                        );
                    }
                }
                _ => {}
            }
        }
    }

    fn introduction(&mut self, i: usize, intro: &DiseaseIntroductionSpec) {
        let path = format!("introduce {i} {}", intro.disease);
        if self.model.disease(&intro.disease).is_none() {
            self.error(&path, &intro.span, format!("unknown disease `{}`", intro.disease));
        }
        match intro.quantity {
            Quantity::Deterministic(n) if n < 0 => self.error(&path, &intro.span, "quantity must not be negative"),
            Quantity::Probabilistic(p) if !(0.0..=1.0).contains(&p) => {
                self.error(&path, &intro.span, "probability must be in [0, 1]")
            }
            _ => {}
        }
        if let Periodicity::Periodic(k) = intro.periodicity {
            if k < 1 {
                self.error(&path, &intro.span, "period must be at least 1 tick");
            }
        }
        if let Selection::Eligible(e) = &intro.selection {
            let carriers = self.disease_carriers(&intro.disease);
            let scope = TypeScope::new(self.model, carriers, true);
            self.expect_type(&path, &intro.span, e, &scope, Type::Bool, "eligibility criterion");
        }
    }

    fn output(&mut self, o: &OutputDatasetSpec) {
        let owner = format!("output {}", o.name);
        if o.interval < 1 {
            self.error(&owner, &o.span, "interval must be at least 1 tick");
        }
        if o.path.is_empty() {
            self.error(&owner, &o.span, "file path must not be empty");
        }
        if o.series.is_empty() {
            self.warn(&owner, &o.span, "output has no series");
        }
        let mut labels = HashSet::new();
        for s in &o.series {
            let path = format!("{owner}/series {}", s.label);
            if s.label == "tick" || !labels.insert(s.label.as_str()) {
                self.error(&path, &s.span, format!("duplicate column `{}`", s.label));
            }
            let scope = TypeScope::new(self.model, vec![], true);
            self.expect_type(&path, &s.span, &s.expr, &scope, Type::Real, "series");
        }
    }

    fn concern(&mut self, c: &Concern) {
        let path = format!("concern {}", c.name);
        for m in &c.members {
            if concern::lookup(self.model, m).is_empty() {
                self.error(&path, &c.span, format!("unknown member `{m}`"));
            }
        }
    }
}

/// Constant expressions: literals combined by operators.
fn is_constant(e: &Expr) -> bool {
    let mut constant = true;
    e.visit(&mut |n| {
        if !matches!(
            n,
            Expr::Int(_)
                | Expr::Real(_)
                | Expr::Bool(_)
                | Expr::Text(_)
                | Expr::Symbol(_)
                | Expr::Unary { .. }
                | Expr::Binary { .. }
        ) {
            constant = false;
        }
    });
    constant
}
