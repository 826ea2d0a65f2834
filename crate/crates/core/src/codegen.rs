//! NetLogo source emitter.
//!
//! [`generate`] turns a validated model into the code section of a NetLogo
//! program together with a [`GenerationReport`] that maps every model element
//! to the procedures emitted for it. Constructs NetLogo cannot express
//! directly are listed in the report and left as inline comments.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::Serialize;

use crate::disease::disease_machine;
use crate::expr::{format_real_literal, BinaryOp, Expr, UnaryOp};
use crate::metamodel::{
    AgentTypeSpec, AttrKind, AttributeSpec, Capability, Combinator, CreationalStrategy, DiseaseIntroductionSpec,
    DiseaseModelSpec, FlowControlSpec, Item, Model, OutputDatasetSpec, Periodicity, Placement, QLearningSpec,
    Quantity, Selection, SourceValue, StateMachineSpec, Topology, Trigger,
};
use crate::statemachine::DEAD;
use crate::traffic::plan_to_machine;

/// Procedures emitted for one model element.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ReportEntry {
    /// `"<kind> <name>"`, e.g. `"disease measles"`.
    pub element: String,
    pub procedures: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Unsupported {
    pub element: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct GenerationReport {
    pub entries: Vec<ReportEntry>,
    /// Plural breed names, in declaration order.
    pub breeds: Vec<String>,
    pub unsupported: Vec<Unsupported>,
}

impl GenerationReport {
    pub fn procedures(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().flat_map(|e| e.procedures.iter().map(String::as_str))
    }

    pub fn entry(&self, element: &str) -> Option<&ReportEntry> {
        self.entries.iter().find(|e| e.element == element)
    }
}

/// Words NetLogo already defines for turtles; attributes with these names are
/// emitted with a `my-` prefix.
const NETLOGO_BUILTINS: &[&str] = &[
    "who", "color", "heading", "xcor", "ycor", "shape", "label", "label-color", "breed", "hidden?", "size",
    "pen-size", "pen-mode", "pcolor", "plabel", "pxcor", "pycor", "ticks", "count", "sum", "end", "to", "max",
    "min", "mean", "turtles", "patches", "links", "self", "myself", "other", "random", "report", "stop",
];

fn ident(name: &str) -> String {
    name.replace('_', "-").to_ascii_lowercase()
}

fn attr_var(name: &str) -> String {
    let n = ident(name);
    if NETLOGO_BUILTINS.contains(&n.as_str()) {
        format!("my-{n}")
    } else {
        n
    }
}

fn plural(name: &str) -> String {
    format!("{}s", ident(name))
}

fn quote(s: &str) -> String {
    let mut out = String::from("\"");
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn num(v: f64) -> String {
    format_real_literal(v)
}

fn state_var(machine: &str) -> String {
    format!("state-of-{}", ident(machine))
}

fn dwell_var(machine: &str) -> String {
    format!("dwell-of-{}", ident(machine))
}

fn next_var(disease: &str) -> String {
    format!("next-of-{}", ident(disease))
}

fn next_dwell_var(disease: &str) -> String {
    format!("next-dwell-of-{}", ident(disease))
}

/// Expression translation in the context of a single turtle.
struct Exprs<'m> {
    model: &'m Model,
}

impl Exprs<'_> {
    fn expr(&self, e: &Expr) -> String {
        match e {
            Expr::Int(v) => v.to_string(),
            Expr::Real(v) => num(*v),
            Expr::Bool(b) => b.to_string(),
            Expr::Text(s) | Expr::Symbol(s) => quote(s),
            Expr::Tick => "ticks".into(),
            Expr::Attr(a) | Expr::Ref { attr: a, .. } => attr_var(a),
            Expr::Unary { op: UnaryOp::Neg, expr } => format!("(- {})", self.expr(expr)),
            Expr::Unary { op: UnaryOp::Not, expr } => format!("(not {})", self.expr(expr)),
            Expr::Binary { op, lhs, rhs } => {
                let sym = match op {
                    BinaryOp::Eq => "=",
                    other => other.symbol(),
                };
                format!("({} {sym} {})", self.expr(lhs), self.expr(rhs))
            }
            Expr::Count { population, filter } => match filter {
                Some(f) => format!("(count {} with [{}])", plural(population), self.expr(f)),
                None => format!("(count {})", plural(population)),
            },
            Expr::Sum { population, value, filter } => {
                let set = match filter {
                    Some(f) => format!("{} with [{}]", plural(population), self.expr(f)),
                    None => plural(population),
                };
                format!("(sum [{}] of {set})", self.expr(value))
            }
            Expr::InState { machine, state } => {
                if self.model.plan(machine).is_some() {
                    format!("(active-plan = {} and {} = {})", quote(machine), state_var("plan"), quote(state))
                } else {
                    format!("({} = {})", state_var(machine), quote(state))
                }
            }
            Expr::Deaths(d) => format!("deaths-{}", ident(d)),
            Expr::EverInfected(d) => format!("ever-infected-{}", ident(d)),
            Expr::Stopped => "stopped-vehicles".into(),
            Expr::Queued => "queued-vehicles".into(),
            Expr::Arrivals => "arrivals".into(),
        }
    }

    fn source(&self, v: &SourceValue) -> String {
        self.expr(&v.to_expr())
    }

    fn trigger(&self, t: &Trigger, dwell: &str, interaction: &str) -> String {
        match t {
            Trigger::Probabilistic { rate } => format!("random-float 1 < {}", self.source(rate)),
            Trigger::Deterministic { ticks } => format!("{dwell} + 1 >= {}", self.source(ticks)),
            Trigger::Conditional { condition } => self.expr(condition),
            Trigger::Custom { combinator, triggers } => {
                let join = match combinator {
                    Combinator::AllOf => " and ",
                    Combinator::AnyOf => " or ",
                };
                let parts: Vec<String> =
                    triggers.iter().map(|t| format!("({})", self.trigger(t, dwell, interaction))).collect();
                parts.join(join)
            }
            Trigger::Interaction => interaction.to_string(),
        }
    }
}

struct Emitter<'m> {
    model: &'m Model,
    x: Exprs<'m>,
    out: String,
    report: GenerationReport,
}

impl<'m> Emitter<'m> {
    fn line(&mut self, indent: usize, text: &str) {
        for _ in 0..indent {
            self.out.push_str("  ");
        }
        self.out.push_str(text);
        self.out.push('\n');
    }

    fn blank(&mut self) {
        self.out.push('\n');
    }

    fn record(&mut self, element: &str, procedure: &str) {
        match self.report.entries.iter_mut().find(|e| e.element == element) {
            Some(e) => e.procedures.push(procedure.to_string()),
            None => self.report.entries.push(ReportEntry {
                element: element.to_string(),
                procedures: vec![procedure.to_string()],
            }),
        }
    }

    fn element(&mut self, element: &str) {
        if self.report.entry(element).is_none() {
            self.report.entries.push(ReportEntry { element: element.to_string(), procedures: Vec::new() });
        }
    }

    fn unsupported(&mut self, element: &str, reason: &str) {
        self.report.unsupported.push(Unsupported { element: element.to_string(), reason: reason.to_string() });
    }

    /// Starts `to name` (or `to-report name`) and records it under `element`.
    fn open(&mut self, element: &str, name: &str, reporter: bool, args: &[&str]) {
        self.record(element, name);
        let kw = if reporter { "to-report" } else { "to" };
        if args.is_empty() {
            self.line(0, &format!("{kw} {name}"));
        } else {
            self.line(0, &format!("{kw} {name} [{}]", args.join(" ")));
        }
    }

    fn close(&mut self) {
        self.line(0, "end");
        self.blank();
    }

    fn agents(&self) -> impl Iterator<Item = &'m AgentTypeSpec> {
        self.model.agents()
    }

    fn is_graph(&self) -> bool {
        matches!(self.model.environment.topology, Topology::Graph { .. })
    }

    fn carriers(&self, disease: &str) -> Vec<String> {
        self.agents().filter(|a| a.diseases().any(|d| d == disease)).map(|a| plural(&a.name)).collect()
    }

    fn agent_set(names: &[String]) -> String {
        match names {
            [one] => one.clone(),
            many => format!("(turtle-set {})", many.join(" ")),
        }
    }

    fn flow_types(&self) -> Vec<&'m AgentTypeSpec> {
        self.agents().filter(|a| a.flow_control().is_some()).collect()
    }

    fn has_learning(&self) -> bool {
        self.agents().any(|a| a.qlearning().is_some())
    }

    // -- declarations ---------------------------------------------------------

    fn header(&mut self) {
        self.line(0, &format!("; model {}", self.model.name));
        self.blank();
        if self.has_learning() {
            self.line(0, "extensions [table]");
            self.blank();
        }
        let mut globals = Vec::new();
        for d in self.model.diseases() {
            globals.push(format!("deaths-{}", ident(&d.name)));
            globals.push(format!("ever-infected-{}", ident(&d.name)));
        }
        if !self.flow_types().is_empty() {
            globals.push("arrivals".into());
        }
        self.line(0, "globals [");
        for g in globals {
            self.line(1, &g);
        }
        self.line(0, "]");
        self.blank();
    }

    fn breeds(&mut self) {
        if self.is_graph() {
            self.line(0, "breed [road-nodes road-node]");
            self.line(0, "undirected-link-breed [roads road]");
            self.report.breeds.push("road-nodes".into());
        }
        let mut types: Vec<(String, bool)> = Vec::new();
        for item in &self.model.items {
            match item {
                Item::Agent(a) => types.push((a.name.clone(), true)),
                Item::Entity(e) => types.push((e.name.clone(), false)),
                _ => {}
            }
        }
        for (name, _) in &types {
            self.line(0, &format!("breed [{} {}]", plural(name), ident(name)));
            self.report.breeds.push(plural(name));
        }
        if !types.is_empty() || self.is_graph() {
            self.blank();
        }
        if self.is_graph() {
            self.line(0, "road-nodes-own [node-key]");
            self.line(0, "roads-own [road-length]");
        }
        for item in &self.model.items {
            let (name, attrs, agent) = match item {
                Item::Agent(a) => (&a.name, &a.attributes, Some(a)),
                Item::Entity(e) => (&e.name, &e.attributes, None),
                _ => continue,
            };
            let mut vars: Vec<String> = attrs.iter().map(|a| attr_var(&a.name)).collect();
            if let Some(a) = agent {
                for m in a.state_machines() {
                    if self.model.machine(m).is_some() {
                        vars.push(state_var(m));
                        vars.push(dwell_var(m));
                    }
                }
                for d in a.diseases() {
                    vars.extend([state_var(d), dwell_var(d), next_var(d), next_dwell_var(d)]);
                }
                if a.mobility().is_some() && self.is_graph() {
                    vars.extend(["current-node", "target-node", "remaining", "queued?"].map(String::from));
                }
                if a.flow_control().is_some() {
                    vars.extend(["queues", "active-plan", "cycle-completed?"].map(String::from));
                    vars.extend([state_var("plan"), dwell_var("plan")]);
                }
                if a.qlearning().is_some() {
                    vars.extend(["q-table", "q-state", "q-action", "reward-acc"].map(String::from));
                }
            }
            self.line(0, &format!("{}-own [{}]", plural(name), vars.join(" ")));
        }
        self.blank();
    }

    // -- setup and go ---------------------------------------------------------

    fn setup(&mut self) {
        self.open("model", "setup", false, &[]);
        self.line(1, "clear-all");
        self.line(1, "setup-environment");
        for item in &self.model.items {
            if let Item::Agent(AgentTypeSpec { name, .. }) | Item::Entity(crate::metamodel::EntityTypeSpec { name, .. }) =
                item
            {
                self.line(1, &format!("create-{}-population", ident(name)));
            }
        }
        for d in self.model.diseases() {
            self.line(1, &format!("set deaths-{} 0", ident(&d.name)));
            self.line(1, &format!("set ever-infected-{} 0", ident(&d.name)));
        }
        if !self.flow_types().is_empty() {
            self.line(1, "set arrivals 0");
        }
        for (i, intro) in self.model.introductions().enumerate() {
            self.line(1, &format!("introduce-{}-{i}", ident(&intro.disease)));
        }
        for d in self.model.diseases() {
            self.line(1, &format!("color-disease-{}", ident(&d.name)));
        }
        if self.model.outputs().next().is_some() {
            self.line(1, "setup-outputs");
        }
        self.line(1, "reset-ticks");
        for o in self.model.outputs() {
            self.line(1, &format!("record-output-{}", ident(&o.name)));
        }
        self.close();
    }

    fn go(&mut self) {
        self.open("model", "go", false, &[]);
        for (i, intro) in self.model.introductions().enumerate() {
            if let Periodicity::Periodic(k) = intro.periodicity {
                self.line(1, &format!("if ticks > 0 and ticks mod {k} = 0 [ introduce-{}-{i} ]", ident(&intro.disease)));
            }
        }
        let stepping: Vec<String> = self.agents().filter(|a| has_behavior(a)).map(|a| a.name.clone()).collect();
        if !stepping.is_empty() {
            self.line(1, "foreach sort turtles [ t ->");
            self.line(2, "ask t [");
            for name in &stepping {
                self.line(3, &format!("if breed = {} [ step-{} ]", plural(name), ident(name)));
            }
            self.line(2, "]");
            self.line(1, "]");
        }
        for d in self.model.diseases() {
            self.line(1, &format!("apply-disease-{}", ident(&d.name)));
        }
        for t in self.flow_types() {
            self.line(1, &format!("serve-queues-{}", ident(&t.name)));
        }
        for a in self.agents().filter(|a| a.qlearning().is_some()) {
            self.line(1, &format!("learn-{}", ident(&a.name)));
        }
        self.line(1, "tick");
        for o in self.model.outputs() {
            self.line(1, &format!("record-output-{}", ident(&o.name)));
        }
        self.close();
    }

    // -- environment and creation ----------------------------------------------

    fn environment(&mut self) {
        self.open("environment", "setup-environment", false, &[]);
        match &self.model.environment.topology {
            Topology::Grid { width, height, wrap } => {
                self.line(1, &format!("resize-world 0 {} 0 {}", width - 1, height - 1));
                self.line(1, &format!("__change-topology {wrap} {wrap}"));
            }
            Topology::Cartesian { x_min, x_max, y_min, y_max } => {
                self.line(
                    1,
                    &format!(
                        "resize-world {} {} {} {}",
                        x_min.floor() as i64,
                        x_max.ceil() as i64,
                        y_min.floor() as i64,
                        y_max.ceil() as i64
                    ),
                );
                self.line(1, "__change-topology false false");
            }
            Topology::Graph { source } => {
                self.line(1, "__change-topology false false");
                self.line(1, "load-road-network");
                let source = source.clone();
                self.close();
                self.road_network(&source);
                return;
            }
        }
        self.close();
    }

    fn road_network(&mut self, source: &CreationalStrategy) {
        self.open("environment", "load-road-network", false, &[]);
        match source {
            CreationalStrategy::InlineEdgeList { nodes, edges } => {
                for n in nodes {
                    self.line(
                        1,
                        &format!(
                            "create-road-nodes 1 [ set node-key {} setxy {} {} hide-turtle ]",
                            quote(&n.name),
                            num(n.x),
                            num(n.y)
                        ),
                    );
                }
                for e in edges {
                    let length = match e.length {
                        Some(l) => num(l),
                        None => "link-length".into(),
                    };
                    self.line(
                        1,
                        &format!(
                            "ask one-of road-nodes with [node-key = {}] [ create-road-with one-of road-nodes with [node-key = {}] [ set road-length {length} ] ]",
                            quote(&e.a),
                            quote(&e.b)
                        ),
                    );
                }
            }
            CreationalStrategy::OsmGraph { path } => {
                self.unsupported("environment", "OSM import has no NetLogo primitive; convert the file to node/edge lines");
                self.line(1, &format!("; OSM road network from {}: convert to lines", quote(path)));
                self.line(1, "; `node <key> <x> <y>` and `edge <key> <key> <length>` in the file below");
                self.line(1, &format!("file-open {}", quote(&format!("{path}.edges"))));
                self.line(1, "while [not file-at-end?] [");
                self.line(2, "let kind file-read");
                self.line(2, "ifelse kind = \"node\" [");
                self.line(3, "let key file-read");
                self.line(3, "let x file-read");
                self.line(3, "let y file-read");
                self.line(3, "create-road-nodes 1 [ set node-key key setxy x y hide-turtle ]");
                self.line(2, "] [");
                self.line(3, "let a file-read");
                self.line(3, "let b file-read");
                self.line(3, "let len file-read");
                self.line(3, "ask one-of road-nodes with [node-key = a] [ create-road-with one-of road-nodes with [node-key = b] [ set road-length len ] ]");
                self.line(2, "]");
                self.line(1, "]");
                self.line(1, "file-close");
            }
            _ => {}
        }
        self.close();
    }

    fn creation(&mut self, name: &str, creation: &CreationalStrategy, attrs: &[AttributeSpec], agent: Option<&AgentTypeSpec>) {
        let element = format!("{} {name}", if agent.is_some() { "agent" } else { "entity" });
        let proc = format!("create-{}-population", ident(name));
        let breed = plural(name);
        self.open(&element, &proc, false, &[]);
        let init = format!("init-{}", ident(name));
        match creation {
            CreationalStrategy::FixedCount { count, placement: Placement::Random } => {
                let place = if self.is_graph() { "move-to one-of road-nodes" } else { self.random_position() };
                self.line(1, &format!("create-{breed} {count} [ {place} {init} ]"));
            }
            CreationalStrategy::FixedCount { placement: Placement::At(points), .. } => {
                for (x, y) in points {
                    self.line(1, &format!("create-{breed} 1 [ setxy {} {} {init} ]", num(*x), num(*y)));
                }
            }
            CreationalStrategy::GisPoints { path } => {
                self.line(1, &format!("file-open {}", quote(path)));
                self.line(1, "while [not file-at-end?] [");
                self.line(2, "let fields split-fields file-read-line");
                self.line(2, "if not empty? fields and first first fields != \"#\" [");
                self.line(3, &format!("create-{breed} 1 ["));
                let place = if matches!(self.model.environment.topology, Topology::Grid { .. }) {
                    "setxy floor read-from-string item 0 fields floor read-from-string item 1 fields"
                } else {
                    "setxy read-from-string item 0 fields read-from-string item 1 fields"
                };
                self.line(4, place);
                self.line(4, &init);
                for a in attrs {
                    let reader = match a.kind {
                        AttrKind::Text | AttrKind::Identifier => "value",
                        _ => "read-from-string value",
                    };
                    self.line(
                        4,
                        &format!(
                            "let v-{0} field-value fields {1} if v-{0} != false [ let value v-{0} set {0} {reader} ]",
                            attr_var(&a.name),
                            quote(&a.name)
                        ),
                    );
                }
                self.line(3, "]");
                self.line(2, "]");
                self.line(1, "]");
                self.line(1, "file-close");
            }
            CreationalStrategy::Intersections => {
                self.line(1, &format!("ask road-nodes with [count my-roads >= 3] [ hatch-{breed} 1 [ show-turtle {init} ] ]"));
            }
            CreationalStrategy::OsmGraph { .. } | CreationalStrategy::InlineEdgeList { .. } => {
                self.unsupported(&element, "graph sources cannot create instances");
                self.line(1, "; graph sources cannot create instances");
            }
        }
        self.close();

        self.open(&element, &init, false, &[]);
        for a in attrs {
            self.line(1, &format!("set {} {}", attr_var(&a.name), self.x.expr(&a.default)));
        }
        if let Some(agent) = agent {
            for m in agent.state_machines() {
                if let Some(spec) = self.model.machine(m) {
                    self.line(1, &format!("set {} {}", state_var(m), quote(&spec.initial)));
                    self.line(1, &format!("set {} 0", dwell_var(m)));
                }
            }
            for d in agent.diseases() {
                if let Some(spec) = self.model.disease(d) {
                    let initial = disease_machine(spec).initial;
                    self.line(1, &format!("set {} {}", state_var(d), quote(&initial)));
                    self.line(1, &format!("set {} 0", dwell_var(d)));
                }
            }
            if agent.mobility().is_some() && self.is_graph() {
                self.line(1, "set current-node one-of road-nodes-here");
                self.line(1, "set target-node nobody");
                self.line(1, "set remaining 0");
                self.line(1, "set queued? false");
            }
            if let Some(f) = agent.flow_control() {
                self.line(1, &format!("set queues n-values {} [ [] ]", f.streams.len()));
                let first = self.plans_of(agent).first().cloned().unwrap_or_default();
                self.line(1, &format!("set active-plan {}", quote(&first)));
                self.line(1, "set cycle-completed? false");
                if agent.qlearning().is_some() {
                    self.line(1, "set q-table table:make");
                    self.line(1, &format!("set q-state discretize-{}", ident(&agent.name)));
                    self.line(1, "set reward-acc 0");
                    self.line(1, &format!("set q-action select-plan-{}", ident(&agent.name)));
                    self.line(1, "set active-plan item q-action plan-names");
                }
                self.line(1, &format!("set {} first phases-of active-plan", state_var("plan")));
                self.line(1, &format!("set {} 0", dwell_var("plan")));
            }
        }
        self.close();
    }

    fn random_position(&self) -> &'static str {
        match self.model.environment.topology {
            Topology::Grid { .. } => "setxy random-pxcor random-pycor",
            _ => "setxy random-xcor random-ycor",
        }
    }

    // -- behaviour -------------------------------------------------------------

    fn agent_step(&mut self, a: &AgentTypeSpec) {
        let element = format!("agent {}", a.name);
        for cap in &a.capabilities {
            if let Capability::External { library, entry } = &cap.kind {
                self.unsupported(&format!("{element}/capability external"), "external code must be included manually");
                self.line(0, &format!("; external capability: {entry} \u{2014} include manually"));
                self.line(0, &format!("; __includes [{}]", quote(library)));
                self.blank();
            }
        }
        if !has_behavior(a) {
            return;
        }
        let name = ident(&a.name);
        self.open(&element, &format!("step-{name}"), false, &[]);
        if a.mobility().is_some() {
            self.line(1, &format!("move-{name}"));
        }
        if a.flow_control().is_some() {
            self.line(1, "step-signal-plan");
        }
        for m in a.state_machines() {
            if self.model.machine(m).is_some() {
                self.line(1, &format!("step-machine-{}", ident(m)));
            }
        }
        for d in a.diseases() {
            self.line(1, &format!("step-disease-{}", ident(d)));
        }
        self.close();
        if let Some(step) = a.mobility() {
            self.mobility(&element, &name, step, a);
        }
    }

    fn mobility(&mut self, element: &str, name: &str, step: f64, a: &AgentTypeSpec) {
        let element = format!("{element}/capability mobility");
        self.open(&element, &format!("move-{name}"), false, &[]);
        match self.model.environment.topology {
            Topology::Grid { wrap, .. } => {
                let s = step.round() as i64;
                self.line(1, "let k random 9");
                self.line(1, &format!("let nx pxcor + (k mod 3 - 1) * {s}"));
                self.line(1, &format!("let ny pycor + (floor (k / 3) - 1) * {s}"));
                if wrap {
                    self.line(1, "setxy nx ny");
                } else {
                    self.line(1, "setxy (max list min-pxcor min list max-pxcor nx) (max list min-pycor min list max-pycor ny)");
                }
            }
            Topology::Cartesian { x_min, x_max, y_min, y_max } => {
                self.line(1, "let angle random-float 360");
                self.line(1, &format!("let nx xcor + {} * cos angle", num(step)));
                self.line(1, &format!("let ny ycor + {} * sin angle", num(step)));
                self.line(
                    1,
                    &format!(
                        "setxy (max list {} min list {} nx) (max list {} min list {} ny)",
                        num(x_min),
                        num(x_max),
                        num(y_min),
                        num(y_max)
                    ),
                );
            }
            Topology::Graph { .. } => {
                self.line(1, "if queued? [ stop ]");
                self.line(1, &format!("if target-node = nobody [ depart-{name} stop ]"));
                self.line(1, "set remaining remaining - 1");
                self.line(1, "if remaining > 0 [ stop ]");
                self.line(1, "let origin current-node");
                self.line(1, "set current-node target-node");
                self.line(1, "set target-node nobody");
                self.line(1, "move-to current-node");
                let controllers: Vec<String> = self.flow_types().iter().map(|t| t.name.clone()).collect();
                for c in &controllers {
                    self.line(1, &format!("let signal-{} one-of {}-here", ident(c), plural(c)));
                    self.line(1, &format!("if signal-{} != nobody [", ident(c)));
                    self.line(2, "let from-dir approach-direction origin");
                    self.line(2, &format!("let accepted [enqueue-{} myself from-dir] of signal-{0}", ident(c)));
                    self.line(2, "if accepted = \"queued\" [ set queued? true ]");
                    self.line(2, "if accepted != \"uncontrolled\" [ stop ]");
                    self.line(1, "]");
                }
                self.line(1, &format!("depart-{name}"));
                self.close();
                self.open(&element, &format!("depart-{name}"), false, &[]);
                self.line(1, "let options [link-neighbors] of current-node");
                self.line(1, "if not any? options [ stop ]");
                self.line(1, "set target-node one-of options");
                self.line(
                    1,
                    &format!(
                        "set remaining max list 1 ceiling ([road-length] of road [who] of current-node [who] of target-node / {})",
                        num(step)
                    ),
                );
                let _ = a;
            }
        }
        self.close();
    }

    fn machine(&mut self, element: &str, proc: &str, spec: &StateMachineSpec, target: MachineTarget) {
        self.open(element, proc, false, &[]);
        let (state, dwell) = match &target {
            MachineTarget::Immediate { state, dwell }
            | MachineTarget::Buffered { state, dwell, .. }
            | MachineTarget::Plan { state, dwell, .. } => (state.clone(), dwell.clone()),
        };
        if let MachineTarget::Buffered { next, next_dwell, .. } = &target {
            self.line(1, &format!("set {next} {state}"));
            self.line(1, &format!("set {next_dwell} {dwell} + 1"));
        }
        let interaction = format!("exposed-to-{}?", ident(&spec.name));
        for t in &spec.transitions {
            let mut cond = format!("{state} = {}", quote(&t.from));
            if let Some(g) = &t.guard {
                write!(cond, " and {}", self.x.expr(g)).unwrap();
            }
            let trig = self.x.trigger(&t.trigger, &dwell, &interaction);
            let enter = |to: &str| target.enter(to);
            let action = match &t.abortion {
                Some(ab) => format!(
                    "ifelse random-float 1 < {} [ {} ] [ {} ]",
                    self.x.source(&ab.probability),
                    enter(&ab.abort_to),
                    enter(&t.to)
                ),
                None => enter(&t.to),
            };
            self.line(1, &format!("if {cond} and ({trig}) [ {action} stop ]"));
        }
        if let MachineTarget::Immediate { dwell, .. } = &target {
            self.line(1, &format!("set {dwell} {dwell} + 1"));
        }
        self.close();
    }

    fn machines(&mut self) {
        for m in self.model.machines() {
            let element = format!("machine {}", m.name);
            let target = MachineTarget::Immediate { state: state_var(&m.name), dwell: dwell_var(&m.name) };
            self.machine(&element, &format!("step-machine-{}", ident(&m.name)), m, target);
        }
    }

    fn plans(&mut self) {
        if self.flow_types().is_empty() {
            for p in self.model.plans() {
                self.element(&format!("plan {}", p.name));
                self.unsupported(&format!("plan {}", p.name), "plan is not attached to a flow controller");
                self.line(0, &format!("; plan {} is not attached to a flow controller", p.name));
                self.blank();
            }
            return;
        }
        let names: Vec<String> = self.model.plans().map(|p| quote(&p.name)).collect();
        self.open("model", "plan-names", true, &[]);
        self.line(1, &format!("report [{}]", names.join(" ")));
        self.close();
        self.open("model", "phases-of", true, &["plan-name"]);
        for p in self.model.plans() {
            let phases: Vec<String> = p.phases.iter().map(|ph| quote(&ph.name)).collect();
            self.line(1, &format!("if plan-name = {} [ report [{}] ]", quote(&p.name), phases.join(" ")));
        }
        self.line(1, "report []");
        self.close();
        for p in self.model.plans() {
            let element = format!("plan {}", p.name);
            let machine = plan_to_machine(p);
            let target = MachineTarget::Plan { state: state_var("plan"), dwell: dwell_var("plan"), initial: machine.initial.clone() };
            let proc = format!("step-plan-{}", ident(&p.name));
            self.open(&element, &proc, false, &[]);
            for t in &machine.transitions {
                let trig = self.x.trigger(&t.trigger, &dwell_var("plan"), "false");
                self.line(
                    1,
                    &format!("if {} = {} and ({trig}) [ {} stop ]", state_var("plan"), quote(&t.from), target.enter(&t.to)),
                );
            }
            self.line(1, &format!("set {0} {0} + 1", dwell_var("plan")));
            self.close();
            let flow = self.flow_types().into_iter().find(|t| self.plans_of(t).contains(&p.name)).and_then(|t| t.flow_control()).cloned();
            if let Some(flow) = flow {
                self.open(&element, &format!("green-streams-{}", ident(&p.name)), true, &[]);
                for ph in &p.phases {
                    let flags: Vec<&str> =
                        flow.streams.iter().map(|s| if ph.green.contains(&s.id) { "true" } else { "false" }).collect();
                    self.line(1, &format!("if {} = {} [ report [{}] ]", state_var("plan"), quote(&ph.name), flags.join(" ")));
                }
                self.line(1, &format!("report n-values {} [ false ]", flow.streams.len()));
                self.close();
            }
        }
        self.open("model", "step-signal-plan", false, &[]);
        for p in self.model.plans() {
            self.line(1, &format!("if active-plan = {} [ step-plan-{} ]", quote(&p.name), ident(&p.name)));
        }
        self.close();
        self.open("model", "green-streams", true, &[]);
        for p in self.model.plans() {
            self.line(1, &format!("if active-plan = {} [ report green-streams-{} ]", quote(&p.name), ident(&p.name)));
        }
        self.line(1, "report []");
        self.close();
    }

    fn plans_of(&self, a: &AgentTypeSpec) -> Vec<String> {
        let mut plans = Vec::new();
        for m in a.state_machines() {
            if self.model.plan(m).is_some() {
                plans.push(m.to_string());
            }
        }
        if let Some(q) = a.qlearning() {
            plans.extend(q.plans.iter().cloned());
        }
        plans
    }

    fn flow_control(&mut self, a: &AgentTypeSpec, flow: &FlowControlSpec) {
        let element = format!("agent {}/capability flow_control", a.name);
        let name = ident(&a.name);
        let streams: Vec<String> = flow.streams.iter().map(|s| quote(&s.id)).collect();
        self.open(&element, &format!("enqueue-{name}"), true, &["vehicle", "direction"]);
        self.line(1, &format!("let index position direction [{}]", streams.join(" ")));
        self.line(1, "if index = false [ report \"uncontrolled\" ]");
        let caps: Vec<String> = flow.streams.iter().map(|s| s.capacity.map_or("-1".into(), |c| c.to_string())).collect();
        self.line(1, &format!("let capacity item index [{}]", caps.join(" ")));
        self.line(1, "if capacity >= 0 and length item index queues >= capacity [ report \"full\" ]");
        self.line(1, "set queues replace-item index queues lput vehicle item index queues");
        self.line(1, "report \"queued\"");
        self.close();

        self.open(&element, &format!("serve-queues-{name}"), false, &[]);
        self.line(1, &format!("ask {} [", plural(&a.name)));
        self.line(2, "let green green-streams");
        self.line(2, "let node one-of road-nodes-here");
        self.line(2, "foreach range length queues [ s ->");
        self.line(3, "if item s green and not empty? item s queues [");
        self.line(4, "let vehicle first item s queues");
        self.line(4, "set queues replace-item s queues but-first item s queues");
        self.line(4, "set arrivals arrivals + 1");
        let movers: Vec<String> = self.agents().filter(|m| m.mobility().is_some()).map(|m| ident(&m.name)).collect();
        self.line(4, "ask vehicle [");
        self.line(5, "set queued? false");
        for m in &movers {
            self.line(5, &format!("if breed = {}s [ depart-{m} ]", m));
        }
        self.line(4, "]");
        self.line(3, "]");
        self.line(2, "]");
        self.line(1, "]");
        self.close();

        if !self.report.procedures().any(|p| p == "stopped-vehicles") {
            self.open("model", "stopped-vehicles", true, &[]);
            self.line(1, "let green green-streams");
            self.line(1, "report sum map [ s -> ifelse-value item s green [ 0 ] [ length item s queues ] ] range length queues");
            self.close();
            self.open("model", "queued-vehicles", true, &[]);
            self.line(1, "report sum map length queues");
            self.close();
            self.open("model", "approach-direction", true, &["origin"]);
            self.line(1, "let dx [xcor] of origin - xcor");
            self.line(1, "let dy [ycor] of origin - ycor");
            self.line(1, "if abs dy >= abs dx [ report ifelse-value dy > 0 [\"north\"] [\"south\"] ]");
            self.line(1, "report ifelse-value dx > 0 [\"east\"] [\"west\"]");
            self.close();
        }
    }

    fn qlearning(&mut self, a: &AgentTypeSpec, q: &QLearningSpec) {
        let element = format!("agent {}/capability qlearning", a.name);
        let name = ident(&a.name);
        let bins: Vec<String> = q.bins.iter().map(|b| b.to_string()).collect();
        self.open(&element, &format!("discretize-{name}"), true, &[]);
        self.line(1, &format!("let bins [{}]", bins.join(" ")));
        self.line(1, "report map [ len -> length filter [ b -> b < len ] bins ] map length queues");
        self.close();

        let plans: Vec<String> = q.plans.iter().map(|p| quote(p)).collect();
        self.open(&element, &format!("q-value-{name}"), true, &["state", "action"]);
        self.line(1, "let key (list state action)");
        self.line(1, "report ifelse-value table:has-key? q-table key [ table:get q-table key ] [ 0 ]");
        self.close();

        self.open(&element, &format!("select-plan-{name}"), true, &[]);
        self.line(1, &format!("let actions range {}", q.plans.len()));
        self.line(1, &format!("if random-float 1 < {} [ report one-of actions ]", num(q.epsilon)));
        self.line(1, &format!("let best max map [ a -> q-value-{name} q-state a ] actions"));
        self.line(1, &format!("report first filter [ a -> q-value-{name} q-state a = best ] actions"));
        self.close();

        self.open(&element, &format!("q-update-{name}"), false, &["next-state"]);
        self.line(
            1,
            &format!(
                "let best-next max map [ a -> q-value-{name} next-state a ] range {}",
                q.plans.len()
            ),
        );
        self.line(1, &format!("let old q-value-{name} q-state q-action"));
        self.line(
            1,
            &format!(
                "table:put q-table (list q-state q-action) old + {} * (reward-acc + {} * best-next - old)",
                num(q.alpha),
                num(q.gamma)
            ),
        );
        self.close();

        self.open(&element, &format!("learn-{name}"), false, &[]);
        self.line(1, &format!("ask {} [", plural(&a.name)));
        self.line(2, &format!("set reward-acc reward-acc + {}", self.x.expr(&q.reward_expr())));
        self.line(2, "if cycle-completed? [");
        self.line(3, &format!("let next-state discretize-{name}"));
        self.line(3, &format!("q-update-{name} next-state"));
        self.line(3, "set q-state next-state");
        self.line(3, &format!("set q-action select-plan-{name}"));
        self.line(3, "set reward-acc 0");
        self.line(3, &format!("set active-plan item q-action [{}]", plans.join(" ")));
        self.line(3, &format!("set {} first phases-of active-plan", state_var("plan")));
        self.line(3, &format!("set {} 0", dwell_var("plan")));
        self.line(2, "]");
        self.line(2, "set cycle-completed? false");
        self.line(1, "]");
        self.close();
    }

    fn disease(&mut self, d: &DiseaseModelSpec) {
        let element = format!("disease {}", d.name);
        let name = ident(&d.name);
        let carriers = self.carriers(&d.name);
        if carriers.is_empty() {
            self.element(&element);
            self.unsupported(&element, "no agent type carries this disease");
            self.line(0, &format!("; disease {} is not carried by any agent type", d.name));
            self.blank();
            return;
        }
        let machine = disease_machine(d);
        let target = MachineTarget::Buffered {
            state: state_var(&d.name),
            dwell: dwell_var(&d.name),
            next: next_var(&d.name),
            next_dwell: next_dwell_var(&d.name),
        };
        self.machine(&element, &format!("step-disease-{name}"), &machine, target);

        if let Some(t) = &d.transmission {
            self.open(&element, &format!("exposed-to-{name}?"), true, &[]);
            let p = self.x.source(&t.probability);
            let infectious: Vec<String> = t.infectious_states().iter().map(|s| quote(s)).collect();
            let radius = num(t.interaction.distance());
            let everyone = Self::agent_set(&carriers);
            self.line(1, &format!("let p {p}"));
            self.line(
                1,
                &format!(
                    "let sources sort (other {everyone}) with [distance myself <= {radius} and member? {} [{}]]",
                    state_var(&d.name),
                    infectious.join(" ")
                ),
            );
            for e in &t.entity_sources {
                let cond = t.condition.as_ref().map_or("true".to_string(), |c| self.x.expr(c));
                self.line(
                    1,
                    &format!(
                        "set sources sentence sources sort {} with [distance myself <= {radius} and {cond}]",
                        plural(e)
                    ),
                );
            }
            self.line(1, "report reduce [ [hit s] -> hit or random-float 1 < p ] fput false sources");
            self.close();
        }

        self.open(&element, &format!("apply-disease-{name}"), false, &[]);
        let everyone = Self::agent_set(&carriers);
        let (sv, dv, nv, ndv) = (state_var(&d.name), dwell_var(&d.name), next_var(&d.name), next_dwell_var(&d.name));
        let graph = crate::disease::disease_graph(d);
        self.line(1, &format!("ask {everyone} ["));
        self.line(
            2,
            &format!(
                "if {sv} = {} and {nv} = {} [ set ever-infected-{name} ever-infected-{name} + 1 ]",
                quote(&graph.susceptible),
                quote(&graph.infected)
            ),
        );
        self.line(2, &format!("set {sv} {nv}"));
        self.line(2, &format!("set {dv} {ndv}"));
        self.line(1, "]");
        self.line(1, &format!("ask {everyone} with [{sv} = {}] [", quote(DEAD)));
        self.line(2, &format!("set deaths-{name} deaths-{name} + 1"));
        self.line(2, "die");
        self.line(1, "]");
        self.line(1, &format!("color-disease-{name}"));
        self.close();

        self.open(&element, &format!("color-disease-{name}"), false, &[]);
        self.line(1, &format!("ask {everyone} ["));
        for (i, s) in machine.states.iter().filter(|s| *s != DEAD).enumerate() {
            let color = compartment_color(s, i);
            self.line(2, &format!("if {sv} = {} [ set color {color} ]", quote(s)));
        }
        self.line(1, "]");
        self.close();
    }

    fn introduction(&mut self, i: usize, spec: &DiseaseIntroductionSpec) {
        let element = format!("introduce {i} {}", spec.disease);
        let name = ident(&spec.disease);
        let carriers = self.carriers(&spec.disease);
        let Some(d) = self.model.disease(&spec.disease) else { return };
        let graph = crate::disease::disease_graph(d);
        self.open(&element, &format!("introduce-{name}-{i}"), false, &[]);
        if carriers.is_empty() {
            self.line(1, "; no carriers");
            self.close();
            return;
        }
        let sv = state_var(&spec.disease);
        let mut filter = format!("{sv} = {}", quote(&graph.susceptible));
        if let Selection::Eligible(e) = &spec.selection {
            write!(filter, " and {}", self.x.expr(e)).unwrap();
        }
        self.line(1, &format!("let pool sort {} with [{filter}]", Self::agent_set(&carriers)));
        let chosen = match spec.quantity {
            Quantity::Deterministic(n) => format!("n-of (min list {} length pool) pool", n.max(0)),
            Quantity::Probabilistic(p) => format!("filter [ a -> random-float 1 < {} ] pool", num(p)),
        };
        self.line(1, &format!("let chosen {chosen}"));
        self.line(
            1,
            &format!(
                "foreach chosen [ a -> ask a [ set {sv} {} set {} 0 ] ]",
                quote(&graph.infected),
                dwell_var(&spec.disease)
            ),
        );
        self.line(1, &format!("set ever-infected-{name} ever-infected-{name} + length chosen"));
        self.close();
    }

    fn outputs(&mut self) {
        let outputs: Vec<&OutputDatasetSpec> = self.model.outputs().collect();
        if outputs.is_empty() {
            return;
        }
        self.open("model", "setup-outputs", false, &[]);
        for o in &outputs {
            let mut header = vec!["tick".to_string()];
            header.extend(o.series.iter().map(|s| s.label.clone()));
            self.line(1, &format!("if file-exists? {0} [ file-delete {0} ]", quote(&o.path)));
            self.line(1, &format!("file-open {}", quote(&o.path)));
            self.line(1, &format!("file-print {}", quote(&header.join(","))));
            self.line(1, "file-close");
        }
        self.close();
        for o in outputs {
            let element = format!("output {}", o.name);
            self.open(&element, &format!("record-output-{}", ident(&o.name)), false, &[]);
            self.line(1, &format!("if ticks mod {} != 0 [ stop ]", o.interval.max(1)));
            self.line(1, &format!("file-open {}", quote(&o.path)));
            let mut cells = vec!["ticks".to_string()];
            for s in &o.series {
                cells.push("\",\"".into());
                cells.push(self.x.expr(&s.expr));
            }
            self.line(1, &format!("file-print (word {})", cells.join(" ")));
            self.line(1, "file-close");
            self.close();
        }
    }

    fn helpers(&mut self) {
        let gis = self.model.items.iter().any(|i| {
            matches!(
                i,
                Item::Agent(AgentTypeSpec { creation: CreationalStrategy::GisPoints { .. }, .. })
                    | Item::Entity(crate::metamodel::EntityTypeSpec { creation: CreationalStrategy::GisPoints { .. }, .. })
            )
        });
        if !gis {
            return;
        }
        self.open("model", "split-fields", true, &["text"]);
        self.line(1, "let fields []");
        self.line(1, "let current \"\"");
        self.line(1, "foreach n-values length text [ i -> item i text ] [ c ->");
        self.line(2, "ifelse c = \",\" [ set fields lput current fields set current \"\" ] [ if c != \" \" [ set current word current c ] ]");
        self.line(1, "]");
        self.line(1, "if current != \"\" or not empty? fields [ set fields lput current fields ]");
        self.line(1, "report fields");
        self.close();
        self.open("model", "field-value", true, &["fields", "key"]);
        self.line(1, "foreach but-first but-first fields [ f ->");
        self.line(2, "let cut position \"=\" f");
        self.line(2, "if cut != false and substring f 0 cut = key [ report substring f (cut + 1) length f ]");
        self.line(1, "]");
        self.line(1, "report false");
        self.close();
    }
}

enum MachineTarget {
    /// Generic machines update the turtle's variables directly.
    Immediate { state: String, dwell: String },
    /// Disease machines write to a buffer applied after all agents stepped.
    Buffered { state: String, dwell: String, next: String, next_dwell: String },
    /// Signal plans flag a completed cycle when re-entering the first phase.
    Plan { state: String, dwell: String, initial: String },
}

impl MachineTarget {
    fn enter(&self, to: &str) -> String {
        match self {
            MachineTarget::Immediate { state, dwell } => format!("set {state} {} set {dwell} 0", quote(to)),
            MachineTarget::Buffered { next, next_dwell, .. } => format!("set {next} {} set {next_dwell} 0", quote(to)),
            MachineTarget::Plan { state, dwell, initial } => {
                let mut s = format!("set {state} {} set {dwell} 0", quote(to));
                if to == initial {
                    s.push_str(" set cycle-completed? true");
                }
                s
            }
        }
    }
}

fn compartment_color(state: &str, index: usize) -> &'static str {
    match state {
        "S" => "green",
        "E" => "yellow",
        "I" => "red",
        "R" => "gray",
        "P" => "blue",
        _ => ["cyan", "orange", "magenta", "brown", "lime", "violet"][index % 6],
    }
}

fn has_behavior(a: &AgentTypeSpec) -> bool {
    a.capabilities.iter().any(|c| {
        matches!(
            c.kind,
            Capability::Mobility { .. } | Capability::StateMachine { .. } | Capability::Disease { .. } | Capability::FlowControl(_)
        )
    })
}

/// Emits NetLogo code for a validated model. The output depends only on the
/// model, so equal models give byte-identical source.
pub fn generate(model: &Model) -> (String, GenerationReport) {
    let mut e = Emitter { model, x: Exprs { model }, out: String::new(), report: GenerationReport::default() };
    e.element("model");
    e.header();
    e.breeds();
    e.setup();
    e.go();
    e.environment();
    for item in &model.items {
        match item {
            Item::Agent(a) => e.creation(&a.name, &a.creation, &a.attributes, Some(a)),
            Item::Entity(en) => e.creation(&en.name, &en.creation, &en.attributes, None),
            _ => {}
        }
    }
    for a in model.agents() {
        e.agent_step(a);
        if let Some(f) = a.flow_control() {
            e.flow_control(a, f);
        }
        if let Some(q) = a.qlearning() {
            e.qlearning(a, q);
        }
        for cap in &a.capabilities {
            if let Capability::Adaptation { criterion } = &cap.kind {
                let element = format!("agent {}/capability adaptation", a.name);
                e.unsupported(&element, "adaptation capability is not supported");
                e.line(0, &format!("; adaptation capability ({criterion}) is not supported"));
                e.blank();
            }
        }
    }
    e.machines();
    e.plans();
    for d in model.diseases() {
        e.disease(d);
    }
    for (i, intro) in model.introductions().enumerate() {
        e.introduction(i, intro);
    }
    e.outputs();
    e.helpers();
    for c in model.concerns() {
        e.element(&format!("concern {}", c.name));
    }
    while e.out.ends_with("\n\n") {
        e.out.pop();
    }
    (e.out, e.report)
}

/// Structural check of generated source: every breed and procedure named in
/// the model's generation report is defined exactly once, and brackets and
/// parentheses balance outside strings and comments.
pub fn check_structure(source: &str, model: &Model) -> bool {
    let (_, report) = generate(model);
    let mut definitions: Vec<&str> = Vec::new();
    let mut breeds: Vec<&str> = Vec::new();
    for line in source.lines() {
        let mut words = line.split_whitespace();
        match words.next() {
            Some("to") | Some("to-report") => {
                if let Some(name) = words.next() {
                    definitions.push(name);
                }
            }
            Some("breed") => {
                if let Some(name) = words.next() {
                    breeds.push(name.trim_start_matches('['));
                }
            }
            _ => {}
        }
    }
    let once = |list: &[&str], name: &str| list.iter().filter(|d| **d == name).count() == 1;
    let expected: BTreeSet<&str> = report.procedures().collect();
    expected.iter().all(|p| once(&definitions, p))
        && report.breeds.iter().all(|b| once(&breeds, b))
        && balanced(source)
}

fn balanced(source: &str) -> bool {
    let mut stack = Vec::new();
    for line in source.lines() {
        let mut chars = line.chars();
        let mut in_string = false;
        while let Some(c) = chars.next() {
            if in_string {
                match c {
                    '\\' => {
                        chars.next();
                    }
                    '"' => in_string = false,
                    _ => {}
                }
                continue;
            }
            match c {
                ';' => break,
                '"' => in_string = true,
                '[' | '(' => stack.push(c),
                ']' => {
                    if stack.pop() != Some('[') {
                        return false;
                    }
                }
                ')' => {
                    if stack.pop() != Some('(') {
                        return false;
                    }
                }
                _ => {}
            }
        }
        if in_string {
            return false;
        }
    }
    stack.is_empty()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bracket_balance() {
        assert!(balanced("to go [ (a) ] end"));
        assert!(balanced("print \"[\" ; ]]]"));
        assert!(!balanced("to go [ ( ] )"));
        assert!(!balanced("["));
        assert!(!balanced("print \"open"));
    }

    #[test]
    fn empty_grid_has_setup_and_go_but_no_breeds() {
        let model = Model::new("empty", Topology::Grid { width: 3, height: 3, wrap: false });
        let (src, report) = generate(&model);
        assert!(report.breeds.is_empty());
        assert!(!src.contains("breed ["));
        assert!(src.contains("to setup\n"));
        assert!(src.contains("to go\n"));
        assert!(check_structure(&src, &model));
    }
}
