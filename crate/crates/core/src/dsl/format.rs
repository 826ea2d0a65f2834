use std::fmt::Write;

use crate::expr::{format_real_literal as num, Expr};
use crate::metamodel::*;

/// Canonical text of a model: two-space indentation, one declaration per
/// block, declarations in source order. `parse(format(m)) == m`.
pub fn format(model: &Model) -> String {
    let mut w = Writer { out: String::new(), indent: 0 };
    w.line(&format!("model {} {{", model.name));
    w.indent += 1;
    w.environment(&model.environment.topology);
    for item in &model.items {
        w.out.push('\n');
        w.item(item);
    }
    w.indent -= 1;
    w.line("}");
    w.out
}

fn quote(s: &str) -> String {
    Expr::Text(s.to_string()).to_string()
}

fn list(items: &[String]) -> String {
    format!("[{}]", items.join(", "))
}

fn trigger(t: &Trigger) -> String {
    match t {
        Trigger::Probabilistic { rate } => format!("probabilistic rate {rate}"),
        Trigger::Deterministic { ticks } => format!("deterministic ticks {ticks}"),
        Trigger::Conditional { condition } => format!("conditional until {condition}"),
        Trigger::Custom { combinator, triggers } => {
            let parts: Vec<String> = triggers.iter().map(trigger).collect();
            format!("custom {}({})", combinator.keyword(), parts.join(", "))
        }
        // not expressible in source; disease compilation introduces it
        Trigger::Interaction => "interaction".into(),
    }
}

struct Writer {
    out: String,
    indent: usize,
}

impl Writer {
    fn line(&mut self, text: &str) {
        for _ in 0..self.indent {
            self.out.push_str("  ");
        }
        self.out.push_str(text);
        self.out.push('\n');
    }

    fn open(&mut self, text: &str) {
        self.line(&format!("{text} {{"));
        self.indent += 1;
    }

    fn close(&mut self) {
        self.indent -= 1;
        self.line("}");
    }

    fn environment(&mut self, t: &Topology) {
        match t {
            Topology::Grid { width, height, wrap } => {
                let wrap = if *wrap { " wrap" } else { "" };
                self.line(&format!("environment grid width {width} height {height}{wrap}"));
            }
            Topology::Cartesian { x_min, x_max, y_min, y_max } => self.line(&format!(
                "environment cartesian [{}, {}] [{}, {}]",
                num(*x_min),
                num(*x_max),
                num(*y_min),
                num(*y_max)
            )),
            Topology::Graph { source } => match source {
                CreationalStrategy::OsmGraph { path } => {
                    self.line(&format!("environment graph from osm {}", quote(path)))
                }
                CreationalStrategy::InlineEdgeList { nodes, edges } => {
                    self.open("environment graph from edges");
                    for n in nodes {
                        self.line(&format!("node {} at {} {}", n.name, num(n.x), num(n.y)));
                    }
                    for e in edges {
                        match e.length {
                            Some(len) => self.line(&format!("edge {} {} {}", e.a, e.b, num(len))),
                            None => self.line(&format!("edge {} {}", e.a, e.b)),
                        }
                    }
                    self.close();
                }
                // not expressible as an environment; kept visible for diagnostics
                other => self.line(&format!("environment graph from {}", creation(other))),
            },
        }
    }

    fn item(&mut self, item: &Item) {
        match item {
            Item::Entity(e) => {
                self.open(&format!("entity {}", e.name));
                self.line(&format!("create {}", creation(&e.creation)));
                self.attributes(&e.attributes);
                self.close();
            }
            Item::Agent(a) => {
                self.open(&format!("agent {}", a.name));
                self.line(&format!("create {}", creation(&a.creation)));
                for c in &a.capabilities {
                    self.capability(&c.kind);
                }
                self.attributes(&a.attributes);
                self.close();
            }
            Item::Machine(m) => {
                self.open(&format!("machine {}", m.name));
                self.line(&format!("states {}", list(&m.states)));
                self.line(&format!("initial {}", m.initial));
                for t in &m.transitions {
                    let mut s = format!("transition {} -> {} {}", t.from, t.to, trigger(&t.trigger));
                    if let Some(g) = &t.guard {
                        write!(s, " when {g}").unwrap();
                    }
                    if let Some(a) = &t.abortion {
                        write!(s, " abort {} to {}", a.probability, a.abort_to).unwrap();
                    }
                    self.line(&s);
                }
                self.close();
            }
            Item::Plan(p) => {
                self.open(&format!("plan {}", p.name));
                for ph in &p.phases {
                    self.line(&format!("phase {} green {} duration {}", ph.name, list(&ph.green), ph.duration));
                }
                self.close();
            }
            Item::Disease(d) => self.disease(d),
            Item::Introduce(i) => {
                let quantity = match i.quantity {
                    Quantity::Deterministic(n) => format!("deterministic {n}"),
                    Quantity::Probabilistic(p) => format!("probabilistic {}", num(p)),
                };
                let selection = match &i.selection {
                    Selection::Arbitrary => "arbitrary".to_string(),
                    Selection::Eligible(e) => format!("eligible {e}"),
                };
                let periodicity = match i.periodicity {
                    Periodicity::Aperiodic => "aperiodic".to_string(),
                    Periodicity::Periodic(k) => format!("periodic {k}"),
                };
                self.line(&format!("introduce {} {quantity} {selection} {periodicity}", i.disease));
            }
            Item::Output(o) => {
                self.open(&format!("output {} every {} to {}", o.name, o.interval, quote(&o.path)));
                for s in &o.series {
                    self.line(&format!("series {} = {}", s.label, s.expr));
                }
                self.close();
            }
            Item::Concern(c) => self.line(&format!("concern {} {}", c.name, list(&c.members))),
        }
    }

    fn attributes(&mut self, attrs: &[AttributeSpec]) {
        for a in attrs {
            self.line(&format!("attr {} {} = {}", a.name, a.kind.keyword(), a.default));
        }
    }

    fn capability(&mut self, c: &Capability) {
        match c {
            Capability::Mobility { step } => self.line(&format!("capability mobility random_walk step {}", num(*step))),
            Capability::Disease { disease } => self.line(&format!("capability disease {disease}")),
            Capability::StateMachine { machine } => self.line(&format!("capability state_machine {machine}")),
            Capability::FlowControl(f) => {
                self.open("capability flow_control");
                for s in &f.streams {
                    match s.capacity {
                        Some(c) => self.line(&format!("stream {} capacity {c}", s.id)),
                        None => self.line(&format!("stream {}", s.id)),
                    }
                }
                for (a, b) in &f.compatible {
                    self.line(&format!("compatible {a} {b}"));
                }
                self.close();
            }
            Capability::QLearning(q) => {
                self.open("capability qlearning");
                self.line(&format!("alpha {}", num(q.alpha)));
                self.line(&format!("gamma {}", num(q.gamma)));
                self.line(&format!("epsilon {}", num(q.epsilon)));
                self.line(&format!("plans {}", list(&q.plans)));
                let bins: Vec<String> = q.bins.iter().map(|b| b.to_string()).collect();
                self.line(&format!("bins {}", list(&bins)));
                if let Some(r) = &q.reward {
                    self.line(&format!("reward {r}"));
                }
                self.close();
            }
            Capability::External { library, entry } => {
                self.line(&format!("capability external {} {entry}", quote(library)))
            }
            Capability::Adaptation { criterion } => self.line(&format!("capability adaptation {criterion}")),
        }
    }

    fn disease(&mut self, d: &DiseaseModelSpec) {
        self.open(&format!("disease {} model {}", d.name, d.kind.keyword()));
        if !d.compartments.is_empty() {
            self.line(&format!("compartments {}", list(&d.compartments)));
        }
        if let Some(e) = &d.infection {
            self.line(&format!("infection {} -> {}", e.from, e.to));
        }
        if let Some(t) = &d.transmission {
            let mut s = match t.interaction {
                Interaction::Proximity { distance } => format!("transmission proximity {}", num(distance)),
                Interaction::Contact => "transmission contact".to_string(),
            };
            write!(s, " probability {}", t.probability).unwrap();
            if !t.infectious.is_empty() {
                write!(s, " infectious {}", list(&t.infectious)).unwrap();
            }
            if let Some(c) = &t.condition {
                write!(s, " condition {c}").unwrap();
            }
            if !t.entity_sources.is_empty() {
                write!(s, " from {}", list(&t.entity_sources)).unwrap();
            }
            self.line(&s);
        }
        for dur in &d.durations {
            let target = dur.target.as_ref().map(|t| format!(" -> {t}")).unwrap_or_default();
            self.line(&format!("duration {}{target} {}", dur.compartment, trigger(&dur.trigger)));
        }
        for m in &d.mortality {
            let eval = match &m.evaluation {
                DeathRateEvaluation::SpecificTimeunit(t) => format!("specific_timeunit {t}"),
                DeathRateEvaluation::WhenCondition(e) => format!("when_condition {e}"),
                other => other.keyword().to_string(),
            };
            self.line(&format!("mortality {} rate {} {eval}", m.compartment, m.rate));
        }
        if let Some(t) = &d.passive_immunity {
            self.line(&format!("immunity passive {}", trigger(t)));
        }
        if let Some(t) = &d.recovered_immunity {
            self.line(&format!("immunity recovered {}", trigger(t)));
        }
        self.close();
    }
}

fn creation(c: &CreationalStrategy) -> String {
    match c {
        CreationalStrategy::FixedCount { count, placement: Placement::Random } => format!("{count} random"),
        CreationalStrategy::FixedCount { count, placement: Placement::At(points) } => {
            let pts: Vec<String> = points.iter().map(|(x, y)| format!("({}, {})", num(*x), num(*y))).collect();
            format!("{count} at [{}]", pts.join(", "))
        }
        CreationalStrategy::GisPoints { path } => format!("gis {}", quote(path)),
        CreationalStrategy::OsmGraph { path } => format!("osm {}", quote(path)),
        CreationalStrategy::InlineEdgeList { .. } => "edges { }".into(),
        CreationalStrategy::Intersections => "intersections".into(),
    }
}
