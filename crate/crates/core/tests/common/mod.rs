#![allow(dead_code)]

use std::fmt::Write;
use std::path::PathBuf;

use abms_core::dsl;
use abms_core::metamodel::Model;
use rand::Rng;

pub const FIXTURES: [&str; 3] = ["measles.abms", "disease.abms", "traffic.abms"];

pub fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn fixture_text(name: &str) -> String {
    std::fs::read_to_string(fixtures_dir().join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

pub fn load_fixture(name: &str) -> Model {
    dsl::parse(&fixture_text(name)).unwrap_or_else(|e| panic!("{name}: {e:?}"))
}

pub fn parse(src: &str) -> Model {
    dsl::parse(src).unwrap_or_else(|e| panic!("{e:?}\n{src}"))
}

fn pick<'a, R: Rng>(rng: &mut R, items: &[&'a str]) -> &'a str {
    items[rng.random_range(0..items.len())]
}

/// A rate or probability with three decimals, so it prints exactly.
fn prob<R: Rng>(rng: &mut R, lo: u32, hi: u32) -> String {
    format!("{:.3}", rng.random_range(lo..=hi) as f64 / 1000.0)
}

fn duration_trigger<R: Rng>(rng: &mut R) -> String {
    match rng.random_range(0..3) {
        0 => format!("probabilistic rate {}", prob(rng, 20, 500)),
        1 => format!("deterministic ticks {}", rng.random_range(1..12)),
        _ => format!(
            "custom any_of(probabilistic rate {}, deterministic ticks {})",
            prob(rng, 20, 300),
            rng.random_range(2..15)
        ),
    }
}

/// Source of a random model that validates: one disease shared by one to
/// three agent types on a grid, with random durations, mortality and
/// introductions.
pub fn random_disease_model<R: Rng>(rng: &mut R, index: usize) -> String {
    let mut s = String::new();
    let (w, h) = (rng.random_range(4..25), rng.random_range(4..25));
    let wrap = if rng.random_bool(0.5) { " wrap" } else { "" };
    writeln!(s, "model generated_{index} {{").unwrap();
    writeln!(s, "  environment grid width {w} height {h}{wrap}").unwrap();
    let types = rng.random_range(1..=3);
    for t in 0..types {
        writeln!(s, "  agent kind{t} {{").unwrap();
        writeln!(s, "    create {} random", rng.random_range(1..60)).unwrap();
        if rng.random_bool(0.8) {
            writeln!(s, "    capability mobility random_walk step {}", rng.random_range(1..4)).unwrap();
        }
        writeln!(s, "    capability disease flu").unwrap();
        writeln!(s, "    attr age integer = {}", rng.random_range(0..80)).unwrap();
        writeln!(s, "  }}").unwrap();
    }

    let kind = pick(rng, &["SIR", "SEIR", "PSIR", "custom"]);
    writeln!(s, "  disease flu model {kind} {{").unwrap();
    let transmission = if rng.random_bool(0.7) {
        format!("proximity {}", rng.random_range(1..4))
    } else {
        "contact".to_string()
    };
    let infectious = if kind == "custom" { " infectious [A, B]" } else { "" };
    writeln!(s, "    transmission {transmission} probability {}{infectious}", prob(rng, 0, 900)).unwrap();
    // compartments that have a progression trigger, for mortality placement
    let mut progressing: Vec<&str> = Vec::new();
    let mut all: Vec<&str> = Vec::new();
    match kind {
        "SIR" => {
            writeln!(s, "    duration I {}", duration_trigger(rng)).unwrap();
            progressing.push("I");
            all.extend(["I", "R"]);
            if rng.random_bool(0.5) {
                writeln!(s, "    immunity recovered {}", duration_trigger(rng)).unwrap();
                progressing.push("R");
            }
        }
        "SEIR" => {
            writeln!(s, "    duration E {}", duration_trigger(rng)).unwrap();
            writeln!(s, "    duration I {}", duration_trigger(rng)).unwrap();
            progressing.extend(["E", "I"]);
            all.extend(["E", "I", "R"]);
            if rng.random_bool(0.5) {
                writeln!(s, "    immunity recovered {}", duration_trigger(rng)).unwrap();
                progressing.push("R");
            }
        }
        "PSIR" => {
            writeln!(s, "    duration I {}", duration_trigger(rng)).unwrap();
            writeln!(s, "    immunity passive {}", duration_trigger(rng)).unwrap();
            progressing.extend(["I", "P"]);
            all.extend(["P", "I", "R"]);
        }
        _ => {
            writeln!(s, "    compartments [S, A, B, C]").unwrap();
            writeln!(s, "    infection S -> A").unwrap();
            writeln!(s, "    duration A -> B {}", duration_trigger(rng)).unwrap();
            writeln!(s, "    duration B -> C {}", duration_trigger(rng)).unwrap();
            progressing.extend(["A", "B"]);
            all.extend(["A", "B", "C"]);
            if rng.random_bool(0.5) {
                writeln!(s, "    duration C -> S {}", duration_trigger(rng)).unwrap();
                progressing.push("C");
            }
        }
    }
    let mut leaving_used: Vec<&str> = Vec::new();
    for _ in 0..rng.random_range(0..3) {
        let compartment = pick(rng, &all);
        let rate = prob(rng, 0, 200);
        let evaluation = match rng.random_range(0..4) {
            0 => "every_timeunit".to_string(),
            1 => format!("specific_timeunit {}", rng.random_range(0..30)),
            2 => format!("when_condition age > {}", rng.random_range(0..80)),
            _ => {
                let c = pick(rng, &progressing);
                if leaving_used.contains(&c) {
                    continue;
                }
                leaving_used.push(c);
                writeln!(s, "    mortality {c} rate {rate} leaving_compartment").unwrap();
                continue;
            }
        };
        writeln!(s, "    mortality {compartment} rate {rate} {evaluation}").unwrap();
    }
    writeln!(s, "  }}").unwrap();

    for _ in 0..rng.random_range(1..3) {
        let quantity = if rng.random_bool(0.5) {
            format!("deterministic {}", rng.random_range(0..10))
        } else {
            format!("probabilistic {}", prob(rng, 0, 300))
        };
        let selection =
            if rng.random_bool(0.5) { "arbitrary".to_string() } else { format!("eligible age > {}", rng.random_range(0..60)) };
        let periodicity =
            if rng.random_bool(0.5) { "aperiodic".to_string() } else { format!("periodic {}", rng.random_range(1..40)) };
        writeln!(s, "  introduce flu {quantity} {selection} {periodicity}").unwrap();
    }
    writeln!(s, "}}").unwrap();
    s
}

/// Text of a random, syntactically valid model exercising every
/// construct of the grammar. It need not validate.
pub fn random_model_source<R: Rng>(rng: &mut R) -> String {
    let mut g = Gen { rng, depth: 0 };
    g.model()
}

struct Gen<'r, R: Rng> {
    rng: &'r mut R,
    depth: usize,
}

const NAMES: [&str; 8] = ["alpha", "beta", "gamma_", "delta", "eps", "zeta", "eta", "theta"];

impl<R: Rng> Gen<'_, R> {
    fn chance(&mut self, p: f64) -> bool {
        self.rng.random_bool(p)
    }

    fn name(&mut self) -> String {
        format!("{}{}", pick(self.rng, &NAMES), self.rng.random_range(0..5))
    }

    fn num(&mut self) -> String {
        if self.chance(0.5) {
            self.rng.random_range(0..1000).to_string()
        } else {
            format!("{}", self.rng.random_range(0..100_000) as f64 / 64.0)
        }
    }

    fn real(&mut self) -> String {
        let v = self.rng.random_range(1..4000) as f64 / 16.0;
        if v.fract() == 0.0 {
            format!("{v:.1}")
        } else {
            format!("{v}")
        }
    }

    fn list(&mut self, lo: usize, hi: usize) -> String {
        let n = self.rng.random_range(lo..=hi);
        let items: Vec<String> = (0..n).map(|_| self.name()).collect();
        format!("[{}]", items.join(", "))
    }

    fn leaf(&mut self) -> String {
        match self.rng.random_range(0..9) {
            0 => self.num(),
            1 => "true".into(),
            2 => "false".into(),
            3 => self.name(),
            4 => format!("self.{}", self.name()),
            5 => format!("\"s{}\"", self.rng.random_range(0..9)),
            6 => "tick".into(),
            7 => format!("in_state({}, {})", self.name(), self.name()),
            _ => pick(self.rng, &["stopped()", "queued()", "arrivals()"]).into(),
        }
    }

    /// Any expression.
    fn expr(&mut self) -> String {
        self.depth += 1;
        let e = if self.depth > 3 || self.chance(0.3) {
            self.leaf()
        } else {
            match self.rng.random_range(0..5) {
                0 => format!("not {}", self.expr()),
                1 => {
                    let op = pick(self.rng, &["and", "or"]);
                    let lhs = self.expr();
                    let lhs = if lhs.starts_with("not ") && op == "or" { format!("({lhs})") } else { lhs };
                    format!("{lhs} {op} {}", self.expr())
                }
                2 => {
                    let op = pick(self.rng, &["<", "<=", ">", ">=", "==", "!="]);
                    format!("{} {op} {}", self.arith(), self.arith())
                }
                _ => self.arith(),
            }
        };
        self.depth -= 1;
        e
    }

    /// An expression at arithmetic precedence or tighter.
    fn arith(&mut self) -> String {
        self.depth += 1;
        let e = if self.depth > 3 || self.chance(0.35) {
            self.leaf()
        } else {
            match self.rng.random_range(0..6) {
                0 | 1 => {
                    let op = pick(self.rng, &["+", "-", "*", "/"]);
                    format!("{} {op} {}", self.arith(), self.arith())
                }
                2 => format!("-{}", self.arith()),
                3 => format!("({})", self.expr()),
                4 => {
                    let f = pick(self.rng, &["count", "sum"]);
                    let filter = if self.chance(0.5) { format!(" where {}", self.expr()) } else { String::new() };
                    if f == "count" {
                        format!("count({}{filter})", self.name())
                    } else {
                        format!("{f}({}, {}{filter})", self.name(), self.expr())
                    }
                }
                _ => format!("{}({})", pick(self.rng, &["deaths", "ever_infected"]), self.name()),
            }
        };
        self.depth -= 1;
        e
    }

    fn trigger(&mut self, nest: usize) -> String {
        match self.rng.random_range(0..if nest > 1 { 3 } else { 4 }) {
            0 => format!("probabilistic rate {}", self.expr()),
            1 => format!("deterministic ticks {}", self.expr()),
            2 => format!("conditional until {}", self.expr()),
            _ => {
                let comb = pick(self.rng, &["all_of", "any_of"]);
                let n = self.rng.random_range(1..4);
                let parts: Vec<String> = (0..n).map(|_| self.trigger(nest + 1)).collect();
                format!("custom {comb}({})", parts.join(", "))
            }
        }
    }

    fn environment(&mut self) -> String {
        match self.rng.random_range(0..4) {
            0 => format!(
                "environment grid width {} height {}{}",
                self.rng.random_range(1..100),
                self.rng.random_range(1..100),
                if self.chance(0.5) { " wrap" } else { "" }
            ),
            1 => format!("environment cartesian [{}, {}] [-{}, {}]", self.num(), self.num(), self.real(), self.num()),
            2 => format!("environment graph from osm \"map{}.osm\"", self.rng.random_range(0..9)),
            _ => {
                let mut s = String::from("environment graph from edges {\n");
                for i in 0..self.rng.random_range(0..4) {
                    writeln!(s, "    node n{i} at {} {}", self.num(), self.num()).unwrap();
                }
                for _ in 0..self.rng.random_range(0..4) {
                    let len = if self.chance(0.5) { format!(" {}", self.real()) } else { String::new() };
                    writeln!(s, "    edge n{} n{}{len}", self.rng.random_range(0..4), self.rng.random_range(0..4)).unwrap();
                }
                s.push_str("  }");
                s
            }
        }
    }

    fn creation(&mut self) -> String {
        match self.rng.random_range(0..4) {
            0 => format!("gis \"p{}.points\"", self.rng.random_range(0..9)),
            1 => "intersections".into(),
            2 => format!("{} random", self.rng.random_range(0..500)),
            _ => {
                let n = self.rng.random_range(0..3);
                let pts: Vec<String> = (0..n).map(|_| format!("({}, {})", self.num(), self.num())).collect();
                format!("{} at [{}]", self.rng.random_range(0..10), pts.join(", "))
            }
        }
    }

    fn attr(&mut self) -> String {
        let kind = pick(self.rng, &["integer", "real", "boolean", "identifier", "text"]);
        format!("attr {} {kind} = {}", self.name(), self.expr())
    }

    fn capability(&mut self) -> String {
        match self.rng.random_range(0..7) {
            0 => format!("capability mobility random_walk step {}", self.real()),
            1 => format!("capability disease {}", self.name()),
            2 => format!("capability state_machine {}", self.name()),
            3 => {
                let mut s = String::from("capability flow_control {\n");
                for _ in 0..self.rng.random_range(0..4) {
                    let cap = if self.chance(0.5) { format!(" capacity {}", self.rng.random_range(1..50)) } else { String::new() };
                    writeln!(s, "      stream {}{cap}", self.name()).unwrap();
                }
                for _ in 0..self.rng.random_range(0..3) {
                    writeln!(s, "      compatible {} {}", self.name(), self.name()).unwrap();
                }
                s.push_str("    }");
                s
            }
            4 => {
                let bins: Vec<String> = (0..self.rng.random_range(0..4)).map(|_| self.rng.random_range(0..20).to_string()).collect();
                let reward = if self.chance(0.5) { format!(" reward {}", self.expr()) } else { String::new() };
                format!(
                    "capability qlearning {{ alpha {} gamma {} epsilon {} plans {} bins [{}]{reward} }}",
                    self.real(),
                    self.real(),
                    self.real(),
                    self.list(0, 3),
                    bins.join(", ")
                )
            }
            5 => format!("capability external \"lib{}.nls\" {}", self.rng.random_range(0..9), self.name()),
            _ => format!("capability adaptation {}", self.name()),
        }
    }

    fn item(&mut self) -> String {
        match self.rng.random_range(0..8) {
            0 | 1 => {
                let agent = self.chance(0.7);
                let mut s = format!("{} {} {{\n    create {}\n", if agent { "agent" } else { "entity" }, self.name(), self.creation());
                for _ in 0..self.rng.random_range(0..4) {
                    let line = if agent && self.chance(0.5) { self.capability() } else { self.attr() };
                    writeln!(s, "    {line}").unwrap();
                }
                s.push_str("  }");
                s
            }
            2 => {
                let mut s = format!("disease {} model {} {{\n", self.name(), pick(self.rng, &["SIR", "SEIR", "PSIR", "custom"]));
                let mut used = Vec::new();
                for _ in 0..self.rng.random_range(0..7) {
                    let clause = pick(
                        self.rng,
                        &["compartments", "infection", "transmission", "duration", "mortality", "immunity"],
                    );
                    let once = ["compartments", "infection", "transmission"].contains(&clause);
                    if once && used.contains(&clause) {
                        continue;
                    }
                    used.push(clause);
                    let body = match clause {
                        "compartments" => format!("compartments {}", self.list(1, 4)),
                        "infection" => format!("infection {} -> {}", self.name(), self.name()),
                        "transmission" => {
                            let how = if self.chance(0.5) { format!("proximity {}", self.real()) } else { "contact".into() };
                            let mut t = format!("transmission {how} probability {}", self.expr());
                            if self.chance(0.3) {
                                write!(t, " infectious {}", self.list(1, 3)).unwrap();
                            }
                            if self.chance(0.3) {
                                write!(t, " condition {}", self.expr()).unwrap();
                            }
                            if self.chance(0.3) {
                                write!(t, " from {}", self.list(1, 2)).unwrap();
                            }
                            t
                        }
                        "duration" => {
                            let target = if self.chance(0.5) { format!(" -> {}", self.name()) } else { String::new() };
                            format!("duration {}{target} {}", self.name(), self.trigger(0))
                        }
                        "mortality" => {
                            let eval = match self.rng.random_range(0..4) {
                                0 => "every_timeunit".to_string(),
                                1 => format!("specific_timeunit {}", self.rng.random_range(0..100)),
                                2 => format!("when_condition {}", self.expr()),
                                _ => "leaving_compartment".to_string(),
                            };
                            format!("mortality {} rate {} {eval}", self.name(), self.expr())
                        }
                        _ => {
                            let which = pick(self.rng, &["recovered", "passive"]);
                            if used.iter().filter(|c| **c == "immunity").count() > 1 {
                                continue;
                            }
                            format!("immunity {which} {}", self.trigger(0))
                        }
                    };
                    writeln!(s, "    {body}").unwrap();
                }
                s.push_str("  }");
                // a repeated immunity kind is a parse error; keep one of each
                if s.matches("immunity recovered").count() > 1 || s.matches("immunity passive").count() > 1 {
                    let mut seen = (false, false);
                    s = s
                        .lines()
                        .filter(|l| {
                            let t = l.trim_start();
                            if t.starts_with("immunity recovered") {
                                !std::mem::replace(&mut seen.0, true)
                            } else if t.starts_with("immunity passive") {
                                !std::mem::replace(&mut seen.1, true)
                            } else {
                                true
                            }
                        })
                        .collect::<Vec<_>>()
                        .join("\n");
                }
                s
            }
            3 => {
                let mut s = format!("machine {} {{\n    states {}\n    initial {}\n", self.name(), self.list(1, 4), self.name());
                for _ in 0..self.rng.random_range(0..4) {
                    let mut t = format!("transition {} -> {} {}", self.name(), self.name(), self.trigger(0));
                    if self.chance(0.3) {
                        write!(t, " when {}", self.expr()).unwrap();
                    }
                    if self.chance(0.3) {
                        write!(t, " abort {} to {}", self.expr(), self.name()).unwrap();
                    }
                    writeln!(s, "    {t}").unwrap();
                }
                s.push_str("  }");
                s
            }
            4 => {
                let mut s = format!("plan {} {{\n", self.name());
                for _ in 0..self.rng.random_range(0..4) {
                    writeln!(s, "    phase {} green {} duration {}", self.name(), self.list(0, 3), self.rng.random_range(0..40)).unwrap();
                }
                s.push_str("  }");
                s
            }
            5 => {
                let qty = if self.chance(0.5) {
                    format!("deterministic {}", self.rng.random_range(0..50))
                } else {
                    format!("probabilistic {}", self.real())
                };
                let sel = if self.chance(0.5) { "arbitrary".to_string() } else { format!("eligible {}", self.expr()) };
                let per = if self.chance(0.5) { "aperiodic".to_string() } else { format!("periodic {}", self.rng.random_range(0..50)) };
                format!("introduce {} {qty} {sel} {per}", self.name())
            }
            6 => {
                let mut s = format!(
                    "output {} every {} to \"f{}.csv\" {{\n",
                    self.name(),
                    self.rng.random_range(1..20),
                    self.rng.random_range(0..9)
                );
                for _ in 0..self.rng.random_range(0..4) {
                    writeln!(s, "    series {} = {}", self.name(), self.expr()).unwrap();
                }
                s.push_str("  }");
                s
            }
            _ => format!("concern {} {}", self.name(), self.list(0, 4)),
        }
    }

    fn model(&mut self) -> String {
        let mut s = format!("model {} {{\n  {}\n", self.name(), self.environment());
        let mut used: Vec<String> = Vec::new();
        for _ in 0..self.rng.random_range(0..7) {
            let item = self.item();
            // duplicate declarations of the same kind and name are rejected
            let mut words = item.split_whitespace();
            let ns = match words.next().unwrap_or_default() {
                "agent" | "entity" => "type",
                "machine" | "plan" => "machine",
                other => other,
            };
            let head = format!("{ns} {}", words.next().unwrap_or_default());
            let keyed = ns != "introduce";
            if keyed && used.contains(&head) {
                continue;
            }
            used.push(head);
            writeln!(s, "\n  {item}").unwrap();
        }
        s.push_str("}\n");
        s
    }
}

/// `source` without the definition of procedure `name`, or `None` when it
/// is not defined.
pub fn delete_procedure(source: &str, name: &str) -> Option<String> {
    let lines: Vec<&str> = source.lines().collect();
    let start = lines.iter().position(|l| {
        let mut w = l.split_whitespace();
        matches!(w.next(), Some("to" | "to-report")) && w.next() == Some(name)
    })?;
    let end = start + lines[start..].iter().position(|l| l.trim() == "end")?;
    let kept: Vec<&str> = lines[..start].iter().chain(&lines[end + 1..]).copied().collect();
    Some(kept.join("\n") + "\n")
}

/// Code lines (not blank, not comments) with no string literal.
fn plain_code_lines(source: &str) -> Vec<usize> {
    source
        .lines()
        .enumerate()
        .filter(|(_, l)| {
            let t = l.trim();
            !t.is_empty() && !t.starts_with(';') && !t.contains('"') && !t.contains(';')
        })
        .map(|(i, _)| i)
        .collect()
}

/// Breaks bracket balance in one of several ways, chosen by `variant`.
pub fn unbalance(source: &str, variant: usize) -> String {
    let mut lines: Vec<String> = source.lines().map(String::from).collect();
    let code = plain_code_lines(source);
    let with = |c: char| -> Vec<usize> { code.iter().copied().filter(|&i| lines[i].contains(c)).collect() };
    match variant % 4 {
        0 => {
            let candidates = with(']');
            let i = candidates[(variant / 4) % candidates.len()];
            let at = lines[i].rfind(']').unwrap();
            lines[i].remove(at);
        }
        1 => {
            let i = code[(variant * 7) % code.len()];
            lines[i].push_str(" [");
        }
        2 => {
            let candidates = with('(');
            if candidates.is_empty() {
                let i = code[(variant * 5) % code.len()];
                lines[i].push_str(" )");
            } else {
                let i = candidates[(variant / 4) % candidates.len()];
                let at = lines[i].find('(').unwrap();
                lines[i].remove(at);
            }
        }
        _ => {
            let candidates = with('[');
            let i = candidates[(variant / 4 + 3) % candidates.len()];
            let at = lines[i].find('[').unwrap();
            lines[i].replace_range(at..at + 1, "(");
        }
    }
    lines.join("\n") + "\n"
}
