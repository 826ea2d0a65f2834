use std::collections::HashSet;
use std::sync::Arc;

use crate::expr::{BinaryOp, Expr};
use crate::metamodel::*;

use super::lexer::{tokenize, Token, TokenKind};
use super::ParseError;

const MAX_DEPTH: usize = 48;

const ITEM_KEYWORDS: [&str; 8] = ["agent", "entity", "disease", "machine", "plan", "introduce", "output", "concern"];

type PResult<T> = Result<T, ParseError>;

/// Parses a model. Errors are collected across the whole input: after a
/// syntax error the parser skips to the next declaration and continues.
pub fn parse(src: &str) -> Result<Model, Vec<ParseError>> {
    parse_with_file(src, None)
}

/// Like [`parse`], recording `file` in every span.
pub fn parse_with_file(src: &str, file: Option<&str>) -> Result<Model, Vec<ParseError>> {
    let file: Option<Arc<str>> = file.map(Arc::from);
    let (tokens, mut errors) = tokenize(src, file);
    let mut p = Parser { toks: &tokens, pos: 0, depth: 0, braces: 0, errors: Vec::new() };
    let model = p.model();
    errors.append(&mut p.errors);
    match model {
        Some(m) if errors.is_empty() => Ok(m),
        _ => {
            errors.sort_by_key(|e| e.span.start);
            Err(errors)
        }
    }
}

struct Parser<'t> {
    toks: &'t [Token],
    pos: usize,
    /// Nesting of recursive constructs, bounded by `MAX_DEPTH`.
    depth: usize,
    /// Open braces consumed so far.
    braces: usize,
    errors: Vec<ParseError>,
}

impl<'t> Parser<'t> {
    // -- token plumbing ----------------------------------------------------

    fn tok(&self) -> &'t Token {
        &self.toks[self.pos.min(self.toks.len() - 1)]
    }

    fn peek(&self) -> &'t TokenKind {
        &self.tok().kind
    }

    fn peek_at(&self, n: usize) -> &'t TokenKind {
        &self.toks[(self.pos + n).min(self.toks.len() - 1)].kind
    }

    fn advance(&mut self) -> &'t Token {
        let t = self.tok();
        match t.kind {
            TokenKind::LBrace => self.braces += 1,
            TokenKind::RBrace => self.braces = self.braces.saturating_sub(1),
            _ => {}
        }
        if t.kind != TokenKind::Eof {
            self.pos += 1;
        }
        t
    }

    fn at(&self, kind: &TokenKind) -> bool {
        self.peek() == kind
    }

    fn at_kw(&self, kw: &str) -> bool {
        matches!(self.peek(), TokenKind::Ident(s) if s == kw)
    }

    fn eat(&mut self, kind: &TokenKind) -> bool {
        if self.at(kind) {
            self.advance();
            true
        } else {
            false
        }
    }

    fn eat_kw(&mut self, kw: &str) -> bool {
        if self.at_kw(kw) {
            self.advance();
            true
        } else {
            false
        }
    }

    fn err<T>(&self, expected: &[&str]) -> PResult<T> {
        Err(self.error_here(expected))
    }

    fn error_here(&self, expected: &[&str]) -> ParseError {
        let t = self.tok();
        let found = t.kind.to_string();
        ParseError {
            span: t.span.clone(),
            expected: expected.iter().map(|s| s.to_string()).collect(),
            message: format!("expected {}, found {found}", expected.join(" or ")),
            found,
        }
    }

    fn custom_error(&self, span: Span, message: String) -> ParseError {
        ParseError { span, expected: Vec::new(), found: self.tok().kind.to_string(), message }
    }

    fn expect(&mut self, kind: TokenKind) -> PResult<Span> {
        if self.at(&kind) {
            Ok(self.advance().span.clone())
        } else {
            self.err(&[&kind.to_string()])
        }
    }

    fn expect_kw(&mut self, kw: &str) -> PResult<Span> {
        if self.at_kw(kw) {
            Ok(self.advance().span.clone())
        } else {
            self.err(&[&format!("'{kw}'")])
        }
    }

    fn one_of(&mut self, kws: &[&str]) -> PResult<&'t str> {
        if let TokenKind::Ident(s) = self.peek() {
            if kws.contains(&s.as_str()) {
                self.advance();
                return Ok(s);
            }
        }
        let quoted: Vec<String> = kws.iter().map(|k| format!("'{k}'")).collect();
        let refs: Vec<&str> = quoted.iter().map(String::as_str).collect();
        self.err(&refs)
    }

    fn ident(&mut self) -> PResult<String> {
        match self.peek() {
            TokenKind::Ident(s) => {
                self.advance();
                Ok(s.clone())
            }
            _ => self.err(&["identifier"]),
        }
    }

    fn string(&mut self) -> PResult<String> {
        match self.peek() {
            TokenKind::Str(s) => {
                self.advance();
                Ok(s.clone())
            }
            _ => self.err(&["string"]),
        }
    }

    fn int(&mut self) -> PResult<i64> {
        let start = self.tok().span.clone();
        let neg = self.eat(&TokenKind::Minus);
        match self.peek() {
            TokenKind::Int(v) => {
                let v = *v;
                self.advance();
                fold_int(v, neg).ok_or_else(|| self.custom_error(self.span_from(&start), "integer out of range".into()))
            }
            _ => self.err(&["integer"]),
        }
    }

    fn number(&mut self) -> PResult<f64> {
        let neg = self.eat(&TokenKind::Minus);
        let v = match self.peek() {
            TokenKind::Int(v) => *v as f64,
            TokenKind::Real(v) => *v,
            _ => return self.err(&["number"]),
        };
        self.advance();
        Ok(if neg { -v } else { v })
    }

    fn ident_list(&mut self) -> PResult<Vec<String>> {
        self.expect(TokenKind::LBracket)?;
        let mut out = Vec::new();
        if !self.at(&TokenKind::RBracket) {
            loop {
                out.push(self.ident()?);
                if !self.eat(&TokenKind::Comma) {
                    break;
                }
            }
        }
        self.expect(TokenKind::RBracket)?;
        Ok(out)
    }

    fn prev_end(&self) -> &'t Span {
        &self.toks[self.pos.saturating_sub(1)].span
    }

    /// Span from `start` to the end of the last consumed token.
    fn span_from(&self, start: &Span) -> Span {
        let end = self.prev_end();
        if end.end < start.start {
            return start.clone();
        }
        Span {
            file: start.file.clone(),
            start: start.start,
            end: end.end,
            line: start.line,
            column: start.column,
            end_line: end.end_line,
            end_column: end.end_column,
        }
    }

    fn nest(&mut self) -> PResult<()> {
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            let span = self.tok().span.clone();
            return Err(self.custom_error(span, "nesting too deep".into()));
        }
        Ok(())
    }

    fn unnest(&mut self) {
        self.depth -= 1;
    }

    /// Skips to the next declaration keyword or closing brace of the model
    /// body.
    fn recover(&mut self) {
        self.depth = 0;
        loop {
            match self.peek() {
                TokenKind::Eof => return,
                TokenKind::RBrace if self.braces <= 1 => return,
                TokenKind::Ident(s) if self.braces == 1 && ITEM_KEYWORDS.contains(&s.as_str()) => return,
                _ => {
                    self.advance();
                }
            }
        }
    }

    // -- model -----------------------------------------------------------------

    fn model(&mut self) -> Option<Model> {
        let start = self.tok().span.clone();
        let head = (|| -> PResult<String> {
            self.expect_kw("model")?;
            let name = self.ident()?;
            self.expect(TokenKind::LBrace)?;
            Ok(name)
        })();
        let name = match head {
            Ok(n) => n,
            Err(e) => {
                self.errors.push(e);
                return None;
            }
        };
        let environment = match self.environment() {
            Ok(env) => Some(env),
            Err(e) => {
                self.errors.push(e);
                self.recover();
                None
            }
        };
        let mut items = Vec::new();
        let mut names = Names::default();
        loop {
            match self.peek() {
                TokenKind::Eof => {
                    self.errors.push(self.error_here(&["'}'"]));
                    break;
                }
                TokenKind::RBrace => {
                    self.advance();
                    break;
                }
                _ => {}
            }
            let before = self.pos;
            match self.item() {
                Ok(item) => {
                    if let Some(e) = names.check(&item) {
                        self.errors.push(e);
                    }
                    items.push(item);
                }
                Err(e) => {
                    self.errors.push(e);
                    if self.pos == before {
                        self.advance();
                    }
                    self.recover();
                }
            }
        }
        if !self.at(&TokenKind::Eof) {
            self.errors.push(self.error_here(&["end of input"]));
        }
        let environment = environment?;
        Some(Model { name, environment, items, span: self.span_from(&start) })
    }

    fn environment(&mut self) -> PResult<EnvironmentSpec> {
        let start = self.expect_kw("environment")?;
        let topology = match self.one_of(&["grid", "cartesian", "graph"])? {
            "grid" => {
                self.expect_kw("width")?;
                let width = self.int()?;
                self.expect_kw("height")?;
                let height = self.int()?;
                let wrap = self.eat_kw("wrap");
                Topology::Grid { width, height, wrap }
            }
            "cartesian" => {
                let (x_min, x_max) = self.range()?;
                let (y_min, y_max) = self.range()?;
                Topology::Cartesian { x_min, x_max, y_min, y_max }
            }
            _ => {
                self.expect_kw("from")?;
                let source = match self.one_of(&["osm", "edges"])? {
                    "osm" => CreationalStrategy::OsmGraph { path: self.string()? },
                    _ => self.inline_graph()?,
                };
                Topology::Graph { source }
            }
        };
        Ok(EnvironmentSpec { topology, span: self.span_from(&start) })
    }

    fn range(&mut self) -> PResult<(f64, f64)> {
        self.expect(TokenKind::LBracket)?;
        let a = self.number()?;
        self.expect(TokenKind::Comma)?;
        let b = self.number()?;
        self.expect(TokenKind::RBracket)?;
        Ok((a, b))
    }

    fn inline_graph(&mut self) -> PResult<CreationalStrategy> {
        self.expect(TokenKind::LBrace)?;
        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        while !self.eat(&TokenKind::RBrace) {
            match self.one_of(&["node", "edge"])? {
                "node" => {
                    let name = self.ident()?;
                    self.expect_kw("at")?;
                    let x = self.number()?;
                    let y = self.number()?;
                    nodes.push(InlineNode { name, x, y });
                }
                _ => {
                    let a = self.ident()?;
                    let b = self.ident()?;
                    let length = if matches!(self.peek(), TokenKind::Int(_) | TokenKind::Real(_) | TokenKind::Minus) {
                        Some(self.number()?)
                    } else {
                        None
                    };
                    edges.push(InlineEdge { a, b, length });
                }
            }
        }
        Ok(CreationalStrategy::InlineEdgeList { nodes, edges })
    }

    // -- items -----------------------------------------------------------------

    fn item(&mut self) -> PResult<Item> {
        let start = self.tok().span.clone();
        let kw = self.one_of(&ITEM_KEYWORDS)?;
        Ok(match kw {
            "agent" | "entity" => self.agent_or_entity(kw == "agent", start)?,
            "disease" => Item::Disease(self.disease(start)?),
            "machine" => Item::Machine(self.machine(start)?),
            "plan" => Item::Plan(self.plan(start)?),
            "introduce" => Item::Introduce(self.introduce(start)?),
            "output" => Item::Output(self.output(start)?),
            _ => {
                let name = self.ident()?;
                let members = self.ident_list()?;
                Item::Concern(Concern { name, members, span: self.span_from(&start) })
            }
        })
    }

    fn agent_or_entity(&mut self, is_agent: bool, start: Span) -> PResult<Item> {
        let name = self.ident()?;
        self.expect(TokenKind::LBrace)?;
        self.expect_kw("create")?;
        let creation = self.creation()?;
        let mut attributes = Vec::new();
        let mut capabilities = Vec::new();
        loop {
            if self.eat(&TokenKind::RBrace) {
                break;
            }
            let expected: &[&str] = if is_agent { &["capability", "attr", "}"] } else { &["attr", "}"] };
            let kw = self.one_of(&expected[..expected.len() - 1]).map_err(|_| {
                let quoted: Vec<String> = expected.iter().map(|k| format!("'{k}'")).collect();
                let refs: Vec<&str> = quoted.iter().map(String::as_str).collect();
                self.error_here(&refs)
            })?;
            let item_start = self.prev_end().clone();
            if kw == "attr" {
                let name = self.ident()?;
                let kind_name = self.one_of(&["integer", "real", "boolean", "identifier", "text"])?;
                let kind = AttrKind::from_keyword(kind_name).expect("keyword list matches AttrKind");
                self.expect(TokenKind::Assign)?;
                let default = self.expr()?;
                attributes.push(AttributeSpec { name, kind, default, span: self.span_from(&item_start) });
            } else {
                let kind = self.capability()?;
                capabilities.push(CapabilityRef { kind, span: self.span_from(&item_start) });
            }
        }
        let span = self.span_from(&start);
        Ok(if is_agent {
            Item::Agent(AgentTypeSpec { name, attributes, creation, capabilities, span })
        } else {
            Item::Entity(EntityTypeSpec { name, attributes, creation, span })
        })
    }

    fn creation(&mut self) -> PResult<CreationalStrategy> {
        if self.eat_kw("gis") {
            return Ok(CreationalStrategy::GisPoints { path: self.string()? });
        }
        if self.eat_kw("intersections") {
            return Ok(CreationalStrategy::Intersections);
        }
        if !matches!(self.peek(), TokenKind::Int(_) | TokenKind::Minus) {
            return self.err(&["integer", "'gis'", "'intersections'"]);
        }
        let count = self.int()?;
        let placement = match self.one_of(&["random", "at"])? {
            "random" => Placement::Random,
            _ => {
                self.expect(TokenKind::LBracket)?;
                let mut points = Vec::new();
                if !self.at(&TokenKind::RBracket) {
                    loop {
                        self.expect(TokenKind::LParen)?;
                        let x = self.number()?;
                        self.expect(TokenKind::Comma)?;
                        let y = self.number()?;
                        self.expect(TokenKind::RParen)?;
                        points.push((x, y));
                        if !self.eat(&TokenKind::Comma) {
                            break;
                        }
                    }
                }
                self.expect(TokenKind::RBracket)?;
                Placement::At(points)
            }
        };
        Ok(CreationalStrategy::FixedCount { count, placement })
    }

    fn capability(&mut self) -> PResult<Capability> {
        let kw = self.one_of(&[
            "mobility",
            "disease",
            "state_machine",
            "flow_control",
            "qlearning",
            "external",
            "adaptation",
        ])?;
        Ok(match kw {
            "mobility" => {
                self.expect_kw("random_walk")?;
                self.expect_kw("step")?;
                Capability::Mobility { step: self.number()? }
            }
            "disease" => Capability::Disease { disease: self.ident()? },
            "state_machine" => Capability::StateMachine { machine: self.ident()? },
            "flow_control" => Capability::FlowControl(self.flow_control()?),
            "qlearning" => Capability::QLearning(self.qlearning()?),
            "external" => {
                let library = self.string()?;
                let entry = self.ident()?;
                Capability::External { library, entry }
            }
            _ => Capability::Adaptation { criterion: self.ident()? },
        })
    }

    fn flow_control(&mut self) -> PResult<FlowControlSpec> {
        self.expect(TokenKind::LBrace)?;
        let mut streams = Vec::new();
        let mut compatible = Vec::new();
        while !self.eat(&TokenKind::RBrace) {
            let start = self.tok().span.clone();
            match self.one_of(&["stream", "compatible"])? {
                "stream" => {
                    let id = self.ident()?;
                    let capacity = if self.eat_kw("capacity") { Some(self.int()?) } else { None };
                    streams.push(StreamSpec { id, capacity, span: self.span_from(&start) });
                }
                _ => {
                    let a = self.ident()?;
                    let b = self.ident()?;
                    compatible.push((a, b));
                }
            }
        }
        Ok(FlowControlSpec { streams, compatible })
    }

    fn qlearning(&mut self) -> PResult<QLearningSpec> {
        self.expect(TokenKind::LBrace)?;
        self.expect_kw("alpha")?;
        let alpha = self.number()?;
        self.expect_kw("gamma")?;
        let gamma = self.number()?;
        self.expect_kw("epsilon")?;
        let epsilon = self.number()?;
        self.expect_kw("plans")?;
        let plans = self.ident_list()?;
        self.expect_kw("bins")?;
        self.expect(TokenKind::LBracket)?;
        let mut bins = Vec::new();
        if !self.at(&TokenKind::RBracket) {
            loop {
                bins.push(self.int()?);
                if !self.eat(&TokenKind::Comma) {
                    break;
                }
            }
        }
        self.expect(TokenKind::RBracket)?;
        let reward = if self.eat_kw("reward") { Some(self.expr()?) } else { None };
        self.expect(TokenKind::RBrace)?;
        Ok(QLearningSpec { alpha, gamma, epsilon, plans, bins, reward })
    }

    fn machine(&mut self, start: Span) -> PResult<StateMachineSpec> {
        let name = self.ident()?;
        self.expect(TokenKind::LBrace)?;
        self.expect_kw("states")?;
        let states = self.ident_list()?;
        self.expect_kw("initial")?;
        let initial = self.ident()?;
        let mut transitions = Vec::new();
        while !self.eat(&TokenKind::RBrace) {
            let t_start = self.expect_kw("transition").map_err(|_| self.error_here(&["'transition'", "'}'"]))?;
            let from = self.ident()?;
            self.expect(TokenKind::Arrow)?;
            let to = self.ident()?;
            let trigger = self.trigger()?;
            let guard = if self.eat_kw("when") { Some(self.expr()?) } else { None };
            let abortion = if self.eat_kw("abort") {
                let probability = self.source()?;
                self.expect_kw("to")?;
                Some(Abortion { probability, abort_to: self.ident()? })
            } else {
                None
            };
            transitions.push(Transition { from, to, trigger, guard, abortion, span: self.span_from(&t_start) });
        }
        Ok(StateMachineSpec { name, states, initial, transitions, span: self.span_from(&start) })
    }

    fn trigger(&mut self) -> PResult<Trigger> {
        let kw = self.one_of(&["probabilistic", "deterministic", "conditional", "custom"])?;
        Ok(match kw {
            "probabilistic" => {
                self.expect_kw("rate")?;
                Trigger::Probabilistic { rate: self.source()? }
            }
            "deterministic" => {
                self.expect_kw("ticks")?;
                Trigger::Deterministic { ticks: self.source()? }
            }
            "conditional" => {
                self.expect_kw("until")?;
                Trigger::Conditional { condition: self.expr()? }
            }
            _ => {
                let combinator = match self.one_of(&["all_of", "any_of"])? {
                    "all_of" => Combinator::AllOf,
                    _ => Combinator::AnyOf,
                };
                self.nest()?;
                self.expect(TokenKind::LParen)?;
                let mut triggers = Vec::new();
                loop {
                    triggers.push(self.trigger()?);
                    if !self.eat(&TokenKind::Comma) {
                        break;
                    }
                }
                self.expect(TokenKind::RParen)?;
                self.unnest();
                Trigger::Custom { combinator, triggers }
            }
        })
    }

    fn source(&mut self) -> PResult<SourceValue> {
        Ok(SourceValue::from_expr(self.expr()?))
    }

    fn plan(&mut self, start: Span) -> PResult<PlanSpec> {
        let name = self.ident()?;
        self.expect(TokenKind::LBrace)?;
        let mut phases = Vec::new();
        while !self.eat(&TokenKind::RBrace) {
            let p_start = self.expect_kw("phase").map_err(|_| self.error_here(&["'phase'", "'}'"]))?;
            let name = self.ident()?;
            self.expect_kw("green")?;
            let green = self.ident_list()?;
            self.expect_kw("duration")?;
            let duration = self.int()?;
            phases.push(PhaseSpec { name, green, duration, span: self.span_from(&p_start) });
        }
        Ok(PlanSpec { name, phases, span: self.span_from(&start) })
    }

    fn disease(&mut self, start: Span) -> PResult<DiseaseModelSpec> {
        let name = self.ident()?;
        self.expect_kw("model")?;
        let keyword = self.one_of(&["SIR", "SEIR", "PSIR", "custom"])?;
        let kind = CompartmentKind::from_keyword(keyword).expect("keyword list matches CompartmentKind");
        let mut d = DiseaseModelSpec::new(name, kind);
        self.expect(TokenKind::LBrace)?;
        while !self.eat(&TokenKind::RBrace) {
            let c_start = self.tok().span.clone();
            let kw = self
                .one_of(&["compartments", "infection", "transmission", "duration", "mortality", "immunity"])
                .map_err(|_| {
                    self.error_here(&[
                        "'compartments'",
                        "'infection'",
                        "'transmission'",
                        "'duration'",
                        "'mortality'",
                        "'immunity'",
                        "'}'",
                    ])
                })?;
            match kw {
                "compartments" => {
                    if !d.compartments.is_empty() {
                        return Err(self.custom_error(c_start, "compartments declared twice".into()));
                    }
                    d.compartments = self.ident_list()?;
                }
                "infection" => {
                    let from = self.ident()?;
                    self.expect(TokenKind::Arrow)?;
                    let to = self.ident()?;
                    if d.infection.is_some() {
                        return Err(self.custom_error(c_start, "infection edge declared twice".into()));
                    }
                    d.infection = Some(CompartmentEdge { from, to, span: self.span_from(&c_start) });
                }
                "transmission" => {
                    let t = self.transmission(c_start.clone())?;
                    if d.transmission.is_some() {
                        return Err(self.custom_error(c_start, "transmission declared twice".into()));
                    }
                    d.transmission = Some(t);
                }
                "duration" => {
                    let compartment = self.ident()?;
                    let target = if self.eat(&TokenKind::Arrow) { Some(self.ident()?) } else { None };
                    let trigger = self.trigger()?;
                    d.durations.push(DurationSpec { compartment, target, trigger, span: self.span_from(&c_start) });
                }
                "mortality" => {
                    let compartment = self.ident()?;
                    self.expect_kw("rate")?;
                    let rate = self.source()?;
                    let evaluation = match self.one_of(&[
                        "every_timeunit",
                        "specific_timeunit",
                        "when_condition",
                        "leaving_compartment",
                    ])? {
                        "every_timeunit" => DeathRateEvaluation::EveryTimeunit,
                        "specific_timeunit" => DeathRateEvaluation::SpecificTimeunit(self.int()?),
                        "when_condition" => DeathRateEvaluation::WhenCondition(self.expr()?),
                        _ => DeathRateEvaluation::LeavingCompartment,
                    };
                    d.mortality.push(MortalitySpec { compartment, rate, evaluation, span: self.span_from(&c_start) });
                }
                _ => {
                    let which = self.one_of(&["recovered", "passive"])?;
                    let trigger = self.trigger()?;
                    let slot = if which == "recovered" { &mut d.recovered_immunity } else { &mut d.passive_immunity };
                    if slot.is_some() {
                        return Err(self.custom_error(c_start, format!("{which} immunity declared twice")));
                    }
                    *slot = Some(trigger);
                }
            }
        }
        d.span = self.span_from(&start);
        Ok(d)
    }

    fn transmission(&mut self, start: Span) -> PResult<TransmissionSpec> {
        let interaction = match self.one_of(&["proximity", "contact"])? {
            "proximity" => Interaction::Proximity { distance: self.number()? },
            _ => Interaction::Contact,
        };
        self.expect_kw("probability")?;
        let probability = self.source()?;
        let infectious = if self.eat_kw("infectious") { self.ident_list()? } else { Vec::new() };
        let condition = if self.eat_kw("condition") { Some(self.expr()?) } else { None };
        let entity_sources = if self.eat_kw("from") { self.ident_list()? } else { Vec::new() };
        Ok(TransmissionSpec { interaction, probability, infectious, condition, entity_sources, span: self.span_from(&start) })
    }

    fn introduce(&mut self, start: Span) -> PResult<DiseaseIntroductionSpec> {
        let disease = self.ident()?;
        let quantity = match self.one_of(&["deterministic", "probabilistic"])? {
            "deterministic" => Quantity::Deterministic(self.int()?),
            _ => Quantity::Probabilistic(self.number()?),
        };
        let selection = match self.one_of(&["arbitrary", "eligible"])? {
            "arbitrary" => Selection::Arbitrary,
            _ => Selection::Eligible(self.expr()?),
        };
        let periodicity = match self.one_of(&["aperiodic", "periodic"])? {
            "aperiodic" => Periodicity::Aperiodic,
            _ => Periodicity::Periodic(self.int()?),
        };
        Ok(DiseaseIntroductionSpec { disease, quantity, selection, periodicity, span: self.span_from(&start) })
    }

    fn output(&mut self, start: Span) -> PResult<OutputDatasetSpec> {
        let name = self.ident()?;
        self.expect_kw("every")?;
        let interval = self.int()?;
        self.expect_kw("to")?;
        let path = self.string()?;
        self.expect(TokenKind::LBrace)?;
        let mut series = Vec::new();
        while !self.eat(&TokenKind::RBrace) {
            let s_start = self.expect_kw("series").map_err(|_| self.error_here(&["'series'", "'}'"]))?;
            let label = self.ident()?;
            self.expect(TokenKind::Assign)?;
            let expr = self.expr()?;
            series.push(SeriesSpec { label, expr, span: self.span_from(&s_start) });
        }
        Ok(OutputDatasetSpec { name, interval, path, series, span: self.span_from(&start) })
    }

    // -- expressions -----------------------------------------------------------

    fn expr(&mut self) -> PResult<Expr> {
        self.nest()?;
        let e = self.or_expr();
        self.unnest();
        e
    }

    fn or_expr(&mut self) -> PResult<Expr> {
        let mut lhs = self.and_expr()?;
        while self.eat_kw("or") {
            let rhs = self.and_expr()?;
            lhs = Expr::binary(BinaryOp::Or, lhs, rhs);
        }
        Ok(lhs)
    }

    fn and_expr(&mut self) -> PResult<Expr> {
        let mut lhs = self.not_expr()?;
        while self.eat_kw("and") {
            let rhs = self.not_expr()?;
            lhs = Expr::binary(BinaryOp::And, lhs, rhs);
        }
        Ok(lhs)
    }

    fn not_expr(&mut self) -> PResult<Expr> {
        if self.eat_kw("not") {
            self.nest()?;
            let inner = self.not_expr();
            self.unnest();
            return Ok(Expr::not(inner?));
        }
        self.cmp_expr()
    }

    fn cmp_op(&self) -> Option<BinaryOp> {
        Some(match self.peek() {
            TokenKind::Lt => BinaryOp::Lt,
            TokenKind::Le => BinaryOp::Le,
            TokenKind::Gt => BinaryOp::Gt,
            TokenKind::Ge => BinaryOp::Ge,
            TokenKind::EqEq => BinaryOp::Eq,
            TokenKind::NotEq => BinaryOp::Ne,
            _ => return None,
        })
    }

    fn cmp_expr(&mut self) -> PResult<Expr> {
        let lhs = self.add_expr()?;
        let Some(op) = self.cmp_op() else { return Ok(lhs) };
        self.advance();
        let rhs = self.add_expr()?;
        if self.cmp_op().is_some() {
            let span = self.tok().span.clone();
            return Err(self.custom_error(span, "comparisons cannot be chained; use parentheses".into()));
        }
        Ok(Expr::binary(op, lhs, rhs))
    }

    fn add_expr(&mut self) -> PResult<Expr> {
        let mut lhs = self.mul_expr()?;
        loop {
            let op = match self.peek() {
                TokenKind::Plus => BinaryOp::Add,
                TokenKind::Minus => BinaryOp::Sub,
                _ => return Ok(lhs),
            };
            self.advance();
            let rhs = self.mul_expr()?;
            lhs = Expr::binary(op, lhs, rhs);
        }
    }

    fn mul_expr(&mut self) -> PResult<Expr> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                TokenKind::Star => BinaryOp::Mul,
                TokenKind::Slash => BinaryOp::Div,
                _ => return Ok(lhs),
            };
            self.advance();
            let rhs = self.unary()?;
            lhs = Expr::binary(op, lhs, rhs);
        }
    }

    fn unary(&mut self) -> PResult<Expr> {
        if !self.at(&TokenKind::Minus) {
            return self.primary();
        }
        let start = self.advance().span.clone();
        match self.peek() {
            TokenKind::Int(v) => {
                let v = *v;
                self.advance();
                let folded = fold_int(v, true);
                folded.map(Expr::Int).ok_or_else(|| self.custom_error(self.span_from(&start), "integer out of range".into()))
            }
            TokenKind::Real(v) => {
                let v = *v;
                self.advance();
                Ok(Expr::Real(-v))
            }
            _ => {
                self.nest()?;
                let inner = self.unary();
                self.unnest();
                Ok(Expr::neg(inner?))
            }
        }
    }

    fn call_open(&mut self) -> PResult<()> {
        self.expect(TokenKind::LParen).map(|_| ())
    }

    fn primary(&mut self) -> PResult<Expr> {
        let tok = self.tok();
        match &tok.kind {
            TokenKind::Int(v) => {
                self.advance();
                fold_int(*v, false).map(Expr::Int).ok_or_else(|| self.custom_error(tok.span.clone(), "integer out of range".into()))
            }
            TokenKind::Real(v) => {
                self.advance();
                Ok(Expr::Real(*v))
            }
            TokenKind::Str(s) => {
                self.advance();
                Ok(Expr::Text(s.clone()))
            }
            TokenKind::Symbol(s) => {
                self.advance();
                Ok(Expr::Symbol(s.clone()))
            }
            TokenKind::LParen => {
                self.advance();
                let e = self.expr()?;
                self.expect(TokenKind::RParen)?;
                Ok(e)
            }
            TokenKind::Ident(word) => {
                let word = word.as_str();
                let is_call = *self.peek_at(1) == TokenKind::LParen;
                match word {
                    "true" => {
                        self.advance();
                        Ok(Expr::Bool(true))
                    }
                    "false" => {
                        self.advance();
                        Ok(Expr::Bool(false))
                    }
                    "tick" => {
                        self.advance();
                        Ok(Expr::Tick)
                    }
                    "count" | "sum" if is_call => {
                        self.advance();
                        self.call_open()?;
                        let population = self.ident()?;
                        let value = if word == "sum" {
                            self.expect(TokenKind::Comma)?;
                            Some(self.expr()?)
                        } else {
                            None
                        };
                        let filter = if self.eat_kw("where") { Some(Box::new(self.expr()?)) } else { None };
                        self.expect(TokenKind::RParen)?;
                        Ok(match value {
                            Some(v) => Expr::Sum { population, value: Box::new(v), filter },
                            None => Expr::Count { population, filter },
                        })
                    }
                    "in_state" if is_call => {
                        self.advance();
                        self.call_open()?;
                        let machine = self.ident()?;
                        self.expect(TokenKind::Comma)?;
                        let state = self.ident()?;
                        self.expect(TokenKind::RParen)?;
                        Ok(Expr::InState { machine, state })
                    }
                    "deaths" | "ever_infected" if is_call => {
                        self.advance();
                        self.call_open()?;
                        let d = self.ident()?;
                        self.expect(TokenKind::RParen)?;
                        Ok(if word == "deaths" { Expr::Deaths(d) } else { Expr::EverInfected(d) })
                    }
                    "stopped" | "queued" | "arrivals" if is_call => {
                        self.advance();
                        self.call_open()?;
                        self.expect(TokenKind::RParen)?;
                        Ok(match word {
                            "stopped" => Expr::Stopped,
                            "queued" => Expr::Queued,
                            _ => Expr::Arrivals,
                        })
                    }
                    _ if crate::expr::RESERVED.contains(&word) && word != "self" => self.err(&["expression"]),
                    _ => {
                        self.advance();
                        if self.eat(&TokenKind::Dot) {
                            let attr = self.ident()?;
                            Ok(Expr::Ref { owner: word.to_string(), attr })
                        } else if word == "self" {
                            self.err(&["'.'"])
                        } else {
                            Ok(Expr::Attr(word.to_string()))
                        }
                    }
                }
            }
            _ => self.err(&["expression"]),
        }
    }
}

fn fold_int(v: u64, negative: bool) -> Option<i64> {
    if negative {
        if v == 1u64 << 63 {
            Some(i64::MIN)
        } else {
            i64::try_from(v).ok().map(|v| -v)
        }
    } else {
        i64::try_from(v).ok()
    }
}

/// Declared names per namespace, for duplicate detection.
#[derive(Default)]
struct Names {
    seen: HashSet<(&'static str, String)>,
}

impl Names {
    fn check(&mut self, item: &Item) -> Option<ParseError> {
        let (ns, name, span) = match item {
            Item::Entity(e) => ("type", &e.name, &e.span),
            Item::Agent(a) => ("type", &a.name, &a.span),
            Item::Machine(m) => ("machine", &m.name, &m.span),
            Item::Plan(p) => ("machine", &p.name, &p.span),
            Item::Disease(d) => ("disease", &d.name, &d.span),
            Item::Output(o) => ("output", &o.name, &o.span),
            Item::Concern(c) => ("concern", &c.name, &c.span),
            Item::Introduce(_) => return None,
        };
        if self.seen.insert((ns, name.clone())) {
            return None;
        }
        Some(ParseError {
            span: span.clone(),
            expected: Vec::new(),
            found: name.clone(),
            message: format!("duplicate declaration of `{name}`"),
        })
    }
}
