mod common;

use abms_core::engine::{self, build_world, tick, EventKind, Point, RunConfig, Space};
use abms_core::expr::Value;
use abms_core::metamodel::Model;

use common::{fixtures_dir, load_fixture, parse};

fn grid_model(body: &str) -> Model {
    parse(&format!("model t {{\n  environment grid width 10 height 10 wrap\n{body}\n}}\n"))
}

fn infected(world: &engine::World) -> usize {
    world.compartment_counts("flu").iter().find(|(s, _)| s == "I").map_or(0, |(_, n)| *n)
}

#[test]
fn random_placement_stays_in_bounds() {
    let model = parse(
        "model t {\n  environment grid width 7 height 3\n  agent a { create 30 random }\n}\n",
    );
    let world = build_world(&model, &RunConfig::new(5, 0)).unwrap();
    assert_eq!(world.agents.len(), 30);
    for a in &world.agents {
        assert!(world.space.contains(a.pos), "{:?}", a.pos);
        assert_eq!(a.pos.x.fract(), 0.0);
        assert!((0.0..7.0).contains(&a.pos.x) && (0.0..3.0).contains(&a.pos.y));
    }
}

#[test]
fn gis_points_create_one_agent_each() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("# x,y,key=value\n");
    for i in 0..12 {
        text.push_str(&format!("{}.5,{}.25,age={}\n", i % 6, i / 6, 20 + i));
    }
    std::fs::write(dir.path().join("homes.points"), text).unwrap();
    let model = grid_model("  agent a {\n    create gis \"homes.points\"\n    attr age integer = 0\n  }");
    let world = build_world(&model, &RunConfig::new(1, 0).with_base_dir(dir.path())).unwrap();
    assert_eq!(world.agents.len(), 12);
    for (i, a) in world.agents.iter().enumerate() {
        assert_eq!(a.pos, Point::new((i % 6) as f64, (i / 6) as f64));
        assert_eq!(a.attrs[0], Value::Int(20 + i as i64));
    }
}

#[test]
fn missing_gis_file_is_a_build_error() {
    let model = grid_model("  agent a { create gis \"nowhere.points\" }");
    let dir = tempfile::tempdir().unwrap();
    let Err(err) = build_world(&model, &RunConfig::new(1, 0).with_base_dir(dir.path())) else {
        panic!("build should fail");
    };
    assert!(err.to_string().contains("nowhere.points"), "{err}");
}

#[test]
fn crossing_ways_yield_one_intersection_controller() {
    let dir = tempfile::tempdir().unwrap();
    let osm = r#"<?xml version="1.0"?>
<osm version="0.6">
  <node id="1" lat="0.0" lon="0.0"/>
  <node id="2" lat="0.0" lon="0.002"/>
  <node id="3" lat="0.0" lon="0.001"/>
  <node id="4" lat="0.001" lon="0.001"/>
  <way id="10"><nd ref="1"/><nd ref="3"/><nd ref="2"/><tag k="highway" v="residential"/></way>
  <way id="11"><nd ref="3"/><nd ref="4"/><tag k="highway" v="residential"/></way>
</osm>
"#;
    std::fs::write(dir.path().join("x.osm"), osm).unwrap();
    let model = parse(
        "model t {
  environment graph from osm \"x.osm\"
  agent light {
    create intersections
    capability flow_control { stream north stream south stream east stream west }
    capability state_machine cycle
  }
  plan cycle {
    phase ns green [north, south] duration 3
    phase ew green [east, west] duration 3
  }
}
",
    );
    let world = build_world(&model, &RunConfig::new(1, 0).with_base_dir(dir.path())).unwrap();
    let Space::Graph(g) = &world.space else { panic!("graph space expected") };
    assert_eq!(g.nodes.len(), 4);
    assert_eq!(g.edges.len(), 3);
    assert_eq!(world.agents.len(), 1);
    let c = world.agents[0].controller.as_ref().unwrap();
    assert_eq!(g.degree(c.node.unwrap()), 3);
}

#[test]
fn wrapped_grid_neighbors_cross_the_edge() {
    let model = grid_model("  agent a { create 3 at [(0, 0), (9, 9), (5, 5)] }");
    let world = build_world(&model, &RunConfig::new(1, 0)).unwrap();
    let ids: Vec<u64> = world.agents.iter().map(|a| a.id).collect();
    let near = world.neighbors_within(Point::new(0.0, 0.0), 1.5, Some(ids[0]));
    assert_eq!(near, vec![ids[1]]);
    assert!((world.space.distance(Point::new(0.0, 0.0), Point::new(9.0, 9.0)) - 2f64.sqrt()).abs() < 1e-12);
}

#[test]
fn radius_zero_finds_only_colocated_agents() {
    let model = grid_model("  agent a { create 3 at [(2, 2), (2, 2), (2, 3)] }");
    let world = build_world(&model, &RunConfig::new(1, 0)).unwrap();
    let ids: Vec<u64> = world.agents.iter().map(|a| a.id).collect();
    assert_eq!(world.neighbors_within(Point::new(2.0, 2.0), 0.0, None), vec![ids[0], ids[1]]);
}

#[test]
fn one_tick_run_samples_twice() {
    let model = grid_model(
        "  agent a { create 4 random }\n  output o every 1 to \"o.csv\" {\n    series n = count(a)\n  }",
    );
    let result = engine::run(&model, &RunConfig::new(1, 1)).unwrap();
    assert_eq!(result.tables[0].rows.len(), 2);
    assert_eq!(result.tables[0].to_csv(), "tick,n\n0,4\n1,4\n");
    assert_eq!(result.digests.len(), 2);
}

const SIR_HEAD: &str = "  disease flu model SIR {\n    transmission contact probability";

#[test]
fn zero_transmission_never_spreads() {
    let model = grid_model(&format!(
        "  agent a {{\n    create 100 random\n    capability mobility random_walk step 1\n    capability disease flu\n  }}
{SIR_HEAD} 0\n    duration I probabilistic rate 0.01\n  }}
  introduce flu deterministic 5 arbitrary aperiodic
  output o every 1 to \"o.csv\" {{ series ever = ever_infected(flu) }}"
    ));
    let result = engine::run(&model, &RunConfig::new(3, 200)).unwrap();
    assert!(result.tables[0].rows.iter().all(|r| r[1] == Value::Int(5)));
}

#[test]
fn distant_stationary_agents_do_not_infect() {
    let model = grid_model(&format!(
        "  agent a {{\n    create 2 at [(0, 0), (5, 5)]\n    capability disease flu\n  }}
{SIR_HEAD} 1\n    duration I deterministic ticks 1000\n  }}
  introduce flu deterministic 1 arbitrary aperiodic"
    ));
    let mut world = build_world(&model, &RunConfig::new(9, 0)).unwrap();
    for _ in 0..50 {
        tick(&mut world).unwrap();
        assert_eq!(infected(&world), 1);
    }
}

#[test]
fn colocated_contact_with_certain_transmission_infects_next_tick() {
    let model = grid_model(&format!(
        "  agent a {{\n    create 2 at [(4, 4), (4, 4)]\n    capability disease flu\n  }}
{SIR_HEAD} 1\n    duration I deterministic ticks 1000\n  }}
  introduce flu deterministic 1 arbitrary aperiodic"
    ));
    let mut world = build_world(&model, &RunConfig::new(9, 0)).unwrap();
    assert_eq!(infected(&world), 1);
    tick(&mut world).unwrap();
    assert_eq!(infected(&world), 2);
    assert_eq!(world.counters.ever_infected["flu"], 2);
}

#[test]
fn empty_world_runs() {
    let model = grid_model("  output o every 5 to \"o.csv\" {\n    series t = tick\n  }");
    let result = engine::run(&model, &RunConfig::new(1, 20)).unwrap();
    let ticks: Vec<&Value> = result.tables[0].rows.iter().map(|r| &r[0]).collect();
    assert_eq!(ticks, [&Value::Int(0), &Value::Int(5), &Value::Int(10), &Value::Int(15), &Value::Int(20)]);
    assert_eq!(result.tables[0].column("t").unwrap(), result.tables[0].column("tick").unwrap());
}

#[test]
fn events_agree_with_counters() {
    let model = load_fixture("measles.abms");
    let config = RunConfig::new(42, 150).with_base_dir(fixtures_dir()).recording();
    let result = engine::run(&model, &config).unwrap();
    let died = result.events.iter().filter(|e| matches!(e.kind, EventKind::Died { .. })).count() as u64;
    assert_eq!(died, result.summary.counters.deaths["measles"]);
    let introduced: Vec<_> =
        result.events.iter().filter(|e| matches!(e.kind, EventKind::Introduced { .. })).collect();
    assert_eq!(introduced.len(), 5);
    assert!(introduced.iter().all(|e| e.tick == 0));
    let alive: u64 = result.summary.alive.values().sum();
    assert_eq!(alive + died, 200);
}

#[test]
fn outputs_are_written_as_csv() {
    let dir = tempfile::tempdir().unwrap();
    let model = load_fixture("measles.abms");
    let config = RunConfig::new(42, 10).with_base_dir(fixtures_dir()).with_out_dir(dir.path());
    let result = engine::run(&model, &config).unwrap();
    let written = std::fs::read_to_string(dir.path().join("out.csv")).unwrap();
    assert_eq!(written, result.tables[0].to_csv());
    assert_eq!(written.lines().count(), 12);
}

#[test]
fn invalid_models_are_refused() {
    let model = grid_model("  agent a { create 1 random capability disease nope }");
    let err = engine::run(&model, &RunConfig::new(1, 1)).unwrap_err();
    assert!(err.to_string().contains("unknown disease `nope`"), "{err}");
}

#[test]
fn vehicles_queue_only_at_controlled_intersections() {
    let model = load_fixture("traffic.abms");
    let mut world = build_world(&model, &RunConfig::new(42, 0).with_base_dir(fixtures_dir())).unwrap();
    let controllers = world.agents.iter().filter(|a| a.controller.is_some()).count();
    assert_eq!(controllers, 12);
    for _ in 0..100 {
        tick(&mut world).unwrap();
        let queued: usize = world
            .agents
            .iter()
            .filter_map(|a| a.controller.as_ref())
            .map(|c| c.queue_lengths().iter().sum::<usize>())
            .sum();
        assert!(queued <= 80);
        for c in world.agents.iter().filter_map(|a| a.controller.as_ref()) {
            assert!(c.queue_lengths().iter().all(|&q| q <= 30));
        }
    }
    assert!(world.counters.arrivals > 0);
}
