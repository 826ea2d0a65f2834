mod common;

use abms_core::codegen::{check_structure, generate};

use common::{delete_procedure, fixtures_dir, load_fixture, parse, unbalance, FIXTURES};

#[test]
fn measles_matches_golden() {
    let (source, _) = generate(&load_fixture("measles.abms"));
    let golden = std::fs::read_to_string(fixtures_dir().join("golden/measles.nlogo")).unwrap();
    assert!(source == golden, "generated NetLogo differs from fixtures/golden/measles.nlogo");
}

#[test]
fn generation_is_deterministic() {
    for name in FIXTURES {
        let model = load_fixture(name);
        let (a, ra) = generate(&model);
        let (b, rb) = generate(&model);
        assert_eq!(a, b, "{name}");
        assert_eq!(ra.entries, rb.entries, "{name}");
    }
}

#[test]
fn fixtures_pass_structure_check() {
    for name in FIXTURES {
        let model = load_fixture(name);
        let (source, report) = generate(&model);
        assert!(check_structure(&source, &model), "{name}");
        assert!(report.procedures().count() > 10, "{name}");
        assert!(source.is_ascii() || name != "measles.abms");
    }
}

#[test]
fn every_reported_procedure_is_needed() {
    let model = load_fixture("disease.abms");
    let (source, report) = generate(&model);
    for p in report.procedures() {
        let mutated = delete_procedure(&source, p).unwrap_or_else(|| panic!("{p} not defined"));
        assert!(!check_structure(&mutated, &model), "deleting {p} went unnoticed");
    }
}

#[test]
fn unbalanced_brackets_fail() {
    let model = load_fixture("traffic.abms");
    let (source, _) = generate(&model);
    for v in 0..16 {
        assert!(!check_structure(&unbalance(&source, v), &model), "variant {v}");
    }
}

#[test]
fn duplicated_procedure_fails() {
    let model = load_fixture("measles.abms");
    let (source, _) = generate(&model);
    let doubled = source.clone() + "\nto go\nend\n";
    assert!(!check_structure(&doubled, &model));
}

#[test]
fn brackets_in_strings_and_comments_are_ignored() {
    let model = load_fixture("measles.abms");
    let (source, _) = generate(&model);
    let extra = source + "; stray ] in a comment\nto-report odd-text\n  report \"[(\"\nend\n";
    assert!(check_structure(&extra, &model));
}

#[test]
fn every_breed_is_declared_once() {
    let model = load_fixture("traffic.abms");
    let (source, report) = generate(&model);
    assert_eq!(report.breeds, ["road-nodes", "vehicles", "controllers"]);
    let without = source.replacen("breed [vehicles vehicle]", "", 1);
    assert!(!check_structure(&without, &model));
}

#[test]
fn unsupported_features_are_reported_and_commented() {
    let model = parse(
        "model ext {
  environment grid width 5 height 5
  agent a {
    create 3 random
    capability external \"helpers.nls\" helper
  }
}
",
    );
    let (source, report) = generate(&model);
    assert!(source.contains("; external capability: helper \u{2014} include manually"), "{source}");
    assert!(report.unsupported.iter().any(|u| u.element == "agent a/capability external"));
    assert!(check_structure(&source, &model));
}

#[test]
fn osm_environment_is_flagged() {
    let model = load_fixture("traffic.abms");
    let (source, report) = generate(&model);
    assert!(report.unsupported.iter().any(|u| u.reason.to_lowercase().contains("osm")), "{:?}", report.unsupported);
    assert!(source.contains("load-road-network"));
}

#[test]
fn empty_model_still_has_setup_and_go() {
    let model = parse("model empty {\n  environment cartesian [0, 10] [0, 10]\n}\n");
    let (source, report) = generate(&model);
    assert!(report.breeds.is_empty());
    assert!(source.contains("to setup\n") && source.contains("to go\n"));
    assert!(check_structure(&source, &model));
}
