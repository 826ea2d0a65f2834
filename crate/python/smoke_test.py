"""Smoke test for the abms extension module.

Run after `pip install -e crates/python --no-build-isolation`.
"""

from pathlib import Path

import abms

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"


def main():
    model = abms.load(FIXTURES / "measles.abms")
    assert model.name == "measles"
    assert model.agent_types == ["native", "immigrant"]
    assert model.diseases == ["measles"]
    assert [d for d in model.validate() if d[0] == "error"] == []

    again = abms.parse(model.format())
    assert again.format() == model.format()

    tables = abms.run(model, seed=42, ticks=50, base_dir=FIXTURES)
    epidemic = tables["epidemic"]
    assert epidemic["columns"] == ["tick", "susceptible", "infected", "recovered"]
    assert len(epidemic["rows"]) == 51

    sim = abms.Simulation(model, 42, FIXTURES)
    first = sim.digest()
    sim.step(50)
    assert sim.tick == 50
    assert sim.digest() != first
    assert sim.outputs()["epidemic"]["csv"] == epidemic["csv"]
    counts = dict(sim.compartment_counts("measles"))
    assert sum(counts.values()) == sim.population

    src, report = model.generate()
    assert model.check_structure(src)
    assert any(element == "disease measles" for element, _ in report)

    assert ("S", "I", "infection") in abms.compartment_edges("SIR")
    try:
        abms.parse("")
    except ValueError as err:
        assert "expected 'model'" in str(err)
    else:
        raise AssertionError("empty source parsed")

    print("python smoke test passed")


if __name__ == "__main__":
    main()
