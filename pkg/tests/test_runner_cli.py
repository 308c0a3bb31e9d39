"""End-to-end runs of tiny scenarios plus the CLI surface."""

import copy
import csv
import os

import pytest
import yaml

from caspr.cli import main
from caspr.runner import run_scenario, run_seed
from caspr.scenario import validate

TINY = {
    "name": "tiny",
    "duration_s": 4.0,
    "cooldown_s": 1.0,
    "seeds": [1, 2],
    "topology": {
        "direct": {"delay_ms": 40.0,
                   "loss": {"kind": "bernoulli", "p": 0.02}},
        "access": {"delay_ms": 5.0},
        "inter_dc": {"delay_ms": 15.0},
        "recovery": {"delay_ms": 6.0},
    },
    "flows": {"count": 3, "packet_size": 120, "interval_ms": 10.0,
              "on_s": 2.5, "stagger_ms": 3.0},
    "coding": {"k_max": 3, "parity_cross": 2},
}


def tiny(**changes):
    doc = copy.deepcopy(TINY)
    doc.update(changes)
    return validate(doc)


def lossless(**changes):
    doc = copy.deepcopy(TINY)
    del doc["topology"]["direct"]["loss"]
    doc.update(changes)
    return validate(doc)


def test_lossy_run_recovers_and_accounts(tmp_path):
    m = run_seed(tiny(), seed=1)
    assert m.sent == 3 * 300  # continuous until stop at duration - cooldown
    assert 0 < m.lost < 100
    assert m.recovered_any <= m.lost
    assert m.recovery_rate > 0.5
    assert m.dc1_egress_bytes > 0
    assert m.dc2_egress_recovery_bytes > 0
    assert m.counters["nacks_sent"] > 0


def test_lossless_run_moves_no_recovery_bytes():
    m = run_seed(lossless(), seed=1)
    assert m.lost == 0
    assert m.recovery_rate == 1.0
    assert m.dc2_egress_recovery_bytes == 0
    # end of session: one frontier probe per flow, confirmed not-a-loss
    assert m.counters["nacks_sent"] == 3
    assert m.counters["confirm_no"] == 3
    assert m.counters["failed_silent"] == 0
    # coding still ran; parity crossed the inter-DC link
    assert m.dc1_egress_bytes > 0


def test_run_scenario_writes_artifact_set(tmp_path):
    out = tmp_path / "r"
    runs = run_scenario(tiny(), str(out))
    assert len(runs) == 2
    for name in ("summary.csv", "episodes.csv", "fec_whatif.csv",
                 "cost.csv", "summary.txt"):
        assert (out / name).stat().st_size > 0
    rows = list(csv.DictReader((out / "summary.csv").open()))
    assert [r["seed"] for r in rows] == ["1", "2", "all"]


def test_run_scenario_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    run_scenario(tiny(), str(a))
    run_scenario(tiny(), str(b))
    for name in ("summary.csv", "episodes.csv", "fec_whatif.csv", "cost.csv",
                 "summary.txt"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_trace_artifact(tmp_path):
    out = tmp_path / "t"
    run_scenario(tiny(), str(out), seeds=[1], trace=True)
    trace = out / "trace-seed1.jsonl"
    assert trace.exists()
    first = trace.open().readline()
    assert first.startswith("{")


# -- CLI ----------------------------------------------------------------------


def write_tiny(tmp_path, doc=None):
    p = tmp_path / "tiny.yaml"
    p.write_text(yaml.safe_dump(doc or TINY))
    return str(p)


def test_cli_run_and_output(tmp_path, capsys):
    rc = main(["run", write_tiny(tmp_path), "--seed", "1",
               "--out", str(tmp_path / "out")])
    assert rc == 0
    text = capsys.readouterr().out
    assert "scenario tiny: 1 seed(s)" in text
    assert "artifacts in" in text
    assert (tmp_path / "out" / "summary.csv").exists()


def test_cli_run_resolves_bundled_names(tmp_path, capsys):
    rc = main(["validate", "straggler_ab"])
    assert rc == 0
    assert "straggler_ab: OK" in capsys.readouterr().out


def test_cli_set_override_reaches_the_run(tmp_path, capsys):
    rc = main(["run", write_tiny(tmp_path), "--seed", "1",
               "--out", str(tmp_path / "o"),
               "--set", "topology.direct.loss={kind: bernoulli, p: 0}"])
    assert rc == 0
    rows = list(csv.DictReader((tmp_path / "o" / "summary.csv").open()))
    assert all(r["direct_lost"] == "0" for r in rows)
    assert all(r["dc2_egress_recovery_bytes"] == "0" for r in rows)


def test_cli_validate_rejects_bad_file(tmp_path, capsys):
    doc = copy.deepcopy(TINY)
    doc["coding"]["k_max"] = 1
    rc = main(["validate", write_tiny(tmp_path, doc)])
    assert rc == 2
    assert "scenario error" in capsys.readouterr().err


def test_cli_unknown_scenario_name(capsys):
    rc = main(["run", "no_such_thing"])
    assert rc == 2
    err = capsys.readouterr().err
    assert "no scenario file" in err and "wide_area_cbr" in err


def test_cli_scenarios_lists_bundled(capsys):
    rc = main(["scenarios"])
    assert rc == 0
    names = capsys.readouterr().out.split()
    assert "outage_vs_fec" in names and "skype_analog" in names


def test_cli_compare_table(tmp_path, capsys):
    f = write_tiny(tmp_path)
    main(["run", f, "--seed", "1", "--out", str(tmp_path / "a")])
    main(["run", f, "--seed", "2", "--out", str(tmp_path / "b")])
    capsys.readouterr()
    rc = main(["compare", str(tmp_path / "a"), str(tmp_path / "b")])
    assert rc == 0
    out = capsys.readouterr().out
    lines = out.splitlines()
    assert lines[0].split()[0] == "metric"
    assert any(l.startswith("recovery_rate") for l in lines)
    assert any(l.startswith("dc1_egress_bytes") for l in lines)


def test_cli_compare_rejects_foreign_schema(tmp_path, capsys):
    d = tmp_path / "x"
    d.mkdir()
    (d / "summary.csv").write_text("schema,seed\nother.thing/9,all\n")
    rc = main(["compare", str(d)])
    assert rc == 2
    assert "does not match" in capsys.readouterr().err


def test_cli_compare_requires_pooled_row(tmp_path, capsys):
    d = tmp_path / "y"
    d.mkdir()
    (d / "summary.csv").write_text("schema,seed\ncaspr.summary/1,1\n")
    rc = main(["compare", str(d)])
    assert rc == 2
    assert "no pooled" in capsys.readouterr().err


def test_cli_compare_missing_dir(tmp_path, capsys):
    rc = main(["compare", str(tmp_path / "absent")])
    assert rc == 2
    assert "cannot read" in capsys.readouterr().err
