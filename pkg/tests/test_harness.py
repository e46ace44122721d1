import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kinetic_exit.dynamics import ConfigError
from kinetic_exit.harness import (
    SCHEMA,
    canonicalize_text,
    config_digest,
    fmt17,
    main,
    merge_records,
    parse_config_text,
)
from kinetic_exit.specfun import g


def _run(args, capsys=None):
    rc = main([str(a) for a in args])
    return rc


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

def test_parse_config_text():
    cfg = parse_config_text("# header\nsigma = 2.0  # noise\n\n n_paths=1e5\nmodel = linear\n")
    assert cfg == {"sigma": 2.0, "n_paths": 100000, "model": "linear"}


@pytest.mark.parametrize("text", ["sigma 2", "nonsense = 1", "n_paths = many"])
def test_parse_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_canonical_form_ignores_layout():
    a = "sigma = 2.0\nseed=3 # comment\n"
    b = "# other\n  seed = 3\n\nsigma=2\n"
    assert canonicalize_text(a) == canonicalize_text(b) == "seed=3\nsigma=2.0\n"


def test_digest_stable():
    cfg = {"sigma": 1.0, "seed": 7, "model": "ibm"}
    # frozen value: sha256 of the canonical text, first 16 hex digits
    assert config_digest(cfg) == config_digest(dict(reversed(list(cfg.items()))))
    assert len(config_digest(cfg)) == 16
    assert config_digest(cfg) != config_digest({**cfg, "seed": 8})


@settings(max_examples=50, deadline=None)
@given(st.floats(allow_nan=False, allow_infinity=False))
def test_fmt17_round_trip(x):
    assert float(fmt17(x)) == x


def test_schema_covers_model_and_sim_keys():
    for k in ("alpha", "beta", "gamma", "sigma", "dt", "t_horizon", "n_paths", "seed",
              "refine_threshold", "max_refine_depth"):
        assert k in SCHEMA


# --------------------------------------------------------------------------
# CLI
# --------------------------------------------------------------------------

def test_eval_csv(tmp_path):
    out = tmp_path / "g.csv"
    assert _run(["eval", "--fn", "g", "--from", -5, "--to", 5, "--step", 0.01, "--out", out]) == 0
    raw = out.read_bytes()
    assert raw.startswith(b"z,g\r\n")
    rows = list(csv.reader(raw.decode().splitlines()))
    assert len(rows) == 1002
    z, v = float(rows[500][0]), float(rows[500][1])
    assert v == float(g(z))
    man = json.loads((tmp_path / "g.csv.manifest.json").read_text())
    assert man["command"] == "eval" and man["outputs"] == [str(out)]
    assert len(man["config_digest"]) == 16


def test_exit_prob_byte_identical(tmp_path):
    args = ["exit-prob", "--model", "ibm", "--sigma", 1, "--q", 0.5, "--p", 0, "--t", 1,
            "--paths", 20000, "--seed", 1]
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert _run(args + ["--out", a]) == 0
    assert _run(args + ["--out", b]) == 0
    assert a.read_bytes() == b.read_bytes()
    rec = json.loads(a.read_text())
    assert set(rec) >= {"suite", "op", "inputs", "estimate", "stderr", "ci", "n", "seed",
                        "manifest_digest"}
    assert rec["n"] == 20000 and rec["seed"] == 1


def test_exit_prob_worker_invariance(tmp_path, monkeypatch):
    args = ["exit-prob", "--q", 0.3, "--p", 0.4, "--paths", 20000, "--seed", 5]
    outs = []
    for w in ("1", "3"):
        monkeypatch.setenv("KINETIC_EXIT_WORKERS", w)
        path = tmp_path / f"w{w}.jsonl"
        assert _run(args + ["--out", path]) == 0
        outs.append(path.read_bytes())
    assert outs[0] == outs[1]


def test_exit_prob_girsanov(tmp_path):
    out = tmp_path / "gir.jsonl"
    rc = _run(["exit-prob", "--model", "linear", "--alpha", 1, "--beta", 0.5, "--gamma", 0.5,
               "--method", "girsanov", "--paths", 5000, "--out", out])
    assert rc == 0
    rec = json.loads(out.read_text())
    assert rec["op"] == "girsanov" and 0 < rec["estimate"] < 1


def test_config_file(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# small run\nn_paths = 2000\nseed = 4\nq = 0.3\n", encoding="utf-8")
    out = tmp_path / "r.jsonl"
    assert _run(["exit-prob", "--config", cfg, "--out", out]) == 0
    rec = json.loads(out.read_text())
    assert rec["n"] == 2000 and rec["inputs"]["q"] == 0.3


def test_flags_override_config(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("n_paths = 2000\n")
    out = tmp_path / "r.jsonl"
    assert _run(["exit-prob", "--config", cfg, "--paths", 1000, "--out", out]) == 0
    assert json.loads(out.read_text())["n"] == 1000


@pytest.mark.parametrize("argv", [
    ["exit-prob", "--dt", 0],
    ["exit-prob", "--model", "quadratic"],
    ["verify", "--suite", "nope"],
    ["exit-prob", "--q", 1.5],
    ["eval", "--fn", "nope", "--from", 0, "--to", 1, "--step", 0.1],
    ["frobnicate"],
    ["exit-prob", "--config", "/nonexistent/file.cfg"],
])
def test_usage_errors_exit_2(argv, capsys):
    assert _run(argv) == 2
    assert "config keys" in capsys.readouterr().err


def test_verify_pass_table(tmp_path, capsys):
    out = tmp_path / "specfun.jsonl"
    rc = _run(["verify", "--suite", "specfun", "--out", out])
    table = capsys.readouterr().out
    recs = [json.loads(line) for line in out.read_text().splitlines()]
    assert all(r["suite"] == "specfun" for r in recs)
    assert "PASS" in table
    assert rc == (0 if all(r["passed"] for r in recs) else 1)


def test_verify_failure_exit_1(tmp_path):
    # the specfun suite contains a check that fails by construction of its target
    out = tmp_path / "specfun.jsonl"
    rc = _run(["verify", "--suite", "specfun", "--out", out])
    recs = [json.loads(line) for line in out.read_text().splitlines()]
    failed = [r["op"] for r in recs if not r["passed"]]
    assert (rc == 1) == bool(failed)


def test_verify_identities_small(tmp_path):
    out = tmp_path / "id.jsonl"
    rc = _run(["verify", "--suite", "identities", "--seed", 7, "--paths", 20000, "--out", out])
    recs = [json.loads(line) for line in out.read_text().splitlines()]
    assert len(recs) >= 4
    assert rc == 0


def test_report_merge(tmp_path):
    a = tmp_path / "a.jsonl"
    b = tmp_path / "b.jsonl"
    _run(["exit-prob", "--paths", 1000, "--out", a])
    _run(["exit-prob", "--paths", 1000, "--q", 0.3, "--out", b])
    rep = tmp_path / "rep.csv"
    # the two runs have different configs under the same suite name
    assert _run(["report", a, b, "--out", rep]) == 2
    assert _run(["report", a, a, "--out", rep]) == 0
    rows = list(csv.reader(rep.read_text().splitlines()))
    assert rows[0][:4] == ["suite", "op", "inputs", "estimate"]
    assert len(rows) == 3


def test_merge_records_conflict(tmp_path):
    a = tmp_path / "a.jsonl"
    a.write_text('{"suite":"s","manifest_digest":"x"}\n{"suite":"s","manifest_digest":"y"}\n')
    with pytest.raises(ConfigError):
        merge_records([a])


def test_tv_decay_cli(tmp_path):
    out = tmp_path / "tv.jsonl"
    rc = _run(["tv-decay", "--paths", 20000, "--checkpoints", "0.5,1", "--min-survivors", 100,
               "--out", out])
    assert rc == 0
    recs = [json.loads(line) for line in out.read_text().splitlines()]
    assert [r["inputs"]["t"] for r in recs] == [0.5, 1.0]
    assert all(r["noise_floor"] > 0 for r in recs)


def test_qsd_cli(tmp_path):
    out = tmp_path / "qsd.jsonl"
    hist = tmp_path / "hist.csv"
    rc = _run(["qsd", "--n-particles", 10000, "--t-max", 8, "--paths", 100000, "--dt", 0.02,
               "--snapshot-every", 0.02, "--out", out, "--hist-csv", hist])
    assert rc == 0
    ops = [json.loads(line)["op"] for line in out.read_text().splitlines()]
    assert ops == ["fv_kill_rate", "lambda0_regression", "envelope_ratio"]
    rows = list(csv.reader(hist.read_text().splitlines()))
    assert len(rows) == 1 + 50 * 50
    dens = np.array([float(r[5]) for r in rows[1:]])
    assert dens.sum() == pytest.approx(1.0)
    assert (tmp_path / "hist.csv.manifest.json").exists()


def test_undersized_run_exit_2(tmp_path, capsys):
    rc = _run(["tv-decay", "--paths", 1000, "--checkpoints", "1", "--out", tmp_path / "x"])
    assert rc == 2
    assert "InsufficientSampleError" in capsys.readouterr().err


def test_stdout_output(capsys):
    assert _run(["eval", "--fn", "exit_side", "--from", 0.5, "--to", 0.5, "--step", 1]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "q,exit_side"
    assert float(lines[1].split(",")[1]) == pytest.approx(0.5, abs=1e-12)
