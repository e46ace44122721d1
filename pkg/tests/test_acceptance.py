"""Acceptance criteria at full sample sizes.

Each test prints one ``criterion N: PASS|FAIL`` line with its sub-checks and
then asserts every sub-check.  Run alone with ``pytest -m acceptance -v``.
"""
import json
import math

import numpy as np
import pytest

from kinetic_exit.dynamics import SimConfig, linear_langevin_transition
from kinetic_exit.estimators import (
    compare_extremes,
    eta_ratio_scan,
    merge_tables,
    standard_grid,
)
from kinetic_exit.harness import (
    SCHEMA,
    main,
    suite_girsanov,
    suite_holder,
    suite_identities,
    suite_laws,
    suite_ratio,
    suite_specfun,
    suite_tail,
)
from kinetic_exit.qsd import (
    conditional_tv_decay,
    fleming_viot_run,
    log_linear_fit,
    phi_shape_scan,
    qsd_density_estimate,
    survival_regression,
)
from kinetic_exit.specfun import ModelParams

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]

MILLION = 1_000_000
RATIO_PATHS = 100_000


def _cfg(**kw):
    cfg = {k: v[1] for k, v in SCHEMA.items()}
    cfg.update(kw)
    return cfg


def _checks(suite_out):
    return [(c.op, bool(c.passed), f"{c.estimate:.6g} {c.detail}".strip()) for c in suite_out]


def _stability(a, doubled, wide):
    """Criterion 6 sub-checks for a scan, its nested doubling and its |p|<=6 extension."""
    conf = a.confident
    out = []
    out.append(("extremes finite", math.isfinite(a.ratio_min) and math.isfinite(a.ratio_max)
                and a.ratio_min > 0, f"min={a.ratio_min:.4g} max={a.ratio_max:.4g} "
                f"confident={len(conf)}/{len(a.points)}"))
    ok = all(r.ratio_ci[0] > 0 and math.isfinite(r.ratio_ci[1]) for r in conf)
    out.append(("CIs exclude 0 and inf", ok, f"{len(conf)} confident points"))
    for label, other in (("doubling", doubled), ("|p|<=6", wide)):
        for k, (x, y, z) in compare_extremes(a, other).items():
            out.append((f"{k} under {label}", z <= 2, f"{x:.4g}->{y:.4g} shift={z:.2f} SE"))
    return out


def _scan_checks(scan, grid_small, grid_wide, n):
    cfg = SimConfig(dt=0.01, t_horizon=1.0, n_paths=n, seed=0)
    a = scan(grid_small, cfg, 0)
    b = scan(grid_small, cfg, n)
    wide = scan(grid_wide, cfg, 0)
    return _stability(a, merge_tables(a, b), wide)


def test_criterion_1_special_functions(report):
    checks = _checks(suite_specfun(_cfg()))
    ok = report("1", checks)
    assert ok, checks


def test_criterion_2_closed_form_laws(report):
    checks = _checks(suite_laws(_cfg(n_paths=MILLION)))
    ok = report("2", checks)
    assert ok, checks


def test_criterion_3_identities(report):
    checks = []
    for dt in (0.01, 0.005):
        for name, passed, info in _checks(suite_identities(_cfg(n_paths=MILLION, dt=dt))):
            checks.append((f"{name} dt={dt}", passed, info))
    ok = report("3", checks)
    assert ok, checks


def test_criterion_4_long_time_law(report):
    checks = _checks(suite_tail(_cfg(n_paths=MILLION)))
    ok = report("4", checks)
    assert ok, checks


def test_criterion_5_boundary_exponent(report):
    checks = _checks(suite_holder(_cfg(n_paths=MILLION)))
    ok = report("5", checks)
    assert ok, checks


def test_criterion_6_two_sided_envelope(report):
    checks = []
    for label, cfg in (("ibm", _cfg(model="ibm", n_paths=RATIO_PATHS)),
                       ("linear", _cfg(model="linear", alpha=1.0, beta=0.5, gamma=0.5,
                                       n_paths=RATIO_PATHS))):
        checks += [(f"{label} {n}", p, i) for n, p, i in _checks(suite_ratio(cfg))]
    ok = report("6", checks)
    assert ok, checks


def test_criterion_7_girsanov(report):
    checks = _checks(suite_girsanov(_cfg(n_paths=MILLION)))
    ok = report("7", checks)
    assert ok, checks


def test_criterion_8_eta_process(report):
    eta, t, n = 0.5, 2.0, MILLION
    rng = np.random.default_rng(8)
    q, _ = linear_langevin_transition(ModelParams.eta_process(eta), np.ones(n), np.zeros(n),
                                      t, rng)
    target = 0.5 * (3 * math.exp(-eta * t) - math.exp(-3 * eta * t))
    z = (q.mean() - target) / (q.std() / math.sqrt(n))
    checks = [("mean position", abs(z) <= 4, f"{q.mean():.6f} vs {target:.6f} z={z:.2f}")]

    def scan(grid, cfg, offset):
        return eta_ratio_scan(eta, 1.0, 1.0, grid, cfg, paths_offset=offset)

    checks += _scan_checks(scan, standard_grid(3), standard_grid(6), RATIO_PATHS)
    ok = report("8", checks)
    assert ok, checks


def test_criterion_9_qsd(report):
    params = ModelParams()
    sim = SimConfig(dt=0.01, t_horizon=1.0, n_paths=MILLION, seed=0)
    checks = []
    runs = [fleming_viot_run(params, 10_000, 20.0, sim.replace(seed=s), init,
                             snapshot_every=0.02)
            for s, init in ((0, (0.2, 0.0)), (1, (0.8, 0.0)))]
    regs = [survival_regression(params, sim.replace(seed=10 + s), init)
            for s, init in ((0, (0.2, 0.0)), (1, (0.8, 0.0)))]
    fv = runs[0].stationary_rate().mean
    gap = abs(regs[0].lambda0_hat - fv) / fv
    checks.append(("regression vs FV", gap <= 0.05,
                   f"{regs[0].lambda0_hat:.4f} vs {fv:.4f} gap={gap:.4f}"))
    d_reg = abs(regs[0].lambda0_hat - regs[1].lambda0_hat) / regs[1].lambda0_hat
    fv2 = runs[1].stationary_rate().mean
    d_fv = abs(fv - fv2) / fv2
    checks.append(("init independence", max(d_reg, d_fv) <= 0.05,
                   f"regression {d_reg:.4f}, FV {d_fv:.4f}"))
    shape = qsd_density_estimate(runs[0], params)
    checks.append(("QSD envelope extremes", shape.spread <= 10,
                   f"max/min={shape.spread:.3f} over {int(shape.populated.sum())} bins"))

    lam = regs[0].lambda0_hat

    def scan(grid, cfg, offset):
        return phi_shape_scan(params, 2.0, lam, grid, cfg, paths_offset=offset)

    cfg = sim.replace(n_paths=RATIO_PATHS)
    a = scan(standard_grid(3), cfg, 0)
    b = scan(standard_grid(3), cfg, RATIO_PATHS)
    for k, (x, y, z) in compare_extremes(a, merge_tables(a, b)).items():
        checks.append((f"phi ratio {k} under doubling", z <= 2,
                       f"{x:.4g}->{y:.4g} shift={z:.2f} SE"))

    ts = [1.0, 2.0, 3.0, 4.0, 5.0]
    pts = conditional_tv_decay(params, (0.2, 0.0), (0.8, 0.0), ts,
                               sim.replace(n_paths=10 * MILLION))
    tv = [p.tv for p in pts]
    slope, _, r2 = log_linear_fit(ts, tv)
    mono = all(y < x for x, y in zip(tv, tv[1:]))
    info = " ".join(f"t={p.t:g}:{p.tv:.4f}(floor {p.noise_floor:.4f})" for p in pts)
    checks.append(("TV(1) > TV(5)", tv[0] > tv[-1], info))
    checks.append(("TV monotone", mono, info))
    checks.append(("log TV fit", slope < 0 and r2 >= 0.8, f"slope={slope:.3f} r2={r2:.3f}"))
    ok = report("9", checks)
    assert ok, checks


def test_criterion_10_reproducibility(report, tmp_path, monkeypatch):
    small = ["--paths", "20000", "--seed", "3"]
    commands = {
        "specfun": ["verify", "--suite", "specfun"],
        "laws": ["verify", "--suite", "laws"] + small,
        "identities": ["verify", "--suite", "identities"] + small,
        "girsanov": ["verify", "--suite", "girsanov"] + small,
        "tail": ["verify", "--suite", "tail"] + small,
        "holder": ["verify", "--suite", "holder"] + small,
        "ratio": ["verify", "--suite", "ratio", "--paths", "2000", "--seed", "3"],
        "qsd": ["verify", "--suite", "qsd", "--n-particles", "2000", "--t-max", "8",
                "--paths", "100000"],
        "exit-prob": ["exit-prob", "--q", "0.3", "--p", "0.2"] + small,
        "tv-decay": ["tv-decay", "--checkpoints", "0.5,1", "--min-survivors", "100"] + small,
        "qsd-cmd": ["qsd", "--n-particles", "2000", "--t-max", "8", "--paths", "100000",
                    "--snapshot-every", "0.01"],
    }
    checks = []
    for name, argv in commands.items():
        outs = []
        for workers in ("1", "4", "4"):
            monkeypatch.setenv("KINETIC_EXIT_WORKERS", workers)
            path = tmp_path / f"{name}-{len(outs)}.jsonl"
            main(argv + ["--out", str(path)])
            outs.append(path.read_bytes())
        same = outs[0] == outs[1] == outs[2]
        n_rec = len(outs[0].splitlines())
        json.loads(outs[0].splitlines()[0])
        checks.append((name, same and n_rec > 0, f"{n_rec} records"))
    ok = report("10", checks)
    assert ok, checks
