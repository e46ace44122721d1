"""Command-line harness: evaluation tables, estimates, verification suites.

Subcommands::

    eval       tabulate a closed-form function over a grid (CSV)
    exit-prob  single survival estimate, direct or reweighted (JSONL)
    verify     run a named check suite, print a pass/fail table (JSONL)
    qsd        Fleming-Viot run, decay rate and QSD histogram (JSONL, CSV)
    tv-decay   conditioned-law TV distances at checkpoints (JSONL)
    report     merge result files into one CSV table

Exit codes: 0 success, 1 a check failed, 2 usage or configuration error.

Settings come from built-in defaults, then ``--config FILE`` (flat
``key = value`` lines, ``#`` comments), then command-line flags.  Every
output file gets a ``<file>.manifest.json`` next to it.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import kstest

from . import __version__
from .dynamics import (
    IBM,
    ConfigError,
    Linear,
    SimConfig,
    girsanov_log_weight_endpoint,
    simulate_paths,
    simulate_velocity_zero,
)
from .estimators import (
    Estimate,
    InsufficientDecayError,
    compare_extremes,
    exit_prob_girsanov,
    exit_prob_mc,
    holder_exponent_fit,
    martingale_check,
    merge_tables,
    ratio_scan,
    scaling_identity,
    sigma_rescaling_identity,
    sign_flip_identity,
    standard_grid,
    tail_exponent_fit,
)
from .qsd import (
    ExtinctionError,
    InsufficientSampleError,
    WindowError,
    conditional_tv_decay,
    fleming_viot_run,
    qsd_density_estimate,
    survival_regression,
)
from .specfun import (
    EXIT_SIDE_EDGE_CONST,
    ModelParams,
    envelope_G,
    envelope_H,
    envelope_Hfull,
    envelope_T,
    exit_right_first_prob_at_rest,
    g,
    h,
    harmonicity_residual,
    kummer_u,
    velocity_zero_density_mass,
    velocity_zero_position_cdf,
)

# key -> (type, default, help)
SCHEMA: dict[str, tuple[type, object, str]] = {
    "alpha": (float, 0.0, "stiffness >= 0"),
    "beta": (float, 0.0, "constant force"),
    "gamma": (float, 0.0, "friction (any sign)"),
    "sigma": (float, 1.0, "noise amplitude > 0"),
    "eta": (float, 0.5, "eta-process rate (model = eta)"),
    "model": (str, "ibm", "ibm | linear | eta"),
    "dt": (float, 0.01, "base time step"),
    "t_horizon": (float, 1.0, "simulation horizon"),
    "n_paths": (int, 100_000, "paths per estimate"),
    "seed": (int, 0, "64-bit seed"),
    "refine_threshold": (float, 0.1, "boundary distance triggering sub-steps"),
    "max_refine_depth": (int, 6, "maximum number of step halvings"),
    "q": (float, 0.5, "start position"),
    "p": (float, 0.0, "start velocity"),
    "method": (str, "direct", "direct | girsanov"),
    "suite": (str, "identities", "verify suite name"),
    "n_particles": (int, 10_000, "Fleming-Viot particles"),
    "t_max": (float, 20.0, "Fleming-Viot run length"),
    "checkpoints": (str, "1,2,3,4,5", "comma-separated TV checkpoints"),
    "theta1": (str, "0.2,0", "first initial point q,p"),
    "theta2": (str, "0.8,0", "second initial point q,p"),
}

SIM_KEYS = ("dt", "t_horizon", "n_paths", "seed", "refine_threshold", "max_refine_depth")


def schema_help() -> str:
    lines = ["config keys (key = value, '#' starts a comment):"]
    for k, (tp, default, doc) in SCHEMA.items():
        lines.append(f"  {k:<18} {tp.__name__:<6} default {default!s:<12} {doc}")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# configuration and manifests
# --------------------------------------------------------------------------

def _strip(line: str) -> str:
    return line.split("#", 1)[0].strip()


def parse_config_text(text: str) -> dict[str, object]:
    """Parse flat ``key = value`` text into typed values."""
    out: dict[str, object] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = _strip(raw)
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        out[key] = _coerce(key, val)
    return out


def _coerce(key: str, val):
    tp = SCHEMA[key][0]
    try:
        if tp is int:
            return int(float(val)) if isinstance(val, str) and "e" in val.lower() else int(val)
        return tp(val)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{key}: cannot parse {val!r} as {tp.__name__}") from e


def canonical_config(cfg: dict[str, object]) -> str:
    """Sorted ``key=value`` lines; floats use their shortest round-trip repr."""
    def fmt(v):
        return repr(float(v)) if isinstance(v, float) else str(v)
    return "".join(f"{k}={fmt(cfg[k])}\n" for k in sorted(cfg))


def canonicalize_text(text: str) -> str:
    """Canonical form of config text: comments and blanks dropped, keys sorted."""
    return canonical_config(parse_config_text(text))


def config_digest(cfg: dict[str, object]) -> str:
    """64-bit digest (16 hex digits) of the canonical config."""
    return hashlib.sha256(canonical_config(cfg).encode()).hexdigest()[:16]


@dataclass
class RunManifest:
    command: str
    config_digest: str
    seed: int
    code_version: str = __version__
    wall_time: float = 0.0
    outputs: list[str] = field(default_factory=list)

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n")


def _sim_config(cfg) -> SimConfig:
    return SimConfig(**{k: cfg[k] for k in SIM_KEYS})


def _params(cfg) -> ModelParams:
    if cfg["model"] == "eta":
        return ModelParams.eta_process(cfg["eta"], cfg["sigma"])
    if cfg["model"] == "ibm":
        return ModelParams(sigma=cfg["sigma"])
    return ModelParams(cfg["alpha"], cfg["beta"], cfg["gamma"], cfg["sigma"])


def _kind(cfg):
    if cfg["model"] == "ibm":
        return IBM(cfg["sigma"])
    if cfg["model"] in ("linear", "eta"):
        return Linear(_params(cfg))
    raise ConfigError(f"unknown model {cfg['model']!r}")


def _point(text: str) -> tuple[float, float]:
    try:
        q, p = (float(x) for x in text.split(","))
    except ValueError as e:
        raise ConfigError(f"expected 'q,p', got {text!r}") from e
    return q, p


# --------------------------------------------------------------------------
# records and CSV
# --------------------------------------------------------------------------

def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else repr(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def make_record(suite: str, op: str, inputs: dict, estimate, stderr, ci, n, seed: int,
                digest: str, **extra) -> dict:
    rec = {"suite": suite, "op": op, "inputs": inputs, "estimate": estimate,
           "stderr": stderr, "ci": ci, "n": n, "seed": seed, "manifest_digest": digest}
    rec.update(extra)
    return _jsonable(rec)


def record_line(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n"


def fmt17(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17g}"
    return str(x)


def write_csv(stream, header: list[str], rows) -> None:
    """RFC 4180 CSV with floats at 17 significant digits."""
    w = csv.writer(stream, lineterminator="\r\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt17(v) for v in row])


_START = [time.perf_counter()]


class _Output:
    """Collects text for one output target and its manifest."""

    def __init__(self, path: str | None, command: str, digest: str, seed: int):
        self.path = Path(path) if path else None
        self.buf = io.StringIO(newline="")
        self.manifest = RunManifest(command, digest, seed)
        self.extra: list[Path] = []

    def close(self) -> None:
        text = self.buf.getvalue()
        if self.path is None:
            sys.stdout.write(text)
            return
        with open(self.path, "w", newline="") as f:
            f.write(text)
        self.manifest.wall_time = time.perf_counter() - _START[0]
        self.manifest.outputs = [str(self.path)] + [str(p) for p in self.extra]
        for p in [self.path] + self.extra:
            self.manifest.write(p.with_name(p.name + ".manifest.json"))


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------

EVAL_FNS = ("g", "h", "H", "G", "T", "Hfull", "kummer_u", "exit_side")


def _eval_column(fn: str, cfg, x: np.ndarray, a: float, b: float) -> np.ndarray:
    q = cfg["q"]
    if fn == "g":
        return g(x)
    if fn == "kummer_u":
        return kummer_u(a, b, x)
    if fn == "exit_side":
        return np.array([exit_right_first_prob_at_rest(v) for v in x])
    params = _params(cfg)
    table = {
        "h": lambda p: h(q, p),
        "H": lambda p: envelope_H(q, p),
        "G": lambda p: envelope_G(cfg["eta"], cfg["sigma"], q, p),
        "T": lambda p: envelope_T(params, q, p),
        "Hfull": lambda p: envelope_Hfull(params, q, p),
    }
    return np.asarray(table[fn](x), dtype=float)


def cmd_eval(args, cfg, digest) -> int:
    n = int(math.floor((args.to - args.from_) / args.step + 1e-9)) + 1
    if n < 1:
        raise ConfigError("--to must not be below --from")
    x = args.from_ + args.step * np.arange(n)
    y = _eval_column(args.fn, cfg, x, args.a, args.b)
    var = {"g": "z", "kummer_u": "x", "exit_side": "q"}.get(args.fn, "p")
    out = _Output(args.out, "eval", digest, cfg["seed"])
    write_csv(out.buf, [var, args.fn], zip(x, y))
    out.close()
    return 0


# --------------------------------------------------------------------------
# exit-prob
# --------------------------------------------------------------------------

def cmd_exit_prob(args, cfg, digest) -> int:
    sim = _sim_config(cfg)
    t = cfg["t_horizon"]
    start = (cfg["q"], cfg["p"])
    if cfg["method"] == "girsanov":
        est = exit_prob_girsanov(_params(cfg), start, t, sim)
    elif cfg["method"] == "direct":
        est = exit_prob_mc(_kind(cfg), start, t, sim)
    else:
        raise ConfigError(f"unknown method {cfg['method']!r}")
    inputs = {k: cfg[k] for k in ("model", "alpha", "beta", "gamma", "sigma", "q", "p",
                                  "t_horizon", "dt", "method")}
    rec = make_record("exit-prob", cfg["method"], inputs, est.mean, est.std_err,
                      [est.ci_lo, est.ci_hi], est.n_paths, cfg["seed"], digest)
    out = _Output(args.out, "exit-prob", digest, cfg["seed"])
    out.buf.write(record_line(rec))
    out.close()
    return 0


# --------------------------------------------------------------------------
# verify suites
# --------------------------------------------------------------------------

@dataclass
class Check:
    op: str
    inputs: dict
    estimate: float
    passed: bool
    stderr: float | None = None
    ci: list | None = None
    n: int | None = None
    target: object = None
    detail: str = ""


def _est_check(op, inputs, est: Estimate, passed, target=None, detail=""):
    return Check(op, inputs, est.mean, passed, est.std_err, [est.ci_lo, est.ci_hi],
                 est.n_paths, target, detail)


def suite_specfun(cfg) -> list[Check]:
    g0 = (2 / 9) ** (-1 / 6) * math.gamma(1 / 3) / math.gamma(1 / 6)
    out = [Check("g(0)", {}, float(g(0.0)), abs(g(0.0) / g0 - 1) <= 1e-10, target=g0)]
    z = np.linspace(-5, 5, 201)
    res = harmonicity_residual(z)
    out.append(Check("harmonicity", {"z": [-5, 5]}, float(res.max()), res.max() <= 1e-6,
                     target=1e-6))
    out.append(Check("g(100)/10", {}, float(g(100.0) / 10), 0.95 <= g(100.0) / 10 <= 1.05,
                     target=[0.95, 1.05]))
    asym = (2 / 9) ** (-5 / 6) / 6 * math.exp(-2 * 512 / 9) * 8 ** (-2.5)
    r = float(g(-8.0) / asym)
    out.append(Check("g(-8)/asymptote", {}, r, abs(r - 1) <= 0.1, target=1.0))
    return out


def suite_laws(cfg) -> list[Check]:
    sim = _sim_config(cfg)
    out = []
    mass = velocity_zero_density_mass(0.3, 0.7)
    out.append(Check("density mass", {"q": 0.3, "p": 0.7}, mass, abs(mass - 1) <= 1e-8,
                     target=1.0))
    half = exit_right_first_prob_at_rest(0.5)
    out.append(Check("exit side q=1/2", {"q": 0.5}, half, abs(half - 0.5) <= 1e-8, target=0.5))
    eps = (1e-4, 1e-6, 1e-8)
    near = [exit_right_first_prob_at_rest(1 - e) for e in eps]
    rate = (1 - near[-1]) / (EXIT_SIDE_EDGE_CONST * eps[-1] ** (1 / 6))
    ok = near[0] < near[1] < near[2] < 1 and abs(rate - 1) <= 1e-3
    out.append(Check("exit side q->1", {"q": 1 - eps[-1]}, near[-1], ok, target=1.0,
                     detail=f"(1-P)/(K (1-q)^(1/6))={rate:.6f}"))
    for j, q in enumerate((0.1, 0.3)):
        est = exit_side_mc(q, sim.replace(seed=sim.seed + j))
        target = exit_right_first_prob_at_rest(q)
        z = est.z_score(target)
        out.append(_est_check("exit side MC", {"q": q}, est, abs(z) <= 3, target,
                              f"z={z:.2f}"))
    zs = simulate_velocity_zero(0.3, 0.7, min(sim.n_paths, 100_000), sim.seed, z_stop=20.0)
    zs = zs[zs <= 20.0]
    f20 = velocity_zero_position_cdf(0.3, 0.7, 20.0)
    ks = kstest(zs, lambda x: velocity_zero_position_cdf(0.3, 0.7, x) / f20)
    out.append(Check("velocity-zero KS", {"q": 0.3, "p": 0.7}, float(ks.statistic),
                     ks.pvalue > 0.01, detail=f"pvalue={ks.pvalue:.3g}"))
    return out


def exit_side_mc(q: float, sim: SimConfig, chunk_horizon: float = 50.0) -> Estimate:
    """Fraction of IBM paths from (q, 0) leaving through q = 1 (run until exit)."""
    b = simulate_paths(IBM(), q, 0.0, sim.replace(t_horizon=chunk_horizon))
    if not b.exited.all():
        raise RuntimeError(f"{int((~b.exited).sum())} paths still alive at t={chunk_horizon}")
    return Estimate.bernoulli(int(np.count_nonzero(b.side == 1)), len(b))


def suite_identities(cfg) -> list[Check]:
    sim = _sim_config(cfg)
    out = []
    for r in (scaling_identity((0.3, 0.5), 1.0, 0.7, sim),
              sign_flip_identity((0.3, 0.5), 1.0, sim),
              sigma_rescaling_identity((0.3, 0.5), 1.0, 2.0, sim),
              martingale_check((0.5, 0.0), 1.0, sim),
              martingale_check((0.5, 0.0), 1.0, sim, reflected=True)):
        rhs = r.rhs.mean if isinstance(r.rhs, Estimate) else r.rhs
        out.append(_est_check(r.name, {"dt": sim.dt}, r.lhs, r.passed, rhs, f"z={r.z:.2f}"))
    return out


GIRSANOV_SETS = (
    (1.0, 0.5, 0.5, 1.0),
    (0.0, 0.0, -0.5, 1.0),
    (2.0, -1.0, 1.0, 1.5),
    (0.5, 1.0, 0.0, 1.0),
    (0.0, -0.5, 0.3, 0.8),
)


def suite_girsanov(cfg) -> list[Check]:
    sim = _sim_config(cfg)
    out = []
    for j, prm in enumerate(GIRSANOV_SETS):
        params = ModelParams(*prm)
        direct = exit_prob_mc(Linear(params), (0.5, 0.0), 1.0, sim.replace(seed=sim.seed + 2 * j))
        rew = exit_prob_girsanov(params, (0.5, 0.0), 1.0, sim.replace(seed=sim.seed + 2 * j + 1))
        z = direct.z_score(rew)
        out.append(_est_check("direct vs reweighted", {"params": list(prm)}, rew, abs(z) <= 3,
                              direct.mean, f"z={z:.2f} ess={rew.ess:.0f}"))
    params = ModelParams(*GIRSANOV_SETS[0])
    ez = girsanov_mean_unkilled(params, (0.5, 0.0), 1.0, sim)
    z = ez.z_score(1.0)
    out.append(_est_check("E[Z] unkilled", {"params": list(GIRSANOV_SETS[0])}, ez,
                          abs(z) <= 3, 1.0, f"z={z:.2f}"))
    return out


def girsanov_mean_unkilled(params: ModelParams, start, t: float, sim: SimConfig) -> Estimate:
    q0, p0 = start
    b = simulate_paths(IBM(params.sigma), q0, p0, sim.replace(t_horizon=t), domain="free",
                       with_weight=True)
    lw = girsanov_log_weight_endpoint(params, q0, p0, b.q, b.p, b.time, b.int_p2, b.int_q2,
                                      b.int_q)
    return Estimate.sample(np.exp(lw))


def suite_tail(cfg) -> list[Check]:
    sim = _sim_config(cfg).replace(dt=0.05)
    fit = tail_exponent_fit((1.0, 0.0), [10, 20, 40, 80], sim)
    pref = fit.prefactor / math.exp(fit.target_intercept)
    return [Check("tail slope", {"t": [10, 80]}, fit.slope, abs(fit.slope + 0.25) <= 0.03,
                  target=-0.25, n=sim.n_paths, detail=f"r2={fit.r2:.4f}"),
            Check("tail prefactor ratio", {}, pref, abs(pref - 1) <= 0.1, target=1.0,
                  n=sim.n_paths)]


def suite_holder(cfg) -> list[Check]:
    sim = _sim_config(cfg)
    fit = holder_exponent_fit(1.0, np.geomspace(1e-4, 1e-1, 7), sim)
    return [Check("holder slope", {"q": [1e-4, 1e-1]}, fit.slope,
                  abs(fit.slope - 1 / 6) <= 0.02, target=1 / 6, n=sim.n_paths,
                  detail=f"r2={fit.r2:.4f}")]


def suite_ratio(cfg) -> list[Check]:
    sim = _sim_config(cfg)
    kind = _kind(cfg)
    out = []
    grid = standard_grid(3)
    a = ratio_scan(kind, 1.0, grid, sim)
    b = ratio_scan(kind, 1.0, grid, sim, paths_offset=sim.n_paths)
    ab = merge_tables(a, b)
    out.append(Check("ratio spread", {"model": cfg["model"]}, a.spread,
                     math.isfinite(a.spread), n=sim.n_paths,
                     detail=f"min={a.ratio_min:.4g} max={a.ratio_max:.4g}"))
    conf = a.confident
    ok = all(r.ratio_ci[0] > 0 and math.isfinite(r.ratio_ci[1]) for r in conf)
    out.append(Check("ratio CIs exclude 0 and inf", {}, float(len(conf)), ok,
                     n=sim.n_paths, detail=f"{len(conf)}/{len(a.points)} confident points"))
    shift = compare_extremes(a, ab)
    for k, (x, y, z) in shift.items():
        out.append(Check(f"ratio {k} under doubling", {}, y, z <= 2, target=x,
                         detail=f"shift={z:.2f} SE"))
    wide = ratio_scan(kind, 1.0, standard_grid(6), sim)
    shift = compare_extremes(a, wide)
    for k, (x, y, z) in shift.items():
        out.append(Check(f"ratio {k} with |p|<=6", {}, y, z <= 2, target=x,
                         detail=f"shift={z:.2f} SE"))
    return out


def suite_qsd(cfg) -> list[Check]:
    sim = _sim_config(cfg)
    params = _params(cfg)
    run = fleming_viot_run(params, cfg["n_particles"], cfg["t_max"], sim, (0.2, 0.0),
                           snapshot_every=0.02)
    fv = run.stationary_rate()
    reg = survival_regression(params, sim)
    gap = abs(reg.lambda0_hat - fv.mean) / fv.mean
    shape = qsd_density_estimate(run, params)
    return [_est_check("fv kill rate", {"t_max": cfg["t_max"]}, fv, run.rate_drift() <= 0.05,
                       detail=f"drift={run.rate_drift():.4f}"),
            Check("lambda0 regression vs fv", {}, reg.lambda0_hat, gap <= 0.05, reg.stderr,
                  target=fv.mean, n=sim.n_paths, detail=f"gap={gap:.4f}"),
            Check("qsd envelope spread", {}, shape.spread, shape.spread <= 10,
                  target=10, n=int(shape.counts.sum()))]


SUITES = {
    "specfun": suite_specfun,
    "laws": suite_laws,
    "identities": suite_identities,
    "girsanov": suite_girsanov,
    "tail": suite_tail,
    "holder": suite_holder,
    "ratio": suite_ratio,
    "qsd": suite_qsd,
}


def cmd_verify(args, cfg, digest) -> int:
    checks = SUITES[cfg["suite"]](cfg)
    out = _Output(args.out, "verify", digest, cfg["seed"])
    for c in checks:
        rec = make_record(cfg["suite"], c.op, c.inputs, c.estimate, c.stderr, c.ci, c.n,
                          cfg["seed"], digest, passed=c.passed, target=c.target)
        out.buf.write(record_line(rec))
    table = [f"{'check':<32} {'value':>14} {'target':>14}  result"]
    for c in checks:
        tgt = "" if c.target is None else (f"{c.target:.6g}" if isinstance(c.target, float)
                                           else str(c.target))
        table.append(f"{c.op:<32} {c.estimate:>14.6g} {tgt:>14}  "
                     f"{'PASS' if c.passed else 'FAIL'} {c.detail}".rstrip())
    if args.out:
        out.close()
        print("\n".join(table))
    else:
        print("\n".join(table), file=sys.stderr)
        out.close()
    return 0 if all(c.passed for c in checks) else 1


# --------------------------------------------------------------------------
# qsd and tv-decay
# --------------------------------------------------------------------------

def cmd_qsd(args, cfg, digest) -> int:
    sim = _sim_config(cfg)
    params = _params(cfg)
    init = _point(cfg["theta1"])
    run = fleming_viot_run(params, cfg["n_particles"], cfg["t_max"], sim, init,
                           snapshot_every=args.snapshot_every)
    fv = run.stationary_rate()
    reg = survival_regression(params, sim, init)
    shape = qsd_density_estimate(run, params)
    out = _Output(args.out, "qsd", digest, cfg["seed"])
    seed = cfg["seed"]
    out.buf.write(record_line(make_record(
        "qsd", "fv_kill_rate", {"init": list(init), "window": list(run.window_bounds())},
        fv.mean, fv.std_err, [fv.ci_lo, fv.ci_hi], cfg["n_particles"], seed, digest,
        drift=run.rate_drift())))
    out.buf.write(record_line(make_record(
        "qsd", "lambda0_regression", {"init": list(init), "window": list(reg.window)},
        reg.lambda0_hat, reg.stderr, None, sim.n_paths, seed, digest, r2=reg.r2)))
    out.buf.write(record_line(make_record(
        "qsd", "envelope_ratio", {"bins": 50, "p_max": 4.0, "min_hits": shape.min_hits},
        shape.spread, None, [shape.ratio_min, shape.ratio_max], int(shape.counts.sum()),
        seed, digest)))
    if args.hist_csv:
        path = Path(args.hist_csv)
        qe, pe = shape.q_edges, shape.p_edges
        rows = ((qe[i], qe[i + 1], pe[j], pe[j + 1], shape.counts[i, j], shape.density[i, j],
                 shape.envelope[i, j]) for i in range(len(qe) - 1) for j in range(len(pe) - 1))
        with open(path, "w", newline="") as f:
            write_csv(f, ["q_lo", "q_hi", "p_lo", "p_hi", "count", "density", "envelope"], rows)
        out.extra.append(path)
    out.close()
    return 0


def cmd_tv_decay(args, cfg, digest) -> int:
    sim = _sim_config(cfg)
    ts = [float(x) for x in cfg["checkpoints"].split(",")]
    th1, th2 = _point(cfg["theta1"]), _point(cfg["theta2"])
    pts = conditional_tv_decay(_params(cfg), th1, th2, ts, sim,
                               min_survivors=args.min_survivors)
    out = _Output(args.out, "tv-decay", digest, cfg["seed"])
    for pt in pts:
        out.buf.write(record_line(make_record(
            "tv-decay", "binned_tv", {"t": pt.t, "theta1": list(th1), "theta2": list(th2)},
            pt.tv, None, None, min(pt.survivors), cfg["seed"], digest,
            noise_floor=pt.noise_floor, survivors=list(pt.survivors))))
    out.close()
    return 0


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------

REPORT_HEADER = ["suite", "op", "inputs", "estimate", "stderr", "ci_lo", "ci_hi", "n", "seed",
                 "manifest_digest"]


def merge_records(paths) -> list[dict]:
    """Load JSONL result files, refusing conflicting digests within a suite."""
    recs = []
    seen: dict[str, str] = {}
    for path in paths:
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            r = json.loads(line)
            prev = seen.setdefault(r["suite"], r["manifest_digest"])
            if prev != r["manifest_digest"]:
                raise ConfigError(f"suite {r['suite']!r}: conflicting config digests "
                                  f"{prev} and {r['manifest_digest']}")
            recs.append(r)
    return recs


def cmd_report(args, cfg, digest) -> int:
    recs = merge_records(args.inputs)
    out = _Output(args.out, "report", digest, cfg["seed"])

    def rows():
        for r in recs:
            ci = r.get("ci") or [None, None]
            yield [r["suite"], r["op"], json.dumps(r["inputs"], sort_keys=True),
                   "" if r["estimate"] is None else r["estimate"],
                   "" if r["stderr"] is None else r["stderr"],
                   "" if ci[0] is None else ci[0], "" if ci[1] is None else ci[1],
                   "" if r["n"] is None else r["n"], r["seed"], r["manifest_digest"]]

    write_csv(out.buf, REPORT_HEADER, rows())
    out.close()
    return 0


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}\n\n{schema_help()}", file=sys.stderr)
        raise SystemExit(2)


def _add_common(sp, keys):
    sp.add_argument("--config", help="flat key = value config file")
    sp.add_argument("--out", help="output file (default: stdout)")
    for k in keys:
        tp = SCHEMA[k][0]
        flag = "--" + k.replace("_", "-")
        sp.add_argument(flag, dest=k, type=tp, default=None, help=SCHEMA[k][2])
    if "n_paths" in keys:
        sp.add_argument("--paths", dest="n_paths", type=int, default=None,
                        help="alias of --n-paths")
    if "t_horizon" in keys:
        sp.add_argument("--t", dest="t_horizon", type=float, default=None,
                        help="alias of --t-horizon")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="kinetic-exit", description=__doc__.split("\n")[0],
                 epilog=schema_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    model = ["model", "alpha", "beta", "gamma", "sigma", "eta"]

    sp = sub.add_parser("eval", help="tabulate a closed-form function")
    _add_common(sp, model + ["q", "seed"])
    sp.add_argument("--fn", required=True, choices=EVAL_FNS)
    sp.add_argument("--from", dest="from_", type=float, required=True)
    sp.add_argument("--to", type=float, required=True)
    sp.add_argument("--step", type=float, required=True)
    sp.add_argument("--a", type=float, default=1 / 6, help="kummer_u parameter a")
    sp.add_argument("--b", type=float, default=4 / 3, help="kummer_u parameter b")

    sp = sub.add_parser("exit-prob", help="single-point survival estimate")
    _add_common(sp, model + list(SIM_KEYS) + ["q", "p", "method"])

    sp = sub.add_parser("verify", help="run a verification suite")
    _add_common(sp, model + list(SIM_KEYS) + ["suite", "n_particles", "t_max"])

    sp = sub.add_parser("qsd", help="Fleming-Viot run, decay rate and QSD histogram")
    _add_common(sp, model + list(SIM_KEYS) + ["n_particles", "t_max", "theta1"])
    sp.add_argument("--hist-csv", help="write the QSD histogram here")
    sp.add_argument("--snapshot-every", type=float, default=0.02)

    sp = sub.add_parser("tv-decay", help="TV distance between conditioned laws")
    _add_common(sp, model + list(SIM_KEYS) + ["theta1", "theta2", "checkpoints"])
    sp.add_argument("--min-survivors", type=int, default=10_000)

    sp = sub.add_parser("report", help="merge result files into one CSV table")
    sp.add_argument("inputs", nargs="+")
    sp.add_argument("--out")
    sp.set_defaults(config=None)
    return ap


def effective_config(args) -> dict[str, object]:
    cfg = {k: v[1] for k, v in SCHEMA.items()}
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config: {e}") from e
        cfg.update(parse_config_text(text))
    for k in SCHEMA:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    if cfg["model"] not in ("ibm", "linear", "eta"):
        raise ConfigError(f"unknown model {cfg['model']!r}")
    if cfg["suite"] not in SUITES:
        raise ConfigError(f"unknown suite {cfg['suite']!r}; choose from {sorted(SUITES)}")
    return cfg


COMMANDS = {
    "eval": cmd_eval,
    "exit-prob": cmd_exit_prob,
    "verify": cmd_verify,
    "qsd": cmd_qsd,
    "tv-decay": cmd_tv_decay,
    "report": cmd_report,
}


def main(argv=None) -> int:
    _START[0] = time.perf_counter()
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = effective_config(args)
        digest = config_digest({"command": args.command, **cfg})
        _sim_config(cfg)
        _params(cfg)
        return COMMANDS[args.command](args, cfg, digest)
    except (ConfigError, ValueError) as e:
        print(f"kinetic-exit: configuration error: {e}\n\n{schema_help()}", file=sys.stderr)
        return 2
    except (InsufficientSampleError, WindowError, ExtinctionError,
            InsufficientDecayError) as e:
        # the run is too small or too coarse for the requested estimate
        print(f"kinetic-exit: {type(e).__name__}: {e}\n\n{schema_help()}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
