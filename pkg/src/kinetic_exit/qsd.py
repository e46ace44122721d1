"""Quasi-stationary behaviour: Fleming-Viot particles, decay rate, TV decay.

The Fleming-Viot cloud advances all particles by one macro-step of the
killed dynamics, then replaces every killed particle by a copy of a
uniformly chosen survivor.  Respawns are applied in particle-index order
with a generator seeded by ``(seed, step)``, so runs are reproducible and
independent of the worker count.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2

from .dynamics import Linear, SimConfig, _mix, path_keys, simulate_paths
from .estimators import Estimate, RatioTable, horizon_config, ratio_scan
from .specfun import ModelParams, PhaseState, envelope_Hfull

__all__ = [
    "ExtinctionError",
    "WindowError",
    "InsufficientSampleError",
    "ParticleCloud",
    "FVRun",
    "DecayFit",
    "QSDShape",
    "TVPoint",
    "fleming_viot_run",
    "survival_regression",
    "lambda0_estimate",
    "qsd_density_estimate",
    "mirror_symmetry_test",
    "conditional_tv_decay",
    "phi_shape_scan",
    "log_linear_fit",
]


class ExtinctionError(RuntimeError):
    """Every particle was killed within a single macro-step."""


class WindowError(RuntimeError):
    """Too few survivors left in the regression window."""


class InsufficientSampleError(RuntimeError):
    """Not enough samples for a histogram or TV estimate."""


@dataclass
class ParticleCloud:
    q: np.ndarray
    p: np.ndarray
    time: float = 0.0
    kill_count: int = 0

    @property
    def n(self) -> int:
        return self.q.size

    def states(self) -> list[PhaseState]:
        return [PhaseState(float(a), float(b)) for a, b in zip(self.q, self.p)]

    def copy(self) -> "ParticleCloud":
        return ParticleCloud(self.q.copy(), self.p.copy(), self.time, self.kill_count)


def _init_states(init, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Point mass, explicit arrays, or a callable ``(rng, n) -> (q, p)``."""
    if callable(init):
        q, p = init(np.random.default_rng([seed, 0x1417]), n)
    elif isinstance(init, PhaseState):
        q, p = init.q, init.p
    else:
        q, p = init
    q = np.broadcast_to(np.asarray(q, dtype=float), (n,)).copy()
    p = np.broadcast_to(np.asarray(p, dtype=float), (n,)).copy()
    if np.any((q <= 0) | (q >= 1)):
        raise ValueError("initial distribution must be supported in the interior")
    return q, p


@dataclass
class FVRun:
    """Output of :func:`fleming_viot_run`."""

    params: ModelParams
    step: float
    times: np.ndarray          # end time of each macro-step
    kills: np.ndarray          # particles killed in each macro-step
    n: int
    snapshots: list[ParticleCloud] = field(default_factory=list)
    final: ParticleCloud | None = None
    window: float = 0.25

    @property
    def kill_rate(self) -> np.ndarray:
        """Per-step killing rate -log(1 - k/n) / dt."""
        return -np.log1p(-self.kills / self.n) / self.step

    def window_mask(self) -> np.ndarray:
        t_max = self.times[-1]
        return self.times > (1 - self.window) * t_max

    def window_bounds(self) -> tuple[float, float]:
        t_max = float(self.times[-1])
        return (1 - self.window) * t_max, t_max

    def stationary_rate(self, n_batches: int = 10) -> Estimate:
        """Mean kill rate over the window, batch-means standard error."""
        r = self.kill_rate[self.window_mask()]
        batches = np.array([b.mean() for b in np.array_split(r, n_batches)])
        return Estimate.sample(batches)

    def rate_drift(self) -> float:
        """Relative change of the mean kill rate between the window halves."""
        r = self.kill_rate[self.window_mask()]
        a, b = np.array_split(r, 2)
        return float(abs(b.mean() - a.mean()) / r.mean())


def fleming_viot_run(params: ModelParams, n_particles: int, t_max: float, config: SimConfig,
                     init, *, snapshot_every: float | None = None,
                     window: float = 0.25) -> FVRun:
    """Fleming-Viot particle system with macro-step ``config.dt``.

    Snapshots are taken every ``snapshot_every`` time units (default: every
    macro-step) inside the final ``window`` fraction of the run.
    """
    if n_particles < 100:
        raise ValueError("at least 100 particles are required")
    step_cfg = horizon_config(config, config.dt).replace(n_paths=n_particles)
    h = step_cfg.step
    n_steps = max(1, int(round(t_max / h)))
    every = max(1, int(round((snapshot_every or h) / h)))
    t_window = (1 - window) * n_steps * h
    q, p = _init_states(init, n_particles, config.seed)
    kind = Linear(params)
    kills = np.zeros(n_steps, dtype=np.int64)
    times = h * np.arange(1, n_steps + 1)
    run = FVRun(params, h, times, kills, n_particles, window=window)
    total = 0
    for k in range(n_steps):
        keys = path_keys(config.seed, n_particles, first=k * n_particles)
        b = simulate_paths(kind, q, p, step_cfg, keys=keys)
        dead = np.flatnonzero(b.exited)
        alive = np.flatnonzero(~b.exited)
        if alive.size == 0:
            raise ExtinctionError(f"all {n_particles} particles killed in step {k}; "
                                  "reduce dt")
        q, p = b.q.copy(), b.p.copy()
        if dead.size:
            rng = np.random.default_rng([config.seed, k])
            src = alive[rng.integers(alive.size, size=dead.size)]
            q[dead] = q[src]
            p[dead] = p[src]
        kills[k] = dead.size
        total += dead.size
        if times[k] > t_window and (k + 1) % every == 0:
            run.snapshots.append(ParticleCloud(q.copy(), p.copy(), float(times[k]), total))
    run.final = ParticleCloud(q, p, float(times[-1]), total)
    return run


# --------------------------------------------------------------------------
# decay rate
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DecayFit:
    """Principal killing rate from a log-survival regression.

    ``fv_rate`` is the Fleming-Viot kill-rate estimate, when computed.
    """

    lambda0_hat: float
    window: tuple[float, float]
    r2: float
    stderr: float
    fv_rate: float | None = None
    fv_stderr: float | None = None

    def __post_init__(self):
        if not self.window[0] < self.window[1]:
            raise ValueError("window must be increasing")
        if not self.lambda0_hat > 0:
            raise ValueError("decay rate must be positive")

    @property
    def relative_gap(self) -> float | None:
        if self.fv_rate is None:
            return None
        return abs(self.lambda0_hat - self.fv_rate) / self.fv_rate


def log_linear_fit(x, y) -> tuple[float, float, float]:
    """Least-squares line through ``(x, log y)``: (slope, intercept, r2)."""
    x = np.asarray(x, dtype=float)
    ly = np.log(np.asarray(y, dtype=float))
    slope, intercept = np.polyfit(x, ly, 1)
    resid = ly - (intercept + slope * x)
    ss = ((ly - ly.mean()) ** 2).sum()
    r2 = 1 - (resid ** 2).sum() / ss if ss > 0 else 1.0
    return float(slope), float(intercept), float(r2)


def survival_regression(params: ModelParams, config: SimConfig, init=(0.5, 0.0),
                        window: tuple[float, float] = (2.0, 6.0), n_points: int = 21,
                        min_survivors: int = 100) -> DecayFit:
    """Slope of log P(tau > t) over ``window`` from unconditioned paths."""
    t_lo, t_hi = window
    q, p = _init_states(init, config.n_paths, config.seed)
    b = simulate_paths(Linear(params), q, p, horizon_config(config, t_hi))
    tau = np.sort(np.where(b.exited, b.time, np.inf))
    ts = np.linspace(t_lo, t_hi, n_points)
    n_alive = b.exited.size - np.searchsorted(tau, ts, side="right")
    if n_alive[-1] < min_survivors:
        raise WindowError(f"only {n_alive[-1]} survivors at t={t_hi}")
    s = n_alive / b.exited.size
    slope, _, r2 = log_linear_fit(ts, s)
    # delta method on the two window ends
    var = (1 - s[0]) / n_alive[0] + (1 - s[-1]) / n_alive[-1]
    return DecayFit(-slope, (t_lo, t_hi), r2, math.sqrt(var) / (t_hi - t_lo))


def lambda0_estimate(params: ModelParams, config: SimConfig, init=(0.5, 0.0), *,
                     window: tuple[float, float] = (2.0, 6.0), n_particles: int = 10_000,
                     fv_t_max: float = 20.0) -> DecayFit:
    """Survival-regression estimate of the decay rate, with the FV rate attached."""
    fit = survival_regression(params, config, init, window)
    run = fleming_viot_run(params, n_particles, fv_t_max, config, init,
                           snapshot_every=fv_t_max)
    fv = run.stationary_rate()
    return DecayFit(fit.lambda0_hat, fit.window, fit.r2, fit.stderr, fv.mean, fv.std_err)


# --------------------------------------------------------------------------
# QSD shape
# --------------------------------------------------------------------------

def _edges(bins: int, p_max: float):
    return np.linspace(0.0, 1.0, bins + 1), np.linspace(-p_max, p_max, bins + 1)


def _hist(q, p, bins, p_max):
    qe, pe = _edges(bins, p_max)
    return np.histogram2d(q, p, bins=(qe, pe))[0]


def _bin_average(fn, bins: int, p_max: float, sub: int = 5) -> np.ndarray:
    qe, pe = _edges(bins, p_max)
    fq = (np.arange(sub) + 0.5) / sub
    qs = (qe[:-1, None] + np.diff(qe)[:, None] * fq).ravel()
    ps = (pe[:-1, None] + np.diff(pe)[:, None] * fq).ravel()
    Q, P = np.meshgrid(qs, ps, indexing="ij")
    v = fn(Q, P)
    return v.reshape(bins, sub, bins, sub).mean(axis=(1, 3))


@dataclass
class QSDShape:
    """Time-averaged FV histogram against the envelope H_{a,b,-g,s}(q, -p)."""

    counts: np.ndarray
    batch_counts: np.ndarray   # (n_batches, bins, bins) counts per time block
    envelope: np.ndarray       # bin-averaged, normalised to total 1
    q_edges: np.ndarray
    p_edges: np.ndarray
    min_hits: int

    @property
    def density(self) -> np.ndarray:
        return self.counts / self.counts.sum()

    @property
    def populated(self) -> np.ndarray:
        return self.counts >= self.min_hits

    @property
    def ratio(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.density / self.envelope

    @property
    def ratio_min(self) -> float:
        return float(self.ratio[self.populated].min())

    @property
    def ratio_max(self) -> float:
        return float(self.ratio[self.populated].max())

    @property
    def spread(self) -> float:
        return self.ratio_max / self.ratio_min


def qsd_density_estimate(snapshots, params: ModelParams, *, bins: int = 50,
                         p_max: float = 4.0, min_hits: int = 500,
                         n_batches: int = 10) -> QSDShape:
    """Histogram of the snapshot states and its ratio to the QSD envelope."""
    if isinstance(snapshots, FVRun):
        snapshots = snapshots.snapshots
    if len(snapshots) < n_batches:
        raise InsufficientSampleError(f"{len(snapshots)} snapshots < {n_batches} batches")
    batch = np.zeros((n_batches, bins, bins))
    for j, part in enumerate(np.array_split(np.arange(len(snapshots)), n_batches)):
        for i in part:
            batch[j] += _hist(snapshots[i].q, snapshots[i].p, bins, p_max)
    counts = batch.sum(axis=0)
    if not np.any(counts >= min_hits):
        raise InsufficientSampleError(f"no bin reaches {min_hits} hits")
    adj = ModelParams(params.alpha, params.beta, -params.gamma, params.sigma)
    env = _bin_average(lambda q, p: envelope_Hfull(adj, q, -p), bins, p_max)
    qe, pe = _edges(bins, p_max)
    return QSDShape(counts, batch, env / env.sum(), qe, pe, min_hits)


def mirror_symmetry_test(shape: QSDShape, level: float = 0.01, min_pair: int = 20):
    """Chi-square test that bin (i, j) and its mirror (1-q, -p) agree.

    Snapshots are serially correlated and FV copies are clustered, so the
    statistic is divided by a design effect estimated from the time-block
    variance of the mirror differences (first-order Rao-Scott correction).
    Returns ``(statistic, dof, p_value, design_effect)``.
    """
    c = shape.counts
    m = c[::-1, ::-1]
    d_batch = shape.batch_counts - shape.batch_counts[:, ::-1, ::-1]
    nb = d_batch.shape[0]
    # one entry per unordered pair {b, mirror(b)}: flat index below its mirror's
    f = np.arange(c.size).reshape(c.shape)
    keep = f < c.size - 1 - f
    tot = c + m
    use = keep & (tot >= min_pair)
    d = (c - m)[use]
    var_naive = tot[use]
    var_batch = nb * d_batch[:, use].var(axis=0, ddof=1)
    deff = max(1.0, float(var_batch.sum() / var_naive.sum()))
    stat = float((d * d / var_naive).sum() / deff)
    dof = int(use.sum())
    return stat, dof, float(chi2.sf(stat, dof)), deff


# --------------------------------------------------------------------------
# conditional TV decay
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TVPoint:
    t: float
    tv: float
    noise_floor: float
    survivors: tuple[int, int]


def _tv(a: np.ndarray, b: np.ndarray) -> float:
    return 0.5 * float(np.abs(a / a.sum() - b / b.sum()).sum())


def _noise_floor(c1: np.ndarray, c2: np.ndarray, rng, n_boot: int) -> float:
    """Mean binned TV between two multinomial samples from the pooled law."""
    pooled = (c1 + c2).ravel()
    pooled = pooled / pooled.sum()
    n1, n2 = int(c1.sum()), int(c2.sum())
    vals = [_tv(rng.multinomial(n1, pooled), rng.multinomial(n2, pooled))
            for _ in range(n_boot)]
    return float(np.mean(vals))


def _conditioned_hists(params, init, t_checkpoints, config, bins, p_max, stream,
                       chunk=1_000_000):
    """Histograms of surviving states at each checkpoint (no respawn)."""
    kind = Linear(params)
    ts = list(t_checkpoints)
    hists = np.zeros((len(ts), bins, bins))
    alive = np.zeros(len(ts), dtype=np.int64)
    n = config.n_paths
    base_seed = int(_mix(np.uint64(config.seed) + np.uint64(stream)))
    for c0 in range(0, n, chunk):
        m = min(chunk, n - c0)
        q, p = _init_states(init, m, config.seed + c0)
        idx = np.arange(m)
        t_prev = 0.0
        for k, t in enumerate(ts):
            cfg = horizon_config(config, t - t_prev)
            keys = path_keys(base_seed + k, m, first=c0)[idx]
            b = simulate_paths(kind, q, p, cfg, keys=keys)
            s = b.survived
            idx, q, p = idx[s], b.q[s], b.p[s]
            hists[k] += _hist(q, p, bins, p_max)
            alive[k] += idx.size
            t_prev = t
            if idx.size == 0:
                break
    return hists, alive


def conditional_tv_decay(params: ModelParams, theta1, theta2, t_checkpoints,
                         config: SimConfig, *, bins: int = 50, p_max: float = 4.0,
                         n_boot: int = 200, min_survivors: int = 10_000) -> list[TVPoint]:
    """Binned TV distance between the two conditioned laws at each checkpoint.

    Each initial law gets ``config.n_paths`` independent paths; killed
    paths are discarded, so the survivors sample the conditioned law
    exactly.  ``theta1 == theta2`` still uses independent paths.
    """
    ts = list(t_checkpoints)
    if any(b <= a for a, b in zip(ts, ts[1:])) or ts[0] <= 0:
        raise ValueError("checkpoints must be positive and increasing")
    h1, a1 = _conditioned_hists(params, theta1, ts, config, bins, p_max, stream=1)
    h2, a2 = _conditioned_hists(params, theta2, ts, config, bins, p_max, stream=2)
    out = []
    for k, t in enumerate(ts):
        if min(a1[k], a2[k]) < min_survivors:
            raise InsufficientSampleError(
                f"{min(a1[k], a2[k])} survivors at t={t} < {min_survivors}")
        rng = np.random.default_rng([config.seed, k, 0x7D])
        out.append(TVPoint(t, _tv(h1[k], h2[k]), _noise_floor(h1[k], h2[k], rng, n_boot),
                           (int(a1[k]), int(a2[k]))))
    return out


# --------------------------------------------------------------------------
# principal eigenfunction shape
# --------------------------------------------------------------------------

def phi_shape_scan(params: ModelParams, t: float, lambda0: float, grid,
                   config: SimConfig, *, paths_offset: int = 0) -> RatioTable:
    """Ratios e^{lambda0 t} P(tau > t) / H_full over a start grid."""
    scale = math.exp(-lambda0 * t)
    return ratio_scan(Linear(params), t, grid, config, paths_offset=paths_offset,
                      envelope=lambda q, p: scale * float(envelope_Hfull(params, q, p)))
