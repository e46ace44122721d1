"""Monte Carlo survival estimates, envelope ratio scans and exponent fits.

Every estimator is a deterministic function of ``(seed, config, params)``.
Grid scans give each grid point its own block of path indices, so a scan
with ``2n`` paths contains the scan with ``n`` paths as its first half.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .dynamics import IBM, Linear, SimConfig, _as_params, girsanov_log_weight_endpoint, simulate_paths
from .specfun import (
    LONG_TIME_PREFACTOR,
    ModelParams,
    PhaseState,
    envelope_G,
    envelope_H,
    envelope_Hfull,
    h,
)

__all__ = [
    "Estimate",
    "RatioPoint",
    "RatioTable",
    "TailFit",
    "IdentityResult",
    "InsufficientDecayError",
    "WeightDegeneracyWarning",
    "SUCCESS_FLOOR",
    "GRID_BLOCK",
    "standard_grid",
    "horizon_config",
    "exit_prob_mc",
    "exit_prob_girsanov",
    "ratio_scan",
    "eta_ratio_scan",
    "compare_extremes",
    "merge_tables",
    "tail_exponent_fit",
    "holder_exponent_fit",
    "martingale_check",
    "scaling_identity",
    "sign_flip_identity",
    "sigma_rescaling_identity",
]

SUCCESS_FLOOR = 25
# path-index block reserved for each grid point
GRID_BLOCK = 1 << 32


class InsufficientDecayError(RuntimeError):
    """Survival estimates along a fit grid are statistically indistinguishable."""


class WeightDegeneracyWarning(RuntimeWarning):
    """Importance weights have an effective sample size below 1% of the paths."""


@dataclass(frozen=True)
class Estimate:
    """Monte Carlo scalar with standard error and confidence interval."""

    mean: float
    std_err: float
    n_paths: int
    ci_lo: float
    ci_hi: float
    ci_level: float = 0.99
    ess: float | None = None

    def __post_init__(self):
        if not (self.ci_lo <= self.mean <= self.ci_hi):
            raise ValueError("confidence interval must contain the mean")
        if self.std_err < 0:
            raise ValueError("negative standard error")

    @classmethod
    def bernoulli(cls, successes: int, n: int, ci_level: float = 0.99) -> "Estimate":
        """Binomial proportion with a Wilson score interval."""
        if n < 1:
            raise ValueError("need at least one path")
        m = successes / n
        z = norm.ppf(0.5 + ci_level / 2)
        den = 1 + z * z / n
        mid = (m + z * z / (2 * n)) / den
        half = z * math.sqrt(m * (1 - m) / n + z * z / (4 * n * n)) / den
        lo = max(min(mid - half, m), 0.0)
        hi = min(max(mid + half, m), 1.0)
        return cls(m, math.sqrt(m * (1 - m) / n), n, lo, hi, ci_level)

    @classmethod
    def sample(cls, values, ci_level: float = 0.99, ess: float | None = None) -> "Estimate":
        """Sample mean with a normal-theory interval."""
        v = np.asarray(values, dtype=float)
        n = v.size
        if n < 2:
            raise ValueError("need at least two samples")
        m = float(v.sum() / n)
        se = float(np.sqrt(((v - m) ** 2).sum() / (n - 1) / n))
        z = norm.ppf(0.5 + ci_level / 2)
        return cls(m, se, n, m - z * se, m + z * se, ci_level, ess)

    def z_score(self, other: "Estimate | float") -> float:
        """Difference in units of the combined standard error."""
        if isinstance(other, Estimate):
            se = math.hypot(self.std_err, other.std_err)
            diff = self.mean - other.mean
        else:
            se = self.std_err
            diff = self.mean - other
        if se == 0:
            return 0.0 if diff == 0 else math.copysign(math.inf, diff)
        return diff / se

    def as_dict(self) -> dict:
        d = {"mean": self.mean, "std_err": self.std_err, "n": self.n_paths,
             "ci": [self.ci_lo, self.ci_hi], "ci_level": self.ci_level}
        if self.ess is not None:
            d["ess"] = self.ess
        return d


def horizon_config(config: SimConfig, t: float) -> SimConfig:
    """``config`` with horizon ``t`` (dt shrunk to ``t`` if needed)."""
    return config.replace(t_horizon=t, dt=min(config.dt, t))


def _start(start, domain: str = "strip"):
    q, p = (start.q, start.p) if isinstance(start, PhaseState) else map(float, start)
    if domain == "half_line":
        if not (q > 0 and math.isfinite(q) and math.isfinite(p)):
            raise ValueError("start must have q > 0")
        return _Point(q, p)
    s = PhaseState(q, p)
    if not s.interior:
        raise ValueError("start must be interior")
    return s


@dataclass(frozen=True)
class _Point:
    q: float
    p: float


def exit_prob_mc(kind, start, t: float, config: SimConfig, *, domain: str = "strip",
                 first_index: int = 0) -> Estimate:
    """Survival probability P(tau > t) by direct simulation."""
    s = _start(start, domain)
    b = simulate_paths(kind, s.q, s.p, horizon_config(config, t), domain=domain,
                       first_index=first_index)
    return Estimate.bernoulli(int(np.count_nonzero(b.survived)), len(b))


def exit_prob_girsanov(params: ModelParams, start, t: float, config: SimConfig, *,
                       first_index: int = 0) -> Estimate:
    """Survival of the linear Langevin process from reweighted IBM paths."""
    s = _start(start)
    b = simulate_paths(IBM(params.sigma), s.q, s.p, horizon_config(config, t),
                       with_weight=True, first_index=first_index)
    lw = girsanov_log_weight_endpoint(params, s.q, s.p, b.q, b.p, b.time,
                                      b.int_p2, b.int_q2, b.int_q)
    w = np.where(b.survived, np.exp(np.where(b.survived, lw, 0.0)), 0.0)
    sw2 = float((w * w).sum())
    ess = float(w.sum()) ** 2 / sw2 if sw2 > 0 else 0.0
    if ess < 0.01 * len(b):
        warnings.warn(f"effective sample size {ess:.1f} is below 1% of {len(b)} paths",
                      WeightDegeneracyWarning, stacklevel=2)
    return Estimate.sample(w, ess=ess)


# --------------------------------------------------------------------------
# ratio scans
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RatioPoint:
    q: float
    p: float
    t: float
    estimate: Estimate
    envelope: float

    @property
    def ratio(self) -> float:
        return self.estimate.mean / self.envelope

    @property
    def ratio_se(self) -> float:
        return self.estimate.std_err / self.envelope

    @property
    def ratio_ci(self) -> tuple[float, float]:
        return self.estimate.ci_lo / self.envelope, self.estimate.ci_hi / self.envelope

    @property
    def successes(self) -> int:
        return int(round(self.estimate.mean * self.estimate.n_paths))

    @property
    def low_confidence(self) -> bool:
        return self.successes < SUCCESS_FLOOR


@dataclass
class RatioTable:
    """Per-point ratios P/envelope and their extremes over confident points."""

    points: list[RatioPoint] = field(default_factory=list)

    @property
    def grid(self) -> list[tuple[float, float, float]]:
        return [(r.q, r.p, r.t) for r in self.points]

    @property
    def confident(self) -> list[RatioPoint]:
        return [r for r in self.points if not r.low_confidence]

    def _arg(self, fn, among=None):
        pts = self.confident if among is None else [r for r in self.confident
                                                     if (r.q, r.p) in among]
        if not pts:
            raise ValueError("no grid point reaches the success floor")
        return fn(pts, key=lambda r: r.ratio)

    def argmin(self, among=None) -> RatioPoint:
        return self._arg(min, among)

    def argmax(self, among=None) -> RatioPoint:
        return self._arg(max, among)

    @property
    def ratio_min(self) -> float:
        return self.argmin().ratio

    @property
    def ratio_max(self) -> float:
        return self.argmax().ratio

    @property
    def spread(self) -> float:
        return self.ratio_max / self.ratio_min

    def lookup(self, q: float, p: float) -> RatioPoint:
        for r in self.points:
            if math.isclose(r.q, q, abs_tol=1e-12) and math.isclose(r.p, p, abs_tol=1e-12):
                return r
        raise KeyError((q, p))

    def rows(self):
        for r in self.points:
            lo, hi = r.ratio_ci
            yield {"q": r.q, "p": r.p, "t": r.t, "estimate": r.estimate.mean,
                   "stderr": r.estimate.std_err, "n": r.estimate.n_paths,
                   "envelope": r.envelope, "ratio": r.ratio, "ratio_lo": lo, "ratio_hi": hi,
                   "low_confidence": r.low_confidence}


def standard_grid(p_max: int = 3) -> list[tuple[float, float]]:
    """q in {0.05, 0.15, ..., 0.95} times integer p in [-p_max, p_max]."""
    qs = [round(0.05 + 0.1 * i, 2) for i in range(10)]
    return [(q, float(p)) for q in qs for p in range(-p_max, p_max + 1)]


def _grid_index(q: float, p: float) -> int:
    # stable block index so a point draws the same paths in any grid
    return int(round(q * 1000)) * 100_000 + int(round(p * 100)) + 50_000


def _envelope_for(kind):
    if isinstance(kind, IBM):
        s23 = kind.sigma ** (2 / 3)
        return lambda q, p: float(envelope_H(q, p / s23))
    params = _as_params(kind)
    return lambda q, p: float(envelope_Hfull(params, q, p))


def ratio_scan(kind, t: float, grid, config: SimConfig, *, envelope=None,
               paths_offset: int = 0) -> RatioTable:
    """P(tau > t) / envelope over ``grid`` of (q, p) points.

    The envelope defaults to ``H(q, p / sigma^{2/3})`` for :class:`IBM` and
    to ``H_full`` for :class:`Linear`.  ``paths_offset`` shifts the path
    indices inside each point's block, so two scans with offsets 0 and n
    use disjoint paths.
    """
    env = envelope or _envelope_for(kind)
    table = RatioTable()
    for q, p in grid:
        first = _grid_index(q, p) * GRID_BLOCK + paths_offset
        est = exit_prob_mc(kind, (q, p), t, config, first_index=first)
        table.points.append(RatioPoint(q, p, t, est, env(q, p)))
    return table


def eta_ratio_scan(eta: float, sigma: float, t: float, grid, config: SimConfig, *,
                   paths_offset: int = 0) -> RatioTable:
    """Ratio scan of the eta-process against ``envelope_G(eta, sigma)``."""
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    kind = Linear(ModelParams.eta_process(eta, sigma))
    return ratio_scan(kind, t, grid, config, paths_offset=paths_offset,
                      envelope=lambda q, p: float(envelope_G(eta, sigma, q, p)))


def merge_tables(a: RatioTable, b: RatioTable) -> RatioTable:
    """Pool two scans over the same grid drawn from disjoint paths."""
    out = RatioTable()
    for ra, rb in zip(a.points, b.points):
        if (ra.q, ra.p, ra.t) != (rb.q, rb.p, rb.t):
            raise ValueError("tables are on different grids")
        n = ra.estimate.n_paths + rb.estimate.n_paths
        k = ra.successes + rb.successes
        out.points.append(RatioPoint(ra.q, ra.p, ra.t, Estimate.bernoulli(k, n), ra.envelope))
    return out


def compare_extremes(a: RatioTable, b: RatioTable) -> dict:
    """Shift of the ratio extremes between two scans, in combined SE units.

    Extremes are taken over the points that are confident in both tables.
    """
    common = {(r.q, r.p) for r in a.confident} & {(r.q, r.p) for r in b.confident}
    out = {}
    for name, fn in (("min", "argmin"), ("max", "argmax")):
        ra = getattr(a, fn)(common)
        rb = getattr(b, fn)(common)
        se = math.hypot(ra.ratio_se, rb.ratio_se)
        out[name] = (ra.ratio, rb.ratio, abs(ra.ratio - rb.ratio) / se if se > 0 else 0.0)
    return out


# --------------------------------------------------------------------------
# exponent fits
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TailFit:
    """Least-squares line log P = intercept + slope * log x."""

    slope: float
    intercept: float
    r2: float
    x: tuple[float, ...]
    estimates: tuple[Estimate, ...]
    target_intercept: float | None = None

    @property
    def prefactor(self) -> float:
        return math.exp(self.intercept)


def _loglog_fit(x, ests, target_intercept=None) -> TailFit:
    ests = tuple(ests)
    m = np.array([e.mean for e in ests])
    if np.any(m <= 0):
        raise InsufficientDecayError("a survival estimate is zero")
    if all(abs(e.z_score(ests[0])) <= 2.576 for e in ests[1:]):
        raise InsufficientDecayError("all estimates agree within their CI")
    lx = np.log(np.asarray(x, dtype=float))
    ly = np.log(m)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (intercept + slope * lx)
    ss = ((ly - ly.mean()) ** 2).sum()
    r2 = 1 - (resid ** 2).sum() / ss if ss > 0 else 1.0
    return TailFit(float(slope), float(intercept), float(r2), tuple(float(v) for v in x), ests,
                   target_intercept)


def tail_exponent_fit(start, t_list, config: SimConfig, *, sigma: float = 1.0) -> TailFit:
    """Fit of the half-line survival P(tau_0 > t) ~ c t^slope.

    One run to ``max(t_list)`` is read off at every ``t``.  The target
    intercept is ``log(LONG_TIME_PREFACTOR * h(q, p / sigma^{2/3}))``.
    """
    s = _start(start, "half_line")
    ts = sorted(float(t) for t in t_list)
    b = simulate_paths(IBM(sigma), s.q, s.p, horizon_config(config, ts[-1]),
                       domain="half_line")
    tau = np.where(b.exited, b.time, np.inf)
    ests = [Estimate.bernoulli(int(np.count_nonzero(tau > t)), len(b)) for t in ts]
    target = math.log(LONG_TIME_PREFACTOR * float(h(s.q, s.p / sigma ** (2 / 3))))
    # P ~ C h(q, p/s^{2/3}) (s^{2/3} t)^{-1/4}
    target -= 0.25 * math.log(sigma ** (2 / 3))
    return _loglog_fit(ts, ests, target)


def holder_exponent_fit(t: float, q_list, config: SimConfig, *, kind=None,
                        right: bool = False) -> TailFit:
    """Fit of log P(tau > t) against log(distance to the wall) at p = 0.

    ``right=True`` starts from ``(1 - q, 0)``.
    """
    kind = kind or IBM()
    qs = [float(q) for q in q_list]
    ests = []
    for j, q in enumerate(qs):
        q0 = 1 - q if right else q
        ests.append(exit_prob_mc(kind, (q0, 0.0), t, config, first_index=j * GRID_BLOCK))
    return _loglog_fit(qs, ests)


# --------------------------------------------------------------------------
# exact-in-law identities
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class IdentityResult:
    name: str
    lhs: Estimate
    rhs: Estimate | float
    z: float
    tol: float = 3.0

    @property
    def passed(self) -> bool:
        return abs(self.z) <= self.tol


def martingale_check(start, t: float, config: SimConfig, *, sigma: float = 1.0,
                     reflected: bool = False) -> IdentityResult:
    """Optional stopping for the harmonic function h of IBM.

    Estimates E[h(q, p)] at ``t`` wedge the exit time (h at the walls by its
    boundary limits) and compares with h at the start.  With
    ``reflected=True`` the function is ``h(1 - q, -p)``.
    """
    s = _start(start)
    s23 = sigma ** (2 / 3)
    b = simulate_paths(IBM(sigma), s.q, s.p, horizon_config(config, t))
    sign = -1.0 if reflected else 1.0
    v = np.zeros(len(b))
    alive = b.survived
    qa = b.q[alive]
    v[alive] = h(1 - qa if reflected else qa, sign * b.p[alive] / s23)
    # the wall where h does not vanish: q = 1 for h, q = 0 for the reflection
    far = b.exited & (b.side == (0 if reflected else 1))
    v[far] = h(1.0, np.maximum(sign * b.p[far], 0.0) / s23)
    q0 = 1 - s.q if reflected else s.q
    h0 = float(h(q0, sign * s.p / s23))
    est = Estimate.sample(v)
    name = "optional stopping (reflected)" if reflected else "optional stopping"
    return IdentityResult(name, est, h0, est.z_score(h0))


def scaling_identity(start, t: float, lam: float, config: SimConfig) -> IdentityResult:
    """P_(lam^3 q, lam p)(tau_0 > lam^2 t) = P_(q, p)(tau_0 > t) on the half line."""
    s = _start(start, "half_line")
    a = exit_prob_mc(IBM(), (s.q, s.p), t, config, domain="half_line")
    b = exit_prob_mc(IBM(), (lam**3 * s.q, lam * s.p), lam**2 * t,
                     config.replace(dt=config.dt * lam**2), domain="half_line",
                     first_index=GRID_BLOCK)
    return IdentityResult("time scaling", a, b, a.z_score(b))


def sign_flip_identity(start, t: float, config: SimConfig, kind=None) -> IdentityResult:
    """P_(q, p)(tau > t) = P_(1-q, -p)(tau > t) for IBM on the strip."""
    kind = kind or IBM()
    s = _start(start)
    a = exit_prob_mc(kind, s, t, config)
    b = exit_prob_mc(kind, s.reflected(), t, config, first_index=GRID_BLOCK)
    return IdentityResult("sign flip", a, b, a.z_score(b))


def sigma_rescaling_identity(start, t: float, sigma: float, config: SimConfig) -> IdentityResult:
    """P^sigma_(q, p)(tau > t) = P^1_(q, p / sigma^{2/3})(tau > sigma^{2/3} t)."""
    s = _start(start)
    c = sigma ** (2 / 3)
    a = exit_prob_mc(IBM(sigma), s, t, config)
    b = exit_prob_mc(IBM(1.0), (s.q, s.p / c), c * t, config.replace(dt=config.dt * c),
                     first_index=GRID_BLOCK)
    return IdentityResult("sigma rescaling", a, b, a.z_score(b))
