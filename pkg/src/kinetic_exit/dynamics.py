"""Exact Gaussian transitions and killed path simulation.

The linear dynamics dq = p dt, dp = -(alpha q + beta) dt - gamma p dt + sigma dB
have Gaussian transitions, so every accepted step is drawn from the exact
law.  The only approximation is exit detection between grid points: the
position is reconstructed by cubic Hermite interpolation, and steps that
come close to a boundary are discarded and re-simulated as two half steps
with fresh noise (down to ``max_refine_depth`` halvings).  The refinement
decision only looks at noise that is then thrown away, so the accepted
grid values keep their exact joint law.

Randomness is counter based: path ``i`` under seed ``s`` draws from a hash
of ``(s, i, counter)``, so a path's trajectory does not depend on how paths
are split into batches or across threads.
"""
from __future__ import annotations

import functools
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.linalg import expm

from .specfun import ModelParams, PhaseState

__all__ = [
    "SimConfig",
    "IBM",
    "Linear",
    "ExitOutcome",
    "PathWeight",
    "PathBatch",
    "transition_moments",
    "ibm_transition",
    "linear_langevin_transition",
    "simulate_paths",
    "simulate_until_exit",
    "girsanov_log_weight_endpoint",
    "simulate_velocity_zero",
    "path_keys",
    "worker_count",
]

# Steps whose Hermite interpolant comes within HERMITE_MARGIN * sigma * h^{3/2}
# of a boundary are refined.  The conditional std of the position bridge is
# at most sigma h^{3/2} / sqrt(192) ~ 0.072 sigma h^{3/2}, so the margin is ~7 std.
HERMITE_MARGIN = 0.5


class ConfigError(ValueError):
    """Invalid simulation configuration."""


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.01
    t_horizon: float = 1.0
    n_paths: int = 100_000
    seed: int = 0
    refine_threshold: float = 0.1
    max_refine_depth: int = 6

    def __post_init__(self):
        vals = (self.dt, self.t_horizon, self.refine_threshold)
        if not all(math.isfinite(v) for v in vals):
            raise ConfigError("non-finite configuration value")
        if self.dt <= 0 or self.t_horizon <= 0:
            raise ConfigError("dt and t_horizon must be positive")
        if self.dt > self.t_horizon:
            raise ConfigError("dt must not exceed t_horizon")
        if not 0 < self.refine_threshold < 1:
            raise ConfigError("refine_threshold must lie in (0, 1)")
        if self.max_refine_depth < 0 or self.n_paths < 1:
            raise ConfigError("max_refine_depth >= 0 and n_paths >= 1 required")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in 64 unsigned bits")

    def replace(self, **kw) -> "SimConfig":
        return SimConfig(**{**self.__dict__, **kw})

    @property
    def n_steps(self) -> int:
        return max(1, math.ceil(self.t_horizon / self.dt - 1e-9))

    @property
    def step(self) -> float:
        """Base step actually used: the largest dt' <= dt dividing t_horizon."""
        return self.t_horizon / self.n_steps


@dataclass(frozen=True)
class IBM:
    """Integrated Brownian motion with velocity noise ``sigma``."""

    sigma: float = 1.0

    @property
    def params(self) -> ModelParams:
        return ModelParams(sigma=self.sigma)


@dataclass(frozen=True)
class Linear:
    params: ModelParams = field(default_factory=ModelParams)

    @property
    def sigma(self) -> float:
        return self.params.sigma


def _as_params(kind) -> ModelParams:
    if isinstance(kind, ModelParams):
        return kind
    return kind.params


@dataclass(frozen=True)
class ExitOutcome:
    """Result of one path run to the horizon.

    ``exited`` False: ``final_state`` holds the state at the horizon.
    ``exited`` True: ``exit_time``, ``exit_side`` and ``exit_velocity`` are set.
    """

    exited: bool
    final_state: PhaseState | None = None
    exit_time: float | None = None
    exit_side: int | None = None
    exit_velocity: float | None = None


@dataclass(frozen=True)
class PathWeight:
    """Running path integrals used by the Girsanov weight (trapezoid rule)."""

    int_p2: float
    int_q2: float
    int_q: float
    sigma: float
    log_weight: float = 0.0


@dataclass
class PathBatch:
    """Struct-of-arrays result of :func:`simulate_paths`.

    For exited paths ``q`` is the boundary position and ``p`` the
    interpolated exit velocity; ``time`` is the exit time.  For survivors
    ``time`` equals the horizon and ``side`` is -1.
    """

    exited: np.ndarray
    time: np.ndarray
    side: np.ndarray
    q: np.ndarray
    p: np.ndarray
    int_p2: np.ndarray | None = None
    int_q2: np.ndarray | None = None
    int_q: np.ndarray | None = None
    n_transitions: int = 0

    @property
    def survived(self) -> np.ndarray:
        return ~self.exited

    def __len__(self) -> int:
        return self.exited.size


def worker_count() -> int:
    env = os.environ.get("KINETIC_EXIT_WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


# --------------------------------------------------------------------------
# counter-based random numbers
# --------------------------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


@numba.njit(cache=True, inline="always")
def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@numba.njit(cache=True, inline="always")
def _uniform(key, ctr):
    x = _mix(key ^ _mix(ctr * _GOLDEN + np.uint64(0x632BE59BD9B4E019)))
    return ((x >> np.uint64(11)) + 0.5) * (1.0 / 9007199254740992.0)


@numba.njit(cache=True, inline="always")
def _normal_pair(key, ctr):
    u1 = _uniform(key, ctr)
    u2 = _uniform(key, ctr + np.uint64(1))
    r = math.sqrt(-2.0 * math.log(u1))
    return r * math.cos(2.0 * math.pi * u2), r * math.sin(2.0 * math.pi * u2)


@numba.njit(cache=True)
def _keys(seed, first, n):
    out = np.empty(n, dtype=np.uint64)
    base = _mix(np.uint64(seed) ^ np.uint64(0xD1B54A32D192ED03))
    for i in range(n):
        out[i] = _mix(base + _mix(np.uint64(first + i) + np.uint64(1)))
    return out


def path_keys(seed: int, n: int, first: int = 0) -> np.ndarray:
    """Per-path stream keys for paths ``first .. first+n-1``."""
    return _keys(np.uint64(seed), first, n)


# --------------------------------------------------------------------------
# exact transition moments
# --------------------------------------------------------------------------

_GL_X, _GL_W = np.polynomial.legendre.leggauss(24)


def transition_moments(params: ModelParams, h: float):
    """(Phi, offset, Q) with X_{t+h} ~ N(Phi X_t + offset, Q)."""
    a, b, c, s = params.alpha, params.beta, params.gamma, params.sigma
    if params.is_free:
        phi = np.array([[1.0, h], [0.0, 1.0]])
        off = np.zeros(2)
        cov = s**2 * np.array([[h**3 / 3, h**2 / 2], [h**2 / 2, h]])
        return phi, off, cov
    A = np.array([[0.0, 1.0], [-a, -c]])
    phi = expm(A * h)
    nodes = 0.5 * h * (_GL_X + 1.0)
    weights = 0.5 * h * _GL_W
    off = np.zeros(2)
    cov = np.zeros((2, 2))
    for x, w in zip(nodes, weights):
        e = expm(A * x)
        off += w * e[:, 1] * (-b)
        col = e[:, 1] * s
        cov += w * np.outer(col, col)
    return phi, off, cov


def _chol2(cov: np.ndarray) -> np.ndarray:
    l00 = math.sqrt(cov[0, 0])
    l10 = cov[1, 0] / l00
    l11 = math.sqrt(max(cov[1, 1] - l10 * l10, 0.0))
    return np.array([[l00, 0.0], [l10, l11]])


@functools.lru_cache(maxsize=64)
def _tables(params: ModelParams, dt: float, depth: int):
    n = depth + 1
    phi = np.empty((n, 2, 2))
    off = np.empty((n, 2))
    chol = np.empty((n, 2, 2))
    hs = np.empty(n)
    for k in range(n):
        hk = dt / 2**k
        P, o, Q = transition_moments(params, hk)
        phi[k], off[k], chol[k], hs[k] = P, o, _chol2(Q), hk
    return phi, off, chol, hs


def _draw(params: ModelParams, q, p, dt, rng):
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    if not dt > 0:
        raise ConfigError("dt must be positive")
    phi, off, cov = transition_moments(params, dt)
    L = _chol2(cov)
    z = rng.standard_normal((2,) + np.broadcast(q, p).shape)
    qn = phi[0, 0] * q + phi[0, 1] * p + off[0] + L[0, 0] * z[0]
    pn = phi[1, 0] * q + phi[1, 1] * p + off[1] + L[1, 0] * z[0] + L[1, 1] * z[1]
    return qn, pn


def ibm_transition(q, p, dt: float, sigma: float, rng: np.random.Generator):
    """Exact step of dq = p dt, dp = sigma dB (no killing)."""
    return _draw(ModelParams(sigma=sigma), q, p, dt, rng)


def linear_langevin_transition(params: ModelParams, q, p, dt: float, rng: np.random.Generator):
    """Exact step of the linear Langevin SDE (no killing)."""
    return _draw(params, q, p, dt, rng)


# --------------------------------------------------------------------------
# Hermite exit detection
# --------------------------------------------------------------------------

@numba.njit(cache=True, inline="always")
def _cubic(a0, a1, a2, a3, s):
    return ((a3 * s + a2) * s + a1) * s + a0


@numba.njit(cache=True)
def _hermite_breaks(a1, a2, a3, out):
    """Sorted critical points of the cubic inside (0, 1), plus 0 and 1."""
    n = 0
    out[n] = 0.0
    n += 1
    A = 3.0 * a3
    B = 2.0 * a2
    C = a1
    if abs(A) < 1e-300:
        if abs(B) > 1e-300:
            r = -C / B
            if 0.0 < r < 1.0:
                out[n] = r
                n += 1
    else:
        disc = B * B - 4.0 * A * C
        if disc > 0.0:
            sq = math.sqrt(disc)
            qq = -0.5 * (B + math.copysign(sq, B))
            r1 = qq / A
            r2 = C / qq if qq != 0.0 else r1
            if r1 > r2:
                r1, r2 = r2, r1
            if 0.0 < r1 < 1.0:
                out[n] = r1
                n += 1
            if 0.0 < r2 < 1.0 and r2 != r1:
                out[n] = r2
                n += 1
    out[n] = 1.0
    n += 1
    return n


@numba.njit(cache=True)
def _first_crossing(a0, a1, a2, a3, lower, upper, br, nb):
    """Earliest s in [0,1] where the cubic leaves (lower, upper); (-1, -1) if none."""
    for j in range(nb - 1):
        s0 = br[j]
        s1 = br[j + 1]
        v0 = _cubic(a0, a1, a2, a3, s0)
        v1 = _cubic(a0, a1, a2, a3, s1)
        for side in range(2):
            level = lower if side == 0 else upper
            if side == 0:
                hit = v1 <= level
            else:
                hit = v1 >= level
            if not hit:
                continue
            # monotone piece: bisection on f(s) = cubic - level
            lo = s0
            hi = s1
            flo = v0 - level
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                fm = _cubic(a0, a1, a2, a3, mid) - level
                if (fm > 0.0) == (flo > 0.0) and fm != 0.0:
                    lo = mid
                    flo = fm
                else:
                    hi = mid
            return hi, side
    return -1.0, -1


@numba.njit(cache=True, nogil=True)
def _run(keys, q0, p0, n_steps, phi, off, chol, hs, lower, upper, thresh,
         margin, max_depth, want_w, exited, t_out, side_out, q_out, p_out,
         ip2_out, iq2_out, iq_out, work):
    dt = hs[0]
    br = np.empty(4)
    stack = np.empty(max_depth + 2, dtype=np.int64)
    total = 0
    for i in range(keys.size):
        key = keys[i]
        ctr = np.uint64(0)
        q = q0[i]
        p = p0[i]
        t = 0.0
        ip2 = 0.0
        iq2 = 0.0
        iq = 0.0
        done = False
        for _step in range(n_steps):
            stack[0] = 0
            sp = 1
            while sp > 0:
                sp -= 1
                k = stack[sp]
                hk = hs[k]
                z1, z2 = _normal_pair(key, ctr)
                ctr += np.uint64(2)
                total += 1
                qn = phi[k, 0, 0] * q + phi[k, 0, 1] * p + off[k, 0] + chol[k, 0, 0] * z1
                pn = (phi[k, 1, 0] * q + phi[k, 1, 1] * p + off[k, 1]
                      + chol[k, 1, 0] * z1 + chol[k, 1, 1] * z2)
                # |Hermite - chord| <= max(|h p - dq|, |h pn - dq|) / 4
                dq = qn - q
                dev = 0.25 * max(abs(hk * p - dq), abs(hk * pn - dq))
                clear = (min(q, qn) - dev - lower > margin[k]
                         and upper - max(q, qn) - dev > margin[k]
                         and min(q - lower, upper - q) >= thresh * hk / dt)
                if clear:
                    if want_w:
                        ip2 += 0.5 * hk * (p * p + pn * pn)
                        iq2 += 0.5 * hk * (q * q + qn * qn)
                        iq += 0.5 * hk * (q + qn)
                    q = qn
                    p = pn
                    t += hk
                    continue
                a1 = hk * p
                a2 = -3.0 * q - 2.0 * hk * p + 3.0 * qn - hk * pn
                a3 = 2.0 * q + hk * p - 2.0 * qn + hk * pn
                nb = _hermite_breaks(a1, a2, a3, br)
                if k < max_depth:
                    vmin = q
                    vmax = q
                    for j in range(1, nb):
                        v = _cubic(q, a1, a2, a3, br[j])
                        vmin = min(vmin, v)
                        vmax = max(vmax, v)
                    d_start = min(q - lower, upper - q)
                    d_path = min(vmin - lower, upper - vmax)
                    if d_start < thresh * hk / dt or d_path < margin[k]:
                        stack[sp] = k + 1
                        stack[sp + 1] = k + 1
                        sp += 2
                        continue
                s, side = _first_crossing(q, a1, a2, a3, lower, upper, br, nb)
                if side >= 0:
                    exited[i] = True
                    t_out[i] = t + s * hk
                    side_out[i] = side
                    q_out[i] = lower if side == 0 else upper
                    p_out[i] = p + s * (pn - p)
                    done = True
                    break
                if want_w:
                    ip2 += 0.5 * hk * (p * p + pn * pn)
                    iq2 += 0.5 * hk * (q * q + qn * qn)
                    iq += 0.5 * hk * (q + qn)
                q = qn
                p = pn
                t += hk
            if done:
                break
        if not done:
            exited[i] = False
            t_out[i] = t
            side_out[i] = -1
            q_out[i] = q
            p_out[i] = p
        if want_w:
            ip2_out[i] = ip2
            iq2_out[i] = iq2
            iq_out[i] = iq
    work[0] = total


_DOMAINS = {
    "strip": (0.0, 1.0),
    "half_line": (0.0, math.inf),
    "free": (-math.inf, math.inf),
}


def simulate_paths(kind, q0, p0, config: SimConfig, *, domain: str = "strip",
                   with_weight: bool = False, first_index: int = 0,
                   keys: np.ndarray | None = None, workers: int | None = None) -> PathBatch:
    """Simulate ``config.n_paths`` paths (or one per entry of array ``q0``).

    ``domain`` selects the killing set: ``"strip"`` kills outside (0, 1),
    ``"half_line"`` outside (0, inf), ``"free"`` never kills.  Paths are
    split into contiguous shards run on ``workers`` threads (default
    :func:`worker_count`); output does not depend on the split.
    """
    params = _as_params(kind)
    lower, upper = _DOMAINS[domain]
    q0a = np.asarray(q0, dtype=float)
    p0a = np.asarray(p0, dtype=float)
    n = config.n_paths if q0a.ndim == 0 and p0a.ndim == 0 and keys is None else None
    if n is None:
        shape = np.broadcast(q0a, p0a).shape if keys is None else (keys.size,)
        n = int(np.prod(shape))
    q0a = np.ascontiguousarray(np.broadcast_to(q0a, (n,)), dtype=float)
    p0a = np.ascontiguousarray(np.broadcast_to(p0a, (n,)), dtype=float)
    if np.any(~np.isfinite(q0a)) or np.any(~np.isfinite(p0a)):
        raise ValueError("non-finite start state")
    if np.any(q0a <= lower) or np.any(q0a >= upper):
        raise ValueError("start states must be interior")
    if keys is None:
        keys = path_keys(config.seed, n, first_index)
    phi, off, chol, hs = _tables(params, config.step, config.max_refine_depth)
    margin = HERMITE_MARGIN * params.sigma * hs**1.5
    exited = np.zeros(n, dtype=np.bool_)
    t_out = np.zeros(n)
    side = np.zeros(n, dtype=np.int8)
    q_out = np.zeros(n)
    p_out = np.zeros(n)
    if with_weight:
        w = [np.zeros(n) for _ in range(3)]
    else:
        w = [np.zeros(1) for _ in range(3)]
    nw = min(worker_count() if workers is None else workers, n)
    bounds = np.linspace(0, n, nw + 1).astype(np.int64)
    work = np.zeros(nw, dtype=np.int64)

    def shard(j):
        a, b = bounds[j], bounds[j + 1]
        ws = [x[a:b] if with_weight else x for x in w]
        _run(keys[a:b], q0a[a:b], p0a[a:b], config.n_steps, phi, off, chol, hs, lower,
             upper, config.refine_threshold, margin, config.max_refine_depth, with_weight,
             exited[a:b], t_out[a:b], side[a:b], q_out[a:b], p_out[a:b],
             ws[0], ws[1], ws[2], work[j:j + 1])

    if nw == 1:
        shard(0)
    else:
        with ThreadPoolExecutor(nw) as pool:
            list(pool.map(shard, range(nw)))
    batch = PathBatch(exited, t_out, side, q_out, p_out, n_transitions=int(work.sum()))
    if with_weight:
        batch.int_p2, batch.int_q2, batch.int_q = w
    return batch


def simulate_until_exit(kind, start: PhaseState, config: SimConfig, path_index: int = 0,
                        *, with_weight: bool = False, domain: str = "strip"):
    """Run a single path; returns ``ExitOutcome`` (and ``PathWeight`` if asked)."""
    if not start.interior:
        raise ValueError("start must be interior")
    keys = path_keys(config.seed, 1, path_index)
    b = simulate_paths(kind, start.q, start.p, config, domain=domain,
                       with_weight=with_weight, keys=keys)
    if b.exited[0]:
        out = ExitOutcome(True, exit_time=float(b.time[0]), exit_side=int(b.side[0]),
                          exit_velocity=float(b.p[0]))
    else:
        out = ExitOutcome(False, final_state=_clamped_state(b.q[0], b.p[0]))
    if not with_weight:
        return out
    params = _as_params(kind)
    pw = PathWeight(float(b.int_p2[0]), float(b.int_q2[0]), float(b.int_q[0]), sigma=params.sigma)
    return out, pw


def _clamped_state(q, p):
    return PhaseState(min(max(float(q), 0.0), 1.0), float(p))


# --------------------------------------------------------------------------
# Girsanov weight
# --------------------------------------------------------------------------

def girsanov_log_weight_endpoint(params: ModelParams, q0, p0, q, p, t, int_p2, int_q2, int_q,
                                 sigma: float | None = None):
    """log dP^{Langevin}/dP^{IBM} on [0, t] along an IBM path with noise sigma.

    The stochastic integral of the drift b = -(alpha q + beta + gamma p)
    against dp is expanded by parts, which leaves only endpoint values and
    the time integrals of p^2, q^2 and q:

        log Z = -(a/s2)(q p - q0 p0) - (b/s2)(p - p0) - (c/2 s2)(p^2 - p0^2) + c t/2
                + ((a - c^2/2)/s2) int p^2 - (c a /2 s2)(q^2 - q0^2) - (c b/s2)(q - q0)
                - (1/2 s2) int (a^2 q^2 + 2 a b q) - b^2 t/(2 s2)

    Arguments broadcast.  ``sigma`` is the noise the integrals were
    accumulated under; it must match ``params.sigma``.
    """
    if sigma is not None and sigma != params.sigma:
        raise ValueError(f"path integrals were accumulated with sigma={sigma}, "
                         f"params have sigma={params.sigma}")
    a, b, c = params.alpha, params.beta, params.gamma
    s2 = params.sigma**2
    return (-(a / s2) * (q * p - q0 * p0)
            - (b / s2) * (p - p0)
            - (c / (2 * s2)) * (p**2 - p0**2)
            + c * t / 2
            + ((a - c**2 / 2) / s2) * int_p2
            - (c * a / (2 * s2)) * (q**2 - q0**2)
            - (c * b / s2) * (q - q0)
            - (a**2 * int_q2 + 2 * a * b * int_q) / (2 * s2)
            - b**2 * t / (2 * s2))


# --------------------------------------------------------------------------
# position at the first zero of the velocity
# --------------------------------------------------------------------------

@numba.njit(cache=True)
def _run_vzero(keys, q0, p0, sigma, t_max, frac, h_min, h_max, z_stop, out):
    for i in range(keys.size):
        key = keys[i]
        ctr = np.uint64(0)
        q = q0
        p = p0
        t = 0.0
        out[i] = math.inf
        while t < t_max:
            hk = min(max(frac * p * p / (sigma * sigma), h_min), h_max)
            z1, z2 = _normal_pair(key, ctr)
            u = _uniform(key, ctr + np.uint64(2))
            ctr += np.uint64(3)
            sh = sigma * math.sqrt(hk)
            pn = p + sh * z1
            qn = q + p * hk + sh * hk * (0.5 * z1 + z2 / (2.0 * math.sqrt(3.0)))
            # Brownian-bridge probability that the velocity touched 0 in the step
            if pn <= 0.0 or u < math.exp(-2.0 * p * pn / (sigma * sigma * hk)):
                # crossing time by linear interpolation of the velocity
                s = p / (p - pn) if pn < 0.0 else 0.5
                out[i] = q + p * s * hk + 0.5 * (pn - p) * s * s * hk
                break
            q = qn
            p = pn
            t += hk
            if q > z_stop:
                break


def simulate_velocity_zero(q: float, p: float, n_paths: int, seed: int, sigma: float = 1.0,
                           t_max: float = 200.0, frac: float = 1e-2, h_min: float = 1e-9,
                           h_max: float = 0.05, z_stop: float = math.inf) -> np.ndarray:
    """Sample the position at the first time the velocity hits 0 (no killing).

    Step sizes adapt to the velocity (h ~ frac p^2 / sigma^2) so the crossing
    itself is resolved finely.  Paths still positive at ``t_max`` return inf.
    The position only grows before the crossing, so paths that pass
    ``z_stop`` are stopped early and also return inf.
    """
    if not p > 0:
        raise ValueError("velocity must be positive")
    out = np.empty(n_paths)
    _run_vzero(path_keys(seed, n_paths), float(q), float(p), float(sigma), t_max, frac,
               h_min, h_max, float(z_stop), out)
    return out
