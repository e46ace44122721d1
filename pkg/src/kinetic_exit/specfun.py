"""Closed-form layer: the harmonic function ``g``, the boundary envelopes and
the explicit hitting laws of integrated Brownian motion.

Everything here is a pure function of its inputs.  Array arguments are
broadcast; scalars in give scalars out.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .quadrature import ConvergenceError, exp_sinh, tanh_sinh

__all__ = [
    "ConvergenceError",
    "ModelParams",
    "PhaseState",
    "G0",
    "G1",
    "TINY",
    "kummer_u",
    "g",
    "h",
    "envelope_H",
    "envelope_G",
    "envelope_T",
    "envelope_Hfull",
    "exit_right_first_prob_at_rest",
    "velocity_zero_position_density",
    "velocity_zero_position_cdf",
    "velocity_zero_density_mass",
    "g_underflows",
    "harmonicity_residual",
    "LONG_TIME_PREFACTOR",
    "EXIT_SIDE_EDGE_CONST",
    "LACHAL_DENSITY_CONST",
]

_C = 2.0 / 9.0
#: g(0) = (2/9)^{-1/6} Gamma(1/3)/Gamma(1/6)
G0 = _C ** (-1 / 6) * math.gamma(1 / 3) / math.gamma(1 / 6)
#: g'(0) = (2/9)^{1/6} Gamma(-1/3)/Gamma(-1/6)
G1 = _C ** (1 / 6) * math.gamma(-1 / 3) / math.gamma(-1 / 6)
#: smallest positive normal double; floor returned by g on underflow
TINY = np.finfo(float).tiny

#: prefactor of P_(q,p)(tau_0 > t) ~ C h(q,p) t^{-1/4}
LONG_TIME_PREFACTOR = 3 * math.gamma(0.25) / (2**0.75 * math.pi**1.5)
LACHAL_DENSITY_CONST = math.gamma(2 / 3) / (math.pi * 2 ** (2 / 3) * 3 ** (1 / 6))


@dataclass(frozen=True)
class PhaseState:
    """A point (q, p) of the closed strip [0, 1] x R."""

    q: float
    p: float

    def __post_init__(self):
        if not (math.isfinite(self.q) and math.isfinite(self.p)):
            raise ValueError(f"non-finite state ({self.q}, {self.p})")
        if not 0.0 <= self.q <= 1.0:
            raise ValueError(f"position {self.q} outside [0, 1]")

    @property
    def interior(self) -> bool:
        return 0.0 < self.q < 1.0

    def boundary_class(self) -> str | None:
        """'+' (exiting), '-' (entering), '0' (singular) or None if interior."""
        if self.interior:
            return None
        if self.p == 0.0:
            return "0"
        exiting = (self.q == 0.0 and self.p < 0) or (self.q == 1.0 and self.p > 0)
        return "+" if exiting else "-"

    def reflected(self) -> "PhaseState":
        return PhaseState(1.0 - self.q, -self.p)


@dataclass(frozen=True)
class ModelParams:
    """Coefficients of dq = p dt, dp = -(alpha q + beta) dt - gamma p dt + sigma dB."""

    alpha: float = 0.0
    beta: float = 0.0
    gamma: float = 0.0
    sigma: float = 1.0

    def __post_init__(self):
        vals = (self.alpha, self.beta, self.gamma, self.sigma)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite parameters {vals}")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")

    @property
    def lambda_eff(self) -> float:
        return math.sqrt(self.alpha + self.gamma**2 / 2) / math.sqrt(11.0)

    @property
    def is_free(self) -> bool:
        """True for integrated Brownian motion (no force, no friction)."""
        return self.alpha == 0.0 and self.beta == 0.0 and self.gamma == 0.0

    @classmethod
    def eta_process(cls, eta: float, sigma: float = 1.0) -> "ModelParams":
        return cls(alpha=3 * eta**2, beta=0.0, gamma=4 * eta, sigma=sigma)


# --------------------------------------------------------------------------
# Kummer U by double-exponential quadrature of its Laplace integral
# --------------------------------------------------------------------------

@numba.njit(cache=True)
def _laplace_level(a, c, x, tau, out):
    # out[i] += sum_j e^{-u} u^a (1+u/x_i)^c (pi/2) cosh(tau_j),  u = exp(pi/2 sinh tau_j)
    for j in range(tau.size):
        u = math.exp(0.5 * math.pi * math.sinh(tau[j]))
        base = math.exp(-u) * u**a * 0.5 * math.pi * math.cosh(tau[j])
        if base == 0.0:
            continue
        for i in range(x.size):
            out[i] += base * (1.0 + u / x[i]) ** c


def _laplace_integral(a: float, c: float, x: np.ndarray, rtol: float) -> np.ndarray:
    """I(x) = int_0^inf e^{-u} u^{a-1} (1+u/x)^c du, vectorized over x."""
    # lower cut: u^a < 1e-20 ; upper cut: e^{-u} < 1e-20 (c >= 0 grows slowly)
    tlo = math.asinh(46.0 / (0.5 * math.pi * a))
    thi = math.asinh(math.log(60.0 + 10.0 * max(c, 0.0)) / (0.5 * math.pi)) + 0.2
    h = 0.25
    acc = np.zeros_like(x)
    tau = np.arange(-tlo, thi + 0.5 * h, h)
    _laplace_level(a, c, x, tau, acc)
    prev = acc * h
    for _ in range(7):
        h /= 2
        tau = np.arange(-tlo + h, thi, 2 * h)
        _laplace_level(a, c, x, tau, acc)
        est = acc * h
        if np.all(np.abs(est - prev) <= rtol * np.abs(est)):
            return est
        prev = est
    raise ConvergenceError("kummer_u quadrature did not reach tolerance")


def kummer_u(a: float, b: float, x, rtol: float = 1e-13):
    """Confluent hypergeometric function U(a, b, x) for a > 0, x > 0.

    Evaluated from the Laplace integral after the scaling u = x t,

        U(a,b,x) = x^{-a}/Gamma(a) int_0^inf e^{-u} u^{a-1} (1+u/x)^{b-a-1} du,

    with an exp-sinh rule refined until two levels agree to ``rtol``.
    """
    if a <= 0:
        raise ValueError(f"kummer_u needs a > 0, got {a}")
    xa = np.asarray(x, dtype=float)
    if np.any(~(xa > 0)):
        raise ValueError("kummer_u needs x > 0")
    flat = np.ascontiguousarray(xa.ravel())
    vals = _laplace_integral(a, b - a - 1.0, flat, rtol)
    out = (flat ** (-a) / math.gamma(a) * vals).reshape(xa.shape)
    return out[()] if out.ndim == 0 else out


# --------------------------------------------------------------------------
# g and h
# --------------------------------------------------------------------------

def _kummer_m_series(a: float, b: float, x: np.ndarray, nterms: int = 40) -> np.ndarray:
    term = np.ones_like(x)
    total = np.ones_like(x)
    for n in range(nterms):
        term = term * (a + n) / (b + n) * x / (n + 1)
        total = total + term
    return total


_SERIES_CUT = 1.0  # |z| <= 1 uses the entire (Kummer M) representation


def g(z):
    """Positive, non-decreasing solution of g''/2 - (z^2/3) g' + (z/6) g = 0.

    * z > 1:   (2/9)^{1/6} z U(1/6, 4/3, (2/9) z^3)
    * z < -1:  (2/9)^{1/6} (1/6) |z| e^{-y} U(7/6, 4/3, y),  y = (2/9)|z|^3
    * |z| <= 1: g(0) M(-1/6, 2/3, x) + g'(0) z M(1/6, 4/3, x),  x = (2/9) z^3

    All three are the same analytic function.  Values that underflow are
    floored at ``TINY`` (see :func:`g_underflows`).
    """
    za = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(za)):
        raise ValueError("g needs finite arguments")
    out = np.empty_like(za)
    small = np.abs(za) <= _SERIES_CUT
    if np.any(small):
        zs = za[small]
        xs = _C * zs**3
        out[small] = G0 * _kummer_m_series(-1 / 6, 2 / 3, xs) + G1 * zs * _kummer_m_series(1 / 6, 4 / 3, xs)
    pos = za > _SERIES_CUT
    if np.any(pos):
        zp = za[pos]
        out[pos] = _C ** (1 / 6) * zp * kummer_u(1 / 6, 4 / 3, _C * zp**3)
    neg = za < -_SERIES_CUT
    if np.any(neg):
        zn = -za[neg]
        y = _C * zn**3
        logv = math.log(_C ** (1 / 6) / 6) + np.log(zn) - y + np.log(kummer_u(7 / 6, 4 / 3, y))
        out[neg] = np.maximum(np.exp(logv), TINY)
    return out[()] if out.ndim == 0 else out


def harmonicity_residual(z, h0: float = 2.5e-3) -> np.ndarray:
    """Relative residual of g''/2 - z^2 g'/3 + z g/6 with Richardson-extrapolated differences."""
    z = np.asarray(z, dtype=float)

    def d(step):
        gp, gm, g0 = g(z + step), g(z - step), g(z)
        return (gp - gm) / (2 * step), (gp - 2 * g0 + gm) / step**2

    d1a, d2a = d(h0)
    d1b, d2b = d(h0 / 2)
    d1 = (4 * d1b - d1a) / 3
    d2 = (4 * d2b - d2a) / 3
    gz = g(z)
    res = 0.5 * d2 - z**2 / 3 * d1 + z / 6 * gz
    return np.abs(res) / (np.abs(gz) + np.abs(d1) + np.abs(d2))


def g_underflows(z) -> np.ndarray | bool:
    """True where ``g`` returned the ``TINY`` floor instead of its true value."""
    za = np.asarray(z, dtype=float)
    res = (za < -_SERIES_CUT) & (_C * np.abs(za) ** 3 > 700.0)
    return res[()] if res.ndim == 0 else res


def h(q, p):
    """Harmonic function q^{1/6} g(p / q^{1/3}) of integrated Brownian motion.

    Extended by 0 on {q = 0, p <= 0}; undefined (ValueError) at q <= 0, p > 0
    and for q < 0.
    """
    qa, pa = np.broadcast_arrays(np.asarray(q, dtype=float), np.asarray(p, dtype=float))
    if np.any(qa < 0) or np.any((qa == 0) & (pa > 0)):
        raise ValueError("h(q, p) is defined for q > 0, or q = 0 with p <= 0")
    out = np.zeros(qa.shape)
    inner = qa > 0
    if np.any(inner):
        qi = qa[inner]
        out[inner] = qi ** (1 / 6) * g(pa[inner] / np.cbrt(qi))
    return out[()] if out.ndim == 0 else out


# --------------------------------------------------------------------------
# Envelopes
# --------------------------------------------------------------------------

def _interior(q):
    qa = np.asarray(q, dtype=float)
    if np.any(~((qa > 0) & (qa < 1))):
        raise ValueError("envelopes are defined on the open strip 0 < q < 1")
    return qa


def envelope_H(q, p):
    """H(q, p) = min(h(q, p), h(1-q, -p))."""
    qa = _interior(q)
    pa = np.asarray(p, dtype=float)
    return np.minimum(h(qa, pa), h(1.0 - qa, -pa))


def envelope_G(lam: float, sigma: float, q, p):
    """min( h(q, v), e^{-3 lam p / sigma^2} h(1-q, -v) ),  v = (p + 3 lam q)/sigma^{2/3}."""
    qa = _interior(q)
    pa = np.asarray(p, dtype=float)
    v = (pa + 3 * lam * qa) / sigma ** (2 / 3)
    return np.minimum(h(qa, v), np.exp(-3 * lam * pa / sigma**2) * h(1.0 - qa, -v))


def envelope_T(params: ModelParams, q, p):
    a, b, c, s2 = params.alpha, params.beta, params.gamma, params.sigma**2
    qa = np.asarray(q, dtype=float)
    pa = np.asarray(p, dtype=float)
    expo = (-(pa**2) / s2 * (c / 2 - 2 * math.sqrt((a + c**2 / 2) / 11))
            - qa * pa / s2 * (8 * a / 11 - 3 * c**2 / 22)
            - b * pa / s2)
    return np.exp(expo)


def envelope_Hfull(params: ModelParams, q, p):
    """H_{alpha,beta,gamma,sigma} = T * G_{lambda_eff, sigma}."""
    qa = _interior(q)
    return envelope_T(params, qa, p) * envelope_G(params.lambda_eff, params.sigma, qa, p)


# --------------------------------------------------------------------------
# Explicit laws of integrated Brownian motion
# --------------------------------------------------------------------------

_LACHAL_SIDE_CONST = (6 * math.gamma(1 / 3) / math.gamma(1 / 6) ** 2
                      / (math.gamma(5 / 6) * math.gamma(1 / 3) / math.gamma(7 / 6)))
#: 1 - P_(q,0)(right wall first) ~ EXIT_SIDE_EDGE_CONST (1-q)^{1/6} as q -> 1
EXIT_SIDE_EDGE_CONST = (-6 * math.gamma(1 / 3) / math.gamma(1 / 6) ** 2 * math.gamma(7 / 6)
                        * math.gamma(-1 / 6) / (math.gamma(1 / 6) * math.gamma(5 / 6)))


def exit_right_first_prob_at_rest(q: float) -> float:
    """P_(q,0)(hit 1 before 0) for integrated Brownian motion started at rest.

    6 Gamma(1/3)/Gamma(1/6)^2 q^{1/6} F(1/6, 5/6; 7/6; q), with F from its
    Euler integral  int_0^1 x^{-1/6}(1-x)^{-2/3}(1-qx)^{-1/6} dx / B(5/6, 1/3).
    """
    if not 0.0 < q < 1.0:
        raise ValueError(f"q must lie in (0, 1), got {q}")

    def f(x, xc):
        return x ** (-1 / 6) * xc ** (-2 / 3) * ((1 - q) + q * xc) ** (-1 / 6)

    return _LACHAL_SIDE_CONST * q ** (1 / 6) * tanh_sinh(f, 0.0, 1.0, rtol=1e-13, max_level=10)


def velocity_zero_position_density(q: float, p: float, z):
    """Density of the position at the first time the velocity vanishes,
    started from (q, p) with p > 0; supported on z > q."""
    if not p > 0:
        raise ValueError("velocity must be positive")
    za = np.asarray(z, dtype=float)
    if np.any(za <= q):
        raise ValueError("density is supported on z > q")
    w = za - q
    return LACHAL_DENSITY_CONST * p * w ** (-4 / 3) * np.exp(-2 * p**3 / (9 * w))


def velocity_zero_position_cdf(q: float, p: float, z):
    """CDF of the same law: Gamma(1/3, 2p^3/(9(z-q))) / Gamma(1/3)."""
    from scipy.special import gammaincc

    za = np.asarray(z, dtype=float)
    w = np.where(za > q, za - q, np.nan)
    out = np.where(za > q, gammaincc(1 / 3, 2 * p**3 / (9 * w)), 0.0)
    return out[()] if out.ndim == 0 else out


def velocity_zero_density_mass(q: float, p: float, lo: float | None = None,
                               hi: float | None = None) -> float:
    """Integral of :func:`velocity_zero_position_density` over (lo, hi) by quadrature.

    ``lo`` defaults to q and ``hi`` to infinity.
    """
    k = 2 * p**3 / 9

    # v = 1/(z - q) turns the density into C p v^{-2/3} e^{-k v} dv
    def f(v):
        return LACHAL_DENSITY_CONST * p * v ** (-2 / 3) * np.exp(-k * v)

    def above(z0):
        if z0 <= q:
            return exp_sinh(f, scale=1.0 / k, rtol=1e-13)
        return tanh_sinh(lambda v, vc: f(v), 0.0, 1.0 / (z0 - q), rtol=1e-13)

    lo = q if lo is None else lo
    total = above(lo)
    return total if hi is None else total - above(hi)
