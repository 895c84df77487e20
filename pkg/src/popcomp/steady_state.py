"""Analytic steady-state predictors.

All predictors return cumulative level fractions ``r[i]`` = expected fraction
of agents at level <= i, for ``i = 0..levels``. Powers ``(1 - r0)**(2**i)``
are evaluated in log space so that ``r0`` down to 1e-9 and ``i`` up to 64
stay accurate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def _check_fraction(name: str, value: float) -> float:
    value = float(value)
    if not 0.0 <= value <= 1.0 or math.isnan(value):
        raise ValueError(f"{name} must lie in [0, 1], got {value}")
    return value


def _check_zeta(zeta: float) -> float:
    zeta = float(zeta)
    if not 0.0 <= zeta < 1.0:
        raise ValueError(f"zeta must lie in [0, 1), got {zeta}")
    return zeta


def _log_survival(r0: float, levels: int) -> np.ndarray:
    """``log((1 - r0)**(2**i))`` for i = 0..levels (``-inf`` when r0 = 1)."""
    if r0 >= 1.0:
        return np.full(levels + 1, -np.inf)
    return np.ldexp(1.0, np.arange(levels + 1)) * math.log1p(-r0)


def predict_r(r0: float, levels: int) -> np.ndarray:
    """``r[i] = 1 - (1 - r0)**(2**i)``."""
    r0 = _check_fraction("r0", r0)
    return -np.expm1(_log_survival(r0, levels))


def predict_xy(x0: float, y0: float, levels: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-level fractions of X-colored and Y-colored agents.

    Level 1 is seeded with ``x0 * (1 - r0)``; above that each level grows by
    ``2 - r[i] - r[i-1]``, the factor written here as ``q[i] + q[i-1]`` with
    ``q = 1 - r`` to avoid cancellation near saturation.
    """
    x0 = _check_fraction("x0", x0)
    y0 = _check_fraction("y0", y0)
    if x0 + y0 > 1.0 + 1e-15:
        raise ValueError("x0 + y0 must not exceed 1")
    r0 = min(1.0, x0 + y0)
    q = np.exp(_log_survival(r0, levels))
    x = np.zeros(levels + 1)
    y = np.zeros(levels + 1)
    x[0], y[0] = x0, y0
    if levels >= 1:
        x[1], y[1] = x0 * q[0], y0 * q[0]
    for i in range(1, levels):
        g = q[i] + q[i - 1]
        x[i + 1] = x[i] * g
        y[i + 1] = y[i] * g
    return x, y


def predict_fp_leak(r0: float, zeta: float, levels: int) -> np.ndarray:
    """False-positive leaks: ``1 - r[c] = (1 - zeta)**(2**c - 1) * (1 - r0)**(2**c)``."""
    r0 = _check_fraction("r0", r0)
    zeta = _check_zeta(zeta)
    pw = np.ldexp(1.0, np.arange(levels + 1))
    log_q = _log_survival(r0, levels)
    if zeta > 0.0:
        log_q = log_q + (pw - 1.0) * math.log1p(-zeta)
    return -np.expm1(log_q)


def predict_fn_leak(r0: float, zeta: float, levels: int) -> np.ndarray:
    """False-negative leaks: ``r[c+1] = (1 - zeta) * (1 - (1 - r[c])**2)``."""
    r0 = _check_fraction("r0", r0)
    zeta = _check_zeta(zeta)
    r = np.zeros(levels + 1)
    r[0] = r0
    for c in range(levels):
        r[c + 1] = (1.0 - zeta) * r[c] * (2.0 - r[c])
    return r


def _check_p(p_prime: float) -> float:
    p_prime = float(p_prime)
    if not 0.0 < p_prime <= 1.0:
        raise ValueError(f"coin probability must lie in (0, 1], got {p_prime}")
    return p_prime


def predict_coin(r0: float, p_prime: float, levels: int) -> np.ndarray:
    """Geometric small-occupancy prediction ``r[c+1] = min(1, (1 + p)/p * r[c])``.

    Only meaningful while ``r[c]`` is small; :func:`predict_coin_exact` solves
    the full per-level balance instead.
    """
    r0 = _check_fraction("r0", r0)
    p_prime = _check_p(p_prime)
    factor = (1.0 + p_prime) / p_prime
    r = np.zeros(levels + 1)
    r[0] = r0
    for c in range(levels):
        r[c + 1] = min(1.0, factor * r[c])
    return r


def predict_coin_exact(r0: float, p_prime: float, levels: int) -> np.ndarray:
    """Exact fixed point of the expected level-by-level change under the coin rules.

    With ``q = 1 - r`` the balance ``(1 - p) q'^2 - 2 q' + (1 + p) q^2 = 0``
    has the root ``q' = (1 + p) q^2 / (1 + sqrt(1 - (1 - p^2) q^2))``.
    At ``p = 1`` this is ``q' = q^2``, i.e. :func:`predict_r`.
    """
    r0 = _check_fraction("r0", r0)
    p = _check_p(p_prime)
    q = np.zeros(levels + 1)
    q[0] = 1.0 - r0
    for c in range(levels):
        qc = q[c]
        q[c + 1] = (1.0 + p) * qc * qc / (1.0 + math.sqrt(1.0 - (1.0 - p * p) * qc * qc))
    return 1.0 - q


def saturation_level(r0: float, threshold: float = 0.9) -> int:
    """Smallest level d with ``predict_r(r0)[d] >= threshold``."""
    r0 = _check_fraction("r0", r0)
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    if r0 == 0.0:
        raise ValueError("no saturation without baseline agents (r0 = 0)")
    if r0 >= threshold:
        return 0
    # 1 - (1 - r0)**(2**d) >= t  <=>  2**d >= log(1 - t) / log(1 - r0)
    need = math.log1p(-threshold) / math.log1p(-r0)
    d = max(0, math.ceil(math.log2(need)))
    r = predict_r(r0, d + 1)
    while d > 0 and r[d - 1] >= threshold:
        d -= 1
    while r[d] < threshold:
        d += 1
        r = predict_r(r0, d + 1)
    return d


@dataclass(frozen=True)
class WalkDistribution:
    bias: float
    m: int
    probs: np.ndarray = field(repr=False)

    def __getitem__(self, i: int) -> float:
        if not -self.m <= i <= self.m:
            raise IndexError(i)
        return float(self.probs[i + self.m])

    @property
    def positive_mass(self) -> float:
        return float(self.probs[self.m + 1:].sum())

    @property
    def negative_mass(self) -> float:
        return float(self.probs[:self.m].sum())


def rw_stationary(b: float, m: int) -> WalkDistribution:
    """Stationary law of the biased walk on ``[-m, m]`` that steps up w.p. ``b/(b+1)``.

    Steps that would leave the interval stay put, so detailed balance gives
    ``pi[i+1] = b * pi[i]``.
    """
    if not b > 0.0:
        raise ValueError("bias must be positive")
    if m < 1:
        raise ValueError("bound m must be at least 1")
    k = np.arange(2 * m + 1, dtype=np.float64)
    # scale by the largest term so large biases do not overflow
    if b >= 1.0:
        w = np.exp((k - 2 * m) * math.log(b))
    else:
        w = np.exp(k * math.log(b))
    return WalkDistribution(float(b), int(m), w / w.sum())


def walk_transition_matrix(b: float, m: int) -> np.ndarray:
    """Row-stochastic matrix of the walk described in :func:`rw_stationary`."""
    size = 2 * m + 1
    up = b / (b + 1.0)
    P = np.zeros((size, size))
    for k in range(size):
        P[k, min(k + 1, size - 1)] += up
        P[k, max(k - 1, 0)] += 1.0 - up
    return P


@dataclass(frozen=True)
class SteadyStatePrediction:
    variant: str
    r0: float
    r_tilde: np.ndarray
    x_tilde: np.ndarray | None = None
    y_tilde: np.ndarray | None = None
    zeta: float = 0.0
    p_prime: float = 1.0

    @property
    def levels(self) -> int:
        return self.r_tilde.shape[0] - 1

    def saturation(self, threshold: float = 0.9) -> int | None:
        hit = np.flatnonzero(self.r_tilde >= threshold)
        return int(hit[0]) if hit.size else None

    def expected_separation(self) -> float | None:
        """Predicted ratio of X-colored to Y-colored non-baseline agents."""
        if self.x_tilde is None or self.y_tilde[1:].sum() == 0.0:
            return None
        return float(self.x_tilde[1:].sum() / self.y_tilde[1:].sum())


def predict(variant: str, x0: float, y0: float, levels: int, zeta: float = 0.0,
            p_prime: float = 1.0) -> SteadyStatePrediction:
    """Prediction matching ``variant`` (a :class:`~popcomp.protocol.Variant` name)."""
    from .protocol import Variant

    v = Variant.parse(variant)
    r0 = x0 + y0
    if v in (Variant.COMPARISON, Variant.COUNTER_COMPARISON):
        x, y = predict_xy(x0, y0, levels)
        return SteadyStatePrediction(v.name, r0, predict_r(r0, levels), x, y)
    if v is Variant.COIN_DETECTION:
        return SteadyStatePrediction(v.name, r0, predict_coin_exact(r0, p_prime, levels),
                                     p_prime=p_prime)
    if v is Variant.LEAK_FP_DETECTION:
        return SteadyStatePrediction(v.name, r0, predict_fp_leak(r0, zeta, levels), zeta=zeta)
    if v is Variant.LEAK_FN_DETECTION:
        return SteadyStatePrediction(v.name, r0, predict_fn_leak(r0, zeta, levels), zeta=zeta)
    return SteadyStatePrediction(v.name, r0, predict_r(r0, levels))
