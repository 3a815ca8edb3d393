"""Time horizons attached to the correlation-function evolution.

``horizon_T`` is the guaranteed existence time when passing from exponent
``theta0`` to ``theta``; ``horizon_tau`` is its supremum over ``theta``.
"""

from __future__ import annotations

import math
from typing import NamedTuple

from .errors import InfiniteTheta, OrderViolation


def lambert_w(z: float) -> float:
    """Principal branch of ``w e^w = z`` for ``z >= 0``.

    Halley iterations from a log-based start, falling back to bisection on a
    bracket if an iterate leaves it.
    """
    if z < 0 or math.isnan(z):
        raise ValueError("lambert_w is defined here for z >= 0 only")
    if z == 0:
        return 0.0
    if math.isinf(z):
        return math.inf
    # bracket: w in [lo, hi] with lo e^lo <= z <= hi e^hi
    lo, hi = 0.0, max(1.0, math.log(z) + 1.0)
    if z < 1:
        w = z * (1 - z) if z < 0.5 else 0.5
    else:
        lz = math.log(z)
        w = lz - math.log(lz) if z > math.e else 0.5 + 0.5 * lz
    for _ in range(100):
        ew = math.exp(w)
        f = w * ew - z
        if f == 0:
            return w
        if f > 0:
            hi = min(hi, w)
        else:
            lo = max(lo, w)
        wp1 = w + 1
        step = f / (ew * wp1 - (w + 2) * f / (2 * wp1))
        w_new = w - step
        if not (lo <= w_new <= hi):
            w_new = 0.5 * (lo + hi)
        if abs(w_new - w) <= 1e-16 * max(1.0, abs(w)):
            w = w_new
            break
        w = w_new
    return w


def _lambert_w_of_log(log_z: float) -> float:
    # w + log w = log z, for z too large to exponentiate
    w = log_z - math.log(log_z)
    for _ in range(50):
        step = (w + math.log(w) - log_z) / (1 + 1 / w)
        w -= step
        if abs(step) <= 1e-16 * w:
            break
    return w


def horizon_T(theta0: float, theta: float, b_bar: float, l1_norm: float) -> float:
    """``((theta - theta0) / b_bar) * exp(theta0 - <phi> e^theta)``."""
    if not theta > theta0:
        raise OrderViolation(f"need theta > theta0, got theta={theta}, theta0={theta0}")
    return (theta - theta0) / b_bar * math.exp(theta0 - l1_norm * math.exp(theta))


class HorizonTau(NamedTuple):
    delta: float
    tau: float
    tau_alt: float  # same value through the delta-only closed form


def horizon_tau(theta0: float, b_bar: float, l1_norm: float) -> HorizonTau:
    """Optimal horizon ``tau(theta0) = sup_theta horizon_T(theta0, theta)``.

    ``delta`` solves ``delta e^delta = e^{-theta0} / <phi>``; the optimum sits
    at ``theta = theta0 + delta``.
    """
    if theta0 == -math.inf:
        raise InfiniteTheta("an empty initial state needs a finite surrogate theta0")
    if not l1_norm > 0:
        raise ValueError("horizon formulas need <phi> > 0")
    log_z = -theta0 - math.log(l1_norm)
    delta = lambert_w(math.exp(log_z)) if log_z < 700 else _lambert_w_of_log(log_z)
    tau = delta / b_bar * math.exp(theta0 - 1.0 / delta)
    tau_alt = math.exp(-delta - 1.0 / delta) / (b_bar * l1_norm)
    return HorizonTau(delta, tau, tau_alt)
