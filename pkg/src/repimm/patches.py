"""Two-patch reduction of the kinetic equation.

Immigration happens on two patches A and B only; an entity in one patch
repels arrivals in the other with unit strength and arrivals in its own
patch with strength ``alpha``.  The densities obey

    rho_A' = b_A exp(-alpha rho_A - rho_B),   rho_B' = b_B exp(-rho_A - alpha rho_B)

from a zero start.  For ``alpha < 1`` the patch with the smaller rate
saturates while the other grows without bound.
"""

from __future__ import annotations

import math
from array import array
from dataclasses import dataclass

import numpy as np

from .errors import AlphaOne, NotUnstableRegime, StepTooLarge

MAX_RATE_STEP = 0.05


@dataclass(frozen=True)
class PatchParams:
    b_A: float
    b_B: float
    alpha: float

    def __post_init__(self):
        if not (self.b_A > 0 and self.b_B > 0):
            raise ValueError("patch rates must be positive")
        if not self.alpha >= 0:
            raise ValueError("alpha must be nonnegative")


@dataclass(frozen=True)
class PatchState:
    t: float
    rho_A: float
    rho_B: float


def rhs_patch(p: PatchParams, s: PatchState) -> tuple[float, float]:
    a = p.alpha
    return (
        p.b_A * math.exp(-a * s.rho_A - s.rho_B),
        p.b_B * math.exp(-s.rho_A - a * s.rho_B),
    )


@dataclass(frozen=True, eq=False)
class PatchTrajectory:
    params: PatchParams
    t: np.ndarray
    rho_A: np.ndarray
    rho_B: np.ndarray

    def state(self, i: int) -> PatchState:
        return PatchState(float(self.t[i]), float(self.rho_A[i]), float(self.rho_B[i]))

    def at(self, t: float) -> PatchState:
        """Recorded state at time ``t`` (must be a snapshot time)."""
        i = int(np.argmin(np.abs(self.t - t)))
        if abs(self.t[i] - t) > 1e-9 * max(1.0, t):
            raise KeyError(f"no snapshot at t={t}")
        return self.state(i)

    def invariant_residuals(self) -> np.ndarray:
        return invariant_residual_array(self.params, self.rho_A, self.rho_B)

    def rows(self):
        res = (self.invariant_residuals() if self.params.alpha != 1
               else np.full(len(self.t), np.nan))
        for row in zip(self.t, self.rho_A, self.rho_B, res):
            yield tuple(float(v) for v in row)


def solve_patch(p: PatchParams, t_end: float, dt: float = 0.01, stride: int = 1) -> PatchTrajectory:
    """Classical RK4 from the zero state; every ``stride``-th step is kept
    along with the final one.  A final partial step lands exactly on ``t_end``."""
    if dt * max(p.b_A, p.b_B) > MAX_RATE_STEP:
        raise StepTooLarge(f"dt * max(b_A, b_B) = {dt * max(p.b_A, p.b_B):.3g} exceeds {MAX_RATE_STEP}")
    if t_end < 0:
        raise ValueError("t_end must be nonnegative")
    n_full = int(math.floor(t_end / dt + 1e-9))
    last = t_end - n_full * dt
    if last <= 1e-12 * max(1.0, t_end):
        last = 0.0
    bA, bB, a = p.b_A, p.b_B, p.alpha
    exp = math.exp

    ts, xs, ys = array("d", [0.0]), array("d", [0.0]), array("d", [0.0])
    x = y = 0.0

    def step(x, y, h):
        k1x = bA * exp(-a * x - y)
        k1y = bB * exp(-x - a * y)
        x2, y2 = x + 0.5 * h * k1x, y + 0.5 * h * k1y
        k2x = bA * exp(-a * x2 - y2)
        k2y = bB * exp(-x2 - a * y2)
        x3, y3 = x + 0.5 * h * k2x, y + 0.5 * h * k2y
        k3x = bA * exp(-a * x3 - y3)
        k3y = bB * exp(-x3 - a * y3)
        x4, y4 = x + h * k3x, y + h * k3y
        k4x = bA * exp(-a * x4 - y4)
        k4y = bB * exp(-x4 - a * y4)
        return (x + h / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x),
                y + h / 6.0 * (k1y + 2 * k2y + 2 * k3y + k4y))

    for k in range(1, n_full + 1):
        x, y = step(x, y, dt)
        if k % stride == 0 or (k == n_full and last == 0.0):
            ts.append(k * dt)
            xs.append(x)
            ys.append(y)
    if last > 0.0:
        x, y = step(x, y, last)
        ts.append(t_end)
        xs.append(x)
        ys.append(y)
    return PatchTrajectory(p, np.frombuffer(ts), np.frombuffer(xs), np.frombuffer(ys))


def invariant_residual_array(p: PatchParams, rho_A, rho_B) -> np.ndarray:
    if p.alpha == 1:
        raise AlphaOne("the conserved combination degenerates at alpha = 1")
    c = p.alpha - 1
    return np.expm1(c * np.asarray(rho_A)) - (p.b_A / p.b_B) * np.expm1(c * np.asarray(rho_B))


def invariant_residual(p: PatchParams, s: PatchState) -> float:
    """``[e^{(a-1)rho_A} - 1] - (b_A/b_B)[e^{(a-1)rho_B} - 1]``; zero along exact
    trajectories from the zero state."""
    return float(invariant_residual_array(p, s.rho_A, s.rho_B))


def explicit_alpha1(b_A: float, b_B: float, t: float) -> PatchState:
    total = b_A + b_B
    g = math.log1p(total * t)
    return PatchState(t, b_A / total * g, b_B / total * g)


def homogeneous_patch(b_star: float, alpha: float, t):
    """Equal-rate solution ``log(1 + (1+alpha) b* t) / (1+alpha)`` for both patches."""
    return np.log1p((1 + alpha) * b_star * np.asarray(t, dtype=float)) / (1 + alpha)


def asymptote_A(p: PatchParams) -> float:
    """Saturation level of the weaker patch when ``alpha < 1`` and ``b_A < b_B``."""
    if not (p.alpha < 1 and p.b_A < p.b_B):
        raise NotUnstableRegime("saturation needs alpha < 1 and b_A < b_B")
    return (math.log(p.b_B) - math.log(p.b_B - p.b_A)) / (1 - p.alpha)
