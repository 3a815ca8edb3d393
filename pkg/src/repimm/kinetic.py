"""Grid solver for the kinetic density equation ``d rho/dt = b exp(-phi * rho)``.

Two independent integrators are provided: a fixed-step RK4 march and a
segmented Picard iteration on the integral form of the equation.  Closed-form
references (homogeneous solution, envelope bounds) live here as well.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    AssumptionViolation,
    BoundViolation,
    DomainMismatch,
    NegativeDensity,
    NoContraction,
    NonConvergence,
    StepTooLarge,
)
from .model import Potential, RateField, ScalarField, TorusDomain, discretize, kernel_weights

MAX_RATE_STEP = 0.05
PICARD_TOL = 1e-10
PICARD_MAX_ITER = 200
PICARD_DEFAULT_MARGIN = 0.9

_VARIANT_KERNEL = {"kinetic": "phi", "closure": "closure"}


# --------------------------------------------------------------------------
# convolution and right-hand sides


def _spatial_axes(dom: TorusDomain, arr: np.ndarray) -> tuple[int, ...]:
    return tuple(range(arr.ndim - dom.dimension, arr.ndim))


def _fft_convolve(dom: TorusDomain, weights: np.ndarray, values: np.ndarray) -> np.ndarray:
    axes = _spatial_axes(dom, values)
    wf = np.fft.rfftn(weights)
    return np.fft.irfftn(np.fft.rfftn(values, axes=axes) * wf, s=dom.shape, axes=axes)


def _direct_convolve(dom: TorusDomain, weights: np.ndarray, values: np.ndarray) -> np.ndarray:
    axes = _spatial_axes(dom, values)
    out = np.zeros_like(values, dtype=float)
    for idx in zip(*np.nonzero(weights)):
        out += weights[idx] * np.roll(values, shift=idx, axis=axes)
    return out


def convolve(
    dom: TorusDomain,
    pot: Potential,
    rho: ScalarField,
    backend: str = "fft",
    variant: str = "phi",
) -> ScalarField:
    """Discrete circular convolution with the cell-integrated kernel."""
    if rho.domain != dom:
        raise DomainMismatch("density does not live on the requested domain")
    w = kernel_weights(pot, dom, variant)
    if backend == "fft":
        out = _fft_convolve(dom, w, rho.values)
    elif backend == "direct":
        out = _direct_convolve(dom, w, rho.values)
    else:
        raise ValueError(f"unknown backend {backend!r}")
    return ScalarField(dom, out)


def _check_density(rho: ScalarField) -> None:
    if np.any(rho.values < 0):
        raise NegativeDensity(f"density has negative entries (min {rho.values.min():.3g})")


def rhs_kinetic(b: RateField, pot: Potential, rho: ScalarField, backend: str = "fft") -> ScalarField:
    _check_density(rho)
    conv = convolve(rho.domain, pot, rho, backend)
    return ScalarField(rho.domain, discretize(b, rho.domain).values * np.exp(-conv.values))


def rhs_closure(b: RateField, pot: Potential, rho: ScalarField, backend: str = "fft") -> ScalarField:
    """Naive-decoupling variant: kernel ``1 - exp(-phi)`` in the exponent."""
    _check_density(rho)
    conv = convolve(rho.domain, pot, rho, backend, variant="closure")
    return ScalarField(rho.domain, discretize(b, rho.domain).values * np.exp(-conv.values))


class _GridRhs:
    """Vectorised RHS with the rate samples and kernel transform precomputed."""

    def __init__(self, dom: TorusDomain, pot: Potential, rate: RateField, variant: str):
        self.dom = dom
        self.b = discretize(rate, dom).values
        self.weights = kernel_weights(pot, dom, _VARIANT_KERNEL[variant])
        self.mass = float(self.weights.sum())
        self._wf = np.fft.rfftn(self.weights)

    def conv(self, values: np.ndarray) -> np.ndarray:
        axes = _spatial_axes(self.dom, values)
        return np.fft.irfftn(np.fft.rfftn(values, axes=axes) * self._wf, s=self.dom.shape, axes=axes)

    def __call__(self, rho: np.ndarray) -> np.ndarray:
        return self.b * np.exp(-self.conv(rho))


# --------------------------------------------------------------------------
# configuration and solution containers


@dataclass(frozen=True, eq=False)
class KineticConfig:
    domain: TorusDomain
    potential: Potential
    rate: RateField
    rho0: ScalarField | None = None
    dt: float = 0.01
    t_end: float = 1.0
    method: str = "rk4"
    rhs_variant: str = "kinetic"
    snapshot_times: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.method not in ("rk4", "picard"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.rhs_variant not in _VARIANT_KERNEL:
            raise ValueError(f"unknown rhs_variant {self.rhs_variant!r}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.t_end >= 0:
            raise ValueError("t_end must be nonnegative")
        if self.dt * self.rate.b_bar > MAX_RATE_STEP:
            raise StepTooLarge(
                f"dt * b_bar = {self.dt * self.rate.b_bar:.3g} exceeds {MAX_RATE_STEP}"
            )
        if self.rho0 is None:
            object.__setattr__(self, "rho0", ScalarField.zeros(self.domain))
        elif self.rho0.domain != self.domain:
            raise DomainMismatch("initial density lives on a different grid")
        _check_density(self.rho0)
        self.domain.check_potential(self.potential)

    def time_grid(self) -> tuple[int, float]:
        """Number of steps and the (possibly shortened) uniform step."""
        if self.t_end == 0:
            return 0, self.dt
        n = max(1, math.ceil(self.t_end / self.dt - 1e-9))
        return n, self.t_end / n

    def snapshot_steps(self) -> list[int]:
        n, h = self.time_grid()
        if self.snapshot_times is None:
            stride = max(1, n // 100)
            steps = set(range(0, n + 1, stride)) | {n}
        else:
            steps = set()
            for t in self.snapshot_times:
                if t < 0 or t > self.t_end + 1e-12:
                    raise ValueError(f"snapshot time {t} outside [0, t_end]")
                steps.add(int(round(t / h)) if n else 0)
            steps.add(0)
        return sorted(steps)


@dataclass(frozen=True, eq=False)
class KineticSolution:
    domain: TorusDomain
    times: np.ndarray
    densities: np.ndarray  # shape (n_snapshots,) + grid shape
    rhs_variant: str
    method: str
    l1_norm_grid: float
    picard_iterations: tuple[int, ...] = ()

    def field(self, i: int) -> ScalarField:
        return ScalarField(self.domain, self.densities[i])

    @property
    def final(self) -> ScalarField:
        return self.field(len(self.times) - 1)

    def rows(self):
        flat = self.densities.reshape(len(self.times), -1)
        for t, rho in zip(self.times, flat):
            for i, v in enumerate(rho):
                yield (float(t), i, float(v))


# --------------------------------------------------------------------------
# integrators


def solve(cfg: KineticConfig) -> KineticSolution:
    if cfg.method == "picard":
        return solve_picard(cfg)
    rhs = _GridRhs(cfg.domain, cfg.potential, cfg.rate, cfg.rhs_variant)
    n, h = cfg.time_grid()
    keep = set(cfg.snapshot_steps())
    rho = cfg.rho0.values.copy()
    times, snaps = [], []
    for k in range(n + 1):
        if k in keep:
            times.append(k * h)
            snaps.append(rho.copy())
        if k == n:
            break
        k1 = rhs(rho)
        k2 = rhs(rho + 0.5 * h * k1)
        k3 = rhs(rho + 0.5 * h * k2)
        k4 = rhs(rho + h * k3)
        rho = rho + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return KineticSolution(cfg.domain, np.array(times), np.array(snaps), cfg.rhs_variant, "rk4", rhs.mass)


def cumulative_quadrature(f: np.ndarray, h: float) -> np.ndarray:
    """Running integral from node 0 along axis 0 of equally spaced samples.

    Piecewise-cubic Lagrange rule (fourth order) once four nodes exist.
    """
    m = f.shape[0] - 1
    out = np.zeros_like(f, dtype=float)
    if m == 0:
        return out
    if m == 1:
        out[1] = 0.5 * h * (f[0] + f[1])
        return out
    if m == 2:
        out[1] = h * (5 * f[0] + 8 * f[1] - f[2]) / 12
        out[2] = out[1] + h * (-f[0] + 8 * f[1] + 5 * f[2]) / 12
        return out
    pieces = np.empty((m,) + f.shape[1:])
    pieces[0] = (9 * f[0] + 19 * f[1] - 5 * f[2] + f[3]) / 24
    pieces[1:m - 1] = (-f[0:m - 2] + 13 * f[1:m - 1] + 13 * f[2:m] - f[3:m + 1]) / 24
    pieces[m - 1] = (f[m - 3] - 5 * f[m - 2] + 19 * f[m - 1] + 9 * f[m]) / 24
    out[1:] = h * np.cumsum(pieces, axis=0)
    return out


def solve_picard(cfg: KineticConfig, horizon: float | None = None) -> KineticSolution:
    """Fixed-point iteration of the integral operator, segment by segment.

    On each segment the increment ``w_t = rho_t - rho_start`` solves
    ``w_t = b_seg * int_0^t exp(-(phi * w_s)) ds`` with
    ``b_seg = b exp(-(phi * rho_start))``; the operator contracts when
    ``<phi> sup(b_seg) * T < 1``.  Iteration stops when the sup change of
    ``<phi> w`` drops below ``PICARD_TOL``.
    """
    rhs = _GridRhs(cfg.domain, cfg.potential, cfg.rate, cfg.rhs_variant)
    n, h = cfg.time_grid()
    keep = cfg.snapshot_steps()
    mass = rhs.mass
    b_seg = rhs.b * np.exp(-rhs.conv(cfg.rho0.values))
    b_plus = mass * float(b_seg.max())
    if horizon is None:
        horizon = PICARD_DEFAULT_MARGIN / b_plus if b_plus > 0 else max(cfg.t_end, h)
    elif b_plus * horizon >= 1:
        raise NoContraction(f"b+ * T = {b_plus * horizon:.3g} is not below 1")
    per_seg = int(math.floor(horizon / h + 1e-9))
    if per_seg < 1:
        raise ValueError(f"segment length {horizon} is shorter than the time step {h}")

    scale = mass if mass > 0 else 1.0
    all_rho = np.empty((n + 1,) + cfg.domain.shape)
    all_rho[0] = cfg.rho0.values
    iterations = []
    start = 0
    while start < n:
        m = min(per_seg, n - start)
        w = np.zeros((m + 1,) + cfg.domain.shape)
        for it in range(PICARD_MAX_ITER + 1):
            f = np.exp(-rhs.conv(w))
            w_new = b_seg * cumulative_quadrature(f, h)
            change = scale * float(np.max(np.abs(w_new - w)))
            w = w_new
            if change < PICARD_TOL:
                break
        else:
            raise NonConvergence(f"Picard iteration did not converge in {PICARD_MAX_ITER} iterations")
        iterations.append(it)
        all_rho[start:start + m + 1] = all_rho[start] + w
        b_seg = b_seg * np.exp(-rhs.conv(w[m]))
        start += m
    times = np.array([k * h for k in keep])
    return KineticSolution(
        cfg.domain, times, all_rho[keep], cfg.rhs_variant, "picard", mass, tuple(iterations)
    )


# --------------------------------------------------------------------------
# closed forms and bounds


def homogeneous_exact(b_star: float, l1_norm: float, t):
    """``log(1 + b* <phi> t) / <phi>`` (reduces to ``b* t`` when ``<phi> = 0``)."""
    t = np.asarray(t, dtype=float)
    if l1_norm == 0:
        out = b_star * t
    else:
        out = np.log1p(b_star * l1_norm * t) / l1_norm
    return float(out) if out.ndim == 0 else out


def effective_rates(
    b: RateField, pot: Potential, rho0: ScalarField, variant: str = "kinetic"
) -> tuple[float, float]:
    """``<phi>_h`` times the grid inf / sup of ``b exp(-(phi * rho0))``."""
    rhs = _GridRhs(rho0.domain, pot, b, variant)
    eff = rhs.b * np.exp(-rhs.conv(rho0.values))
    return rhs.mass * float(eff.min()), rhs.mass * float(eff.max())


@dataclass(frozen=True)
class EnvelopeBounds:
    b_minus: float
    b_plus: float

    def __post_init__(self):
        if not (0 <= self.b_minus <= self.b_plus):
            raise ValueError("envelopes need 0 <= b- <= b+")

    def omega_minus(self, t):
        t = np.asarray(t, dtype=float)
        gap = self.b_plus - self.b_minus
        if gap == 0:
            out = np.log1p(self.b_minus * t)
        else:
            # log(b+/gap - b-/gap e^{-gap t}) rewritten without cancellation
            out = np.log1p(self.b_minus * -np.expm1(-gap * t) / gap)
        return float(out) if out.ndim == 0 else out

    def omega_plus(self, t):
        t = np.asarray(t, dtype=float)
        out = np.asarray(self.omega_minus(t)) + (self.b_plus - self.b_minus) * t
        return float(out) if out.ndim == 0 else out


def envelopes(b_minus: float, b_plus: float, t):
    env = EnvelopeBounds(b_minus, b_plus)
    return env.omega_minus(t), env.omega_plus(t)


@dataclass(frozen=True)
class BoundRow:
    t: float
    omega_minus: float
    omega_plus: float
    min_slack: float  # min over cells of rho_t - lower envelope
    max_slack: float  # min over cells of upper envelope - rho_t


@dataclass(frozen=True)
class BoundReport:
    rows: tuple[BoundRow, ...]
    l1_norm: float
    l1_norm_analytic: float | None
    tolerance: float
    worst_slack: float
    worst_time: float
    worst_cell: int
    passed: bool


def verify_bounds(
    sol: KineticSolution,
    env: EnvelopeBounds,
    rho0: ScalarField,
    l1_norm: float | None = None,
    tol: float = 1e-9,
    allowance: float = 0.0,
    l1_norm_analytic: float | None = None,
    raise_on_violation: bool = True,
) -> BoundReport:
    """Check ``rho0 + omega-/<phi> <= rho_t <= rho0 + omega+/<phi>`` everywhere.

    ``<phi>`` defaults to the kernel's grid mass, which is the constant the
    discrete system actually obeys.
    """
    mass = sol.l1_norm_grid if l1_norm is None else l1_norm
    if not mass > 0:
        raise AssumptionViolation("envelope bounds need a potential with positive mass")
    base = rho0.values.reshape(-1)
    rows = []
    worst = (math.inf, 0.0, 0)
    for t, rho in zip(sol.times, sol.densities.reshape(len(sol.times), -1)):
        om, op = env.omega_minus(t), env.omega_plus(t)
        lower = rho - (base + om / mass)
        upper = (base + op / mass) - rho
        rows.append(BoundRow(float(t), om, op, float(lower.min()), float(upper.min())))
        both = np.minimum(lower, upper)
        i = int(np.argmin(both))
        if both[i] < worst[0]:
            worst = (float(both[i]), float(t), i)
    passed = worst[0] >= -(tol + allowance)
    report = BoundReport(tuple(rows), mass, l1_norm_analytic, tol + allowance, *worst, passed)
    if raise_on_violation and not passed:
        raise BoundViolation(
            f"envelope bound violated by {-worst[0]:.3g} at t={worst[1]}, cell {worst[2]}"
        )
    return report


def homogeneous_deviation(sol: KineticSolution, b_star: float, l1_norm: float | None = None) -> float:
    """Largest relative deviation of a zero-start solution from the closed form.

    ``l1_norm`` defaults to the grid mass of the kernel.  Snapshots where the
    exact value vanishes contribute their absolute deviation.
    """
    mass = sol.l1_norm_grid if l1_norm is None else l1_norm
    exact = np.asarray(homogeneous_exact(b_star, mass, sol.times), dtype=float)
    exact = exact.reshape((-1,) + (1,) * sol.domain.dimension)
    dev = np.abs(sol.densities - exact) / np.where(exact > 0, exact, 1.0)
    return float(dev.max())
