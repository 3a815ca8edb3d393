"""Potentials, immigration rate fields, the periodic domain and grid fields.

Every solver and simulator in the package works on a periodic box (a torus)
of side ``L`` in one or two dimensions.  Positions are arrays whose trailing
axis has length ``d``; displacements are reduced to their minimal image.
"""

from __future__ import annotations

import bisect
import functools
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import AssumptionViolation, DomainMismatch, GridTooCoarse

POTENTIAL_KINDS = ("tophat", "gaussian", "exponential", "tabulated")

# Default truncation radii (in units of the length scale) for kernels with
# infinite support.
_DEFAULT_CUTOFF = {"gaussian": 5.0, "exponential": 15.0}


def ball_volume(radius: float, d: int) -> float:
    if d == 1:
        return 2.0 * radius
    if d == 2:
        return math.pi * radius * radius
    raise ValueError(f"unsupported dimension {d}")


def _as_points(x, d: int | None = None) -> np.ndarray:
    a = np.asarray(x, dtype=float)
    if a.ndim == 0:
        a = a.reshape(1)
    if d is not None and a.shape[-1] != d:
        raise DomainMismatch(f"expected points with trailing axis {d}, got shape {a.shape}")
    return a


# --------------------------------------------------------------------------
# domain


@dataclass(frozen=True)
class TorusDomain:
    """Periodic box ``[0, L)^d`` carrying a uniform cell-centred grid."""

    dimension: int
    side_length: float
    grid_points: int = 64

    def __post_init__(self):
        if self.dimension not in (1, 2):
            raise ValueError("only dimensions 1 and 2 are supported")
        if not (self.side_length > 0 and math.isfinite(self.side_length)):
            raise ValueError("side_length must be positive")
        if self.grid_points < 1:
            raise ValueError("grid_points must be positive")

    @property
    def spacing(self) -> float:
        return self.side_length / self.grid_points

    @property
    def cell_volume(self) -> float:
        return self.spacing**self.dimension

    @property
    def volume(self) -> float:
        return self.side_length**self.dimension

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.grid_points,) * self.dimension

    def axis_centers(self) -> np.ndarray:
        return (np.arange(self.grid_points) + 0.5) * self.spacing

    def cell_centers(self) -> np.ndarray:
        """Cell centres, shape ``shape + (d,)``."""
        axes = [self.axis_centers()] * self.dimension
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def cell_offsets(self) -> np.ndarray:
        """Minimal-image displacement of every cell centre from cell 0."""
        k = np.fft.fftfreq(self.grid_points, d=1.0 / self.grid_points) * self.spacing
        return np.stack(np.meshgrid(*([k] * self.dimension), indexing="ij"), axis=-1)

    def minimal_image(self, dx: np.ndarray) -> np.ndarray:
        L = self.side_length
        return dx - L * np.floor(dx / L + 0.5)

    def wrap(self, x: np.ndarray) -> np.ndarray:
        return np.mod(x, self.side_length)

    def cell_of(self, points: np.ndarray) -> np.ndarray:
        """Integer grid index of each point, shape ``(..., d)``."""
        idx = np.floor(self.wrap(points) / self.spacing).astype(int)
        return np.clip(idx, 0, self.grid_points - 1)

    def check_potential(self, pot: "Potential") -> None:
        if pot.cutoff > self.side_length / 2 + 1e-12:
            raise AssumptionViolation(
                f"potential range {pot.cutoff} exceeds half the torus side {self.side_length / 2}"
            )


# --------------------------------------------------------------------------
# potentials


@dataclass(frozen=True)
class Potential:
    """Radial repulsion kernel ``phi(x) = f(|x|)``, zero beyond ``cutoff``.

    ``tophat``: ``amplitude`` on ``|x| <= scale``.
    ``gaussian``: ``amplitude * exp(-|x|^2 / (2 scale^2))``.
    ``exponential``: ``amplitude * exp(-|x| / scale)``.
    ``tabulated``: linear interpolation of ``table`` = ((r0=0, v0), (r1, v1), ...),
    zero past the last radius.
    """

    kind: str
    amplitude: float = 1.0
    scale: float = 1.0
    cutoff: float | None = None
    table: tuple[tuple[float, float], ...] = ()
    floor_radius: float | None = None

    def __post_init__(self):
        if self.kind not in POTENTIAL_KINDS:
            raise ValueError(f"unknown potential kind {self.kind!r}")
        if self.kind == "tabulated":
            if len(self.table) < 2:
                raise AssumptionViolation("tabulated potential needs at least two samples")
            radii = [float(r) for r, _ in self.table]
            vals = [float(v) for _, v in self.table]
            if radii[0] != 0.0 or any(b <= a for a, b in zip(radii, radii[1:])):
                raise AssumptionViolation("table radii must start at 0 and increase strictly")
            if any(not math.isfinite(v) for v in vals):
                raise AssumptionViolation("potential is unbounded")
            if any(v < 0 for v in vals):
                raise AssumptionViolation("potential takes negative values")
            object.__setattr__(self, "table", tuple(zip(radii, vals)))
            object.__setattr__(self, "cutoff", radii[-1])
        else:
            if not math.isfinite(self.amplitude):
                raise AssumptionViolation("potential is unbounded")
            if self.amplitude < 0:
                raise AssumptionViolation("potential takes negative values")
            if not self.scale > 0:
                raise ValueError("scale must be positive")
            if self.kind == "tophat":
                if self.cutoff is not None and self.cutoff < self.scale:
                    raise ValueError("tophat cutoff cannot be below its radius")
                object.__setattr__(self, "cutoff", float(self.scale))
            elif self.cutoff is None:
                object.__setattr__(self, "cutoff", _DEFAULT_CUTOFF[self.kind] * self.scale)
        if not (self.cutoff > 0 and math.isfinite(self.cutoff)):
            raise AssumptionViolation("potential must have a finite positive range")
        if self.floor_radius is not None and not (0 < self.floor_radius <= self.cutoff):
            raise ValueError("floor_radius must lie in (0, cutoff]")

    # -- evaluation -------------------------------------------------------

    def radial(self, r) -> np.ndarray:
        r = np.abs(np.asarray(r, dtype=float))
        inside = r <= self.cutoff
        if self.kind == "tophat":
            out = np.where(inside, self.amplitude, 0.0)
        elif self.kind == "gaussian":
            out = np.where(inside, self.amplitude * np.exp(-0.5 * (r / self.scale) ** 2), 0.0)
        elif self.kind == "exponential":
            out = np.where(inside, self.amplitude * np.exp(-r / self.scale), 0.0)
        else:
            radii = np.array([p[0] for p in self.table])
            vals = np.array([p[1] for p in self.table])
            out = np.interp(r, radii, vals, right=0.0)
        return np.asarray(out, dtype=float)

    def radial_scalar(self, r: float) -> float:
        """Fast scalar path used by the simulator's neighbour sums."""
        if r > self.cutoff:
            return 0.0
        kind = self.kind
        if kind == "tophat":
            return self.amplitude
        if kind == "gaussian":
            q = r / self.scale
            return self.amplitude * math.exp(-0.5 * q * q)
        if kind == "exponential":
            return self.amplitude * math.exp(-r / self.scale)
        radii = [p[0] for p in self.table]
        i = bisect.bisect_right(radii, r) - 1
        if i >= len(radii) - 1:
            return self.table[-1][1] if r == radii[-1] else 0.0
        (r0, v0), (r1, v1) = self.table[i], self.table[i + 1]
        return v0 + (v1 - v0) * (r - r0) / (r1 - r0)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 0:
            return self.radial(x)
        return self.radial(np.linalg.norm(x, axis=-1))

    # -- metadata ---------------------------------------------------------

    @property
    def phi_bar(self) -> float:
        if self.kind == "tabulated":
            return max(v for _, v in self.table)
        return float(self.amplitude)

    @property
    def is_zero(self) -> bool:
        return self.phi_bar == 0.0

    def l1_norm(self, d: int) -> float:
        """Closed-form integral of the (truncated) kernel over R^d."""
        A, s, R = self.amplitude, self.scale, self.cutoff
        if self.kind == "tophat":
            return A * ball_volume(s, d)
        if self.kind == "gaussian":
            if d == 1:
                return A * s * math.sqrt(2 * math.pi) * float(erf(R / (s * math.sqrt(2))))
            return A * 2 * math.pi * s * s * -math.expm1(-0.5 * (R / s) ** 2)
        if self.kind == "exponential":
            if d == 1:
                return 2 * A * s * -math.expm1(-R / s)
            return 2 * math.pi * A * s * s * (1 - math.exp(-R / s) * (1 + R / s))
        total = 0.0
        for (a, va), (b, vb) in zip(self.table, self.table[1:]):
            h = b - a
            if d == 1:
                total += h * (va + vb)  # both half-lines
            else:
                total += 2 * math.pi * h * (a * (2 * va + vb) + b * (va + 2 * vb)) / 6
        return total

    def floor(self) -> tuple[float, float] | tuple[None, None]:
        """``(r, phi_*)`` with ``phi >= phi_*`` on ``|x| <= r``, if available."""
        if self.is_zero:
            return None, None
        if self.kind == "tophat":
            r = self.scale if self.floor_radius is None else min(self.floor_radius, self.scale)
            return float(r), float(self.amplitude)
        if self.floor_radius is None:
            return None, None
        r = self.floor_radius
        if self.kind == "tabulated":
            vals = [v for rr, v in self.table if rr <= r] + [self.radial_scalar(r)]
            value = min(vals)
        else:
            value = self.radial_scalar(r)  # monotone kernels
        if value <= 0:
            return None, None
        return float(r), float(value)

    def scaled(self, factor: float) -> "Potential":
        if self.kind == "tabulated":
            return Potential("tabulated", table=tuple((r, v * factor) for r, v in self.table),
                             floor_radius=self.floor_radius)
        return Potential(self.kind, self.amplitude * factor, self.scale, self.cutoff,
                         floor_radius=self.floor_radius)


def eval_potential(pot: Potential, x) -> float:
    return float(np.asarray(pot(x)).reshape(-1)[0]) if np.ndim(x) <= 1 else pot(x)


@dataclass(frozen=True)
class PotentialStats:
    phi_bar: float
    l1_norm: float
    l1_norm_grid: float
    floor_radius: float | None
    floor_value: float | None

    def require_positive_mass(self) -> float:
        if not self.l1_norm > 0:
            raise AssumptionViolation("operation requires a potential with positive mass")
        return self.l1_norm

    def require_floor(self) -> tuple[float, float]:
        if self.floor_radius is None:
            raise AssumptionViolation("potential has no positive floor near the origin")
        return self.floor_radius, self.floor_value


def potential_stats(pot: Potential, dom: TorusDomain) -> PotentialStats:
    dom.check_potential(pot)
    r, floor_value = pot.floor()
    return PotentialStats(
        phi_bar=pot.phi_bar,
        l1_norm=pot.l1_norm(dom.dimension),
        l1_norm_grid=float(kernel_weights(pot, dom).sum()),
        floor_radius=r,
        floor_value=floor_value,
    )


# --------------------------------------------------------------------------
# kernels on the grid

_TRANSFORMS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "phi": lambda v: v,
    "closure": lambda v: -np.expm1(-v),
}


@functools.lru_cache(maxsize=64)
def _kernel_weights_cached(pot: Potential, dom: TorusDomain, variant: str) -> np.ndarray:
    transform = _TRANSFORMS[variant]
    d, h, L = dom.dimension, dom.spacing, dom.side_length
    offsets = dom.cell_offsets().reshape(-1, d)
    if pot.is_zero:
        w = np.zeros(len(offsets))
    elif pot.kind == "tophat" and d == 1:
        # exact overlap of each cell (and its periodic images) with [-R, R]
        R = pot.scale
        c = offsets[:, 0]
        overlap = np.zeros_like(c)
        for m in (-1, 0, 1):
            lo = np.maximum(c + m * L - h / 2, -R)
            hi = np.minimum(c + m * L + h / 2, R)
            overlap += np.clip(hi - lo, 0.0, None)
        w = overlap * float(transform(np.array(pot.amplitude)))
    else:
        q = 16 if (d == 1 or pot.kind in ("tophat", "tabulated")) else 8
        xi, wi = np.polynomial.legendre.leggauss(q)
        xi, wi = xi * h / 2, wi * h / 2
        nodes = np.stack(np.meshgrid(*([xi] * d), indexing="ij"), axis=-1).reshape(-1, d)
        wts = np.prod(np.stack(np.meshgrid(*([wi] * d), indexing="ij"), axis=-1).reshape(-1, d), axis=1)
        images = np.array(list(itertools.product((-1, 0, 1), repeat=d)), dtype=float) * L
        w = np.zeros(len(offsets))
        for img in images:
            pts = offsets[:, None, :] + img + nodes[None, :, :]
            r = np.linalg.norm(pts, axis=-1)
            w += transform(pot.radial(r)) @ wts
    w = w.reshape(dom.shape)
    w.setflags(write=False)
    return w


def kernel_weights(pot: Potential, dom: TorusDomain, variant: str = "phi") -> np.ndarray:
    """Integral of the (transformed) kernel over every torus cell, indexed by
    the cell's offset from cell 0.  ``variant='closure'`` integrates
    ``1 - exp(-phi)`` instead of ``phi``."""
    dom.check_potential(pot)
    return _kernel_weights_cached(pot, dom, variant)


# --------------------------------------------------------------------------
# grid fields


@dataclass(frozen=True, eq=False)
class ScalarField:
    domain: TorusDomain
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != self.domain.shape:
            raise DomainMismatch(f"values of shape {v.shape} do not match grid {self.domain.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def integral(self) -> float:
        return float(self.values.sum() * self.domain.cell_volume)

    def with_values(self, values) -> "ScalarField":
        return ScalarField(self.domain, values)

    def __add__(self, other: "ScalarField") -> "ScalarField":
        if other.domain != self.domain:
            raise DomainMismatch("fields live on different domains")
        return ScalarField(self.domain, self.values + other.values)

    @classmethod
    def zeros(cls, dom: TorusDomain) -> "ScalarField":
        return cls(dom, np.zeros(dom.shape))

    def rows(self):
        """``(index, coord..., value)`` tuples in C order."""
        centers = self.domain.cell_centers().reshape(-1, self.domain.dimension)
        for i, (c, v) in enumerate(zip(centers, self.values.reshape(-1))):
            yield (i, *c.tolist(), float(v))


# --------------------------------------------------------------------------
# immigration rates


class RateField:
    """Bounded nonnegative immigration intensity ``b(x)``."""

    kind: str = ""

    def __call__(self, x) -> np.ndarray:
        raise NotImplementedError

    @property
    def b_bar(self) -> float:
        raise NotImplementedError

    def scaled(self, factor: float) -> "RateField":
        raise NotImplementedError

    @property
    def is_homogeneous(self) -> bool:
        return False


@dataclass(frozen=True)
class ConstantRate(RateField):
    value: float
    kind = "constant"

    def __post_init__(self):
        if not (self.value >= 0 and math.isfinite(self.value)):
            raise AssumptionViolation("rate must be finite and nonnegative")

    def __call__(self, x):
        x = _as_points(x)
        return np.full(x.shape[:-1], self.value)

    @property
    def b_bar(self) -> float:
        return float(self.value)

    @property
    def is_homogeneous(self) -> bool:
        return True

    def scaled(self, factor):
        return ConstantRate(self.value * factor)


@dataclass(frozen=True)
class PatchRate(RateField):
    """Piecewise constant on axis-aligned boxes ``[lo, hi)``, zero elsewhere.
    The first box containing a point wins."""

    patches: tuple[tuple[tuple[float, ...], tuple[float, ...], float], ...]
    kind = "patches"

    def __post_init__(self):
        norm = []
        for lo, hi, v in self.patches:
            lo, hi = tuple(np.atleast_1d(lo).astype(float)), tuple(np.atleast_1d(hi).astype(float))
            if len(lo) != len(hi) or any(b <= a for a, b in zip(lo, hi)):
                raise ValueError("patch boxes need lo < hi on every axis")
            if not (v >= 0 and math.isfinite(v)):
                raise AssumptionViolation("rate must be finite and nonnegative")
            norm.append((lo, hi, float(v)))
        object.__setattr__(self, "patches", tuple(norm))

    def __call__(self, x):
        x = _as_points(x)
        out = np.zeros(x.shape[:-1])
        done = np.zeros(x.shape[:-1], dtype=bool)
        for lo, hi, v in self.patches:
            inside = np.all((x >= np.array(lo)) & (x < np.array(hi)), axis=-1) & ~done
            out[inside] = v
            done |= inside
        return out

    @property
    def b_bar(self) -> float:
        return max((v for _, _, v in self.patches), default=0.0)

    def scaled(self, factor):
        return PatchRate(tuple((lo, hi, v * factor) for lo, hi, v in self.patches))


@dataclass(frozen=True)
class SinusoidRate(RateField):
    """``base + amplitude * sin(2 pi x[axis] / period)``."""

    base: float
    amplitude: float
    period: float
    axis: int = 0
    kind = "sinusoid"

    def __post_init__(self):
        if self.base < abs(self.amplitude):
            raise AssumptionViolation("sinusoidal rate would become negative")
        if not self.period > 0:
            raise ValueError("period must be positive")

    def __call__(self, x):
        x = _as_points(x)
        return self.base + self.amplitude * np.sin(2 * np.pi * x[..., self.axis] / self.period)

    @property
    def b_bar(self) -> float:
        return float(self.base + abs(self.amplitude))

    def scaled(self, factor):
        return SinusoidRate(self.base * factor, self.amplitude * factor, self.period, self.axis)


@dataclass(frozen=True)
class AttractionRate(RateField):
    """``min(cap, base * exp(coupling * sum_y kernel(x - y)))`` over a fixed set
    of attraction centres; distances are periodic when ``period`` is set."""

    base: float
    centers: tuple[tuple[float, ...], ...]
    kernel: Potential
    coupling: float = 1.0
    cap: float | None = None
    period: float | None = None
    kind = "attraction_centers"

    def __call__(self, x):
        x = _as_points(x)
        expo = np.zeros(x.shape[:-1])
        for c in self.centers:
            dx = x - np.array(c)
            if self.period is not None:
                dx = dx - self.period * np.floor(dx / self.period + 0.5)
            expo += self.kernel(dx)
        out = self.base * np.exp(self.coupling * expo)
        if self.cap is not None:
            out = np.minimum(out, self.cap)
        return out

    @property
    def b_bar(self) -> float:
        top = self.base * math.exp(max(self.coupling, 0.0) * self.kernel.phi_bar * len(self.centers))
        return float(top if self.cap is None else min(self.cap, top))

    def scaled(self, factor):
        cap = None if self.cap is None else self.cap * factor
        return AttractionRate(self.base * factor, self.centers, self.kernel, self.coupling, cap, self.period)


@dataclass(frozen=True, eq=False)
class TabulatedRate(RateField):
    """Piecewise constant on the cells of a grid."""

    field: ScalarField
    kind = "tabulated"

    def __post_init__(self):
        v = self.field.values
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise AssumptionViolation("tabulated rate must be finite and nonnegative")

    def __call__(self, x):
        dom = self.field.domain
        x = _as_points(x, dom.dimension)
        idx = dom.cell_of(x)
        return self.field.values[tuple(np.moveaxis(idx, -1, 0))]

    @property
    def b_bar(self) -> float:
        return float(self.field.values.max())

    def scaled(self, factor):
        return TabulatedRate(self.field.with_values(self.field.values * factor))


def eval_rate(rate: RateField, x) -> float:
    return float(np.asarray(rate(_as_points(x))).reshape(-1)[0])


def build_attraction_rate(
    centers: Sequence[Sequence[float]],
    kernel: Potential,
    base: float,
    cap: float | None = None,
    coupling: float = 1.0,
    period: float | None = None,
) -> RateField:
    if base <= 0:
        raise ValueError("base rate must be positive")
    centers = tuple(tuple(np.atleast_1d(c).astype(float).tolist()) for c in centers)
    if not centers or kernel.is_zero or coupling == 0:
        return ConstantRate(base if cap is None else min(base, cap))
    return AttractionRate(float(base), centers, kernel, float(coupling), cap, period)


# --------------------------------------------------------------------------


def discretize(spec, dom: TorusDomain) -> ScalarField:
    """Sample an analytic description at the cell centres.

    ``spec`` may be a number, a :class:`RateField`, a callable of positions or
    a :class:`Potential` (sampled at each cell's minimal-image offset from the
    origin cell, so the kernel peaks at index 0).
    """
    if isinstance(spec, Potential):
        dom.check_potential(spec)
        if spec.cutoff < 2 * dom.spacing:
            raise GridTooCoarse(f"range {spec.cutoff} is below two grid spacings ({dom.spacing})")
        return ScalarField(dom, spec(dom.cell_offsets()))
    if isinstance(spec, (int, float)):
        return ScalarField(dom, np.full(dom.shape, float(spec)))
    if isinstance(spec, RateField) or callable(spec):
        return ScalarField(dom, np.asarray(spec(dom.cell_centers()), dtype=float))
    raise TypeError(f"cannot discretize {type(spec).__name__}")
