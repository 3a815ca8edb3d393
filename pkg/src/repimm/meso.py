"""Mesoscopic scaling: weak interaction, high density, and the kinetic limit.

At scale ``eps`` the microscopic model runs with potential ``eps * phi`` and
intensity ``b / eps``; counts multiplied by ``eps`` are then compared with
the kinetic density.  The mean-field equation of the scaled model,
``d rho~/dt = (b/eps) exp(-eps phi * rho~)``, becomes the kinetic equation for
``q = eps * rho~``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EpsilonOutOfRange, NoPairs, TooFewReplicas, TooFewSnapshots
from .horizons import horizon_tau
from .kinetic import KineticSolution, _GridRhs
from .microsim import EventLog, simulate_replicas
from .model import Potential, RateField, TorusDomain, ball_volume, kernel_weights

DEFAULT_HORIZON_CAP = 1.0
SURROGATE_OFFSET = 0.01


def _check_eps(eps: float) -> None:
    if not (0 < eps <= 1):
        raise EpsilonOutOfRange(f"epsilon must lie in (0, 1], got {eps}")


def scaled_model(b: RateField, pot: Potential, eps: float) -> tuple[RateField, Potential]:
    _check_eps(eps)
    if eps == 1:
        return b, pot
    return b.scaled(1.0 / eps), pot.scaled(eps)


def tau_kernel(pot: Potential, eps: float, dx) -> np.ndarray:
    """``exp(-eps phi(dx))``."""
    return np.exp(-eps * pot(dx))


def t_kernel(pot: Potential, eps: float, dx) -> np.ndarray:
    """``(exp(-eps phi) - 1) / eps``, tending to ``-phi`` as eps -> 0."""
    v = pot(dx)
    if eps == 0:
        return -v
    return np.expm1(-eps * v) / eps


def scaled_kernel_mass(pot: Potential, dom: TorusDomain, eps: float) -> float:
    """Grid mass of ``(1 - exp(-eps phi)) / eps``; never above the mass of ``phi``."""
    _check_eps(eps)
    return float(kernel_weights(pot.scaled(eps), dom, "closure").sum()) / eps


@dataclass(frozen=True)
class ScalingSpec:
    epsilons: tuple[float, ...]
    rate: RateField
    potential: Potential

    def __post_init__(self):
        eps = tuple(float(e) for e in self.epsilons)
        for e in eps:
            _check_eps(e)
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise ValueError("epsilon ladder must be strictly decreasing")
        object.__setattr__(self, "epsilons", eps)

    def models(self):
        for e in self.epsilons:
            yield (e, *scaled_model(self.rate, self.potential, e))


# --------------------------------------------------------------------------
# estimators


@dataclass(frozen=True, eq=False)
class EmpiricalDensity:
    domain: TorusDomain
    values: np.ndarray
    stderr: np.ndarray
    replicas: int
    epsilon: float
    t: float

    def integral(self) -> float:
        return float(self.values.sum() * self.domain.cell_volume)


def _cell_counts(log: EventLog, dom: TorusDomain, t: float) -> np.ndarray:
    k = int(np.searchsorted(log.times, t, side="right"))
    pts = np.concatenate([log.initial, log.positions[:k]])
    counts = np.zeros(dom.shape)
    if len(pts):
        idx = dom.cell_of(pts)
        np.add.at(counts, tuple(idx.T), 1.0)
    return counts


def estimate_density(logs: Sequence[EventLog], dom: TorusDomain, t: float, eps: float) -> EmpiricalDensity:
    """Replica-averaged ``eps * count / cell volume`` on the kinetic grid."""
    _check_eps(eps)
    if len(logs) < 2:
        raise TooFewReplicas(f"need at least 2 replicas, got {len(logs)}")
    stack = np.stack([_cell_counts(log, dom, t) for log in logs]) * (eps / dom.cell_volume)
    return EmpiricalDensity(dom, stack.mean(axis=0), stack.std(axis=0, ddof=1) / math.sqrt(len(logs)),
                            len(logs), eps, float(t))


@dataclass(frozen=True, eq=False)
class PairCorrelation:
    bin_edges: np.ndarray
    g2: np.ndarray
    stderr: np.ndarray

    def rows(self):
        for lo, hi, g, se in zip(self.bin_edges[:-1], self.bin_edges[1:], self.g2, self.stderr):
            yield (float(lo), float(hi), float(g), float(se))


def _shell_volume(lo: float, hi: float, d: int) -> float:
    return ball_volume(hi, d) - ball_volume(lo, d)


def estimate_pair_correlation(
    logs: Sequence[EventLog], bins: Sequence[float], t: float, dom: TorusDomain, min_replicas: int = 50
) -> PairCorrelation:
    """Torus pair-distance histogram over the Poisson expectation.

    For ``N`` points the Poisson reference puts ``N(N-1) shell / |torus|``
    ordered pairs in each distance shell; the estimate is the ratio of pooled
    observed to pooled expected pairs.  Bins must stay below ``L/2``.
    """
    if len(logs) < min_replicas:
        raise TooFewReplicas(f"need at least {min_replicas} replicas, got {len(logs)}")
    edges = np.asarray(bins, dtype=float)
    if edges[0] < 0 or edges[-1] > dom.side_length / 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("bins must increase within [0, L/2]")
    shells = np.array([_shell_volume(a, b, dom.dimension) for a, b in zip(edges[:-1], edges[1:])])
    observed = np.zeros((len(logs), len(shells)))
    expected = np.zeros((len(logs), len(shells)))
    for r, log in enumerate(logs):
        pts = log.configuration(t).points
        n = len(pts)
        if n >= 2:
            dx = dom.minimal_image(pts[:, None, :] - pts[None, :, :])
            dist = np.linalg.norm(dx, axis=-1)[~np.eye(n, dtype=bool)]
            observed[r] = np.histogram(dist, bins=edges)[0]
        expected[r] = n * (n - 1) * shells / dom.volume
    total_exp = expected.sum(axis=0)
    if not np.all(total_exp > 0):
        raise NoPairs("no replica holds two or more points at this time")
    g = observed.sum(axis=0) / total_exp
    # ratio-estimator standard error over replicas
    resid = observed - g * expected
    stderr = resid.std(axis=0, ddof=1) * math.sqrt(len(logs)) / total_exp
    return PairCorrelation(edges, g, stderr)


# --------------------------------------------------------------------------
# kinetic-side consistency


def vlasov_residual(sol: KineticSolution, pot: Potential, b: RateField) -> float:
    """Sup over interior snapshots of ``|d rho/dt - b exp(-phi * rho)|``.

    Time derivatives use the fourth-order five-point central stencil, so the
    snapshots must be equally spaced and at least five.
    """
    if len(sol.times) < 5:
        raise TooFewSnapshots("need at least five snapshots")
    dt = np.diff(sol.times)
    h = float(dt.mean())
    if np.max(np.abs(dt - h)) > 1e-9 * max(1.0, h):
        raise ValueError("snapshots must be equally spaced")
    rhs = _GridRhs(sol.domain, pot, b, sol.rhs_variant)
    rho = sol.densities
    deriv = (rho[:-4] - 8 * rho[1:-3] + 8 * rho[3:-1] - rho[4:]) / (12 * h)
    model = rhs(rho[2:-2])
    return float(np.max(np.abs(deriv - model)))


def theorem4_horizon(theta0: float, b_bar: float, l1_norm: float) -> float:
    """Half the optimal correlation-function horizon ``tau(theta0)``."""
    return horizon_tau(theta0, b_bar, l1_norm).tau / 2


def surrogate_theta0(rho0_max: float) -> float:
    return math.log(rho0_max + SURROGATE_OFFSET)


def default_comparison_horizon(rho0_max: float, b_bar: float, l1_norm: float,
                               cap: float = DEFAULT_HORIZON_CAP) -> float:
    return min(theorem4_horizon(surrogate_theta0(rho0_max), b_bar, l1_norm), cap)


# --------------------------------------------------------------------------
# the convergence experiment


@dataclass(frozen=True)
class ComparisonRow:
    epsilon: float
    t: float
    sup_error: float
    l1_error: float
    stderr: float  # root-mean-square of per-cell standard errors


@dataclass(frozen=True)
class EpsilonSummary:
    epsilon: float
    sup_error: float  # sup over sampled t
    stderr: float  # stderr at the time where the sup is attained
    l1_error: float


@dataclass(frozen=True)
class ComparisonReport:
    rows: tuple[ComparisonRow, ...]
    summaries: tuple[EpsilonSummary, ...]
    horizon: float
    horizon_limit: float
    extrapolated: bool
    monotone: bool  # nonincreasing along the ladder up to 2 pooled stderr
    improved: bool  # last rung strictly below the second
    logs: tuple = ()  # per-rung event logs when requested

    def rows_csv(self):
        for r in self.rows:
            yield (r.epsilon, r.t, r.sup_error, r.l1_error, r.stderr)


def _monotone(summaries: Sequence[EpsilonSummary], sigmas: float = 2.0) -> bool:
    for a, b in zip(summaries, summaries[1:]):
        pooled = math.hypot(a.stderr, b.stderr)
        if b.sup_error > a.sup_error + sigmas * pooled:
            return False
    return True


def convergence_report(
    b: RateField,
    pot: Potential,
    sol: KineticSolution,
    epsilons: Sequence[float],
    T: float,
    replicas: int,
    seed: int,
    threads: int = 1,
    horizon_limit: float | None = None,
    keep_logs: bool = False,
) -> ComparisonReport:
    """Rescaled microscopic densities against the kinetic solution on ``[0, T]``.

    Every kinetic snapshot in ``[0, T]`` is a comparison time.  Simulations for
    rung ``i`` of the ladder use the random stream ``(i, replica)``.
    """
    spec = ScalingSpec(tuple(epsilons), b, pot)
    dom = sol.domain
    if replicas < 2:
        raise TooFewReplicas("the comparison needs at least 2 replicas per epsilon")
    mask = sol.times <= T * (1 + 1e-12)
    times, targets = sol.times[mask], sol.densities[mask]
    if len(times) == 0:
        raise ValueError("no kinetic snapshot inside [0, T]")
    if horizon_limit is None:
        horizon_limit = T
    rows, summaries, kept = [], [], []
    for i, (eps, b_eps, pot_eps) in enumerate(spec.models()):
        logs = simulate_replicas(b_eps, pot_eps, dom, float(times[-1]), seed, replicas,
                                 threads=threads, stream=(i,))
        if keep_logs:
            kept.append(tuple(logs))
        best = None
        for t, target in zip(times, targets):
            est = estimate_density(logs, dom, float(t), eps)
            diff = np.abs(est.values - target)
            row = ComparisonRow(eps, float(t), float(diff.max()), float(diff.sum() * dom.cell_volume),
                                float(np.sqrt(np.mean(est.stderr**2))))
            rows.append(row)
            if best is None or row.sup_error > best.sup_error:
                best = row
        summaries.append(EpsilonSummary(eps, best.sup_error, best.stderr,
                                        max(r.l1_error for r in rows if r.epsilon == eps)))
    improved = len(summaries) < 2 or summaries[-1].sup_error < summaries[1 if len(summaries) > 2 else 0].sup_error
    return ComparisonReport(tuple(rows), tuple(summaries), float(T), float(horizon_limit),
                            T > horizon_limit * (1 + 1e-12), _monotone(summaries), improved,
                            tuple(kept))
