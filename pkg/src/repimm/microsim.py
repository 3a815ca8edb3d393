"""Exact simulation of the pure-birth process with repulsive immigration.

A new entity appears at ``x`` with rate density
``b(x) * exp(-sum_{y in gamma} phi(x - y))``.  Because that density never
exceeds ``b_bar``, the process is sampled exactly by thinning a homogeneous
space-time Poisson process of intensity ``b_bar`` on ``[0, t_end] x torus``:
a proposal at ``x`` is kept with probability ``b(x)/b_bar * exp(-sum phi)``
evaluated against the configuration at its proposal time.

Observables (window counts, factorial and exponential moments) and the
closed-form ceilings they are compared against also live here.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .errors import ReplayMismatch, TimeOutOfRange, TooFewReplicas, WindowTooLarge
from .model import Potential, RateField, TorusDomain, ball_volume


def replica_rng(seed: int, replica: int, stream: Sequence[int] = ()) -> np.random.Generator:
    """Counter-based generator for one replica, derived from the master seed."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream) + (int(replica),))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True, eq=False)
class Configuration:
    points: np.ndarray  # (n, d)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class WindowSpec:
    """Axis-aligned box ``[lo, hi)`` inside the torus."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lo))
        hi = tuple(float(v) for v in np.atleast_1d(self.hi))
        if len(lo) != len(hi) or any(b <= a for a, b in zip(lo, hi)):
            raise ValueError("window needs lo < hi on every axis")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dimension(self) -> int:
        return len(self.lo)

    @property
    def sides(self) -> tuple[float, ...]:
        return tuple(b - a for a, b in zip(self.lo, self.hi))

    @property
    def volume(self) -> float:
        return float(np.prod(self.sides))

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float).reshape(-1, self.dimension)
        return np.all((points >= np.array(self.lo)) & (points < np.array(self.hi)), axis=1)

    def check(self, dom: TorusDomain) -> None:
        if self.dimension != dom.dimension:
            raise ValueError("window dimension does not match the domain")
        if min(self.lo) < 0 or max(self.hi) > dom.side_length:
            raise ValueError("window must lie inside the torus [0, L)^d")


@dataclass(frozen=True, eq=False)
class EventLog:
    seed: int
    replica: int
    stream: tuple[int, ...]
    t_end: float
    times: np.ndarray  # (n,) strictly increasing birth times
    positions: np.ndarray  # (n, d)
    initial: np.ndarray  # (k, d) configuration at t = 0
    proposals: int
    model: dict = field(default_factory=dict)

    def configuration(self, t: float) -> Configuration:
        """Configuration at time ``t`` (births at exactly ``t`` included)."""
        k = int(np.searchsorted(self.times, t, side="right"))
        return Configuration(np.concatenate([self.initial, self.positions[:k]]))

    def rows(self):
        for t, x in zip(self.times, self.positions):
            yield (self.replica, float(t), *(float(v) for v in x))


# --------------------------------------------------------------------------
# rates


def _energy_brute(pot: Potential, dom: TorusDomain, points: np.ndarray, x: np.ndarray) -> float:
    if len(points) == 0:
        return 0.0
    dx = dom.minimal_image(points - x)
    return float(pot(dx).sum())


def birth_rate_density(
    b: RateField, pot: Potential, gamma: Configuration, x, dom: TorusDomain
) -> float:
    """``b(x) exp(-sum_y phi(x - y))`` with periodic distances."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    bx = float(np.asarray(b(x)).reshape(-1)[0])
    if bx == 0.0:
        return 0.0
    return bx * math.exp(-_energy_brute(pot, dom, gamma.points, x))


class _CellList:
    """Uniform bins of side >= the potential range; neighbour sums visit the
    3^d surrounding bins only."""

    def __init__(self, dom: TorusDomain, pot: Potential):
        self.L = dom.side_length
        self.d = dom.dimension
        self.pot = pot
        n = int(math.floor(self.L / pot.cutoff)) if pot.cutoff > 0 else 1
        self.n = n if n >= 3 else 1
        self.size = self.L / self.n
        self.bins: dict[tuple[int, ...], list[tuple[float, ...]]] = {}
        if self.n == 1:
            self.stencil = [(0,) * self.d]
        else:
            self.stencil = list(itertools.product((-1, 0, 1), repeat=self.d))

    def _key(self, x) -> tuple[int, ...]:
        return tuple(min(int(v // self.size), self.n - 1) for v in x)

    def add(self, x) -> None:
        x = tuple(float(v) for v in x)
        self.bins.setdefault(self._key(x), []).append(x)

    def energy(self, x) -> float:
        L, half, n = self.L, 0.5 * self.L, self.n
        radial = self.pot.radial_scalar
        key = self._key(x)
        total = 0.0
        for off in self.stencil:
            cell = tuple((k + o) % n for k, o in zip(key, off))
            for p in self.bins.get(cell, ()):
                s = 0.0
                for a, b in zip(p, x):
                    dx = a - b
                    if dx > half:
                        dx -= L
                    elif dx < -half:
                        dx += L
                    s += dx * dx
                total += radial(math.sqrt(s))
        return total


def _proposals(rng: np.random.Generator, b_bar: float, dom: TorusDomain, t_end: float):
    n = int(rng.poisson(b_bar * dom.volume * t_end)) if b_bar > 0 and t_end > 0 else 0
    times = rng.uniform(0.0, t_end, n)
    positions = rng.uniform(0.0, dom.side_length, (n, dom.dimension))
    u = rng.random(n)
    order = np.argsort(times, kind="stable")  # ties fall back to proposal index
    return times[order], positions[order], u[order]


def simulate(
    b: RateField,
    pot: Potential,
    dom: TorusDomain,
    t_end: float,
    seed: int,
    replica: int = 0,
    initial: np.ndarray | None = None,
    stream: Sequence[int] = (),
) -> EventLog:
    """One exact sample path on ``[0, t_end]``."""
    if t_end < 0:
        raise ValueError("t_end must be nonnegative")
    dom.check_potential(pot)
    initial = np.zeros((0, dom.dimension)) if initial is None else np.asarray(initial, float).reshape(-1, dom.dimension)
    b_bar = b.b_bar
    rng = replica_rng(seed, replica, stream)
    times, positions, u = _proposals(rng, b_bar, dom, t_end)
    base = b(positions) / b_bar if len(times) else np.zeros(0)

    if pot.is_zero:
        accept = u < base
    else:
        cells = _CellList(dom, pot)
        for p in initial:
            cells.add(p)
        accept = np.zeros(len(times), dtype=bool)
        for i, (x, ui, bi) in enumerate(zip(positions.tolist(), u.tolist(), base.tolist())):
            if ui >= bi:
                continue  # rejected whatever the neighbourhood
            if ui < bi * math.exp(-cells.energy(x)):
                accept[i] = True
                cells.add(x)
    model = {
        "rate": b.kind,
        "b_bar": b_bar,
        "potential": pot.kind,
        "phi_bar": pot.phi_bar,
        "domain": (dom.dimension, dom.side_length),
    }
    return EventLog(int(seed), int(replica), tuple(stream), float(t_end), times[accept],
                    positions[accept], initial, len(times), model)


def simulate_replicas(
    b: RateField,
    pot: Potential,
    dom: TorusDomain,
    t_end: float,
    seed: int,
    replicas: int,
    threads: int = 1,
    stream: Sequence[int] = (),
    initial: np.ndarray | None = None,
) -> list[EventLog]:
    """Independent replicas ``0..replicas-1``; the result is ordered by replica
    index and does not depend on ``threads``."""
    def one(i):
        return simulate(b, pot, dom, t_end, seed, i, initial, stream)

    if threads <= 1:
        return [one(i) for i in range(replicas)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, range(replicas)))


def replay(log: EventLog, b: RateField, pot: Potential, dom: TorusDomain) -> int:
    """Re-derive every accept/reject decision from the logged configuration.

    Regenerates the proposal stream, rebuilds the pre-proposal configuration
    from the log alone and recomputes the acceptance probability by brute
    force.  Returns the number of proposals checked; raises ReplayMismatch on
    the first disagreement.
    """
    rng = replica_rng(log.seed, log.replica, log.stream)
    times, positions, u = _proposals(rng, b.b_bar, dom, log.t_end)
    if len(times) != log.proposals:
        raise ReplayMismatch("proposal count differs from the log")
    born = 0
    for t, x, ui in zip(times, positions, u):
        before = np.concatenate([log.initial, log.positions[:born]])
        p = birth_rate_density(b, pot, Configuration(before), x, dom) / b.b_bar
        accepted = ui < p
        logged = born < len(log.times) and log.times[born] == t and np.array_equal(log.positions[born], x)
        if accepted != logged:
            raise ReplayMismatch(f"decision at t={t} disagrees with the log")
        born += int(accepted)
    if born != len(log.times):
        raise ReplayMismatch("log contains births the replay did not produce")
    return len(times)


# --------------------------------------------------------------------------
# observables


def _check_time(log: EventLog, t: float) -> None:
    if t < 0 or t > log.t_end * (1 + 1e-12):
        raise TimeOutOfRange(f"t={t} outside [0, {log.t_end}]")


def count_window(log: EventLog, w: WindowSpec, t: float) -> int:
    """Entities inside ``w`` at time ``t`` (initial ones included)."""
    _check_time(log, t)
    k = int(np.searchsorted(log.times, t, side="right"))
    return int(w.contains(log.initial).sum() + w.contains(log.positions[:k]).sum())


def window_counts(logs: Sequence[EventLog], w: WindowSpec, times: Sequence[float]) -> np.ndarray:
    """Counts as an array of shape ``(replicas, len(times))``."""
    times = np.asarray(times, dtype=float)
    out = np.empty((len(logs), len(times)), dtype=np.int64)
    for r, log in enumerate(logs):
        for t in times:
            _check_time(log, t)
        inside = log.times[w.contains(log.positions)]
        out[r] = np.searchsorted(inside, times, side="right") + int(w.contains(log.initial).sum())
    return out


def _require_replicas(logs, minimum: int = 2) -> None:
    if len(logs) < minimum:
        raise TooFewReplicas(f"need at least {minimum} replicas, got {len(logs)}")


@dataclass(frozen=True, eq=False)
class MomentSeries:
    times: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    stderr: np.ndarray
    replicas: int

    def rows(self):
        for row in zip(self.times, self.mean, self.var, self.stderr):
            yield tuple(float(v) for v in row)


def mean_trajectory(logs: Sequence[EventLog], w: WindowSpec, times: Sequence[float]) -> MomentSeries:
    _require_replicas(logs)
    counts = window_counts(logs, w, times).astype(float)
    var = counts.var(axis=0, ddof=1)
    return MomentSeries(np.asarray(times, float), counts.mean(axis=0), var,
                        np.sqrt(var / len(logs)), len(logs))


def covering_bound(w: WindowSpec, r: float, d: int | None = None) -> tuple[int, float]:
    """Cubic-lattice cover of ``w`` by balls of radius ``r/2``.

    Each lattice cube has side ``r/sqrt(d)`` and so fits in one ball; the
    count is an upper bound on the minimal cover.  Returns ``(m, ball volume)``.
    """
    if not r > 0:
        raise ValueError("r must be positive")
    d = w.dimension if d is None else d
    side = r / math.sqrt(d)
    m = 1
    for s in w.sides:
        m *= max(1, math.ceil(s / side - 1e-12))
    return m, ball_volume(r / 2, d)


def theorem2_bound(m: int, upsilon: float, phi_star: float, b_bar: float, C0: float, t):
    """``(m / phi_*) log(C0 + (e^{phi_*} - 1) b_bar upsilon t)``: logarithmic
    ceiling on the expected count in a window covered by ``m`` balls."""
    if not phi_star > 0:
        raise ValueError("phi_* must be positive")
    if C0 < 1:
        raise ValueError("C0 must be at least 1")
    t = np.asarray(t, dtype=float)
    out = m / phi_star * np.log(C0 + math.expm1(phi_star) * b_bar * upsilon * t)
    return float(out) if out.ndim == 0 else out


def moment_constant(alpha: float, theta: float, volume: float) -> float:
    """``exp((e^alpha - 1) e^theta |window|)``; equals 1 for an empty state."""
    return math.exp(math.expm1(alpha) * math.exp(theta) * volume)


@dataclass(frozen=True, eq=False)
class ExpMomentSeries:
    times: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    bound: np.ndarray
    passed: np.ndarray


def exp_moment_series(
    logs: Sequence[EventLog],
    w: WindowSpec,
    phi_star: float,
    times: Sequence[float],
    r: float,
    b_bar: float,
    C0: float = 1.0,
    sigmas: float = 3.0,
) -> ExpMomentSeries:
    """Empirical ``E exp(phi_* N_w(t))`` against the linear ceiling
    ``C0 + (e^{phi_*} - 1) b_bar upsilon t``, which holds when ``w`` fits in a
    ball of radius ``r/2``."""
    _require_replicas(logs)
    limit = r / math.sqrt(w.dimension)
    if max(w.sides) > limit * (1 + 1e-12):
        raise WindowTooLarge(f"window sides {w.sides} exceed r/sqrt(d) = {limit}")
    upsilon = ball_volume(r / 2, w.dimension)
    f = np.exp(phi_star * window_counts(logs, w, times).astype(float))
    mean = f.mean(axis=0)
    stderr = f.std(axis=0, ddof=1) / math.sqrt(len(logs))
    bound = C0 + math.expm1(phi_star) * b_bar * upsilon * np.asarray(times, float)
    return ExpMomentSeries(np.asarray(times, float), mean, stderr, bound, mean <= bound + sigmas * stderr)


@dataclass(frozen=True)
class FactorialMoment:
    m: int
    value: float
    stderr: float
    ceiling: float
    passed: bool


def factorial_moments(
    logs: Sequence[EventLog],
    w: WindowSpec,
    t: float,
    max_m: int,
    b_bar: float,
    theta0: float = -math.inf,
    sigmas: float = 3.0,
) -> list[FactorialMoment]:
    """Sample ``E[N(N-1)...(N-m+1)]`` for ``m = 1..max_m`` against the
    sub-Poisson ceiling ``(e^{theta_t} |w|)^m``, ``theta_t = log(e^theta0 + b_bar t)``."""
    if not 1 <= max_m <= 4:
        raise ValueError("max_m must be between 1 and 4")
    _require_replicas(logs)
    n = window_counts(logs, w, [t])[:, 0].astype(float)
    kappa = math.exp(theta0) + b_bar * t
    out = []
    falling = np.ones_like(n)
    for m in range(1, max_m + 1):
        falling = falling * (n - (m - 1))
        value = float(falling.mean())
        se = float(falling.std(ddof=1) / math.sqrt(len(n)))
        ceiling = (kappa * w.volume) ** m
        out.append(FactorialMoment(m, value, se, ceiling, value <= ceiling + sigmas * se))
    return out


@dataclass(frozen=True, eq=False)
class BoundSeries:
    """Mean window count against the logarithmic ceiling, per sampled time."""

    moments: MomentSeries
    bound: np.ndarray
    passed: np.ndarray

    def rows(self):
        for (t, mean, var, se), b, ok in zip(self.moments.rows(), self.bound, self.passed):
            yield (t, mean, var, se, float(b), int(bool(ok)))


def theorem2_series(
    logs: Sequence[EventLog],
    w: WindowSpec,
    times: Sequence[float],
    r: float,
    phi_star: float,
    b_bar: float,
    C0: float = 1.0,
    sigmas: float = 3.0,
) -> BoundSeries:
    mom = mean_trajectory(logs, w, times)
    m, upsilon = covering_bound(w, r)
    bound = np.asarray(theorem2_bound(m, upsilon, phi_star, b_bar, C0, mom.times), dtype=float)
    return BoundSeries(mom, bound, mom.mean <= bound + sigmas * mom.stderr)


def poisson_gof(counts: Sequence[int], lam: float, min_expected: float = 5.0) -> float:
    """Chi-square goodness-of-fit p-value of integer counts against Poisson(lam).

    Cells are merged from both tails until every cell expects at least
    ``min_expected`` observations.
    """
    counts = np.asarray(counts, dtype=int)
    n = len(counts)
    kmax = max(int(counts.max()), int(stats.poisson.ppf(1 - 1e-12, lam)))
    k = np.arange(kmax + 1)
    probs = stats.poisson.pmf(k, lam)
    probs[-1] += stats.poisson.sf(kmax, lam)
    observed = np.bincount(np.minimum(counts, kmax), minlength=kmax + 1).astype(float)
    # merge cells left to right, then fold an underfilled remainder backwards
    obs_cells, exp_cells = [], []
    o_acc = e_acc = 0.0
    for o, p in zip(observed, probs):
        o_acc += o
        e_acc += p * n
        if e_acc >= min_expected:
            obs_cells.append(o_acc)
            exp_cells.append(e_acc)
            o_acc = e_acc = 0.0
    if e_acc > 0 or o_acc > 0:
        if exp_cells:
            obs_cells[-1] += o_acc
            exp_cells[-1] += e_acc
        else:
            obs_cells.append(o_acc)
            exp_cells.append(e_acc)
    if len(obs_cells) < 2:
        return 1.0
    obs, exp = np.array(obs_cells), np.array(exp_cells)
    exp *= obs.sum() / exp.sum()
    return float(stats.chisquare(obs, exp).pvalue)


@dataclass(frozen=True)
class PoissonCheck:
    """Window counts against Poisson(lam): mean within ``4 sqrt(lam / R)``,
    dispersion ``var/mean`` in [0.8, 1.2], goodness-of-fit p-value above 0.01."""

    lam: float
    mean: float
    mean_tolerance: float
    dispersion: float
    p_value: float

    @property
    def mean_ok(self) -> bool:
        return abs(self.mean - self.lam) <= self.mean_tolerance

    @property
    def dispersion_ok(self) -> bool:
        return 0.8 <= self.dispersion <= 1.2

    @property
    def gof_ok(self) -> bool:
        return self.p_value > 0.01

    @property
    def passed(self) -> bool:
        return self.mean_ok and self.dispersion_ok and self.gof_ok


def poisson_check(counts: Sequence[int], lam: float) -> PoissonCheck:
    counts = np.asarray(counts)
    if len(counts) < 2:
        raise TooFewReplicas("a Poisson check needs at least 2 replicas")
    mean = float(counts.mean())
    disp = float(counts.var(ddof=1) / mean) if mean > 0 else math.nan
    return PoissonCheck(float(lam), mean, 4 * math.sqrt(lam / len(counts)), disp, poisson_gof(counts, lam))
