"""Command-line driver: ``repimm {kinetic,patches,micro,meso,horizon} --config run.json``.

Exit codes: 0 all checks pass, 1 configuration error, 2 numeric/model error,
3 at least one check failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, parse_config, serialize
from .csvio import field_header, write_csv
from .errors import ConfigError, ModelError
from .horizons import horizon_tau
from .kinetic import (
    KineticConfig,
    effective_rates,
    EnvelopeBounds,
    homogeneous_deviation,
    solve,
    verify_bounds,
)
from .meso import (
    convergence_report,
    estimate_pair_correlation,
    scaled_kernel_mass,
    surrogate_theta0,
    theorem4_horizon,
    vlasov_residual,
)
from .microsim import (
    WindowSpec,
    exp_moment_series,
    factorial_moments,
    poisson_check,
    simulate_replicas,
    theorem2_series,
    mean_trajectory,
    window_counts,
)
from .model import ScalarField, potential_stats
from .patches import PatchParams, asymptote_A, explicit_alpha1, solve_patch

log = logging.getLogger("repimm")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 1, 2, 3


@dataclass
class Check:
    name: str
    passed: bool
    slack: float  # worst-case margin; negative means violated
    detail: str = ""


@dataclass
class ReportSummary:
    subcommand: str
    seed: int
    version: str
    checks: list[Check] = field(default_factory=list)
    values: dict = field(default_factory=dict)
    artifacts: list[str] = field(default_factory=list)
    runtime: float = 0.0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name: str, passed: bool, slack: float, detail: str = "") -> None:
        if any(c.name == name for c in self.checks):
            raise ValueError(f"check {name!r} listed twice")
        self.checks.append(Check(name, bool(passed), float(slack), detail))

    def to_json(self) -> str:
        doc = asdict(self)
        doc["passed"] = self.passed
        return json.dumps(doc, indent=2, default=float) + "\n"

    def to_text(self) -> str:
        lines = [f"repimm {self.version}  {self.subcommand}  seed={self.seed}  runtime={self.runtime:.3f}s"]
        for k, v in self.values.items():
            lines.append(f"  {k} = {v:.12g}" if isinstance(v, float) else f"  {k} = {v}")
        for c in self.checks:
            tag = "PASS" if c.passed else "FAIL"
            lines.append(f"{tag} {c.name}  slack={c.slack:.6g}  {c.detail}".rstrip())
        lines.append("overall: " + ("PASS" if self.passed else "FAIL"))
        return "\n".join(lines) + "\n"


class _Writer:
    """Single writer for every artifact of a run."""

    def __init__(self, out: Path, summary: ReportSummary):
        self.out = out
        self.summary = summary
        out.mkdir(parents=True, exist_ok=True)

    def csv(self, name: str, header, rows) -> None:
        write_csv(self.out / name, header, rows)
        self.summary.artifacts.append(name)

    def text(self, name: str, text: str) -> None:
        (self.out / name).write_text(text, encoding="utf-8")


# --------------------------------------------------------------------------
# subcommands


def _model(cfg: RunConfig):
    m = cfg.model
    dom, pot = m.domain, m.potential
    rate = m.rate.build(dom)
    rho0 = ScalarField(dom, np.full(dom.shape, m.rho0))
    return dom, pot, rate, rho0


def run_kinetic(cfg: RunConfig, w: _Writer, threads: int) -> None:
    s, rep = cfg.solver, w.summary
    dom, pot, rate, rho0 = _model(cfg)
    kcfg = KineticConfig(dom, pot, rate, rho0, s.dt, s.t_end, s.method, s.rhs_variant, s.snapshots)
    sol = solve(kcfg)
    w.csv("kinetic.csv", ["t", "cell_index", "rho"], sol.rows())
    w.csv("kinetic_final.csv", field_header(dom.dimension), sol.final.rows())
    l1 = potential_stats(pot, dom).l1_norm
    rep.values["l1_norm"], rep.values["l1_norm_grid"] = l1, sol.l1_norm_grid
    if sol.picard_iterations:
        rep.values["picard_iterations_max"] = max(sol.picard_iterations)
    if rate.is_homogeneous and cfg.model.rho0 == 0 and s.rhs_variant == "kinetic":
        dev = homogeneous_deviation(sol, rate.b_bar, l1)
        rep.add("homogeneous_exact", dev <= 1e-6, 1e-6 - dev, f"max relative deviation {dev:.3g}")
    if sol.l1_norm_grid > 0:
        bm, bp = effective_rates(rate, pot, rho0, s.rhs_variant)
        bounds = verify_bounds(sol, EnvelopeBounds(bm, bp), rho0, raise_on_violation=False,
                               l1_norm_analytic=l1)
        w.csv("kinetic_bounds.csv", ["t", "omega_minus", "omega_plus", "min_slack", "max_slack"],
              ((r.t, r.omega_minus, r.omega_plus, r.min_slack, r.max_slack) for r in bounds.rows))
        rep.values["b_minus"], rep.values["b_plus"] = bm, bp
        rep.add("envelope_bounds", bounds.passed, bounds.worst_slack,
                f"worst at t={bounds.worst_time:.6g}, cell {bounds.worst_cell}")


def run_patches(cfg: RunConfig, w: _Writer, threads: int) -> None:
    s, pp, rep = cfg.solver, cfg.patches, w.summary
    p = PatchParams(pp.b_A, pp.b_B, pp.alpha)
    traj = solve_patch(p, s.t_end, s.dt, s.stride)
    w.csv("patches.csv", ["t", "rho_A", "rho_B", "invariant_residual"], traj.rows())
    final = traj.state(len(traj.t) - 1)
    rep.values["rho_A_final"], rep.values["rho_B_final"] = final.rho_A, final.rho_B
    if p.alpha == 1:
        worst = max(
            max(abs(a - e.rho_A), abs(b - e.rho_B))
            for t, a, b in zip(traj.t, traj.rho_A, traj.rho_B)
            for e in (explicit_alpha1(p.b_A, p.b_B, float(t)),)
        )
        rep.add("explicit_alpha1", worst <= 1e-6, 1e-6 - worst, f"max deviation {worst:.3g}")
    else:
        worst = float(np.max(np.abs(traj.invariant_residuals())))
        rep.add("invariant", worst <= 1e-8, 1e-8 - worst, f"max |residual| {worst:.3g}")
    if p.alpha < 1 and p.b_A < p.b_B:
        cap = asymptote_A(p)
        rep.values["asymptote_A"] = cap
        top = float(np.max(traj.rho_A))
        rep.add("saturation_bound", top <= cap + 1e-9, cap - top, "rho_A stays below its asymptote")


def _times(cfg: RunConfig) -> np.ndarray:
    if cfg.micro.times is not None:
        return np.asarray(cfg.micro.times, dtype=float)
    return np.linspace(0.0, cfg.solver.t_end, 21)


def run_micro(cfg: RunConfig, w: _Writer, threads: int) -> None:
    mi, rep = cfg.micro, w.summary
    dom, pot, rate, _ = _model(cfg)
    if cfg.model.rho0 != 0:
        raise ConfigError("microscopic runs start empty; set model.rho0 to 0")
    win = WindowSpec(mi.window_lo, mi.window_hi)
    win.check(dom)
    times = _times(cfg)
    t_end = float(max(times.max(), cfg.solver.t_end))
    logs = simulate_replicas(rate, pot, dom, t_end, mi.seed, mi.replicas, threads=threads)
    if mi.save_events:
        header = ["replica", "t", *(f"x{i}" for i in range(dom.dimension))]
        w.csv("micro_events.csv", header, (row for lg in logs for row in lg.rows()))
    r, phi_star = pot.floor()
    header = ["t", "mean_N", "var_N", "stderr", "bound32b", "pass"]
    if r is None:
        mom = mean_trajectory(logs, win, times)
        w.csv("micro_trajectory.csv", header, ((*row, math.nan, 1) for row in mom.rows()))
    else:
        series = theorem2_series(logs, win, times, r, phi_star, rate.b_bar)
        w.csv("micro_trajectory.csv", header, series.rows())
        slack = series.bound + 3 * series.moments.stderr - series.moments.mean
        rep.add("theorem2_bound", bool(series.passed.all()), float(slack.min()),
                "mean window count under the logarithmic ceiling")
        if max(win.sides) <= r / math.sqrt(win.dimension):
            ex = exp_moment_series(logs, win, phi_star, times, r, rate.b_bar)
            w.csv("micro_exp_moment.csv", ["t", "mean_exp", "stderr", "bound", "pass"],
                  zip(ex.times, ex.mean, ex.stderr, ex.bound, ex.passed.astype(int)))
            slack = ex.bound + 3 * ex.stderr - ex.mean
            rep.add("exp_moment_bound", bool(ex.passed.all()), float(slack.min()),
                    "exponential moment under the linear ceiling")
    t_last = float(times.max())
    fms = factorial_moments(logs, win, t_last, mi.max_factorial, rate.b_bar)
    w.csv("micro_factorial.csv", ["m", "value", "stderr", "ceiling", "pass"],
          ((f.m, f.value, f.stderr, f.ceiling, int(f.passed)) for f in fms))
    worst = min(f.ceiling + 3 * f.stderr - f.value for f in fms if f.m >= 2) if mi.max_factorial >= 2 else math.inf
    rep.add("factorial_moments", all(f.passed for f in fms), worst, f"at t={t_last:.6g}")
    if pot.is_zero and rate.is_homogeneous:
        counts = window_counts(logs, win, [t_last])[:, 0]
        pc = poisson_check(counts, rate.b_bar * win.volume * t_last)
        rep.values.update(poisson_mean=pc.mean, poisson_dispersion=pc.dispersion, poisson_p=pc.p_value)
        rep.add("poisson_mean", pc.mean_ok, pc.mean_tolerance - abs(pc.mean - pc.lam))
        rep.add("poisson_dispersion", pc.dispersion_ok, min(pc.dispersion - 0.8, 1.2 - pc.dispersion))
        rep.add("poisson_gof", pc.gof_ok, pc.p_value - 0.01)


def run_meso(cfg: RunConfig, w: _Writer, threads: int) -> None:
    mi, s, rep = cfg.micro, cfg.solver, w.summary
    dom, pot, rate, rho0 = _model(cfg)
    if cfg.model.rho0 != 0:
        raise ConfigError("mesoscopic runs start empty; set model.rho0 to 0")
    stats = potential_stats(pot, dom)
    stats.require_positive_mass()
    limit = theorem4_horizon(surrogate_theta0(cfg.model.rho0), rate.b_bar, stats.l1_norm)
    T = mi.comparison_time if mi.comparison_time is not None else min(limit, mi.horizon_cap)
    rep.values.update(horizon_limit=limit, horizon=T)
    # uniform kinetic steps, eleven equispaced comparison snapshots
    n = 10 * max(1, math.ceil(T / (10 * s.dt)))
    kcfg = KineticConfig(dom, pot, rate, rho0, T / n, T, "rk4", "kinetic", tuple(np.linspace(0, T, 11)))
    sol = solve(kcfg)
    res = vlasov_residual(sol, pot, rate)
    rep.add("vlasov_residual", res <= 1e-6, 1e-6 - res, f"{res:.3g}")
    for e in mi.epsilons:
        mass = scaled_kernel_mass(pot, dom, e)
        rep.add(f"kernel_mass_eps_{e:g}", mass <= sol.l1_norm_grid + 1e-12, sol.l1_norm_grid - mass)
    keep = bool(mi.pair_bins)
    cr = convergence_report(rate, pot, sol, mi.epsilons, T, mi.replicas, mi.seed, threads,
                            horizon_limit=limit, keep_logs=keep)
    w.csv("meso.csv", ["epsilon", "t", "sup_error", "l1_error", "stderr"], cr.rows_csv())
    for sm in cr.summaries:
        rep.values[f"sup_error_eps_{sm.epsilon:g}"] = sm.sup_error
    rep.values["extrapolated"] = cr.extrapolated
    rep.add("monotone_ladder", cr.monotone, 0.0, "nonincreasing up to 2 pooled stderr")
    if len(cr.summaries) >= 2:
        a, b = cr.summaries[-1], cr.summaries[1 if len(cr.summaries) > 2 else 0]
        rep.add("strict_improvement", cr.improved, b.sup_error - a.sup_error,
                f"eps={a.epsilon:g} against eps={b.epsilon:g}")
    if keep:
        pc = estimate_pair_correlation(cr.logs[0], mi.pair_bins, T, dom)
        w.csv("meso_pair.csv", ["bin_lo", "bin_hi", "g2", "stderr"], pc.rows())


def run_horizon(cfg: RunConfig, w: _Writer, threads: int) -> None:
    h, rep = cfg.horizon, w.summary
    ht = horizon_tau(h.theta0, h.b_bar, h.l1_norm)
    t4 = theorem4_horizon(h.theta0, h.b_bar, h.l1_norm)
    rep.values.update(delta=ht.delta, tau=ht.tau, T4=t4)
    w.csv("horizon.csv", ["theta0", "b_bar", "l1_norm", "delta", "tau", "T4"],
          [(h.theta0, h.b_bar, h.l1_norm, ht.delta, ht.tau, t4)])
    gap = abs(ht.tau - ht.tau_alt) / ht.tau
    rep.add("tau_closed_forms_agree", gap <= 1e-12, 1e-12 - gap)
    print(f"delta = {ht.delta:.12g}\ntau = {ht.tau:.12g}\nT4 = {t4:.12g}")


RUNNERS = {
    "kinetic": run_kinetic,
    "patches": run_patches,
    "micro": run_micro,
    "meso": run_meso,
    "horizon": run_horizon,
}


def run(cfg: RunConfig, threads: int = 1) -> tuple[int, ReportSummary]:
    """Execute a validated config, writing artifacts into ``cfg.output``."""
    summary = ReportSummary(cfg.subcommand, cfg.seed, __version__)
    writer = _Writer(Path(cfg.output), summary)
    writer.text("config.json", serialize(cfg))
    start = time.perf_counter()
    try:
        RUNNERS[cfg.subcommand](cfg, writer, threads)
        code = EXIT_OK if summary.passed else EXIT_CHECK
    except ConfigError as exc:
        summary.values["error"] = f"{type(exc).__name__}: {exc}"
        code = EXIT_CONFIG
    except (ModelError, ValueError) as exc:
        summary.values["error"] = f"{type(exc).__name__}: {exc}"
        code = EXIT_NUMERIC
    summary.runtime = time.perf_counter() - start
    writer.text("report.json", summary.to_json())
    writer.text("report.txt", summary.to_text())
    return code, summary


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="repimm", description=__doc__.splitlines()[0])
    ap.add_argument("subcommand", nargs="?", choices=sorted(RUNNERS),
                    help="overrides the subcommand named in the config")
    ap.add_argument("--config", required=True, type=Path, help="JSON run configuration")
    ap.add_argument("--out", help="output directory (overrides config)")
    ap.add_argument("--seed", type=int, help="master seed, unsigned 64-bit (overrides config)")
    ap.add_argument("--threads", type=int, default=1, help="worker threads for replicas")
    mode = ap.add_mutually_exclusive_group()
    mode.add_argument("--strict", dest="strict", action="store_true", default=True,
                      help="reject unknown config keys (default)")
    mode.add_argument("--lenient", dest="strict", action="store_false", help="ignore unknown config keys")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        text = args.config.read_text(encoding="utf-8")
        doc_sub = args.subcommand
        cfg = parse_config(text, strict=args.strict)
        if doc_sub is not None and doc_sub != cfg.subcommand:
            raise ConfigError(f"command line asks for {doc_sub!r} but the config is for {cfg.subcommand!r}")
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        cfg = cfg.with_overrides(seed=args.seed, output=args.out)
    except (ConfigError, OSError, UnicodeDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    code, summary = run(cfg, threads=args.threads)
    sys.stdout.write(summary.to_text())
    if "error" in summary.values:
        print(summary.values["error"], file=sys.stderr)
    return code
