"""JSON run configuration: parsing, validation, defaults and serialization.

A document looks like::

    {
      "subcommand": "kinetic",
      "output": "out",
      "model": {
        "domain": {"dimension": 1, "side_length": 10, "grid_points": 100},
        "potential": {"kind": "tophat", "amplitude": 1, "scale": 0.5},
        "rate": {"kind": "constant", "value": 1}
      },
      "solver": {"dt": 0.01, "t_end": 50}
    }

Sections needed per subcommand: ``kinetic`` needs model and solver;
``patches`` needs patches and solver; ``micro`` and ``meso`` need model,
solver and micro; ``horizon`` needs horizon.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from typing import Any

import numpy as np

from .errors import ConfigError, ModelError, ParseError, RangeError, UnknownKey
from .kinetic import MAX_RATE_STEP
from .model import (
    ConstantRate,
    Potential,
    RateField,
    ScalarField,
    SinusoidRate,
    PatchRate,
    TabulatedRate,
    TorusDomain,
    build_attraction_rate,
)

log = logging.getLogger(__name__)

SUBCOMMANDS = ("kinetic", "patches", "micro", "meso", "horizon")
REQUIRED = {
    "kinetic": ("model", "solver"),
    "patches": ("patches", "solver"),
    "micro": ("model", "solver", "micro"),
    "meso": ("model", "solver", "micro"),
    "horizon": ("horizon",),
}


@dataclass(frozen=True)
class RateSpec:
    """Declarative immigration rate; :meth:`build` turns it into a RateField."""

    kind: str = "constant"
    value: float = 1.0
    base: float = 1.0
    amplitude: float = 0.0
    period: float | None = None  # sinusoid period / torus period for attraction
    axis: int = 0
    patches: tuple = ()  # ((lo...), (hi...), value)
    centers: tuple = ()
    kernel: Potential | None = None
    coupling: float = 1.0
    cap: float | None = None
    values: tuple = ()  # tabulated, flattened in C order on the model grid

    def build(self, dom: TorusDomain) -> RateField:
        if self.kind == "constant":
            return ConstantRate(self.value)
        if self.kind == "sinusoid":
            return SinusoidRate(self.base, self.amplitude, self.period or dom.side_length, self.axis)
        if self.kind == "patches":
            return PatchRate(self.patches)
        if self.kind == "attraction_centers":
            if self.kernel is None:
                raise ValueError("attraction_centers needs a kernel")
            return build_attraction_rate(self.centers, self.kernel, self.base, self.cap,
                                         self.coupling, self.period or dom.side_length)
        if self.kind == "tabulated":
            vals = np.asarray(self.values, dtype=float)
            if vals.size != math.prod(dom.shape):
                raise ValueError(f"tabulated rate needs {math.prod(dom.shape)} values, got {vals.size}")
            return TabulatedRate(ScalarField(dom, vals.reshape(dom.shape)))
        raise ValueError(f"unknown rate kind {self.kind!r}")


@dataclass(frozen=True)
class ModelSection:
    domain: TorusDomain
    potential: Potential
    rate: RateSpec = RateSpec()
    rho0: float = 0.0  # constant initial density


@dataclass(frozen=True)
class SolverSection:
    dt: float = 0.01
    t_end: float = 1.0
    method: str = "rk4"
    rhs_variant: str = "kinetic"
    snapshots: tuple[float, ...] | None = None
    stride: int = 1  # patches: keep every stride-th step


@dataclass(frozen=True)
class MicroSection:
    seed: int = 0
    replicas: int = 100
    window_lo: tuple[float, ...] = (0.0,)
    window_hi: tuple[float, ...] = (1.0,)
    times: tuple[float, ...] | None = None  # default: 21 equispaced points in [0, t_end]
    epsilons: tuple[float, ...] = (1.0, 0.5, 0.25, 0.125)
    horizon_cap: float = 1.0
    comparison_time: float | None = None  # meso: overrides the default horizon
    pair_bins: tuple[float, ...] = ()
    max_factorial: int = 3
    save_events: bool = True


@dataclass(frozen=True)
class PatchSection:
    b_A: float = 1.0
    b_B: float = 2.0
    alpha: float = 0.5


@dataclass(frozen=True)
class HorizonSection:
    theta0: float = -1.0
    b_bar: float = 1.0
    l1_norm: float = 1.0


@dataclass(frozen=True)
class RunConfig:
    subcommand: str
    output: str = "out"
    model: ModelSection | None = None
    solver: SolverSection | None = None
    micro: MicroSection | None = None
    patches: PatchSection | None = None
    horizon: HorizonSection | None = None

    @property
    def seed(self) -> int:
        return self.micro.seed if self.micro is not None else 0

    def with_overrides(self, seed: int | None = None, output: str | None = None) -> "RunConfig":
        cfg = self
        if seed is not None:
            cfg = dataclasses.replace(cfg, micro=dataclasses.replace(cfg.micro or MicroSection(), seed=seed))
        if output is not None:
            cfg = dataclasses.replace(cfg, output=output)
        return cfg


# --------------------------------------------------------------------------
# parsing


class _Reader:
    def __init__(self, text: str, strict: bool):
        self.text = text
        self.strict = strict

    def line_of(self, key: str) -> int | None:
        needle = json.dumps(key)
        for i, line in enumerate(self.text.splitlines(), start=1):
            if needle in line:
                return i
        return None

    def fail(self, message: str, key: str, cls=ParseError):
        raise cls(message, line=self.line_of(key.split(".")[-1]), key=key)

    def section(self, obj, path: str, allowed) -> dict:
        if not isinstance(obj, dict):
            self.fail("expected an object", path)
        unknown = sorted(set(obj) - set(allowed))
        for k in unknown:
            if self.strict:
                self.fail("unknown key", f"{path}.{k}" if path else k, UnknownKey)
            log.warning("ignoring unknown key %s", f"{path}.{k}" if path else k)
        return {k: v for k, v in obj.items() if k in allowed}

    def number(self, obj: dict, key: str, path: str, default=None, integer=False, optional=False):
        if key not in obj or (optional and obj[key] is None):
            return default
        v = obj[key]
        if isinstance(v, bool) or not isinstance(v, (int, float)) or (integer and not isinstance(v, int)):
            self.fail("expected an integer" if integer else "expected a number", f"{path}.{key}")
        if not integer and not math.isfinite(v):
            self.fail("expected a finite number", f"{path}.{key}")
        return int(v) if integer else float(v)

    def string(self, obj: dict, key: str, path: str, default=None, choices=None):
        if key not in obj:
            return default
        v = obj[key]
        if not isinstance(v, str):
            self.fail("expected a string", f"{path}.{key}")
        if choices is not None and v not in choices:
            self.fail(f"expected one of {', '.join(choices)}", f"{path}.{key}")
        return v

    def vector(self, obj: dict, key: str, path: str, default=None, optional=False):
        if key not in obj or (optional and obj[key] is None):
            return default
        v = obj[key]
        if not isinstance(v, list) or any(isinstance(x, bool) or not isinstance(x, (int, float)) for x in v):
            self.fail("expected a list of numbers", f"{path}.{key}")
        return tuple(float(x) for x in v)


def _fields(cls) -> list[str]:
    return [f.name for f in dataclasses.fields(cls)]


def _parse_domain(r: _Reader, obj) -> TorusDomain:
    p = "model.domain"
    obj = r.section(obj, p, _fields(TorusDomain))
    if "dimension" not in obj or "side_length" not in obj:
        r.fail("domain needs dimension and side_length", p)
    d = r.number(obj, "dimension", p, integer=True)
    if d not in (1, 2):
        r.fail("dimension must be 1 or 2", f"{p}.dimension", RangeError)
    return TorusDomain(d, r.number(obj, "side_length", p), r.number(obj, "grid_points", p, 64, integer=True))


def _parse_potential(r: _Reader, obj, path: str) -> Potential:
    obj = r.section(obj, path, _fields(Potential))
    kind = r.string(obj, "kind", path, choices=("tophat", "gaussian", "exponential", "tabulated"))
    if kind is None:
        r.fail("potential needs a kind", path)
    table = ()
    if "table" in obj:
        raw = obj["table"]
        if not isinstance(raw, list) or not all(isinstance(row, list) and len(row) == 2 for row in raw):
            r.fail("table must be a list of [radius, value] pairs", f"{path}.table")
        table = tuple((float(a), float(b)) for a, b in raw)
    return Potential(
        kind,
        r.number(obj, "amplitude", path, 1.0),
        r.number(obj, "scale", path, 1.0),
        r.number(obj, "cutoff", path, None, optional=True),
        table,
        r.number(obj, "floor_radius", path, None, optional=True),
    )


def _parse_rate(r: _Reader, obj) -> RateSpec:
    p = "model.rate"
    obj = r.section(obj, p, _fields(RateSpec))
    kind = r.string(obj, "kind", p, "constant",
                    ("constant", "sinusoid", "patches", "attraction_centers", "tabulated"))
    patches = ()
    if "patches" in obj:
        raw = obj["patches"]
        try:
            patches = tuple((tuple(map(float, lo)), tuple(map(float, hi)), float(v)) for lo, hi, v in raw)
        except (TypeError, ValueError):
            r.fail("patches must be a list of [lo, hi, value] with lo, hi lists", f"{p}.patches")
    centers = ()
    if "centers" in obj:
        try:
            centers = tuple(tuple(float(x) for x in c) for c in obj["centers"])
        except (TypeError, ValueError):
            r.fail("centers must be a list of coordinate lists", f"{p}.centers")
    kernel = _parse_potential(r, obj["kernel"], f"{p}.kernel") if obj.get("kernel") is not None else None
    defaults = RateSpec()
    return RateSpec(
        kind,
        r.number(obj, "value", p, defaults.value),
        r.number(obj, "base", p, defaults.base),
        r.number(obj, "amplitude", p, defaults.amplitude),
        r.number(obj, "period", p, None, optional=True),
        r.number(obj, "axis", p, 0, integer=True),
        patches,
        centers,
        kernel,
        r.number(obj, "coupling", p, defaults.coupling),
        r.number(obj, "cap", p, None, optional=True),
        r.vector(obj, "values", p, ()),
    )


def _parse_model(r: _Reader, obj) -> ModelSection:
    obj = r.section(obj, "model", _fields(ModelSection))
    for k in ("domain", "potential"):
        if k not in obj:
            r.fail("missing section", f"model.{k}")
    return ModelSection(
        _parse_domain(r, obj["domain"]),
        _parse_potential(r, obj["potential"], "model.potential"),
        _parse_rate(r, obj.get("rate", {})),
        r.number(obj, "rho0", "model", 0.0),
    )


def _parse_solver(r: _Reader, obj) -> SolverSection:
    p = "solver"
    obj = r.section(obj, p, _fields(SolverSection))
    return SolverSection(
        r.number(obj, "dt", p, 0.01),
        r.number(obj, "t_end", p, 1.0),
        r.string(obj, "method", p, "rk4", ("rk4", "picard")),
        r.string(obj, "rhs_variant", p, "kinetic", ("kinetic", "closure")),
        r.vector(obj, "snapshots", p, None, optional=True),
        r.number(obj, "stride", p, 1, integer=True),
    )


def _parse_micro(r: _Reader, obj) -> MicroSection:
    p = "micro"
    obj = r.section(obj, p, _fields(MicroSection))
    d = MicroSection()
    save = obj.get("save_events", d.save_events)
    if not isinstance(save, bool):
        r.fail("expected true or false", f"{p}.save_events")
    return MicroSection(
        r.number(obj, "seed", p, d.seed, integer=True),
        r.number(obj, "replicas", p, d.replicas, integer=True),
        r.vector(obj, "window_lo", p, d.window_lo),
        r.vector(obj, "window_hi", p, d.window_hi),
        r.vector(obj, "times", p, None, optional=True),
        r.vector(obj, "epsilons", p, d.epsilons),
        r.number(obj, "horizon_cap", p, d.horizon_cap),
        r.number(obj, "comparison_time", p, None, optional=True),
        r.vector(obj, "pair_bins", p, d.pair_bins),
        r.number(obj, "max_factorial", p, d.max_factorial, integer=True),
        save,
    )


def _parse_flat(r: _Reader, obj, cls, path: str):
    obj = r.section(obj, path, _fields(cls))
    d = cls()
    return cls(**{k: r.number(obj, k, path, getattr(d, k)) for k in _fields(cls)})


def _validate(r: _Reader, cfg: RunConfig) -> None:
    """Relay module preconditions as RangeError."""
    s, m = cfg.solver, cfg.model
    if s is not None:
        if not s.dt > 0:
            r.fail("dt must be positive", "solver.dt", RangeError)
        if not s.t_end >= 0:
            r.fail("t_end must be nonnegative", "solver.t_end", RangeError)
        if s.stride < 1:
            r.fail("stride must be at least 1", "solver.stride", RangeError)
    if m is not None:
        try:
            rate = m.rate.build(m.domain)
            m.domain.check_potential(m.potential)
        except (ModelError, ValueError) as exc:
            raise RangeError(f"model: {exc}") from exc
        if m.rho0 < 0:
            r.fail("initial density must be nonnegative", "model.rho0", RangeError)
        if s is not None and cfg.subcommand == "kinetic" and s.dt * rate.b_bar > MAX_RATE_STEP:
            r.fail(f"dt * b_bar = {s.dt * rate.b_bar:.3g} exceeds {MAX_RATE_STEP}", "solver.dt", RangeError)
    if cfg.patches is not None and s is not None:
        p = cfg.patches
        if not (p.b_A > 0 and p.b_B > 0 and p.alpha >= 0):
            r.fail("patch rates must be positive and alpha nonnegative", "patches", RangeError)
        if s.dt * max(p.b_A, p.b_B) > MAX_RATE_STEP:
            r.fail(f"dt * max(b_A, b_B) exceeds {MAX_RATE_STEP}", "solver.dt", RangeError)
    mi = cfg.micro
    if mi is not None:
        if mi.seed < 0 or mi.seed >= 2**64:
            r.fail("seed must be an unsigned 64-bit integer", "micro.seed", RangeError)
        if mi.replicas < 1:
            r.fail("replicas must be positive", "micro.replicas", RangeError)
        if any(not (0 < e <= 1) for e in mi.epsilons):
            r.fail("epsilons must lie in (0, 1]", "micro.epsilons", RangeError)
        if not 1 <= mi.max_factorial <= 4:
            r.fail("max_factorial must be between 1 and 4", "micro.max_factorial", RangeError)
    h = cfg.horizon
    if h is not None and not (h.b_bar > 0 and h.l1_norm > 0):
        r.fail("b_bar and l1_norm must be positive", "horizon", RangeError)


def parse_config(text: str, strict: bool = True) -> RunConfig:
    """Parse and validate a JSON document; unknown keys are fatal when ``strict``."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno) from exc
    r = _Reader(text, strict)
    doc = r.section(doc, "", _fields(RunConfig))
    sub = r.string(doc, "subcommand", "", None, SUBCOMMANDS)
    if sub is None:
        r.fail("missing subcommand", "subcommand")
    for name in REQUIRED[sub]:
        if name not in doc:
            raise ParseError(f"subcommand {sub!r} needs a {name!r} section", key=name)
    output = r.string(doc, "output", "", "out")
    try:
        cfg = RunConfig(
            sub,
            output,
            _parse_model(r, doc["model"]) if "model" in doc else None,
            _parse_solver(r, doc["solver"]) if "solver" in doc else None,
            _parse_micro(r, doc["micro"]) if "micro" in doc else None,
            _parse_flat(r, doc["patches"], PatchSection, "patches") if "patches" in doc else None,
            _parse_flat(r, doc["horizon"], HorizonSection, "horizon") if "horizon" in doc else None,
        )
    except ConfigError:
        raise
    except (ModelError, ValueError) as exc:
        raise RangeError(str(exc)) from exc
    _validate(r, cfg)
    return cfg


# --------------------------------------------------------------------------
# serialization


def _plain(obj) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_plain(v) for v in obj]
    return obj


def to_dict(cfg: RunConfig) -> dict:
    return {k: v for k, v in _plain(cfg).items() if v is not None}


def serialize(cfg: RunConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=False) + "\n"
