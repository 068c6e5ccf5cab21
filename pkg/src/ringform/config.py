"""JSON experiment configuration.

One JSON document describes one experiment. Top-level keys::

    kind      "eig" | "submod" | "search" | "synth" | "sim"  (optional; must match the subcommand)
    seed      integer seed for every random draw (default 0)
    threads   worker count for sweeps (default 1)
    n         ring size
    model     {"alpha1", "alpha2", "alpha3"} or {"ovm": {...}, "s_star": ...}
    gains     {"ks", "kv"}                   ACC gains (noncooperative runs)
    weights   {"gamma_s", "gamma_v", "gamma_u"}
    eig | submod | search | synth | sim       options of the matching subcommand

Every section is validated on load, so a bad value fails before any
computation starts. See README.md for the per-command options.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from .model import (
    MAX_RING_SIZE,
    AccGains,
    FormationSet,
    LinearHdvCoeffs,
    ModelError,
    OvmParams,
    linearize,
)
from .perf import PerformanceWeights
from .sim import Limits, Perturbation, ScenarioConfig

KINDS = ("eig", "submod", "search", "synth", "sim")


class ConfigError(ModelError):
    """Invalid experiment configuration; the message names the offending field."""


def _check_keys(section: str, data: dict, allowed) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected an object (got {type(data).__name__})")
    extra = sorted(set(data) - set(allowed))
    if extra:
        raise ConfigError(f"{section}: unknown field(s) {extra}; allowed {sorted(allowed)}")


def _build(section: str, cls, data: dict):
    """Instantiate a dataclass from ``data``, prefixing any validation error with ``section``."""
    _check_keys(section, data, [f.name for f in fields(cls)])
    try:
        return cls(**data)
    except ModelError as exc:
        raise ConfigError(f"{section}: {exc}") from exc
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def grid(section: str, spec) -> tuple[float, ...]:
    """A list of numbers, a single number, or ``{"start", "stop", "step"}`` (stop inclusive)."""
    if isinstance(spec, (int, float)):
        return (float(spec),)
    if isinstance(spec, list):
        return tuple(float(x) for x in spec)
    _check_keys(section, spec, ("start", "stop", "step"))
    start, stop, step = (float(spec[k]) for k in ("start", "stop", "step"))
    if not step > 0 or stop < start:
        raise ConfigError(f"{section}: need step > 0 and stop >= start (got {spec})")
    count = int(math.floor((stop - start) / step + 1e-9)) + 1
    return tuple(float(round(start + i * step, 12)) for i in range(count))


@dataclass(frozen=True)
class ModelSpec:
    """Linear HDV coefficients, given directly or through an OVM linearization."""

    coeffs: LinearHdvCoeffs | None = None
    ovm: OvmParams | None = None
    s_star: float | None = None

    @classmethod
    def parse(cls, data: dict, section: str = "model") -> "ModelSpec":
        _check_keys(section, data, ("alpha1", "alpha2", "alpha3", "ovm", "s_star"))
        direct = {k: data[k] for k in ("alpha1", "alpha2", "alpha3") if k in data}
        if direct:
            if "ovm" in data:
                raise ConfigError(f"{section}: give either alpha1..alpha3 or ovm + s_star, not both")
            return cls(coeffs=_build(section, LinearHdvCoeffs, direct))
        if "ovm" not in data or "s_star" not in data:
            raise ConfigError(f"{section}: need alpha1, alpha2, alpha3 or ovm + s_star")
        ovm = _build(f"{section}.ovm", OvmParams, data["ovm"])
        spec = cls(ovm=ovm, s_star=float(data["s_star"]))
        spec.linear()
        return spec

    def linear(self) -> LinearHdvCoeffs:
        if self.coeffs is not None:
            return self.coeffs
        try:
            return linearize(self.ovm, self.s_star)
        except ModelError as exc:
            raise ConfigError(f"model: {exc}") from exc


@dataclass(frozen=True)
class EigOptions:
    k: tuple[int, ...] = (1,)
    trials: int = 50
    tol: float = 1e-8


@dataclass(frozen=True)
class SubmodOptions:
    cost: str = "j2"
    trials: int = 200
    tol: float = 1e-9
    stop_on_counterexample: bool = False
    backend: str = "riccati"
    #: explicit ``(e, small, large)`` diminishing-returns checks
    pairs: tuple = ()


@dataclass(frozen=True)
class SearchOptions:
    mode: str = "point"
    cost: str = "j2"
    k: tuple[int, ...] = (2,)
    alpha: tuple[float, ...] = ()
    beta: tuple[float, ...] = ()
    s_star: tuple[float, ...] = ()
    v_max: float = 30.0
    s_st: float = 5.0
    s_go: float = 35.0
    n_values: tuple[int, ...] = ()
    backend: str = "riccati"
    tie_tol: float = 1e-9


@dataclass(frozen=True)
class SynthOptions:
    formations: tuple[tuple[int, ...], ...] = ()
    backend: str = "riccati"
    rotation_check: bool = True
    cross_check: bool = True
    perturbation_trials: int = 20


@dataclass(frozen=True)
class SimOptions:
    scenario: ScenarioConfig = ScenarioConfig()
    #: named formations to run; empty means the scenario's own formation
    formations: tuple[tuple[str, tuple[int, ...]], ...] = ()
    sweep: bool = True
    dt_halving: bool = False
    eps_v: float = 0.3
    hold: float = 5.0
    stride: int = 10


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    seed: int = 0
    threads: int = 1
    n: int | None = None
    model: ModelSpec | None = None
    gains: AccGains = AccGains()
    weights: PerformanceWeights | None = None
    eig: EigOptions | None = None
    submod: SubmodOptions | None = None
    search: SearchOptions | None = None
    synth: SynthOptions | None = None
    sim: SimOptions | None = None
    raw: dict = field(default_factory=dict, repr=False, compare=False)

    def require(self, name: str):
        value = getattr(self, name)
        if value is None:
            raise ConfigError(f"{name}: required for '{self.kind}' experiments")
        return value

    def coeffs(self) -> LinearHdvCoeffs:
        return self.require("model").linear()

    def options(self):
        return getattr(self, self.kind)

    def to_dict(self) -> dict:
        """The effective configuration (seed and threads after overrides) as plain JSON data."""
        out = dict(self.raw)
        out.update(kind=self.kind, seed=self.seed, threads=self.threads)
        return json.loads(json.dumps(out, default=_jsonable))


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if hasattr(obj, "__dataclass_fields__"):
        return asdict(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


# --- per-section parsers ------------------------------------------------------

def _ring_size(n) -> int:
    if not isinstance(n, int) or isinstance(n, bool) or not 2 <= n <= MAX_RING_SIZE:
        raise ConfigError(f"n: ring size must be an integer in [2, {MAX_RING_SIZE}] (got {n!r})")
    return n


def _formation(section: str, n: int, indices) -> FormationSet:
    try:
        return FormationSet.of(n, indices)
    except (ModelError, TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def _positive_int(section: str, value, minimum: int = 1) -> int:
    if not isinstance(value, int) or isinstance(value, bool) or value < minimum:
        raise ConfigError(f"{section}: expected an integer >= {minimum} (got {value!r})")
    return value


def _parse_eig(data: dict, n: int) -> EigOptions:
    opts = _build("eig", EigOptions, {**data, "k": tuple(data.get("k", (1,)))})
    for k in opts.k:
        if not isinstance(k, int) or not 0 <= k <= n:
            raise ConfigError(f"eig.k: every k must be an integer in [0, {n}] (got {k!r})")
    _positive_int("eig.trials", opts.trials, 1)
    return opts


def _parse_submod(data: dict, n: int) -> SubmodOptions:
    pairs = []
    for j, p in enumerate(data.get("pairs", ())):
        sec = f"submod.pairs[{j}]"
        _check_keys(sec, p, ("e", "small", "large"))
        small, large = _formation(sec + ".small", n, p["small"]), _formation(sec + ".large", n, p["large"])
        e = p["e"]
        if not set(small.indices) <= set(large.indices):
            raise ConfigError(f"{sec}: small set {small} is not a subset of {large}")
        if e in large or not 1 <= e <= n:
            raise ConfigError(f"{sec}: e={e} must be a ring index outside the large set")
        pairs.append((e, small.indices, large.indices))
    opts = _build("submod", SubmodOptions, {**data, "pairs": tuple(pairs)})
    if opts.cost not in ("j1", "j2"):
        raise ConfigError(f"submod.cost: expected 'j1' or 'j2' (got {opts.cost!r})")
    _positive_int("submod.trials", opts.trials, 1)
    return opts


def _parse_search(data: dict, n: int | None) -> SearchOptions:
    d = dict(data)
    for name in ("alpha", "beta", "s_star"):
        if name in d:
            d[name] = grid(f"search.{name}", d[name])
    d["k"] = tuple(d.get("k", (2,)))
    d["n_values"] = tuple(d.get("n_values", ()))
    opts = _build("search", SearchOptions, d)
    if opts.mode not in ("point", "sweep", "scale"):
        raise ConfigError(f"search.mode: expected point, sweep or scale (got {opts.mode!r})")
    if opts.cost not in ("j1", "j2"):
        raise ConfigError(f"search.cost: expected 'j1' or 'j2' (got {opts.cost!r})")
    if opts.mode == "sweep" and not (opts.alpha and opts.beta and opts.s_star):
        raise ConfigError("search: sweep mode needs alpha, beta and s_star grids")
    if opts.mode == "scale":
        if not opts.n_values:
            raise ConfigError("search.n_values: scale mode needs at least one ring size")
        for m in opts.n_values:
            _ring_size(m)
    elif n is None:
        raise ConfigError("n: required for point and sweep searches")
    sizes = opts.n_values if opts.mode == "scale" else (n,)
    for k in opts.k:
        if not isinstance(k, int) or not all(1 <= k <= m for m in sizes):
            raise ConfigError(f"search.k: every k must be an integer in [1, n] (got {k!r})")
    return opts


def _parse_synth(data: dict, n: int) -> SynthOptions:
    sets = tuple(_formation(f"synth.formations[{j}]", n, f).indices for j, f in enumerate(data.get("formations", ())))
    if not sets:
        raise ConfigError("synth.formations: need at least one formation")
    if any(len(s) == 0 for s in sets):
        raise ConfigError("synth.formations: synthesis needs at least one AV per formation")
    opts = _build("synth", SynthOptions, {**data, "formations": sets})
    if opts.backend not in ("riccati", "sdp"):
        raise ConfigError(f"synth.backend: expected 'riccati' or 'sdp' (got {opts.backend!r})")
    return opts


def _parse_scenario(data: dict, seed: int, weights: PerformanceWeights | None) -> ScenarioConfig:
    d = dict(data)
    _check_keys("sim.scenario", d, [f.name for f in fields(ScenarioConfig)])
    if "perturbation" in d:
        d["perturbation"] = None if d["perturbation"] is None else _build(
            "sim.scenario.perturbation", Perturbation, d["perturbation"]
        )
    if "limits" in d:
        d["limits"] = _build("sim.scenario.limits", Limits, d["limits"])
    if "weights" in d:
        d["weights"] = _build("sim.scenario.weights", PerformanceWeights, d["weights"])
    elif weights is not None:
        d["weights"] = weights
    if "formation" in d:
        d["formation"] = tuple(d["formation"])
    d["rng_seed"] = seed
    sc = _build("sim.scenario", ScenarioConfig, d)
    _ring_size(sc.n)
    _formation("sim.scenario.formation", sc.n, sc.formation)
    return sc


def _parse_sim(data: dict, seed: int, weights) -> SimOptions:
    d = dict(data)
    d["scenario"] = _parse_scenario(d.get("scenario", {}), seed, weights)
    n = d["scenario"].n
    named = []
    forms = d.get("formations", {})
    if not isinstance(forms, dict):
        raise ConfigError("sim.formations: expected an object mapping names to index lists")
    for name, idx in forms.items():
        named.append((str(name), _formation(f"sim.formations.{name}", n, idx).indices))
    d["formations"] = tuple(named)
    opts = _build("sim", SimOptions, d)
    _positive_int("sim.stride", opts.stride)
    if not (opts.eps_v > 0 and opts.hold > 0):
        raise ConfigError(f"sim: eps_v and hold must be positive (got {opts.eps_v}, {opts.hold})")
    return opts


def parse_config(data: dict, kind: str | None = None, seed: int | None = None, threads: int | None = None) -> ExperimentConfig:
    """Validate a config document. ``kind``, ``seed`` and ``threads`` override the file."""
    _check_keys("config", data, ("kind", "seed", "threads", "n", "model", "gains", "weights", *KINDS, "description"))
    file_kind = data.get("kind")
    if kind is None:
        kind = file_kind
    elif file_kind is not None and file_kind != kind:
        raise ConfigError(f"kind: config is for '{file_kind}', not '{kind}'")
    if kind not in KINDS:
        raise ConfigError(f"kind: expected one of {KINDS} (got {kind!r})")
    seed = data.get("seed", 0) if seed is None else seed
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
        raise ConfigError(f"seed: expected an unsigned 64-bit integer (got {seed!r})")
    threads = _positive_int("threads", data.get("threads", 1) if threads is None else threads)

    n = _ring_size(data["n"]) if "n" in data else None
    model = ModelSpec.parse(data["model"]) if "model" in data else None
    gains = _build("gains", AccGains, data["gains"]) if "gains" in data else AccGains()
    weights = _build("weights", PerformanceWeights, data["weights"]) if "weights" in data else None

    section = data.get(kind, {})
    opts: dict[str, Any] = {}
    if kind == "sim":
        opts["sim"] = _parse_sim(section, seed, weights)
    else:
        if kind != "search" or section.get("mode", "point") != "scale":
            if n is None:
                raise ConfigError(f"n: required for '{kind}' experiments")
        parser = {"eig": _parse_eig, "submod": _parse_submod, "search": _parse_search, "synth": _parse_synth}[kind]
        opts[kind] = parser(section, n)
        search_grid = kind == "search" and opts[kind].mode == "sweep"
        if model is None and not search_grid and not (kind == "search" and opts[kind].alpha):
            raise ConfigError(f"model: required for '{kind}' experiments")
        needs_gu = kind in ("synth",) or (kind in ("submod", "search") and opts[kind].cost == "j2")
        if kind != "eig":
            if weights is None:
                raise ConfigError(f"weights: required for '{kind}' experiments")
            if needs_gu and weights.gamma_u is None:
                raise ConfigError("weights.gamma_u: cooperative cost needs an input penalty gamma_u > 0")
    return ExperimentConfig(kind=kind, seed=seed, threads=threads, n=n, model=model, gains=gains,
                            weights=weights, raw=data, **opts)


def load_config(path, kind: str | None = None, seed: int | None = None, threads: int | None = None) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: {path} is not valid JSON ({exc})") from exc
    return parse_config(data, kind, seed, threads)
