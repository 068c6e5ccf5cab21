"""Nonlinear ring-road simulation with a heterogeneous OVM fleet and delayed AV feedback.

Integration is fixed-step RK4. AV commands (computed from the state ``delay``
seconds ago), safety-override decisions and the forced braking of the perturbed
vehicle are evaluated at step boundaries and held over the step; HDV accelerations
are re-evaluated at every RK4 stage.
"""
from __future__ import annotations

import csv
import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit
from scipy.integrate import trapezoid

from .model import (
    FormationSet,
    ModelError,
    OvmParams,
    linearize,
    ovm_accel,
    ovm_equilibrium_spacing,
)
from .perf import PerformanceWeights, synthesize

UNIFORM_40_8 = (3, 8, 13, 18, 23, 28, 33, 38)
PLATOON_40_8 = tuple(range(17, 25))


class ScenarioError(ModelError):
    pass


class SimulationAbort(RuntimeError):
    """Collision or NaN; ``trace`` holds everything recorded up to the abort."""

    def __init__(self, message: str, trace: "SimTrace"):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class Perturbation:
    vehicle: int = 5
    start: float = 30.0
    accel: float = -5.0
    duration: float = 2.0

    @property
    def end(self) -> float:
        return self.start + self.duration


@dataclass(frozen=True)
class Limits:
    a_min: float = -5.0
    a_max: float = 2.0
    v_limit: float = 30.0

    def __post_init__(self):
        if not self.a_min < 0 < self.a_max:
            raise ScenarioError(f"need a_min < 0 < a_max (got {self.a_min}, {self.a_max})")
        if not self.v_limit > 0:
            raise ScenarioError(f"v_limit must be positive (got {self.v_limit})")


@dataclass(frozen=True)
class VehicleParams:
    kind: str
    s_star: float
    ovm: OvmParams | None = None


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything needed to build a run; defaults reproduce the 40-vehicle, 800 m setup."""

    n: int = 40
    ring_length: float = 800.0
    formation: tuple[int, ...] = UNIFORM_40_8
    v_star: float = 15.0
    alpha: float = 0.6
    beta: float = 0.9
    v_max: float = 30.0
    s_st: float = 5.0
    s_go: float = 35.0
    alpha_spread: float = 0.1
    beta_spread: float = 0.1
    s_go_spread: float = 5.0
    weights: PerformanceWeights = PerformanceWeights(0.03, 0.15, 0.1)
    input_delay: float = 0.2
    dt: float = 0.01
    horizon: float = 120.0
    perturbation: Perturbation | None = Perturbation()
    limits: Limits = Limits()
    rng_seed: int = 0
    tiling_tol: float = 1e-6


@dataclass
class SimScenario:
    ring_length: float
    fleet: tuple[VehicleParams, ...]
    formation: FormationSet
    gain: np.ndarray | None
    v_star: float
    input_delay: float
    dt: float
    horizon: float
    perturbation: Perturbation | None
    limits: Limits
    weights: PerformanceWeights
    rng_seed: int = 0

    @property
    def n(self) -> int:
        return len(self.fleet)

    @property
    def delay_steps(self) -> int:
        return int(round(self.input_delay / self.dt))

    @property
    def s_star(self) -> np.ndarray:
        return np.array([veh.s_star for veh in self.fleet])


def _validate_timing(dt: float, delay: float, horizon: float) -> None:
    if not dt > 0 or not horizon > 0:
        raise ScenarioError(f"dt and horizon must be positive (got dt={dt}, horizon={horizon})")
    if delay < 0:
        raise ScenarioError(f"input delay must be non-negative (got {delay})")
    steps = round(delay / dt)
    if abs(steps * dt - delay) > 1e-9 * max(1.0, delay):
        raise ScenarioError(f"input delay {delay} is not an integer multiple of dt={dt}")


def nominal_gain(config: ScenarioConfig, formation: FormationSet) -> np.ndarray:
    """Cooperative gain synthesized from the homogeneous (nominal) linearization."""
    nominal = OvmParams(config.alpha, config.beta, config.v_max, config.s_st, config.s_go)
    eq = ovm_equilibrium_spacing(nominal, config.v_star)
    res = synthesize(linearize(nominal, eq.s_star), formation, config.weights)
    if not res.converged:
        raise ScenarioError(f"nominal synthesis failed: {res.solver_meta}")
    return res.K


def build_scenario(config: ScenarioConfig, gain=None, synthesize_gain: bool = True) -> SimScenario:
    """Draw the heterogeneous fleet and tile the ring with equilibrium spacings.

    Parameters are drawn for every position in index order (AV draws are
    discarded), so two formations built with the same seed share HDV parameters.
    AVs split the ring length left over by the HDVs equally.
    """
    n = config.n
    formation = FormationSet.of(n, config.formation)
    _validate_timing(config.dt, config.input_delay, config.horizon)
    pert = config.perturbation
    if pert is not None and not (1 <= pert.vehicle <= n and pert.duration >= 0):
        raise ScenarioError(f"invalid perturbation {pert}")
    rng = np.random.Generator(np.random.Philox(config.rng_seed))
    u = rng.uniform(-1.0, 1.0, size=(n, 3))
    av = set(formation.indices)
    fleet: list[VehicleParams] = []
    for i in range(1, n + 1):
        if i in av:
            fleet.append(VehicleParams("av", math.nan))
            continue
        p = OvmParams(
            alpha=config.alpha + config.alpha_spread * u[i - 1, 0],
            beta=config.beta + config.beta_spread * u[i - 1, 1],
            v_max=config.v_max,
            s_st=config.s_st,
            s_go=config.s_go + config.s_go_spread * u[i - 1, 2],
        )
        fleet.append(VehicleParams("hdv", ovm_equilibrium_spacing(p, config.v_star).s_star, p))
    hdv_total = sum(v.s_star for v in fleet if v.kind == "hdv")
    left = config.ring_length - hdv_total
    if formation.k == 0:
        if abs(left) > config.tiling_tol:
            raise ScenarioError(
                f"HDV equilibrium spacings sum to {hdv_total:.6f} m, ring is {config.ring_length} m"
            )
    else:
        share = left / formation.k
        if not share > 0:
            raise ScenarioError(f"no room for AVs: HDV spacings already use {hdv_total:.3f} m")
        fleet = [replace(v, s_star=share) if v.kind == "av" else v for v in fleet]
    if gain is None and formation.k and synthesize_gain:
        gain = nominal_gain(config, formation)
    if gain is not None:
        gain = np.asarray(gain, dtype=float)
        if gain.shape != (formation.k, 2 * n):
            raise ScenarioError(f"gain must be {formation.k}x{2 * n} (got {gain.shape})")
    return SimScenario(
        ring_length=config.ring_length,
        fleet=tuple(fleet),
        formation=formation,
        gain=gain,
        v_star=config.v_star,
        input_delay=config.input_delay,
        dt=config.dt,
        horizon=config.horizon,
        perturbation=pert,
        limits=config.limits,
        weights=config.weights,
        rng_seed=config.rng_seed,
    )


# --- vehicle-level laws -------------------------------------------------------

def hdv_accel(params: OvmParams, s, s_dot, v):
    """OVM acceleration before clamping."""
    return ovm_accel(params, s, s_dot, v)


def av_accel(K_rows, delayed_state):
    """``u = -K x(t - delay)`` for the given rows of K."""
    return -np.asarray(K_rows) @ np.asarray(delayed_state)


def safety_override(v_self, v_pred, s, commanded, a_min: float, a_max: float):
    """Emergency braking: returns ``(applied, override_flag)``; works elementwise."""
    s = np.asarray(s, dtype=float)
    if np.any(s <= 0):
        raise ValueError("non-positive spacing: collision")
    need = (np.square(v_self) - np.square(v_pred)) / (2.0 * s) >= abs(a_min)
    applied = np.where(need, a_min, np.clip(commanded, a_min, a_max))
    if np.ndim(applied) == 0:
        return float(applied), bool(need)
    return applied, need


# --- trace --------------------------------------------------------------------

@dataclass
class SimTrace:
    scenario: SimScenario = field(repr=False)
    t: np.ndarray
    position: np.ndarray = field(repr=False)
    velocity: np.ndarray = field(repr=False)
    accel_cmd: np.ndarray = field(repr=False)
    accel_applied: np.ndarray = field(repr=False)
    override: np.ndarray = field(repr=False)
    position_unwrapped: np.ndarray = field(repr=False)
    aborted: str | None = None

    @property
    def wrapped_position(self) -> np.ndarray:
        return np.mod(self.position_unwrapped, self.scenario.ring_length)

    def spacings(self) -> np.ndarray:
        return _spacing(self.position_unwrapped, self.scenario.ring_length)

    def conservation_error(self) -> float:
        return float(np.max(np.abs(self.spacings().sum(axis=1) - self.scenario.ring_length)))

    def state_error(self) -> np.ndarray:
        """Rows are ``[s - s*, v - v*]`` at each recorded time."""
        sc = self.scenario
        return np.hstack([self.spacings() - sc.s_star, self.velocity - sc.v_star])

    def to_csv(self, path, stride: int = 1) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "vehicle", "position", "velocity", "accel_cmd", "accel_applied", "override"])
            pos = self.wrapped_position
            for r in range(0, len(self.t), stride):
                for i in range(self.scenario.n):
                    w.writerow([
                        f"{self.t[r]:.12g}", i + 1, f"{pos[r, i]:.12g}", f"{self.velocity[r, i]:.12g}",
                        f"{self.accel_cmd[r, i]:.12g}", f"{self.accel_applied[r, i]:.12g}",
                        int(self.override[r, i]),
                    ])


def _spacing(p: np.ndarray, L: float) -> np.ndarray:
    prev = np.roll(p, 1, axis=-1)
    s = prev - p
    s[..., 0] += L
    return s


# --- integrator ---------------------------------------------------------------

@njit(cache=True, nogil=True)
def _ovm_accel(i, prv, s, v, alpha, beta, sst, inv_width, half_vmax):
    phase = (s - sst[i]) * inv_width[i]
    if phase < 0.0:
        phase = 0.0
    elif phase > 1.0:
        phase = 1.0
    V = half_vmax[i] * (1.0 - math.cos(math.pi * phase))
    return alpha[i] * (V - v[i]) + beta[i] * (v[prv] - v[i])


@njit(cache=True, nogil=True)
def _stage_accel(p, v, held, fixed, L, alpha, beta, sst, inv_width, half_vmax, a_min, a_max, v_lim, out):
    n = p.shape[0]
    for i in range(n):
        if fixed[i]:
            a = held[i]
        else:
            prv = i - 1 if i > 0 else n - 1
            s = p[prv] - p[i] + (L if i == 0 else 0.0)
            a = _ovm_accel(i, prv, s, v, alpha, beta, sst, inv_width, half_vmax)
            a = min(max(a, a_min), a_max)
        if v[i] <= 0.0 and a < 0.0:
            a = 0.0
        if v[i] >= v_lim and a > 0.0:
            a = 0.0
        out[i] = a


@njit(cache=True, nogil=True)
def _integrate(p, v, s_star, v_star, is_av, alpha, beta, sst, inv_width, half_vmax, K, av_idx,
               d, dt, steps, L, a_min, a_max, v_lim, pv, t_on, t_off, p_accel,
               P, Vel, Acmd, Aapp, Ovr, X):
    """Fill the trace arrays; returns ``(last_row, status)``, status 0 ok, 1 nan, 2 collision."""
    n = p.shape[0]
    k_av = av_idx.shape[0]
    held = np.empty(n)
    cmd = np.empty(n)
    fixed = np.empty(n, dtype=np.bool_)
    a1 = np.empty(n)
    a2 = np.empty(n)
    a3 = np.empty(n)
    a4 = np.empty(n)
    tp = np.empty(n)
    tv = np.empty(n)
    v2 = np.empty(n)
    v3 = np.empty(n)
    h = 0.5 * dt
    for k in range(steps + 1):
        t = k * dt
        for i in range(n):
            P[k, i] = p[i]
            Vel[k, i] = v[i]
        for i in range(n):
            prv = i - 1 if i > 0 else n - 1
            s = p[prv] - p[i] + (L if i == 0 else 0.0)
            if not (np.isfinite(s) and np.isfinite(v[i])):
                return k, 1
            if s <= 0.0:
                return k, 2
            X[k, i] = s - s_star[i]
            X[k, n + i] = v[i] - v_star
            cmd[i] = _ovm_accel(i, prv, s, v, alpha, beta, sst, inv_width, half_vmax)
            Ovr[k, i] = (v[i] * v[i] - v[prv] * v[prv]) / (2.0 * s) >= -a_min
        for r in range(k_av):
            u = 0.0
            if k >= d:
                for j in range(2 * n):
                    u -= K[r, j] * X[k - d, j]
            cmd[av_idx[r]] = u
        forcing = pv >= 0 and t_on <= t + 1e-9 * dt and t + 1e-9 * dt < t_off
        for i in range(n):
            held[i] = min(max(cmd[i], a_min), a_max)
            fixed[i] = is_av[i]
        if forcing:
            cmd[pv] = p_accel
            held[pv] = p_accel
            Ovr[k, pv] = False
            fixed[pv] = True
        for i in range(n):
            if Ovr[k, i]:
                held[i] = a_min
                fixed[i] = True

        _stage_accel(p, v, held, fixed, L, alpha, beta, sst, inv_width, half_vmax, a_min, a_max, v_lim, a1)
        for i in range(n):
            Acmd[k, i] = cmd[i]
            Aapp[k, i] = a1[i]
        if k == steps:
            return k, 0
        for i in range(n):
            v2[i] = v[i] + h * a1[i]
            tp[i] = p[i] + h * v[i]
        _stage_accel(tp, v2, held, fixed, L, alpha, beta, sst, inv_width, half_vmax, a_min, a_max, v_lim, a2)
        for i in range(n):
            v3[i] = v[i] + h * a2[i]
            tp[i] = p[i] + h * v2[i]
        _stage_accel(tp, v3, held, fixed, L, alpha, beta, sst, inv_width, half_vmax, a_min, a_max, v_lim, a3)
        for i in range(n):
            tv[i] = v[i] + dt * a3[i]
            tp[i] = p[i] + dt * v3[i]
        _stage_accel(tp, tv, held, fixed, L, alpha, beta, sst, inv_width, half_vmax, a_min, a_max, v_lim, a4)
        for i in range(n):
            p[i] += dt / 6.0 * (v[i] + 2.0 * v2[i] + 2.0 * v3[i] + tv[i])
            vn = v[i] + dt / 6.0 * (a1[i] + 2.0 * a2[i] + 2.0 * a3[i] + a4[i])
            v[i] = min(max(vn, 0.0), v_lim)
    return steps, 0


def run(scenario: SimScenario) -> SimTrace:
    """Integrate the ring from equilibrium to the horizon. Raises SimulationAbort on collision/NaN."""
    sc = scenario
    n, dt, L = sc.n, sc.dt, sc.ring_length
    lim = sc.limits
    steps = int(round(sc.horizon / dt))
    s_star = sc.s_star
    is_av = np.array([veh.kind == "av" for veh in sc.fleet])
    av_idx = sc.formation.zero_based()
    if av_idx.size and sc.gain is None:
        raise ScenarioError("scenario has AVs but no feedback gain")
    K = np.ascontiguousarray(sc.gain if av_idx.size else np.zeros((0, 2 * n)), dtype=float)

    def fleet_array(name, default):
        return np.array([getattr(veh.ovm, name) if veh.ovm else default for veh in sc.fleet], dtype=float)

    sst = fleet_array("s_st", 0.0)
    inv_width = 1.0 / (fleet_array("s_go", 1.0) - sst)
    p = np.empty(n)
    p[0] = 0.0
    p[1:] = -np.cumsum(s_star[1:])
    v = np.full(n, float(sc.v_star))
    pert = sc.perturbation

    P = np.zeros((steps + 1, n))
    Vel = np.zeros((steps + 1, n))
    Acmd = np.zeros((steps + 1, n))
    Aapp = np.zeros((steps + 1, n))
    Ovr = np.zeros((steps + 1, n), dtype=bool)
    X = np.zeros((steps + 1, 2 * n))
    last, status = _integrate(
        p, v, s_star, float(sc.v_star), is_av,
        fleet_array("alpha", 0.0), fleet_array("beta", 0.0), sst, inv_width, 0.5 * fleet_array("v_max", 0.0),
        K, av_idx.astype(np.int64), sc.delay_steps, dt, steps, L, lim.a_min, lim.a_max, lim.v_limit,
        pert.vehicle - 1 if pert else -1, pert.start if pert else 0.0, pert.end if pert else 0.0,
        pert.accel if pert else 0.0,
        P, Vel, Acmd, Aapp, Ovr, X,
    )
    T = np.arange(steps + 1) * dt
    sl = slice(0, last + 1)
    trace = SimTrace(sc, T[sl], np.mod(P[sl], L), Vel[sl], Acmd[sl], Aapp[sl], Ovr[sl], P[sl])
    if status:
        trace.aborted = "nan" if status == 1 else "collision"
        s = _spacing(P[last], L)
        where = f"vehicle {int(np.argmax(s <= 0)) + 1} " if status == 2 else ""
        raise SimulationAbort(f"{trace.aborted}: {where}at t={T[last]:.3f}", trace)
    return trace


def simulate_linear(A, B, K, scenario: SimScenario) -> tuple[np.ndarray, np.ndarray]:
    """Linear closed loop ``x' = A x + B u``, ``u = -K x(t - delay)``, same stepping as ``run``.

    During the perturbation window the perturbed vehicle's velocity error is
    driven by the forced acceleration instead of its own dynamics.
    """
    sc = scenario
    n, dt = sc.n, sc.dt
    steps = int(round(sc.horizon / dt))
    d = sc.delay_steps
    x = np.zeros(2 * n)
    X = np.empty((steps + 1, 2 * n))
    history: deque = deque(maxlen=d + 1)
    pert = sc.perturbation
    K = np.zeros((0, 2 * n)) if K is None else np.asarray(K)
    for k in range(steps + 1):
        t = k * dt
        X[k] = x
        history.append(x.copy())
        xd = history[0] if len(history) == d + 1 else np.zeros(2 * n)
        u = -K @ xd
        forced = None
        if pert is not None and pert.start <= t + 1e-9 * dt < pert.end:
            forced = n + pert.vehicle - 1

        def f(xx):
            dx = A @ xx + B @ u
            if forced is not None:
                dx[forced] = pert.accel
            return dx

        if k == steps:
            break
        k1 = f(x)
        k2 = f(x + 0.5 * dt * k1)
        k3 = f(x + 0.5 * dt * k2)
        k4 = f(x + dt * k3)
        x = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return np.arange(steps + 1) * dt, X


# --- metrics ------------------------------------------------------------------

@dataclass(frozen=True)
class SimMetrics:
    stabilizing_time: float
    censored: bool
    lq_cost: float


def metrics(trace: SimTrace, weights: PerformanceWeights | None = None, eps_v: float = 0.3, hold: float = 5.0) -> SimMetrics:
    """LQ cost from the perturbation onset and time to re-settle.

    ``stabilizing_time`` is measured from the perturbation onset to the first
    time T after the perturbation ends with ``max_i |v_i - v*| < eps_v`` on the
    whole of ``[T, T + hold]``. When no such T fits in the horizon the value is
    ``horizon - onset`` and ``censored`` is True.
    """
    if trace.aborted:
        raise ValueError(f"metrics need a complete trace (aborted: {trace.aborted})")
    sc = trace.scenario
    w = weights or sc.weights
    t = trace.t
    pert = sc.perturbation
    t0, t1 = (pert.start, pert.end) if pert is not None else (0.0, 0.0)

    x = trace.state_error()
    n = sc.n
    q = np.concatenate([np.full(n, w.gamma_s), np.full(n, w.gamma_v)])
    integrand = x**2 @ q
    av = sc.formation.zero_based()
    if av.size and w.gamma_u is not None:
        integrand = integrand + w.gamma_u * np.sum(trace.accel_applied[:, av] ** 2, axis=1)
    mask = t >= t0 - 1e-12
    lq = float(trapezoid(integrand[mask], t[mask])) if mask.sum() > 1 else 0.0

    dt = t[1] - t[0] if len(t) > 1 else sc.dt
    dev = np.max(np.abs(trace.velocity - sc.v_star), axis=1)
    good = dev < eps_v
    hold_n = int(round(hold / dt)) + 1
    start = int(np.searchsorted(t, t1 - 1e-12))
    if len(good) - start >= hold_n:
        window = np.convolve(good[start:].astype(int), np.ones(hold_n, dtype=int), mode="valid")
        hits = np.flatnonzero(window == hold_n)
        if hits.size:
            return SimMetrics(round(float(t[start + hits[0]] - t0), 9), False, lq)
    return SimMetrics(round(float(t[-1] - t0), 9), True, lq)


# --- sweeps -------------------------------------------------------------------

def _sweep_one(args):
    config, gain, vehicle, eps_v, hold = args
    pert = replace(config.perturbation or Perturbation(), vehicle=vehicle)
    sc = build_scenario(replace(config, perturbation=pert), gain=gain)
    try:
        m = metrics(run(sc), eps_v=eps_v, hold=hold)
        return vehicle, m, None
    except SimulationAbort as exc:
        return vehicle, None, str(exc)


def perturbation_sweep(
    config: ScenarioConfig,
    vehicles=None,
    threads: int = 1,
    eps_v: float = 0.3,
    hold: float = 5.0,
) -> list[tuple[int, SimMetrics | None, str | None]]:
    """Metrics with the perturbation moved to each vehicle in turn (one shared gain)."""
    formation = FormationSet.of(config.n, config.formation)
    gain = nominal_gain(config, formation) if formation.k else None
    vehicles = list(vehicles or range(1, config.n + 1))
    jobs = [(config, gain, i, eps_v, hold) for i in vehicles]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(_sweep_one, jobs))
    return [_sweep_one(j) for j in jobs]
