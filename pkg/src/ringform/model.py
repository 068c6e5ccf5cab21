"""Driver models, equilibria and the linear mixed-traffic ring model.

Vehicles are numbered 1..n around the ring; vehicle ``i`` follows vehicle
``i - 1`` and vehicle 1 follows vehicle ``n``. Every public interface speaks
1-based indices, arrays are 0-based internally.

State ordering is ``x = [s~_1 .. s~_n, v~_1 .. v~_n]`` (spacing errors, then
velocity errors).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

#: Largest ring handled by the dense routines.
MAX_RING_SIZE = 64


class ModelError(ValueError):
    """Invalid model parameters or formation."""


@dataclass(frozen=True)
class OvmParams:
    """Optimal velocity model parameters."""

    alpha: float
    beta: float
    v_max: float = 30.0
    s_st: float = 5.0
    s_go: float = 35.0

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0 and self.v_max > 0):
            raise ModelError(
                f"OvmParams requires alpha > 0, beta > 0, v_max > 0 "
                f"(got alpha={self.alpha}, beta={self.beta}, v_max={self.v_max})"
            )
        if not (0 < self.s_st < self.s_go):
            raise ModelError(
                f"OvmParams requires 0 < s_st < s_go (got s_st={self.s_st}, s_go={self.s_go})"
            )


@dataclass(frozen=True)
class LinearHdvCoeffs:
    """Linearized HDV coefficients: spacing gain, self-velocity gain, preceding-velocity gain."""

    alpha1: float
    alpha2: float
    alpha3: float

    def __post_init__(self):
        if not self.alpha1 > 0:
            raise ModelError(f"LinearHdvCoeffs requires alpha1 > 0 (got {self.alpha1})")
        if not (self.alpha2 > self.alpha3 > 0):
            raise ModelError(
                f"LinearHdvCoeffs requires alpha2 > alpha3 > 0 "
                f"(got alpha2={self.alpha2}, alpha3={self.alpha3})"
            )


@dataclass(frozen=True)
class AccGains:
    ks: float = 0.0
    kv: float = 0.0

    def __post_init__(self):
        if self.ks < 0 or self.kv < 0:
            raise ModelError(f"AccGains requires ks >= 0 and kv >= 0 (got ks={self.ks}, kv={self.kv})")


@dataclass(frozen=True)
class EquilibriumState:
    s_star: float
    v_star: float


@dataclass(frozen=True)
class FormationSet:
    """Ring positions (1-based, strictly increasing) occupied by AVs."""

    n: int
    indices: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
        if self.n < 1:
            raise ModelError(f"FormationSet requires n >= 1 (got n={self.n})")
        idx = self.indices
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ModelError(f"FormationSet indices must be strictly increasing (got {idx})")
        if idx and (idx[0] < 1 or idx[-1] > self.n):
            raise ModelError(f"FormationSet indices must lie in [1, {self.n}] (got {idx})")

    @classmethod
    def of(cls, n: int, indices: Iterable[int] = ()) -> "FormationSet":
        """Build from any iterable; sorts, rejects duplicates."""
        idx = [int(i) for i in indices]
        if len(set(idx)) != len(idx):
            raise ModelError(f"FormationSet indices must be unique (got {idx})")
        return cls(n, tuple(sorted(idx)))

    @classmethod
    def full(cls, n: int) -> "FormationSet":
        return cls(n, tuple(range(1, n + 1)))

    @property
    def k(self) -> int:
        return len(self.indices)

    def __len__(self) -> int:
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)

    def __contains__(self, i) -> bool:
        return i in self.indices

    def mask(self) -> np.ndarray:
        """0/1 vector ``delta`` of length n (1 where an AV sits)."""
        d = np.zeros(self.n)
        if self.indices:
            d[np.asarray(self.indices) - 1] = 1.0
        return d

    def zero_based(self) -> np.ndarray:
        return np.asarray(self.indices, dtype=int) - 1

    def rotate(self, m: int) -> "FormationSet":
        """Shift every index by ``m`` positions around the ring."""
        return FormationSet.of(self.n, [((i - 1 + m) % self.n) + 1 for i in self.indices])

    def add(self, e: int) -> "FormationSet":
        if e in self.indices:
            raise ModelError(f"index {e} already in formation {self.indices}")
        return FormationSet.of(self.n, self.indices + (e,))

    def __str__(self) -> str:
        return "{" + ",".join(map(str, self.indices)) + "}"


@dataclass(frozen=True)
class StateSpaceModel:
    """Open-loop mixed traffic model ``x' = A x + B u + H w``."""

    formation: FormationSet
    A: np.ndarray = field(repr=False)
    B: np.ndarray = field(repr=False)
    H: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.formation.n


# --- optimal velocity model -------------------------------------------------

def desired_velocity(params: OvmParams, s):
    """Raised-cosine desired velocity V(s); works on scalars and arrays."""
    s = np.asarray(s, dtype=float)
    width = params.s_go - params.s_st
    inner = 0.5 * params.v_max * (1.0 - np.cos(np.pi * (s - params.s_st) / width))
    v = np.where(s <= params.s_st, 0.0, np.where(s >= params.s_go, params.v_max, inner))
    return float(v) if v.ndim == 0 else v


def desired_velocity_derivative(params: OvmParams, s):
    s = np.asarray(s, dtype=float)
    width = params.s_go - params.s_st
    inner = params.v_max * np.pi / (2.0 * width) * np.sin(np.pi * (s - params.s_st) / width)
    inside = (s > params.s_st) & (s < params.s_go)
    dv = np.where(inside, inner, 0.0)
    return float(dv) if dv.ndim == 0 else dv


def ovm_accel(params: OvmParams, s, s_dot, v):
    """OVM acceleration ``alpha (V(s) - v) + beta s_dot`` (unclamped)."""
    return params.alpha * (desired_velocity(params, s) - v) + params.beta * s_dot


def ovm_equilibrium_spacing(params: OvmParams, v_star: float) -> EquilibriumState:
    """Invert V on (s_st, s_go) for the equilibrium spacing at ``v_star``."""
    if not (0.0 < v_star < params.v_max):
        raise ModelError(
            f"equilibrium velocity must lie in (0, v_max={params.v_max}) (got {v_star})"
        )
    width = params.s_go - params.s_st
    s_star = params.s_st + width / math.pi * math.acos(1.0 - 2.0 * v_star / params.v_max)
    return EquilibriumState(s_star=s_star, v_star=v_star)


def ovm_equilibrium_velocity(params: OvmParams, s_star: float) -> EquilibriumState:
    """The spacing-first entry point: ``v* = V(s*)``."""
    if s_star < 0:
        raise ModelError(f"spacing must be non-negative (got {s_star})")
    return EquilibriumState(s_star=s_star, v_star=desired_velocity(params, s_star))


def linearize(params: OvmParams, s_star: float) -> LinearHdvCoeffs:
    if not (params.s_st < s_star < params.s_go):
        raise ModelError(
            f"degenerate linearization: s* = {s_star} outside ({params.s_st}, {params.s_go}) "
            "gives alpha1 = 0"
        )
    return LinearHdvCoeffs(
        alpha1=params.alpha * desired_velocity_derivative(params, s_star),
        alpha2=params.alpha + params.beta,
        alpha3=params.beta,
    )


def string_stability_index(params: OvmParams, s_star: float) -> float:
    """``alpha + 2 beta - 2 V'(s*)``; non-negative means strictly string stable."""
    if s_star < 0:
        raise ModelError(f"spacing must be non-negative (got {s_star})")
    return params.alpha + 2.0 * params.beta - 2.0 * desired_velocity_derivative(params, s_star)


# --- state-space assembly ---------------------------------------------------

def _check_size(n: int, max_n: int) -> None:
    if n < 2:
        raise ModelError(f"ring needs at least 2 vehicles (got n={n})")
    if n > max_n:
        raise ModelError(f"ring size n={n} exceeds the cap of {max_n}")


def shift_matrix(n: int) -> np.ndarray:
    """``(E x)_i = x_{i-1}`` with wrap-around: vehicle 1's predecessor is vehicle n."""
    return np.roll(np.eye(n), 1, axis=0)


def spacing_coupling(n: int) -> np.ndarray:
    """M1: spacing rate of vehicle i is ``v_{i-1} - v_i``."""
    return shift_matrix(n) - np.eye(n)


def hdv_velocity_block(coeffs: LinearHdvCoeffs, n: int) -> np.ndarray:
    """M2: all-HDV velocity coupling, ``-alpha2`` on the diagonal, ``alpha3`` on the predecessor."""
    return -coeffs.alpha2 * np.eye(n) + coeffs.alpha3 * shift_matrix(n)


def disturbance_matrix(n: int) -> np.ndarray:
    return np.vstack([np.zeros((n, n)), np.eye(n)])


def input_matrix(formation: FormationSet) -> np.ndarray:
    n = formation.n
    B = np.zeros((2 * n, formation.k))
    for r, i in enumerate(formation.indices):
        B[n + i - 1, r] = 1.0
    return B


def build_open_loop(
    coeffs: LinearHdvCoeffs, formation: FormationSet, max_n: int = MAX_RING_SIZE
) -> StateSpaceModel:
    n = formation.n
    _check_size(n, max_n)
    hdv = np.diag(1.0 - formation.mask())
    A = np.block([
        [np.zeros((n, n)), spacing_coupling(n)],
        [coeffs.alpha1 * hdv, hdv @ hdv_velocity_block(coeffs, n)],
    ])
    return StateSpaceModel(formation, A, input_matrix(formation), disturbance_matrix(n))


def build_acc_closed_loop(
    coeffs: LinearHdvCoeffs,
    formation: FormationSet,
    gains: AccGains,
    max_n: int = MAX_RING_SIZE,
) -> np.ndarray:
    """Closed loop when every AV runs the HDV-like ACC law with extra gains ks, kv."""
    n = formation.n
    _check_size(n, max_n)
    D = np.diag(formation.mask())
    return np.block([
        [np.zeros((n, n)), spacing_coupling(n)],
        [coeffs.alpha1 * np.eye(n) - gains.ks * D, hdv_velocity_block(coeffs, n) - gains.kv * D],
    ])


def conserved_direction(n: int) -> np.ndarray:
    """Unit left null vector of every ring model: the total spacing never changes."""
    return np.concatenate([np.ones(n), np.zeros(n)]) / math.sqrt(n)
