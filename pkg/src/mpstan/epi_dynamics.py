"""Discrete-time SIR and metapopulation SIR (MP-SIR) dynamics.

Every function accepts either numpy arrays or torch tensors; the torch path is
what the network differentiates through, the numpy path is what the simulator
and the baseline use.  States are raw person counts, one entry per patch.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
import torch

from .errors import GraphError, InputError
from .geo_graph import PatchGraph

Array = Union[np.ndarray, torch.Tensor]


def _is_torch(x) -> bool:
    return isinstance(x, torch.Tensor)


def _clamp0(x):
    return x.clamp_min(0.0) if _is_torch(x) else np.maximum(x, 0.0)


def _count_negative(*xs) -> int:
    if _is_torch(xs[0]):
        with torch.no_grad():
            return int(sum(int((x < 0).sum()) for x in xs))
    return int(sum(np.count_nonzero(x < 0) for x in xs))


@dataclass(frozen=True)
class CompartmentState:
    S: Array
    I: Array
    R: Array
    population: Array

    def __post_init__(self):
        if not _is_torch(self.population) and np.any(np.asarray(self.population) <= 0):
            raise InputError("patch population must be positive")

    @property
    def total(self):
        return self.S + self.I + self.R

    @classmethod
    def from_channels(cls, x, population) -> "CompartmentState":
        """Build from an N x 3 array in (active, recovered, susceptible) order."""
        return cls(S=x[..., 2], I=x[..., 0], R=x[..., 1], population=population)

    def to_channels(self):
        """N x 3 array in (active, recovered, susceptible) order."""
        if _is_torch(self.S):
            return torch.stack([self.I, self.R, self.S], dim=-1)
        return np.stack([self.I, self.R, self.S], axis=-1)


@dataclass(frozen=True)
class EpiParams:
    """Per-patch daily rates: infection, recovery, and S/I/R emigration."""

    beta: Array
    gamma: Array
    d_s: Array
    d_i: Array
    d_r: Array

    def __post_init__(self):
        # generated (torch) parameters are squashed into (0, 1) upstream
        for name in ("beta", "gamma", "d_s", "d_i", "d_r"):
            v = getattr(self, name)
            if not _is_torch(v):
                v = np.asarray(v, dtype=float)
                if np.any(v < 0) or np.any(v > 1) or not np.all(np.isfinite(v)):
                    raise InputError(f"rate {name} must lie in [0, 1]")
                object.__setattr__(self, name, v)

    @classmethod
    def constant(cls, n, beta=0.0, gamma=0.0, d_s=0.0, d_i=0.0, d_r=0.0) -> "EpiParams":
        return cls(*(np.full(n, float(v)) for v in (beta, gamma, d_s, d_i, d_r)))


@dataclass(frozen=True)
class StateDelta:
    dS: Array
    dI: Array
    dR: Array


def sir_step(x: CompartmentState, beta, gamma) -> StateDelta:
    """Daily change under independent per-patch SIR dynamics."""
    infections = beta * x.I * x.S / x.population
    recoveries = gamma * x.I
    return StateDelta(dS=-infections, dI=infections - recoveries, dR=recoveries)


def _mobility(g, like):
    if _is_torch(like):
        if isinstance(g, torch.Tensor):
            return g
        return torch.as_tensor(g.mobility_matrix, dtype=like.dtype)
    if isinstance(g, PatchGraph):
        return g.mobility_matrix
    return np.asarray(g)


def mpsir_step(x: CompartmentState, g, p: EpiParams) -> StateDelta:
    """Daily change under MP-SIR.

    ``g`` is a :class:`PatchGraph` or a precomputed mobility matrix
    ``M[i, j] = P(j|i)`` (as a tensor for the differentiable path).  Each
    compartment loses ``D_i * C_i`` to emigration and gains
    ``sum_j P(j|i) D_j C_j`` from its neighbours.
    """
    if isinstance(g, PatchGraph) and np.any(g.degree == 0):
        raise GraphError("isolated patch in MP-SIR graph")
    m = _mobility(g, x.S)
    base = sir_step(x, p.beta, p.gamma)
    out_s, out_i, out_r = p.d_s * x.S, p.d_i * x.I, p.d_r * x.R
    return StateDelta(
        dS=base.dS - out_s + m @ out_s,
        dI=base.dI - out_i + m @ out_i,
        dR=base.dR - out_r + m @ out_r,
    )


def apply_step(x: CompartmentState, d: StateDelta, count: bool = True) -> tuple[CompartmentState, int]:
    """Forward-Euler update with a one-day step.

    Negative compartments are clamped to zero; the number of clamped entries
    is returned alongside the new state (0 when ``count`` is off).
    """
    s, i, r = x.S + d.dS, x.I + d.dI, x.R + d.dR
    clamps = _count_negative(s, i, r) if count else 0
    new = CompartmentState(S=_clamp0(s), I=_clamp0(i), R=_clamp0(r), population=x.population)
    return new, clamps


def step_channels(x, population, p: EpiParams, mobility=None, count: bool = False):
    """One clamped Euler step on an N x 3 (active, recovered, susceptible) array.

    Vectorized equivalent of ``apply_step(x, mpsir_step(...))`` (or of the
    plain SIR step when ``mobility`` is None) used on the differentiable path.
    Returns ``(next_state, clamps)``.
    """
    torch_path = _is_torch(x)
    cat = torch.stack if torch_path else np.stack
    i, s = x[:, 0], x[:, 2]
    infections = p.beta * i * s / population
    recoveries = p.gamma * i
    delta = cat([infections - recoveries, recoveries, -infections], 1)
    if mobility is not None:
        out = cat([p.d_i, p.d_r, p.d_s], 1) * x
        delta = delta - out + mobility @ out
    nxt = x + delta
    clamps = _count_negative(nxt) if count else 0
    return _clamp0(nxt), clamps


@dataclass
class Trajectory:
    states: list  # x0 followed by one state per step
    infected: Array  # horizon x N, the infected series of steps 1..horizon
    clamps: int


def rollout(
    x0: CompartmentState,
    g,
    p: EpiParams,
    horizon: int,
    use_mobility: bool = True,
    count: bool = True,
) -> Trajectory:
    """Iterate the (MP-)SIR update ``horizon`` times with frozen parameters."""
    if horizon < 1:
        raise InputError("horizon must be >= 1")
    states = [x0]
    clamps = 0
    x = x0
    for _ in range(horizon):
        d = mpsir_step(x, g, p) if use_mobility else sir_step(x, p.beta, p.gamma)
        x, c = apply_step(x, d, count)
        clamps += c
        states.append(x)
    if _is_torch(x0.I):
        infected = torch.stack([s.I for s in states[1:]])
    else:
        infected = np.stack([s.I for s in states[1:]])
    return Trajectory(states=states, infected=infected, clamps=clamps)


@dataclass
class SIRFit:
    beta: np.ndarray
    gamma: np.ndarray
    degenerate: np.ndarray  # True where the infected series was identically zero


GRID_STEP = 0.001


def fit_sir_baseline(S, I, R, population, resolution: float = GRID_STEP) -> SIRFit:
    """Grid least-squares fit of per-patch (beta, gamma).

    ``S``, ``I``, ``R`` are T x N histories.  The objective is the squared
    one-step-ahead error of the SIR update summed over all three compartments;
    it is an exact quadratic in (beta, gamma), so it is evaluated on the whole
    grid from its six coefficients.  Ties resolve to the smaller beta, then
    the smaller gamma.
    """
    S, I, R = (np.atleast_2d(np.asarray(v, dtype=float).T).T for v in (S, I, R))
    population = np.broadcast_to(np.asarray(population, dtype=float), S.shape[1:])
    if S.shape[0] < 3:
        raise InputError("need at least 3 time points to fit SIR")
    n_steps = int(round(1.0 / resolution))
    grid = np.arange(n_steps + 1) * resolution
    n = S.shape[1]
    beta = np.zeros(n)
    gamma = np.zeros(n)
    degenerate = np.zeros(n, dtype=bool)
    for k in range(n):
        if not np.any(I[:, k]):
            degenerate[k] = True
            continue
        a = I[:-1, k] * S[:-1, k] / population[k]
        b = I[:-1, k]
        u, v, w = np.diff(S[:, k]), np.diff(I[:, k]), np.diff(R[:, k])
        c0 = np.sum(u * u + v * v + w * w)
        c_b = 2.0 * np.sum(a * (u - v))
        c_g = 2.0 * np.sum(b * (v - w))
        c_bb = 2.0 * np.sum(a * a)
        c_gg = 2.0 * np.sum(b * b)
        c_bg = -2.0 * np.sum(a * b)
        gb, gg = grid[:, None], grid[None, :]
        err = c0 + c_b * gb + c_g * gg + c_bb * gb * gb + c_gg * gg * gg + c_bg * gb * gg
        ib, ig = np.unravel_index(np.argmin(err), err.shape)
        beta[k], gamma[k] = grid[ib], grid[ig]
    return SIRFit(beta=beta, gamma=gamma, degenerate=degenerate)
