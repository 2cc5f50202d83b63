"""Controlled time-homogeneous SDEs and their simulation.

Array convention used throughout the package: a state is an array whose last
axis has length ``state_dim`` and a control is an array whose last axis has
length ``control_dim``.  ``drift`` and ``diffusion`` must broadcast over any
leading (batch) axes, so ``drift(x, u)`` with ``x.shape == (P, n)`` returns
``(P, n)`` and ``diffusion(x, u)`` returns ``(P, n, d)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

Array = np.ndarray


class NumericalError(ArithmeticError):
    """A drift, diffusion or exponent evaluated to a non-finite number."""


@dataclass(frozen=True)
class ControlSet:
    """Compact box ``[lower, upper]`` in control space."""

    lower: Array
    upper: Array

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError(f"control bounds must be 1-D of equal length, got {lo.shape} and {hi.shape}")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("control bounds must be finite")
        if np.any(lo > hi):
            raise ValueError(f"control set lower bound exceeds upper bound: {lo} > {hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def project(self, u) -> Array:
        return np.clip(np.asarray(u, dtype=float), self.lower, self.upper)

    def contains(self, u, tol: float = 0.0) -> bool:
        u = np.asarray(u, dtype=float)
        return bool(np.all(u >= self.lower - tol) and np.all(u <= self.upper + tol))

    def corners(self) -> Array:
        """All 2^m vertices of the box, shape (2^m, m)."""
        grids = np.meshgrid(*[[lo, hi] for lo, hi in zip(self.lower, self.upper)], indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=-1)


@dataclass(frozen=True)
class ControlledSde:
    """dX = drift(X, u) dt + diffusion(X, u) dW with u restricted to a box.

    ``absorbing_origin`` marks one-dimensional models where a discretised step
    crossing zero is treated as reaching the equilibrium (the state is pinned
    at 0 afterwards).
    """

    state_dim: int
    control_dim: int
    noise_dim: int
    drift: Callable[[Array, Array], Array]
    diffusion: Callable[[Array, Array], Array]
    control_set: ControlSet
    absorbing_origin: bool = False

    def __post_init__(self):
        if self.control_set.dim != self.control_dim:
            raise ValueError("control_set dimension does not match control_dim")
        if self.absorbing_origin and self.state_dim != 1:
            raise ValueError("absorbing_origin is only defined for scalar states")


@dataclass(frozen=True)
class TimeGrid:
    t_start: float
    dt: float
    n_steps: int

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")

    @classmethod
    def spanning(cls, horizon: float, dt: float, t_start: float = 0.0) -> "TimeGrid":
        """Grid from ``t_start`` to ``t_start + horizon`` with step ``dt``."""
        n = int(round(horizon / dt))
        if n < 1 or abs(n * dt - horizon) > 1e-9 * max(1.0, horizon):
            raise ValueError(f"horizon {horizon} is not an integer multiple of dt {dt}")
        return cls(t_start, dt, n)

    @property
    def t_end(self) -> float:
        return self.t_start + self.n_steps * self.dt

    def times(self) -> Array:
        # t_start + k*dt, never accumulated
        return self.t_start + np.arange(self.n_steps + 1) * self.dt

    def index_of(self, t: float) -> int:
        k = int(round((t - self.t_start) / self.dt))
        if k < 0 or k > self.n_steps or abs(self.t_start + k * self.dt - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"time {t} is not a grid point of {self}")
        return k


@dataclass(frozen=True)
class NoiseSource:
    """Per-path Wiener increments keyed by ``(master_seed, path_index)``.

    The stream is a Philox counter-based generator whose key is derived from
    both integers, so a path's noise never depends on which other paths were
    drawn, in which order, or on how many workers drew them.

    ``substeps > 1`` draws the Brownian path on a grid that many times finer
    and sums blocks, so a coarse and a fine simulation can share one path.
    """

    master_seed: int
    path_index: int
    substeps: int = 1

    def __post_init__(self):
        if not 0 <= self.master_seed < 2**64:
            raise ValueError("master_seed must be a 64-bit unsigned integer")
        if self.path_index < 0:
            raise ValueError("path_index must be nonnegative")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence([self.master_seed & 0xFFFFFFFF, self.master_seed >> 32, self.path_index])
        return np.random.Generator(np.random.Philox(seq))

    def increments(self, n_steps: int, dt: float, dim: int = 1) -> Array:
        """Wiener increments of shape ``(n_steps, dim)``, each N(0, dt)."""
        fine = self.generator().standard_normal((n_steps * self.substeps, dim))
        fine *= np.sqrt(dt / self.substeps)
        if self.substeps == 1:
            return fine
        return fine.reshape(n_steps, self.substeps, dim).sum(axis=1)


@dataclass
class SamplePath:
    times: Array
    states: Array
    controls: Array
    noise_increments: Array
    diverged: bool = False
    absorbed_step: Optional[int] = None

    @property
    def n_steps(self) -> int:
        return len(self.controls)


@dataclass(frozen=True)
class RegularityReport:
    empirical_lipschitz: float
    empirical_growth: float
    probe_count: int
    violations: list = field(default_factory=list)


def _check_finite(value: Array, what: str, x, u) -> Array:
    if not np.all(np.isfinite(value)):
        raise NumericalError(f"non-finite {what} at x={np.asarray(x).tolist()}, u={np.asarray(u).tolist()}")
    return value


def euler_maruyama_step(sde: ControlledSde, x, u, dt: float, dW) -> Array:
    """One Euler-Maruyama step ``x + b(x,u) dt + sigma(x,u) dW``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    dW = np.atleast_1d(np.asarray(dW, dtype=float))
    if not sde.control_set.contains(u, tol=1e-12):
        raise ValueError(f"control {u.tolist()} lies outside the control set")
    b = _check_finite(np.asarray(sde.drift(x, u), dtype=float), "drift", x, u)
    s = _check_finite(np.asarray(sde.diffusion(x, u), dtype=float), "diffusion", x, u)
    return x + b * dt + s @ dW


def simulate_closed_loop_batch(
    sde: ControlledSde,
    policy: Callable[[Array], Array],
    x0,
    grid: TimeGrid,
    noises: Sequence[NoiseSource],
    increments: Optional[Array] = None,
) -> list[SamplePath]:
    """Simulate one path per noise source, vectorised across paths.

    ``policy`` maps states ``(..., n)`` to controls ``(..., m)``; its output
    is projected onto the control set.  ``increments`` may carry
    pre-drawn noise of shape ``(P, n_steps, d)``.
    """
    n, m, d = sde.state_dim, sde.control_dim, sde.noise_dim
    P = len(noises)
    if increments is None:
        increments = np.stack([ns.increments(grid.n_steps, grid.dt, d) for ns in noises]) if P else np.zeros((0, grid.n_steps, d))
    x = np.broadcast_to(np.asarray(x0, dtype=float).reshape(-1), (P, n)).copy()
    states = np.empty((P, grid.n_steps + 1, n))
    controls = np.empty((P, grid.n_steps, m))
    states[:, 0] = x
    alive = np.ones(P, dtype=bool)
    last = np.full(P, grid.n_steps)
    absorbed = np.full(P, -1)

    for k in range(grid.n_steps):
        u = sde.control_set.project(np.asarray(policy(x), dtype=float).reshape(P, m))
        controls[:, k] = u
        with np.errstate(all="ignore"):
            b = np.asarray(sde.drift(x, u), dtype=float).reshape(P, n)
            s = np.asarray(sde.diffusion(x, u), dtype=float).reshape(P, n, d)
            x_new = x + b * grid.dt + np.einsum("pij,pj->pi", s, increments[:, k])
        bad = alive & ~np.all(np.isfinite(x_new), axis=1)
        if bad.any():
            last[bad] = k
            alive &= ~bad
        if sde.absorbing_origin:
            crossed = alive & (absorbed < 0) & (np.sign(x_new[:, 0]) != np.sign(x[:, 0])) & (x[:, 0] != 0)
            absorbed[crossed] = k + 1
            x_new[crossed] = 0.0
            x_new[absorbed >= 0] = 0.0
        x = np.where(alive[:, None], x_new, x)
        states[:, k + 1] = x

    times = grid.times()
    paths = []
    for p in range(P):
        k_end = last[p]
        paths.append(
            SamplePath(
                times=times[: k_end + 1],
                states=states[p, : k_end + 1],
                controls=controls[p, :k_end],
                noise_increments=increments[p, :k_end],
                diverged=bool(k_end < grid.n_steps),
                absorbed_step=int(absorbed[p]) if absorbed[p] >= 0 else None,
            )
        )
    return paths


def simulate_closed_loop(sde: ControlledSde, policy, x0, grid: TimeGrid, noise: NoiseSource) -> SamplePath:
    """Closed-loop Euler-Maruyama path under a state-feedback ``policy``.

    A path whose state becomes non-finite is cut at the last finite state and
    flagged ``diverged``.
    """
    return simulate_closed_loop_batch(sde, policy, x0, grid, [noise])[0]


def gbm_states(log_drift: float, log_diffusion: float, x0: float, times: Array, increments: Array) -> Array:
    """x0 * exp(log_drift * t + log_diffusion * W_t) with W the cumulated increments.

    ``increments`` has shape ``(..., n_steps)``; the result has shape
    ``(..., n_steps + 1)``.
    """
    W = np.concatenate([np.zeros(increments.shape[:-1] + (1,)), np.cumsum(increments, axis=-1)], axis=-1)
    rel = times - times[0]
    with np.errstate(over="ignore"):
        expo = log_drift * rel + log_diffusion * W
        out = x0 * np.exp(expo)
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"exponent overflow in exact GBM path (max exponent {np.max(expo):.6g})")
    return out


def simulate_exact_gbm(
    log_drift: float,
    log_diffusion: float,
    x0: float,
    grid: TimeGrid,
    noise: NoiseSource,
    control: float = 0.0,
) -> SamplePath:
    """Exact geometric Brownian motion sampled on ``grid``.

    ``control`` is only recorded (the constant feedback generating the GBM).
    """
    dW = noise.increments(grid.n_steps, grid.dt, 1)
    times = grid.times()
    states = gbm_states(log_drift, log_diffusion, float(x0), times, dW[:, 0])
    return SamplePath(
        times=times,
        states=states[:, None],
        controls=np.full((grid.n_steps, 1), float(control)),
        noise_increments=dW,
    )


def _norm(a: Array, axes) -> Array:
    return np.sqrt(np.sum(a * a, axis=axes))


def check_regularity(
    sde: ControlledSde,
    probe_box,
    n_probes: int,
    seed: int,
    lipschitz_bound: Optional[float] = None,
    growth_bound: Optional[float] = None,
) -> RegularityReport:
    """Sample the linear-growth and Lipschitz ratios of an SDE's coefficients.

    ``probe_box`` is ``(lower, upper)`` in state space.  Controls are drawn
    uniformly from the control set.  Euclidean norms for vectors, Frobenius
    for the diffusion matrix.  When a claimed bound is given, every probe that
    exceeds it is listed in ``violations``; otherwise the reported constants
    are the sampled maxima and nothing can exceed them.
    """
    lo = np.atleast_1d(np.asarray(probe_box[0], dtype=float))
    hi = np.atleast_1d(np.asarray(probe_box[1], dtype=float))
    if n_probes < 2 or not np.all(hi > lo):
        raise ValueError("need n_probes >= 2 and a non-degenerate probe box")
    rng = np.random.default_rng(seed)
    n = sde.state_dim
    x = lo + (hi - lo) * rng.random((n_probes, n))
    y = lo + (hi - lo) * rng.random((n_probes, n))
    cs = sde.control_set
    u = cs.lower + (cs.upper - cs.lower) * rng.random((n_probes, cs.dim))

    bx = np.asarray(sde.drift(x, u), dtype=float).reshape(n_probes, n)
    by = np.asarray(sde.drift(y, u), dtype=float).reshape(n_probes, n)
    sx = np.asarray(sde.diffusion(x, u), dtype=float).reshape(n_probes, n, -1)
    sy = np.asarray(sde.diffusion(y, u), dtype=float).reshape(n_probes, n, -1)

    dist = _norm(x - y, 1)
    ok = dist > 0
    lip = np.zeros(n_probes)
    lip[ok] = (_norm(bx - by, 1) + _norm(sx - sy, (1, 2)))[ok] / dist[ok]
    growth = (_norm(bx, 1) + _norm(sx, (1, 2))) / (1.0 + _norm(x, 1))

    violations = []
    for i in range(n_probes):
        if lipschitz_bound is not None and lip[i] > lipschitz_bound:
            violations.append(("lipschitz", x[i].tolist(), y[i].tolist(), u[i].tolist(), float(lip[i])))
        if growth_bound is not None and growth[i] > growth_bound:
            violations.append(("growth", x[i].tolist(), None, u[i].tolist(), float(growth[i])))
    return RegularityReport(
        empirical_lipschitz=float(lip.max()),
        empirical_growth=float(growth.max()),
        probe_count=n_probes,
        violations=violations,
    )
