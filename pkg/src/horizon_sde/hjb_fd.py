"""Explicit monotone finite differences for the scalar finite-horizon HJB equation

    -v_t = min_{u in [c1, c2]} [ sigma(x,u)^2 v_xx / 2 + b(x,u) v_x + f(x,u) ],   v(T, x) = g(x),

marched backward from t = T to t = 0 on a uniform grid over [x_min, x_max].
Diffusion is centred.  The drift is centred where sigma^2 >= |b| dx and
upwinded on the sign of b(x,u) elsewhere, so the scheme stays monotone under
dt <= dx^2 / max(sigma^2 + dx |b|) over the grid and control samples: every
update is a convex combination of old values plus dt * f.

The right end is a Dirichlet node; the left end uses a cubic ghost value
(one-sided second-order derivatives).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import merton_debt as md
from .sde_core import NumericalError
from .value_rhc import RhcPolicy

Array = np.ndarray


class StabilityBoundError(ValueError):
    def __init__(self, required_n_t: int, n_t: int):
        self.required_n_t = required_n_t
        super().__init__(f"n_t={n_t} violates the explicit stability bound; need n_t >= {required_n_t}")


@dataclass(frozen=True)
class Grid1D:
    x_min: float
    x_max: float
    n_x: int
    T: float
    n_t: Optional[int] = None

    def __post_init__(self):
        if not self.x_min < self.x_max:
            raise ValueError("need x_min < x_max")
        if self.n_x < 16:
            raise ValueError("n_x must be at least 16")
        if not self.T > 0:
            raise ValueError("T must be positive")
        if self.n_t is not None and self.n_t < 1:
            raise ValueError("n_t must be positive")

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.n_x

    def x(self) -> Array:
        return self.x_min + np.arange(self.n_x + 1) * self.dx


@dataclass(frozen=True)
class HjbProblem1D:
    """Scalar HJB data.  Callables broadcast over numpy arrays.

    ``stationary_control(x, dv, d2v)``, when given, returns the interior
    critical point of the Hamiltonian in u; it is only consulted where
    d2v > 0.  ``right_value`` is the Dirichlet value at ``x_max``.
    """

    drift: Callable[[Array, Array], Array]
    diffusion: Callable[[Array, Array], Array]
    running_cost: Callable[[Array, Array], Array]
    terminal_cost: Callable[[Array], Array]
    control_interval: tuple[float, float]
    stationary_control: Optional[Callable[[Array, Array, Array], Array]] = None
    right_value: float = 0.0


@dataclass
class DiscreteHjbSolution:
    """``values[k]`` is v at ``times[k]``; ``minimizers[k]`` is the control used to
    step from the next stored time down to ``times[k]`` (absent for the terminal slice)."""

    values: Array
    minimizers: Array
    times: Array
    grid: Grid1D
    control_interval: tuple[float, float]

    @property
    def x(self) -> Array:
        return self.grid.x()


def _tables(problem: HjbProblem1D, x: Array, u: Array):
    X, U = x[:, None], u[None, :]
    B = np.broadcast_to(np.asarray(problem.drift(X, U), dtype=float), (len(x), len(u)))
    S2 = np.broadcast_to(np.asarray(problem.diffusion(X, U), dtype=float) ** 2, (len(x), len(u)))
    F = np.broadcast_to(np.asarray(problem.running_cost(X, U), dtype=float), (len(x), len(u)))
    return B, S2, F


def required_n_t(problem: HjbProblem1D, grid: Grid1D, n_u: int = 101) -> int:
    """Smallest n_t meeting dt <= dx^2 / max(sigma^2 + dx |b|)."""
    x = grid.x()
    u = np.linspace(*problem.control_interval, n_u)
    B, S2, _ = _tables(problem, x, u)
    dx = grid.dx
    worst = float(np.max(S2 + dx * np.abs(B)))
    if worst == 0:
        return 1
    return max(1, math.ceil(grid.T * worst / dx**2 * (1 + 1e-12)))


def _drift_weights(B: Array, S2: Array, dx: float, central: bool):
    """Weights on the forward and backward differences in the drift term.

    Upwind on the sign of b; with ``central`` the centred difference is used
    wherever it keeps the scheme monotone (sigma^2 >= |b| dx).
    """
    fw, bw = np.maximum(B, 0.0), np.minimum(B, 0.0)
    if central:
        ok = S2 >= np.abs(B) * dx
        fw = np.where(ok, 0.5 * B, fw)
        bw = np.where(ok, 0.5 * B, bw)
    return fw, bw


def solve_hjb_1d(
    problem: HjbProblem1D,
    grid: Grid1D,
    n_u: int = 101,
    save_every: int = 1,
    central_drift: bool = True,
) -> DiscreteHjbSolution:
    """Backward explicit solve.  Slices with index divisible by ``save_every`` are
    stored, plus t = 0 and t = T.  ``grid.n_t=None`` picks the smallest stable n_t.

    ``central_drift=False`` upwinds the drift at every node; the default
    centres it wherever diffusion dominates, which is still monotone.
    """
    c1, c2 = problem.control_interval
    if not c1 <= c2:
        raise ValueError("control interval must satisfy c1 <= c2")
    need = required_n_t(problem, grid, n_u)
    n_t = need if grid.n_t is None else grid.n_t
    if n_t < need:
        raise StabilityBoundError(need, n_t)
    if grid.n_t is None:
        grid = Grid1D(grid.x_min, grid.x_max, grid.n_x, grid.T, n_t)

    x = grid.x()
    dx, dt = grid.dx, grid.T / n_t
    us = np.linspace(c1, c2, n_u)
    B, S2, F = _tables(problem, x, us)
    half_s2 = 0.5 * S2
    c_fw, c_bw = _drift_weights(B, S2, dx, central_drift)
    rows = np.arange(len(x))
    interior = x != 0

    v = np.asarray(problem.terminal_cost(x), dtype=float) * np.ones_like(x)
    if np.any(v < 0):
        raise ValueError("terminal cost must be nonnegative on the grid")
    if np.any(F < 0):
        raise ValueError("running cost must be nonnegative on the grid")

    saved_k = sorted({k for k in range(0, n_t + 1, save_every)} | {0, n_t})
    slot = {k: i for i, k in enumerate(saved_k)}
    values = np.empty((len(saved_k), len(x)))
    minimizers = np.empty((len(saved_k) - 1, len(x)))
    values[-1] = v

    ext = np.empty(len(x) + 2)
    for k in range(n_t - 1, -1, -1):
        ext[1:-1] = v
        ext[0] = 4 * v[0] - 6 * v[1] + 4 * v[2] - v[3]
        ext[-1] = 2 * v[-1] - v[-2]  # unused: the right node is Dirichlet
        d2 = (ext[2:] - 2 * v + ext[:-2]) / dx**2
        dfw = (ext[2:] - v) / dx
        dbw = (v - ext[:-2]) / dx

        H = half_s2 * d2[:, None] + c_fw * dfw[:, None] + c_bw * dbw[:, None] + F
        j = np.argmin(H, axis=1)  # first minimum: smallest u on ties
        u_best = us[j]
        h_best = H[rows, j]

        if problem.stationary_control is not None:
            mask = (d2 > 0) & interior
            if mask.any():
                xm = x[mask]
                dc = (ext[2:] - ext[:-2])[mask] / (2 * dx)
                with np.errstate(divide="ignore", invalid="ignore"):
                    us_ = np.clip(np.asarray(problem.stationary_control(xm, dc, d2[mask]), dtype=float), c1, c2)
                ok = np.isfinite(us_)
                bs = np.asarray(problem.drift(xm, us_), dtype=float)
                s2 = np.asarray(problem.diffusion(xm, us_), dtype=float) ** 2
                wf, wb = _drift_weights(bs, s2, dx, central_drift)
                hs = 0.5 * s2 * d2[mask] + wf * dfw[mask] + wb * dbw[mask] + np.asarray(problem.running_cost(xm, us_), dtype=float)
                better = ok & (hs < h_best[mask])
                idx = np.flatnonzero(mask)[better]
                u_best[idx] = us_[better]
                h_best[idx] = hs[better]

        v = v + dt * h_best
        v[-1] = problem.right_value
        if not np.all(np.isfinite(v)):
            i = int(np.flatnonzero(~np.isfinite(v))[0])
            raise NumericalError(f"non-finite HJB update at t={k * dt:.6g}, x={x[i]:.6g}")
        if k in slot:
            values[slot[k]] = v
            minimizers[slot[k]] = u_best

    return DiscreteHjbSolution(values, minimizers, grid.T * np.asarray(saved_k) / n_t, grid, (c1, c2))


def extract_rhc(solution: DiscreteHjbSolution) -> RhcPolicy:
    """u_c(x) from the t = 0 minimiser slice, linear in x, constant beyond the grid."""
    xg = solution.x
    u0 = solution.minimizers[0].copy()
    c1, c2 = solution.control_interval

    def control_of(x, T):
        x = np.asarray(x, dtype=float)
        return np.clip(np.interp(x, xg, u0), c1, c2)

    return RhcPolicy(control_of, solution.grid.T)


def debt_hjb_problem(problem: md.DebtProblem, variant: str = md.RUNNING) -> HjbProblem1D:
    """HJB data for the debt-repayment model."""
    r, d, s, beta = problem.market.r, problem.market.excess_return, problem.market.sigma, problem.beta

    def stationary(x, dv, d2v):
        return -d * dv / (s * s * x * d2v)

    if variant == md.RUNNING:
        f = lambda x, u: md.neg_power(x, beta) + 0.0 * np.asarray(u)  # noqa: E731
        g = lambda x: np.zeros(np.shape(x))  # noqa: E731
    elif variant == md.TERMINAL:
        f = lambda x, u: np.zeros(np.broadcast_shapes(np.shape(x), np.shape(u)))  # noqa: E731
        g = lambda x: md.neg_power(x, beta)  # noqa: E731
    else:
        raise ValueError(f"unknown cost variant {variant!r}")
    return HjbProblem1D(
        drift=lambda x, u: (r + d * np.asarray(u)) * np.asarray(x),
        diffusion=lambda x, u: s * np.asarray(u) * np.asarray(x),
        running_cost=f,
        terminal_cost=g,
        control_interval=(problem.c1, problem.c2),
        stationary_control=stationary,
    )


@dataclass(frozen=True)
class ComparisonReport:
    window: tuple[float, float]
    max_rel_err: float
    mean_rel_err: float
    worst_x: float
    minimizer_max_dev: float
    minimizer_mean_dev: float
    merton_fraction: float

    @property
    def minimizer_max_rel_dev(self) -> float:
        return self.minimizer_max_dev / abs(self.merton_fraction)

    def render(self) -> str:
        return (
            f"window x in [{self.window[0]:g}, {self.window[1]:g}]\n"
            f"value: max rel err {self.max_rel_err:.4e} (at x={self.worst_x:g}), mean rel err {self.mean_rel_err:.4e}\n"
            f"minimizer: max |u - u_merton| {self.minimizer_max_dev:.4e} "
            f"({100 * self.minimizer_max_rel_dev:.3f}% of |u_merton|={abs(self.merton_fraction):.6f}), "
            f"mean {self.minimizer_mean_dev:.4e}"
        )


def default_window(grid: Grid1D) -> tuple[float, float]:
    """Interior window skipping 25% of the domain at x_min and 2.5% at x_max."""
    L = grid.x_max - grid.x_min
    return grid.x_min + 0.25 * L, grid.x_max - 0.025 * L


def compare_to_closed_form(
    solution: DiscreteHjbSolution,
    problem: md.DebtProblem,
    variant: str = md.RUNNING,
    window: Optional[tuple[float, float]] = None,
) -> ComparisonReport:
    if abs(solution.grid.T - problem.T) > 1e-12:
        raise ValueError("solution horizon does not match the problem")
    lo, hi = window if window is not None else default_window(solution.grid)
    x = solution.x
    sel = (x >= lo - 1e-12) & (x <= hi + 1e-12)
    exact = md.value_closed_form(problem, 0.0, x[sel], variant)
    rel = np.abs(solution.values[0][sel] - exact) / np.abs(exact)
    u_star = problem.merton_fraction
    dev = np.abs(solution.minimizers[0][sel] - u_star)
    return ComparisonReport(
        window=(lo, hi),
        max_rel_err=float(rel.max()),
        mean_rel_err=float(rel.mean()),
        worst_x=float(x[sel][np.argmax(rel)]),
        minimizer_max_dev=float(dev.max()),
        minimizer_mean_dev=float(dev.mean()),
        merton_fraction=u_star,
    )
