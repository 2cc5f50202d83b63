"""Monte Carlo ensembles and empirical checks of the stability results.

Statistics here operate on the Lyapunov candidate V(X_t; T) along closed-loop
paths: the mean of a supermartingale must not increase, its running maximum
obeys P[sup V >= lam] <= V(x0)/lam, and E V(X_t) - V(x0) = -int_0^t E phi(X_s) ds.
Continuous-time suprema are approximated by the maximum over grid points.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import merton_debt as md
from .sde_core import (
    NoiseSource,
    SamplePath,
    TimeGrid,
    gbm_states,
    simulate_closed_loop_batch,
)
from .value_rhc import RhcPolicy, ValueFunction

Array = np.ndarray

THREADS_ENV = "HORIZON_SDE_THREADS"
EXACT = "exact"
EULER = "euler"

# figure horizons (years) by beta; the third figure needs the long axis
FIGURE_BETAS = (2.1, 4.5, 7.8)
FIGURE_HORIZONS = {2.1: 25.0, 4.5: 100.0, 7.8: 100.0}


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return min(8, os.cpu_count() or 1)


def draw_increments(master_seed: int, n_paths: int, n_steps: int, dt: float, dim: int = 1, substeps: int = 1) -> Array:
    """Stacked per-path increments, shape (n_paths, n_steps, dim).

    Paths are drawn independently from their own keyed streams; the worker
    count only changes wall time.
    """
    out = np.empty((n_paths, n_steps, dim))

    def fill(i):
        out[i] = NoiseSource(master_seed, i, substeps).increments(n_steps, dt, dim)

    workers = worker_count()
    if workers == 1 or n_paths < 2:
        for i in range(n_paths):
            fill(i)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(fill, range(n_paths)))
    return out


@dataclass
class Ensemble:
    paths: list
    master_seed: int
    tag: str
    grid: TimeGrid
    problem: Optional[md.DebtProblem] = None
    policy: Optional[RhcPolicy] = None

    @property
    def n_paths(self) -> int:
        return len(self.paths)

    @property
    def absorbed_count(self) -> int:
        return sum(p.absorbed_step is not None for p in self.paths)

    @property
    def diverged_count(self) -> int:
        return sum(p.diverged for p in self.paths)

    def states(self) -> Array:
        """(n_paths, n_steps + 1) scalar states, NaN after a divergence cut."""
        out = np.full((self.n_paths, self.grid.n_steps + 1), np.nan)
        for i, p in enumerate(self.paths):
            out[i, : len(p.states)] = p.states[:, 0]
        return out


def run_ensemble(
    problem: md.DebtProblem,
    n_paths: int,
    grid: TimeGrid,
    master_seed: int,
    integrator: str = EXACT,
    substeps: int = 1,
) -> Ensemble:
    """Closed-loop paths of the wealth SDE under the constant Merton-fraction law."""
    policy = md.rhc_policy(problem)  # raises when the law violates [c1, c2]
    u = problem.merton_fraction
    dW = draw_increments(master_seed, n_paths, grid.n_steps, grid.dt, 1, substeps)
    if integrator == EXACT:
        a, s = md.exact_solution_exponents(problem.market, problem.beta)
        times = grid.times()
        X = gbm_states(a, s, problem.x0, times, dW[:, :, 0]) if n_paths else np.zeros((0, len(times)))
        ctrl = np.full((grid.n_steps, 1), u)
        paths = [SamplePath(times, X[i][:, None], ctrl, dW[i]) for i in range(n_paths)]
    elif integrator == EULER:
        sde = md.problem_sde(problem)
        noises = [NoiseSource(master_seed, i, substeps) for i in range(n_paths)]
        paths = simulate_closed_loop_batch(sde, policy, [problem.x0], grid, noises, increments=dW)
    else:
        raise ValueError(f"unknown integrator {integrator!r}")
    tag = f"debt beta={problem.beta:g} x0={problem.x0:g} T={problem.T:g} {integrator}"
    return Ensemble(paths, master_seed, tag, grid, problem, policy)


# ---------------------------------------------------------------------------
# supermartingale checks


@dataclass
class SupermartingaleTestResult:
    times: Array
    mean_V: Array
    std_err: Array
    max_violation_z: float
    z_threshold: float
    pass_: bool

    @property
    def passed(self) -> bool:
        return self.pass_


@dataclass
class TailBoundResult:
    lambdas: Array
    empirical_prob: Array
    bound: Array
    std_err: Array
    pass_: bool

    @property
    def passed(self) -> bool:
        return self.pass_


@dataclass
class PhiIdentityResult:
    t_end: float
    mean_V_end: float
    V0: float
    phi_integral: float
    residual: float
    relative_residual: float
    mc_std_err: float


def _horizon(ensemble: Ensemble, horizon: Optional[float]) -> float:
    if horizon is not None:
        return horizon
    if ensemble.problem is None:
        raise ValueError("pass the value-function horizon explicitly")
    return ensemble.problem.T


def _V_on(ensemble: Ensemble, V: ValueFunction, T: float, idx) -> Array:
    X = ensemble.states()[:, idx]
    return np.asarray(V.evaluate(X[..., None], T), dtype=float)


def test_supermartingale(
    ensemble: Ensemble,
    V: ValueFunction,
    checkpoints: Sequence[float],
    z_threshold: float = 3.0,
    horizon: Optional[float] = None,
) -> SupermartingaleTestResult:
    """Flag any statistically significant increase of mean V between consecutive checkpoints.

    The z-score of each increase uses the paired per-path differences.
    """
    if ensemble.n_paths == 0:
        raise ValueError("empty ensemble")
    T = _horizon(ensemble, horizon)
    idx = [ensemble.grid.index_of(t) for t in checkpoints]
    vals = _V_on(ensemble, V, T, idx)
    n = vals.shape[0]
    mean = vals.mean(axis=0)
    se = vals.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros(len(idx))
    zmax = -math.inf
    for k in range(len(idx) - 1):
        diff = vals[:, k + 1] - vals[:, k]
        m = diff.mean()
        s = diff.std(ddof=1) / math.sqrt(n) if n > 1 else 0.0
        if s > 0:
            z = m / s
        else:
            z = math.inf if m > 0 else 0.0
        zmax = max(zmax, z)
    if len(idx) < 2:
        zmax = 0.0
    return SupermartingaleTestResult(np.asarray(checkpoints, float), mean, se, float(zmax), z_threshold, bool(zmax <= z_threshold))


test_supermartingale.__test__ = False


def test_tail_bound(
    ensemble: Ensemble,
    V: ValueFunction,
    lambdas: Sequence[float],
    n_se: float = 2.0,
    horizon: Optional[float] = None,
) -> TailBoundResult:
    """Empirical P[max over grid of V(X_t) >= lam] against V(x0)/lam.

    The allowance is ``n_se`` binomial standard errors evaluated at the bound
    (capped at probability one).
    """
    lambdas = np.asarray(lambdas, dtype=float)
    if np.any(lambdas <= 0):
        raise ValueError("lambdas must be positive")
    T = _horizon(ensemble, horizon)
    vals = _V_on(ensemble, V, T, slice(None))
    sup = np.nanmax(vals, axis=1)
    V0 = float(vals[0, 0]) if len(vals) else float(V.evaluate(np.array([ensemble.problem.x0]), T))
    n = max(len(sup), 1)
    emp = np.array([(sup >= lam).mean() if len(sup) else 0.0 for lam in lambdas])
    bound = V0 / lambdas
    p0 = np.minimum(bound, 1.0)
    se = np.sqrt(p0 * (1 - p0) / n)
    return TailBoundResult(lambdas, emp, bound, se, bool(np.all(emp <= bound + n_se * se)))


test_tail_bound.__test__ = False


def test_phi_identity(
    ensemble: Ensemble,
    V: ValueFunction,
    phi: Callable[[Array], Array],
    t_end: float,
    horizon: Optional[float] = None,
) -> PhiIdentityResult:
    """Residual of E V(X_t) - V(x0) + int_0^t E phi(X_s) ds, trapezoid in s.

    ``phi`` takes states of shape ``(..., n)``.  The standard error is that of
    the per-path residual.
    """
    T = _horizon(ensemble, horizon)
    k_end = ensemble.grid.index_of(t_end)
    X = ensemble.states()[:, : k_end + 1]
    vals = np.asarray(V.evaluate(X[..., None], T), dtype=float)
    V0 = float(vals[0, 0])
    if k_end == 0:
        return PhiIdentityResult(t_end, V0, V0, 0.0, 0.0, 0.0, 0.0)
    ph = np.asarray(phi(X[..., None]), dtype=float)
    dt = ensemble.grid.dt
    integ = dt * (ph[:, 1:-1].sum(axis=1) + 0.5 * (ph[:, 0] + ph[:, -1]))
    per_path = vals[:, -1] - V0 + integ
    res = float(per_path.mean())
    se = float(per_path.std(ddof=1) / math.sqrt(len(per_path))) if len(per_path) > 1 else 0.0
    rel = res / V0 if V0 != 0 else (0.0 if res == 0 else math.inf)
    return PhiIdentityResult(t_end, float(vals[:, -1].mean()), V0, float(integ.mean()), res, rel, se / V0 if V0 else 0.0)


test_phi_identity.__test__ = False


# ---------------------------------------------------------------------------
# convergence and sweeps


@dataclass
class StabilityEstimate:
    epsilon: float
    horizon: float
    converged_fraction: float
    hitting_times: Array  # NaN where censored
    censored: Array
    undershoot_stats: dict
    sup_exceedance: dict = field(default_factory=dict)

    @property
    def median_hitting_time(self) -> float:
        """Median with censored paths ranked last; NaN if the median itself is censored."""
        h = np.where(self.censored, np.inf, self.hitting_times)
        if len(h) == 0:
            return math.nan
        med = float(np.median(h))
        return med if math.isfinite(med) else math.nan


def estimate_convergence(
    ensemble: Ensemble,
    epsilon: float,
    rho_grid: Sequence[float] = (),
    at_time: Optional[float] = None,
) -> StabilityEstimate:
    """Empirical convergence to the origin.

    ``converged_fraction`` counts paths with |X| < epsilon at ``at_time``
    (default: the end of the grid).  Hitting times of the epsilon-ball are
    searched up to the same time; paths that never enter are censored.
    ``rho_grid`` gives levels c for P[sup_t |X_t| >= c |x0|].
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    t_end = ensemble.grid.t_end if at_time is None else at_time
    k_end = ensemble.grid.index_of(t_end)
    X = np.abs(ensemble.states()[:, : k_end + 1])
    times = ensemble.grid.times()[: k_end + 1]
    inside = X < epsilon
    hit = inside.any(axis=1)
    first = np.argmax(inside, axis=1)
    hitting = np.where(hit, times[first], np.nan)
    conv = float(inside[:, -1].mean()) if len(X) else math.nan

    raw = ensemble.states()[:, : k_end + 1]
    x0 = raw[:, 0] if len(raw) else np.array([])
    mins = np.nanmin(raw, axis=1) if len(raw) else np.array([])
    under = {}
    if len(mins):
        under = {
            "min": float(mins.min()),
            "median": float(np.median(mins)),
            "q05": float(np.quantile(mins, 0.05)),
            "frac_below_1.5x0": float(np.mean(mins < 1.5 * x0)),
        }
    ratio = np.nanmax(X, axis=1) / np.abs(x0) if len(X) else np.array([])
    sup_exc = {float(c): float(np.mean(ratio >= c)) for c in rho_grid} if len(X) else {}
    return StabilityEstimate(float(epsilon), float(t_end), conv, hitting, ~hit, under, sup_exc)


@dataclass
class SweepRow:
    beta: float
    eta: float
    in_window: bool
    degenerate: bool
    log_drift: float
    merton_fraction: float
    converged_fraction: float
    median_hit_time: float
    censored: int


def stability_sweep(
    market: md.MarketParams,
    beta_grid: Sequence[float],
    T: float = 1.0,
    c1: float = -3.0,
    c2: float = 0.0,
    x0: float = -100.0,
    n_paths: int = 100,
    dt: float = 0.01,
    horizon: float = 40.0,
    master_seed: int = 42,
    epsilon: float = 1.0,
) -> list[SweepRow]:
    """Per-beta certificate data and an exact-GBM convergence estimate.

    Betas whose Merton fraction violates [c1, c2] get NaN empirical columns.
    """
    window = md.beta_stability_range(market)
    grid = TimeGrid.spanning(horizon, dt)
    rows = []
    for beta in beta_grid:
        if not beta > 2:
            raise ValueError(f"beta grid must lie above 2, got {beta}")
        e = md.eta(market, beta)
        a, _ = md.exact_solution_exponents(market, beta)
        u = md.merton_fraction(market, beta)
        inside = window is not None and window[0] < beta < window[1]
        conv, med, cens = math.nan, math.nan, 0
        if c1 <= u <= c2:
            prob = md.DebtProblem(market, beta, T, c1, c2, x0)
            est = estimate_convergence(run_ensemble(prob, n_paths, grid, master_seed), epsilon)
            conv, med, cens = est.converged_fraction, est.median_hitting_time, int(est.censored.sum())
        rows.append(SweepRow(beta, e, inside, abs(e) < md.ETA_ZERO, a, u, conv, med, cens))
    return rows
