"""Debt repayment with a bank account and one stock.

Wealth follows

    dX = [r + (b - r) u] X dt + sigma u X dW,    x0 < 0,

where u is the fraction of wealth held in the stock.  With cost
f(x) = (-x)^beta on x <= 0 (running variant) or g(x) = (-x)^beta (terminal
variant) the finite-horizon problem has the closed-form value

    running:   V(x; T) = (-x)^beta (1 - exp(-eta T)) / eta
    terminal:  V(x; T) = (-x)^beta exp(-eta T)

with eta = beta (b-r)^2 / (2 (beta-1) sigma^2) - beta r, and the minimiser is
the constant Merton fraction -(b-r) / ((beta-1) sigma^2).  Under that
constant law wealth is a geometric Brownian motion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .sde_core import ControlledSde, ControlSet
from .value_rhc import RhcPolicy, RunningCost, ValueFunction

RUNNING = "running"
TERMINAL = "terminal"
VARIANTS = (RUNNING, TERMINAL)

ETA_ZERO = 1e-12


@dataclass(frozen=True)
class MarketParams:
    r: float
    b_drift: float
    sigma: float

    def __post_init__(self):
        for name in ("r", "b_drift", "sigma"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.sigma == 0:
            raise ValueError("sigma must be nonzero")

    @property
    def excess_return(self) -> float:
        return self.b_drift - self.r

    def check(self) -> None:
        """Raise unless b > r > 0."""
        if not self.r > 0:
            raise ValueError(f"r must be positive, got {self.r}")
        if not self.b_drift > self.r:
            raise ValueError(f"b_drift must exceed r, got b={self.b_drift}, r={self.r}")


@dataclass(frozen=True)
class DebtProblem:
    market: MarketParams
    beta: float
    T: float
    c1: float
    c2: float
    x0: float

    def __post_init__(self):
        self.market.check()
        if not self.beta > 2:
            raise ValueError(f"beta must exceed 2, got {self.beta}")
        if not self.T > 0:
            raise ValueError(f"T must be positive, got {self.T}")
        if not (self.c1 < 0 <= self.c2):
            raise ValueError(f"need c1 < 0 <= c2, got c1={self.c1}, c2={self.c2}")
        if not self.x0 < 0:
            raise ValueError(f"x0 must be negative, got {self.x0}")

    @property
    def eta(self) -> float:
        return eta(self.market, self.beta)

    @property
    def merton_fraction(self) -> float:
        return merton_fraction(self.market, self.beta)


@dataclass(frozen=True)
class ClosedFormSolution:
    eta: float
    merton_fraction: float
    cost_variant: str


@dataclass(frozen=True)
class FeasibilityReport:
    fraction_in_bounds: bool
    beta_above_constraint_bound: bool
    c1_admits_stable_beta: bool
    merton_fraction: float
    beta_bound: float
    c1_threshold: float

    @property
    def feasible(self) -> bool:
        return self.fraction_in_bounds

    def render(self) -> str:
        return "\n".join(
            [
                f"merton fraction {self.merton_fraction:.6f} in [c1, c2]: {'yes' if self.fraction_in_bounds else 'NO'}",
                f"beta > 1 + (b-r)/(|c1| sigma^2) = {self.beta_bound:.6f}: {'yes' if self.beta_above_constraint_bound else 'no'}",
                f"|c1| > 2r/(b-r) = {self.c1_threshold:.6f}: {'yes' if self.c1_admits_stable_beta else 'no'}",
            ]
        )


def eta(market: MarketParams, beta: float) -> float:
    if not beta > 1:
        raise ValueError("beta must exceed 1")
    d = market.excess_return
    return beta * d * d / (2.0 * (beta - 1.0) * market.sigma**2) - beta * market.r


def merton_fraction(market: MarketParams, beta: float) -> float:
    if not beta > 1:
        raise ValueError("beta must exceed 1")
    return -market.excess_return / ((beta - 1.0) * market.sigma**2)


def closed_form(market: MarketParams, beta: float, variant: str = RUNNING) -> ClosedFormSolution:
    _check_variant(variant)
    return ClosedFormSolution(eta(market, beta), merton_fraction(market, beta), variant)


def w_profile(eta_value: float, t, T: float):
    """(1 - exp(eta (t - T))) / eta, with the limit T - t for |eta| < 1e-12."""
    t = np.asarray(t, dtype=float)
    if abs(eta_value) < ETA_ZERO:
        out = T - t
    else:
        out = -np.expm1(eta_value * (t - T)) / eta_value
    return out if out.ndim else float(out)


def neg_power(x, beta: float):
    """(-x)^beta for x < 0, zero for x >= 0."""
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(x < 0, np.exp(beta * np.log(np.where(x < 0, -x, 1.0))), 0.0)
    return out if out.ndim else float(out)


def _check_variant(variant: str) -> None:
    if variant not in VARIANTS:
        raise ValueError(f"unknown cost variant {variant!r}; expected one of {VARIANTS}")


def time_profile(problem: DebtProblem, t, variant: str = RUNNING):
    """w(t) for the running variant, exp(eta (t - T)) for the terminal one."""
    _check_variant(variant)
    if variant == RUNNING:
        return w_profile(problem.eta, t, problem.T)
    out = np.exp(problem.eta * (np.asarray(t, dtype=float) - problem.T))
    return out if out.ndim else float(out)


def value_closed_form(problem: DebtProblem, t, x, variant: str = RUNNING):
    if np.any(np.asarray(t) < 0) or np.any(np.asarray(t) > problem.T):
        raise ValueError("t must lie in [0, T]")
    return neg_power(x, problem.beta) * time_profile(problem, t, variant)


def hjb_residual(problem: DebtProblem, t, x, variant: str = RUNNING):
    """Residual of the HJB equation at (t, x) for the closed-form value with u = merton_fraction.

    -v_t - [ (sigma u x)^2 v_xx / 2 + (r + (b-r) u) x v_x + f ], from analytic derivatives.
    """
    m, beta, u = problem.market, problem.beta, problem.merton_fraction
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    p = time_profile(problem, t, variant)
    if variant == RUNNING:
        dp = -np.exp(problem.eta * (t - problem.T))
        f = neg_power(x, beta)
    else:
        dp = problem.eta * p
        f = 0.0
    v_t = neg_power(x, beta) * dp
    v_x = -beta * neg_power(x, beta - 1) * p
    v_xx = beta * (beta - 1) * neg_power(x, beta - 2) * p
    ham = 0.5 * (m.sigma * u * x) ** 2 * v_xx + (m.r + m.excess_return * u) * x * v_x + f
    return -v_t - ham


def beta_stability_range(market: MarketParams) -> Optional[tuple[float, float]]:
    """Open interval of beta for which A1-A4 hold, or None if it is empty."""
    d = market.excess_return
    upper = 1.0 + d * d / (2.0 * market.r * market.sigma**2)
    if upper <= 2.0:
        return None
    return (2.0, upper)


def constraint_feasible(market: MarketParams, beta: float, c1: float, c2: float) -> FeasibilityReport:
    if not (c1 < 0 <= c2):
        raise ValueError(f"need c1 < 0 <= c2, got c1={c1}, c2={c2}")
    u = merton_fraction(market, beta)
    d = market.excess_return
    beta_bound = 1.0 + d / (abs(c1) * market.sigma**2)
    c1_threshold = 2.0 * market.r / d if d > 0 else math.inf
    return FeasibilityReport(
        fraction_in_bounds=bool(c1 <= u <= c2),
        beta_above_constraint_bound=bool(beta > beta_bound),
        c1_admits_stable_beta=bool(abs(c1) > c1_threshold),
        merton_fraction=u,
        beta_bound=beta_bound,
        c1_threshold=c1_threshold,
    )


def exact_solution_exponents(market: MarketParams, beta: float) -> tuple[float, float]:
    """(log drift, log diffusion) of the closed-loop GBM under the Merton fraction."""
    if not beta > 1:
        raise ValueError("beta must exceed 1")
    d, s = market.excess_return, market.sigma
    log_drift = market.r - (2 * beta - 1) * d * d / (2 * (beta - 1) ** 2 * s * s)
    log_diffusion = -d / ((beta - 1) * s)
    return log_drift, log_diffusion


def wealth_sde(market: MarketParams, control_set: ControlSet) -> ControlledSde:
    r, d, s = market.r, market.excess_return, market.sigma

    def drift(x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return (r + d * u[..., :1]) * x

    def diffusion(x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return (s * u[..., :1] * x)[..., None]

    return ControlledSde(1, 1, 1, drift, diffusion, control_set, absorbing_origin=True)


def problem_sde(problem: DebtProblem) -> ControlledSde:
    return wealth_sde(problem.market, ControlSet([problem.c1], [problem.c2]))


# ---------------------------------------------------------------------------
# adapters onto the generic value/policy layer (states carry a trailing axis of length 1)


def value_function(problem: DebtProblem, variant: str = RUNNING) -> ValueFunction:
    _check_variant(variant)
    beta, e = problem.beta, problem.eta

    def prof(T):
        if variant == RUNNING:
            return w_profile(e, 0.0, T)
        return math.exp(-e * T)

    def evaluate(x, T):
        return neg_power(np.asarray(x, dtype=float)[..., 0], beta) * prof(T)

    def gradient(x, T):
        x = np.asarray(x, dtype=float)
        return (-beta * np.asarray(neg_power(x[..., 0], beta - 1)) * prof(T))[..., None]

    def hessian(x, T):
        x = np.asarray(x, dtype=float)
        return (beta * (beta - 1) * np.asarray(neg_power(x[..., 0], beta - 2)) * prof(T))[..., None, None]

    def horizon_derivative(x, T):
        x = np.asarray(x, dtype=float)
        dprof = math.exp(-e * T) if variant == RUNNING else -e * math.exp(-e * T)
        return neg_power(x[..., 0], beta) * dprof

    return ValueFunction(evaluate, gradient, hessian, horizon_derivative)


def running_cost(problem: DebtProblem, variant: str = RUNNING) -> RunningCost:
    _check_variant(variant)
    beta = problem.beta

    def power_cost(x):
        return neg_power(np.asarray(x, dtype=float)[..., 0], beta)

    def zero(x):
        return np.zeros(np.shape(x)[:-1]) if np.ndim(x) > 1 else 0.0

    if variant == RUNNING:
        return RunningCost(f=lambda x, u: power_cost(x), g=zero)
    return RunningCost(f=lambda x, u: zero(x), g=power_cost)


def rhc_policy(problem: DebtProblem) -> RhcPolicy:
    """Constant receding horizon law; raises if it violates the control bounds."""
    rep = constraint_feasible(problem.market, problem.beta, problem.c1, problem.c2)
    if not rep.feasible:
        raise ValueError(
            f"merton fraction {rep.merton_fraction:.6f} lies outside [c1, c2] = [{problem.c1}, {problem.c2}]"
        )
    u = rep.merton_fraction

    def control_of(x, T):
        return np.full(np.shape(x), u, dtype=float)

    return RhcPolicy(control_of, problem.T)
