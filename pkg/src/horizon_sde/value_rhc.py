"""Value functions, receding horizon policies and the stability assumptions.

A :class:`ValueFunction` bundles V(x; T) with its spatial derivatives and its
derivative with respect to the horizon.  The dissipation rate

    phi(x; T) = -dV/dT(x; T) + f(x, u_c(x; T))

is what the closed-loop value process loses per unit time in expectation;
the checks in :func:`check_assumptions` probe the conditions under which V
serves as a stochastic Lyapunov function for the receding horizon law.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import qmc

from .sde_core import ControlledSde, NumericalError

Array = np.ndarray


@dataclass(frozen=True)
class ValueFunction:
    """V(x; T) and derivatives.  All callables take ``(x, T)`` with ``x`` of
    shape ``(..., n)``; ``evaluate`` and ``horizon_derivative`` return shape
    ``(...)``, ``gradient`` ``(..., n)`` and ``hessian`` ``(..., n, n)``."""

    evaluate: Callable[[Array, float], Array]
    gradient: Callable[[Array, float], Array]
    hessian: Callable[[Array, float], Array]
    horizon_derivative: Callable[[Array, float], Array]


@dataclass(frozen=True)
class RunningCost:
    f: Callable[[Array, Array], Array]
    g: Callable[[Array], Array]


@dataclass(frozen=True)
class RhcPolicy:
    """u_c(x; T): the first action of the horizon-T optimal problem, applied at every state."""

    control_of: Callable[[Array, float], Array]
    horizon: float

    def __call__(self, x) -> Array:
        return self.control_of(x, self.horizon)


@dataclass
class Check:
    passed: bool
    detail: str
    evidence: dict = field(default_factory=dict)

    def line(self, name: str) -> str:
        return f"{name}: {'PASS' if self.passed else 'FAIL'} ({self.detail})"


@dataclass
class AssumptionReport:
    a1_smoothness: Check
    a2_phi_positivity: Check
    a2_1_equilibrium: Check
    a2_2_cost_positivity: Check
    a3_continuity_at_0: Check
    a4_lower_bound: Check
    probes: str
    notes: list = field(default_factory=list)

    def checks(self) -> dict:
        return {
            "A1": self.a1_smoothness,
            "A2": self.a2_phi_positivity,
            "A2.1": self.a2_1_equilibrium,
            "A2.2": self.a2_2_cost_positivity,
            "A3": self.a3_continuity_at_0,
            "A4": self.a4_lower_bound,
        }

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.checks().values())

    def render(self) -> str:
        lines = [f"probes: {self.probes}"]
        lines += [c.line(name) for name, c in self.checks().items()]
        lines += [f"note: {n}" for n in self.notes]
        return "\n".join(lines)


def phi_of(V: ValueFunction, cost: RunningCost, policy: RhcPolicy, x, T: float) -> Array:
    if not T > 0:
        raise ValueError("horizon T must be positive")
    x = np.asarray(x, dtype=float)
    dVdT = np.asarray(V.horizon_derivative(x, T), dtype=float)
    u = policy.control_of(x, T)
    out = -dVdT + np.asarray(cost.f(x, u), dtype=float)
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"non-finite phi at x={x.tolist()}, T={T}")
    return out


def horizon_monotonicity(V: ValueFunction, x, T: float) -> Array:
    """dV/dH at H = T.  Nonpositive values make phi > 0 wherever f > 0."""
    if not T > 0:
        raise ValueError("horizon T must be positive")
    out = np.asarray(V.horizon_derivative(np.asarray(x, dtype=float), T), dtype=float)
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"non-finite horizon derivative at x={np.asarray(x).tolist()}, T={T}")
    return out


# ---------------------------------------------------------------------------
# assumption checks

PHI_REL_TOL = 1e-12
ORIGIN_RADIUS = 1e-9
SMOOTHNESS_RTOL = 1e-4


def _probe_points(lo: Array, hi: Array, n_probes: int) -> Array:
    """Halton points over the box plus the origin and all corners."""
    n = lo.shape[0]
    pts = qmc.Halton(d=n, scramble=False).random(n_probes + 1)[1:]
    pts = lo + (hi - lo) * pts
    corners = np.stack(np.meshgrid(*[[a, b] for a, b in zip(lo, hi)], indexing="ij"), -1).reshape(-1, n)
    return np.vstack([np.zeros((1, n)), corners, pts])


def _rel_mismatch(a: Array, b: Array) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scale = np.maximum(np.abs(a), np.abs(b)).max()
    if scale == 0:
        return 0.0
    return float(np.abs(a - b).max() / scale)


def _check_smoothness(V: ValueFunction, xs: Array, T: float, kink_margin: float) -> Check:
    n = xs.shape[1]
    worst, worst_at = 0.0, None
    for x in xs:
        if np.linalg.norm(x) < kink_margin:
            continue
        h = 1e-4 * max(1.0, np.linalg.norm(x)) if np.linalg.norm(x) >= 1 else 1e-4 * np.linalg.norm(x)
        fd_grad = np.empty(n)
        fd_hess = np.empty((n, n))
        for j in range(n):
            e = np.zeros(n)
            e[j] = h
            fd_grad[j] = (V.evaluate(x + e, T) - V.evaluate(x - e, T)) / (2 * h)
            fd_hess[:, j] = (np.asarray(V.gradient(x + e, T)) - np.asarray(V.gradient(x - e, T))) / (2 * h)
        hT = 1e-5 * max(1.0, T)
        fd_T = (V.evaluate(x, T + hT) - V.evaluate(x, T - hT)) / (2 * hT)
        m = max(
            _rel_mismatch(V.gradient(x, T), fd_grad),
            _rel_mismatch(V.hessian(x, T), fd_hess),
            _rel_mismatch(V.horizon_derivative(x, T), fd_T),
        )
        if m > worst:
            worst, worst_at = m, x.tolist()
    return Check(
        worst <= SMOOTHNESS_RTOL,
        f"worst finite-difference mismatch {worst:.3g} at x={worst_at}",
        {"worst_mismatch": worst, "x": worst_at},
    )


def _in_box(x: Array, lo: Array, hi: Array) -> Array:
    return np.all((x >= lo) & (x <= hi), axis=-1)


def _ray_samples(lo: Array, hi: Array, radii: Array, n_dirs: int) -> tuple[Array, Array]:
    """Points r*d for unit directions d and radii r that fall in the box.

    Returns (points, radius index) for the in-box samples.
    """
    n = lo.shape[0]
    axes = np.vstack([np.eye(n), -np.eye(n)])
    if n > 1:
        extra = qmc.Halton(d=n, scramble=False).random(n_dirs + 1)[1:] * 2 - 1
        extra = extra[np.linalg.norm(extra, axis=1) > 1e-12]
        extra /= np.linalg.norm(extra, axis=1, keepdims=True)
        axes = np.vstack([axes, extra])
    pts = radii[:, None, None] * axes[None, :, :]
    idx = np.broadcast_to(np.arange(len(radii))[:, None], pts.shape[:2])
    keep = _in_box(pts, lo, hi)
    return pts[keep], idx[keep]


def auto_lower_bound(V: ValueFunction, T: float, lo: Array, hi: Array, radii: Array, n_dirs: int = 64) -> Array:
    """h(r) = inf over probed |x| = r of V, rectified to be nondecreasing.

    Radii with no in-domain sample inherit the next larger radius' value
    before rectification (they are not part of the probed domain).
    """
    pts, idx = _ray_samples(lo, hi, radii, n_dirs)
    vals = np.asarray(V.evaluate(pts, T), dtype=float)
    h = np.full(len(radii), np.inf)
    np.minimum.at(h, idx, vals)
    # largest nondecreasing minorant: running min from the outside in
    h = np.minimum.accumulate(h[::-1])[::-1]
    # trailing radii outside the domain keep the last probed value
    if np.isfinite(h).any():
        h[~np.isfinite(h)] = h[np.isfinite(h)].max()
    return h


def check_assumptions(
    V: ValueFunction,
    cost: RunningCost,
    policy: RhcPolicy,
    sde: ControlledSde,
    domain,
    probes: int,
    eps_grid: Sequence[float],
    h: Optional[Callable[[Array], Array]] = None,
    invariant_region=None,
    n_radii: int = 60,
) -> AssumptionReport:
    """Probe A1-A4 for a receding horizon law on a bounded domain.

    ``domain`` is ``(lower, upper)`` and must contain the origin.  A2 and A2.2
    are checked on ``invariant_region`` (default: the whole domain), which
    lets a caller exclude states the closed loop never visits.  When ``h`` is
    not given it is built from V by :func:`auto_lower_bound`.
    Failures are reported, never raised.
    """
    T = policy.horizon
    lo = np.atleast_1d(np.asarray(domain[0], dtype=float))
    hi = np.atleast_1d(np.asarray(domain[1], dtype=float))
    if not (np.all(lo <= 0) and np.all(hi >= 0)):
        raise ValueError("domain must contain the origin")
    n = lo.shape[0]
    xs = _probe_points(lo, hi, probes)
    origin = np.zeros(n)
    notes = []
    scale = float(np.max(np.maximum(np.abs(lo), np.abs(hi))))

    a1 = _check_smoothness(V, xs, T, kink_margin=1e-3 * scale)

    # A2: phi > 0 off the origin, phi(0) = 0
    if invariant_region is None:
        rlo, rhi = lo, hi
    else:
        rlo = np.atleast_1d(np.asarray(invariant_region[0], dtype=float))
        rhi = np.atleast_1d(np.asarray(invariant_region[1], dtype=float))
        notes.append(f"A2/A2.2 checked on declared invariant region [{rlo.tolist()}, {rhi.tolist()}] only")
    region = xs[_in_box(xs, rlo, rhi)]
    phi = phi_of(V, cost, policy, region, T)
    vals = np.asarray(V.evaluate(region, T), dtype=float)
    off = np.linalg.norm(region, axis=1) > ORIGIN_RADIUS
    thresh = PHI_REL_TOL * (1.0 + vals)
    phi0 = float(phi_of(V, cost, policy, origin, T))
    bad = off & ~(phi > thresh)
    if bad.any():
        j = np.flatnonzero(bad)[np.argmin(phi[bad])]
        a2 = Check(False, f"phi={phi[j]:.6g} at x={region[j].tolist()}", {"phi": float(phi[j]), "x": region[j].tolist()})
    elif abs(phi0) > PHI_REL_TOL * (1.0 + float(V.evaluate(origin, T))):
        a2 = Check(False, f"phi(0)={phi0:.3g} is not zero", {"phi0": phi0})
    else:
        j = np.flatnonzero(off)[np.argmin(phi[off])] if off.any() else None
        a2 = Check(
            True,
            f"phi(0)={phi0:.3g}; min phi off origin {phi[j]:.6g} at x={region[j].tolist()}" if j is not None else "no off-origin probes",
            {"phi0": phi0},
        )

    # A2.1: origin is an equilibrium under the applied control
    u0 = np.asarray(policy(origin), dtype=float)
    b0 = np.asarray(sde.drift(origin, u0), dtype=float)
    s0 = np.asarray(sde.diffusion(origin, u0), dtype=float)
    a21 = Check(
        bool(np.all(b0 == 0) and np.all(s0 == 0)),
        f"|b(0,u_c(0))|={np.abs(b0).max():.3g}, |sigma(0,u_c(0))|={np.abs(s0).max():.3g}",
        {"u0": u0.tolist()},
    )

    # A2.2: zero cost at the origin, positive cost elsewhere (f for all u, or g)
    cs = sde.control_set
    us = np.vstack([cs.corners(), cs.lower + (cs.upper - cs.lower) * np.linspace(0, 1, 11)[:, None], u0[None, :]])
    f0 = np.asarray([cost.f(origin, u) for u in us], dtype=float)
    g0 = float(cost.g(origin))
    worst_f = np.full(len(region), np.inf)
    for u in us:
        worst_f = np.minimum(worst_f, np.asarray(cost.f(region, np.broadcast_to(u, (len(region), cs.dim))), dtype=float))
    gv = np.asarray(cost.g(region), dtype=float)
    pos = (worst_f > 0) | (gv > 0)
    bad22 = off & ~pos
    if np.any(f0 != 0) or g0 != 0:
        a22 = Check(False, f"cost at origin f={f0.max():.3g}, g={g0:.3g}", {})
    elif bad22.any():
        j = np.flatnonzero(bad22)[0]
        a22 = Check(False, f"zero cost at x={region[j].tolist()}", {"x": region[j].tolist()})
    else:
        a22 = Check(True, "f(0,u)=g(0)=0; f(x,u)>0 for all sampled u or g(x)>0 at every off-origin probe", {})
    if np.all(gv[off] == 0) or np.all(worst_f[off] == 0):
        notes.append("A2.2 accepted with only one of f, g positive off the origin")

    # A3: sup of V on shrinking balls
    radii = scale * np.logspace(-12, 0, n_radii)
    pts, idx = _ray_samples(lo, hi, radii, 64)
    vr = np.asarray(V.evaluate(pts, T), dtype=float)
    sup_at = np.full(len(radii), -np.inf)
    np.maximum.at(sup_at, idx, vr)
    sup_ball = np.maximum.accumulate(np.maximum(sup_at, float(V.evaluate(origin, T))))
    table = []
    for eps in eps_grid:
        ok = np.flatnonzero(sup_ball < eps)
        table.append((float(eps), float(radii[ok[-1]]) if ok.size else 0.0))
    a3 = Check(
        all(d > 0 for _, d in table),
        "delta(eps): " + ", ".join(f"{e:g}->{d:.3g}" for e, d in table),
        {"delta_table": table},
    )

    # A4: V >= h(|x|) with h nondecreasing, h(0)=0, h(r)>0 for r>0
    if h is None:
        h_vals = auto_lower_bound(V, T, lo, hi, radii)
        finite = np.isfinite(h_vals)
        h_vals = np.where(finite, h_vals, 0.0)
        h_desc = "auto (inf of V on spheres, nondecreasing rectification)"

        def h_fn(r):
            r = np.asarray(r, dtype=float)
            k = np.searchsorted(radii, r, side="right") - 1
            return np.where(k >= 0, h_vals[np.clip(k, 0, None)], 0.0)
    else:
        h_fn = h
        h_vals = np.asarray(h(radii), dtype=float)
        finite = np.isfinite(h_vals)
        h_desc = "supplied"
    hv = h_vals[finite]
    monotone = bool(np.all(np.diff(hv) >= 0))
    positive = bool(np.all(hv > 0))
    h0 = float(h_fn(np.array(0.0)))
    norms = np.linalg.norm(xs, axis=1)
    below = np.asarray(V.evaluate(xs, T), dtype=float) < np.asarray(h_fn(norms), dtype=float)
    if not (monotone and positive and h0 == 0) or below.any():
        why = []
        if not monotone:
            why.append("h not nondecreasing")
        if not positive:
            r_bad = radii[finite][np.flatnonzero(hv <= 0)[0]]
            why.append(f"h({r_bad:.3g})=0")
        if h0 != 0:
            why.append(f"h(0)={h0:.3g}")
        if below.any():
            why.append(f"V<h at x={xs[np.flatnonzero(below)[0]].tolist()}")
        a4 = Check(False, f"{h_desc}: " + "; ".join(why), {"radii": radii.tolist(), "h": h_vals.tolist()})
    else:
        a4 = Check(
            True,
            f"{h_desc}; h(r) on [{radii[0]:.3g}, {radii[-1]:.3g}] from {hv[0]:.3g} to {hv[-1]:.3g}",
            {"radii": radii.tolist(), "h": h_vals.tolist()},
        )

    desc = f"{len(xs)} points (Halton + origin + corners) in [{lo.tolist()}, {hi.tolist()}], T={T:g}"
    return AssumptionReport(a1, a2, a21, a22, a3, a4, desc, notes)
