"""Command-line front end.

Exit codes: 0 success, 1 usage/config/runtime error, 2 the run completed but
a verification failed.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import hjb_fd
from . import mc_lab
from . import merton_debt as md
from .sde_core import TimeGrid, check_regularity
from .value_rhc import check_assumptions

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_FAILED = 2

HJB_VALUE_RTOL = 1e-2
HJB_MINIMIZER_RTOL = 0.05


class ConfigError(ValueError):
    pass


@dataclass
class MarketConfig:
    r: float = 0.03
    b: float = 0.1
    sigma: float = 0.15


@dataclass
class ProblemConfig:
    beta: float = 2.1
    T: float = 1.0
    c1: float = -3.0
    c2: float = 0.0
    x0: float = -100.0


@dataclass
class McConfig:
    n_paths: int = 100
    dt: float = 0.01
    horizon: float = 25.0
    master_seed: int = 42


@dataclass
class HjbConfig:
    x_min: float = -200.0
    n_x: int = 400
    n_t: Optional[int] = None
    n_u: int = 101
    variant: str = md.RUNNING


@dataclass
class OutputConfig:
    directory: str = "out"
    emit_svg: bool = True


@dataclass
class SweepConfig:
    betas: list = field(default_factory=lambda: list(mc_lab.FIGURE_BETAS))
    epsilon: float = 1.0


@dataclass
class ExperimentConfig:
    market: MarketConfig = field(default_factory=MarketConfig)
    problem: ProblemConfig = field(default_factory=ProblemConfig)
    mc: McConfig = field(default_factory=McConfig)
    hjb: HjbConfig = field(default_factory=HjbConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def market_params(self) -> md.MarketParams:
        return md.MarketParams(self.market.r, self.market.b, self.market.sigma)

    def debt_problem(self, beta: Optional[float] = None) -> md.DebtProblem:
        p = self.problem
        return md.DebtProblem(self.market_params(), p.beta if beta is None else beta, p.T, p.c1, p.c2, p.x0)


_SECTIONS = {
    "market": MarketConfig,
    "problem": ProblemConfig,
    "mc": McConfig,
    "hjb": HjbConfig,
    "output": OutputConfig,
    "sweep": SweepConfig,
}


def _coerce(section: str, key: str, value, default):
    name = f"{section}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) or (key == "n_t"):
        if value is None and key == "n_t":
            return None
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ConfigError(f"{name}: expected a finite number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{name}: expected a list of numbers, got {value!r}")
        return [float(v) for v in value]
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string, got {value!r}")
        return value
    return value


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    cfg = ExperimentConfig()
    for section, body in raw.items():
        if section not in _SECTIONS:
            raise ConfigError(f"{section}: unknown section")
        if not isinstance(body, dict):
            raise ConfigError(f"{section}: expected an object")
        target = getattr(cfg, section)
        defaults = _SECTIONS[section]()
        for key, value in body.items():
            if not hasattr(defaults, key):
                raise ConfigError(f"{section}.{key}: unknown key")
            setattr(target, key, _coerce(section, key, value, getattr(defaults, key)))
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    m, p, mc, h = cfg.market, cfg.problem, cfg.mc, cfg.hjb
    if not m.r > 0:
        raise ConfigError(f"market.r: must be > 0 (got {m.r})")
    if not m.b > m.r:
        raise ConfigError(f"market.b: must exceed market.r (got b={m.b}, r={m.r})")
    if m.sigma == 0:
        raise ConfigError("market.sigma: must be nonzero")
    if not p.beta > 2:
        raise ConfigError(f"problem.beta: must be > 2 (got {p.beta})")
    if not p.T > 0:
        raise ConfigError(f"problem.T: must be > 0 (got {p.T})")
    if not p.c1 < 0:
        raise ConfigError(f"problem.c1: must be < 0 (got {p.c1})")
    if not p.c2 >= 0:
        raise ConfigError(f"problem.c2: must be >= 0 (got {p.c2})")
    if not p.x0 < 0:
        raise ConfigError(f"problem.x0: must be < 0 (got {p.x0})")
    if mc.n_paths < 0:
        raise ConfigError(f"mc.n_paths: must be >= 0 (got {mc.n_paths})")
    if not mc.dt > 0:
        raise ConfigError(f"mc.dt: must be > 0 (got {mc.dt})")
    if not mc.horizon > 0:
        raise ConfigError(f"mc.horizon: must be > 0 (got {mc.horizon})")
    n = round(mc.horizon / mc.dt)
    if n < 1 or abs(n * mc.dt - mc.horizon) > 1e-9 * max(1.0, mc.horizon):
        raise ConfigError(f"mc.horizon: must be a multiple of mc.dt (got {mc.horizon}, dt={mc.dt})")
    if not 0 <= mc.master_seed < 2**64:
        raise ConfigError("mc.master_seed: must be a 64-bit unsigned integer")
    if not h.x_min < 0:
        raise ConfigError(f"hjb.x_min: must be < 0 (got {h.x_min})")
    if h.n_x < 16:
        raise ConfigError(f"hjb.n_x: must be >= 16 (got {h.n_x})")
    if h.n_t is not None and h.n_t < 1:
        raise ConfigError(f"hjb.n_t: must be >= 1 or null (got {h.n_t})")
    if h.n_u < 2:
        raise ConfigError(f"hjb.n_u: must be >= 2 (got {h.n_u})")
    if h.variant not in md.VARIANTS:
        raise ConfigError(f"hjb.variant: must be one of {md.VARIANTS} (got {h.variant!r})")
    if not cfg.sweep.epsilon > 0:
        raise ConfigError(f"sweep.epsilon: must be > 0 (got {cfg.sweep.epsilon})")


def load_config(path: Optional[str]) -> ExperimentConfig:
    if path is None:
        cfg = ExperimentConfig()
        validate(cfg)
        return cfg
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(raw)


# ---------------------------------------------------------------------------
# output helpers


def fmt(v: float) -> str:
    return format(float(v), ".10g")


def write_text(path: Path, text: str) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def paths_csv(ensemble: mc_lab.Ensemble) -> str:
    out = ["path_id,t,wealth,control\n"]
    for i, p in enumerate(ensemble.paths):
        ctrl = p.controls[:, 0]
        last = ensemble.policy(p.states[-1]) if ensemble.policy is not None else ctrl[-1:]
        ctrl = np.concatenate([ctrl, np.atleast_1d(last)[:1]])
        tt = [fmt(t) for t in p.times]
        xs = [fmt(x) for x in p.states[:, 0]]
        us = [fmt(u) for u in ctrl]
        pid = str(i)
        out.extend(f"{pid},{t},{x},{u}\n" for t, x, u in zip(tt, xs, us))
    return "".join(out)


def _decimate(n: int, limit: int = 800) -> np.ndarray:
    if n <= limit:
        return np.arange(n)
    return np.unique(np.linspace(0, n - 1, limit).round().astype(int))


def paths_svg(ensemble: mc_lab.Ensemble, title: str) -> str:
    W, H = 800, 500
    left, right, top, bottom = 70, 20, 40, 50
    t0, t1 = ensemble.grid.t_start, ensemble.grid.t_end
    X = ensemble.states()
    lo = float(np.nanmin(X)) if X.size else -1.0
    hi = max(float(np.nanmax(X)) if X.size else 0.0, 0.0)
    if hi - lo <= 0:
        lo, hi = lo - 1.0, hi + 1.0

    def sx(t):
        return left + (t - t0) / (t1 - t0) * (W - left - right)

    def sy(x):
        return top + (hi - x) / (hi - lo) * (H - top - bottom)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {W} {H}" width="{W}" height="{H}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2:.1f}" y="22" text-anchor="middle" font-size="15" font-family="sans-serif">{title}</text>',
        f'<line x1="{left}" y1="{H - bottom}" x2="{W - right}" y2="{H - bottom}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{H - bottom}" stroke="black"/>',
        f'<line x1="{left}" y1="{sy(0.0):.2f}" x2="{W - right}" y2="{sy(0.0):.2f}" stroke="gray" stroke-dasharray="4 3"/>',
        f'<text x="{W / 2:.1f}" y="{H - 12}" text-anchor="middle" font-size="13" font-family="sans-serif">time (years)</text>',
        f'<text x="18" y="{H / 2:.1f}" text-anchor="middle" font-size="13" font-family="sans-serif" '
        f'transform="rotate(-90 18 {H / 2:.1f})">wealth</text>',
    ]
    for frac in (0.0, 0.5, 1.0):
        t = t0 + frac * (t1 - t0)
        parts.append(f'<text x="{sx(t):.1f}" y="{H - bottom + 16}" text-anchor="middle" font-size="11" font-family="sans-serif">{t:g}</text>')
    for v in (lo, 0.0):
        parts.append(f'<text x="{left - 6}" y="{sy(v) + 4:.1f}" text-anchor="end" font-size="11" font-family="sans-serif">{v:.4g}</text>')
    for p in ensemble.paths:
        idx = _decimate(len(p.times))
        pts = " ".join(f"{sx(p.times[k]):.2f},{sy(p.states[k, 0]):.2f}" for k in idx)
        parts.append(f'<polyline fill="none" stroke="steelblue" stroke-opacity="0.5" stroke-width="0.8" points="{pts}"/>')
    parts.append("</svg>\n")
    return "\n".join(parts)


def ensure_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_verify(cfg: ExperimentConfig, out=None) -> int:
    out = out or sys.stdout
    market = cfg.market_params()
    prob = cfg.debt_problem()
    e = prob.eta
    window = md.beta_stability_range(market)
    print(f"eta(beta={prob.beta:g}) = {e:.6f}", file=out)
    if window is None:
        print("stability window: empty ((b-r)^2 <= 2 r sigma^2)", file=out)
    else:
        inside = window[0] < prob.beta < window[1]
        print(f"stability window: ({window[0]:g}, {window[1]:.6f}); beta inside: {'yes' if inside else 'no'}", file=out)
    feas = md.constraint_feasible(market, prob.beta, prob.c1, prob.c2)
    print(feas.render(), file=out)
    sde = md.problem_sde(prob)
    reg = check_regularity(sde, ([cfg.hjb.x_min], [0.0]), 2000, cfg.mc.master_seed)
    print(f"regularity (sampled): Lipschitz {reg.empirical_lipschitz:.6g}, growth {reg.empirical_growth:.6g}", file=out)
    if not feas.feasible:
        print("assumptions: not checked (receding horizon law violates the control bounds)", file=out)
        return EXIT_FAILED
    report = check_assumptions(
        md.value_function(prob),
        md.running_cost(prob),
        md.rhc_policy(prob),
        sde,
        domain=([cfg.hjb.x_min], [0.0]),
        probes=256,
        eps_grid=[1e-6, 1e-3, 1.0, 1e3],
    )
    print(report.render(), file=out)
    return EXIT_OK if report.all_passed else EXIT_FAILED


def cmd_simulate(cfg: ExperimentConfig, out=None) -> int:
    out = out or sys.stdout
    directory = ensure_dir(cfg.output.directory)
    prob = cfg.debt_problem()
    grid = TimeGrid.spanning(cfg.mc.horizon, cfg.mc.dt)
    ens = mc_lab.run_ensemble(prob, cfg.mc.n_paths, grid, cfg.mc.master_seed)
    write_text(directory / "paths.csv", paths_csv(ens))
    if cfg.output.emit_svg:
        write_text(directory / "paths.svg", paths_svg(ens, f"Wealth process, beta={prob.beta:g} ({ens.n_paths} paths)"))
    print(f"wrote {ens.n_paths} paths to {directory / 'paths.csv'}", file=out)
    return EXIT_OK


def hjb_csv(sol: hjb_fd.DiscreteHjbSolution) -> str:
    out = ["t,x,value,minimizer\n"]
    xs = [fmt(x) for x in sol.x]
    for k, t in enumerate(sol.times):
        ts = fmt(t)
        vals = sol.values[k]
        mins = sol.minimizers[k] if k < len(sol.minimizers) else None
        for i, x in enumerate(xs):
            u = fmt(mins[i]) if mins is not None else ""
            out.append(f"{ts},{x},{fmt(vals[i])},{u}\n")
    return "".join(out)


def cmd_hjb(cfg: ExperimentConfig, out=None) -> int:
    out = out or sys.stdout
    directory = ensure_dir(cfg.output.directory)
    prob = cfg.debt_problem()
    h = cfg.hjb
    problem = hjb_fd.debt_hjb_problem(prob, h.variant)
    grid = hjb_fd.Grid1D(h.x_min, 0.0, h.n_x, prob.T, h.n_t)
    n_t = h.n_t or hjb_fd.required_n_t(problem, grid, h.n_u)
    sol = hjb_fd.solve_hjb_1d(problem, grid, h.n_u, save_every=max(1, n_t // 100))
    write_text(directory / "hjb.csv", hjb_csv(sol))
    rep = hjb_fd.compare_to_closed_form(sol, prob, h.variant)
    print(f"HJB {h.variant} variant, n_x={h.n_x}, n_t={sol.grid.n_t}", file=out)
    print(rep.render(), file=out)
    ok = rep.max_rel_err <= HJB_VALUE_RTOL and rep.minimizer_max_rel_dev <= HJB_MINIMIZER_RTOL
    print(f"tolerance (value {HJB_VALUE_RTOL:g}, minimizer {HJB_MINIMIZER_RTOL:.0%}): {'met' if ok else 'NOT met'}", file=out)
    return EXIT_OK if ok else EXIT_FAILED


SWEEP_HEADER = "beta,eta,in_window,log_drift,merton_fraction,converged_fraction,median_hit_time,censored\n"


def sweep_csv(rows: Sequence[mc_lab.SweepRow]) -> str:
    out = [SWEEP_HEADER]
    for r in rows:
        out.append(
            ",".join(
                [fmt(r.beta), fmt(r.eta), str(int(r.in_window)), fmt(r.log_drift), fmt(r.merton_fraction),
                 fmt(r.converged_fraction), fmt(r.median_hit_time), str(r.censored)]
            )
            + "\n"
        )
    return "".join(out)


def cmd_sweep(cfg: ExperimentConfig, betas: Optional[Sequence[float]] = None, out=None) -> int:
    out = out or sys.stdout
    directory = ensure_dir(cfg.output.directory)
    betas = cfg.sweep.betas if betas is None else betas
    p = cfg.problem
    rows = mc_lab.stability_sweep(
        cfg.market_params(), betas, T=p.T, c1=p.c1, c2=p.c2, x0=p.x0,
        n_paths=cfg.mc.n_paths, dt=cfg.mc.dt, horizon=cfg.mc.horizon,
        master_seed=cfg.mc.master_seed, epsilon=cfg.sweep.epsilon,
    )
    write_text(directory / "sweep.csv", sweep_csv(rows))
    for r in rows:
        flag = " (degenerate: eta = 0)" if r.degenerate else ""
        print(f"beta={r.beta:g} eta={r.eta:.6f} in_window={int(r.in_window)} converged={r.converged_fraction:.3f}{flag}", file=out)
    return EXIT_OK


def cmd_figures(cfg: ExperimentConfig, out=None) -> int:
    out = out or sys.stdout
    directory = ensure_dir(cfg.output.directory)
    for n, beta in enumerate(mc_lab.FIGURE_BETAS, start=1):
        prob = cfg.debt_problem(beta)
        grid = TimeGrid.spanning(mc_lab.FIGURE_HORIZONS[beta], cfg.mc.dt)
        ens = mc_lab.run_ensemble(prob, cfg.mc.n_paths, grid, cfg.mc.master_seed)
        stem = f"fig{n}_beta{beta:g}"
        write_text(directory / f"{stem}.csv", paths_csv(ens))
        if cfg.output.emit_svg:
            write_text(directory / f"{stem}.svg", paths_svg(ens, f"Wealth process for beta={beta:g} ({ens.n_paths} simulations)"))
        est = mc_lab.estimate_convergence(ens, 1.0) if ens.n_paths else None
        summary = f", converged {est.converged_fraction:.2f} by t={grid.t_end:g}" if est else ""
        print(f"{stem}: {ens.n_paths} paths{summary}", file=out)
    return EXIT_OK


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _parse_betas(text: str) -> list[float]:
    text = text.strip()
    if not text:
        return []
    try:
        return [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad beta list {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    # SUPPRESS so a flag given before the subcommand is not reset by the subparser
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON experiment configuration")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override mc.master_seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="override output.directory")
    parser = _Parser(prog="horizon-sde", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("verify", parents=[common], help="check stability conditions and assumptions")
    sub.add_parser("simulate", parents=[common], help="write a closed-loop ensemble")
    sub.add_parser("hjb", parents=[common], help="finite-difference HJB solve and closed-form comparison")
    sw = sub.add_parser("sweep", parents=[common], help="stability sweep over beta")
    sw.add_argument("--betas", type=_parse_betas, help="comma-separated beta values")
    sub.add_parser("figures", parents=[common], help="ensembles for beta = 2.1, 4.5, 7.8")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(getattr(args, "config", None))
        if getattr(args, "seed", None) is not None:
            cfg.mc.master_seed = args.seed
        if getattr(args, "out", None) is not None:
            cfg.output.directory = args.out
        validate(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    try:
        if args.command == "verify":
            return cmd_verify(cfg)
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "hjb":
            return cmd_hjb(cfg)
        if args.command == "sweep":
            return cmd_sweep(cfg, getattr(args, "betas", None))
        return cmd_figures(cfg)
    except hjb_fd.StabilityBoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (OSError, ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
