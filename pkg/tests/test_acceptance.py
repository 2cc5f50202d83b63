"""Acceptance criteria, one test each, at their stated tolerances.

Every test prints a single ``[PASS]``/``[FAIL]`` line with the measured
numbers, visible even when pytest captures output.
"""

import math
import time

import numpy as np
import pytest

from horizon_sde import cli
from horizon_sde import hjb_fd
from horizon_sde import mc_lab as mc
from horizon_sde import merton_debt as md
from horizon_sde.sde_core import TimeGrid

import conftest

N_PATHS = 1000
SEED = 42


@pytest.fixture
def verdict(capsys):
    def emit(number, name, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {name}: {detail}")
        assert ok, detail

    return emit


@pytest.fixture(scope="module")
def ens_1000(problem21):
    start = time.perf_counter()
    ens = mc.run_ensemble(problem21, N_PATHS, TimeGrid.spanning(5.0, 0.01), SEED)
    return ens, time.perf_counter() - start


def test_1_stability_window(market, verdict):
    lo, hi = md.beta_stability_range(market)
    verdict(1, "stability window", lo == 2.0 and 4.60 <= hi <= 4.66, f"(2, {hi:.6f}), required upper in [4.60, 4.66]")


def test_2_eta_signs(market, verdict):
    want = {2.1: 0.144879, 4.5: 0.005000, 7.8: -0.109098}
    got = {b: md.eta(market, b) for b in want}
    ok = all(abs(got[b] - want[b]) <= 1e-6 for b in want)
    verdict(2, "eta", ok, ", ".join(f"eta({b})={got[b]:.7f}" for b in want))


def test_3_merton_fraction_and_constraint(market, verdict):
    u21, u45 = md.merton_fraction(market, 2.1), md.merton_fraction(market, 4.5)
    tight = md.constraint_feasible(market, 2.1, -2.0, 0.0).feasible
    loose = md.constraint_feasible(market, 2.1, -3.0, 0.0).feasible
    ok = abs(u21 + 2.828283) <= 1e-6 and abs(u45 + 0.888889) <= 1e-6 and not tight and loose
    verdict(3, "Merton fraction", ok, f"u(2.1)={u21:.7f}, u(4.5)={u45:.7f}, feasible c1=-2: {tight}, c1=-3: {loose}")


@pytest.mark.parametrize("variant,fixture", [(md.RUNNING, "hjb_running"), (md.TERMINAL, "hjb_terminal")])
def test_4_hjb_cross_validation(request, problem21, variant, fixture, verdict):
    sol = request.getfixturevalue(fixture)
    rep = hjb_fd.compare_to_closed_form(sol, problem21, variant, window=(-150.0, -5.0))
    u_c = hjb_fd.extract_rhc(sol)(np.array([-100.0]))[0]
    seconds = conftest.HJB_SECONDS[variant]
    ok = (
        sol.grid.n_x == 400
        and sol.grid.n_t == hjb_fd.required_n_t(hjb_fd.debt_hjb_problem(problem21, variant), sol.grid)
        and rep.max_rel_err <= 1e-2
        and rep.minimizer_max_rel_dev <= 0.05
        and seconds < 30
    )
    verdict(
        4, f"HJB vs closed form ({variant})", ok,
        f"max rel err {rep.max_rel_err:.3e} (<= 1e-2), minimizer dev {rep.minimizer_max_rel_dev:.2%} (<= 5%), "
        f"u_c(-100)={u_c:.5f}, n_t={sol.grid.n_t}, solve {seconds:.1f} s (< 30 s)",
    )


def test_5_supermartingale(problem21, ens_1000, verdict):
    ens, build = ens_1000
    start = time.perf_counter()
    res = mc.test_supermartingale(ens, md.value_function(problem21), np.round(np.arange(0, 51) * 0.1, 10), z_threshold=3.0)
    seconds = build + time.perf_counter() - start
    verdict(5, "supermartingale", res.passed and seconds < 10, f"max increase z={res.max_violation_z:.3f} (<= 3), {seconds:.2f} s (< 10 s)")


def test_6_tail_bound(problem21, ens_1000, verdict):
    ens, _ = ens_1000
    V = md.value_function(problem21)
    V0 = float(V.evaluate(np.array([problem21.x0]), problem21.T))
    res = mc.test_tail_bound(ens, V, V0 * np.array([0.5, 1.0, 2.0, 5.0]), n_se=2.0)
    pairs = ", ".join(f"{p:.3f}<={b:.3f}+2*{s:.3f}" for p, b, s in zip(res.empirical_prob, res.bound, res.std_err))
    verdict(6, "tail bound", res.passed, pairs)


def test_7_phi_identity(problem21, ens_1000, verdict):
    ens, _ = ens_1000
    p = problem21
    scale = -math.expm1(-p.eta * p.T)
    phi = lambda x: md.neg_power(np.asarray(x)[..., 0], p.beta) * scale  # noqa: E731
    res = mc.test_phi_identity(ens, md.value_function(p), phi, 1.0)
    verdict(7, "phi identity", abs(res.relative_residual) <= 0.05, f"relative residual {res.relative_residual:+.4f} (SE {res.mc_std_err:.4f}), limit 0.05")


def test_8_integrator_order(problem21, verdict):
    # the dt run reuses the dt/2 Brownian path by summing pairs of increments
    errors = []
    for dt, sub in ((1e-3, 2), (5e-4, 1)):
        grid = TimeGrid.spanning(1.0, dt)
        eu = mc.run_ensemble(problem21, 200, grid, SEED, mc.EULER, substeps=sub).states()[:, -1]
        ex = mc.run_ensemble(problem21, 200, grid, SEED, mc.EXACT, substeps=sub).states()[:, -1]
        errors.append(float(np.mean(np.abs(eu - ex))))
    ratio = errors[0] / errors[1]
    verdict(8, "Euler strong order", 1.1 <= ratio <= 1.8, f"E(1e-3)={errors[0]:.4e}, E(5e-4)={errors[1]:.4e}, ratio {ratio:.3f} in [1.1, 1.8]")


def test_9_figure_reproduction(market, verdict):
    def ensemble(beta, horizon):
        p = md.DebtProblem(market, beta, 1.0, -3.0, 0.0, -100.0)
        return mc.run_ensemble(p, 100, TimeGrid.spanning(horizon, 0.01), SEED)

    e21 = ensemble(2.1, 40.0)
    est21 = mc.estimate_convergence(e21, 1.0)
    n_conv = int(round(est21.converged_fraction * 100))
    dips = int(np.sum(np.nanmin(e21.states(), axis=1) < -150.0))
    conv45 = mc.estimate_convergence(ensemble(4.5, 40.0), 1.0).converged_fraction
    conv78 = mc.estimate_convergence(ensemble(7.8, 100.0), 1.0).converged_fraction
    ok = n_conv >= 95 and dips >= 1 and conv45 < est21.converged_fraction and conv78 < 0.5
    verdict(
        9, "figure reproduction", ok,
        f"(a) beta=2.1: {n_conv}/100 with |X_40|<1 (>= 95), {dips} paths below -150 (>= 1); "
        f"(b) beta=4.5 converged {conv45:.2f} < {est21.converged_fraction:.2f}; "
        f"(c) beta=7.8 converged at t=100 {conv78:.2f} < 0.50",
    )


def _run_all(tmp_path, tag, config):
    out = tmp_path / tag
    for cmd in (["simulate"], ["sweep", "--betas", "2.1,4.5,7.8"], ["hjb"], ["figures"]):
        code = cli.main(cmd + ["--config", str(config), "--out", str(out)])
        assert code in (cli.EXIT_OK, cli.EXIT_FAILED)
    return {p.name: p.read_bytes() for p in sorted(out.glob("*.csv"))}


def test_10_determinism(tmp_path, monkeypatch, verdict):
    config = tmp_path / "config.json"
    config.write_text(
        '{"mc": {"n_paths": 12, "dt": 0.05, "horizon": 5.0}, "hjb": {"n_x": 48}, "output": {"emit_svg": false}}'
    )
    runs = {}
    for tag, threads in (("a", "1"), ("b", "1"), ("c", "4"), ("d", "7")):
        monkeypatch.setenv(mc.THREADS_ENV, threads)
        runs[tag] = _run_all(tmp_path, tag, config)
    names = sorted(runs["a"])
    same = all(runs[t] == runs["a"] for t in runs)
    verdict(10, "determinism", same and len(names) == 6, f"{len(names)} CSVs ({', '.join(names)}) byte-identical across repeat and HORIZON_SDE_THREADS=1,4,7: {same}")
