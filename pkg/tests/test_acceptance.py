"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The desk preset (128^2 grid, 8x8 lattice, filter |k|^2 <= 32) is spun up once
per session; the 512^2 checks use the full observation geometry.
"""

import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE, small_config
from nsnudge import config
from nsnudge.assimilation import (
    AssimilationConfig,
    TruthCache,
    apriori_bounds,
    assimilate,
    compute_M,
    generate_force,
)
from nsnudge.cli import main
from nsnudge.ensemble import run_ensemble, scaling_slope, window_stats
from nsnudge.integrator import precompute, step_coeffs
from nsnudge.noise import build, tail_probability_check
from nsnudge.observables import FilterSpec, ObservationOperator, certify_type1, lattice_network, random_solenoidal
from nsnudge.runner import build_problem, initial_state, sync_decay
from nsnudge.spectral import Grid, l2_norm, nonlinear_B, norms, stokes_apply

TAU = 2 * math.pi
PAPER_N = 512
PAPER_R = TAU * math.sqrt(6) / PAPER_N


def report(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def paper_net():
    return lattice_network(9, PAPER_R, Grid(PAPER_N))


@pytest.fixture(scope="module")
def paper_noise(paper_net):
    return build(1.0, ObservationOperator(paper_net, FilterSpec(80)))


@pytest.fixture(scope="module")
def desk():
    cfg = config.defaults()
    problem = build_problem(cfg)
    return cfg, problem, initial_state(problem)


@pytest.fixture(scope="module")
def desk_truth(desk, tmp_path_factory):
    cfg, problem, U0 = desk
    ac = problem.assimilation_config(epsilon=0.0)
    path = tmp_path_factory.mktemp("desk") / "truth.npy"
    return TruthCache.generate(ac, U0, int(cfg["t_end"]), path)


def test_01_mode_count():
    start = time.perf_counter()
    count = FilterSpec(80).mode_count()
    g = Grid(64)
    mask = FilterSpec(80).mask(g)
    stored = 2 * np.count_nonzero(mask[:, 1:]) + np.count_nonzero(mask[:, 0])
    elapsed = time.perf_counter() - start
    report(1, count == 248 and stored == 248 and elapsed < 1.0,
           f"retained modes {count} (grid mask {stored}), {elapsed:.3f}s")


def test_02_geometry(paper_net):
    h_exact = 56 * math.pi * math.sqrt(2) / 512
    sizes = {len(d) for d in paper_net.disc_nodes}
    ok = math.isclose(paper_net.h, h_exact, rel_tol=1e-13) and sizes == {21}
    report(2, ok, f"h = {paper_net.h:.10f} (closed form {h_exact:.10f}), points per disc {sorted(sizes)}")


def test_03_type1_certificate(paper_net):
    c_meas, c0 = certify_type1(paper_net, trials=200, seed=0)
    ok = abs(c0 - 121284) <= 1 and c_meas <= c0
    report(3, ok, f"c0 = {c0:.2f}, gamma = {paper_net.gamma:.6f}, max measured ratio {c_meas:.4g} over 200 fields")


def test_04_noise_variance(paper_noise):
    ratio = paper_noise.sigma_sq
    report(4, abs(ratio / 0.40058 - 1) <= 0.02, f"sigma^2/eps^2 = {ratio:.5f} vs 0.40058 ({100 * (ratio / 0.40058 - 1):+.2f}%)")


def test_05_apriori_constants(paper_net):
    f = generate_force(Grid(64), 1, 100.0, 142.0, 0.025)
    c = compute_M(apriori_bounds(f, 1e-4, 100.0), paper_net, FilterSpec(80))
    ok = (math.isclose(c.rho_V, 250, rel_tol=1e-12) and math.isclose(c.rho_H, 25, rel_tol=1e-12)
          and math.isclose(c.grashof, 2.5e6, rel_tol=1e-12) and round(c.M) == 42333 and c.E0 == 3 * c.M)
    report(5, ok, f"rho_V = {c.rho_V:.6g}, rho_H = {c.rho_H:.6g}, Gr = {c.grashof:.6g}, M = {c.M:.2f}, E0 = {c.E0:.2f}")


@pytest.mark.slow
def test_06_integrator_order(desk):
    cfg, problem, U0 = desk
    g, f = problem.grid, problem.force.coeffs
    T = 16.0

    def run(nsteps):
        c = precompute(g, cfg["nu"], T / nsteps)
        u = U0.coeffs
        for _ in range(nsteps):
            u = step_coeffs(u, f, c)
        return u

    ref = run(16 * 256)
    errs = [l2_norm(run(n) - ref, g) for n in (64, 128, 256)]
    slopes = np.diff(np.log(errs)) / math.log(0.5)
    report(6, bool(np.all(np.abs(slopes - 4) <= 0.2)),
           f"errors {', '.join(f'{e:.3e}' for e in errs)}; slopes {', '.join(f'{s:.3f}' for s in slopes)}")


def test_07_orthogonality():
    g = Grid(128)
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(50):
        u, v = random_solenoidal(g, rng), random_solenoidal(g, rng)
        buv, bvv, av = nonlinear_B(u, v), nonlinear_B(v, v), stokes_apply(v, 1)
        worst = max(worst, abs(buv.inner(v)) / (norms(buv)[0] * norms(v)[0]),
                    abs(bvv.inner(av)) / (norms(bvv)[0] * norms(av)[0]))
    report(7, worst <= 1e-10, f"largest relative inner product {worst:.2e} over 50 field pairs")


@pytest.mark.slow
def test_08_clipping_invariant(desk, desk_truth):
    cfg, problem, _ = desk
    eps = 3.0
    noise = build(eps, problem.operator, seed=11)
    op = problem.operator
    # M set so the noisy observable exceeds 2M about 1% of the time
    sizes = []
    for n in range(len(desk_truth) - 1):
        for m in range(1000, 1004):
            v = desk_truth.observed[n] + noise.sample_compact(n, m)
            sizes.append(math.sqrt(float(op.compact_inner(v, v))))
    M = float(np.quantile(sizes, 0.99)) / 2
    signal = np.sqrt(op.compact_inner(desk_truth.observed, desk_truth.observed)).max()
    ac = AssimilationConfig(problem.grid, cfg["nu"], problem.force, cfg["mu"], cfg["delta"], cfg["dt"],
                            problem.spec, problem.net, noise, M)
    runs = [assimilate(ac, desk_truth, member) for member in range(3)]
    eff = np.concatenate([r.effective_noise[:-1] for r in runs])
    clipped = sum(int(r.clipped.sum()) for r in runs)
    ok = bool(np.all(eff <= 3 * M)) and signal <= M
    report(8, ok, f"{eff.size} observations, max |eta^o|/3M = {eff.max() / (3 * M):.3f}, "
                  f"clipped {clipped} ({100 * clipped / eff.size:.2f}%), M = {M:.4g} >= max |J_h U| = {signal:.4g}")


@pytest.mark.slow
def test_09_synchronization(desk, desk_truth):
    cfg, problem, _ = desk
    ref = desk_truth.norm_series()[:, 1] ** 2
    n_keep = 201
    sub = TruthCache(desk_truth.states[:n_keep], desk_truth.observed[:n_keep], desk_truth.times[:n_keep])
    results = []
    for scale in cfg["mu_sweep"]:
        ac = problem.assimilation_config(epsilon=0.0, mu=scale / cfg["delta"])
        s = assimilate(ac, sub, mode="plain")
        ratio = s.w_h1_sq / ref[:n_keep]
        rate, corr = sync_decay(s.t, ratio)
        results.append((scale, float(ratio.min()), rate, corr, s.diverged))
    best = min(results, key=lambda r: r[1])
    ok = best[1] <= 1e-10 and best[3] <= -0.95
    detail = "; ".join(f"mu={m:g}: min {mn:.2e}" + (" diverged" if d else f", rate {r:.3f}, corr {c:.3f}")
                       for m, mn, r, c, d in results)
    report(9, ok, detail)


@pytest.mark.slow
def test_10_scaling_law(desk, desk_truth):
    cfg, problem, _ = desk
    rows = []
    for eps in cfg["eps_list"]:
        ac = problem.assimilation_config(epsilon=eps)
        stats = run_ensemble(ac, desk_truth, cfg["members"], cfg["mode"], cfg["bands"])
        _, avg, _ = window_stats(stats, cfg["window_lo"], cfg["window_hi"])
        rows.append((ac.noise.sigma_sq, avg, stats.diverged_count))
    table = np.array(rows)
    slope = scaling_slope(table[:, 0], table[:, 1])
    detail = ", ".join(f"sigma^2={s:.3e}: avg {a:.3e}" for s, a, _ in rows)
    report(10, abs(slope - 1) <= 0.15 and table[:, 2].sum() == 0,
           f"slope {slope:.4f} with {cfg['members']} members; {detail}")


def test_11_tail_bound(paper_noise):
    lines, ok = [], True
    for x in (1.0, 3.0, 5.0):
        emp, bound, se = tail_probability_check(paper_noise, x, 100_000, seed=int(x))
        ok &= emp <= bound + 3 * se
        lines.append(f"x={x:g}: {emp:.2e} vs e^-x={bound:.2e}")
    report(11, ok, "; ".join(lines))


def test_12_determinism(tmp_path, monkeypatch):
    cfg_path = tmp_path / "cfg.ini"
    cfg_path.write_text(config.serialize(small_config(epsilon=1e-2, members=5)))
    monkeypatch.setenv("NUDGE_WORKERS", "1")
    runs = [("spinup", []), ("ensemble", []), ("sweep", []), ("sweep", ["--over", "mu"])]
    mismatched = []
    for i, (cmd, extra) in enumerate(runs):
        a, b = tmp_path / f"a{i}", tmp_path / f"b{i}"
        assert main([cmd, *extra, "--config", str(cfg_path), "--out", str(a)]) == 0
        monkeypatch.setenv("NUDGE_WORKERS", "3")
        assert main([cmd, *extra, "--config", str(a / "manifest.ini"), "--out", str(b)]) == 0
        monkeypatch.setenv("NUDGE_WORKERS", "1")
        for fa in sorted(a.iterdir()):
            if fa.name == "manifest.ini":
                same = config.load(fa) == config.load(b / fa.name)
            else:
                same = fa.read_bytes() == (b / fa.name).read_bytes()
            if not same:
                mismatched.append(f"{cmd}/{fa.name}")
    report(12, not mismatched, "re-runs from manifests (1 vs 3 workers) bitwise identical"
           if not mismatched else f"differences in {mismatched}")
