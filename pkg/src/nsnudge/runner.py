"""Experiment orchestration behind the command line interface.

Each ``cmd_*`` function takes a parsed config dict and a fresh output
directory, writes its data files, a figure and ``manifest.ini``, and returns
a small dict summarising what it produced.
"""

from __future__ import annotations

import datetime as _dt
import logging
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, config as cfgmod, plotting
from .assimilation import (
    PLAIN,
    AssimilationConfig,
    TheoryConstants,
    TruthCache,
    apriori_bounds,
    assimilate,
    compute_M,
    generate_force,
    populated_fraction,
    spinup,
)
from .ensemble import EnsembleStats, run_ensemble, scaling_slope, turnover_time, window_stats
from .noise import NoiseModel, build as build_noise, tail_probability_check
from .observables import (
    FilterSpec,
    ObservationNetwork,
    ObservationOperator,
    build_network,
    certify_type1,
    lattice_points,
    read_network_file,
)
from .spectral import Grid, SpectralField, load_checkpoint, norms, save_checkpoint

log = logging.getLogger(__name__)


class RunDirError(RuntimeError):
    pass


# -- setup --------------------------------------------------------------------

@dataclass(eq=False)
class Problem:
    cfg: dict
    grid: Grid
    force: SpectralField
    net: ObservationNetwork
    spec: FilterSpec
    operator: ObservationOperator
    consts: TheoryConstants

    def noise(self, epsilon: float | None = None) -> NoiseModel:
        eps = self.cfg["epsilon"] if epsilon is None else epsilon
        return build_noise(eps, self.operator, self.cfg["noise_seed"])

    @property
    def outlier_M(self) -> float | None:
        return None if self.cfg["outlier_M"] == "off" else self.consts.M

    def assimilation_config(self, epsilon: float | None = None, mu: float | None = None) -> AssimilationConfig:
        c = self.cfg
        return AssimilationConfig(
            grid=self.grid, nu=c["nu"], force=self.force, mu=c["mu"] if mu is None else mu,
            delta=c["delta"], dt=c["dt"], filter=self.spec, net=self.net,
            noise=self.noise(epsilon), outlier_M=self.outlier_M,
        )


def make_network(cfg: dict, grid: Grid) -> ObservationNetwork:
    spec = cfg["network"]
    if spec.startswith("lattice:"):
        m = int(spec.split(":", 1)[1])
        return build_network(lattice_points(m, grid), cfg["radius_cells"] * grid.dx, grid, lattice=True)
    pts, r, _ = read_network_file(spec)
    return build_network(pts, r, grid)


def make_force(cfg: dict, grid: Grid) -> SpectralField:
    if cfg["force_file"]:
        fields, _ = load_checkpoint(cfg["force_file"])
        if fields[0].grid != grid:
            raise cfgmod.ConfigFileError(f"force_file grid n={fields[0].grid.n} differs from grid_n={grid.n}")
        return fields[0]
    return generate_force(grid, cfg["force_seed"], cfg["force_lambda_m"], cfg["force_lambda_M"], cfg["force_l2"])


def build_problem(cfg: dict) -> Problem:
    grid = Grid(cfg["grid_n"])
    force = make_force(cfg, grid)
    net = make_network(cfg, grid)
    spec = FilterSpec(cfg["filter_lambda"])
    op = ObservationOperator(net, spec)
    consts = apriori_bounds(force, cfg["nu"], cfg["force_lambda_m"])
    m = cfg["outlier_M"]
    consts = compute_M(consts, net, spec, None if m in ("auto", "off") else float(m))
    return Problem(cfg, grid, force, net, spec, op, consts)


def initial_state(problem: Problem) -> SpectralField:
    cfg = problem.cfg
    if cfg["initial_state"]:
        fields, _ = load_checkpoint(cfg["initial_state"])
        return fields[0]
    log.info("no initial_state given; spinning up for t=%g", cfg["spinup_time"])
    U0, _ = spinup(problem.grid, problem.force, cfg["nu"], cfg["dt"], cfg["spinup_time"])
    return U0


def n_observations(cfg: dict) -> int:
    return int(round(cfg["t_end"] / cfg["delta"]))


# -- run directories ----------------------------------------------------------

def open_run_dir(out) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        raise RunDirError(f"output directory {out} already holds a run; refusing to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out: Path, cfg: dict, command: str, outputs: list[str], extra: dict | None = None) -> Path:
    lines = [cfgmod.serialize(cfg), "[manifest]", f"command = {command}", f"code_version = {__version__}",
             f"created = {_dt.datetime.now(_dt.timezone.utc).isoformat(timespec='seconds')}",
             f"force_seed = {cfg['force_seed']}", f"noise_seed = {cfg['noise_seed']}",
             "outputs = " + ", ".join(outputs)]
    for k, v in (extra or {}).items():
        lines.append(f"{k} = {v}")
    path = out / "manifest.ini"
    path.write_text("\n".join(lines) + "\n")
    return path


COLUMN_DOCS = {
    "error.csv": "t: observation time; w_h1_sq: ||U-u||^2 (H1); w_l2_sq: |U-u|^2 (L2); "
                 "clipped: 1 if the observation was discarded as an outlier; feedback_norm: |mu (obs - J_h u)|",
    "stats": "t: observation time; mean_sq_error: ensemble mean of ||U-u||^2; a_p, b_p: band I_p for p percent",
    "scaling.csv": "epsilon; sigma_sq: noise variance after filtering; max, avg, min: window statistics of E||U-u||^2",
    "energy.csv": "t; l2: |U|; h1: ||U||",
    "sync.csv": "t; one column per mu with ||U-u||^2/||U||^2",
}


def write_columns(out: Path, names: list[str]) -> None:
    docs = [f"{n}: {COLUMN_DOCS[n if n in COLUMN_DOCS else 'stats']}" for n in names]
    (out / "columns.txt").write_text("\n".join(docs) + "\n")


def write_table(path: Path, header: list[str], rows, comment: str = "manifest=manifest.ini") -> None:
    with open(path, "w") as fh:
        fh.write(f"# {comment}\n")
        fh.write(",".join(header) + "\n")
        for r in np.atleast_2d(rows):
            fh.write(",".join(repr(float(x)) for x in r) + "\n")


def read_table(path) -> tuple[list[str], np.ndarray]:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return lines[0].strip().split(","), np.loadtxt(lines[1:], delimiter=",", ndmin=2)


def summary_text(items: dict) -> str:
    return "".join(f"{k} = {float(v)!r}\n" if isinstance(v, float) else f"{k} = {v}\n" for k, v in items.items())


# -- commands -----------------------------------------------------------------

def cmd_make_force(cfg: dict, out) -> dict:
    out = open_run_dir(out)
    grid = Grid(cfg["grid_n"])
    force = generate_force(grid, cfg["force_seed"], cfg["force_lambda_m"], cfg["force_lambda_M"], cfg["force_l2"])
    save_checkpoint(out / "force.ckpt", [force])
    l2 = norms(force)[0]
    consts = apriori_bounds(force, cfg["nu"], cfg["force_lambda_m"])
    (out / "summary.txt").write_text(summary_text({
        "force_l2": l2, "rho_V": consts.rho_V, "rho_H": consts.rho_H, "grashof": consts.grashof}))
    write_manifest(out, cfg, "make-force", ["force.ckpt", "summary.txt"])
    return {"force_l2": l2, "path": out / "force.ckpt"}


def cmd_spinup(cfg: dict, out, start=None) -> dict:
    """Integrate the free-running equations; ``start`` resumes from a checkpoint."""
    out = open_run_dir(out)
    grid = Grid(cfg["grid_n"])
    force = make_force(cfg, grid)
    t0 = 0.0
    U_start = None
    if start is not None:
        fields, t0 = load_checkpoint(start)
        U_start = fields[0]
    span = cfg["spinup_time"] - t0
    if span <= 0:
        raise cfgmod.ConfigFileError(f"checkpoint time {t0} is already past spinup_time {cfg['spinup_time']}")
    every = max(1, int(round(cfg["delta"] / cfg["dt"])))
    U, elog = spinup(grid, force, cfg["nu"], cfg["dt"], span, U_start, record_every=every)
    elog[:, 0] += t0
    save_checkpoint(out / "state.ckpt", [U], time=t0 + span)
    write_table(out / "energy.csv", ["t", "l2", "h1"], elog)
    plotting.plot_energy(elog, out / "energy.png")
    frac = populated_fraction(U)
    (out / "summary.txt").write_text(summary_text({
        "t_final": t0 + span, "l2": norms(U)[0], "h1": norms(U)[1], "populated_mode_fraction": frac}))
    write_columns(out, ["energy.csv"])
    write_manifest(out, cfg, "spinup", ["state.ckpt", "energy.csv", "energy.png", "summary.txt"],
                   {"resumed_from": start or "none"})
    return {"state": U, "energy": elog, "populated_fraction": frac}


def _truth(problem: Problem, ac: AssimilationConfig, workdir: Path | None = None) -> TruthCache:
    path = None
    if workdir is not None:
        fd, path = tempfile.mkstemp(suffix=".truth.npy", dir=workdir)
        os.close(fd)
    return TruthCache.generate(ac, initial_state(problem), n_observations(problem.cfg), path)


def _cleanup(truth: TruthCache) -> None:
    if truth.path and os.path.exists(truth.path):
        os.unlink(truth.path)


def cmd_assimilate(cfg: dict, out, member: int = 0) -> dict:
    out = open_run_dir(out)
    problem = build_problem(cfg)
    ac = problem.assimilation_config()
    truth = _truth(problem, ac)
    try:
        series = assimilate(ac, truth, member, cfg["mode"])
    finally:
        _cleanup(truth)
    series.to_csv(out / "error.csv")
    plotting.plot_error_series(series, out / "error.png", f"epsilon = {cfg['epsilon']:g}, mode = {cfg['mode']}")
    (out / "summary.txt").write_text(summary_text({
        "sigma_sq": ac.noise.sigma_sq, "M": problem.consts.M if problem.outlier_M else "off",
        "clipped_observations": int(series.clipped.sum()), "diverged": series.diverged}))
    write_columns(out, ["error.csv"])
    write_manifest(out, cfg, "assimilate", ["error.csv", "error.png", "summary.txt"], {"member": member})
    return {"series": series}


def _ensemble_for(problem, truth, epsilon, progress=None):
    cfg = problem.cfg
    ac = problem.assimilation_config(epsilon)
    stats = run_ensemble(ac, truth, cfg["members"], cfg["mode"], cfg["bands"], progress=progress)
    return ac, stats


def _truth_norms(truth: TruthCache):
    ns = truth.norm_series()
    tau = turnover_time(truth.times, ns[:, 0], ns[:, 2])
    return ns, tau


def cmd_ensemble(cfg: dict, out) -> dict:
    out = open_run_dir(out)
    problem = build_problem(cfg)
    ac = problem.assimilation_config()
    truth = _truth(problem, ac, out)
    try:
        _, stats = _ensemble_for(problem, truth, cfg["epsilon"])
        _, tau = _truth_norms(truth)
    finally:
        _cleanup(truth)
    stats.to_csv(out / "stats.csv", "manifest=manifest.ini")
    plotting.plot_ensemble({f"eps = {cfg['epsilon']:g}": stats}, out / "stats.png")
    wmax, wavg, wmin = window_stats(stats, cfg["window_lo"], cfg["window_hi"])
    (out / "summary.txt").write_text(summary_text({
        "sigma_sq": ac.noise.sigma_sq, "members": stats.member_count, "diverged": stats.diverged_count,
        "window_max": wmax, "window_avg": wavg, "window_min": wmin, "tau": tau,
        "grashof": problem.consts.grashof}))
    write_columns(out, ["stats.csv"])
    write_manifest(out, cfg, "ensemble", ["stats.csv", "stats.png", "summary.txt"])
    return {"stats": stats, "tau": tau}


def cmd_sweep(cfg: dict, out, over: str = "eps") -> dict:
    if over == "mu":
        return cmd_sync_sweep(cfg, out)
    out = open_run_dir(out)
    problem = build_problem(cfg)
    ac = problem.assimilation_config()
    truth = _truth(problem, ac, out)
    rows, all_stats, files = [], {}, []
    try:
        for eps in cfg["eps_list"]:
            ac_e, stats = _ensemble_for(problem, truth, eps)
            name = f"stats_eps{eps:.0e}.csv"
            stats.to_csv(out / name, "manifest=manifest.ini")
            files.append(name)
            all_stats[f"eps = {eps:g}"] = stats
            rows.append((eps, ac_e.noise.sigma_sq, *window_stats(stats, cfg["window_lo"], cfg["window_hi"])))
        _, tau = _truth_norms(truth)
    finally:
        _cleanup(truth)
    table = np.array(rows)
    write_table(out / "scaling.csv", ["epsilon", "sigma_sq", "max", "avg", "min"], table)
    positive = table[:, 1] > 0
    slope = scaling_slope(table[positive, 1], table[positive, 3]) if positive.sum() >= 2 else float("nan")
    plotting.plot_ensemble(all_stats, out / "stats.png")
    if positive.sum() >= 2:
        plotting.plot_scaling(table[positive][:, 1:], out / "scaling.png", slope)
    (out / "summary.txt").write_text(summary_text({
        "slope_avg_vs_sigma_sq": slope, "tau": tau, "grashof": problem.consts.grashof,
        "sigma_sq_per_eps_sq": table[0, 1] / table[0, 0] ** 2 if table[0, 0] else 0.0,
        "window": f"[{cfg['window_lo']}, {cfg['window_hi']}]"}))
    write_columns(out, files + ["scaling.csv"])
    write_manifest(out, cfg, "sweep", files + ["scaling.csv", "stats.png", "scaling.png", "summary.txt"])
    return {"table": table, "slope": slope, "stats": all_stats, "tau": tau}


def sync_decay(t, ratio, lo: float = 1e-13, hi: float = 1e-2) -> tuple[float, float]:
    """Log-linear fit of the synchronisation error: (rate, correlation).

    Uses the points with lo < ratio < hi, i.e. after the initial transient and
    before round-off takes over.
    """
    sel = (ratio > lo) & (ratio < hi)
    if sel.sum() < 3:
        return float("nan"), float("nan")
    x, y = np.asarray(t)[sel], np.log(ratio[sel])
    slope = np.polyfit(x, y, 1)[0]
    return float(-slope), float(np.corrcoef(x, y)[0, 1])


def cmd_sync_sweep(cfg: dict, out) -> dict:
    """Noise-free synchronisation over the configured mu values."""
    out = open_run_dir(out)
    problem = build_problem(cfg)
    ac = problem.assimilation_config(epsilon=0.0)
    truth = _truth(problem, ac)
    results, rows = {}, []
    try:
        ref = truth.norm_series()[:, 1] ** 2
        for scale in cfg["mu_sweep"]:
            mu = scale / cfg["delta"]
            ac.mu = mu
            s = assimilate(ac, truth, 0, PLAIN)
            ratio = s.w_h1_sq / ref
            results[mu] = (s.t, ratio)
            rate, corr = sync_decay(s.t, ratio)
            rows.append((mu, float(ratio.min()), float(ratio[-1]), rate, corr, float(s.diverged)))
    finally:
        _cleanup(truth)
    t = truth.times
    write_table(out / "sync.csv", ["t"] + [f"mu_{mu:g}" for mu in results],
                np.column_stack([t] + [np.minimum(r, 1e6) for _, r in results.values()]))
    write_table(out / "sync_summary.csv", ["mu", "min_ratio", "final_ratio", "decay_rate", "loglin_corr", "diverged"],
                np.array(rows))
    plotting.plot_sync(results, out / "sync.png")
    write_columns(out, ["sync.csv"])
    write_manifest(out, cfg, "sweep --over mu", ["sync.csv", "sync_summary.csv", "sync.png"])
    return {"results": results, "rows": rows}


def cmd_certify(cfg: dict, out) -> dict:
    out = open_run_dir(out)
    grid = Grid(cfg["grid_n"])
    net = make_network(cfg, grid)
    spec = FilterSpec(cfg["filter_lambda"])
    c_meas, c0 = certify_type1(net, cfg["certify_trials"], cfg["noise_seed"])
    model = build_noise(cfg["epsilon"] or 1.0, ObservationOperator(net, spec), cfg["noise_seed"])
    tails = [tail_probability_check(model, x, cfg["tail_draws"], cfg["noise_seed"]) for x in cfg["tail_x"]]
    lines = [
        f"h = {net.h!r}",
        f"gamma = {net.gamma!r}",
        f"c0_bound = {c0!r}",
        f"c_measured = {c_meas!r}",
        f"lambda_inv_over_h_sq = {1 / (spec.lam * net.h**2)!r}",
        f"type1 = {'PASS' if c_meas <= c0 else 'FAIL'}",
        f"sigma_sq_per_eps_sq = {model.sigma_sq / model.epsilon**2!r}",
        f"gram_norm = {model.gram_norm()!r}",
    ]
    ok = c_meas <= c0
    for x, (emp, bound, se) in zip(cfg["tail_x"], tails):
        passed = emp <= bound + 3 * se
        ok &= passed
        lines.append(f"tail x={x:g}: empirical={emp!r} bound={bound!r} se={se!r} {'PASS' if passed else 'FAIL'}")
    (out / "certify.txt").write_text("\n".join(lines) + "\n")
    (out / "noise_model.txt").write_text(model.summary())
    write_manifest(out, cfg, "certify", ["certify.txt", "noise_model.txt"])
    return {"h": net.h, "gamma": net.gamma, "c0": c0, "c_measured": c_meas, "tails": tails, "ok": ok,
            "report": "\n".join(lines)}


def cmd_stats(run_dir, window: tuple[float, float] | None = None) -> str:
    """Window statistics of every stats CSV in an existing run directory (read only)."""
    run_dir = Path(run_dir)
    files = sorted(run_dir.glob("stats*.csv"))
    if not files:
        raise RunDirError(f"no stats CSV files in {run_dir}")
    cfg = cfgmod.load(run_dir / "manifest.ini") if (run_dir / "manifest.ini").exists() else cfgmod.defaults()
    lo, hi = window or (cfg["window_lo"], cfg["window_hi"])
    lines = []
    for f in files:
        st = EnsembleStats.from_csv(f)
        wmax, wavg, wmin = window_stats(st, lo, hi)
        lines.append(f"{f.name}: max={wmax!r} avg={wavg!r} min={wmin!r} max/avg={wmax / wavg:.4g}")
    return "\n".join(lines) + "\n"


def seeded(cfg: dict, **overrides) -> dict:
    new = dict(cfg)
    new.update({k: v for k, v in overrides.items() if v is not None})
    cfgmod.check(new)
    return new

