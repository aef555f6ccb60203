"""Reference trajectories and the delay-nudging assimilation loop."""

from __future__ import annotations

import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import integrator
from .integrator import BlowUpError, EtdCoefficients
from .noise import NoiseModel, keyed_rng
from .observables import FilterSpec, ObservationNetwork, ObservationOperator
from .spectral import TWO_PI, Grid, SpectralField, h1_norm, l2_norm, leray, norms

log = logging.getLogger(__name__)

DIVERGED_CAP = 1e6
PLAIN = "plain"
FILTERED = "filtered"


class ConfigError(ValueError):
    pass


def generate_force(grid: Grid, seed: int, lambda_m: float, lambda_M: float, target_l2: float) -> SpectralField:
    """Random time-independent forcing on the shell lambda_m <= |k|^2 <= lambda_M, rescaled to |f| = target."""
    if not 0 < lambda_m <= lambda_M:
        raise ConfigError(f"need 0 < lambda_m <= lambda_M, got {lambda_m}, {lambda_M}")
    if lambda_M > grid.dealias_cutoff**2:
        raise ConfigError(f"forcing shell |k|^2 <= {lambda_M} exceeds the dealiased range of n={grid.n}")
    shell = (grid.k2 >= lambda_m) & (grid.k2 <= lambda_M) & ~grid.nyquist
    if not shell.any():
        raise ConfigError(f"no lattice points with {lambda_m} <= |k|^2 <= {lambda_M}")
    rng = keyed_rng(seed, 0xF0)
    shape = (2, *grid.spectral_shape)
    c = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * shell
    # real-field symmetry on the ky = 0 column
    c = grid.forward(grid.inverse(c)) * shell
    c = leray(c, grid)
    if target_l2 == 0:
        return SpectralField.zeros(grid)
    return SpectralField(c * (target_l2 / l2_norm(c, grid)), grid)


@dataclass
class TheoryConstants:
    rho_H: float
    rho_V: float
    grashof: float
    c1: float | None = None
    M: float | None = None

    @property
    def E0(self) -> float | None:
        return None if self.M is None else 3 * self.M


def apriori_bounds(force: SpectralField, nu: float, lambda_m: float) -> TheoryConstants:
    """rho_V = |f|/nu, rho_H = rho_V/sqrt(lambda_m), Gr = |f|/nu^2 (lambda_1 = 1)."""
    if nu <= 0:
        raise ConfigError("viscosity must be positive")
    f = norms(force)[0]
    rho_V = f / nu
    return TheoryConstants(rho_H=rho_V / math.sqrt(lambda_m), rho_V=rho_V, grashof=f / nu**2)


def type1_constant(net: ObservationNetwork, spec: FilterSpec) -> float:
    """c1 = c3 + c0 with c3 = lambda^-1 / h^2."""
    return 1.0 / (spec.lam * net.h**2) + net.c0_bound()


def compute_M(consts: TheoryConstants, net: ObservationNetwork, spec: FilterSpec, override: float | None = None) -> TheoryConstants:
    """Outlier threshold M = rho_H + sqrt(c1) h rho_V; E0 = 3M."""
    c1 = type1_constant(net, spec)
    M = override if override is not None else consts.rho_H + math.sqrt(c1) * net.h * consts.rho_V
    return TheoryConstants(consts.rho_H, consts.rho_V, consts.grashof, c1, float(M))


def clip_outliers(v: np.ndarray, M: float, norm) -> tuple[np.ndarray, bool]:
    """Return (v, False) if |v| <= 2M, else (0, True)."""
    if M <= 0:
        raise ConfigError("outlier threshold M must be positive")
    if norm <= 2 * M:
        return v, False
    return np.zeros_like(v), True


def clip_field(v: SpectralField, M: float) -> SpectralField:
    out, _ = clip_outliers(v.coeffs, M, norms(v)[0])
    return SpectralField(out, v.grid)


@dataclass(eq=False)
class AssimilationConfig:
    grid: Grid
    nu: float
    force: SpectralField
    mu: float
    delta: float
    dt: float
    filter: FilterSpec
    net: ObservationNetwork
    noise: NoiseModel
    outlier_M: float | None = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.nu <= 0:
            raise ConfigError(f"nu must be positive, got {self.nu}")
        if self.mu < 0:
            raise ConfigError(f"mu must be non-negative, got {self.mu}")
        if self.outlier_M is not None and self.outlier_M <= 0:
            raise ConfigError(f"outlier_M must be positive or disabled, got {self.outlier_M}")
        if self.force.grid != self.grid or self.net.grid != self.grid:
            raise ConfigError("force, network and config grids differ")
        integrator.steps_per_interval(self.delta, self.dt)

    @property
    def steps_per_obs(self) -> int:
        return integrator.steps_per_interval(self.delta, self.dt)

    @cached_property
    def etd(self) -> EtdCoefficients:
        return integrator.precompute(self.grid, self.nu, self.dt)

    @property
    def operator(self) -> ObservationOperator:
        if self.noise.operator is not None:
            return self.noise.operator
        return self._operator

    @cached_property
    def _operator(self) -> ObservationOperator:
        return ObservationOperator(self.net, self.filter)


def spinup(grid: Grid, force: SpectralField, nu: float, dt: float, t_span: float,
           start: SpectralField | None = None, record_every: int = 0, etd=None):
    """Integrate the unnudged equations; return the final state and an energy log.

    The log holds rows (t, |U|, ||U||) every ``record_every`` steps.
    """
    if t_span <= 0:
        raise ConfigError("t_span must be positive")
    nsteps = int(round(t_span / dt))
    etd = etd or integrator.precompute(grid, nu, dt)
    u = (start.coeffs if start is not None else np.zeros((2, *grid.spectral_shape), complex)).copy()
    f = force.coeffs
    rows = []
    for s in range(nsteps):
        if record_every and s % record_every == 0:
            rows.append((s * dt, l2_norm(u, grid), h1_norm(u, grid)))
        u = integrator.step_coeffs(u, f, etd)
    rows.append((nsteps * dt, l2_norm(u, grid), h1_norm(u, grid)))
    return SpectralField(u, grid), np.array(rows)


def populated_fraction(field: SpectralField, floor: float = 0.0) -> float:
    """Fraction of dealiased nonzero modes with |u_k| > floor."""
    g = field.grid
    mask = g.dealias_mask & ~g.nyquist
    mask[0, 0] = False
    amp = np.sqrt(np.sum(np.abs(field.coeffs) ** 2, axis=0))
    return float(np.count_nonzero(amp[mask] > floor) / np.count_nonzero(mask))


class TruthCache:
    """Reference states U(t_n) at every observation time, plus J_h U(t_n).

    States live in a disk-backed array so that ensemble members can stream
    them without re-integrating the reference trajectory.
    """

    def __init__(self, states, observed, times, path=None):
        self.states = states
        self.observed = observed
        self.times = times
        self.path = path
        self.grid = Grid(states.shape[2])

    def __len__(self):
        return len(self.times)

    @classmethod
    def generate(cls, config: AssimilationConfig, U0: SpectralField, n_obs: int, path=None) -> TruthCache:
        g = config.grid
        shape = (n_obs + 1, 2, *g.spectral_shape)
        if path is None:
            fd, path = tempfile.mkstemp(suffix=".truth.npy")
            os.close(fd)
        states = np.lib.format.open_memmap(path, mode="w+", dtype=complex, shape=shape)
        op = config.operator
        observed = np.empty((n_obs + 1, 2, op.n_modes), dtype=complex)
        U = U0.coeffs.copy()
        f = config.force.coeffs
        k = config.steps_per_obs
        for n in range(n_obs + 1):
            states[n] = U
            observed[n] = op.observe_coeffs(U)
            if n < n_obs:
                for _ in range(k):
                    U = integrator.step_coeffs(U, f, config.etd)
        states.flush()
        times = np.arange(n_obs + 1) * config.delta
        return cls(np.load(path, mmap_mode="r"), observed, times, path)

    def field(self, n: int) -> SpectralField:
        return SpectralField(np.array(self.states[n]), self.grid)

    def norm_series(self) -> np.ndarray:
        """Rows (|U|, ||U||, ||U||_{-1/2}) per observation time."""
        rows = [norms(SpectralField(np.array(s), self.grid)) for s in self.states]
        return np.array([(r[0], r[1], r[3]) for r in rows])


@dataclass
class ErrorSeries:
    t: np.ndarray
    w_h1_sq: np.ndarray
    w_l2_sq: np.ndarray
    clipped: np.ndarray
    feedback_norm: np.ndarray
    effective_noise: np.ndarray = field(repr=False)
    diverged: bool = False
    member: int = 0

    COLUMNS = ("t", "w_h1_sq", "w_l2_sq", "clipped", "feedback_norm")

    def to_csv(self, path) -> None:
        rows = np.column_stack([self.t, self.w_h1_sq, self.w_l2_sq, self.clipped.astype(float), self.feedback_norm])
        with open(path, "w") as fh:
            fh.write(",".join(self.COLUMNS) + "\n")
            for t, h1, l2, hit, fb in rows.tolist():
                fh.write(f"{t!r},{h1!r},{l2!r},{int(hit)},{fb!r}\n")

    @classmethod
    def from_csv(cls, path) -> ErrorSeries:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 0], data[:, 1], data[:, 2], data[:, 3].astype(bool), data[:, 4],
                   np.full(len(data), np.nan))


def assimilate(config: AssimilationConfig, truth: TruthCache, member: int = 0, mode: str = FILTERED,
               u0: SpectralField | None = None, spikes: dict | None = None) -> ErrorSeries:
    """Run the delay-nudging scheme against a cached reference trajectory.

    At each t_n the noisy observable J_h U(t_n) + eta_n (cleared when its L2
    norm exceeds 2M in ``filtered`` mode) is compared with J_h u(t_n) and the
    feedback mu (obs - J_h u) is held fixed until t_{n+1}.

    ``spikes`` maps observation index -> extra compact noise, used to inject
    outliers in tests.
    """
    if mode not in (PLAIN, FILTERED):
        raise ConfigError(f"mode must be '{PLAIN}' or '{FILTERED}', got {mode!r}")
    g = config.grid
    op = config.operator
    M = config.outlier_M
    f = config.force.coeffs
    k = config.steps_per_obs
    n_rec = len(truth)
    u = np.zeros((2, *g.spectral_shape), complex) if u0 is None else u0.coeffs.copy()

    h1 = np.full(n_rec, DIVERGED_CAP)
    l2 = np.full(n_rec, DIVERGED_CAP)
    clipped = np.zeros(n_rec, dtype=bool)
    fb = np.zeros(n_rec)
    eff = np.zeros(n_rec)
    diverged = False
    for n in range(n_rec):
        w = truth.states[n] - u
        h1[n] = h1_norm(w, g) ** 2
        l2[n] = l2_norm(w, g) ** 2
        if n == n_rec - 1:
            break
        obs_true = truth.observed[n]
        noisy = obs_true + config.noise.sample_compact(n, member)
        if spikes and n in spikes:
            noisy = noisy + spikes[n]
        if mode == FILTERED and M is not None:
            size = math.sqrt(float(op.compact_inner(noisy, noisy)))
            noisy, clipped[n] = clip_outliers(noisy, M, size)
        d = noisy - obs_true
        eff[n] = math.sqrt(float(op.compact_inner(d, d)))
        g_n = config.mu * (noisy - op.observe_coeffs(u))
        fb[n] = math.sqrt(float(op.compact_inner(g_n, g_n)))
        force = f + op.expand(g_n)
        try:
            for _ in range(k):
                u = integrator.step_coeffs(u, force, config.etd)
        except BlowUpError:
            if mode == FILTERED:
                raise
            log.warning("member %d diverged after t=%g", member, truth.times[n])
            diverged = True
            break
    return ErrorSeries(truth.times.copy(), h1, l2, clipped, fb, eff, diverged, member)
