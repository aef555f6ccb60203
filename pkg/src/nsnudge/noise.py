"""Gaussian observation noise pushed through the observable J_h.

Each measurement m_j picks up two independent normal errors, one per velocity
component, scaled by ``eps / (2 pi sqrt 2)`` so that the unfiltered
piecewise-constant noise field has variance eps^2.  After P_lambda P_H the
noise is ``eta = sum_i sigma_i Y_i psi_i`` with unit fields psi_i in H.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .observables import ObservationOperator
from .spectral import TWO_PI, SpectralField


def keyed_rng(*key: int) -> np.random.Generator:
    """Counter-based generator keyed by a tuple of non-negative integers."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


@dataclass(eq=False)
class NoiseModel:
    epsilon: float
    sigmas: np.ndarray
    psi: np.ndarray | None
    seed: int = 0
    operator: ObservationOperator | None = None

    @property
    def sigma_sq(self) -> float:
        return float(np.sum(self.sigmas**2))

    @property
    def active(self) -> np.ndarray:
        return self.sigmas > 0

    def gram(self) -> np.ndarray:
        """Psi_ij = (psi_i, psi_j) over active channels."""
        if self.operator is None:
            return np.eye(int(self.active.sum()))
        act = self.psi[self.active]
        flat = act.reshape(len(act), -1)
        w = np.tile(self.operator._w, 2)
        return TWO_PI**2 * np.real((flat * w) @ flat.conj().T)

    def gram_norm(self) -> float:
        """Spectral norm of Psi (largest eigenvalue of the symmetric Gram matrix)."""
        G = self.gram()
        if G.size == 0:
            return 0.0
        return float(np.linalg.eigvalsh(G)[-1])

    def draw_normals(self, n_index: int, member: int = 0) -> np.ndarray:
        return keyed_rng(self.seed, member, n_index).standard_normal(len(self.sigmas))

    def sample_compact(self, n_index: int, member: int = 0) -> np.ndarray:
        """eta_n on the retained filter modes (compact layout of the operator)."""
        Y = self.draw_normals(n_index, member)
        X = np.where(self.active, self.sigmas * Y, 0.0)
        act = self.active
        if not act.any():
            return np.zeros(self.psi.shape[1:], dtype=complex)
        return np.tensordot(X[act], self.psi[act], axes=1)

    def sample(self, n_index: int, member: int = 0) -> SpectralField:
        g = self.operator.net.grid
        if not self.active.any():
            return SpectralField.zeros(g)
        return SpectralField(self.operator.expand(self.sample_compact(n_index, member)), g)

    def summary(self) -> str:
        lines = [
            f"epsilon = {self.epsilon!r}",
            f"sigma_sq = {self.sigma_sq!r}",
            f"sigma_sq_over_eps_sq = {self.sigma_sq / self.epsilon**2 if self.epsilon else 0.0!r}",
            f"channels = {len(self.sigmas)}",
            f"gram_norm = {self.gram_norm()!r}",
            "sigma_i = " + " ".join(f"{s:.6e}" for s in self.sigmas),
        ]
        return "\n".join(lines) + "\n"


def build(epsilon: float, operator: ObservationOperator, seed: int = 0) -> NoiseModel:
    """Channel amplitudes sigma_i = |P_lambda P_H chi_j eps_i| and unit directions psi_i."""
    if epsilon < 0:
        raise ValueError(f"epsilon must be non-negative, got {epsilon}")
    scale = epsilon / (TWO_PI * math.sqrt(2.0))
    raw = operator.basis * scale
    sig = np.sqrt(operator.compact_inner(raw, raw))
    psi = np.zeros_like(raw)
    nz = sig > 0
    psi[nz] = raw[nz] / sig[nz, None, None]
    return NoiseModel(float(epsilon), sig, psi, seed, operator)


def from_sigmas(sigmas, seed: int = 0) -> NoiseModel:
    """Model with orthonormal directions, for tests of the chi-square bound."""
    sig = np.asarray(sigmas, dtype=float)
    return NoiseModel(float(math.sqrt(np.sum(sig**2))), sig, None, seed, None)


def tail_probability_check(model: NoiseModel, x: float, draws: int, seed: int = 0):
    """Empirical P{||X||^2 >= s^2 + 2 s^2 sqrt(x) + 2 s^2 x} and the bound e^-x.

    Returns (empirical, bound, standard_error); the bound holds when
    ``empirical <= bound + 3 * standard_error``.
    """
    if draws <= 0:
        raise ValueError("draws must be positive")
    if x <= 0:
        raise ValueError("x must be positive")
    s2 = model.sigma_sq
    if s2 == 0:
        raise ValueError("tail check needs sigma^2 > 0")
    thresh = s2 + 2 * s2 * math.sqrt(x) + 2 * s2 * x
    a = model.sigmas**2
    rng = keyed_rng(seed, 0xC41)
    hits = 0
    chunk = 10_000
    done = 0
    while done < draws:
        k = min(chunk, draws - done)
        Y = rng.standard_normal((k, len(a)))
        hits += int(np.count_nonzero((Y**2) @ a >= thresh))
        done += k
    bound = math.exp(-x)
    se = math.sqrt(bound * (1 - bound) / draws)
    return hits / draws, bound, se
