"""Fourier representation of mean-zero periodic vector fields on [0, 2pi]^2.

Coefficients are stored in the real-to-complex layout of ``scipy.fft.rfft2``
with ``norm="forward"``, so ``coeffs[c, i, j]`` is the amplitude ``u_k`` of
``exp(i k.x)`` for component ``c`` (0 = x, 1 = y) at ``k = (kx[i], ky[j])``
with ``kx = fftfreq(n) * n`` and ``ky = 0..n/2``.  Modes with ``ky < 0`` are
implied by conjugate symmetry.

Norms follow the Parseval convention ``|u| = 2 pi (sum_k |u_k|^2)^(1/2)``,
i.e. they equal the continuum L2 norm over the torus for band-limited fields.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.fft as sfft

TWO_PI = 2.0 * np.pi


class GridMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    """Uniform n x n collocation grid with a circular 2/3-rule cutoff."""

    n: int

    def __post_init__(self):
        if self.n < 8 or self.n & (self.n - 1):
            raise ValueError(f"grid size must be a power of two >= 8, got {self.n}")

    @property
    def dealias_cutoff(self) -> int:
        return self.n // 3

    @property
    def spectral_shape(self) -> tuple[int, int]:
        return (self.n, self.n // 2 + 1)

    @property
    def dx(self) -> float:
        return TWO_PI / self.n

    @cached_property
    def kx(self) -> np.ndarray:
        return np.fft.fftfreq(self.n, 1.0 / self.n)[:, None]

    @cached_property
    def ky(self) -> np.ndarray:
        return np.arange(self.n // 2 + 1, dtype=float)[None, :]

    @cached_property
    def k2(self) -> np.ndarray:
        return self.kx**2 + self.ky**2

    @cached_property
    def k2_safe(self) -> np.ndarray:
        """|k|^2 with the k = 0 entry replaced by 1 (safe divisor)."""
        k2 = self.k2.copy()
        k2[0, 0] = 1.0
        return k2

    @cached_property
    def nyquist(self) -> np.ndarray:
        """Modes on the Nyquist row/column; these have no conjugate partner."""
        mask = np.zeros(self.spectral_shape, dtype=bool)
        mask[self.n // 2, :] = True
        mask[:, -1] = True
        return mask

    @cached_property
    def dealias_mask(self) -> np.ndarray:
        return self.k2 <= self.dealias_cutoff**2

    @cached_property
    def weights(self) -> np.ndarray:
        """Multiplicity of each stored mode in the full (two-sided) spectrum."""
        w = np.full(self.spectral_shape, 2.0)
        w[:, 0] = 1.0
        w[:, -1] = 1.0
        return w

    @cached_property
    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        x = np.arange(self.n) * self.dx
        return np.meshgrid(x, x, indexing="ij")

    def forward(self, phys: np.ndarray) -> np.ndarray:
        return sfft.rfft2(phys, axes=(-2, -1), norm="forward")

    def inverse(self, coeffs: np.ndarray) -> np.ndarray:
        return sfft.irfft2(coeffs, s=(self.n, self.n), axes=(-2, -1), norm="forward")


@dataclass(frozen=True, eq=False)
class SpectralField:
    """A real 2-component vector field held by its Fourier coefficients."""

    coeffs: np.ndarray
    grid: Grid

    def __post_init__(self):
        if self.coeffs.shape != (2, *self.grid.spectral_shape):
            raise ValueError(
                f"coefficient shape {self.coeffs.shape} does not match grid n={self.grid.n}"
            )

    @classmethod
    def zeros(cls, grid: Grid) -> SpectralField:
        return cls(np.zeros((2, *grid.spectral_shape), dtype=complex), grid)

    @classmethod
    def from_physical(cls, phys: np.ndarray, grid: Grid) -> SpectralField:
        coeffs = grid.forward(np.asarray(phys, dtype=float))
        coeffs[:, 0, 0] = 0.0
        return cls(coeffs, grid)

    @classmethod
    def from_function(cls, func, grid: Grid) -> SpectralField:
        """Sample ``func(x, y) -> (ux, uy)`` on the grid."""
        x, y = grid.coords
        ux, uy = func(x, y)
        phys = np.stack(np.broadcast_arrays(np.asarray(ux, float), np.asarray(uy, float)))
        return cls.from_physical(phys, grid)

    def to_physical(self) -> np.ndarray:
        return self.grid.inverse(self.coeffs)

    def copy(self) -> SpectralField:
        return SpectralField(self.coeffs.copy(), self.grid)

    def _check(self, other: SpectralField):
        if other.grid != self.grid:
            raise GridMismatchError(f"grid n={self.grid.n} vs n={other.grid.n}")

    def __add__(self, other: SpectralField) -> SpectralField:
        self._check(other)
        return SpectralField(self.coeffs + other.coeffs, self.grid)

    def __sub__(self, other: SpectralField) -> SpectralField:
        self._check(other)
        return SpectralField(self.coeffs - other.coeffs, self.grid)

    def __mul__(self, scalar: float) -> SpectralField:
        return SpectralField(self.coeffs * scalar, self.grid)

    __rmul__ = __mul__

    def __neg__(self) -> SpectralField:
        return SpectralField(-self.coeffs, self.grid)

    def divergence_residual(self) -> float:
        """max_k |k . u_k|, zero for fields in H."""
        g = self.grid
        div = g.kx * self.coeffs[0] + g.ky * self.coeffs[1]
        return float(np.max(np.abs(div)))

    def inner(self, other: SpectralField) -> float:
        """L2 inner product (u, v) over the torus."""
        self._check(other)
        return inner(self.coeffs, other.coeffs, self.grid)


def inner(a: np.ndarray, b: np.ndarray, grid: Grid) -> float:
    s = np.sum(grid.weights * np.real(a * np.conj(b)))
    return float(TWO_PI**2 * s)


def l2_norm(coeffs: np.ndarray, grid: Grid) -> float:
    return TWO_PI * float(np.sqrt(np.sum(grid.weights * (coeffs.real**2 + coeffs.imag**2))))


def h1_norm(coeffs: np.ndarray, grid: Grid) -> float:
    power = grid.weights * grid.k2 * np.sum(coeffs.real**2 + coeffs.imag**2, axis=0)
    return TWO_PI * float(np.sqrt(np.sum(power)))


def leray(coeffs: np.ndarray, grid: Grid) -> np.ndarray:
    """Apply (I - k k^T/|k|^2) mode by mode; zero the mean and Nyquist modes."""
    kx, ky = grid.kx, grid.ky
    kdotu = (kx * coeffs[0] + ky * coeffs[1]) / grid.k2_safe
    out = np.empty_like(coeffs)
    out[0] = coeffs[0] - kx * kdotu
    out[1] = coeffs[1] - ky * kdotu
    out[:, 0, 0] = 0.0
    out[:, grid.nyquist] = 0.0
    return out


def project_leray(field: SpectralField) -> SpectralField:
    return SpectralField(leray(field.coeffs, field.grid), field.grid)


def norms(field: SpectralField) -> tuple[float, float, float, float]:
    """Return (L2, H1, H2, H^-1/2) norms, each carrying the 2 pi Parseval factor."""
    g = field.grid
    power = g.weights * np.sum(field.coeffs.real**2 + field.coeffs.imag**2, axis=0)
    power[0, 0] = 0.0
    k2 = g.k2
    l2 = TWO_PI * np.sqrt(power.sum())
    h1 = TWO_PI * np.sqrt((k2 * power).sum())
    h2 = TWO_PI * np.sqrt((k2**2 * power).sum())
    h_neg_half = TWO_PI * np.sqrt((power / np.sqrt(g.k2_safe)).sum())
    return float(l2), float(h1), float(h2), float(h_neg_half)


def dealias(coeffs: np.ndarray, grid: Grid) -> np.ndarray:
    return coeffs * grid.dealias_mask


def nonlinear_B(u: SpectralField, v: SpectralField) -> SpectralField:
    """Dealiased pseudo-spectral P_H((u . grad) v)."""
    u._check(v)
    g = u.grid
    up = g.inverse(u.coeffs)
    dvx = g.inverse(1j * g.kx * v.coeffs)
    dvy = g.inverse(1j * g.ky * v.coeffs)
    adv = up[0] * dvx + up[1] * dvy
    out = dealias(g.forward(adv), g)
    return SpectralField(leray(out, g), g)


def advection(coeffs: np.ndarray, grid: Grid) -> np.ndarray:
    """B(u, u) for a dealiased divergence-free u, using the rotational form.

    (u.grad)u = grad(|u|^2/2) + w (-u_y, u_x) with w the vorticity; the
    gradient part is removed exactly by the projection, so only three inverse
    and two forward transforms are needed.
    """
    g = grid
    vort = 1j * (g.kx * coeffs[1] - g.ky * coeffs[0])
    phys = g.inverse(np.stack([coeffs[0], coeffs[1], vort]))
    w = phys[2]
    rot = np.stack([-w * phys[1], w * phys[0]])
    return leray(dealias(g.forward(rot), g), g)


def stokes_apply(field: SpectralField, power: float) -> SpectralField:
    """Multiply each mode by |k|^(2 power), i.e. apply A**power."""
    g = field.grid
    if power == 0:
        return field.copy()
    if power < 0 and np.any(field.coeffs[:, 0, 0] != 0):
        raise ValueError("negative Stokes power requires a mean-zero field")
    mult = g.k2_safe**power
    mult[0, 0] = 0.0
    return SpectralField(field.coeffs * mult, g)


# -- checkpoints --------------------------------------------------------------

CHECKPOINT_MAGIC = b"NSE2"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIIdI")


def save_checkpoint(path, fields: list[SpectralField], time: float = 0.0) -> None:
    """Write fields to the binary checkpoint format.

    Layout (little endian): magic ``NSE2``, version u32, grid n u32, time f64,
    field count u32, then for each field the complex128 array of shape
    ``(2, n, n//2 + 1)`` in C order (component, kx in fftfreq order, ky = 0..n/2).
    """
    if not fields:
        raise ValueError("checkpoint needs at least one field")
    grid = fields[0].grid
    for f in fields:
        fields[0]._check(f)
    with open(Path(path), "wb") as fh:
        fh.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, grid.n, float(time), len(fields)))
        for f in fields:
            fh.write(np.ascontiguousarray(f.coeffs, dtype="<c16").tobytes())


def load_checkpoint(path) -> tuple[list[SpectralField], float]:
    data = Path(path).read_bytes()
    magic, version, n, time, count = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    grid = Grid(n)
    shape = (count, 2, *grid.spectral_shape)
    expected = _HEADER.size + int(np.prod(shape)) * 16
    if len(data) != expected:
        raise ValueError(f"{path}: truncated checkpoint ({len(data)} of {expected} bytes)")
    arr = np.frombuffer(data, dtype="<c16", offset=_HEADER.size).reshape(shape)
    return [SpectralField(arr[i].astype(complex), grid) for i in range(count)], time
