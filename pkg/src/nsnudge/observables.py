"""Local-average observations on a periodic Voronoi tessellation.

An :class:`ObservationNetwork` fixes N measurement points, the disc radius r
and the grid-sampled resolution h.  Measurements are discrete means of the
velocity over the grid points inside each open disc; the interpolant is
piecewise constant on the nearest-point cells, and the observable handed to
the nudging scheme is ``J_h = P_lambda P_H I_h``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .spectral import TWO_PI, Grid, SpectralField, h1_norm, leray


class NetworkError(ValueError):
    pass


def periodic_distance(x, y):
    """Distance on the 2pi-periodic torus; broadcasts over leading axes."""
    d = np.abs(np.asarray(x, float) - np.asarray(y, float)) % TWO_PI
    d = np.minimum(d, TWO_PI - d)
    return np.hypot(d[..., 0], d[..., 1])


def lattice_points(m: int, grid: Grid) -> np.ndarray:
    """m x m uniform lattice snapped to grid nodes (index round(i n / m))."""
    idx = np.round(np.arange(m) * grid.n / m).astype(int) % grid.n
    ix, iy = np.meshgrid(idx, idx, indexing="ij")
    return np.column_stack([ix.ravel(), iy.ravel()]) * grid.dx


def random_points(count: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.uniform(0.0, TWO_PI, size=(count, 2))


@dataclass(frozen=True, eq=False)
class ObservationNetwork:
    """Measurement points with their Voronoi cells and averaging discs.

    ``labels[i, j]`` is the index of the cell containing grid node (i, j);
    ``disc_nodes[k]`` holds the flat grid indices inside disc k.
    """

    points: np.ndarray
    r: float
    h: float
    grid: Grid
    labels: np.ndarray
    disc_nodes: tuple
    lattice: bool = False

    @property
    def N(self) -> int:
        return len(self.points)

    @property
    def gamma(self) -> float:
        return self.r / self.h

    def cell_mask(self, j: int) -> np.ndarray:
        return self.labels == j

    def disc_mask(self, j: int) -> np.ndarray:
        mask = np.zeros(self.grid.n * self.grid.n, dtype=bool)
        mask[self.disc_nodes[j]] = True
        return mask.reshape(self.grid.n, self.grid.n)

    @cached_property
    def _reduce(self):
        flat = np.concatenate(self.disc_nodes)
        starts = np.cumsum([0] + [len(d) for d in self.disc_nodes[:-1]])
        counts = np.array([len(d) for d in self.disc_nodes], dtype=float)
        return flat, starts, counts

    def c0_bound(self) -> float:
        """Analytic type-I constant for the piecewise-constant interpolant.

        The sharp form 2*3^6/(pi gamma^2) applies when h is commensurate with
        the torus (h = 2pi/kappa) or the network is a uniform lattice; any
        other layout pays the extra factor 16.
        """
        tight = 2 * 3**6 / (math.pi * self.gamma**2)
        kappa = TWO_PI / self.h
        if self.lattice or abs(kappa - round(kappa)) < 1e-12:
            return tight
        return 16 * tight


def build_network(points, r: float, grid: Grid, lattice: bool = False) -> ObservationNetwork:
    pts = np.asarray(points, dtype=float).reshape(-1, 2) % TWO_PI
    if r <= 0:
        raise NetworkError(f"disc radius must be positive, got {r}")
    if len(np.unique(np.round(pts, 12), axis=0)) != len(pts):
        raise NetworkError("measurement points must be distinct")
    x, y = grid.coords
    nodes = np.stack([x, y], axis=-1)
    best = np.full(x.shape, np.inf)
    labels = np.zeros(x.shape, dtype=np.int64)
    discs = []
    for j, p in enumerate(pts):
        d = periodic_distance(nodes, p)
        closer = d < best  # strict: ties keep the lower index
        best[closer] = d[closer]
        labels[closer] = j
        inside = np.flatnonzero(d < r)
        if inside.size == 0:
            raise NetworkError(f"disc {j} at {p} contains no grid points (r={r})")
        discs.append(inside)
    h = float(best.max())
    net = ObservationNetwork(pts, float(r), h, grid, labels, tuple(discs), lattice)
    if not 0 < net.gamma < 1:
        raise NetworkError(
            f"gamma = r/h = {net.gamma:.6g} is not in (0, 1); the local-average "
            "interpolant is only certified type I for r = gamma h with 0 < gamma < 1"
        )
    return net


def lattice_network(m: int, r: float, grid: Grid) -> ObservationNetwork:
    return build_network(lattice_points(m, grid), r, grid, lattice=True)


def measure(U: SpectralField, net: ObservationNetwork) -> np.ndarray:
    """Disc averages m_j, shape (N, 2)."""
    return measure_physical(U.to_physical(), net)


def measure_physical(phys: np.ndarray, net: ObservationNetwork) -> np.ndarray:
    flat, starts, counts = net._reduce
    vals = phys.reshape(2, -1)[:, flat]
    return (np.add.reduceat(vals, starts, axis=1) / counts).T


def interpolate(m, net: ObservationNetwork) -> np.ndarray:
    """Piecewise-constant field in physical space, shape (2, n, n)."""
    m = np.asarray(m, dtype=float)
    if m.shape != (net.N, 2):
        raise ValueError(f"expected {net.N} measurements of shape (N, 2), got {m.shape}")
    return np.moveaxis(m[net.labels], -1, 0)


@dataclass(frozen=True)
class FilterSpec:
    lam: float

    def __post_init__(self):
        if self.lam < 1:
            raise ValueError(f"filter cutoff must be >= 1, got {self.lam}")

    def mask(self, grid: Grid) -> np.ndarray:
        k2 = grid.k2
        return (k2 <= self.lam) & (k2 > 0) & ~grid.nyquist

    def mode_count(self) -> int:
        """card{k in Z^2 : 0 < |k|^2 <= lam}, by direct enumeration."""
        kmax = int(math.isqrt(int(self.lam)))
        k = np.arange(-kmax, kmax + 1)
        k2 = k[:, None] ** 2 + k[None, :] ** 2
        return int(np.count_nonzero((k2 > 0) & (k2 <= self.lam)))


def spectral_filter(fld: SpectralField, spec: FilterSpec) -> SpectralField:
    return SpectralField(fld.coeffs * spec.mask(fld.grid), fld.grid)


def observe(U: SpectralField, net: ObservationNetwork, spec: FilterSpec) -> SpectralField:
    """J_h U = P_lambda P_H I_h U via the physical-space interpolant."""
    g = U.grid
    ih = g.forward(interpolate(measure(U, net), net))
    return SpectralField(leray(ih, g) * spec.mask(g), g)


@dataclass(eq=False)
class ObservationOperator:
    """J_h as a linear map from the 2N measurement channels to Fourier modes.

    ``basis[i]`` is P_lambda P_H (chi_j e_c) for channel i = 2j + c restricted
    to the retained modes; applying J_h to measurements is one small matrix
    product, which is what the assimilation loop uses.
    """

    net: ObservationNetwork
    spec: FilterSpec
    mask: np.ndarray = field(init=False)
    basis: np.ndarray = field(init=False)

    def __post_init__(self):
        g = self.net.grid
        self.mask = self.spec.mask(g)
        sel = np.flatnonzero(self.mask)
        kx = np.broadcast_to(g.kx, g.spectral_shape).ravel()[sel]
        ky = np.broadcast_to(g.ky, g.spectral_shape).ravel()[sel]
        k2 = kx**2 + ky**2
        basis = np.zeros((2 * self.net.N, 2, sel.size), dtype=complex)
        for j in range(self.net.N):
            chi = g.forward(self.net.cell_mask(j).astype(float)).ravel()[sel]
            # P_H of (chi, 0) and (0, chi)
            basis[2 * j, 0] = chi * (1 - kx * kx / k2)
            basis[2 * j, 1] = chi * (-ky * kx / k2)
            basis[2 * j + 1, 0] = chi * (-kx * ky / k2)
            basis[2 * j + 1, 1] = chi * (1 - ky * ky / k2)
        self.basis = basis
        self._sel = sel
        self._w = g.weights.ravel()[sel]

    @property
    def n_modes(self) -> int:
        return self._sel.size

    def compact_inner(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """L2 inner products of compact vectors; broadcasts over leading axes."""
        return TWO_PI**2 * np.sum(self._w * np.real(a * np.conj(b)), axis=(-2, -1))

    def gram(self) -> np.ndarray:
        flat = self.basis.reshape(len(self.basis), -1)
        w = np.tile(self._w, 2)
        return TWO_PI**2 * np.real((flat * w) @ flat.conj().T)

    def compact_from_measurements(self, m: np.ndarray) -> np.ndarray:
        return np.tensordot(np.asarray(m, float).ravel(), self.basis, axes=1)

    def expand(self, compact: np.ndarray) -> np.ndarray:
        g = self.net.grid
        out = np.zeros((2, g.spectral_shape[0] * g.spectral_shape[1]), dtype=complex)
        out[:, self._sel] = compact
        return out.reshape(2, *g.spectral_shape)

    def compact(self, coeffs: np.ndarray) -> np.ndarray:
        return coeffs.reshape(2, -1)[:, self._sel]

    def apply_measurements(self, m: np.ndarray) -> np.ndarray:
        return self.expand(self.compact_from_measurements(m))

    def observe_coeffs(self, coeffs: np.ndarray) -> np.ndarray:
        """J_h u for raw coefficients, returned in compact form."""
        m = measure_physical(self.net.grid.inverse(coeffs), self.net)
        return self.compact_from_measurements(m)


def random_solenoidal(grid: Grid, rng: np.random.Generator, kmax: float | None = None) -> SpectralField:
    """Unit-H1 field with independent complex Gaussian modes on 1 <= |k| <= kmax."""
    kmax = grid.dealias_cutoff if kmax is None else kmax
    shape = (2, *grid.spectral_shape)
    c = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    band = (grid.k2 >= 1) & (grid.k2 <= kmax**2)
    c = leray(c * band, grid)
    # enforce conjugate symmetry on the self-conjugate ky = 0 column
    c = grid.forward(grid.inverse(c))
    c = leray(c * band, grid)
    return SpectralField(c / h1_norm(c, grid), grid)


def certify_type1(net: ObservationNetwork, trials: int, seed: int = 0) -> tuple[float, float]:
    """Largest observed ||Phi - I_h Phi||^2 / (h^2 ||Phi||^2) and the analytic c0.

    Each trial draws a random band-limited field in V whose band edge is
    log-uniform between |k| = 1 and the dealiasing cutoff, so both smooth and
    rough fields are exercised.
    """
    if trials < 1:
        raise ValueError("need at least one trial")
    g = net.grid
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        kmax = math.exp(rng.uniform(0.0, math.log(g.dealias_cutoff)))
        phi = random_solenoidal(g, rng, max(kmax, 1.0))
        phys = phi.to_physical()
        err = phys - interpolate(measure_physical(phys, net), net)
        err_sq = float(np.sum(err**2)) * g.dx**2
        ratio = err_sq / (net.h**2 * h1_norm(phi.coeffs, g) ** 2)
        worst = max(worst, ratio)
    return worst, net.c0_bound()


# -- network files ------------------------------------------------------------

def write_network_file(path, points, r: float, seed: int | None = None) -> None:
    """Plain text: ``# r = ...`` and optional ``# seed = ...`` headers, then "x y" rows."""
    lines = [f"# r = {r!r}"]
    if seed is not None:
        lines.append(f"# seed = {seed}")
    lines += [f"{float(x)!r} {float(y)!r}" for x, y in np.asarray(points, float)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_network_file(path) -> tuple[np.ndarray, float, int | None]:
    r = None
    seed = None
    pts = []
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, val = line[1:].partition("=")
            key = key.strip()
            if key == "r":
                r = float(val)
            elif key == "seed":
                seed = int(val)
            continue
        x, y = line.split()
        pts.append((float(x), float(y)))
    if r is None:
        raise NetworkError(f"{path}: missing '# r = ...' header")
    return np.array(pts).reshape(-1, 2), r, seed
