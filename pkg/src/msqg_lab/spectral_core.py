"""Periodic grids, Fourier transforms, multipliers and Littlewood-Paley projections.

Coefficients use the normalization ``coeffs = fft2(samples) / n**2`` so that
``f(x) = sum_k coeffs[k] exp(i k.x)`` and products of fields correspond to plain
convolution sums of coefficients.  Array axis 0 is the ``x1`` direction and
axis 1 is ``x2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Literal

import numpy as np

TWO_PI = 2.0 * np.pi
MIN_N = 16
MAX_N = 4096

RANK_SHAPES = {"scalar": (), "vector": (2,), "tensor": (2, 2)}


def _is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class Grid:
    """Square 2pi-periodic collocation grid with ``n`` points per axis."""

    n: int

    def __post_init__(self) -> None:
        n = self.n
        if isinstance(n, bool) or not isinstance(n, (int, np.integer)):
            raise ValueError(f"grid size must be an integer, got {n!r}")
        if not _is_power_of_two(int(n)):
            raise ValueError(f"grid size {n} is not a power of two")
        if not MIN_N <= n <= MAX_N:
            raise ValueError(f"grid size {n} outside [{MIN_N}, {MAX_N}]")
        object.__setattr__(self, "n", int(n))

    @property
    def period(self) -> float:
        return TWO_PI

    @property
    def dx(self) -> float:
        return TWO_PI / self.n

    @property
    def cell_area(self) -> float:
        return self.dx**2

    @cached_property
    def k1d(self) -> np.ndarray:
        """Integer wavenumbers in FFT order, covering [-n/2, n/2)."""
        return np.fft.fftfreq(self.n, d=1.0 / self.n).round().astype(np.int64)

    @cached_property
    def kx(self) -> np.ndarray:
        return np.broadcast_to(self.k1d[:, None], (self.n, self.n)).astype(float)

    @cached_property
    def ky(self) -> np.ndarray:
        return np.broadcast_to(self.k1d[None, :], (self.n, self.n)).astype(float)

    @cached_property
    def kvec(self) -> np.ndarray:
        return np.stack([self.kx, self.ky])

    @cached_property
    def kmag(self) -> np.ndarray:
        return np.sqrt(self.kx**2 + self.ky**2)

    @cached_property
    def x1d(self) -> np.ndarray:
        return np.arange(self.n) * self.dx

    @cached_property
    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.x1d, self.x1d, indexing="ij")

    @cached_property
    def nyquist_mask(self) -> np.ndarray:
        """True on modes kept in constructed fields (Nyquist row and column removed)."""
        half = self.n // 2
        keep1 = self.k1d != -half
        return keep1[:, None] & keep1[None, :]

    @cached_property
    def dealias_mask(self) -> np.ndarray:
        """Two-thirds rule: keep modes with max(|k1|, |k2|) < n/3."""
        keep1 = 3 * np.abs(self.k1d) < self.n
        return keep1[:, None] & keep1[None, :]

    @cached_property
    def neg_index(self) -> np.ndarray:
        """Index map k -> -k along one axis in FFT ordering."""
        return (-np.arange(self.n)) % self.n

    @property
    def num_modes(self) -> int:
        return self.n * self.n

    def reflect(self, arr: np.ndarray) -> np.ndarray:
        """Return ``arr`` evaluated at -k on the last two axes."""
        idx = self.neg_index
        return arr[..., idx, :][..., :, idx]


def make_grid(n: int) -> Grid:
    return Grid(n)


@dataclass
class SpectralField:
    """Fourier coefficients of a scalar, vector or 2x2 tensor field on a grid."""

    grid: Grid
    coeffs: np.ndarray
    rank: Literal["scalar", "vector", "tensor"] = "scalar"
    real: bool = True
    delta: float = field(default=0.0)

    def __post_init__(self) -> None:
        if self.rank not in RANK_SHAPES:
            raise ValueError(f"unknown rank {self.rank!r}")
        expected = RANK_SHAPES[self.rank] + (self.grid.n, self.grid.n)
        coeffs = np.asarray(self.coeffs, dtype=complex)
        if coeffs.shape != expected:
            raise ValueError(f"coefficient shape {coeffs.shape} does not match {expected}")
        self.coeffs = coeffs

    @classmethod
    def from_physical(
        cls, grid: Grid, values: np.ndarray, rank: str | None = None, delta: float = 0.0
    ) -> "SpectralField":
        values = np.asarray(values)
        if rank is None:
            rank = {2: "scalar", 3: "vector", 4: "tensor"}[values.ndim]
        real = not np.iscomplexobj(values)
        coeffs = to_spectral(values)
        coeffs = coeffs * grid.nyquist_mask
        if real:
            coeffs = hermitian_symmetrize(grid, coeffs)
        return cls(grid, coeffs, rank, real, delta)

    def physical(self) -> np.ndarray:
        vals = to_physical(self.coeffs)
        return vals.real if self.real else vals

    @property
    def mean(self) -> complex | np.ndarray:
        return self.coeffs[..., 0, 0]

    def with_coeffs(self, coeffs: np.ndarray, rank: str | None = None, real: bool | None = None):
        return SpectralField(
            self.grid,
            coeffs,
            rank or self.rank,
            self.real if real is None else real,
            self.delta,
        )

    def is_hermitian(self) -> bool:
        """Bit-level check that coeffs(-k) == conj(coeffs(k))."""
        return bool(np.array_equal(self.grid.reflect(self.coeffs), np.conj(self.coeffs)))


def to_spectral(values: np.ndarray) -> np.ndarray:
    n = values.shape[-1]
    return np.fft.fft2(values, axes=(-2, -1)) / (n * n)


def to_physical(coeffs: np.ndarray) -> np.ndarray:
    n = coeffs.shape[-1]
    return np.fft.ifft2(coeffs, axes=(-2, -1)) * (n * n)


def to_physical_real(coeffs: np.ndarray) -> np.ndarray:
    return to_physical(coeffs).real


def hermitian_symmetrize(grid: Grid, coeffs: np.ndarray) -> np.ndarray:
    """Average ``c(k)`` with ``conj(c(-k))``; the result is exactly Hermitian."""
    return 0.5 * (coeffs + np.conj(grid.reflect(coeffs)))


def transform_roundtrip(field_: SpectralField) -> SpectralField:
    """Send a field to physical space and back."""
    vals = to_physical(field_.coeffs)
    if field_.real:
        vals = vals.real
    coeffs = to_spectral(vals) * field_.grid.nyquist_mask
    return field_.with_coeffs(coeffs)


def check_real_symmetry(grid: Grid, symbol: np.ndarray, rtol: float = 1e-12) -> bool:
    """True when ``symbol(-k) == conj(symbol(k))`` on all lattice points except Nyquist."""
    mask = grid.nyquist_mask
    ref = grid.reflect(symbol)
    diff = np.abs(ref - np.conj(symbol)) * mask
    scale = max(np.max(np.abs(symbol) * mask), 1e-300)
    return bool(np.max(diff) <= rtol * scale)


def apply_multiplier(
    field_: SpectralField,
    symbol: np.ndarray | Callable[[np.ndarray, np.ndarray], np.ndarray],
) -> SpectralField:
    """Multiply coefficients pointwise by ``symbol``; the zero mode is sent to 0.

    ``symbol`` is an array whose trailing two axes match the grid, or a callable
    of ``(kx, ky)`` returning one.  Leading symbol axes are prepended to the
    field's own component axes, so a vector symbol maps a scalar to a vector.
    """
    grid = field_.grid
    if callable(symbol):
        with np.errstate(divide="ignore", invalid="ignore"):
            symbol = symbol(grid.kx, grid.ky)
    symbol = np.array(symbol, dtype=complex)
    symbol[..., 0, 0] = 0.0
    if not np.all(np.isfinite(symbol)):
        raise ValueError("symbol is not finite on every nonzero lattice point")
    if field_.real and not check_real_symmetry(grid, symbol):
        raise ValueError("symbol violates real symmetry m(-k) = conj(m(k)) for a real field")
    extra = symbol.ndim - 2
    if extra == 0:
        coeffs = symbol * field_.coeffs
        rank = field_.rank
    else:
        if field_.rank != "scalar":
            raise ValueError("vector or tensor symbols apply to scalar fields only")
        coeffs = symbol * field_.coeffs
        rank = {1: "vector", 2: "tensor"}[extra]
    return field_.with_coeffs(coeffs * grid.nyquist_mask, rank=rank)


# ---------------------------------------------------------------------------
# Littlewood-Paley profile


def _smooth_step(t: np.ndarray) -> np.ndarray:
    """g(t) = e^{-1/t} / (e^{-1/t} + e^{-1/(1-t)}), 0 for t <= 0 and 1 for t >= 1."""
    t = np.asarray(t, dtype=float)
    out = np.where(t >= 1.0, 1.0, 0.0)
    inside = (t > 0.0) & (t < 1.0)
    ti = t[inside]
    a = np.exp(-1.0 / ti)
    b = np.exp(-1.0 / (1.0 - ti))
    out[inside] = a / (a + b)
    return out


def _smooth_step_deriv(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    inside = (t > 0.0) & (t < 1.0)
    ti = t[inside]
    a = np.exp(-1.0 / ti)
    b = np.exp(-1.0 / (1.0 - ti))
    da = a / ti**2
    db = -b / (1.0 - ti) ** 2
    out[inside] = (da * b - a * db) / (a + b) ** 2
    return out


def chi_leq_0(r: np.ndarray | float) -> np.ndarray:
    """Radial profile: 1 on r <= 1/2, 0 on r >= 1, smooth and nonincreasing between."""
    r = np.asarray(r, dtype=float)
    return _smooth_step((1.0 - r) / 0.5)


def chi_leq_0_deriv(r: np.ndarray | float) -> np.ndarray:
    """Derivative of :func:`chi_leq_0` with respect to r."""
    r = np.asarray(r, dtype=float)
    return -2.0 * _smooth_step_deriv((1.0 - r) / 0.5)


def chi_leq(q: int, r: np.ndarray) -> np.ndarray:
    """Symbol of P_{<=q}: chi_leq_0(2^{-q} r)."""
    return chi_leq_0(np.ldexp(np.asarray(r, dtype=float), -q))


def chi_band(q: int, r: np.ndarray) -> np.ndarray:
    """Symbol of P_q, supported in 2^{q-1} <= r <= 2^{q+1}."""
    return chi_leq(q + 1, r) - chi_leq(q, r)


def lp_symbol(grid: Grid, q: int, kind: str = "band") -> np.ndarray:
    if kind in ("band", "P_q"):
        return chi_band(q, grid.kmag)
    if kind in ("leq", "P_leq_q", "P_{<=q}"):
        return chi_leq(q, grid.kmag)
    raise ValueError(f"unknown projection kind {kind!r}")


def lp_project(field_: SpectralField, q: int, kind: str = "band") -> SpectralField:
    """Apply P_q (``kind='band'``) or P_{<=q} (``kind='leq'``).  P_{<=q} keeps the mean."""
    sym = lp_symbol(field_.grid, q, kind)
    return field_.with_coeffs(field_.coeffs * sym)


def band_range(grid: Grid) -> range:
    """Bands q >= 0 whose annulus meets the lattice; their symbols sum to 1 off k = 0."""
    kmax = float(np.max(grid.kmag))
    top = 0
    while np.ldexp(1.0, top) < kmax:
        top += 1
    return range(0, top + 1)


def support_radius(coeffs: np.ndarray, kmag: np.ndarray) -> float:
    """Largest |k| with a nonzero coefficient, or -inf for an empty field."""
    nz = np.any(coeffs != 0, axis=tuple(range(coeffs.ndim - 2)))
    if not np.any(nz):
        return -np.inf
    return float(np.max(kmag[nz]))


# ---------------------------------------------------------------------------
# Derivatives and multipliers on raw coefficient arrays


def gradient(grid: Grid, coeffs: np.ndarray) -> np.ndarray:
    """Spectral gradient of scalar coefficients, shape (2, n, n)."""
    return 1j * grid.kvec * coeffs


def fractional_laplacian_symbol(grid: Grid, s: float) -> np.ndarray:
    """|k|^s with the zero mode set to 0."""
    with np.errstate(divide="ignore"):
        sym = np.where(grid.kmag > 0, grid.kmag ** float(s), 0.0)
    return sym


def upsample(coeffs: np.ndarray, factor: int = 2) -> np.ndarray:
    """Zero-pad coefficients to a grid ``factor`` times finer (same function)."""
    n = coeffs.shape[-1]
    m = n * factor
    k = np.fft.fftfreq(n, d=1.0 / n).round().astype(int)
    idx = k % m
    out = np.zeros(coeffs.shape[:-2] + (m, m), dtype=complex)
    out[..., idx[:, None], idx[None, :]] = coeffs
    return out


def integrate(grid: Grid, values: np.ndarray) -> float:
    """Trapezoid (spectrally exact) quadrature over the box."""
    return float(np.sum(values) * grid.cell_area)
