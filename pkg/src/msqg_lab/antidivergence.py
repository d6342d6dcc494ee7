"""Bilinear anti-divergence kernels, the trace-free double-divergence form and moment checks.

The kernel for a band ``q`` and low cutoff ``qhat`` is

    K^{jl}(zeta, eta) = int_0^1 -i d_j m_q^l(sigma zeta - (1 - sigma) eta) dsigma * W(zeta) W(eta)

with ``m_q = m * (1 - chi_{<=qhat}^2) * W`` and the radial window
``W = chi_{<=q+3} - chi_{<=q-1}``.  ``W`` equals 1 on 2^{q-1} <= |xi| <= 2^{q+2},
which covers the Fourier supports of P_q and P_{q+1}, and vanishes near the
origin, so the Taylor path never meets the singularity of ``m``.  Then for
``f = P_{q+1} theta`` and ``g = P_q theta``

    f T_{>qhat} g + g T_{>qhat} f = div_j B^{jl},   B^ = sum K(zeta, eta) f^(zeta) g^(eta).

The sigma integral uses Gauss-Legendre panels split where the path crosses a
window transition, because the profile is smooth but not analytic there.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .msqg_ops import MultiplierSpec, mean_free, nonlinearity_coeffs
from .spectral_core import (
    Grid,
    SpectralField,
    chi_band,
    chi_leq,
    chi_leq_0,
    chi_leq_0_deriv,
    to_physical_real,
    to_spectral,
)

DEFAULT_SIGMA_ORDER = 16
DEFAULT_TRANSITION_PANELS = 8
DEFAULT_MODE_BUDGET = 4096


# ---------------------------------------------------------------------------
# Radial windows


def _chi(p: int, r: np.ndarray) -> np.ndarray:
    return chi_leq_0(np.ldexp(r, -p))


def _dchi(p: int, r: np.ndarray) -> np.ndarray:
    return np.ldexp(chi_leq_0_deriv(np.ldexp(r, -p)), -p)


def band_window(q: int, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """W = chi_{<=q+3} - chi_{<=q-1} and its radial derivative."""
    w = _chi(q + 3, r) - _chi(q - 1, r)
    dw = _dchi(q + 3, r) - _dchi(q - 1, r)
    return w, dw


def radial_cutoff(q: int, qhat: int | None, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(1 - chi_{<=qhat}^2) W and its radial derivative; ``qhat=None`` drops the low cut."""
    w, dw = band_window(q, r)
    if qhat is None:
        return w, dw
    c = _chi(qhat, r)
    dc = _dchi(qhat, r)
    return (1.0 - c * c) * w, -2.0 * c * dc * w + (1.0 - c * c) * dw


def transition_radii(q: int, qhat: int | None) -> list[tuple[float, float]]:
    """Annuli where the radial cutoff is neither 0 nor 1 nor the pure symbol."""
    out = [(2.0 ** (q - 2), 2.0 ** (q - 1)), (2.0 ** (q + 2), 2.0 ** (q + 3))]
    if qhat is not None:
        out.append((2.0 ** (qhat - 1), 2.0**qhat))
    return out


def windowed_symbol(m: MultiplierSpec, q: int, qhat: int | None, u1, u2) -> np.ndarray:
    """m_q^l(u) = m^l(u) (1 - chi_{<=qhat}^2) W(u)."""
    w, _ = radial_cutoff(q, qhat, np.hypot(u1, u2))
    return m.symbol(u1, u2) * w


def windowed_gradient(m: MultiplierSpec, q: int, qhat: int | None, u1, u2) -> np.ndarray:
    """d_j m_q^l(u) with the window derivative included analytically, shape (2, 2, ...)."""
    r = np.hypot(u1, u2)
    w, dw = radial_cutoff(q, qhat, r)
    out = m.grad(u1, u2) * w
    sym = m.symbol(u1, u2)
    with np.errstate(divide="ignore", invalid="ignore"):
        radial = np.where(r > 0, dw / r, 0.0)
    u = (u1, u2)
    for j in range(2):
        for l in range(2):
            out[j, l] = out[j, l] + sym[l] * radial * u[j]
    return out


# ---------------------------------------------------------------------------
# Kernel evaluation


def _segments(zeta: np.ndarray, eta: np.ndarray, q: int, qhat: int | None, panels: int):
    """Split [0, 1] for every pair at window-transition crossings of |u_sigma|.

    Returns flat arrays (pair_index, lo, hi, in_transition).  Pieces meeting a
    transition annulus are subdivided into ``panels`` times as many panels;
    pieces where the windowed symbol vanishes identically are dropped.
    """
    npairs = zeta.shape[0]
    xi = zeta + eta
    a = np.sum(xi * xi, axis=1)
    b = -2.0 * np.sum(eta * xi, axis=1)
    c = np.sum(eta * eta, axis=1)
    bands = transition_radii(q, qhat)
    radii = sorted({rad for pair in bands for rad in pair})
    cols = [np.zeros(npairs), np.ones(npairs)]
    safe_a = np.where(a > 0, a, 1.0)
    for rad in radii:
        disc = b * b - 4.0 * a * (c - rad * rad)
        ok = (a > 0) & (disc > 0)
        sq = np.sqrt(np.where(ok, disc, 0.0))
        for sgn in (-1.0, 1.0):
            s = (-b + sgn * sq) / (2.0 * safe_a)
            cols.append(np.where(ok & (s > 0.0) & (s < 1.0), s, np.nan))
    bp = np.sort(np.stack(cols, axis=1), axis=1)
    lo, hi = bp[:, :-1], bp[:, 1:]
    valid = np.isfinite(lo) & np.isfinite(hi) & (hi > lo)
    pair = np.broadcast_to(np.arange(npairs)[:, None], lo.shape)
    pair, lo, hi = pair[valid], lo[valid], hi[valid]

    z, e = zeta[pair], eta[pair]

    def radius(sig):
        u = sig[:, None] * z - (1.0 - sig)[:, None] * e
        return np.hypot(u[:, 0], u[:, 1])

    # |u_sigma|^2 is convex in sigma, so the extremes over a piece sit at the
    # endpoints or at the vertex of the parabola.
    sa = a[pair]
    vertex = np.where(sa > 0, -b[pair] / (2.0 * np.where(sa > 0, sa, 1.0)), lo)
    vertex = np.clip(vertex, lo, hi)
    r_lo, r_hi, r_v = radius(lo), radius(hi), radius(vertex)
    rmin = np.minimum(np.minimum(r_lo, r_hi), r_v)
    rmax = np.maximum(r_lo, r_hi)
    keep = (rmax > 2.0 ** (q - 2)) & (rmin < 2.0 ** (q + 3))
    if qhat is not None:
        keep &= rmax > 2.0 ** (qhat - 1)
    in_transition = np.zeros_like(keep)
    for r0, r1 in bands:
        in_transition |= (rmax > r0) & (rmin < r1)
    in_transition &= keep

    # Analytic pieces: the nearest complex singularity of |u|^{2p} lies about
    # rmin / |xi| away, so panels no longer than rmin / |xi| keep
    # Gauss-Legendre geometrically convergent at a good rate.
    xi_norm = np.sqrt(sa)
    length = hi - lo
    analytic = np.ceil(xi_norm * length / np.maximum(rmin, 2.0 ** (q - 2)))
    count = np.where(in_transition, panels * np.maximum(analytic, 1.0), np.maximum(analytic, 1.0))
    count = np.minimum(count, 256).astype(np.int64)
    pair, lo, length, count = pair[keep], lo[keep], length[keep], count[keep]
    trans = in_transition[keep]
    rep = np.repeat(np.arange(pair.size), count)
    offs = np.arange(rep.size) - np.repeat(np.cumsum(count) - count, count)
    width = length[rep] / count[rep]
    seg_lo = lo[rep] + offs * width
    return pair[rep], seg_lo, seg_lo + width, trans[rep]


def _integrand(m: MultiplierSpec, q: int, qhat: int | None, u1, u2, windowed: bool) -> np.ndarray:
    """-i d_j m_q^l(u), shape (2, 2, ...).

    Off the transition annuli the radial cutoff is identically 1, so
    ``windowed=False`` skips it.  The mSQG case is real and takes a fused path.
    """
    if m.family != "msqg":
        if windowed:
            return -1j * windowed_gradient(m, q, qhat, u1, u2)
        return -1j * m.grad(u1, u2)
    p = -1.0 + m.delta
    r2 = u1 * u1 + u2 * u2
    pw = r2**p
    pw1 = 2.0 * p * pw / r2
    perp = (u2, -u1)
    u = (u1, u2)
    out = np.empty((2, 2) + u1.shape)
    for j in range(2):
        for l in range(2):
            out[j, l] = perp[l] * u[j] * pw1
    out[0, 1] -= pw
    out[1, 0] += pw
    if windowed:
        r = np.sqrt(r2)
        w, dw = radial_cutoff(q, qhat, r)
        out *= w
        radial = pw * dw / r
        for j in range(2):
            for l in range(2):
                out[j, l] += perp[l] * u[j] * radial
    return m.sign * out


def kernel_values(
    m: MultiplierSpec,
    q: int,
    qhat: int | None,
    zeta: np.ndarray,
    eta: np.ndarray,
    sigma_order: int = DEFAULT_SIGMA_ORDER,
    transition_panels: int = DEFAULT_TRANSITION_PANELS,
    chunk: int = 400_000,
) -> np.ndarray:
    """K^{jl}(zeta_i, eta_i) for paired frequency arrays of shape (N, 2); returns (N, 2, 2)."""
    zeta = np.asarray(zeta, dtype=float).reshape(-1, 2)
    eta = np.asarray(eta, dtype=float).reshape(-1, 2)
    if zeta.shape != eta.shape:
        raise ValueError("zeta and eta must pair up")
    npairs = zeta.shape[0]
    out = np.zeros((npairs, 2, 2), dtype=complex)
    if npairs == 0:
        return out
    wz, _ = band_window(q, np.hypot(zeta[:, 0], zeta[:, 1]))
    we, _ = band_window(q, np.hypot(eta[:, 0], eta[:, 1]))
    active = (wz * we) != 0.0
    idx = np.nonzero(active)[0]
    if idx.size == 0:
        return out
    z, e = zeta[idx], eta[idx]
    seg_pair, seg_lo, seg_hi, seg_trans = _segments(z, e, q, qhat, transition_panels)
    nodes, weights = np.polynomial.legendre.leggauss(sigma_order)
    acc = np.zeros((idx.size, 2, 2), dtype=complex)
    step = max(1, chunk // sigma_order)
    for windowed in (False, True):
        sel = seg_trans == windowed
        pairs_w, lo_w, hi_w = seg_pair[sel], seg_lo[sel], seg_hi[sel]
        for start in range(0, pairs_w.size, step):
            sp = pairs_w[start : start + step]
            lo = lo_w[start : start + step]
            hi = hi_w[start : start + step]
            half = 0.5 * (hi - lo)
            sig = (0.5 * (hi + lo))[:, None] + half[:, None] * nodes[None, :]
            u1 = sig * z[sp, 0][:, None] - (1.0 - sig) * e[sp, 0][:, None]
            u2 = sig * z[sp, 1][:, None] - (1.0 - sig) * e[sp, 1][:, None]
            vals = _integrand(m, q, qhat, u1, u2, windowed)  # (2, 2, S, order)
            contrib = np.einsum("jlso,o->jls", vals, weights) * half
            for j in range(2):
                for l in range(2):
                    c = contrib[j, l]
                    acc[:, j, l] += np.bincount(sp, weights=c.real, minlength=idx.size)
                    if np.iscomplexobj(c):
                        acc[:, j, l] += 1j * np.bincount(sp, weights=c.imag, minlength=idx.size)
    acc *= (wz[idx] * we[idx])[:, None, None]
    out[idx] = acc
    return out


# ---------------------------------------------------------------------------
# Sparse spectra


@dataclass
class SparseSpectrum:
    """Nonzero Fourier coefficients of a field: integer modes (M, 2) and values (M,)."""

    modes: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        self.modes = np.asarray(self.modes, dtype=np.int64).reshape(-1, 2)
        self.values = np.asarray(self.values, dtype=complex).reshape(-1)
        if self.modes.shape[0] != self.values.shape[0]:
            raise ValueError("modes and values differ in length")

    @classmethod
    def from_field(cls, f: SpectralField | np.ndarray, grid: Grid | None = None) -> "SparseSpectrum":
        coeffs = f.coeffs if isinstance(f, SpectralField) else np.asarray(f)
        grid = f.grid if isinstance(f, SpectralField) else grid
        nz = np.nonzero(coeffs)
        k1 = grid.k1d[nz[0]]
        k2 = grid.k1d[nz[1]]
        return cls(np.stack([k1, k2], axis=1), coeffs[nz])

    @property
    def size(self) -> int:
        return int(self.values.size)

    @property
    def kmag(self) -> np.ndarray:
        return np.hypot(self.modes[:, 0], self.modes[:, 1])

    def filtered(self, symbol_of_r) -> "SparseSpectrum":
        vals = self.values * symbol_of_r(self.kmag)
        keep = vals != 0
        return SparseSpectrum(self.modes[keep], vals[keep])

    def to_grid(self, grid: Grid) -> np.ndarray:
        half = grid.n // 2
        if self.size and np.max(np.abs(self.modes)) >= half:
            raise ValueError("sparse spectrum does not fit on the grid")
        out = np.zeros((grid.n, grid.n), dtype=complex)
        np.add.at(out, (self.modes[:, 0] % grid.n, self.modes[:, 1] % grid.n), self.values)
        return out


def random_sparse_field(
    seed: int, k_lo: float, k_hi: float, count: int = 48
) -> SparseSpectrum:
    """Real random field with ``count`` conjugate pairs of modes in k_lo <= |k| <= k_hi."""
    rng = np.random.default_rng(seed)
    chosen: dict[tuple[int, int], complex] = {}
    kmax = int(np.ceil(k_hi))
    attempts = 0
    while len(chosen) < count and attempts < 100 * count:
        attempts += 1
        k = tuple(int(v) for v in rng.integers(-kmax, kmax + 1, size=2))
        r = float(np.hypot(*k))
        if not (k_lo <= r <= k_hi) or r == 0:
            continue
        key = k if (k[0] > 0 or (k[0] == 0 and k[1] > 0)) else (-k[0], -k[1])
        if key in chosen:
            continue
        chosen[key] = complex(rng.standard_normal(), rng.standard_normal())
    modes, vals = [], []
    for k, v in sorted(chosen.items()):
        modes += [k, (-k[0], -k[1])]
        vals += [v, np.conj(v)]
    return SparseSpectrum(np.array(modes).reshape(-1, 2), np.array(vals))


class TensorSpectrum:
    """Sparse spectrum of a 2x2 tensor field keyed by output frequency."""

    def __init__(self, modes: np.ndarray, values: np.ndarray):
        self.modes = np.asarray(modes, dtype=np.int64).reshape(-1, 2)
        self.values = np.asarray(values, dtype=complex).reshape(-1, 2, 2)

    def to_grid(self, grid: Grid, truncate: bool = False) -> np.ndarray:
        half = grid.n // 2
        modes, values = self.modes, self.values
        fits = np.all(np.abs(modes) < half, axis=1)
        if not truncate and not np.all(fits):
            raise ValueError("tensor spectrum does not fit on the grid")
        modes, values = modes[fits], values[fits]
        out = np.zeros((2, 2, grid.n, grid.n), dtype=complex)
        i0, i1 = modes[:, 0] % grid.n, modes[:, 1] % grid.n
        for j in range(2):
            for l in range(2):
                np.add.at(out[j, l], (i0, i1), values[:, j, l])
        return out


def _pair_index(f: SparseSpectrum, g: SparseSpectrum, keep_output=None):
    ia, ib = np.meshgrid(np.arange(f.size), np.arange(g.size), indexing="ij")
    ia, ib = ia.ravel(), ib.ravel()
    out = f.modes[ia] + g.modes[ib]
    if keep_output is not None:
        keep = keep_output(out)
        ia, ib, out = ia[keep], ib[keep], out[keep]
    return ia, ib, out


def _scatter(out_modes: np.ndarray, values: np.ndarray):
    """Sum values sharing an output mode; values have shape (P, ...)."""
    uniq, inv = np.unique(out_modes, axis=0, return_inverse=True)
    inv = inv.ravel()
    flat = values.reshape(values.shape[0], -1)
    acc = np.zeros((uniq.shape[0], flat.shape[1]), dtype=complex)
    for c in range(flat.shape[1]):
        acc[:, c] = np.bincount(inv, weights=flat[:, c].real, minlength=uniq.shape[0]) + 1j * np.bincount(
            inv, weights=flat[:, c].imag, minlength=uniq.shape[0]
        )
    return uniq, acc.reshape((uniq.shape[0],) + values.shape[1:])


# ---------------------------------------------------------------------------
# Kernel tables


@dataclass
class KernelTable:
    """Kernel samples on lattice pairs, with the parameters needed to evaluate more."""

    q: int
    qhat: int | None
    m: MultiplierSpec
    n: int
    sigma_order: int = DEFAULT_SIGMA_ORDER
    transition_panels: int = DEFAULT_TRANSITION_PANELS
    zeta: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    eta: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    samples: np.ndarray = field(default_factory=lambda: np.zeros((0, 2, 2), dtype=complex))

    @property
    def delta(self) -> float:
        return self.m.delta

    def evaluate(self, zeta: np.ndarray, eta: np.ndarray) -> np.ndarray:
        return kernel_values(
            self.m, self.q, self.qhat, zeta, eta, self.sigma_order, self.transition_panels
        )

    @property
    def max_abs(self) -> float:
        return float(np.max(np.abs(self.samples))) if self.samples.size else 0.0

    @property
    def max_trace(self) -> float:
        if not self.samples.size:
            return 0.0
        return float(np.max(np.abs(self.samples[:, 0, 0] + self.samples[:, 1, 1])))

    def scaling_ratio(self) -> float:
        """max|K| * 2^{-2(-1+delta) q}."""
        return self.max_abs * 2.0 ** (-2.0 * (-1.0 + self.delta) * self.q)



def _lattice_annulus(lo: float, hi: float, limit: int) -> np.ndarray:
    k = np.arange(-limit, limit + 1)
    k1, k2 = np.meshgrid(k, k, indexing="ij")
    r = np.hypot(k1, k2)
    sel = (r >= lo) & (r <= hi)
    return np.stack([k1[sel], k2[sel]], axis=1)


def build_kernel(
    q: int,
    qhat: int | None,
    m: MultiplierSpec,
    grid: Grid,
    sigma_order: int = DEFAULT_SIGMA_ORDER,
    transition_panels: int = DEFAULT_TRANSITION_PANELS,
    max_pairs: int = 200_000,
    seed: int = 0,
    pairs: tuple[np.ndarray, np.ndarray] | None = None,
) -> KernelTable:
    """Sample the kernel on lattice pairs from the P_{q+1} and P_q annuli.

    When the full pair set exceeds ``max_pairs`` a seeded subset is drawn.
    """
    if qhat is not None and q < qhat - 2:
        raise ValueError(f"band q={q} lies below qhat-2={qhat - 2}; the kernel vanishes")
    if 2.0 ** (q + 2) >= grid.n / 2:
        raise ValueError(f"band q={q} does not fit on an n={grid.n} grid (need 2^(q+2) < n/2)")
    if pairs is None:
        lim = grid.n // 2 - 1
        zs = _lattice_annulus(2.0**q, 2.0 ** (q + 2), lim)
        es = _lattice_annulus(2.0 ** (q - 1), 2.0 ** (q + 1), lim)
        total = zs.shape[0] * es.shape[0]
        if total <= max_pairs:
            iz, ie = np.meshgrid(np.arange(zs.shape[0]), np.arange(es.shape[0]), indexing="ij")
            iz, ie = iz.ravel(), ie.ravel()
        else:
            rng = np.random.default_rng(seed)
            flat = rng.choice(total, size=max_pairs, replace=False)
            flat.sort()
            iz, ie = np.divmod(flat, es.shape[0])
        zeta, eta = zs[iz], es[ie]
    else:
        zeta, eta = (np.asarray(p, dtype=np.int64).reshape(-1, 2) for p in pairs)
    samples = kernel_values(m, q, qhat, zeta, eta, sigma_order, transition_panels)
    return KernelTable(q, qhat, m, grid.n, sigma_order, transition_panels, zeta, eta, samples)


@dataclass(frozen=True)
class KernelPeak:
    """Largest entry of |K_q| found by a continuum search and its lattice counterpart."""

    q: int
    delta: float
    zeta: np.ndarray
    eta: np.ndarray
    continuum: float
    lattice: float
    lattice_zeta: np.ndarray
    lattice_eta: np.ndarray

    def scaling_ratio(self) -> float:
        return self.lattice * 2.0 ** (-2.0 * (-1.0 + self.delta) * self.q)


def kernel_peak(
    m: MultiplierSpec,
    q: int,
    qhat: int | None,
    starts: int = 4000,
    polish: int = 4,
    rotations: int = 96,
    reach: int = 2,
    seed: int = 0,
) -> KernelPeak:
    """Locate max_{j,l}|K_q^{jl}(zeta, eta)| over the support of W(zeta) W(eta).

    Random starts drawn uniformly in area over the support are refined with
    Nelder-Mead.  The lattice value is the largest entry over integer pairs
    within ``reach`` of ``rotations`` rotated copies of the continuum
    maximiser.  For rotation-invariant multipliers these copies are all
    maximisers; otherwise they only serve as extra candidates.
    """
    from scipy.optimize import minimize

    lo, hi = 2.0 ** (q - 2), 2.0 ** (q + 3)
    rng = np.random.default_rng(seed)
    radii = np.sqrt(rng.uniform(lo * lo, hi * hi, (2, starts)))
    ang = rng.uniform(0.0, 2.0 * np.pi, (2, starts))
    zeta = np.stack([radii[0] * np.cos(ang[0]), radii[0] * np.sin(ang[0])], axis=1)
    eta = np.stack([radii[1] * np.cos(ang[1]), radii[1] * np.sin(ang[1])], axis=1)
    vals = np.abs(kernel_values(m, q, qhat, zeta, eta)).max(axis=(1, 2))

    scale = 2.0**q

    def objective(x):
        return -np.abs(kernel_values(m, q, qhat, x[None, :2] * scale, x[None, 2:] * scale)).max()

    best_x, best = None, -np.inf
    for i in np.argsort(vals)[::-1][:polish]:
        x0 = np.concatenate([zeta[i], eta[i]]) / scale
        opts = {"xatol": 1e-8, "fatol": 1e-13 * vals[i], "maxiter": 2000}
        res = minimize(objective, x0, method="Nelder-Mead", options=opts)
        if -res.fun > best:
            best_x, best = res.x * scale, float(-res.fun)

    theta = np.linspace(0.0, 2.0 * np.pi, rotations, endpoint=False)
    rot = np.stack([np.cos(theta), -np.sin(theta), np.sin(theta), np.cos(theta)], axis=1).reshape(-1, 2, 2)
    zc = np.rint(rot @ best_x[:2])
    ec = np.rint(rot @ best_x[2:])
    steps = np.arange(-reach, reach + 1)
    off = np.stack(np.meshgrid(steps, steps, steps, steps, indexing="ij"), axis=-1).reshape(-1, 4)
    lz = (zc[:, None, :] + off[None, :, :2]).reshape(-1, 2).astype(np.int64)
    le = (ec[:, None, :] + off[None, :, 2:]).reshape(-1, 2).astype(np.int64)
    lat = np.abs(kernel_values(m, q, qhat, lz, le)).max(axis=(1, 2))
    k = int(np.argmax(lat))
    return KernelPeak(q, m.delta, best_x[:2], best_x[2:], best, float(lat[k]), lz[k], le[k])


def kernel_summary_csv(tables: list[KernelTable]) -> str:
    lines = ["q,max_abs,max_trace,scaling_ratio"]
    for t in tables:
        lines.append(f"{t.q},{t.max_abs!r},{t.max_trace!r},{t.scaling_ratio()!r}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Applying the anti-divergence


def apply_antidivergence(
    f: SparseSpectrum | SpectralField,
    g: SparseSpectrum | SpectralField,
    table: KernelTable,
    budget: int = DEFAULT_MODE_BUDGET,
    keep_output=None,
) -> TensorSpectrum:
    """B^{jl}(xi) = sum_eta K^{jl}(xi - eta, eta) f^(xi - eta) g^(eta) by direct double sum."""
    f = f if isinstance(f, SparseSpectrum) else SparseSpectrum.from_field(f)
    g = g if isinstance(g, SparseSpectrum) else SparseSpectrum.from_field(g)
    if f.size > budget or g.size > budget:
        raise ValueError(
            f"occupied-mode count ({f.size}, {g.size}) exceeds the convolution budget {budget}"
        )
    if f.size == 0 or g.size == 0:
        return TensorSpectrum(np.zeros((0, 2)), np.zeros((0, 2, 2)))
    ia, ib, out = _pair_index(f, g, keep_output)
    zeta, eta = f.modes[ia], g.modes[ib]
    kern = table.evaluate(zeta, eta)
    vals = kern * (f.values[ia] * g.values[ib])[:, None, None]
    modes, summed = _scatter(out, vals)
    return TensorSpectrum(modes, summed)


@dataclass(frozen=True)
class DivergenceFormReport:
    q: int
    qhat: int | None
    vector_residual: float
    scalar_residual: float
    lhs_norm: float

    @property
    def residual(self) -> float:
        return max(self.vector_residual, self.scalar_residual)


def _high_multiplier(m: MultiplierSpec, qhat: int | None, k: np.ndarray) -> np.ndarray:
    """(1 - chi_{<=qhat}^2) m at integer modes (M, 2); returns (M, 2)."""
    sym = m.symbol(k[:, 0], k[:, 1]).T
    if qhat is None:
        return sym
    c = chi_leq(qhat, np.hypot(k[:, 0], k[:, 1]))
    return sym * (1.0 - c * c)[:, None]


def verify_divergence_form(
    theta: SparseSpectrum | SpectralField,
    q: int,
    qhat: int | None,
    m: MultiplierSpec,
    sigma_order: int = DEFAULT_SIGMA_ORDER,
    transition_panels: int = DEFAULT_TRANSITION_PANELS,
    budget: int = DEFAULT_MODE_BUDGET,
) -> DivergenceFormReport:
    """Compare P_{q+1}theta T P_q theta + P_q theta T P_{q+1}theta with div_j B_q^{jl}.

    The left side is formed from the multiplier directly (a physical-space
    product on a padded grid for grid fields, an exact convolution sum for
    sparse ones); the right side goes through the Taylor kernel.  Both the
    vector identity and its divergence are checked; residuals are relative L^2.
    """
    grid = theta.grid if isinstance(theta, SpectralField) else None
    sp = theta if isinstance(theta, SparseSpectrum) else SparseSpectrum.from_field(theta)
    f = sp.filtered(lambda r: chi_band(q + 1, r))
    g = sp.filtered(lambda r: chi_band(q, r))
    if f.size == 0 or g.size == 0:
        raise ValueError("left-hand side vanishes identically: a band of theta is empty")

    table = KernelTable(q, qhat, m, grid.n if grid else 0, sigma_order, transition_panels)
    rhs = apply_antidivergence(f, g, table, budget)
    xi = rhs.modes.astype(float)
    rhs_vec = 1j * np.einsum("mj,mjl->ml", xi, rhs.values)
    rhs_div = 1j * np.einsum("ml,ml->m", xi, rhs_vec)

    if grid is not None:
        lhs_modes, lhs_vec, lhs_div = _lhs_physical(grid, f, g, m, qhat)
    else:
        lhs_modes, lhs_vec, lhs_div = _lhs_sparse(f, g, m, qhat)

    all_modes = np.concatenate([lhs_modes, rhs.modes])
    vals = np.concatenate(
        [
            np.concatenate([lhs_vec, lhs_div[:, None]], axis=1),
            -np.concatenate([rhs_vec, rhs_div[:, None]], axis=1),
        ]
    )
    _, diff = _scatter(all_modes, vals)
    lhs_v = np.sqrt(np.sum(np.abs(lhs_vec) ** 2))
    lhs_d = np.sqrt(np.sum(np.abs(lhs_div) ** 2))
    if lhs_v == 0.0 or lhs_d == 0.0:
        raise ValueError("left-hand side vanishes identically")
    vec_res = float(np.sqrt(np.sum(np.abs(diff[:, :2]) ** 2)) / lhs_v)
    div_res = float(np.sqrt(np.sum(np.abs(diff[:, 2]) ** 2)) / lhs_d)
    return DivergenceFormReport(q, qhat, vec_res, div_res, float(lhs_v * 2 * np.pi))


def _lhs_sparse(f: SparseSpectrum, g: SparseSpectrum, m, qhat):
    ia, ib, out = _pair_index(f, g)
    mf = _high_multiplier(m, qhat, f.modes)[ia]
    mg = _high_multiplier(m, qhat, g.modes)[ib]
    amp = f.values[ia] * g.values[ib]
    vec = (mf + mg) * amp[:, None]
    zeta = f.modes[ia].astype(float)
    eta = g.modes[ib].astype(float)
    div = 1j * (np.sum(mf * eta, axis=1) + np.sum(mg * zeta, axis=1)) * amp
    modes, vals = _scatter(out, np.concatenate([vec, div[:, None]], axis=1))
    return modes, vals[:, :2], vals[:, 2]


def _lhs_physical(grid: Grid, f: SparseSpectrum, g: SparseSpectrum, m, qhat):
    """Physical-space products on a grid large enough to hold the products unaliased."""
    kmax = max(np.max(np.abs(f.modes)), np.max(np.abs(g.modes)))
    size = 16
    while size <= 4 * kmax + 1:
        size *= 2
    big = Grid(size)
    fc, gc = f.to_grid(big), g.to_grid(big)
    sym = m.on_grid(big)
    if qhat is not None:
        sym = sym * (1.0 - chi_leq(qhat, big.kmag) ** 2)
    fp, gp = to_physical_real(fc), to_physical_real(gc)
    vf, vg = to_physical_real(sym * fc), to_physical_real(sym * gc)
    vec = np.stack([fp * vg[l] + gp * vf[l] for l in range(2)])
    gradf = to_physical_real(1j * big.kvec * fc)
    gradg = to_physical_real(1j * big.kvec * gc)
    div = vf[0] * gradg[0] + vf[1] * gradg[1] + vg[0] * gradf[0] + vg[1] * gradf[1]
    vec_hat = to_spectral(vec)
    div_hat = to_spectral(div)
    nz = (np.abs(div_hat) > 0) | np.any(np.abs(vec_hat) > 0, axis=0)
    i0, i1 = np.nonzero(nz)
    modes = np.stack([big.k1d[i0], big.k1d[i1]], axis=1)
    return modes, vec_hat[:, i0, i1].T, div_hat[i0, i1]


# ---------------------------------------------------------------------------
# Trace-free double-divergence form


def calderon_R_symbol(grid: Grid) -> np.ndarray:
    """Symbol of R^{jl} = -delta^{jl} Lap^{-1} + 2 Lap^{-2} d^j d^l, shape (2, 2, n, n)."""
    k = grid.kvec
    r2 = grid.kmag**2
    with np.errstate(divide="ignore", invalid="ignore"):
        inv2 = np.where(r2 > 0, 1.0 / r2, 0.0)
    eye = np.eye(2)[:, :, None, None]
    return eye * inv2 - 2.0 * k[:, None] * k[None, :] * inv2**2


def calderon_R(f: SpectralField) -> SpectralField:
    """Symmetric trace-free tensor R f with div div R f = f for mean-free f."""
    coeffs = calderon_R_symbol(f.grid) * mean_free(f.coeffs)
    return f.with_coeffs(coeffs, rank="tensor")


def double_divergence(grid: Grid, tensor_hat: np.ndarray) -> np.ndarray:
    k = grid.kvec
    return -np.einsum("jxy,lxy,jlxy->xy", k, k, tensor_hat)


@dataclass
class TraceFreeAssembly:
    tensor: SpectralField
    low_part: np.ndarray
    high_part: np.ndarray
    divergence_error: float
    trace_ratio: float
    symmetry_error: float


def assemble_tracefree_antidivergence(
    theta: SpectralField,
    m: MultiplierSpec,
    sigma_order: int = DEFAULT_SIGMA_ORDER,
    transition_panels: int = DEFAULT_TRANSITION_PANELS,
    budget: int = DEFAULT_MODE_BUDGET,
    method: str = "bands",
) -> TraceFreeAssembly:
    """Symmetric trace-free T with div div T = div(theta T theta) on the dealiased lattice.

    theta T theta is telescoped over bands: per band q the high-low and
    low-high pieces P_{q+1}theta T P_{<=q}theta + P_{<=q}theta T P_{q+1}theta
    are sent through R div, and the high-high piece
    P_q theta T P_{q+1}theta + P_{q+1}theta T P_q theta + P_{q+1}theta T P_{q+1}theta
    is written as div_j of the kernel form (the self term with half the kernel);
    its symmetric part enters the tensor directly.

    ``method="calderon"`` sends the whole nonlinearity through R div instead.
    That costs two FFTs rather than an O(M^2) double sum and gives a tensor
    with the same double divergence.
    """
    if m.family != "msqg":
        raise ValueError("the high-high kernel is trace-free only for the mSQG multiplier")
    grid = theta.grid
    mask = grid.dealias_mask
    th = mean_free(theta.coeffs) * mask
    kmag = grid.kmag
    sym = m.on_grid(grid)
    rsym = calderon_R_symbol(grid)
    sparse = SparseSpectrum.from_field(th, grid)
    rmax = float(np.max(sparse.kmag)) if sparse.size else 0.0
    q_top = int(np.ceil(np.log2(max(rmax, 1.0))))

    def keep_output(modes):
        return np.all(3 * np.abs(modes) < grid.n, axis=1)

    low_hat = np.zeros((2, 2, grid.n, grid.n), dtype=complex)
    high_hat = np.zeros((2, 2, grid.n, grid.n), dtype=complex)
    if method == "calderon":
        flux = _flux_vector_hat(grid, th, sym) * mask
        low_hat = rsym * (1j * np.einsum("jxy,jxy->xy", grid.kvec, flux))
        q_top = -3
    elif method != "bands":
        raise ValueError(f"unknown assembly method {method!r}")
    for q in range(-2, q_top + 1):
        hi = chi_band(q + 1, kmag) * th
        if not np.any(hi):
            continue
        lo = chi_leq(q, kmag) * th
        mid = chi_band(q, kmag) * th
        hp, lp = to_physical_real(hi), to_physical_real(lo)
        vh, vl = to_physical_real(sym * hi), to_physical_real(sym * lo)
        vec = np.stack([hp * vl[l] + lp * vh[l] for l in range(2)])
        vec_hat = to_spectral(vec) * mask
        div_hat = 1j * np.einsum("jxy,jxy->xy", grid.kvec, vec_hat)
        low_hat += rsym * div_hat

        table = KernelTable(q, None, m, grid.n, sigma_order, transition_panels)
        f = SparseSpectrum.from_field(hi, grid)
        g = SparseSpectrum.from_field(mid, grid)
        parts = []
        if g.size:
            parts.append((apply_antidivergence(f, g, table, budget, keep_output), 1.0))
        parts.append((apply_antidivergence(f, f, table, budget, keep_output), 0.5))
        for spec, weight in parts:
            grid_vals = spec.to_grid(grid, truncate=True)
            high_hat += weight * 0.5 * (grid_vals + np.swapaxes(grid_vals, 0, 1))

    total = low_hat + high_hat
    target = 1j * np.einsum("jxy,jxy->xy", grid.kvec, _flux_vector_hat(grid, th, sym) * mask)
    dd = double_divergence(grid, total)
    denom = np.sqrt(np.sum(np.abs(target) ** 2))
    err = float(np.sqrt(np.sum(np.abs(dd - target) ** 2)) / denom) if denom > 0 else float(
        np.sqrt(np.sum(np.abs(dd) ** 2))
    )
    phys = to_physical_real(total)
    tmax = float(np.max(np.abs(phys))) if phys.size else 0.0
    trace = float(np.max(np.abs(phys[0, 0] + phys[1, 1])))
    sym_err = float(np.max(np.abs(phys[0, 1] - phys[1, 0])))
    tensor = SpectralField(grid, total, "tensor", True, m.delta)
    return TraceFreeAssembly(
        tensor=tensor,
        low_part=low_hat,
        high_part=high_hat,
        divergence_error=err,
        trace_ratio=trace / tmax if tmax > 0 else 0.0,
        symmetry_error=sym_err,
    )


def _flux_vector_hat(grid: Grid, th: np.ndarray, sym: np.ndarray) -> np.ndarray:
    """Coefficients of theta T theta (vector)."""
    tp = to_physical_real(th)
    vel = to_physical_real(sym * th)
    return to_spectral(tp * vel)


# ---------------------------------------------------------------------------
# Moment lemma


@dataclass
class MomentSeries:
    radii: list[float]
    values: list[float]
    outside_mass: float
    scale: float


def verify_moment_lemma(
    F: SpectralField,
    Q: tuple[float, float, float, float],
    radii: list[float],
    center: tuple[float, float] | None = None,
    chi=None,
    window_radius: float | None = None,
    max_outside_mass: float = 1e-6,
    mass_of: str = "F",
) -> MomentSeries:
    """I(R) = int F^{jl} d_j d_l (chi(x/R) Q(x)) dx for a trace-free tensor field F.

    ``Q = (A, B, C, D)`` encodes A + B x1 + C x2 + D |x|^2 in coordinates centred
    at ``center`` (the box centre by default).  ``chi`` defaults to the
    Littlewood-Paley profile.  Raises when more than ``max_outside_mass`` of
    the L^1 mass lies outside ``window_radius`` (default: the largest R).  The
    mass is that of F itself, or with ``mass_of="source"`` that of
    d_j d_l F^{jl}.  On the torus I(R) depends on F only through that double
    divergence, and a trace-free F built from a concentrated theta keeps
    nonlocal tails even when its source is concentrated.
    """
    grid = F.grid
    chi = chi_leq_0 if chi is None else chi
    c = (np.pi, np.pi) if center is None else center
    x1, x2 = grid.coords
    y1 = (x1 - c[0] + np.pi) % (2 * np.pi) - np.pi
    y2 = (x2 - c[1] + np.pi) % (2 * np.pi) - np.pi
    r = np.hypot(y1, y2)
    f = F.physical()
    absf = np.sqrt(np.sum(f**2, axis=(0, 1)))
    if mass_of == "F":
        dens = absf
    elif mass_of == "source":
        dens = np.abs(to_physical_real(double_divergence(grid, F.coeffs)))
    else:
        raise ValueError(f"mass_of must be 'F' or 'source', got {mass_of!r}")
    total = float(np.sum(dens))
    wr = max(radii) if window_radius is None else window_radius
    outside = float(np.sum(dens[r > wr]) / total) if total > 0 else 0.0
    if outside > max_outside_mass:
        raise ValueError(
            f"{mass_of} mass outside the window is {outside:.3e} > {max_outside_mass:.1e}"
        )
    A, B, C, D = Q
    quad = A + B * y1 + C * y2 + D * r**2
    values = []
    k = grid.kvec
    for R in radii:
        if R >= np.pi:
            raise ValueError("cutoff radius must stay inside the periodic box")
        phi = chi(r / R) * quad
        hess = -k[:, None] * k[None, :] * to_spectral(phi)
        hp = to_physical_real(hess)
        values.append(float(np.sum(f * hp) * grid.cell_area))
    qscale = float(np.max(np.abs(quad[r <= max(radii)])))
    scale = float(np.sum(absf) * grid.cell_area) * max(qscale, 1e-300)
    return MomentSeries(list(map(float, radii)), values, outside, scale)


def concentrated_theta(
    grid: Grid, width: float = 0.23, wavenumber: float = 18.0, seed: int = 0, count: int = 2
) -> SpectralField:
    """Sum of Gaussian wave packets near the box centre with random directions and phases.

    The carrier wavenumber makes the low moments of theta tiny, so the
    periodic images barely interact with the packet.
    """
    rng = np.random.default_rng(seed)
    x1, x2 = grid.coords
    y1, y2 = x1 - np.pi, x2 - np.pi
    vals = np.zeros_like(x1)
    for _ in range(count):
        ang = rng.uniform(0.0, 2.0 * np.pi)
        c = rng.normal(0.0, 0.15, 2)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        env = np.exp(-((y1 - c[0]) ** 2 + (y2 - c[1]) ** 2) / (2.0 * width * width))
        vals += env * np.cos(wavenumber * (np.cos(ang) * y1 + np.sin(ang) * y2) + phase)
    field_ = SpectralField.from_physical(grid, vals)
    coeffs = mean_free(field_.coeffs) * grid.dealias_mask
    return field_.with_coeffs(coeffs)
