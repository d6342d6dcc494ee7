"""Biot-Savart multipliers, the transport nonlinearity and its weak forms.

The weak form is ``B(psi, theta) = int grad_l psi * theta * T^l theta dx``, which
equals ``-int psi * T^l theta * grad_l theta dx`` for incompressible velocities.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np

from .function_spaces import hessian_seminorms, sobolev_norm_direct
from .spectral_core import (
    Grid,
    SpectralField,
    chi_band,
    chi_leq,
    fractional_laplacian_symbol,
    support_radius,
    to_physical_real,
    to_spectral,
)

EPS = np.array([[0.0, 1.0], [-1.0, 0.0]])  # Levi-Civita symbol, EPS[0, 1] = eps^{12} = 1

Family = Literal["msqg", "custom", "gradient", "explicit"]


def _polar_angle(k1, k2):
    return np.arctan2(k2, k1)


@dataclass(frozen=True)
class MultiplierSpec:
    """Homogeneous vector multiplier of degree -1 + 2 delta.

    Families:

    * ``msqg``: ``sign * i eps^{la} xi_a |xi|^{2(-1+delta)}``.
    * ``custom``: ``H(omega) * M^l(xi)`` with ``M`` the mSQG symbol, ``omega`` the
      polar angle, ``H`` a smooth (possibly complex) angular profile and ``dH``
      its derivative.
    * ``gradient``: ``sign * i xi^l |xi|^{2(-1+delta)}``, a compressible control.
    * ``explicit``: caller supplies ``symbol_fn(k1, k2)`` and ``grad_fn(k1, k2)``.
    """

    delta: float = 0.5
    family: Family = "msqg"
    sign: int = 1
    H: Callable | None = None
    dH: Callable | None = None
    symbol_fn: Callable | None = None
    grad_fn: Callable | None = None
    name: str = ""

    def __post_init__(self) -> None:
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")
        if self.delta > 4:
            raise ValueError("delta above 4 overflows |k|^{2(-1+delta)} on large grids")
        if self.sign not in (1, -1):
            raise ValueError("sign must be +1 or -1")
        if self.family == "custom" and (self.H is None or self.dH is None):
            raise ValueError("custom family needs H and dH")
        if self.family == "explicit" and (self.symbol_fn is None or self.grad_fn is None):
            raise ValueError("explicit family needs symbol_fn and grad_fn")
        if self.family not in ("msqg", "custom", "gradient", "explicit"):
            raise ValueError(f"unknown multiplier family {self.family!r}")

    @property
    def degree(self) -> float:
        return -1.0 + 2.0 * self.delta

    @property
    def label(self) -> str:
        return self.name or self.family

    def symbol(self, k1, k2) -> np.ndarray:
        """m^l(k1, k2) with shape (2,) + k1.shape; zero at the origin."""
        k1 = np.asarray(k1, dtype=float)
        k2 = np.asarray(k2, dtype=float)
        r2 = k1 * k1 + k2 * k2
        nz = r2 > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            pw = np.where(nz, r2 ** (-1.0 + self.delta), 0.0)
        if self.family == "explicit":
            with np.errstate(divide="ignore", invalid="ignore"):
                out = np.asarray(self.symbol_fn(k1, k2), dtype=complex)
            return np.where(nz, out, 0.0)
        if self.family == "gradient":
            out = np.stack([k1 * pw, k2 * pw]).astype(complex)
            return self.sign * 1j * out
        msqg = self.sign * 1j * np.stack([k2 * pw, -k1 * pw])
        if self.family == "msqg":
            return msqg
        h = np.asarray(self.H(_polar_angle(k1, k2)), dtype=complex)
        return np.where(nz, h * msqg, 0.0)

    def grad(self, k1, k2) -> np.ndarray:
        """d_j m^l with shape (2, 2) + k1.shape indexed [j, l]."""
        k1 = np.asarray(k1, dtype=float)
        k2 = np.asarray(k2, dtype=float)
        r2 = k1 * k1 + k2 * k2
        nz = r2 > 0
        p = -1.0 + self.delta
        with np.errstate(divide="ignore", invalid="ignore"):
            pw = np.where(nz, r2**p, 0.0)
            pw1 = np.where(nz, 2.0 * p * r2 ** (p - 1.0), 0.0)
        if self.family == "explicit":
            with np.errstate(divide="ignore", invalid="ignore"):
                out = np.asarray(self.grad_fn(k1, k2), dtype=complex)
            return np.where(nz, out, 0.0)
        k = (k1, k2)
        out = np.empty((2, 2) + k1.shape, dtype=complex)
        if self.family == "gradient":
            for j in range(2):
                for l in range(2):
                    out[j, l] = (1.0 if j == l else 0.0) * pw + k[l] * k[j] * pw1
            return self.sign * 1j * out
        perp = (k2, -k1)  # eps^{la} xi_a
        for j in range(2):
            for l in range(2):
                out[j, l] = EPS[l, j] * pw + perp[l] * k[j] * pw1
        out = self.sign * 1j * out
        if self.family == "msqg":
            return out
        omega = _polar_angle(k1, k2)
        h = np.asarray(self.H(omega), dtype=complex)
        dh = np.asarray(self.dH(omega), dtype=complex)
        with np.errstate(divide="ignore", invalid="ignore"):
            domega = (np.where(nz, -k2 / r2, 0.0), np.where(nz, k1 / r2, 0.0))
        msqg = self.sign * 1j * np.stack([k2 * pw, -k1 * pw])
        for j in range(2):
            for l in range(2):
                out[j, l] = h * out[j, l] + dh * domega[j] * msqg[l]
        return np.where(nz, out, 0.0)

    def on_grid(self, grid: Grid) -> np.ndarray:
        return self.symbol(grid.kx, grid.ky) * grid.nyquist_mask

    def is_odd(self, samples: int = 64) -> bool:
        k1, k2 = _probe_points(samples)
        a = self.symbol(k1, k2)
        b = self.symbol(-k1, -k2)
        return bool(np.allclose(b, -a, rtol=1e-12, atol=1e-14 * np.max(np.abs(a))))

    def is_even(self, samples: int = 64) -> bool:
        k1, k2 = _probe_points(samples)
        a = self.symbol(k1, k2)
        b = self.symbol(-k1, -k2)
        return bool(np.allclose(b, a, rtol=1e-12, atol=1e-14 * np.max(np.abs(a))))

    def is_incompressible(self, samples: int = 64) -> bool:
        k1, k2 = _probe_points(samples)
        a = self.symbol(k1, k2)
        dot = k1 * a[0] + k2 * a[1]
        scale = np.max(np.abs(a) * np.hypot(k1, k2))
        return bool(np.max(np.abs(dot)) <= 1e-12 * scale)

    def describe(self) -> dict:
        return {"family": self.family, "delta": self.delta, "sign": self.sign, "name": self.label}


def _probe_points(samples: int):
    ang = np.linspace(0.0, 2 * np.pi, samples, endpoint=False) + 0.1234
    rad = 1.0 + 3.0 * (np.arange(samples) % 7) / 7.0
    return rad * np.cos(ang), rad * np.sin(ang)


def msqg(delta: float, sign: int = 1) -> MultiplierSpec:
    return MultiplierSpec(delta=delta, family="msqg", sign=sign)


def gradient_control(delta: float) -> MultiplierSpec:
    return MultiplierSpec(delta=delta, family="gradient", name="gradient-control")


def custom_angular(delta: float, H: Callable, dH: Callable, name: str = "custom") -> MultiplierSpec:
    return MultiplierSpec(delta=delta, family="custom", H=H, dH=dH, name=name)


# ---------------------------------------------------------------------------
# Fields and products


def _coeffs(f: SpectralField | np.ndarray) -> np.ndarray:
    return f.coeffs if isinstance(f, SpectralField) else np.asarray(f)


def mean_free(coeffs: np.ndarray) -> np.ndarray:
    out = np.array(coeffs, dtype=complex)
    out[..., 0, 0] = 0.0
    return out


def biot_savart(theta: SpectralField, m: MultiplierSpec) -> SpectralField:
    """Velocity T^l theta as a vector field."""
    if theta.rank != "scalar":
        raise ValueError("Biot-Savart law acts on scalar fields")
    coeffs = m.on_grid(theta.grid) * theta.coeffs
    coeffs[..., 0, 0] = 0.0
    return theta.with_coeffs(coeffs, rank="vector")


def nonlinearity_coeffs(
    grid: Grid, theta_hat: np.ndarray, m: MultiplierSpec, dealias: bool = True, sym=None
) -> np.ndarray:
    """Coefficients of T^l theta grad_l theta by a physical-space product."""
    th = theta_hat * grid.dealias_mask if dealias else theta_hat
    sym = m.on_grid(grid) if sym is None else sym
    vel = to_physical_real(sym * th)
    grad = to_physical_real(1j * grid.kvec * th)
    prod = vel[0] * grad[0] + vel[1] * grad[1]
    out = to_spectral(prod) * grid.nyquist_mask
    if dealias:
        out = out * grid.dealias_mask
    # the product is a divergence, so its mean vanishes identically
    out[0, 0] = 0.0
    return out


def nonlinearity(theta: SpectralField, m: MultiplierSpec, dealias: bool = True) -> SpectralField:
    """T^l theta grad_l theta as a scalar field."""
    return theta.with_coeffs(nonlinearity_coeffs(theta.grid, theta.coeffs, m, dealias))


def _prep(grid: Grid, *fields: np.ndarray) -> list[np.ndarray]:
    """Dealias and strip the mean so cubic quadrature is exact."""
    return [mean_free(f) * grid.dealias_mask for f in fields]


def bilinear_form_direct(psi: SpectralField, theta: SpectralField, m: MultiplierSpec) -> float:
    """int grad_l psi * theta * T^l theta dx by dealiased quadrature."""
    grid = theta.grid
    ps, th = _prep(grid, _coeffs(psi), _coeffs(theta))
    gpsi = to_physical_real(1j * grid.kvec * ps)
    t = to_physical_real(th)
    vel = to_physical_real(m.on_grid(grid) * th)
    integrand = t * (gpsi[0] * vel[0] + gpsi[1] * vel[1])
    return float(np.sum(integrand) * grid.cell_area)


def bilinear_form_transport(psi: SpectralField, theta: SpectralField, m: MultiplierSpec) -> float:
    """-int psi * T^l theta * grad_l theta dx, the pre-integration-by-parts form."""
    grid = theta.grid
    ps, th = _prep(grid, _coeffs(psi), _coeffs(theta))
    p = to_physical_real(ps)
    vel = to_physical_real(m.on_grid(grid) * th)
    g = to_physical_real(1j * grid.kvec * th)
    return float(-np.sum(p * (vel[0] * g[0] + vel[1] * g[1])) * grid.cell_area)


def trilinear_form(
    psi: SpectralField, theta: SpectralField, phi: SpectralField, m: MultiplierSpec
) -> float:
    """int grad_l psi (theta T^l phi + phi T^l theta) dx."""
    grid = theta.grid
    ps, th, ph = _prep(grid, _coeffs(psi), _coeffs(theta), _coeffs(phi))
    sym = m.on_grid(grid)
    gpsi = to_physical_real(1j * grid.kvec * ps)
    t, f = to_physical_real(th), to_physical_real(ph)
    vt, vf = to_physical_real(sym * th), to_physical_real(sym * ph)
    integrand = gpsi[0] * (t * vf[0] + f * vt[0]) + gpsi[1] * (t * vf[1] + f * vt[1])
    return float(np.sum(integrand) * grid.cell_area)


# ---------------------------------------------------------------------------
# Paraproduct decomposition


@dataclass
class ParaproductBreakdown:
    LL: float
    HL: float
    LH: float
    HH: float
    total: float
    direct: float
    contributions: list[tuple[str, int, int, float]] = field(default_factory=list)

    @property
    def relative_mismatch(self) -> float:
        return abs(self.total - self.direct) / max(abs(self.direct), 1e-300)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["kind", "k", "q", "value"])
        for kind, k, q, value in self.contributions:
            writer.writerow([kind, k, q, repr(float(value))])
        return buf.getvalue()


def _pair(grid: Grid, a_hat: np.ndarray, b_hat: np.ndarray, mask: np.ndarray) -> float:
    """int a . b dx over Fourier modes in ``mask`` (a, b real vector fields)."""
    if not np.any(mask):
        return 0.0
    val = np.sum(a_hat[:, mask] * np.conj(b_hat[:, mask]))
    return float((2 * np.pi) ** 2 * val.real)


def paraproduct_decompose(
    psi: SpectralField, theta: SpectralField, m: MultiplierSpec
) -> ParaproductBreakdown:
    """Split B(psi, theta) by relative frequency of the three factors.

    For each band k of grad psi the product theta T theta is telescoped as
    P_{<=k-2}theta T P_{<=k-2}theta plus, for q >= k-3, the increments
    HL_q + LH_q + Q_q with

    * HL_q = P_{q+1}theta T P_{<=q}theta
    * LH_q = P_{<=q}theta T P_{q+1}theta
    * Q_q  = P_q theta T P_{q+1}theta + P_{q+1}theta T P_q theta + P_{q+1}theta T P_{q+1}theta

    The low-low remainder pairs P_k grad psi against a product whose Fourier
    support lies strictly inside |xi| < 2^{k-1}, so its pairing is an empty sum.
    Every pairing is restricted to the Fourier support of both factors.  Since
    P_q = P_{<=q+1} - P_{<=q}, the low factor in HL and LH is P_{<=q}, which makes
    the split an exact telescoping of theta T theta.
    """
    grid = theta.grid
    ps, th = _prep(grid, _coeffs(psi), _coeffs(theta))
    sym = m.on_grid(grid)
    kmag = grid.kmag
    gpsi_hat = 1j * grid.kvec * ps

    r_theta = support_radius(th, kmag)
    r_psi = support_radius(ps, kmag)
    if not np.isfinite(r_theta) or not np.isfinite(r_psi):
        return ParaproductBreakdown(0.0, 0.0, 0.0, 0.0, 0.0, bilinear_form_direct(psi, theta, m))

    k_top = max(0, int(math.ceil(math.log2(r_psi))) + 1)
    q_top = max(0, int(math.ceil(math.log2(r_theta))))

    cache_leq: dict[int, np.ndarray] = {}
    cache_band: dict[int, np.ndarray] = {}

    def leq(q: int) -> np.ndarray:
        if q not in cache_leq:
            cache_leq[q] = chi_leq(q, kmag) * th
        return cache_leq[q]

    def band(q: int) -> np.ndarray:
        if q not in cache_band:
            cache_band[q] = chi_band(q, kmag) * th
        return cache_band[q]

    phys_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def phys(key: tuple, coeffs: np.ndarray):
        if key not in phys_cache:
            phys_cache[key] = (to_physical_real(coeffs), to_physical_real(sym * coeffs))
        return phys_cache[key]

    def product(fkey, f, gkey, g):
        """Spectrum of f * T g and its support radius bound."""
        fp, _ = phys(fkey, f)
        _, gv = phys(gkey, g)
        radius = support_radius(f, kmag) + support_radius(g, kmag)
        return to_spectral(fp * gv), radius

    contributions: list[tuple[str, int, int, float]] = []
    sums = {"LL": [], "HL": [], "LH": [], "HH": []}
    prod_cache: dict = {}

    def product_cached(name, fkey, f, gkey, g):
        key = (name, fkey, gkey)
        if key not in prod_cache:
            prod_cache[key] = product(fkey, f, gkey, g)
        return prod_cache[key]

    for k in range(0, k_top + 1):
        pk = chi_band(k, kmag)
        g_k = gpsi_hat * pk
        supp_k = np.any(g_k != 0, axis=0)
        if not np.any(supp_k):
            continue

        low = leq(k - 2)
        prod_hat, radius = product_cached("LL", ("leq", k - 2), low, ("leq", k - 2), low)
        val = _pair(grid, g_k, prod_hat, supp_k & (kmag <= radius))
        contributions.append(("LL", k, k - 2, val))
        sums["LL"].append(val)

        for q in range(k - 3, q_top + 1):
            hi = band(q + 1)
            if not np.any(hi):
                continue
            lo = leq(q)
            mid = band(q)
            terms = {
                "HL": [product_cached("x", ("band", q + 1), hi, ("leq", q), lo)],
                "LH": [product_cached("x", ("leq", q), lo, ("band", q + 1), hi)],
                "HH": [
                    product_cached("x", ("band", q), mid, ("band", q + 1), hi),
                    product_cached("x", ("band", q + 1), hi, ("band", q), mid),
                    product_cached("x", ("band", q + 1), hi, ("band", q + 1), hi),
                ],
            }
            for kind, prods in terms.items():
                val = 0.0
                for prod_hat, radius in prods:
                    val += _pair(grid, g_k, prod_hat, supp_k & (kmag <= radius))
                contributions.append((kind, k, q, val))
                sums[kind].append(val)

    parts = {kind: math.fsum(vals) for kind, vals in sums.items()}
    total = math.fsum(v for _, _, _, v in contributions)
    return ParaproductBreakdown(
        LL=parts["LL"],
        HL=parts["HL"],
        LH=parts["LH"],
        HH=parts["HH"],
        total=total,
        direct=bilinear_form_direct(psi, theta, m),
        contributions=contributions,
    )


# ---------------------------------------------------------------------------
# Bound ratio and Hamiltonian flux


def bound_ratio(
    psi: SpectralField,
    theta: SpectralField,
    m: MultiplierSpec,
    norm_kind: Literal["W2inf", "W2inf_tracefree"] = "W2inf_tracefree",
) -> float:
    """|B(psi, theta)| / (seminorm(psi) * ||theta||^2_{H^{-1+delta}})."""
    w2, w2tf = hessian_seminorms(psi)
    semi = {"W2inf": w2, "W2inf_tracefree": w2tf}[norm_kind]
    hnorm = sobolev_norm_direct(theta, -1.0 + m.delta)
    denom = semi * hnorm**2
    if denom < 1e-300:
        raise ZeroDivisionError("bound ratio denominator vanishes")
    return abs(bilinear_form_direct(psi, theta, m)) / denom


@dataclass(frozen=True)
class FluxReport:
    qhat: int
    flux: float
    low_velocity_part: float
    high_velocity_part: float


def truncated_stream(grid: Grid, theta_hat: np.ndarray, qhat: int, delta: float) -> np.ndarray:
    """Coefficients of P_{<=qhat}^2 (-Laplacian)^{-1+delta} theta."""
    lap = fractional_laplacian_symbol(grid, 2.0 * (-1.0 + delta))
    return chi_leq(qhat, grid.kmag) ** 2 * lap * mean_free(theta_hat)


def hamiltonian_flux(theta: SpectralField, qhat: int, m: MultiplierSpec) -> FluxReport:
    """B(psi_qhat, theta) with psi_qhat = P_{<=qhat}^2 (-Laplacian)^{-1+delta} theta.

    The velocity is split into the P_{<=qhat}^2 part, whose contribution vanishes
    pointwise for mSQG, and the remainder; both pieces are reported.
    """
    grid = theta.grid
    th = mean_free(theta.coeffs) * grid.dealias_mask
    ps = truncated_stream(grid, th, qhat, m.delta)
    sym = m.on_grid(grid)
    low = chi_leq(qhat, grid.kmag) ** 2
    gpsi = to_physical_real(1j * grid.kvec * ps)
    t = to_physical_real(th)
    v_low = to_physical_real(sym * low * th)
    v_high = to_physical_real(sym * (1.0 - low) * th)
    low_part = float(np.sum(t * (gpsi[0] * v_low[0] + gpsi[1] * v_low[1])) * grid.cell_area)
    high_part = float(np.sum(t * (gpsi[0] * v_high[0] + gpsi[1] * v_high[1])) * grid.cell_area)
    return FluxReport(qhat, low_part + high_part, low_part, high_part)


# ---------------------------------------------------------------------------
# Random fields


def random_field(
    grid: Grid,
    seed: int,
    scale: float = 4.0,
    spectrum: Literal["gaussian", "exponential"] = "gaussian",
    delta: float = 0.0,
) -> SpectralField:
    """Random real field with mode std exp(-|k|^2/(2 scale^2)) or exp(-|k|/scale).

    Hermitian-symmetrized, mean removed, Nyquist removed, unit L^2 norm.
    """
    rng = np.random.default_rng(seed)
    re = rng.standard_normal((grid.n, grid.n))
    im = rng.standard_normal((grid.n, grid.n))
    if spectrum == "gaussian":
        std = np.exp(-(grid.kmag**2) / (2.0 * scale**2))
    elif spectrum == "exponential":
        std = np.exp(-grid.kmag / scale)
    else:
        raise ValueError(f"unknown spectrum {spectrum!r}")
    coeffs = (re + 1j * im) * std * grid.nyquist_mask
    coeffs = 0.5 * (coeffs + np.conj(grid.reflect(coeffs)))
    coeffs[0, 0] = 0.0
    norm = float(np.sqrt((2 * np.pi) ** 2 * np.sum(np.abs(coeffs) ** 2)))
    if norm == 0.0:
        raise ValueError("random field vanished; spectrum scale too small")
    return SpectralField(grid, coeffs / norm, "scalar", True, delta)


def band_limited_random(grid: Grid, seed: int, kmax: float, delta: float = 0.0) -> SpectralField:
    """Unit-norm random real field with flat spectrum on 0 < |k| <= kmax."""
    rng = np.random.default_rng(seed)
    coeffs = rng.standard_normal((grid.n, grid.n)) + 1j * rng.standard_normal((grid.n, grid.n))
    coeffs = coeffs * (grid.kmag <= kmax) * grid.nyquist_mask
    coeffs = 0.5 * (coeffs + np.conj(grid.reflect(coeffs)))
    coeffs[0, 0] = 0.0
    norm = float(np.sqrt((2 * np.pi) ** 2 * np.sum(np.abs(coeffs) ** 2)))
    return SpectralField(grid, coeffs / norm, "scalar", True, delta)


# ---------------------------------------------------------------------------
# Named non-mSQG multipliers used as controls


def even_cosine(delta: float) -> MultiplierSpec:
    """i cos(omega) times the mSQG symbol: real, even and incompressible.

    The extra factor i keeps the symbol real-valued so that it maps real
    fields to real fields.
    """
    return custom_angular(
        delta,
        lambda w: 1j * np.cos(w),
        lambda w: -1j * np.sin(w),
        name="even-cosine",
    )


def _exceptional_symbol(k1, k2):
    r = np.sqrt(k1 * k1 + k2 * k2)
    return np.stack([k2**4 / r**3, k1 * k2 * (2 * k1 * k1 + k2 * k2) / r**3]).astype(complex)


def _exceptional_grad(k1, k2):
    r5 = np.sqrt(k1 * k1 + k2 * k2) ** 5
    off = k2**3 * (4 * k1 * k1 + k2 * k2) / r5
    return np.array(
        [[-3 * k1 * k2**4 / r5, off], [off, k1**3 * (2 * k1 * k1 - k2 * k2) / r5]], dtype=complex
    )


def exceptional_even() -> MultiplierSpec:
    """m = grad F with F(xi) = xi_1 xi_2^2 / |xi|: even and homogeneous of degree one."""
    return MultiplierSpec(
        delta=1.0,
        family="explicit",
        symbol_fn=_exceptional_symbol,
        grad_fn=_exceptional_grad,
        name="gradient-of-xi1-xi2sq-over-r",
    )
