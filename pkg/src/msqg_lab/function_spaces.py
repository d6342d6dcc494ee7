"""Homogeneous Sobolev, Besov and L^p norms plus Hessian sup seminorms."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .spectral_core import (
    TWO_PI,
    SpectralField,
    band_range,
    chi_band,
    fractional_laplacian_symbol,
    to_physical_real,
    upsample,
)

NormKind = Literal["Hs_dyadic", "Hs_direct", "Besov", "Lp", "W2inf", "W2inf_tracefree"]

BOX_AREA = TWO_PI**2


@dataclass(frozen=True)
class NormReport:
    value: float
    kind: NormKind
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.value >= 0.0:
            raise ValueError(f"norm value must be nonnegative, got {self.value}")


def _scalar_coeffs(f: SpectralField | np.ndarray) -> np.ndarray:
    coeffs = f.coeffs if isinstance(f, SpectralField) else np.asarray(f)
    if coeffs.ndim != 2:
        raise ValueError("expected scalar field coefficients")
    return coeffs


def _mean_free(coeffs: np.ndarray) -> np.ndarray:
    out = np.array(coeffs, dtype=complex)
    out[0, 0] = 0.0
    return out


def l2_norm_coeffs(coeffs: np.ndarray) -> float:
    """L^2 norm over the box from Fourier coefficients (Plancherel)."""
    return float(np.sqrt(BOX_AREA * np.sum(np.abs(coeffs) ** 2)))


def sobolev_norm_direct(f: SpectralField, s: float) -> float:
    """||Lambda^s f||_{L^2}, zero mode ignored."""
    coeffs = _mean_free(_scalar_coeffs(f))
    sym = fractional_laplacian_symbol(f.grid, s)
    return l2_norm_coeffs(sym * coeffs)


def sobolev_norm_dyadic(f: SpectralField, s: float) -> float:
    """(sum_q (2^{sq} ||P_q f||_{L^2})^2)^{1/2} over the bands that meet the lattice."""
    coeffs = _mean_free(_scalar_coeffs(f))
    total = 0.0
    for q in band_range(f.grid):
        band = l2_norm_coeffs(chi_band(q, f.grid.kmag) * coeffs)
        total += (2.0 ** (s * q) * band) ** 2
    return float(np.sqrt(total))


def lp_norm(f: SpectralField | np.ndarray, p: float, upsample_factor: int = 2) -> float:
    """L^p norm by quadrature on a zero-padded finer grid; ``p = inf`` gives the max."""
    coeffs = f.coeffs if isinstance(f, SpectralField) else np.asarray(f)
    vals = to_physical_real(upsample(coeffs, upsample_factor))
    if np.isinf(p):
        return float(np.max(np.abs(vals))) if vals.size else 0.0
    m = vals.shape[-1]
    area = (TWO_PI / m) ** 2
    return float((np.sum(np.abs(vals) ** p) * area) ** (1.0 / p))


def besov_norm(f: SpectralField, alpha: float, p: float) -> float:
    """sup_q 2^{alpha q} ||P_q f||_{L^p} over bands with 2^{q-1} <= n/2."""
    if p not in (2, 3, np.inf):
        raise ValueError(f"Besov norm supports p in {{2, 3, inf}}, got {p}")
    coeffs = _mean_free(_scalar_coeffs(f))
    n = f.grid.n
    best = 0.0
    for q in band_range(f.grid):
        if 2.0 ** (q - 1) > n / 2:
            break
        band = chi_band(q, f.grid.kmag) * coeffs
        if not np.any(band):
            continue
        best = max(best, 2.0 ** (alpha * q) * lp_norm(band, p))
    return best


def hessian_coeffs(f: SpectralField) -> np.ndarray:
    """Coefficients of the Hessian d_j d_l f, shape (2, 2, n, n)."""
    k = f.grid.kvec
    return -k[:, None] * k[None, :] * _scalar_coeffs(f)


def tracefree_hessian_coeffs(f: SpectralField) -> np.ndarray:
    hess = hessian_coeffs(f)
    half_lap = 0.5 * (hess[0, 0] + hess[1, 1])
    out = hess.copy()
    out[0, 0] -= half_lap
    out[1, 1] -= half_lap
    return out


def hessian_seminorms(psi: SpectralField, upsample_factor: int = 2) -> tuple[float, float]:
    """(max_x max_{j,l} |d_j d_l psi|, same for the trace-free Hessian)."""
    full = hessian_coeffs(psi)
    tf = tracefree_hessian_coeffs(psi)
    w2 = max(lp_norm(full[j, l], np.inf, upsample_factor) for j in range(2) for l in range(2))
    w2tf = max(lp_norm(tf[j, l], np.inf, upsample_factor) for j in range(2) for l in range(2))
    return w2, w2tf


def norm_report(f: SpectralField, kind: NormKind, **params) -> NormReport:
    """Dispatch to the named norm and wrap the value with its parameters."""
    if kind == "Hs_dyadic":
        value = sobolev_norm_dyadic(f, params["s"])
    elif kind == "Hs_direct":
        value = sobolev_norm_direct(f, params["s"])
    elif kind == "Besov":
        value = besov_norm(f, params["alpha"], params["p"])
    elif kind == "Lp":
        value = lp_norm(f, params["p"])
    elif kind == "W2inf":
        value = hessian_seminorms(f)[0]
    elif kind == "W2inf_tracefree":
        value = hessian_seminorms(f)[1]
    else:
        raise ValueError(f"unknown norm kind {kind!r}")
    return NormReport(value, kind, dict(params))
