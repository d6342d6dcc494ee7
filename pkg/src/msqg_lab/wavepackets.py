"""Geometric-optics wave packets and the limit functionals they extract.

A packet is Theta = lambda^power P_lambda(exp(i lambda xi_bar . x) lambda^{1/2} phi(lambda^{1/2} x))
centred in the box, with P_lambda a smooth projector onto |xi - lambda xi_bar| <= fraction * lambda
and phi normalized so that int phi^2 = 1.  The real field is theta = Theta + conj(Theta).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .msqg_ops import MultiplierSpec, bilinear_form_direct, bilinear_form_transport, msqg
from .spectral_core import Grid, SpectralField, chi_leq_0, to_physical_real, to_spectral

TAIL_MASS_LIMIT = 1e-10
CENTER = (math.pi, math.pi)

VARIANT_POWERS = {
    "sharpness": lambda delta: 1.0 - delta,
    "halfnorm": lambda delta: 0.5 - delta,
    "compressible": lambda delta: -delta,
}


@dataclass(frozen=True)
class WavePacketSpec:
    lam: float
    direction: tuple[float, float] = (1.0, 0.0)
    variant: str = "sharpness"
    delta: float = 0.5
    envelope: str = "gaussian"
    width: float = 2.6
    window_fraction: float = 1.0 / 3.0

    def __post_init__(self) -> None:
        if self.lam < 8:
            raise ValueError("lambda must be at least 8")
        if self.variant not in VARIANT_POWERS:
            raise ValueError(f"unknown packet variant {self.variant!r}")
        if self.envelope not in ("gaussian", "bump"):
            raise ValueError(f"unknown envelope {self.envelope!r}")
        norm = math.hypot(*self.direction)
        if abs(norm - 1.0) > 1e-12:
            raise ValueError("direction must be a unit vector")
        if not 0 < self.window_fraction < 1:
            raise ValueError("window fraction must lie in (0, 1)")

    @property
    def amplitude_power(self) -> float:
        return VARIANT_POWERS[self.variant](self.delta)

    def tail_mass(self) -> float:
        """Share of int phi_lambda^2 lying outside the disc of radius pi about the centre."""
        if self.envelope == "bump":
            return 0.0 if self.width / math.sqrt(self.lam) < math.pi else 1.0
        return math.exp(-self.lam * math.pi**2 / self.width**2)


def grid_for(spec: WavePacketSpec, minimum: int = 64) -> Grid:
    """Smallest power-of-two grid keeping the projected packet inside the dealiased disc."""
    n = minimum
    while spec.lam * (1.0 + spec.window_fraction) >= n / 3.0:
        n *= 2
    return Grid(n)


def _centred(grid: Grid) -> tuple[np.ndarray, np.ndarray]:
    x1, x2 = grid.coords
    return x1 - CENTER[0], x2 - CENTER[1]


def envelope_values(spec: WavePacketSpec, grid: Grid) -> np.ndarray:
    """lambda^{1/2} phi(lambda^{1/2} x) on the grid."""
    y1, y2 = _centred(grid)
    s = math.sqrt(spec.lam)
    r2 = spec.lam * (y1**2 + y2**2)
    w = spec.width
    if spec.envelope == "gaussian":
        return s / (math.sqrt(math.pi) * w) * np.exp(-r2 / (2.0 * w * w))
    t = r2 / (w * w)
    with np.errstate(divide="ignore", over="ignore"):
        bump = np.where(t < 1.0, np.exp(-1.0 / (1.0 - np.minimum(t, 1.0 - 1e-300))), 0.0)
    vals = s * bump
    norm2 = float(np.sum(vals**2) * grid.cell_area)
    return vals / math.sqrt(norm2)


def window_symbol(spec: WavePacketSpec, grid: Grid) -> np.ndarray:
    d = spec.direction
    dist = np.hypot(grid.kx - spec.lam * d[0], grid.ky - spec.lam * d[1])
    return chi_leq_0(dist / (spec.window_fraction * spec.lam))


def make_packet(spec: WavePacketSpec, grid: Grid | None = None) -> tuple[SpectralField, SpectralField]:
    """(Theta, conj(Theta)) as complex spectral fields."""
    grid = grid_for(spec) if grid is None else grid
    if spec.tail_mass() > TAIL_MASS_LIMIT:
        raise ValueError(
            f"packet envelope leaves {spec.tail_mass():.2e} of its mass outside the box "
            f"(limit {TAIL_MASS_LIMIT:.0e}); raise lambda or narrow the envelope"
        )
    if spec.lam * (1.0 + spec.window_fraction) >= grid.n / 3.0:
        raise ValueError(f"lambda={spec.lam} with window {spec.window_fraction} does not fit an n={grid.n} grid")
    y1, y2 = _centred(grid)
    d = spec.direction
    phase = np.exp(1j * spec.lam * (d[0] * y1 + d[1] * y2))
    raw = spec.lam**spec.amplitude_power * phase * envelope_values(spec, grid)
    coeffs = to_spectral(raw) * window_symbol(spec, grid) * grid.nyquist_mask
    Theta = SpectralField(grid, coeffs, "scalar", False, spec.delta)
    partner = SpectralField(grid, np.conj(grid.reflect(coeffs)), "scalar", False, spec.delta)
    return Theta, partner


def real_packet(spec: WavePacketSpec, grid: Grid | None = None) -> SpectralField:
    Theta, partner = make_packet(spec, grid)
    return SpectralField(Theta.grid, Theta.coeffs + partner.coeffs, "scalar", True, spec.delta)


# ---------------------------------------------------------------------------
# Test functions psi concentrated at the box centre


PSI_WIDTH = 0.44

BUILTIN_PSI: dict[str, Callable[[np.ndarray, np.ndarray], np.ndarray]] = {
    "x1x2": lambda y1, y2: y1 * y2,
    "x1": lambda y1, y2: y1,
    "x2": lambda y1, y2: y2,
    "one": lambda y1, y2: np.ones_like(y1),
    "x1sq-x2sq": lambda y1, y2: 0.5 * (y1**2 - y2**2),
}


def make_psi(name: str, grid: Grid, width: float = PSI_WIDTH) -> SpectralField:
    """Builtin polynomial times a Gaussian bump of the given width, centred in the box."""
    if name not in BUILTIN_PSI:
        raise ValueError(f"unknown builtin psi {name!r}; choose from {sorted(BUILTIN_PSI)}")
    y1, y2 = _centred(grid)
    vals = BUILTIN_PSI[name](y1, y2) * np.exp(-(y1**2 + y2**2) / (2.0 * width**2))
    return SpectralField.from_physical(grid, vals)


@dataclass(frozen=True)
class Jet:
    """Value, gradient and Hessian of psi at the box centre."""

    value: float
    grad: np.ndarray
    hess: np.ndarray


def jet_at_centre(psi: SpectralField) -> Jet:
    """Spectral derivatives sampled at the centre, which is a grid node."""
    grid = psi.grid
    i = grid.n // 2
    k = grid.kvec
    c = psi.coeffs
    g = to_physical_real(1j * k * c)[:, i, i]
    h = to_physical_real(-k[:, None] * k[None, :] * c)[:, :, i, i]
    return Jet(float(psi.physical()[i, i]), np.asarray(g), np.asarray(h))


# ---------------------------------------------------------------------------
# Limit targets


def _at(m: MultiplierSpec, xi: np.ndarray):
    sym = m.symbol(np.array([xi[0]]), np.array([xi[1]]))[:, 0]
    grad = m.grad(np.array([xi[0]]), np.array([xi[1]]))[:, :, 0]
    return sym, grad


def odd_target(m: MultiplierSpec, xi_bar, jet: Jet) -> float:
    """i d_j m^l(xi_bar) d_j d_l psi(0)."""
    _, grad = _at(m, np.asarray(xi_bar, dtype=float))
    return float(np.real(1j * np.sum(grad * jet.hess)))


def even_incompressible_target(m: MultiplierSpec, xi_bar, jet: Jet) -> float:
    """grad_l psi(0) (m^l(xi_bar) + m^l(-xi_bar))."""
    xi = np.asarray(xi_bar, dtype=float)
    plus, _ = _at(m, xi)
    minus, _ = _at(m, -xi)
    return float(np.real(np.dot(jet.grad, plus + minus)))


def even_general_target(m: MultiplierSpec, xi_bar, jet: Jet) -> float:
    """grad_a psi(0) (m^a(xi_bar) - xi_bar_l d_a m^l(xi_bar))."""
    xi = np.asarray(xi_bar, dtype=float)
    sym, grad = _at(m, xi)
    vec = sym - grad @ xi
    return float(np.real(np.dot(jet.grad, vec)))


def compressible_coefficient(m: MultiplierSpec, xi_bar, jet: Jet) -> float:
    """2 i (m(xi_bar) . xi_bar) psi(0); the limit is this times the envelope weight A."""
    xi = np.asarray(xi_bar, dtype=float)
    sym, _ = _at(m, xi)
    return float(np.real(2j * np.dot(sym, xi) * jet.value))


def laplacian_coefficient(m: MultiplierSpec, xi_bar) -> float:
    """Coefficient of Laplacian(psi)(0) in the odd-case limit: half the trace of i grad m."""
    _, grad = _at(m, np.asarray(xi_bar, dtype=float))
    return float(np.real(0.5j * np.trace(grad)))


# ---------------------------------------------------------------------------
# Series and extrapolation


def richardson_half(lams: list[float], values: list[float]) -> float:
    """Limit from the last two points assuming error ~ c lambda^{-1/2} and doubling lambda."""
    l0, l1 = lams[-2], lams[-1]
    r = math.sqrt(l1 / l0)
    return (r * values[-1] - values[-2]) / (r - 1.0)


def two_term_limit(lams: list[float], values: list[float]) -> float:
    """Fit a + b lambda^{-1/2} + c lambda^{-1} through the last three points."""
    lam = np.asarray(lams[-3:], dtype=float)
    A = np.stack([np.ones(3), lam**-0.5, lam**-1.0], axis=1)
    return float(np.linalg.solve(A, np.asarray(values[-3:], dtype=float))[0])


def aitken_limit(values: list[float]) -> float:
    a, b, c = values[-3:]
    den = (c - b) - (b - a)
    return c if den == 0 else c - (c - b) ** 2 / den


def fitted_exponent(lams: list[float], errors: list[float]) -> float:
    """p in |error| ~ C lambda^{-p} from a log-log least-squares line."""
    slope = np.polyfit(np.log(lams), np.log(np.abs(errors)), 1)[0]
    return float(-slope)


@dataclass
class LimitSeries:
    lambdas: list[float]
    values: list[float]
    target: float
    richardson: float
    alternatives: dict[str, float] = field(default_factory=dict)
    extra: dict[str, float] = field(default_factory=dict)

    @property
    def errors(self) -> list[float]:
        return [abs(v - self.target) for v in self.values]

    @property
    def exponent(self) -> float:
        return fitted_exponent(self.lambdas, self.errors)

    def to_csv(self) -> str:
        from .formats import csv_text

        rows = [[l, v, self.target, abs(v - self.target)] for l, v in zip(self.lambdas, self.values)]
        return csv_text(["lambda", "B_value", "target", "abs_error"], rows)


def _series(lams, values, target, extra=None) -> LimitSeries:
    alts = {}
    if len(values) >= 3:
        alts = {"two_term": two_term_limit(lams, values), "aitken": aitken_limit(values)}
    rich = richardson_half(lams, values) if len(values) >= 2 else float("nan")
    return LimitSeries(list(map(float, lams)), list(map(float, values)), target, rich, alts, extra or {})


def packet_functional(
    m: MultiplierSpec,
    spec: WavePacketSpec,
    psi_name: str,
    form: str = "direct",
    psi_width: float = PSI_WIDTH,
) -> tuple[float, Jet]:
    """B(psi, theta_lambda) in the requested form, plus the jet of psi."""
    grid = grid_for(spec)
    theta = real_packet(spec, grid)
    psi = make_psi(psi_name, grid, psi_width)
    if form == "direct":
        value = bilinear_form_direct(psi, theta, m)
    elif form == "transport":
        value = bilinear_form_transport(psi, theta, m)
    else:
        raise ValueError(f"unknown form {form!r}")
    return value, jet_at_centre(psi)


def sharpness_limit(
    psi: str,
    delta: float,
    lambda_list: list[float],
    direction: tuple[float, float] = (1.0, 0.0),
    width: float = 2.6,
    psi_width: float = PSI_WIDTH,
    m: MultiplierSpec | None = None,
) -> LimitSeries:
    """B(psi, theta_lambda) for sharpness packets; target i grad^j m^l(xi_bar) d_j d_l psi(0).

    For mSQG and xi_bar = e1 the target is 2(-1+delta) d1 d2 psi(0).
    """
    m = msqg(delta) if m is None else m
    values, jet = [], None
    for lam in lambda_list:
        spec = WavePacketSpec(lam, direction, "sharpness", delta, "gaussian", width, 1.0 / 3.0)
        v, jet = packet_functional(m, spec, psi, "direct", psi_width)
        values.append(v)
    target = odd_target(m, direction, jet)
    return _series(lambda_list, values, target)


CASES = {
    # case: (variant, window fraction, functional form)
    "a": ("compressible", 1.0 / 2.0, "transport"),
    "b": ("sharpness", 1.0 / 4.0, "direct"),
    "c": ("halfnorm", 1.0 / 5.0, "direct"),
    "d": ("halfnorm", 1.0 / 5.0, "transport"),
}


def check_case(m: MultiplierSpec, case: str) -> None:
    odd, even, inc = m.is_odd(), m.is_even(), m.is_incompressible()
    need = {
        "a": (odd and not inc, "an odd compressible multiplier"),
        "b": (odd and inc, "an odd incompressible multiplier"),
        "c": (even and inc, "an even incompressible multiplier"),
        "d": (even, "an even multiplier"),
    }
    if case not in need:
        raise ValueError(f"unknown case {case!r}")
    ok, what = need[case]
    if not ok:
        raise ValueError(f"case ({case}) needs {what}; {m.label} does not qualify")


def characterization_limit(
    m: MultiplierSpec,
    xi_bar: tuple[float, float],
    psi: str,
    lambda_list: list[float],
    case: str,
    strict: bool = True,
    width: float = 2.6,
    psi_width: float = PSI_WIDTH,
) -> LimitSeries:
    """Evaluate one of the limit functionals (a)-(d) along a packet sequence.

    ``strict=False`` skips the parity check so a functional can be evaluated on
    a multiplier outside its case as a control.
    """
    if strict:
        check_case(m, case)
    elif case not in CASES:
        raise ValueError(f"unknown case {case!r}")
    variant, frac, form = CASES[case]
    values, jet = [], None
    for lam in lambda_list:
        spec = WavePacketSpec(lam, tuple(xi_bar), variant, m.delta, "gaussian", width, frac)
        v, jet = packet_functional(m, spec, psi, form, psi_width)
        values.append(v)
    extra: dict[str, float] = {}
    if case == "a":
        coeff = compressible_coefficient(m, xi_bar, jet)
        target = coeff
        extra["coefficient"] = coeff
    elif case == "b":
        target = odd_target(m, xi_bar, jet)
        extra["laplacian_coefficient"] = laplacian_coefficient(m, xi_bar)
    elif case == "c":
        target = even_incompressible_target(m, xi_bar, jet)
    else:
        target = even_general_target(m, xi_bar, jet)
    extra["grad_scale"] = float(np.linalg.norm(jet.grad))
    series = _series(lambda_list, values, target, extra)
    if case == "a" and target != 0.0:
        series.extra["A_measured"] = series.richardson / target
    return series
