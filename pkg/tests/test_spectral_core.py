import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from msqg_lab.spectral_core import (
    Grid,
    SpectralField,
    apply_multiplier,
    band_range,
    chi_band,
    chi_leq,
    chi_leq_0,
    fractional_laplacian_symbol,
    lp_project,
    transform_roundtrip,
)


def test_grid_wavenumbers():
    g = Grid(64)
    assert g.k1d.min() == -32 and g.k1d.max() == 31
    assert Grid(256).kx.size == 65536


@pytest.mark.parametrize("n", [10, 8, 8192, 64.0, True])
def test_grid_rejects_bad_sizes(n):
    with pytest.raises(ValueError):
        Grid(n)


def test_roundtrip_constant_and_sine():
    g = Grid(64)
    x1, _ = g.coords
    one = SpectralField.from_physical(g, np.ones((64, 64)))
    assert np.allclose(transform_roundtrip(one).physical(), 1.0, atol=1e-15)
    s = SpectralField.from_physical(g, np.sin(x1))
    assert np.max(np.abs(transform_roundtrip(s).physical() - np.sin(x1))) < 1e-13


@given(st.integers(0, 2**31 - 1))
def test_roundtrip_random_bandlimited(seed):
    g = Grid(32)
    rng = np.random.default_rng(seed)
    vals = rng.standard_normal((32, 32))
    f = SpectralField.from_physical(g, vals)
    back = transform_roundtrip(f)
    assert np.max(np.abs(back.coeffs - f.coeffs)) < 1e-13
    assert f.is_hermitian()


def test_inverse_half_derivative_on_sin4():
    g = Grid(64)
    x1, _ = g.coords
    f = SpectralField.from_physical(g, np.sin(4 * x1))
    out = apply_multiplier(f, fractional_laplacian_symbol(g, -0.5))
    assert np.max(np.abs(out.physical() - 0.5 * np.sin(4 * x1))) < 1e-13


@pytest.mark.parametrize("s", [-0.5, 0.0, 1.3])
def test_unit_wavenumber_unchanged(s):
    g = Grid(32)
    x1, _ = g.coords
    f = SpectralField.from_physical(g, np.sin(x1) + 3.0)
    out = apply_multiplier(f, fractional_laplacian_symbol(g, s))
    # zero mode is dropped, the |k| = 1 part is untouched
    assert np.max(np.abs(out.physical() - np.sin(x1))) < 1e-13


def test_multiplier_must_preserve_reality():
    g = Grid(16)
    f = SpectralField.from_physical(g, np.cos(g.coords[0]))
    with pytest.raises(ValueError):
        apply_multiplier(f, 1j * np.ones((16, 16)))


def test_profile_values():
    assert chi_leq_0(0.5) == 1.0 and chi_leq_0(1.0) == 0.0
    assert chi_leq_0(0.75) == pytest.approx(0.5, abs=1e-15)
    # exp(-1/t) step at t = 0.8: 1 / (1 + e^{-3.75})
    assert chi_leq_0(0.6) == pytest.approx(0.9770226300899744, rel=1e-14)


def test_lp_projections_on_simple_fields():
    g = Grid(64)
    x1, _ = g.coords
    const = SpectralField.from_physical(g, 2.0 * np.ones((64, 64)))
    assert np.allclose(lp_project(const, 0, "leq").physical(), 2.0)
    s4 = SpectralField.from_physical(g, np.sin(4 * x1))
    assert np.max(np.abs(lp_project(s4, 2).physical() - np.sin(4 * x1))) < 1e-14
    assert np.max(np.abs(lp_project(s4, 3).physical())) < 1e-15
    assert sum(float(chi_band(q, 4.0)) for q in range(-2, 8)) == 1.0
    # support |k| <= 2^{q-2} is disjoint from P_q
    low = SpectralField.from_physical(g, np.cos(x1) + np.sin(2 * g.coords[1]))
    assert np.max(np.abs(lp_project(low, 3).coeffs)) < 1e-16


@given(st.sampled_from([16, 32, 64, 128]))
def test_partition_of_unity(n):
    g = Grid(n)
    sel = (g.kmag > 0) & (g.kmag < n / 3)
    total = sum(chi_band(q, g.kmag[sel]) for q in band_range(g))
    assert np.max(np.abs(total - 1.0)) < 1e-14


@given(st.floats(0.0, 300.0), st.integers(-2, 8))
def test_profile_monotone_and_bounded(r, q):
    a = float(chi_leq(q, r))
    b = float(chi_leq(q + 1, r))
    assert 0.0 <= a <= b <= 1.0
    assert math.isfinite(float(chi_band(q, r)))
