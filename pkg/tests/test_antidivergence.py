import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from msqg_lab import antidivergence as ad
from msqg_lab import msqg_ops as ops
from msqg_lab.spectral_core import Grid, SpectralField, chi_band, chi_leq_0, to_physical_real


def _random_pairs(rng, q, count):
    """Integer pairs with zeta in the P_{q+1} annulus and eta in the P_q annulus."""
    out_z, out_e = [], []
    while len(out_z) < count:
        r1 = rng.uniform(2.0**q, 2.0 ** (q + 2))
        r2 = rng.uniform(2.0 ** (q - 1), 2.0 ** (q + 1))
        a1, a2 = rng.uniform(0, 2 * math.pi, 2)
        z = np.rint([r1 * math.cos(a1), r1 * math.sin(a1)])
        e = np.rint([r2 * math.cos(a2), r2 * math.sin(a2)])
        if np.any(z + e != 0):
            out_z.append(z)
            out_e.append(e)
    return np.array(out_z, dtype=np.int64), np.array(out_e, dtype=np.int64)


@pytest.mark.parametrize("delta", [0.0, 0.25, 0.5])
@pytest.mark.parametrize("qhat", [None, 3])
def test_kernel_divergence_identity(delta, qhat):
    # i xi_j K^{jl}(zeta, eta) = (m_q(zeta) - m_q(-eta)) W(zeta) W(eta)
    m = ops.msqg(delta)
    q = 5
    zeta, eta = _random_pairs(np.random.default_rng(1), q, 400)
    K = ad.kernel_values(m, q, qhat, zeta, eta)
    xi = (zeta + eta).astype(float)
    lhs = 1j * np.einsum("mj,mjl->ml", xi, K)
    wz, _ = ad.band_window(q, np.hypot(*zeta.T))
    we, _ = ad.band_window(q, np.hypot(*eta.T))
    mz = ad.windowed_symbol(m, q, qhat, zeta[:, 0].astype(float), zeta[:, 1].astype(float)).T
    me = ad.windowed_symbol(m, q, qhat, -eta[:, 0].astype(float), -eta[:, 1].astype(float)).T
    rhs = (mz - me) * (wz * we)[:, None]
    assert np.max(np.abs(lhs - rhs)) <= 1e-11 * np.max(np.abs(rhs))


def test_kernel_on_antidiagonal_is_exact():
    m = ops.msqg(0.25)
    q = 4
    zeta = np.array([[20, 7], [-11, 18], [0, 24]])
    K = ad.kernel_values(m, q, 2, zeta, -zeta)
    z1, z2 = zeta[:, 0].astype(float), zeta[:, 1].astype(float)
    w, _ = ad.band_window(q, np.hypot(z1, z2))
    expected = -1j * ad.windowed_gradient(m, q, 2, z1, z2) * w * w
    assert np.allclose(K, np.moveaxis(expected, -1, 0), rtol=1e-14, atol=0)


@pytest.mark.parametrize("delta", [0.0, 0.25, 0.5])
def test_kernel_trace_free_for_msqg_only(delta):
    zeta, eta = _random_pairs(np.random.default_rng(2), 5, 300)
    K = ad.kernel_values(ops.msqg(delta), 5, 3, zeta, eta)
    assert np.max(np.abs(K[:, 0, 0] + K[:, 1, 1])) <= 1e-12 * np.max(np.abs(K))
    Kc = ad.kernel_values(ops.gradient_control(delta), 5, 3, zeta, eta)
    assert np.max(np.abs(Kc[:, 0, 0] + Kc[:, 1, 1])) >= 1e-2 * np.max(np.abs(Kc))


@given(st.integers(0, 10**6), st.floats(0.0, 0.5), st.integers(3, 6))
def test_kernel_exact_homogeneity(seed, delta, q):
    # without a low cut the kernel of band q+1 at doubled frequencies is 2^{-2+2 delta} times band q
    m = ops.msqg(delta)
    zeta, eta = _random_pairs(np.random.default_rng(seed), q, 30)
    a = ad.kernel_values(m, q, None, zeta, eta)
    b = ad.kernel_values(m, q + 1, None, 2 * zeta, 2 * eta)
    assert np.max(np.abs(b - 2.0 ** (-2 + 2 * delta) * a)) <= 1e-12 * np.max(np.abs(a))


def test_kernel_quadrature_converged():
    m = ops.msqg(0.5)
    zeta, eta = _random_pairs(np.random.default_rng(3), 5, 200)
    a = ad.kernel_values(m, 5, 3, zeta, eta, sigma_order=16)
    b = ad.kernel_values(m, 5, 3, zeta, eta, sigma_order=32)
    assert np.max(np.abs(a - b)) <= 1e-12 * np.max(np.abs(b))


def test_build_kernel_preconditions_and_summary():
    m = ops.msqg(0.25)
    with pytest.raises(ValueError):
        ad.build_kernel(5, 3, m, Grid(128))
    with pytest.raises(ValueError):
        ad.build_kernel(0, 3, m, Grid(128))
    t = ad.build_kernel(4, 3, m, Grid(256), max_pairs=500, seed=4)
    assert t.samples.shape == (500, 2, 2)
    assert t.max_trace <= 1e-12 * t.max_abs
    text = ad.kernel_summary_csv([t])
    assert text.splitlines()[0] == "q,max_abs,max_trace,scaling_ratio"


def test_apply_single_modes():
    m = ops.msqg(0.5)
    table = ad.KernelTable(4, None, m, 128)
    f = ad.SparseSpectrum([[20, 3]], [2.0 - 1.0j])
    g = ad.SparseSpectrum([[-5, 9]], [0.5j])
    out = ad.apply_antidivergence(f, g, table)
    assert out.modes.tolist() == [[15, 12]]
    K = ad.kernel_values(m, 4, None, np.array([[20, 3]]), np.array([[-5, 9]]))[0]
    assert np.allclose(out.values[0], K * (2.0 - 1.0j) * 0.5j, rtol=1e-15, atol=0)
    empty = ad.apply_antidivergence(ad.SparseSpectrum(np.zeros((0, 2)), []), g, table)
    assert empty.values.shape == (0, 2, 2)


def test_apply_matches_naive_double_loop():
    m = ops.msqg(0.25)
    table = ad.KernelTable(4, 2, m, 128)
    f = ad.random_sparse_field(5, 16, 64, 6)
    g = ad.random_sparse_field(6, 8, 32, 6)
    out = ad.apply_antidivergence(f, g, table)
    naive: dict[tuple[int, int], np.ndarray] = {}
    for zk, zv in zip(f.modes, f.values):
        for ek, ev in zip(g.modes, g.values):
            K = ad.kernel_values(m, 4, 2, zk[None, :], ek[None, :])[0]
            key = (int(zk[0] + ek[0]), int(zk[1] + ek[1]))
            naive[key] = naive.get(key, 0) + K * zv * ev
    assert len(naive) == out.modes.shape[0]
    for mode, val in zip(out.modes, out.values):
        assert np.allclose(val, naive[tuple(int(v) for v in mode)], rtol=1e-13, atol=1e-16)


def test_apply_budget():
    f = ad.random_sparse_field(0, 10, 20, 40)
    with pytest.raises(ValueError):
        ad.apply_antidivergence(f, f, ad.KernelTable(3, None, ops.msqg(0.5), 64), budget=10)


@pytest.mark.parametrize("delta", [0.0, 0.25, 0.5])
def test_divergence_form_sparse(delta):
    q = 6
    theta = ad.random_sparse_field(9, 2.0 ** (q - 1), 2.0 ** (q + 2), 24)
    rep = ad.verify_divergence_form(theta, q, 3, ops.msqg(delta))
    assert rep.residual <= 1e-8


def test_divergence_form_grid_field():
    grid = Grid(64)
    theta = ops.band_limited_random(grid, 2, 14.0, 0.5)
    rep = ad.verify_divergence_form(theta, 3, 2, ops.msqg(0.5))
    assert rep.residual <= 1e-8
    assert rep.vector_residual <= 1e-8 and rep.scalar_residual <= 1e-8


def test_divergence_form_empty_band():
    theta = ad.random_sparse_field(1, 3, 7, 10)
    with pytest.raises(ValueError):
        ad.verify_divergence_form(theta, 6, 3, ops.msqg(0.5))


def test_calderon_coefficients_and_identities():
    g = Grid(32)
    k = g.kvec
    r2 = np.where(g.kmag > 0, g.kmag**2, 1.0)
    A, B = -1.0, 2.0
    # A delta Lap^{-1} + B d d Lap^{-2}
    expected = A * np.eye(2)[:, :, None, None] * (-1 / r2) + B * (-k[:, None] * k[None, :] / r2**2)
    expected[..., 0, 0] = 0.0
    assert np.allclose(ad.calderon_R_symbol(g), expected, rtol=1e-15, atol=1e-16)
    x1, _ = g.coords
    f = SpectralField.from_physical(g, np.sin(x1))
    R = ad.calderon_R(f)
    back = to_physical_real(ad.double_divergence(g, R.coeffs))
    assert np.max(np.abs(back - np.sin(x1))) < 1e-13
    assert np.max(np.abs(R.coeffs[0, 0] + R.coeffs[1, 1])) <= 1e-15 * np.max(np.abs(R.coeffs))
    assert np.array_equal(R.coeffs[0, 1], R.coeffs[1, 0])


@given(st.integers(0, 10**6))
def test_calderon_inverts_double_divergence(seed):
    g = Grid(32)
    f = ops.random_field(g, seed, 5.0)
    dd = ad.double_divergence(g, ad.calderon_R(f).coeffs)
    assert np.max(np.abs(dd - f.coeffs)) <= 1e-15


@pytest.mark.parametrize("seed", [0, 1])
def test_assembly_small_grid(seed):
    grid = Grid(32)
    theta = ops.band_limited_random(grid, seed, 6.0, 0.25)
    asm = ad.assemble_tracefree_antidivergence(theta, ops.msqg(0.25))
    assert asm.divergence_error <= 1e-7
    assert asm.trace_ratio <= 1e-10
    assert asm.symmetry_error <= 1e-13 * np.max(np.abs(asm.tensor.physical()))
    other = ad.assemble_tracefree_antidivergence(theta, ops.msqg(0.25), method="calderon")
    dd_a = ad.double_divergence(grid, asm.tensor.coeffs)
    dd_b = ad.double_divergence(grid, other.tensor.coeffs)
    assert np.max(np.abs(dd_a - dd_b)) <= 1e-12 * np.max(np.abs(dd_b))


def test_assembly_single_mode_has_no_source():
    grid = Grid(32)
    x1, x2 = grid.coords
    theta = SpectralField.from_physical(grid, np.cos(3 * x1 + 4 * x2))
    asm = ad.assemble_tracefree_antidivergence(theta, ops.msqg(0.5))
    assert np.max(np.abs(ad.double_divergence(grid, asm.tensor.coeffs))) < 1e-14


def test_assembly_rejects_other_multipliers():
    grid = Grid(32)
    with pytest.raises(ValueError):
        ad.assemble_tracefree_antidivergence(ops.band_limited_random(grid, 0, 4.0), ops.even_cosine(0.3))
    with pytest.raises(ValueError):
        ad.assemble_tracefree_antidivergence(ops.band_limited_random(grid, 0, 4.0), ops.msqg(0.3), method="x")


def _bump_tensor(grid, radius):
    x1, x2 = grid.coords
    y1, y2 = x1 - np.pi, x2 - np.pi
    b = chi_leq_0(np.hypot(y1, y2) / radius)
    a, c = b * np.cos(2 * y1 + y2), b * np.sin(y1 - 3 * y2)
    return SpectralField.from_physical(grid, np.array([[a, c], [c, -a]]), "tensor")


@pytest.mark.parametrize("Q", [(0.3, -1.0, 2.0, 1.0), (1.0, 0.0, 0.0, 0.0)])
def test_moment_vanishes_for_compact_support(Q):
    # the exp(-1/t) bump needs n = 512 before its grid image is compact to 1e-7
    grid = Grid(512)
    F = _bump_tensor(grid, 0.6)
    series = ad.verify_moment_lemma(F, Q, [1.4, 2.0, 3.0], window_radius=3.0)
    assert max(abs(v) for v in series.values) <= 1e-11 * series.scale


def test_moment_decays_for_gaussian_tails():
    grid = Grid(256)
    x1, x2 = grid.coords
    y1, y2 = x1 - np.pi, x2 - np.pi
    env = np.exp(-(y1**2 + y2**2) / (2 * 0.2**2))
    a, c = env * np.cos(3 * y1), env * y2
    F = SpectralField.from_physical(grid, np.array([[a, c], [c, -a]]), "tensor")
    # the cutoff starts its transition at R/2, so R = 3 keeps 7.5 widths of envelope inside
    series = ad.verify_moment_lemma(F, (1.0, 0.0, 0.0, 0.0), [0.4, 0.8, 1.6, 2.4, 3.0], max_outside_mass=1.0)
    mags = [abs(v) for v in series.values]
    assert all(b < a for a, b in zip(mags, mags[1:]))
    assert mags[-1] <= 1e-10 * series.scale


def test_moment_guards():
    grid = Grid(64)
    F = _bump_tensor(grid, 0.6)
    with pytest.raises(ValueError):
        ad.verify_moment_lemma(F, (0, 0, 0, 1), [3.2])
    with pytest.raises(ValueError):
        ad.verify_moment_lemma(F, (0, 0, 0, 1), [0.3])
    with pytest.raises(ValueError):
        ad.verify_moment_lemma(F, (0, 0, 0, 1), [1.0], mass_of="nothing")


def test_moment_routes_agree():
    grid = Grid(32)
    theta = ops.band_limited_random(grid, 3, 6.0, 0.25)
    a = ad.assemble_tracefree_antidivergence(theta, ops.msqg(0.25)).tensor
    b = ad.assemble_tracefree_antidivergence(theta, ops.msqg(0.25), method="calderon").tensor
    kw = dict(max_outside_mass=1.0, mass_of="source")
    ia = ad.verify_moment_lemma(a, (0, 0, 0, 1), [1.0, 2.0], **kw).values
    ib = ad.verify_moment_lemma(b, (0, 0, 0, 1), [1.0, 2.0], **kw).values
    assert np.allclose(ia, ib, rtol=1e-10, atol=1e-15)


def test_concentrated_theta_is_dealiased_and_local():
    grid = Grid(128)
    th = ad.concentrated_theta(grid)
    assert np.max(np.abs(th.coeffs * (1 - grid.dealias_mask))) == 0.0
    assert th.coeffs[0, 0] == 0.0
    vals = th.physical()
    x1, x2 = grid.coords
    far = np.hypot(x1 - np.pi, x2 - np.pi) > 2.0
    assert np.max(np.abs(vals[far])) < 1e-6 * np.max(np.abs(vals))


def test_bands_cover_p_q_supports():
    # the kernel window is 1 wherever P_q or P_{q+1} is nonzero
    r = np.linspace(0, 300, 30001)
    for q in range(0, 5):
        w, _ = ad.band_window(q, r)
        supp = (chi_band(q, r) != 0) | (chi_band(q + 1, r) != 0)
        assert np.all(w[supp] == 1.0)


def test_kernel_peak_dominates_samples_and_scales():
    m = ops.msqg(0.5)
    p5 = ad.kernel_peak(m, 5, 3, starts=1500, polish=2, rotations=24)
    p6 = ad.kernel_peak(m, 6, 3, starts=1500, polish=2, rotations=24)
    at = np.abs(ad.kernel_values(m, 5, 3, p5.zeta[None], p5.eta[None])).max()
    assert at == pytest.approx(p5.continuum, rel=1e-12)
    rng = np.random.default_rng(7)
    z = rng.uniform(-40, 40, (20000, 2))
    e = rng.uniform(-40, 40, (20000, 2))
    assert np.abs(ad.kernel_values(m, 5, 3, z, e)).max() <= p5.continuum * (1 + 1e-9)
    # Exact homogeneity: K_{q+1}(2 zeta, 2 eta) = 2^{-2+2 delta} K_q(zeta, eta).
    assert p6.continuum == pytest.approx(p5.continuum * 2.0 ** (-1.0), rel=1e-6)
    for p in (p5, p6):
        assert 0.97 * p.continuum <= p.lattice <= p.continuum * (1 + 1e-9)
        lat = np.abs(ad.kernel_values(m, p.q, 3, p.lattice_zeta[None], p.lattice_eta[None])).max()
        assert lat == pytest.approx(p.lattice, rel=1e-12)
