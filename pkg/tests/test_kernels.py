from __future__ import annotations

import numpy as np
import pytest

from radcal import kernels
from radcal.models import ModelKind, TargetModel, root_table

PARAMS = {
    kernels.BC: [-0.08, 0.012, 0.0, 0.0],
    kernels.KB: [0.02, -0.004, 0.0005, 0.0],
    kernels.UCM: [0.7, 0.0, 0.0, 0.0],
    kernels.FOV: [0.9, 0.0, 0.0, 0.0],
    kernels.EUCM: [0.55, 1.1, 0.0, 0.0],
    kernels.DS: [-0.15, 0.58, 0.0, 0.0],
}


@pytest.mark.parametrize("code", sorted(PARAMS))
def test_phi_numba_matches_numpy(code, rng):
    p = np.array(PARAMS[code])
    R = rng.uniform(0.0, 3.0, 500)
    Z = rng.uniform(-1.0, 2.0, 500)
    r_nb, v_nb = kernels.phi_nb(code, p, R, Z)
    r_np, v_np = kernels.phi_np(code, p, R, Z)
    assert np.array_equal(v_nb, v_np)
    assert np.allclose(r_nb[v_nb], r_np[v_np], rtol=1e-13, atol=1e-15)


def test_division_radius_numba_matches_numpy(rng):
    t = root_table(TargetModel(ModelKind.DIV_EVEN, (-0.3, 0.01), 2.4))
    theta = rng.uniform(0.0, np.pi, 1000)
    r_nb, s_nb = kernels.division_radius_nb(theta, t.coeffs, t.seg_r, t.seg_w)
    r_np, s_np = kernels.division_radius_np(theta, t.coeffs, t.seg_r, t.seg_w)
    assert np.array_equal(s_nb, s_np)
    ok = s_nb == kernels.OK
    assert ok.any()
    assert np.allclose(r_nb[ok], r_np[ok], rtol=1e-12)


def test_division_radius_solves_the_ray_equation(rng):
    t = root_table(TargetModel(ModelKind.DIV_EVEN, (-0.2, 0.01), 2.0))
    theta = rng.uniform(0.0, 1.5, 200)
    r, s = kernels.division_radius(theta, t.coeffs, t.seg_r, t.seg_w)
    ok = s == kernels.OK
    psi = 1.0 - 0.2 * r[ok] ** 2 + 0.01 * r[ok] ** 4
    assert np.allclose(np.arctan2(r[ok], psi), theta[ok], atol=1e-12)


def test_phi_inverse_numba_matches_numpy():
    p = np.array(PARAMS[kernels.KB])
    z_grid = np.linspace(0.0, 1.5, 257)
    f_grid, _ = kernels.phi_np(kernels.KB, p, np.sin(z_grid), np.cos(z_grid))
    r = np.linspace(0.0, f_grid.max(), 300)
    a, va = kernels.phi_inverse_nb(kernels.KB, p, r, z_grid, f_grid)
    b, vb = kernels.phi_inverse_np(kernels.KB, p, r, z_grid, f_grid)
    assert np.array_equal(va, vb)
    assert np.allclose(a[va], b[vb], atol=1e-13)


def test_huber_unit_cases():
    tau = 2.0
    d = np.array([0.0, 1.0, 2.0, 3.0, 10.0])
    expect = [0.0, 0.5, 2.0, 2.0 * (3.0 - 1.0), 2.0 * (10.0 - 1.0)]
    assert np.allclose(kernels.huber(d, tau), expect)


def test_huber_is_continuous_with_continuous_slope():
    tau, h = 1.5, 1e-7
    left = kernels.huber(np.array([tau - h, tau]), tau)
    right = kernels.huber(np.array([tau, tau + h]), tau)
    assert (left[1] - left[0]) / h == pytest.approx(tau, rel=1e-5)
    assert (right[1] - right[0]) / h == pytest.approx(tau, rel=1e-5)


def test_huber_bounded_by_quadratic():
    d = np.linspace(0.0, 20.0, 101)
    assert np.all(kernels.huber(d, 2.0) <= 0.5 * d * d + 1e-12)
