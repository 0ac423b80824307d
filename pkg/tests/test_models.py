from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from radcal.errors import DomainError, InvalidParams, MultipleRoots
from radcal.models import (
    BackProjCamera,
    DivisionProfile,
    Intrinsics,
    ModelKind,
    TargetModel,
    back_project,
    is_monotone,
    phi,
    project_division,
    project_points,
    unproject_pixels,
)
from radcal.synth import spec_for_model

INTR = Intrinsics((610.0, 395.0), 1.1, 420.0)
SIZE = (1200, 800)


def pixels(rng, n=400, margin=0.05):
    w, h = SIZE
    return rng.uniform([margin * w, margin * h], [(1 - margin) * w, (1 - margin) * h], (n, 2))


@pytest.mark.parametrize("kind", list(ModelKind))
def test_unproject_then_project_round_trip(kind, rng):
    spec = spec_for_model(kind)
    model = spec.model
    if kind.is_backward:
        model = TargetModel(kind, model.params, spec.intrinsics.r_max_for(SIZE))
    pix = pixels(rng)
    rays, ok = unproject_pixels(model, spec.intrinsics, pix)
    assert ok.mean() > 0.99
    back, status = project_points(model, spec.intrinsics, rays[ok] * 3.7)
    good = status == 0
    assert good.all()
    assert np.max(np.abs(back - pix[ok])) < 1e-8


@pytest.mark.parametrize("kind", [k for k in ModelKind if not k.is_backward])
def test_forward_models_are_paraxially_unit(kind):
    spec = spec_for_model(kind)
    eps = 1e-6
    assert phi(spec.model, eps, 1.0) / eps == pytest.approx(phi(spec.model, 2 * eps, 1.0) / (2 * eps), rel=1e-6)


def test_retinal_round_trip(rng):
    pix = pixels(rng, 50)
    assert np.allclose(INTR.to_pixels(INTR.to_retinal(pix)), pix, atol=1e-10)


def test_r_max_is_farthest_corner():
    intr = Intrinsics((700.0, 500.0), 1.0, 400.0)
    assert intr.r_max_for((1200, 800)) == pytest.approx(math.hypot(700, 500) / 400)


def test_division_back_projection_is_ray_through_profile():
    cam = BackProjCamera(INTR, DivisionProfile((-0.2, 0.01), 2.5))
    u = np.array([800.0, 600.0])
    ray = back_project(cam, u)
    m = INTR.to_retinal(u)
    r2 = m @ m
    assert np.allclose(ray, [m[0], m[1], 1 - 0.2 * r2 + 0.01 * r2 * r2])
    assert np.allclose(project_division(cam, 5.0 * ray), u, atol=1e-9)


def test_non_monotone_profile_reports_multiple_roots():
    # psi(r) = 1 - 0.5 r^2 has omega turning back within r <= 3
    model = TargetModel(ModelKind.DIV_EVEN, (-0.5, 0.2), 3.0)
    cam = BackProjCamera(Intrinsics((0.0, 0.0), 1.0, 1.0), DivisionProfile(model.params, 3.0))
    assert not is_monotone(model)
    with pytest.raises(MultipleRoots):
        for th in np.linspace(0.05, 3.0, 120):
            project_division(cam, [math.sin(th), 0.0, math.cos(th)])


def test_phi_undefined_at_origin():
    with pytest.raises(DomainError):
        phi(TargetModel(ModelKind.KB, (0, 0, 0, 0)), 0.0, 0.0)


@pytest.mark.parametrize(
    "kind,params",
    [
        (ModelKind.EUCM, (1.2, 1.0)),
        (ModelKind.EUCM, (0.5, 0.0)),
        (ModelKind.DS, (0.1, 1.5)),
        (ModelKind.UCM, (-0.1,)),
        (ModelKind.FOV, (0.0,)),
        (ModelKind.KB, (0.1, 0.2)),
        (ModelKind.BC, (float("nan"), 0.0)),
    ],
)
def test_invalid_parameters_rejected(kind, params):
    with pytest.raises(InvalidParams):
        TargetModel(kind, params)


@given(st.floats(0.0, 1.0), st.floats(0.2, 3.0), st.floats(0.01, 1.2))
@settings(max_examples=80, deadline=None)
def test_eucm_projection_inverts(alpha, beta, theta):
    model = TargetModel(ModelKind.EUCM, (alpha, beta))
    intr = Intrinsics((0.0, 0.0), 1.0, 1.0)
    X = np.array([[math.sin(theta), 0.3 * math.sin(theta), math.cos(theta)]])
    pix, status = project_points(model, intr, X)
    if status[0] != 0:
        return
    ray, ok = unproject_pixels(model, intr, pix)
    if ok[0]:
        assert np.allclose(ray[0], X[0] / np.linalg.norm(X[0]), atol=1e-8)


def test_on_axis_point_maps_to_centre():
    pix, status = project_points(TargetModel(ModelKind.KB, (0.1, 0, 0, 0)), INTR, np.array([[0.0, 0.0, 2.0]]))
    assert status[0] == 0 and np.allclose(pix[0], INTR.e)
