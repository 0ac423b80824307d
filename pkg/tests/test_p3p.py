from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from radcal.errors import DegenerateTriple
from radcal.geometry import Pose
from radcal.p3p import p3p


def random_pose(rng):
    return Pose.from_rotvec(rng.normal(size=3) * 0.5, rng.normal(size=3) * 0.3 + [0, 0, 6.0])


def well_conditioned(rng):
    while True:
        X = np.column_stack([rng.uniform(-2, 2, (3, 2)), rng.uniform(-0.5, 0.5, 3)])
        area = np.linalg.norm(np.cross(X[1] - X[0], X[2] - X[0]))
        if area > 1.0:
            return X


@pytest.mark.parametrize("seed", range(25))
def test_p3p_contains_true_pose(seed):
    rng = np.random.default_rng(seed)
    X = well_conditioned(rng)
    pose = random_pose(rng)
    P = pose.apply(X)
    sols = p3p(P / np.linalg.norm(P, axis=1, keepdims=True), X)
    assert 1 <= len(sols) <= 4
    err = min(np.max(np.abs(s.matrix - pose.matrix)) for s in sols)
    assert err < 1e-7


@given(st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_every_solution_satisfies_the_rays(seed):
    rng = np.random.default_rng(seed)
    X = well_conditioned(rng)
    P = random_pose(rng).apply(X)
    rays = P / np.linalg.norm(P, axis=1, keepdims=True)
    for s in p3p(rays, X):
        Q = s.apply(X)
        assert np.all(Q[:, 2] > 0)
        assert np.allclose(Q / np.linalg.norm(Q, axis=1, keepdims=True), rays, atol=1e-7)
        assert np.allclose(s.R @ s.R.T, np.eye(3), atol=1e-10)


def test_p3p_scale_of_rays_is_irrelevant(rng):
    X = well_conditioned(rng)
    P = random_pose(rng).apply(X)
    a = p3p(P, X)
    b = p3p(P * np.array([[2.0], [0.5], [7.0]]), X)
    assert len(a) == len(b)


def test_collinear_points_rejected():
    X = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]])
    with pytest.raises(DegenerateTriple):
        p3p(np.eye(3) + 1.0, X)


def test_coincident_rays_rejected():
    X = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])
    rays = np.array([[0, 0, 1.0], [0, 0, 1.0], [0.1, 0, 1.0]])
    with pytest.raises(DegenerateTriple):
        p3p(rays, X)
