"""Closed-form solvers for a single planar view.

The cascade goes: radial fundamental matrix -> centre of projection ->
optional corner correction -> rotation and lateral translation from the
orthonormality of the first two rotation columns -> focal length, division
coefficients and depth from one linear system.

Image points are ``u`` (n, 2) pixels, target points ``X`` (n, 2) on the plane
``z = 0`` of the board frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from radcal.errors import (
    CenterAtInfinity,
    DegenerateConfiguration,
    IllConditioned,
    NegativeFocal,
    NonConvergence,
    NoRealSolution,
    NoValidRotation,
)
from radcal.polyroots import solve_cubic

MAX_CONDITION = 1e12


# ---------------------------------------------------------------------------
# rigid transforms
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Pose:
    """Maps points ``X`` of a source frame to ``R @ X + t``."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(3), np.zeros(3))

    def apply(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.R.T + self.t

    def inverse(self) -> Pose:
        return Pose(self.R.T, -self.R.T @ self.t)

    def __matmul__(self, other: Pose) -> Pose:
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    @property
    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def rotvec(self) -> np.ndarray:
        return Rotation.from_matrix(self.R).as_rotvec()

    @classmethod
    def from_rotvec(cls, w, t) -> Pose:
        return cls(Rotation.from_rotvec(np.asarray(w, dtype=np.float64)).as_matrix(), t)


def nearest_rotation(M) -> np.ndarray:
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def rotation_angle(Ra, Rb) -> float:
    """Angle of the rotation taking ``Rb`` to ``Ra``."""
    return float(np.linalg.norm(Rotation.from_matrix(Ra @ Rb.T).as_rotvec()))


def skew(v) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def homog(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return np.concatenate([p, np.ones(p.shape[:-1] + (1,))], axis=-1)


# ---------------------------------------------------------------------------
# radial fundamental matrix
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RadialFundamental:
    """``F = [e]_x [h1; h2; 0]`` with the centre normalised to ``(ex, ey, 1)``."""

    F: np.ndarray
    e: np.ndarray
    h1: np.ndarray
    h2: np.ndarray

    @classmethod
    def from_parts(cls, e, h1, h2) -> RadialFundamental:
        e = np.asarray(e, dtype=np.float64)
        h1 = np.asarray(h1, dtype=np.float64)
        h2 = np.asarray(h2, dtype=np.float64)
        F = skew(np.array([e[0], e[1], 1.0])) @ np.vstack([h1, h2, np.zeros(3)])
        return cls(F, e.copy(), h1.copy(), h2.copy())

    @classmethod
    def from_matrix(cls, F) -> RadialFundamental:
        F = np.asarray(F, dtype=np.float64)
        e = center_from_F(F)
        # with e3 = 1: row 0 is -h2 and row 1 is h1
        return cls.from_parts(e, F[1].copy(), -F[0].copy())

    def directions(self, X) -> np.ndarray:
        """Radial direction ``(h1 . x, h2 . x)`` for each board point."""
        xh = homog(X)
        return np.column_stack([xh @ self.h1, xh @ self.h2])


def hartley(pts) -> np.ndarray:
    """Similarity moving the centroid to the origin and the RMS radius to sqrt(2)."""
    pts = np.asarray(pts, dtype=np.float64)
    c = pts.mean(axis=0)
    d = math.sqrt(np.mean(np.sum((pts - c) ** 2, axis=1)))
    if d == 0.0:
        raise DegenerateConfiguration("all points coincide")
    s = math.sqrt(2.0) / d
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def center_from_F(F) -> np.ndarray:
    U, s, _ = np.linalg.svd(np.asarray(F, dtype=np.float64))
    e = U[:, 2]
    if abs(e[2]) <= 1e-12 * np.linalg.norm(e[:2]):
        raise CenterAtInfinity("left null vector has a vanishing third coordinate")
    return e[:2] / e[2]


def solve_radial_F(u, X) -> list[RadialFundamental]:
    """Rank-two candidates from seven or more correspondences.

    The constraint ``u^T F x = 0`` is stacked as ``(x kron u)^T vec(F) = 0`` on
    Hartley-normalised coordinates; the two smallest right singular vectors
    span a pencil and ``det F = 0`` picks up to three members of it.
    """
    u = np.asarray(u, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if len(u) < 7:
        raise DegenerateConfiguration(f"need at least 7 correspondences, got {len(u)}")
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(X))):
        raise DegenerateConfiguration("non-finite correspondence")
    Tu, Tx = hartley(u), hartley(X)
    un = homog(u) @ Tu.T
    xn = homog(X) @ Tx.T
    A = (xn[:, :, None] * un[:, None, :]).reshape(len(u), 9)
    _, s, Vt = np.linalg.svd(A, full_matrices=True)
    if s.size < 7 or s[6] <= 1e-10 * s[0]:
        raise DegenerateConfiguration("correspondence system has a null space larger than two")
    # vec() is column-major
    F1 = Vt[8].reshape(3, 3).T
    F2 = Vt[7].reshape(3, 3).T
    ts = np.array([0.0, 1.0, -1.0, 2.0])
    dets = [np.linalg.det(t * F1 + (1.0 - t) * F2) for t in ts]
    coeffs = np.linalg.solve(np.vander(ts, 4, increasing=True), dets)
    roots = solve_cubic(*coeffs)
    if not roots:
        raise NoRealSolution("det(F) = 0 has no real root on the pencil")
    out = []
    for t in roots:
        Fn = t * F1 + (1.0 - t) * F2
        F = Tu.T @ Fn @ Tx
        F /= np.linalg.norm(F)
        try:
            out.append(RadialFundamental.from_matrix(F))
        except CenterAtInfinity:
            continue
    if not out:
        raise NoRealSolution("every rank-two member has its centre at infinity")
    return out


def epipolar_distances(rf: RadialFundamental, u, X) -> np.ndarray:
    """Signed distance of each ``u`` to the radial line of its board point."""
    d = rf.directions(X)
    w = np.asarray(u, dtype=np.float64) - rf.e
    n = np.hypot(d[:, 0], d[:, 1])
    with np.errstate(divide="ignore", invalid="ignore"):
        return (d[:, 0] * w[:, 1] - d[:, 1] * w[:, 0]) / n


def select_F(cands, u, X, threshold: float = 3.0) -> RadialFundamental:
    """Candidate with the most correspondences within ``threshold`` pixels of their radial line."""
    best, key = None, None
    for rf in cands:
        dist = np.abs(epipolar_distances(rf, u, X))
        dist = np.where(np.isfinite(dist), dist, np.inf)
        k = (-int(np.sum(dist <= threshold)), float(np.sum(np.minimum(dist, threshold) ** 2)))
        if key is None or k < key:
            best, key = rf, k
    return best


def correct_corners(rf: RadialFundamental, u, X) -> np.ndarray:
    """Foot of the perpendicular from each ``u`` onto its radial line."""
    d = rf.directions(X)
    d = d / np.hypot(d[:, 0], d[:, 1])[:, None]
    w = np.asarray(u, dtype=np.float64) - rf.e
    return rf.e + np.sum(w * d, axis=1)[:, None] * d


def _gauge(h):
    h = h / np.linalg.norm(h)
    return h if h[np.argmax(np.abs(h))] > 0 else -h


def _radial_residuals(p, u, xh, jac=False):
    e, h1, h2 = p[:2], p[2:5], p[5:8]
    d1, d2 = xh @ h1, xh @ h2
    w = u - e
    n = np.hypot(d1, d2)
    res = (d1 * w[:, 1] - d2 * w[:, 0]) / n
    if not jac:
        return res
    J = np.empty((len(u), 8))
    J[:, 0] = d2 / n
    J[:, 1] = -d1 / n
    g1 = w[:, 1] / n - res * d1 / n**2
    g2 = -w[:, 0] / n - res * d2 / n**2
    J[:, 2:5] = g1[:, None] * xh
    J[:, 5:8] = g2[:, None] * xh
    return res, J


def refine_F(u, X, rf0: RadialFundamental, max_iter: int = 100) -> tuple[RadialFundamental, np.ndarray]:
    """Levenberg-Marquardt on ``(e, h1, h2)`` minimising squared distances to the radial lines.

    Returns the refined matrix and the corners corrected with it. Raises
    :class:`NonConvergence` when the iteration budget runs out.
    """
    u = np.asarray(u, dtype=np.float64)
    xh = homog(X)
    if len(u) < 8:
        raise DegenerateConfiguration("corner correction needs at least 8 correspondences")
    p = np.concatenate([rf0.e, _gauge(np.concatenate([rf0.h1, rf0.h2]))])
    res, J = _radial_residuals(p, u, xh, jac=True)
    cost = float(res @ res)
    mu = None
    converged = False
    for _ in range(max_iter):
        g = J.T @ res
        H = J.T @ J
        if mu is None:
            mu = 1e-4 * float(np.max(np.diag(H)))
        if cost <= 1e-28 * max(1.0, float(np.sum(u * u))) or np.max(np.abs(g)) <= 1e-14 * max(cost, 1e-300) ** 0.5:
            converged = True
            break
        improved = False
        for _ in range(12):
            A = H + mu * (np.diag(np.diag(H)) + 1e-12 * np.eye(8))
            try:
                step = np.linalg.solve(A, -g)
            except np.linalg.LinAlgError:
                mu *= 10.0
                continue
            q = p + step
            q[2:] = _gauge(q[2:])
            r_new = _radial_residuals(q, u, xh)
            c_new = float(r_new @ r_new)
            if np.isfinite(c_new) and c_new < cost:
                rel = (cost - c_new) / cost
                p, cost = q, c_new
                res, J = _radial_residuals(p, u, xh, jac=True)
                mu = max(mu / 3.0, 1e-15)
                improved = True
                if rel < 1e-12 or np.linalg.norm(step) <= 1e-10 * (np.linalg.norm(p) + 1e-10):
                    converged = True
                break
            mu *= 4.0
        if not improved:
            converged = True
            break
        if converged:
            break
    if not converged:
        raise NonConvergence("radial fundamental refinement exceeded its iteration budget")
    rf = RadialFundamental.from_parts(p[:2], p[2:5], p[5:8])
    return rf, correct_corners(rf, u, X)


# ---------------------------------------------------------------------------
# pose and remaining intrinsics
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PartialPose:
    R: np.ndarray
    t_xy: np.ndarray
    t_z: float | None = None

    def full(self, t_z: float | None = None) -> Pose:
        tz = self.t_z if t_z is None else t_z
        return Pose(self.R, np.array([self.t_xy[0], self.t_xy[1], tz]))


def solve_pose(rf: RadialFundamental, a: float = 1.0) -> list[PartialPose]:
    """Rotation and lateral translation candidates for aspect ratio ``a``.

    ``h1 = nu * a * (r11, r12, tx)`` and ``h2 = nu * (r21, r22, ty)``; the
    scale ``nu`` and the third-row entries ``r31, r32`` follow from the unit
    norm and orthogonality of the first two rotation columns. Four candidates
    come back, one per sign of ``nu`` and of ``(r31, r32)``.
    """
    if not a > 0:
        raise NoValidRotation(f"aspect ratio must be positive, got {a}")
    h1, h2 = rf.h1, rf.h2
    G = np.array([[h1[0] / a, h1[1] / a], [h2[0], h2[1]]])
    sv = np.linalg.svd(G, compute_uv=False)
    if not sv[0] > 0.0:
        raise NoValidRotation("radial fundamental matrix carries no rotation")
    beta = 1.0 / sv[0] ** 2
    c1 = G[0, 0] ** 2 + G[1, 0] ** 2
    c2 = G[0, 1] ** 2 + G[1, 1] ** 2
    c12 = G[0, 0] * G[0, 1] + G[1, 0] * G[1, 1]
    s1, s2 = 1.0 - beta * c1, 1.0 - beta * c2
    if min(s1, s2) < -1e-8:
        raise NoValidRotation("no unit-norm completion of the rotation columns")
    if s1 >= s2:
        r31 = math.sqrt(max(s1, 0.0))
        r32 = -beta * c12 / r31 if r31 > 1e-12 else math.sqrt(max(s2, 0.0))
    else:
        r32 = math.sqrt(max(s2, 0.0))
        r31 = -beta * c12 / r32 if r32 > 1e-12 else math.sqrt(max(s1, 0.0))
    out = []
    for s_nu in (1.0, -1.0):
        nu = s_nu * sv[0]
        for s3 in (1.0, -1.0):
            r1 = np.array([G[0, 0] / nu, G[1, 0] / nu, s3 * r31])
            r2 = np.array([G[0, 1] / nu, G[1, 1] / nu, s3 * r32])
            R = nearest_rotation(np.column_stack([r1, r2, np.cross(r1, r2)]))
            t_xy = np.array([h1[2] / (a * nu), h2[2] / nu])
            out.append(PartialPose(R, t_xy))
    return out


@dataclass(frozen=True)
class LinearIntrinsics:
    f: float
    coeffs: tuple[float, ...]
    t_z: float
    residual: float
    front_fraction: float


def solve_intrinsics_depth(u, X, pose: PartialPose, e, a: float, N: int = 2) -> LinearIntrinsics:
    """Focal length, division coefficients and depth from one linear system.

    Unknowns are ``(f, l1 / f, l2 / f**3, ..., tz)``; two rows per
    correspondence come from crossing the back-projected ray with the board
    point in camera coordinates.
    """
    u = np.asarray(u, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    up = np.column_stack([(u[:, 0] - e[0]) / a, u[:, 1] - e[1]])
    R = pose.R
    xp = X @ R[0, :2] + pose.t_xy[0]
    yp = X @ R[1, :2] + pose.t_xy[1]
    zp = X @ R[2, :2]
    r2 = np.sum(up * up, axis=1)
    n = len(u)
    A = np.zeros((2 * n, N + 2))
    powers = np.ones(n)
    for k in range(N + 1):
        A[0::2, k] = xp * powers
        A[1::2, k] = yp * powers
        powers = powers * r2
    A[0::2, N + 1] = -up[:, 0]
    A[1::2, N + 1] = -up[:, 1]
    b = np.empty(2 * n)
    b[0::2] = up[:, 0] * zp
    b[1::2] = up[:, 1] * zp
    scale = np.linalg.norm(A, axis=0)
    if np.any(scale == 0.0):
        raise IllConditioned("a column of the intrinsics system vanishes")
    As = A / scale
    sol, _, rank, sv = np.linalg.lstsq(As, b, rcond=None)
    if rank < N + 2 or sv[0] > MAX_CONDITION * sv[-1]:
        raise IllConditioned(f"intrinsics system condition number {sv[0] / sv[-1]:.3g}")
    sol = sol / scale
    f = float(sol[0])
    if not f > 0.0:
        raise NegativeFocal(f"linear solve produced focal length {f:.6g}")
    t_z = float(sol[N + 1])
    coeffs = tuple(float(sol[k] * f ** (2 * k - 1)) for k in range(1, N + 1))
    resid = A @ sol - b
    depth = zp + t_z
    return LinearIntrinsics(
        f=f,
        coeffs=coeffs,
        t_z=t_z,
        residual=float(np.sqrt(np.mean(resid**2))),
        front_fraction=float(np.mean(depth > 0.0)),
    )
