"""Absolute pose from three ray / point correspondences.

With depths ``s1, s2 = x s1, s3 = y s1`` the three distance constraints

    d12^2 = s1^2 (1 + x^2 - 2 x c12)
    d13^2 = s1^2 (1 + y^2 - 2 y c13)
    d23^2 = s1^2 (x^2 + y^2 - 2 x y c23)

give ``y`` as a rational function of ``x`` after eliminating ``y^2`` between
the last two (each normalised by the first), and substituting back leaves a
quartic in ``x``. Real positive roots are polished on the original
equations and turned into a rigid transform with a Kabsch fit.
"""

from __future__ import annotations

import numpy as np

from radcal.errors import DegenerateTriple
from radcal.geometry import Pose
from radcal.polyroots import companion, solve_quadratic, trim


def _kabsch(P, Q) -> Pose:
    """Rigid transform mapping points ``P`` onto ``Q`` (rows)."""
    cp, cq = P.mean(axis=0), Q.mean(axis=0)
    H = (P - cp).T @ (Q - cq)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return Pose(R, cq - R @ cp)


def _residuals(s, c, d2):
    return np.array(
        [
            s[1] ** 2 + s[2] ** 2 - 2.0 * s[1] * s[2] * c[0] - d2[0],
            s[0] ** 2 + s[2] ** 2 - 2.0 * s[0] * s[2] * c[1] - d2[1],
            s[0] ** 2 + s[1] ** 2 - 2.0 * s[0] * s[1] * c[2] - d2[2],
        ]
    )


def _polish(s, f, c, d2, steps=12):
    # Newton on the three squared-distance equations in (s1, s2, s3)
    pairs = ((0, 1, 2), (0, 2, 1), (1, 2, 0))
    for _ in range(steps):
        F = np.empty(3)
        J = np.zeros((3, 3))
        for row, (i, j, k) in enumerate(pairs):
            F[row] = s[i] ** 2 + s[j] ** 2 - 2.0 * s[i] * s[j] * c[k] - d2[k]
            J[row, i] = 2.0 * s[i] - 2.0 * s[j] * c[k]
            J[row, j] = 2.0 * s[j] - 2.0 * s[i] * c[k]
        try:
            step = np.linalg.solve(J, F)
        except np.linalg.LinAlgError:
            break
        s_new = s - step
        if np.sum(np.abs(step)) > 0.5 * np.sum(np.abs(s)):
            break
        s = s_new
        if np.max(np.abs(step)) <= 1e-15 * np.max(np.abs(s)):
            break
    return s


def p3p(rays, points) -> list[Pose]:
    """All poses ``T`` with ``T(points[i])`` on the half-line ``rays[i]``.

    ``rays`` (3, 3) need not be normalised; ``points`` (3, 3) are in the
    source frame.
    """
    f = np.asarray(rays, dtype=np.float64).reshape(3, 3)
    X = np.asarray(points, dtype=np.float64).reshape(3, 3)
    n = np.linalg.norm(f, axis=1)
    if np.any(n == 0.0) or not np.all(np.isfinite(f)):
        raise DegenerateTriple("zero or non-finite ray")
    f = f / n[:, None]
    # c[k] is the cosine between the two rays other than k
    c = np.array([f[1] @ f[2], f[0] @ f[2], f[0] @ f[1]])
    # d2[k] is the squared distance between the two points other than k
    d2 = np.array(
        [np.sum((X[1] - X[2]) ** 2), np.sum((X[0] - X[2]) ** 2), np.sum((X[0] - X[1]) ** 2)]
    )
    scale = np.max(d2)
    if scale == 0.0 or np.linalg.norm(np.cross(X[1] - X[0], X[2] - X[0])) ** 2 <= 1e-12 * scale**2:
        raise DegenerateTriple("board points are collinear")
    if np.max(np.abs(c)) >= 1.0 - 1e-14:
        raise DegenerateTriple("two rays coincide")
    c23, c13, c12 = c
    d23, d13, d12 = d2 / scale

    # y = -P(x) / D(x)
    D = np.array([2.0 * d12 * c13, -2.0 * d12 * c23])
    P = np.array([d13 - d12 - d23, -2.0 * c12 * (d13 - d23), d13 - d23 + d12])
    D2 = np.polynomial.polynomial.polymul(D, D)
    P2 = np.polynomial.polynomial.polymul(P, P)
    PD = np.polynomial.polynomial.polymul(P, D)
    lhs = d12 * np.polynomial.polynomial.polyadd(np.polynomial.polynomial.polyadd(D2, P2), 2.0 * c13 * PD)
    rhs = d13 * np.polynomial.polynomial.polymul([1.0, -2.0 * c12, 1.0], D2)
    quartic = np.polynomial.polynomial.polysub(lhs, rhs)

    # near-double roots come out of the eigen-solver with a small imaginary
    # part; keep them and let the polish and residual check decide
    quartic = trim(quartic)
    if quartic.size < 2:
        raise DegenerateTriple("elimination polynomial vanishes")
    ev = np.linalg.eigvals(companion(quartic))
    xs = ev.real[np.abs(ev.imag) <= 1e-4 * (1.0 + np.abs(ev.real))]
    out = []
    for x in np.sort(xs):
        if x <= 0.0:
            continue
        q = 1.0 + x * x - 2.0 * x * c12
        if q <= 0.0:
            continue
        Dx = D[0] + D[1] * x
        if abs(Dx) > 1e-8:
            ys = [-(P[0] + P[1] * x + P[2] * x * x) / Dx]
        else:
            # the rational form breaks down; take y from the second constraint
            ys = solve_quadratic(d12 - d13 * q, -2.0 * d12 * c13, d12)
        s1 = np.sqrt(d12 * scale / q)
        for y in ys:
            if y <= 0.0:
                continue
            s = _polish(np.array([s1, x * s1, y * s1]), f, c, d2)
            if np.any(s <= 0.0) or np.max(np.abs(_residuals(s, c, d2))) > 1e-6 * scale:
                continue
            pose = _kabsch(X, f * s[:, None])
            if not any(np.allclose(pose.matrix, o.matrix, atol=1e-9 * np.sqrt(scale)) for o in out):
                out.append(pose)
    return out
