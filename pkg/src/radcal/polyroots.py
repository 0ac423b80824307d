"""Real-root isolation for the small polynomials that show up in the solvers.

Coefficients are ascending throughout: ``c[0] + c[1] x + c[2] x**2 + ...``.
"""

from __future__ import annotations

import math

import numpy as np

IMAG_TOL = 1e-10


def trim(c) -> np.ndarray:
    """Drop vanishing leading (highest-degree) coefficients."""
    c = np.atleast_1d(np.asarray(c, dtype=np.float64))
    scale = np.max(np.abs(c)) if c.size else 0.0
    if scale == 0.0:
        return c[:1] * 0.0
    n = c.size
    while n > 1 and abs(c[n - 1]) <= 1e-15 * scale:
        n -= 1
    return c[:n]


def polyval(c, x):
    c = np.asarray(c, dtype=np.float64)
    out = np.zeros_like(np.asarray(x, dtype=np.float64)) + c[-1]
    for k in range(c.size - 2, -1, -1):
        out = out * x + c[k]
    return out


def polyder(c) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    if c.size <= 1:
        return np.zeros(1)
    return c[1:] * np.arange(1, c.size)


def companion(c) -> np.ndarray:
    """Companion matrix of the monic-normalised polynomial ``c``."""
    c = trim(c)
    n = c.size - 1
    if n < 1:
        raise ValueError("constant polynomial has no companion matrix")
    m = np.zeros((n, n))
    m[1:, :-1] = np.eye(n - 1)
    m[:, -1] = -c[:-1] / c[-1]
    return m


def _polish(c, x, dc=None, steps=3):
    if dc is None:
        dc = polyder(c)
    for _ in range(steps):
        fx = polyval(c, x)
        dfx = polyval(dc, x)
        if dfx == 0.0 or not np.isfinite(dfx):
            break
        step = fx / dfx
        x_new = x - step
        if abs(polyval(c, x_new)) > abs(fx):
            break
        x = x_new
    return x


def real_roots(c, polish: bool = True) -> np.ndarray:
    """All real roots, from the eigenvalues of the companion matrix."""
    c = trim(c)
    if c.size < 2:
        return np.empty(0)
    # roots at the origin would make the companion matrix singular but are fine
    nz = 0
    while nz < c.size - 1 and c[nz] == 0.0:
        nz += 1
    roots = [0.0] * nz
    cc = c[nz:]
    if cc.size >= 2:
        ev = np.linalg.eigvals(companion(cc))
        keep = np.abs(ev.imag) <= IMAG_TOL * np.maximum(1.0, np.abs(ev.real))
        dc = polyder(cc)
        for x in np.sort(ev.real[keep]):
            roots.append(_polish(cc, float(x), dc) if polish else float(x))
    return np.sort(np.asarray(roots, dtype=np.float64))


def real_roots_in(c, lo: float, hi: float) -> np.ndarray:
    r = real_roots(c)
    return r[(r >= lo) & (r <= hi)]


def solve_quadratic(c0: float, c1: float, c2: float) -> list[float]:
    if c2 == 0.0:
        return [] if c1 == 0.0 else [-c0 / c1]
    disc = c1 * c1 - 4.0 * c2 * c0
    if disc < 0.0:
        return []
    sq = math.sqrt(disc)
    # numerically stable pair
    q = -0.5 * (c1 + math.copysign(sq, c1))
    if q == 0.0:
        return [0.0, 0.0]
    return sorted([q / c2, c0 / q])


def solve_cubic(c0: float, c1: float, c2: float, c3: float) -> list[float]:
    """Real roots of ``c3 t^3 + c2 t^2 + c1 t + c0`` by Cardano's formula.

    Near-degenerate leading coefficients deflate to the quadratic. Roots are
    Newton-polished against the original coefficients.
    """
    scale = max(abs(c0), abs(c1), abs(c2), abs(c3))
    if scale == 0.0:
        return []
    if abs(c3) <= 1e-14 * scale:
        return solve_quadratic(c0, c1, c2)
    a, b, c = c2 / c3, c1 / c3, c0 / c3
    # depressed cubic t = y - a/3 : y^3 + p y + q = 0
    p = b - a * a / 3.0
    q = 2.0 * a * a * a / 27.0 - a * b / 3.0 + c
    shift = -a / 3.0
    disc = (q / 2.0) ** 2 + (p / 3.0) ** 3
    if disc > 0.0:
        sq = math.sqrt(disc)
        u = np.cbrt(-q / 2.0 + sq)
        v = np.cbrt(-q / 2.0 - sq)
        ys = [float(u + v)]
    elif p == 0.0:
        ys = [float(np.cbrt(-q))]
    else:
        m = 2.0 * math.sqrt(-p / 3.0)
        arg = 3.0 * q / (p * m)
        theta = math.acos(max(-1.0, min(1.0, arg))) / 3.0
        ys = [m * math.cos(theta - 2.0 * math.pi * k / 3.0) for k in range(3)]
    coeffs = np.array([c0, c1, c2, c3])
    dc = polyder(coeffs)
    return sorted(_polish(coeffs, y + shift, dc) for y in ys)
