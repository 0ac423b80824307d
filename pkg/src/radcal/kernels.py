"""Hot radial kernels, each with a numba path and a pure-numpy path.

Every public function here dispatches on :data:`radcal._accel.USE_NUMBA`.
The ``*_nb`` / ``*_np`` variants are importable directly so the benchmark and
the agreement tests can exercise both regardless of the flag.

Forward kind codes: 0 BC, 1 KB, 2 UCM, 3 FOV, 4 EUCM, 5 DS.
Division status codes: 0 ok, 1 no root in range, 2 multiple roots.
"""

from __future__ import annotations

import math

import numpy as np

from radcal import _accel
from radcal._accel import njit

OK, NO_ROOT, MULTIPLE = 0, 1, 2

BC, KB, UCM, FOV, EUCM, DS = range(6)


# ---------------------------------------------------------------------------
# division model: r such that r*cos(theta) - sin(theta)*psi(r) = 0
# ---------------------------------------------------------------------------


@njit
def _horner2(c, r):
    p = c[c.shape[0] - 1]
    dp = 0.0
    for k in range(c.shape[0] - 2, -1, -1):
        dp = dp * r + p
        p = p * r + c[k]
    return p, dp


@njit
def _segment_root(ct, st, c, lo, hi):
    p, dp = _horner2(c, lo)
    glo = lo * ct - st * p
    p, dp = _horner2(c, hi)
    ghi = hi * ct - st * p
    if glo == 0.0:
        return lo
    if ghi == 0.0:
        return hi
    if glo < 0.0:
        xl, xh = lo, hi
    else:
        xl, xh = hi, lo
    r = 0.5 * (lo + hi)
    dxold = abs(hi - lo)
    dx = dxold
    p, dp = _horner2(c, r)
    g = r * ct - st * p
    dg = ct - st * dp
    for _ in range(200):
        if ((r - xh) * dg - g) * ((r - xl) * dg - g) > 0.0 or abs(2.0 * g) > abs(dxold * dg):
            dxold = dx
            dx = 0.5 * (xh - xl)
            r = xl + dx
            if xl == r:
                return r
        else:
            dxold = dx
            dx = g / dg
            tmp = r
            r -= dx
            if tmp == r:
                return r
        if abs(dx) <= 1e-16 * abs(r) + 1e-300:
            return r
        p, dp = _horner2(c, r)
        g = r * ct - st * p
        dg = ct - st * dp
        if g < 0.0:
            xl = r
        elif g > 0.0:
            xh = r
        else:
            return r
    return r


@njit
def division_radius_nb(theta, coeffs, seg_r, seg_w):
    n = theta.shape[0]
    m = seg_r.shape[0] - 1
    r_out = np.empty(n)
    status = np.zeros(n, dtype=np.int8)
    for i in range(n):
        th = theta[i]
        if not (th == th):
            r_out[i] = np.nan
            status[i] = NO_ROOT
            continue
        if th <= 0.0:
            r_out[i] = 0.0
            continue
        count = 0
        sidx = -1
        for s in range(m):
            wl = seg_w[s]
            wh = seg_w[s + 1]
            if wh >= wl:
                inside = wl < th and th <= wh
            else:
                inside = wh <= th and th < wl
            if inside:
                count += 1
                sidx = s
        if count == 0:
            r_out[i] = np.nan
            status[i] = NO_ROOT
        elif count > 1:
            r_out[i] = np.nan
            status[i] = MULTIPLE
        else:
            r_out[i] = _segment_root(math.cos(th), math.sin(th), coeffs, seg_r[sidx], seg_r[sidx + 1])
    return r_out, status


def _horner_np(c, r):
    p = np.full_like(r, c[-1])
    dp = np.zeros_like(r)
    for k in range(c.size - 2, -1, -1):
        dp = dp * r + p
        p = p * r + c[k]
    return p, dp


def division_radius_np(theta, coeffs, seg_r, seg_w):
    theta = np.asarray(theta, dtype=np.float64)
    n = theta.size
    r_out = np.full(n, np.nan)
    status = np.zeros(n, dtype=np.int8)
    bad = ~np.isfinite(theta)
    status[bad] = NO_ROOT
    axis = ~bad & (theta <= 0.0)
    r_out[axis] = 0.0
    work = np.flatnonzero(~bad & ~axis)
    if work.size == 0:
        return r_out, status
    th = theta[work][:, None]
    wl, wh = seg_w[:-1][None, :], seg_w[1:][None, :]
    inside = np.where(wh >= wl, (wl < th) & (th <= wh), (wh <= th) & (th < wl))
    count = inside.sum(axis=1)
    status[work[count == 0]] = NO_ROOT
    status[work[count > 1]] = MULTIPLE
    one = count == 1
    idx = work[one]
    if idx.size == 0:
        return r_out, status
    sidx = np.argmax(inside[one], axis=1)
    lo, hi = seg_r[sidx].copy(), seg_r[sidx + 1].copy()
    t = theta[idx]
    ct, st = np.cos(t), np.sin(t)
    glo = lo * ct - st * _horner_np(coeffs, lo)[0]
    xl = np.where(glo < 0.0, lo, hi)
    xh = np.where(glo < 0.0, hi, lo)
    for _ in range(64):
        mid = 0.5 * (xl + xh)
        g = mid * ct - st * _horner_np(coeffs, mid)[0]
        neg = g < 0.0
        xl = np.where(neg, mid, xl)
        xh = np.where(neg, xh, mid)
    r = 0.5 * (xl + xh)
    for _ in range(2):
        p, dp = _horner_np(coeffs, r)
        g = r * ct - st * p
        dg = ct - st * dp
        with np.errstate(divide="ignore", invalid="ignore"):
            cand = r - g / dg
        ok = np.isfinite(cand) & (cand >= np.minimum(lo, hi)) & (cand <= np.maximum(lo, hi))
        r = np.where(ok, cand, r)
    r_out[idx] = r
    return r_out, status


def division_radius(theta, coeffs, seg_r, seg_w):
    """Retinal radius for each ray polar angle ``theta`` under a division profile.

    ``seg_r``/``seg_w`` are the monotone-segment breakpoints of the profile and
    the ray angle at each of them (see ``models.RootTable``).
    """
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    args = (
        np.ascontiguousarray(coeffs, dtype=np.float64),
        np.ascontiguousarray(seg_r, dtype=np.float64),
        np.ascontiguousarray(seg_w, dtype=np.float64),
    )
    if _accel.USE_NUMBA:
        return division_radius_nb(theta, *args)
    return division_radius_np(theta, *args)


# ---------------------------------------------------------------------------
# forward radial projection functions
# ---------------------------------------------------------------------------


@njit
def phi_scalar(code, p, R, Z):
    """Returns (r, valid)."""
    if code == BC:
        if Z <= 0.0:
            return np.nan, False
        m = R / Z
        m2 = m * m
        return m * (1.0 + p[0] * m2 + p[1] * m2 * m2), True
    if code == KB:
        if R == 0.0 and Z == 0.0:
            return np.nan, False
        z = math.atan2(R, Z)
        z2 = z * z
        return z * (1.0 + z2 * (p[0] + z2 * (p[1] + z2 * (p[2] + z2 * p[3])))), True
    if code == UCM:
        d = math.sqrt(R * R + Z * Z)
        den = p[0] * d + Z
        if not den > 0.0:
            return np.nan, False
        return R * (p[0] + 1.0) / den, True
    if code == FOV:
        w = p[0]
        if w == 0.0 or (R == 0.0 and Z == 0.0):
            return np.nan, False
        return math.atan2(2.0 * R * math.tan(0.5 * w), Z) / w, True
    if code == EUCM:
        d = math.sqrt(p[1] * R * R + Z * Z)
        den = p[0] * d + (1.0 - p[0]) * Z
        if not den > 0.0:
            return np.nan, False
        return R / den, True
    if code == DS:
        d1 = math.sqrt(R * R + Z * Z)
        z2 = p[0] * d1 + Z
        d2 = math.sqrt(R * R + z2 * z2)
        den = p[1] * d2 + (1.0 - p[1]) * z2
        if not den > 0.0:
            return np.nan, False
        return R / den, True
    return np.nan, False


@njit
def phi_nb(code, p, R, Z):
    n = R.shape[0]
    out = np.empty(n)
    valid = np.empty(n, dtype=np.bool_)
    for i in range(n):
        out[i], valid[i] = phi_scalar(code, p, R[i], Z[i])
    return out, valid


def phi_np(code, p, R, Z):
    R = np.asarray(R, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        if code == BC:
            valid = Z > 0.0
            m = R / Z
            m2 = m * m
            out = m * (1.0 + p[0] * m2 + p[1] * m2 * m2)
        elif code == KB:
            valid = ~((R == 0.0) & (Z == 0.0))
            z = np.arctan2(R, Z)
            z2 = z * z
            out = z * (1.0 + z2 * (p[0] + z2 * (p[1] + z2 * (p[2] + z2 * p[3]))))
        elif code == UCM:
            d = np.sqrt(R * R + Z * Z)
            den = p[0] * d + Z
            valid = den > 0.0
            out = R * (p[0] + 1.0) / den
        elif code == FOV:
            w = p[0]
            valid = ~((R == 0.0) & (Z == 0.0)) & (w != 0.0)
            out = np.arctan2(2.0 * R * np.tan(0.5 * w), Z) / w
        elif code == EUCM:
            d = np.sqrt(p[1] * R * R + Z * Z)
            den = p[0] * d + (1.0 - p[0]) * Z
            valid = den > 0.0
            out = R / den
        elif code == DS:
            d1 = np.sqrt(R * R + Z * Z)
            z2 = p[0] * d1 + Z
            d2 = np.sqrt(R * R + z2 * z2)
            den = p[1] * d2 + (1.0 - p[1]) * z2
            valid = den > 0.0
            out = R / den
        else:
            raise ValueError(f"unknown forward kind code {code}")
    out = np.where(valid, out, np.nan)
    return out, np.asarray(valid, dtype=bool)


def phi(code, p, R, Z):
    R = np.ascontiguousarray(R, dtype=np.float64)
    Z = np.ascontiguousarray(Z, dtype=np.float64)
    p = np.zeros(4) + np.pad(np.asarray(p, dtype=np.float64), (0, max(0, 4 - len(p))))[:4]
    if _accel.USE_NUMBA:
        return phi_nb(int(code), p, R, Z)
    return phi_np(int(code), p, R, Z)


# ---------------------------------------------------------------------------
# inverse of a forward model: polar angle zeta with phi(sin z, cos z) = r
# ---------------------------------------------------------------------------


@njit
def phi_inverse_nb(code, p, r, z_grid, f_grid):
    n = r.shape[0]
    m = z_grid.shape[0]
    out = np.empty(n)
    valid = np.zeros(n, dtype=np.bool_)
    for i in range(n):
        ri = r[i]
        if not (ri >= 0.0) or ri > f_grid[m - 1]:
            out[i] = np.nan
            continue
        if ri == 0.0:
            out[i] = 0.0
            valid[i] = True
            continue
        # first grid point with f >= r
        lo_i = 0
        hi_i = m - 1
        while hi_i - lo_i > 1:
            mid = (lo_i + hi_i) // 2
            if f_grid[mid] >= ri:
                hi_i = mid
            else:
                lo_i = mid
        a = z_grid[lo_i]
        b = z_grid[hi_i]
        for _ in range(100):
            c = 0.5 * (a + b)
            if c == a or c == b:
                break
            fc, ok = phi_scalar(code, p, math.sin(c), math.cos(c))
            if fc < ri:
                a = c
            else:
                b = c
        out[i] = 0.5 * (a + b)
        valid[i] = True
    return out, valid


def phi_inverse_np(code, p, r, z_grid, f_grid):
    r = np.asarray(r, dtype=np.float64)
    out = np.full(r.size, np.nan)
    valid = np.isfinite(r) & (r >= 0.0) & (r <= f_grid[-1])
    idx = np.flatnonzero(valid)
    if idx.size == 0:
        return out, valid
    rr = r[idx]
    hi_i = np.clip(np.searchsorted(f_grid, rr, side="left"), 1, f_grid.size - 1)
    a = z_grid[hi_i - 1].copy()
    b = z_grid[hi_i].copy()
    for _ in range(60):
        c = 0.5 * (a + b)
        fc, _ = phi_np(code, p, np.sin(c), np.cos(c))
        low = fc < rr
        a = np.where(low, c, a)
        b = np.where(low, b, c)
    z = 0.5 * (a + b)
    z[rr == 0.0] = 0.0
    out[idx] = z
    return out, valid


def phi_inverse(code, p, r, z_grid, f_grid):
    r = np.ascontiguousarray(r, dtype=np.float64)
    p = np.zeros(4) + np.pad(np.asarray(p, dtype=np.float64), (0, max(0, 4 - len(p))))[:4]
    if _accel.USE_NUMBA:
        return phi_inverse_nb(int(code), p, r, z_grid, f_grid)
    return phi_inverse_np(int(code), p, r, z_grid, f_grid)


# ---------------------------------------------------------------------------
# robust loss
# ---------------------------------------------------------------------------


def huber(d, tau):
    """Huber penalty of non-negative distances ``d`` at scale ``tau``."""
    d = np.asarray(d, dtype=np.float64)
    return np.where(d <= tau, 0.5 * d * d, tau * (d - 0.5 * tau))
