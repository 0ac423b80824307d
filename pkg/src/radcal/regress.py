"""Fit any target model to a division back-projection.

Samples ``(R, Z) = (r, psi(r))`` of the division profile are rays whose
image lies at retinal radius ``r``; a target model is fitted so that its
forward radius ``phi(R, Z)`` reproduces ``r``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import least_squares

from radcal import kernels
from radcal.errors import IllConditioned, InvalidParams, RegressionDiverged
from radcal.models import (
    BackProjCamera,
    DivisionProfile,
    Intrinsics,
    ModelKind,
    TargetModel,
    back_project,
    monotone_limit,
    unproject_pixels,
)

DEFAULT_SAMPLES = 100
MAX_CONDITION = 1e12


@dataclass(frozen=True, eq=False)
class ProfileSample:
    """``K`` samples of a back-projection profile, increasing in ``r``."""

    r: np.ndarray
    R: np.ndarray
    Z: np.ndarray

    def __len__(self) -> int:
        return self.r.size


@dataclass(frozen=True, eq=False)
class RegressionResult:
    model: TargetModel
    intrinsics: Intrinsics
    rms: float
    max_abs: float
    samples: int


def sample_profile(cam: BackProjCamera, K: int = DEFAULT_SAMPLES, r_limit: float | None = None) -> ProfileSample:
    """``K`` uniform radii on ``[0, r_hi]``.

    ``r_hi`` is ``r_limit`` when given, else the profile's ``r_max``; it is
    clipped to where the profile stops being invertible.
    """
    if K < 2:
        raise ValueError("need at least two samples")
    r_hi = cam.profile.r_max if r_limit is None else float(r_limit)
    r_hi = min(r_hi, monotone_limit(cam.as_target()))
    r = np.linspace(0.0, r_hi, K)
    Z = np.polynomial.polynomial.polyval(r, cam.profile.poly())
    return ProfileSample(r=r, R=r.copy(), Z=Z)


def _lstsq(A, b, what):
    scale = np.linalg.norm(A, axis=0)
    if np.any(scale == 0.0):
        raise IllConditioned(f"{what}: a design column vanishes")
    sol, _, rank, sv = np.linalg.lstsq(A / scale, b, rcond=None)
    if rank < A.shape[1] or sv[0] > MAX_CONDITION * sv[-1]:
        raise IllConditioned(f"{what}: design matrix is ill-conditioned")
    return sol / scale


def _phi(kind: ModelKind, params, R, Z):
    return kernels.phi(kind.code, tuple(params), R, Z)


def _objective(kind, params, s, scale=1.0):
    r, valid = _phi(kind, params, s.R, s.Z)
    res = scale * r - s.r
    # unprojectable samples count as a miss of the full radius range
    return np.where(valid, res, s.r[-1] + 1.0)


def _fit_bc(s):
    keep = s.Z > 0.0
    m = s.R[keep] / s.Z[keep]
    A = np.column_stack([m**3, m**5])
    return _lstsq(A, s.r[keep] - m, "bc regression")


def _fit_kb(s):
    w = np.arctan2(s.R, s.Z)
    A = np.column_stack([w**3, w**5, w**7, w**9])
    return _lstsq(A, s.r - w, "kb regression")


def _fit_ucm(s):
    # r (xi d + Z) = R (xi + 1)  ->  xi (r d - R) = R - r Z
    d = np.hypot(s.R, s.Z)
    a = s.r * d - s.R
    b = s.R - s.r * s.Z
    if not np.any(a != 0.0):
        return np.array([0.0])
    return np.array([float(a @ b / (a @ a))])


def _fit_eucm(s):
    # alpha r d = R - r Z + alpha r Z, squared:
    # (alpha^2 beta) r^2 R^2 - 2 alpha r Z (R - r Z) = (R - r Z)^2
    c = s.R - s.r * s.Z
    A = np.column_stack([s.r**2 * s.R**2, -2.0 * s.r * s.Z * c])
    b = c**2
    if np.max(np.abs(b)) <= 1e-300:
        return np.array([0.0, 1.0])
    g1, g2 = _lstsq(A, b, "eucm regression")
    alpha = float(g2)
    if abs(alpha) <= 1e-12:
        return np.array([0.0, 1.0])
    return np.array([alpha, float(g1) / alpha**2])


def _best_scale(r_model, valid, s):
    rm = np.where(valid, r_model, 0.0)
    den = float(rm @ rm)
    return float(rm @ s.r) / den if den > 0.0 else 1.0


def _fit_nonlinear(kind, s, seeds, lower, upper):
    """Grid seeds with the focal scale eliminated in closed form, then a bounded
    trust-region solve from the best seed of every value of the first parameter.

    The double-sphere family has long shallow valleys, so a single start from
    the global best seed is not enough.
    """
    scored = []
    for p in seeds:
        r_model, valid = _phi(kind, p, s.R, s.Z)
        if not valid.all():
            continue
        c = _best_scale(r_model, valid, s)
        scored.append((float(np.sum((c * r_model - s.r) ** 2)), np.array([*p, c])))
    if not scored:
        raise RegressionDiverged(f"{kind.value}: no grid seed projects every sample")
    scored.sort(key=lambda item: item[0])
    best_cost, best_x = scored[0]
    starts = {}
    for cost, x in scored:
        starts.setdefault(float(x[0]), x)

    def fun(x):
        return _objective(kind, x[:-1], s, x[-1])

    bounds = (lower + [1e-6], upper + [np.inf])
    for x0 in starts.values():
        try:
            sol = least_squares(fun, x0, method="trf", bounds=bounds, x_scale="jac", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=2000)
        except (ValueError, np.linalg.LinAlgError):
            continue
        if np.all(np.isfinite(sol.x)) and 2.0 * sol.cost < best_cost:
            best_cost, best_x = 2.0 * sol.cost, sol.x
    if not np.all(np.isfinite(best_x)):
        raise RegressionDiverged(f"{kind.value}: non-finite parameters")
    return best_x[:-1], float(best_x[-1])


def _fit_fov(s):
    seeds = [(w,) for w in np.linspace(0.01, math.pi, 40)]
    return _fit_nonlinear(ModelKind.FOV, s, seeds, [1e-6], [math.pi - 1e-6])


def _fit_ds(s):
    seeds = [(xi, al) for xi in np.linspace(-1.0, 1.0, 20) for al in np.linspace(0.0, 1.0, 20)]
    return _fit_nonlinear(ModelKind.DS, s, seeds, [-1.0, 0.0], [2.0, 1.0])


def _fit_division(kind, s, N):
    if kind is ModelKind.DIV:
        A = np.column_stack([s.r**2, s.r**3, s.r**4])
    else:
        A = np.column_stack([s.r ** (2 * n) for n in range(1, N + 1)])
    return _lstsq(A, s.Z - 1.0, f"{kind.value} regression")


def fit_profile(kind, s: ProfileSample, degree: int = 2) -> tuple[tuple[float, ...], float]:
    """Parameters of ``kind`` and focal scale fitted to profile samples."""
    kind = ModelKind(kind)
    scale = 1.0
    if kind is ModelKind.BC:
        params = _fit_bc(s)
    elif kind is ModelKind.KB:
        params = _fit_kb(s)
    elif kind is ModelKind.UCM:
        params = _fit_ucm(s)
    elif kind is ModelKind.EUCM:
        params = _fit_eucm(s)
    elif kind is ModelKind.FOV:
        params, scale = _fit_fov(s)
    elif kind is ModelKind.DS:
        params, scale = _fit_ds(s)
    else:
        params = _fit_division(kind, s, degree)
    return tuple(float(p) for p in params), scale


def regress_model(
    kind,
    cam: BackProjCamera,
    K: int = DEFAULT_SAMPLES,
    r_limit: float | None = None,
    degree: int | None = None,
) -> RegressionResult:
    """Least-squares fit of ``kind`` to the division profile of ``cam``.

    BC, KB, UCM and EUCM use linear formulations; FOV and DS are seeded
    from a parameter grid and finished with a bounded trust-region solve,
    jointly with a focal-length scale because their paraxial magnification
    is not one. Backward kinds fit the profile polynomial directly.
    """
    kind = ModelKind(kind)
    intr = cam.intrinsics
    r_max = cam.profile.r_max
    if kind is ModelKind.DIV_EVEN and (degree is None or degree == cam.profile.degree):
        return RegressionResult(cam.as_target(), intr, 0.0, 0.0, K)
    s = sample_profile(cam, K, r_limit)
    params, scale = fit_profile(kind, s, degree or cam.profile.degree)
    if kind.is_backward:
        model = TargetModel(kind, params, r_max)
        res = np.polynomial.polynomial.polyval(s.r, model.psi_poly()) - s.Z
        return RegressionResult(model, intr, float(np.sqrt(np.mean(res**2))), float(np.max(np.abs(res))), len(s))
    model = TargetModel(kind, params)
    if scale != 1.0:
        intr = replace(intr, f=intr.f * scale)
    res = _objective(kind, model.params, s, scale)
    return RegressionResult(model, intr, float(np.sqrt(np.mean(res**2))), float(np.max(np.abs(res))), len(s))


def division_from_model(
    model: TargetModel,
    intr: Intrinsics,
    N: int,
    r_limit: float,
    r_max: float | None = None,
    K: int = DEFAULT_SAMPLES,
) -> BackProjCamera:
    """Division back-projection approximating a forward model.

    From ``psi(r) = r / tan(omega)``: ``sin(omega) * sum(l_n r^2n) = r cos(omega) - sin(omega)``.
    """
    if model.kind.is_backward and (model.kind is ModelKind.DIV_EVEN and len(model.params) == N):
        return BackProjCamera(intr, DivisionProfile(model.params, r_max or model.r_bound))
    r = np.linspace(0.0, r_limit, K)[1:]
    pix = intr.to_pixels(np.column_stack([r, np.zeros_like(r)]))
    rays, valid = unproject_pixels(model, intr, pix)
    if valid.sum() < N + 1:
        raise IllConditioned("too few invertible samples to fit a division profile")
    r, rays = r[valid], rays[valid]
    sw, cw = np.hypot(rays[:, 0], rays[:, 1]), rays[:, 2]
    A = np.column_stack([sw * r ** (2 * n) for n in range(1, N + 1)])
    lam = _lstsq(A, r * cw - sw, "division back-fit")
    return BackProjCamera(intr, DivisionProfile(tuple(float(v) for v in lam), r_max or r_limit))


def kb_from_rays(u, cam: BackProjCamera) -> TargetModel:
    """Kannala-Brandt coefficients from the polar angles of back-projected corners."""
    u = np.asarray(u, dtype=np.float64).reshape(-1, 2)
    rays = back_project(cam, u)
    rays = rays / np.linalg.norm(rays, axis=1, keepdims=True)
    w = np.arctan2(np.hypot(rays[:, 0], rays[:, 1]), rays[:, 2])
    m = cam.intrinsics.to_retinal(u)
    r = np.hypot(m[:, 0], m[:, 1])
    if len(u) < 4 or np.ptp(w) <= 1e-6:
        raise IllConditioned("polar angles span too narrow a range")
    A = np.column_stack([w**3, w**5, w**7, w**9])
    k = _lstsq(A, r - w, "kb from rays")
    return TargetModel(ModelKind.KB, tuple(float(v) for v in k))


def profile_deviation(result: RegressionResult, cam: BackProjCamera, K: int = 1000, r_limit: float | None = None) -> float:
    """Largest pixel-radius disagreement between ``cam`` and the regressed model."""
    s = sample_profile(cam, K, r_limit)
    if result.model.kind.is_backward:
        Zm = np.polynomial.polynomial.polyval(s.r, result.model.psi_poly())
        return float(np.max(np.abs(Zm - s.Z)))
    r_model, valid = _phi(result.model.kind, result.model.params, s.R, s.Z)
    px = np.where(valid, r_model * result.intrinsics.f, np.inf)
    return float(np.max(np.abs(px - s.r * cam.intrinsics.f)))


__all__ = [
    "DEFAULT_SAMPLES",
    "ProfileSample",
    "RegressionResult",
    "division_from_model",
    "fit_profile",
    "kb_from_rays",
    "profile_deviation",
    "regress_model",
    "sample_profile",
]
