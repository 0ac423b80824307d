"""Camera model catalogue.

A central camera is split into a sensor mapping (:class:`Intrinsics`) and a
radially symmetric part. The radial part is either a forward model, which maps
a ray with radial component ``R`` and depth ``Z`` to a retinal radius ``r``,
or a backward (division) model, which maps ``r`` to the ray ``(r, psi(r))``.

Retinal coordinates are normalised: ``m = ((u - ex) / (a f), (v - ey) / f)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache

import numpy as np

from radcal import kernels
from radcal.errors import DomainError, InvalidParams, MultipleRoots, NoRootInRange
from radcal.polyroots import real_roots_in

# status codes returned by the batched projections
OK, NO_ROOT, MULTIPLE = kernels.OK, kernels.NO_ROOT, kernels.MULTIPLE


class ModelKind(str, Enum):
    BC = "bc"
    KB = "kb"
    UCM = "ucm"
    FOV = "fov"
    EUCM = "eucm"
    DS = "ds"
    DIV = "div"
    DIV_EVEN = "div-even"

    @property
    def is_backward(self) -> bool:
        return self in (ModelKind.DIV, ModelKind.DIV_EVEN)

    @property
    def code(self) -> int:
        return _FORWARD_CODES[self]


_FORWARD_CODES = {
    ModelKind.BC: kernels.BC,
    ModelKind.KB: kernels.KB,
    ModelKind.UCM: kernels.UCM,
    ModelKind.FOV: kernels.FOV,
    ModelKind.EUCM: kernels.EUCM,
    ModelKind.DS: kernels.DS,
}

PARAM_COUNT = {
    ModelKind.BC: 2,
    ModelKind.KB: 4,
    ModelKind.UCM: 1,
    ModelKind.FOV: 1,
    ModelKind.EUCM: 2,
    ModelKind.DS: 2,
    ModelKind.DIV: 3,
}

PARAM_NAMES = {
    ModelKind.BC: ("k1", "k2"),
    ModelKind.KB: ("k1", "k2", "k3", "k4"),
    ModelKind.UCM: ("xi",),
    ModelKind.FOV: ("w",),
    ModelKind.EUCM: ("alpha", "beta"),
    ModelKind.DS: ("xi", "alpha"),
    ModelKind.DIV: ("a1", "a2", "a3"),
}

# radius bound used when a backward model carries no image extent
DEFAULT_R_MAX = 1e3


@dataclass(frozen=True)
class Intrinsics:
    e: tuple[float, float]
    a: float = 1.0
    f: float = 1.0

    def __post_init__(self):
        e = tuple(float(v) for v in self.e)
        object.__setattr__(self, "e", e)
        object.__setattr__(self, "a", float(self.a))
        object.__setattr__(self, "f", float(self.f))
        if not (self.a > 0 and self.f > 0 and all(math.isfinite(v) for v in e)):
            raise InvalidParams(f"invalid intrinsics e={e} a={self.a} f={self.f}")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.a * self.f, 0.0, self.e[0]], [0.0, self.f, self.e[1]], [0.0, 0.0, 1.0]])

    def to_retinal(self, pix) -> np.ndarray:
        pix = np.asarray(pix, dtype=np.float64)
        m = np.empty_like(pix)
        m[..., 0] = (pix[..., 0] - self.e[0]) / (self.a * self.f)
        m[..., 1] = (pix[..., 1] - self.e[1]) / self.f
        return m

    def to_pixels(self, m) -> np.ndarray:
        m = np.asarray(m, dtype=np.float64)
        pix = np.empty_like(m)
        pix[..., 0] = self.e[0] + self.a * self.f * m[..., 0]
        pix[..., 1] = self.e[1] + self.f * m[..., 1]
        return pix

    def r_max_for(self, image_size) -> float:
        """Largest retinal radius of any pixel in a ``w x h`` image."""
        w, h = image_size
        corners = self.to_retinal(np.array([[0.0, 0.0], [w, 0.0], [0.0, h], [w, h]]))
        return float(np.max(np.hypot(corners[:, 0], corners[:, 1])))


@dataclass(frozen=True)
class DivisionProfile:
    coeffs: tuple[float, ...] = (0.0, 0.0)
    r_max: float = DEFAULT_R_MAX

    def __post_init__(self):
        object.__setattr__(self, "coeffs", tuple(float(c) for c in self.coeffs))
        object.__setattr__(self, "r_max", float(self.r_max))

    @property
    def degree(self) -> int:
        return len(self.coeffs)

    def poly(self) -> np.ndarray:
        """Ascending coefficients of psi as a dense polynomial in r."""
        c = np.zeros(2 * len(self.coeffs) + 1)
        c[0] = 1.0
        c[2::2] = self.coeffs
        return c


@dataclass(frozen=True)
class BackProjCamera:
    intrinsics: Intrinsics
    profile: DivisionProfile

    def as_target(self) -> TargetModel:
        return TargetModel(ModelKind.DIV_EVEN, self.profile.coeffs, self.profile.r_max)


@dataclass(frozen=True)
class TargetModel:
    kind: ModelKind
    params: tuple[float, ...]
    r_max: float | None = field(default=None, compare=True)

    def __post_init__(self):
        kind = ModelKind(self.kind)
        object.__setattr__(self, "kind", kind)
        params = tuple(float(p) for p in self.params)
        object.__setattr__(self, "params", params)
        if self.r_max is not None:
            object.__setattr__(self, "r_max", float(self.r_max))
        n = PARAM_COUNT.get(kind)
        if n is not None and len(params) != n:
            raise InvalidParams(f"{kind.value} expects {n} parameters, got {len(params)}")
        if kind is ModelKind.DIV_EVEN and len(params) < 1:
            raise InvalidParams("div-even needs at least one coefficient")
        if not all(math.isfinite(p) for p in params):
            raise InvalidParams(f"{kind.value}: non-finite parameter in {params}")
        if kind is ModelKind.EUCM and not (0.0 <= params[0] <= 1.0 and params[1] > 0.0):
            raise InvalidParams(f"eucm requires alpha in [0, 1] and beta > 0, got alpha={params[0]!r} beta={params[1]!r}")
        if kind is ModelKind.DS and not 0.0 <= params[1] <= 1.0:
            raise InvalidParams(f"ds requires alpha in [0, 1], got alpha={params[1]!r}")
        if kind is ModelKind.FOV and params[0] == 0.0:
            raise InvalidParams("fov requires w != 0")
        if kind is ModelKind.UCM and params[0] < 0.0:
            raise InvalidParams(f"ucm requires xi >= 0, got xi={params[0]!r}")

    @property
    def r_bound(self) -> float:
        return DEFAULT_R_MAX if self.r_max is None else self.r_max

    def psi_poly(self) -> np.ndarray:
        if self.kind is ModelKind.DIV_EVEN:
            return DivisionProfile(self.params).poly()
        if self.kind is ModelKind.DIV:
            return np.array([1.0, 0.0, *self.params])
        raise DomainError(f"{self.kind.value} is a forward model")

    def with_params(self, params) -> TargetModel:
        return TargetModel(self.kind, tuple(params), self.r_max)


def division_target(coeffs, r_max=None) -> TargetModel:
    return TargetModel(ModelKind.DIV_EVEN, tuple(coeffs), r_max)


# ---------------------------------------------------------------------------
# division root tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RootTable:
    """Monotone pieces of the ray angle ``omega(r) = atan2(r, psi(r))``.

    ``omega`` turns where ``psi(r) - r psi'(r)`` changes sign, so those roots
    (isolated once per profile) split ``[0, r_max]`` into pieces on which the
    projection has at most one solution.
    """

    coeffs: np.ndarray
    seg_r: np.ndarray
    seg_w: np.ndarray


@lru_cache(maxsize=4096)
def _root_table(coeffs: tuple[float, ...], r_max: float) -> RootTable:
    c = np.asarray(coeffs, dtype=np.float64)
    q = c * (1.0 - np.arange(c.size))
    turns = real_roots_in(q, 0.0, r_max)
    turns = turns[(turns > 0.0) & (turns < r_max)]
    pts = np.unique(np.concatenate([[0.0], turns, [r_max]]))
    # merge pieces whose monotone direction does not actually change
    keep = [pts[0]]
    prev_sign = 0.0
    for lo, hi in zip(pts[:-1], pts[1:]):
        mid = 0.5 * (lo + hi)
        s = np.sign(np.polyval(q[::-1], mid))
        if prev_sign != 0.0 and s == prev_sign:
            keep[-1] = hi
        else:
            keep.append(hi)
        prev_sign = s
    seg_r = np.asarray(keep)
    psi = np.polyval(c[::-1], seg_r)
    seg_w = np.arctan2(seg_r, psi)
    return RootTable(c, seg_r, seg_w)


def root_table(model: TargetModel) -> RootTable:
    return _root_table(tuple(model.psi_poly()), model.r_bound)


def is_monotone(model: TargetModel) -> bool:
    """True when the backward model has a unique root for every ray it covers."""
    t = root_table(model)
    return t.seg_r.size == 2 and t.seg_w[1] > t.seg_w[0]


def monotone_limit(model: TargetModel) -> float:
    """Largest radius up to which the division profile is invertible."""
    t = root_table(model)
    return float(t.seg_r[1]) if t.seg_w[1] > t.seg_w[0] else 0.0


# ---------------------------------------------------------------------------
# forward inverse tables
# ---------------------------------------------------------------------------

_GRID = 4097


@lru_cache(maxsize=4096)
def _inverse_table(code: int, params: tuple[float, ...]):
    z_hi = 0.5 * math.pi if code == kernels.BC else math.pi
    z = np.linspace(0.0, z_hi, _GRID)[:-1]
    f, valid = kernels.phi_np(code, np.pad(np.asarray(params), (0, 4 - len(params))), np.sin(z), np.cos(z))
    f[0] = 0.0
    ok = valid & np.isfinite(f)
    ok[0] = True
    inc = np.concatenate([[True], np.diff(f) > 0.0])
    good = ok & inc
    n = int(np.argmin(good)) if not good.all() else good.size
    return z[:n].copy(), f[:n].copy()


# ---------------------------------------------------------------------------
# scalar operations
# ---------------------------------------------------------------------------


def psi(profile: DivisionProfile, r):
    r2 = np.asarray(r, dtype=np.float64) ** 2
    out = np.ones_like(r2)
    p = np.ones_like(r2)
    for lam in profile.coeffs:
        p = p * r2
        out = out + lam * p
    return out if out.ndim else float(out)


def back_project(cam: BackProjCamera, u) -> np.ndarray:
    """Unnormalised ray ``(m_x, m_y, psi(|m|))`` for pixel(s) ``u``."""
    m = cam.intrinsics.to_retinal(u)
    r = np.hypot(m[..., 0], m[..., 1])
    z = psi(cam.profile, r)
    return np.concatenate([m, np.asarray(z)[..., None]], axis=-1)


def _raise_status(status: int):
    if status == NO_ROOT:
        raise NoRootInRange("ray lies outside the modelled field of view")
    if status == MULTIPLE:
        raise MultipleRoots("several retinal radii map to this ray; the profile is implausible")


def project_division(cam: BackProjCamera, X_cam) -> np.ndarray:
    pix, status = project_points(cam.as_target(), cam.intrinsics, np.asarray(X_cam, dtype=np.float64)[None])
    _raise_status(int(status[0]))
    return pix[0]


def phi(model: TargetModel, R: float, Z: float) -> float:
    """Retinal radius of the ray ``(R, Z)``."""
    if R == 0.0 and Z == 0.0:
        raise DomainError("phi undefined at R = Z = 0")
    if model.kind.is_backward:
        t = root_table(model)
        r, status = kernels.division_radius(np.array([math.atan2(R, Z)]), t.coeffs, t.seg_r, t.seg_w)
        _raise_status(int(status[0]))
        return float(r[0])
    r, valid = kernels.phi(model.kind.code, model.params, np.array([R]), np.array([Z]))
    if not valid[0]:
        raise DomainError(f"{model.kind.value} cannot project ray R={R!r} Z={Z!r}")
    return float(r[0])


def project_target(model: TargetModel, intr: Intrinsics, X_cam) -> np.ndarray:
    pix, status = project_points(model, intr, np.asarray(X_cam, dtype=np.float64)[None])
    if status[0] != OK:
        if model.kind.is_backward:
            _raise_status(int(status[0]))
        raise DomainError(f"{model.kind.value} cannot project {X_cam!r}")
    return pix[0]


# ---------------------------------------------------------------------------
# batched operations
# ---------------------------------------------------------------------------


def radii(model: TargetModel, R, Z):
    """Batched radial projection. Returns ``(r, status)``."""
    R = np.asarray(R, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    if model.kind.is_backward:
        t = root_table(model)
        return kernels.division_radius(np.arctan2(R, Z), t.coeffs, t.seg_r, t.seg_w)
    r, valid = kernels.phi(model.kind.code, model.params, R, Z)
    status = np.where(valid, OK, NO_ROOT).astype(np.int8)
    return r, status


def project_points(model: TargetModel, intr: Intrinsics, X) -> tuple[np.ndarray, np.ndarray]:
    """Project camera-frame points ``X`` (n, 3). Returns ``(pixels, status)``.

    Points on the optical axis in front of the camera map to the centre.
    """
    X = np.asarray(X, dtype=np.float64)
    R = np.hypot(X[:, 0], X[:, 1])
    Z = X[:, 2]
    r, status = radii(model, R, Z)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(R > 0.0, r / R, 0.0)
    m = X[:, :2] * s[:, None]
    on_axis = R == 0.0
    status = status.copy()
    status[on_axis & (Z <= 0.0)] = NO_ROOT
    status[on_axis & (Z > 0.0)] = OK
    m[on_axis] = 0.0
    pix = intr.to_pixels(m)
    pix[status != OK] = np.nan
    return pix, status


def unproject_pixels(model: TargetModel, intr: Intrinsics, pix) -> tuple[np.ndarray, np.ndarray]:
    """Unit ray directions for pixels (n, 2). Returns ``(rays, valid)``."""
    m = intr.to_retinal(np.asarray(pix, dtype=np.float64).reshape(-1, 2))
    r = np.hypot(m[:, 0], m[:, 1])
    if model.kind.is_backward:
        z = np.polyval(model.psi_poly()[::-1], r)
        rays = np.column_stack([m, z])
        valid = np.isfinite(z)
    else:
        z_grid, f_grid = _inverse_table(model.kind.code, model.params)
        zeta, valid = kernels.phi_inverse(model.kind.code, model.params, r, z_grid, f_grid)
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.where(r > 0.0, np.sin(zeta) / r, 0.0)
        rays = np.column_stack([m * s[:, None], np.cos(zeta)])
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    rays[~valid] = np.nan
    return rays, valid


def diagonal_fov(model: TargetModel, intr: Intrinsics, image_size) -> float:
    """Sum of the polar angles of two opposite image corners, in radians."""
    w, h = image_size
    rays, valid = unproject_pixels(model, intr, np.array([[0.0, 0.0], [w, h]]))
    if not valid.all():
        return float("nan")
    return float(np.arccos(np.clip(rays[0, 2], -1, 1)) + np.arccos(np.clip(rays[1, 2], -1, 1)))
