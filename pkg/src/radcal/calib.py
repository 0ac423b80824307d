"""Robust calibration: RANSAC proposals from the closed-form cascade, Huber
scoring, multi-board pose bookkeeping and bundle adjustment."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.transform import Rotation

from radcal import kernels
from radcal.dataset import Dataset
from radcal.errors import (
    CalibrationError,
    CalibrationFailed,
    DegenerateTriple,
    InputError,
    InvalidParams,
    NonConvergence,
    NoPose,
    ProposalFailed,
)
from radcal.geometry import (
    Pose,
    correct_corners,
    refine_F,
    select_F,
    solve_intrinsics_depth,
    solve_pose,
    solve_radial_F,
)
from radcal.models import (
    BackProjCamera,
    DivisionProfile,
    Intrinsics,
    ModelKind,
    TargetModel,
    back_project,
    project_points,
    radii,
    unproject_pixels,
)
from radcal.p3p import p3p
from radcal.regress import division_from_model, regress_model

log = logging.getLogger(__name__)

NON_SQUARE_ASPECTS = tuple(round(0.5 + 0.1 * i, 10) for i in range(16))


# ---------------------------------------------------------------------------
# configuration and results
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 200
    sample_size: int = 14
    huber_scale: float = 2.0
    aspect_samples: tuple[float, ...] = (1.0,)
    division_degree: int = 2
    rng_seed: int = 0
    p3p_triples: int = 10
    epipolar_threshold: float = 3.0
    corner_correction: bool = True
    proposal_gate: float = 5.0
    stagnation: int = 20
    early_exit_ratio: float = 0.99
    lo_iterations: int = 10
    ba_iterations: int = 100
    regression_samples: int = 100

    def __post_init__(self):
        object.__setattr__(self, "aspect_samples", tuple(float(a) for a in self.aspect_samples))
        if self.sample_size < 8:
            raise InputError(f"sample_size must be at least 8, got {self.sample_size}")
        if self.iterations < 1:
            raise InputError(f"iterations must be at least 1, got {self.iterations}")
        if not self.huber_scale > 0:
            raise InputError(f"huber_scale must be positive, got {self.huber_scale}")
        if not self.aspect_samples or not all(0.5 <= a <= 2.0 for a in self.aspect_samples):
            raise InputError(f"aspect samples must lie in [0.5, 2], got {self.aspect_samples}")
        if self.division_degree < 1:
            raise InputError(f"division_degree must be at least 1, got {self.division_degree}")

    @classmethod
    def non_square(cls, **kw) -> RansacConfig:
        return cls(aspect_samples=_interleave(NON_SQUARE_ASPECTS), **kw)

    @property
    def inlier_threshold(self) -> float:
        return self.huber_scale

    @property
    def optimize_aspect(self) -> bool:
        return self.aspect_samples != (1.0,)


def _interleave(values):
    """Reorder so that consecutive iterations alternate around the middle value."""
    values = sorted(values)
    mid = len(values) // 2
    order = sorted(range(len(values)), key=lambda i: (abs(i - mid), i))
    return tuple(values[i] for i in order)


@dataclass(frozen=True)
class Score:
    robust_loss: float
    inlier_ratio: float
    rms_weighted: float
    rms_inlier: float
    n: int
    n_inliers: int


@dataclass(frozen=True, eq=False)
class Calibration:
    """Target model, intrinsics, per-image camera poses and per-board poses.

    A correspondence of board ``j`` seen in image ``k`` maps to the camera
    frame through ``camera_pose[k] @ board_pose[j]``.
    """

    model: TargetModel
    intrinsics: Intrinsics
    image_ids: tuple
    cam_R: np.ndarray
    cam_t: np.ndarray
    cam_valid: np.ndarray
    board_ids: tuple
    board_R: np.ndarray
    board_t: np.ndarray
    board_valid: np.ndarray
    references: tuple = ()
    division: BackProjCamera | None = None
    extent: tuple[float, float] | None = None

    @property
    def camera_poses(self) -> dict:
        return {k: Pose(self.cam_R[n], self.cam_t[n]) for n, k in enumerate(self.image_ids) if self.cam_valid[n]}

    @property
    def board_poses(self) -> dict:
        return {j: Pose(self.board_R[n], self.board_t[n]) for n, j in enumerate(self.board_ids) if self.board_valid[n]}

    def with_model(self, model: TargetModel, intrinsics: Intrinsics | None = None) -> Calibration:
        return replace(self, model=model, intrinsics=intrinsics or self.intrinsics)


def compose_pose(cam_pose: Pose, board_pose: Pose) -> Pose:
    """Board-to-camera transform: ``R = Rc Rb``, ``t = Rc tb + tc``."""
    return cam_pose @ board_pose


def bounded_model(model: TargetModel, intr: Intrinsics, extent) -> TargetModel:
    """Backward models carry the image's largest retinal radius as their bound."""
    if not model.kind.is_backward or extent is None:
        return model
    return TargetModel(model.kind, model.params, intr.r_max_for(extent))


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------


def saturation_distance(ds: Dataset) -> float:
    return ds.diagonal()


def _camera_points(calib: Calibration, ds: Dataset, X3=None):
    """Camera-frame points and the mask of correspondences that have a pose."""
    cam_of = _index_map(calib.image_ids, ds.image_ids)
    brd_of = _index_map(calib.board_ids, ds.board_ids)
    k = cam_of[ds.img]
    j = brd_of[ds.brd]
    has = (k >= 0) & (j >= 0)
    kk, jj = np.where(has, k, 0), np.where(has, j, 0)
    has &= calib.cam_valid[kk] & calib.board_valid[jj]
    X3 = ds.X if X3 is None else X3
    Rc, tc = calib.cam_R[kk], calib.cam_t[kk]
    Y = np.einsum("mij,mj->mi", calib.board_R[jj], X3) + calib.board_t[jj]
    P = np.einsum("mij,mj->mi", Rc, Y) + tc
    return P, has


def _index_map(ids, query_ids) -> np.ndarray:
    pos = {v: n for n, v in enumerate(ids)}
    return np.array([pos.get(q, -1) for q in query_ids], dtype=np.int64)


def residuals(calib: Calibration, ds: Dataset, X3=None):
    """Per-correspondence pixel residual vectors and a projectability mask."""
    P, has = _camera_points(calib, ds, X3)
    model = bounded_model(calib.model, calib.intrinsics, calib.extent or ds.extent())
    pix, status = project_points(model, calib.intrinsics, P)
    ok = has & (status == kernels.OK)
    res = pix - ds.uv
    res[~ok] = np.nan
    return res, ok


def score_distances(d, ok, tau: float, d_sat: float) -> Score:
    d = np.where(ok, d, d_sat)
    rho = kernels.huber(d, tau)
    M = d.size
    J = float(math.fsum(rho))
    inl = ok & (d <= tau)
    n_in = int(inl.sum())
    rms_in = float(np.sqrt(np.mean(d[inl] ** 2))) if n_in else float("nan")
    return Score(
        robust_loss=J,
        inlier_ratio=n_in / M if M else 0.0,
        rms_weighted=float(np.sqrt(2.0 * J / M)) if M else 0.0,
        rms_inlier=rms_in,
        n=M,
        n_inliers=n_in,
    )


def robust_loss(calib: Calibration, ds: Dataset, tau: float = 2.0) -> Score:
    """Huber loss over every correspondence; unprojectable ones saturate."""
    res, ok = residuals(calib, ds)
    d = np.hypot(res[:, 0], res[:, 1])
    return score_distances(d, ok, tau, saturation_distance(ds))


# ---------------------------------------------------------------------------
# single-image pose
# ---------------------------------------------------------------------------


def pose_for_image(
    model: TargetModel,
    intr: Intrinsics,
    u,
    Y,
    rng: np.random.Generator,
    tau: float = 2.0,
    triples: int = 10,
    rays=None,
    min_inliers: int = 4,
    d_sat: float = 1e3,
    refine: int = 5,
) -> tuple[Pose, float]:
    """Pose mapping ``Y`` (n, 3) onto the rays of pixels ``u``.

    P3P on up to ``triples`` random triples; the candidate with the lowest
    Huber reprojection loss over all points wins and is then polished by
    ``refine`` robust Gauss-Newton steps. ``rays`` defaults to the
    unprojection of ``u`` through ``model``.
    """
    u = np.asarray(u, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    n = len(u)
    if n < 4:
        raise NoPose(f"{n} correspondences cannot disambiguate a P3P pose")
    if rays is None:
        rays, valid = unproject_pixels(model, intr, u)
    else:
        rays = np.asarray(rays, dtype=np.float64)
        valid = np.all(np.isfinite(rays), axis=1)
    good = np.flatnonzero(valid)
    if good.size < 3:
        raise NoPose("fewer than three corners back-project to rays")
    cands = []
    for _ in range(triples):
        tri = rng.choice(good, 3, replace=False)
        try:
            cands.extend(p3p(rays[tri], Y[tri]))
        except DegenerateTriple:
            continue
    if not cands:
        raise NoPose("no P3P solution from any sampled triple")
    R = np.stack([c.R for c in cands])
    t = np.stack([c.t for c in cands])
    P = np.einsum("cij,nj->cni", R, Y) + t[:, None, :]
    pix, status = project_points(model, intr, P.reshape(-1, 3))
    d = np.hypot(*(pix.reshape(len(cands), n, 2) - u).transpose(2, 0, 1))
    ok = status.reshape(len(cands), n) == kernels.OK
    d = np.where(ok, d, d_sat)
    loss = kernels.huber(d, tau).sum(axis=1)
    inliers = (ok & (d <= tau)).sum(axis=1)
    loss = np.where(inliers >= min(min_inliers, n), loss, np.inf)
    best = int(np.argmin(loss))
    if not np.isfinite(loss[best]):
        raise NoPose("every P3P candidate fails the inlier gate")
    if refine <= 0:
        return cands[best], float(loss[best])
    return refine_pose(model, intr, u, Y, cands[best], tau, d_sat, refine)


def _pose_loss(model, intr, u, Y, pose: Pose, tau: float, d_sat: float, cap: float = math.inf) -> float:
    pix, status = project_points(model, intr, pose.apply(Y))
    ok = status == kernels.OK
    d = np.where(ok, np.hypot(*(pix - u).T), d_sat)
    return float(kernels.huber(np.minimum(d, cap), tau).sum())


def refine_pose(model, intr, u, Y, pose: Pose, tau: float = 2.0, d_sat: float = 1e3, max_iter: int = 5) -> tuple[Pose, float]:
    """Gauss-Newton on a single pose under a Huber loss truncated at ``3 tau``.

    Truncation lets gross outliers drop out instead of biasing the pose;
    steps that raise the truncated loss are refused. Returns the pose and
    its plain Huber loss.
    """
    cap = 3.0 * tau
    loss = _pose_loss(model, intr, u, Y, pose, tau, d_sat, cap)
    lam = 1e-6
    for _ in range(max_iter):
        RY = Y @ pose.R.T
        pix, ok, JP, _, _ = _pixel_jacobians(model, intr, RY + pose.t)
        r = np.where(ok[:, None], pix - u, 0.0)
        d = np.hypot(r[:, 0], r[:, 1])
        w = np.where(ok & (d <= cap), np.minimum(1.0, tau / np.maximum(d, 1e-300)), 0.0)
        if np.count_nonzero(w) < 3:
            break
        # left increment: d(exp(w) R Y + t) = -[R Y]_x dw + dt
        J = np.concatenate([-np.einsum("nij,njk->nik", JP, _skew_batch(RY)), JP], axis=2)
        J = np.where(ok[:, None, None], J, 0.0)
        H = np.einsum("n,nai,naj->ij", w, J, J)
        g = np.einsum("n,nai,na->i", w, J, r)
        improved = False
        for _ in range(8):
            try:
                step = -np.linalg.solve(H + lam * np.diag(np.diag(H) + 1e-12), g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            R = Rotation.from_rotvec(step[:3]).as_matrix() @ pose.R
            cand = Pose(R, pose.t + step[3:])
            new = _pose_loss(model, intr, u, Y, cand, tau, d_sat, cap)
            if new < loss:
                improved = loss - new > 1e-12 * loss
                pose, loss, lam = cand, new, max(lam / 10.0, 1e-12)
                break
            lam *= 10.0
        if not improved:
            break
    return pose, _pose_loss(model, intr, u, Y, pose, tau, d_sat)


# ---------------------------------------------------------------------------
# pose assembly
# ---------------------------------------------------------------------------


def assemble_poses(ds: Dataset, pair_poses: dict, counts: dict):
    """Camera and board poses from per-(image, board) poses.

    Boards join the reference (most observed) board through images where
    both are posed; boards that never connect start a new component with
    its own reference.
    """
    K, B = ds.n_images, ds.n_boards
    cam_R = np.tile(np.eye(3), (K, 1, 1))
    cam_t = np.zeros((K, 3))
    cam_valid = np.zeros(K, dtype=bool)
    board_R = np.tile(np.eye(3), (B, 1, 1))
    board_t = np.zeros((B, 3))
    board_valid = np.zeros(B, dtype=bool)
    obs = np.bincount(ds.brd, minlength=B)
    posed_boards = {j for (_, j) in pair_poses}
    known: dict[int, Pose] = {}
    refs = []
    while True:
        remaining = [j for j in range(B) if j in posed_boards and j not in known]
        if not remaining:
            break
        ref = max(remaining, key=lambda j: (obs[j], -j))
        known[ref] = Pose.identity()
        refs.append(ref)
        grew = True
        while grew:
            grew = False
            for j in range(B):
                if j in known or j not in posed_boards:
                    continue
                best = None
                for (k, jj), pose in pair_poses.items():
                    if jj != j:
                        continue
                    for b, bpose in known.items():
                        if (k, b) not in pair_poses:
                            continue
                        key = (b == ref, counts[(k, j)] + counts[(k, b)], -k, -b)
                        if best is None or key > best[0]:
                            best = (key, k, b)
                if best is not None:
                    _, k, b = best
                    cam = pair_poses[(k, b)] @ known[b].inverse()
                    known[j] = cam.inverse() @ pair_poses[(k, j)]
                    grew = True
    for j, pose in known.items():
        board_R[j], board_t[j], board_valid[j] = pose.R, pose.t, True
    for k in range(K):
        choices = [(counts[(k, j)], -j) for (kk, j) in pair_poses if kk == k and j in known]
        if not choices:
            continue
        _, negj = max(choices)
        j = -negj
        cam = pair_poses[(k, j)] @ known[j].inverse()
        cam_R[k], cam_t[k], cam_valid[k] = cam.R, cam.t, True
    return cam_R, cam_t, cam_valid, board_R, board_t, board_valid, tuple(refs)


# ---------------------------------------------------------------------------
# proposals
# ---------------------------------------------------------------------------


@dataclass
class _Context:
    ds: Dataset
    X3: np.ndarray
    groups: dict
    counts: dict
    extent: tuple
    d_sat: float
    kind: ModelKind


def _context(ds: Dataset, kind) -> _Context:
    groups = ds.groups()
    return _Context(
        ds=ds,
        X3=ds.X,
        groups=groups,
        counts={key: len(idx) for key, idx in groups.items()},
        extent=ds.extent(),
        d_sat=saturation_distance(ds),
        kind=ModelKind(kind),
    )


def initial_camera(u, X, a: float, config: RansacConfig, extent):
    """Division camera and board pose from one sample of a single view."""
    cands = solve_radial_F(u, X)
    rf = select_F(cands, u, X, config.epipolar_threshold)
    us = u
    if config.corner_correction and len(u) >= 8:
        try:
            rf, us = refine_F(u, X, rf)
        except NonConvergence:
            us = correct_corners(rf, u, X)
    X3 = np.column_stack([X, np.zeros(len(X))])
    best = None
    for pp in solve_pose(rf, a):
        try:
            li = solve_intrinsics_depth(us, X, pp, rf.e, a, config.division_degree)
        except CalibrationError:
            continue
        if li.front_fraction <= 0.5:
            continue
        try:
            intr = Intrinsics(tuple(rf.e), a, li.f)
            cam = BackProjCamera(intr, DivisionProfile(li.coeffs, intr.r_max_for(extent)))
        except InvalidParams:
            continue
        pose = pp.full(li.t_z)
        pix, status = project_points(cam.as_target(), intr, pose.apply(X3))
        d2 = np.sum((pix - u) ** 2, axis=1)
        rms = float(np.sqrt(np.mean(d2))) if np.all(status == kernels.OK) else np.inf
        if best is None or rms < best[0]:
            best = (rms, cam, pose)
    if best is None:
        raise ProposalFailed("no pose candidate yields a positive focal length in front of the camera")
    return best


def propose_model(ctx: _Context, key, sample, a: float, config: RansacConfig, rng) -> Calibration:
    """Full parameter set from one 14-point sample of image/board ``key``."""
    ds = ctx.ds
    u = ds.uv[sample]
    X = ctx.X3[sample, :2]
    try:
        rms, cam, pose0 = initial_camera(u, X, a, config, ctx.extent)
        if rms > config.proposal_gate * config.huber_scale:
            raise ProposalFailed(f"sample reprojection RMS {rms:.3g} px above the gate")
        if ctx.kind is ModelKind.DIV_EVEN and config.division_degree == cam.profile.degree:
            model, intr = cam.as_target(), cam.intrinsics
        else:
            reg = regress_model(ctx.kind, cam, config.regression_samples, r_limit=cam.profile.r_max)
            model, intr = reg.model, reg.intrinsics
    except ProposalFailed:
        raise
    except CalibrationError as exc:
        raise ProposalFailed(str(exc)) from exc
    model = bounded_model(model, intr, ctx.extent)
    rays_all = back_project(cam, ds.uv)
    rays_all /= np.linalg.norm(rays_all, axis=1, keepdims=True)
    tau = config.huber_scale
    pair_poses = {key: pose0}
    for gkey, idx in ctx.groups.items():
        if gkey == key or len(idx) < 4:
            continue
        try:
            pose, _ = pose_for_image(
                model, intr, ds.uv[idx], ctx.X3[idx], rng, tau, config.p3p_triples, rays=rays_all[idx], d_sat=ctx.d_sat
            )
        except NoPose:
            continue
        pair_poses[gkey] = pose
    arrays = assemble_poses(ds, pair_poses, ctx.counts)
    cam_R, cam_t, cam_valid, board_R, board_t, board_valid, refs = arrays
    return Calibration(
        model=model,
        intrinsics=intr,
        image_ids=ds.image_ids,
        cam_R=cam_R,
        cam_t=cam_t,
        cam_valid=cam_valid,
        board_ids=ds.board_ids,
        board_R=board_R,
        board_t=board_t,
        board_valid=board_valid,
        references=tuple(ds.board_ids[j] for j in refs),
        division=cam,
        extent=ctx.extent,
    )


# ---------------------------------------------------------------------------
# bundle adjustment
# ---------------------------------------------------------------------------


@dataclass
class BAInfo:
    iterations: int = 0
    converged: bool = False
    initial_loss: float = float("nan")
    final_loss: float = float("nan")
    message: str = ""


def _pixel_jacobians(model, intr, P):
    """Pixels, status, d(pixel)/dP (n, 2, 3) and d(pixel)/dtheta (n, 2, p)."""
    x, y, z = P[:, 0], P[:, 1], P[:, 2]
    R = np.hypot(x, y)
    phi, status = radii(model, R, z)
    ok = status == kernels.OK
    h = 1e-6 * np.maximum(np.hypot(R, z), 1e-12)
    Rp = np.maximum(R, 1e-12)
    fRp, _ = radii(model, Rp + h, z)
    fRm, _ = radii(model, np.maximum(Rp - h, 0.0), z)
    hR = (Rp + h) - np.maximum(Rp - h, 0.0)
    phi_R = (fRp - fRm) / hR
    fZp, _ = radii(model, R, z + h)
    fZm, _ = radii(model, R, z - h)
    phi_Z = (fZp - fZm) / (2.0 * h)
    axis = R <= 1e-12 * np.maximum(np.abs(z), 1e-300)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(axis, phi_R, phi / Rp)
        ds_common = np.where(axis, 0.0, (phi_R * Rp - phi) / Rp**3)
        sz = np.where(axis, 0.0, phi_Z / Rp)
    m = np.column_stack([x * s, y * s])
    Jm = np.empty((len(P), 2, 3))
    Jm[:, 0, 0] = s + x * x * ds_common
    Jm[:, 0, 1] = x * y * ds_common
    Jm[:, 0, 2] = x * sz
    Jm[:, 1, 0] = x * y * ds_common
    Jm[:, 1, 1] = s + y * y * ds_common
    Jm[:, 1, 2] = y * sz
    af, f = intr.a * intr.f, intr.f
    JP = Jm * np.array([af, f])[None, :, None]
    pix = intr.to_pixels(m)
    # derivatives with respect to the model parameters
    p = np.asarray(model.params)
    Jt = np.zeros((len(P), 2, p.size))
    with np.errstate(divide="ignore", invalid="ignore"):
        dirn = np.where(axis[:, None], 0.0, P[:, :2] / Rp[:, None])
    for i in range(p.size):
        step = 1e-7 * max(1.0, abs(p[i]))
        qp, qm = p.copy(), p.copy()
        qp[i] += step
        qm[i] -= step
        try:
            rp, _ = radii(model.with_params(qp), R, z)
            rm, _ = radii(model.with_params(qm), R, z)
            dphi = (rp - rm) / (2.0 * step)
        except InvalidParams:
            try:
                rp, _ = radii(model.with_params(qp), R, z)
                dphi = (rp - phi) / step
            except InvalidParams:
                rm, _ = radii(model.with_params(qm), R, z)
                dphi = (phi - rm) / step
        Jt[:, :, i] = dirn * dphi[:, None] * np.array([af, f])
    ok &= np.all(np.isfinite(JP.reshape(len(P), -1)), axis=1) & np.all(np.isfinite(Jt.reshape(len(P), -1)), axis=1)
    return pix, ok, JP, Jt, m


class _Problem:
    """Parameter layout and linearisation for bundle adjustment."""

    def __init__(self, calib: Calibration, ds: Dataset, tau, d_sat, optimize_intrinsics=True, optimize_aspect=False, optimize_boards=True):
        self.ds = ds
        self.X3 = ds.X
        self.tau = tau
        self.d_sat = d_sat
        self.extent = calib.extent or ds.extent()
        self.opt_intr = optimize_intrinsics
        self.opt_aspect = optimize_aspect and optimize_intrinsics
        self.cam_of = _index_map(calib.image_ids, ds.image_ids)
        self.brd_of = _index_map(calib.board_ids, ds.board_ids)
        refs = set(calib.references)
        self.free_cams = [k for k in range(len(calib.image_ids)) if calib.cam_valid[k]]
        self.free_boards = (
            [j for j in range(len(calib.board_ids)) if calib.board_valid[j] and calib.board_ids[j] not in refs]
            if optimize_boards
            else []
        )
        n_intr = (3 + int(self.opt_aspect) + len(calib.model.params)) if optimize_intrinsics else 0
        self.n_intr = n_intr
        self.cam_col = {k: n_intr + 6 * i for i, k in enumerate(self.free_cams)}
        base = n_intr + 6 * len(self.free_cams)
        self.board_col = {j: base + 6 * i for i, j in enumerate(self.free_boards)}
        self.n_params = base + 6 * len(self.free_boards)

    def evaluate(self, calib: Calibration):
        res, ok = residuals(calib, self.ds, self.X3)
        d = np.hypot(res[:, 0], res[:, 1])
        score = score_distances(d, ok, self.tau, self.d_sat)
        return score, res, ok

    def linearize(self, calib: Calibration):
        P, has = _camera_points(calib, self.ds, self.X3)
        model = bounded_model(calib.model, calib.intrinsics, self.extent)
        pix, ok, JP, Jt, m = _pixel_jacobians(model, calib.intrinsics, P)
        ok &= has
        res = pix - self.ds.uv
        d = np.hypot(res[:, 0], res[:, 1])
        ok &= np.isfinite(d)
        w = np.where(d <= self.tau, 1.0, self.tau / np.maximum(d, 1e-300))
        sw = np.sqrt(w)
        rows = np.flatnonzero(ok)
        n = rows.size
        if n == 0:
            return np.zeros(0), np.zeros((0, self.n_params))
        J = np.zeros((2 * n, self.n_params))
        r = (res[rows] * sw[rows, None]).reshape(-1)
        S = sw[rows, None, None]
        if self.opt_intr:
            intr = calib.intrinsics
            Ji = np.zeros((n, 2, self.n_intr))
            Ji[:, 0, 0] = 1.0
            Ji[:, 1, 1] = 1.0
            Ji[:, 0, 2] = intr.a * m[rows, 0]
            Ji[:, 1, 2] = m[rows, 1]
            c = 3
            if self.opt_aspect:
                Ji[:, 0, 3] = intr.f * m[rows, 0]
                c = 4
            Ji[:, :, c:] = Jt[rows]
            J[:, : self.n_intr] = (Ji * S).reshape(2 * n, -1)
        k = self.cam_of[self.ds.img[rows]]
        j = self.brd_of[self.ds.brd[rows]]
        Rc = calib.cam_R[k]
        Y = np.einsum("mij,mj->mi", calib.board_R[j], self.X3[rows]) + calib.board_t[j]
        RcY = np.einsum("mij,mj->mi", Rc, Y)
        JPs = JP[rows] * S
        # camera increments: P = exp(w) Rc Y + tc + dt
        Jw = -np.einsum("mij,mjk->mik", JPs, _skew_batch(RcY))
        # residual rows are interleaved: 2i is the x residual of row i, 2i + 1 the y
        cols = np.array([self.cam_col.get(int(kk), -1) for kk in k])
        for kk, col in self.cam_col.items():
            sel = np.flatnonzero(cols == col)
            if sel.size == 0:
                continue
            rr = np.concatenate([2 * sel, 2 * sel + 1])
            J[rr, col : col + 3] = np.concatenate([Jw[sel, 0], Jw[sel, 1]])
            J[rr, col + 3 : col + 6] = np.concatenate([JPs[sel, 0], JPs[sel, 1]])
        if self.board_col:
            RbX = np.einsum("mij,mj->mi", calib.board_R[j], self.X3[rows])
            JY = np.einsum("mij,mjk->mik", JPs, Rc)
            Jb = -np.einsum("mij,mjk->mik", JY, _skew_batch(RbX))
            bcols = np.array([self.board_col.get(int(jj), -1) for jj in j])
            for jj, col in self.board_col.items():
                sel = np.flatnonzero(bcols == col)
                if sel.size == 0:
                    continue
                rr = np.concatenate([2 * sel, 2 * sel + 1])
                J[rr, col : col + 3] = np.concatenate([Jb[sel, 0], Jb[sel, 1]])
                J[rr, col + 3 : col + 6] = np.concatenate([JY[sel, 0], JY[sel, 1]])
        return r, J

    def apply(self, calib: Calibration, delta) -> Calibration:
        model, intr = calib.model, calib.intrinsics
        if self.opt_intr:
            e = (intr.e[0] + delta[0], intr.e[1] + delta[1])
            f = intr.f + delta[2]
            c = 3
            a = intr.a
            if self.opt_aspect:
                a = intr.a + delta[3]
                c = 4
            intr = Intrinsics(e, a, f)
            params = np.asarray(model.params) + delta[c : self.n_intr]
            model = bounded_model(model.with_params(params), intr, self.extent)
        cam_R, cam_t = calib.cam_R.copy(), calib.cam_t.copy()
        if self.free_cams:
            idx = np.array(self.free_cams)
            blocks = delta[self.n_intr : self.n_intr + 6 * len(idx)].reshape(-1, 6)
            cam_R[idx] = Rotation.from_rotvec(blocks[:, :3]).as_matrix() @ cam_R[idx]
            cam_t[idx] = cam_t[idx] + blocks[:, 3:]
        board_R, board_t = calib.board_R.copy(), calib.board_t.copy()
        if self.free_boards:
            idx = np.array(self.free_boards)
            base = self.n_intr + 6 * len(self.free_cams)
            blocks = delta[base:].reshape(-1, 6)
            board_R[idx] = Rotation.from_rotvec(blocks[:, :3]).as_matrix() @ board_R[idx]
            board_t[idx] = board_t[idx] + blocks[:, 3:]
        return replace(calib, model=model, intrinsics=intr, cam_R=cam_R, cam_t=cam_t, board_R=board_R, board_t=board_t)


def _skew_batch(v):
    S = np.zeros((len(v), 3, 3))
    S[:, 0, 1], S[:, 0, 2] = -v[:, 2], v[:, 1]
    S[:, 1, 0], S[:, 1, 2] = v[:, 2], -v[:, 0]
    S[:, 2, 0], S[:, 2, 1] = -v[:, 1], v[:, 0]
    return S


def _lm(problem: _Problem, calib: Calibration, max_iter: int, rel_tol: float = 1e-12) -> tuple[Calibration, Score, BAInfo]:
    score, _, _ = problem.evaluate(calib)
    info = BAInfo(initial_loss=score.robust_loss)
    cost = score.robust_loss
    mu = None
    it = 0
    converged = False
    while it < max_iter:
        it += 1
        r, J = problem.linearize(calib)
        if r.size == 0:
            converged = True
            break
        H = J.T @ J
        g = J.T @ r
        diag = np.diag(H).copy()
        diag[diag <= 0.0] = 1e-12
        if mu is None:
            mu = 1e-4
        accepted = False
        for _ in range(10):
            A = H + mu * np.diag(diag)
            try:
                step = -np.linalg.solve(A, g)
            except np.linalg.LinAlgError:
                mu *= 10.0
                continue
            if not np.all(np.isfinite(step)):
                mu *= 10.0
                continue
            try:
                cand = problem.apply(calib, step)
            except (InvalidParams, CalibrationError):
                mu *= 10.0
                continue
            s_new, _, _ = problem.evaluate(cand)
            if s_new.robust_loss < cost:
                rel = (cost - s_new.robust_loss) / max(cost, 1e-300)
                calib, score, cost = cand, s_new, s_new.robust_loss
                mu = max(mu / 3.0, 1e-12)
                accepted = True
                break
            mu *= 4.0
        if not accepted:
            converged = True
            break
        if rel < rel_tol or cost <= 1e-30:
            converged = True
            break
    info.iterations = it
    info.converged = converged
    info.final_loss = cost
    return calib, score, info


def bundle_adjust(
    calib: Calibration,
    ds: Dataset,
    config: RansacConfig | None = None,
    max_iter: int | None = None,
    optimize_intrinsics: bool = True,
    optimize_boards: bool = True,
) -> tuple[Calibration, Score, BAInfo]:
    """Levenberg-Marquardt on the Huber loss (iteratively reweighted).

    Rotations take axis-angle increments composed on the left; reference
    boards stay fixed. Steps are only accepted when the loss drops, so the
    loss never increases.
    """
    config = config or RansacConfig()
    problem = _Problem(
        calib,
        ds,
        config.huber_scale,
        saturation_distance(ds),
        optimize_intrinsics=optimize_intrinsics,
        optimize_aspect=config.optimize_aspect,
        optimize_boards=optimize_boards,
    )
    out, score, info = _lm(problem, calib, config.ba_iterations if max_iter is None else max_iter)
    if not info.converged:
        info.message = "iteration budget exhausted"
    if out.model.kind is ModelKind.DIV_EVEN and len(out.model.params) == config.division_degree:
        div = BackProjCamera(out.intrinsics, DivisionProfile(out.model.params, out.intrinsics.r_max_for(out.extent or ds.extent())))
        out = replace(out, division=div)
    return out, score, info


def refresh_division(calib: Calibration, ds: Dataset, N: int) -> Calibration:
    """Division block fitted to the final model (reports always carry one)."""
    extent = calib.extent or ds.extent()
    r_max = calib.intrinsics.r_max_for(extent)
    if calib.model.kind is ModelKind.DIV_EVEN and len(calib.model.params) == N:
        return replace(calib, division=BackProjCamera(calib.intrinsics, DivisionProfile(calib.model.params, r_max)))
    try:
        div = division_from_model(calib.model, calib.intrinsics, N, r_max, r_max)
    except CalibrationError:
        return calib
    return replace(calib, division=div)


# ---------------------------------------------------------------------------
# RANSAC driver
# ---------------------------------------------------------------------------


def repose_images(calib: Calibration, ds: Dataset, config: RansacConfig) -> tuple[Calibration, int]:
    """Replace camera poses that a fresh P3P pose under the current
    intrinsics beats on that image's Huber loss; returns the count."""
    tau = config.huber_scale
    d_sat = saturation_distance(ds)
    model = bounded_model(calib.model, calib.intrinsics, calib.extent or ds.extent())
    P, has = _camera_points(calib, ds)
    pix, status = project_points(model, calib.intrinsics, P)
    ok = has & (status == kernels.OK)
    rho = kernels.huber(np.where(ok, np.hypot(*(pix - ds.uv).T), d_sat), tau)
    brd_of = _index_map(calib.board_ids, ds.board_ids)[ds.brd]
    board_ok = brd_of >= 0
    jj = np.where(board_ok, brd_of, 0)
    board_ok &= calib.board_valid[jj]
    Y = np.einsum("mij,mj->mi", calib.board_R[jj], ds.X) + calib.board_t[jj]
    cam_of = _index_map(calib.image_ids, ds.image_ids)
    cam_R, cam_t, cam_valid = calib.cam_R.copy(), calib.cam_t.copy(), calib.cam_valid.copy()
    changed = 0
    for k in range(ds.n_images):
        n = cam_of[k]
        idx = np.flatnonzero((ds.img == k) & board_ok)
        if n < 0 or len(idx) < 4:
            continue
        rng = np.random.default_rng([config.rng_seed, k, 1])
        try:
            pose, loss = pose_for_image(model, calib.intrinsics, ds.uv[idx], Y[idx], rng, tau, config.p3p_triples, d_sat=d_sat)
        except NoPose:
            continue
        current = float(rho[idx].sum()) if cam_valid[n] else math.inf
        if loss < current - 1e-9 * max(1.0, current):
            cam_R[n], cam_t[n], cam_valid[n] = pose.R, pose.t, True
            changed += 1
    return replace(calib, cam_R=cam_R, cam_t=cam_t, cam_valid=cam_valid), changed


@dataclass
class CalibrationResult:
    calibration: Calibration
    score: Score
    residuals: np.ndarray
    inliers: np.ndarray
    iterations: int
    proposals: int
    history: list = field(default_factory=list)
    ba: BAInfo | None = None
    initial_score: Score | None = None


def calibrate(ds: Dataset, config: RansacConfig | None = None, kind=ModelKind.DIV_EVEN) -> CalibrationResult:
    """RANSAC over single-view proposals with local optimisation of each new best."""
    config = config or RansacConfig()
    ctx = _context(ds, kind)
    pool = sorted(key for key, idx in ctx.groups.items() if len(idx) >= config.sample_size)
    if not pool:
        raise CalibrationFailed(f"no image/board pair has {config.sample_size} correspondences")
    best_J0 = math.inf
    initial = None
    best: tuple[Calibration, Score] | None = None
    history = []
    proposals = 0
    last_improvement = 0
    it = 0
    for it in range(config.iterations):
        rng = np.random.default_rng([config.rng_seed, it])
        a = config.aspect_samples[it % len(config.aspect_samples)]
        key = pool[int(rng.integers(len(pool)))]
        idx = ctx.groups[key]
        sample = np.sort(rng.choice(idx, config.sample_size, replace=False))
        try:
            cand = propose_model(ctx, key, sample, a, config, rng)
        except ProposalFailed as exc:
            log.debug("iteration %d: %s", it, exc)
            history.append(best[1].robust_loss if best else math.inf)
            continue
        proposals += 1
        s0 = robust_loss(cand, ds, config.huber_scale)
        if s0.robust_loss < best_J0:
            best_J0 = s0.robust_loss
            initial = s0
            lo, s_lo, _ = bundle_adjust(cand, ds, config, max_iter=config.lo_iterations)
            if best is None or s_lo.robust_loss < best[1].robust_loss:
                best = (lo, s_lo)
                last_improvement = it
        history.append(best[1].robust_loss if best else math.inf)
        if best is not None and best[1].inlier_ratio > config.early_exit_ratio and it - last_improvement >= config.stagnation:
            break
    if best is None:
        raise CalibrationFailed(f"none of {config.iterations} proposals succeeded")
    final, score, info = bundle_adjust(best[0], ds, config)
    # an image caught in a wrong pose basin survives bundle adjustment; re-seed
    # such images from P3P under the final intrinsics and refine again
    reposed, changed = repose_images(final, ds, config)
    if changed:
        again, s2, info2 = bundle_adjust(reposed, ds, config)
        if s2.robust_loss < score.robust_loss:
            final, score, info = again, s2, info2
            log.info("re-posed %d image(s); loss %.6g", changed, score.robust_loss)
    final = refresh_division(final, ds, config.division_degree)
    res, ok = residuals(final, ds)
    d = np.hypot(res[:, 0], res[:, 1])
    inl = ok & (d <= config.huber_scale)
    return CalibrationResult(final, score, res, inl, it + 1, proposals, history, info, initial)


# ---------------------------------------------------------------------------
# hold-out evaluation
# ---------------------------------------------------------------------------


@dataclass
class HoldoutResult:
    score: Score
    calibration: Calibration
    failures: dict
    residuals: np.ndarray
    evaluated: np.ndarray


def evaluate_holdout(
    model: TargetModel,
    intr: Intrinsics,
    ds: Dataset,
    config: RansacConfig | None = None,
    board_poses: dict | None = None,
    extent=None,
    init_poses: dict | None = None,
) -> HoldoutResult:
    """Score fixed intrinsics on new images: P3P then pose-only refinement.

    ``init_poses`` maps image IDs to camera poses that compete with the P3P
    candidates (the lower Huber loss wins). Images without a pose are
    reported in ``failures`` and left out of the score.
    """
    init_poses = init_poses or {}
    config = config or RansacConfig()
    tau = config.huber_scale
    extent = extent or ds.extent()
    model = bounded_model(model, intr, extent)
    board_poses = board_poses or {}
    if len(ds.boards) == 1 and ds.board_ids[0] not in board_poses:
        board_poses = {ds.board_ids[0]: Pose.identity()}
    missing = [b for b in set(ds.board_ids[j] for j in np.unique(ds.brd)) if b not in board_poses]
    if missing:
        raise InputError(f"test detections reference boards without a calibrated pose: {sorted(map(str, missing))}")
    B = ds.n_boards
    board_R = np.stack([board_poses[b].R for b in ds.board_ids])
    board_t = np.stack([board_poses[b].t for b in ds.board_ids])
    X3 = ds.X
    Y = np.einsum("mij,mj->mi", board_R[ds.brd], X3) + board_t[ds.brd]
    rays, _ = unproject_pixels(model, intr, ds.uv)
    K = ds.n_images
    cam_R = np.tile(np.eye(3), (K, 1, 1))
    cam_t = np.zeros((K, 3))
    cam_valid = np.zeros(K, dtype=bool)
    failures = {}
    d_sat = saturation_distance(ds)
    for k in range(K):
        idx = np.flatnonzero(ds.img == k)
        rng = np.random.default_rng([config.rng_seed, k])
        pose, loss = None, math.inf
        try:
            pose, loss = pose_for_image(model, intr, ds.uv[idx], Y[idx], rng, tau, max(config.p3p_triples, 10), rays=rays[idx], min_inliers=0, d_sat=d_sat)
        except NoPose as exc:
            failures[ds.image_ids[k]] = str(exc)
        warm = init_poses.get(ds.image_ids[k])
        if warm is not None:
            pix, status = project_points(model, intr, warm.apply(Y[idx]))
            d = np.where(status == kernels.OK, np.hypot(*(pix - ds.uv[idx]).T), d_sat)
            wl = float(kernels.huber(d, tau).sum())
            if wl <= loss:
                pose, loss = warm, wl
                failures.pop(ds.image_ids[k], None)
        if pose is None:
            continue
        cam_R[k], cam_t[k], cam_valid[k] = pose.R, pose.t, True
    calib = Calibration(
        model=model,
        intrinsics=intr,
        image_ids=ds.image_ids,
        cam_R=cam_R,
        cam_t=cam_t,
        cam_valid=cam_valid,
        board_ids=ds.board_ids,
        board_R=board_R,
        board_t=board_t,
        board_valid=np.ones(B, dtype=bool),
        references=ds.board_ids,
        extent=extent,
    )
    calib, _, _ = bundle_adjust(calib, ds, config, max_iter=200, optimize_intrinsics=False, optimize_boards=False)
    res, ok = residuals(calib, ds)
    evaluated = cam_valid[ds.img]
    d = np.hypot(res[:, 0], res[:, 1])
    score = score_distances(d[evaluated], ok[evaluated], tau, d_sat)
    return HoldoutResult(score, calib, failures, res, evaluated)
