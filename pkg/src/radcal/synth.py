"""Synthetic captures with ground truth, and the two experiment harnesses."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.transform import Rotation

from radcal.calib import (
    Calibration,
    RansacConfig,
    calibrate,
    evaluate_holdout,
    refresh_division,
)
from radcal.dataset import Board, Dataset
from radcal.errors import CalibrationError, UnreachablePose
from radcal.geometry import (
    Pose,
    refine_F,
    rotation_angle,
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
    diagonal_fov,
    project_points,
    unproject_pixels,
)
from radcal.regress import division_from_model

PRESETS = ("pinhole", "wide", "fisheye", "catadioptric")


@dataclass(frozen=True)
class SceneSpec:
    model: TargetModel
    intrinsics: Intrinsics
    image_size: tuple[int, int] = (1200, 800)
    board_cols: int = 10
    board_rows: int = 7
    spacing: float = 1.0
    n_boards: int = 1
    n_images: int = 10
    distance: tuple[float, float] = (2.0, 6.0)
    tilt_deg: tuple[float, float] = (0.0, 50.0)
    center_region: float = 0.8
    noise_sigma: float = 0.0
    outlier_fraction: float = 0.0
    rng_seed: int = 0
    max_attempts: int = 2000

    def __post_init__(self):
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ValueError(f"outlier_fraction must lie in [0, 1), got {self.outlier_fraction}")
        if self.noise_sigma < 0.0:
            raise ValueError("noise_sigma must be non-negative")
        if self.n_images < 1 or self.n_boards < 1:
            raise ValueError("need at least one image and one board")
        if not 0.0 < self.distance[0] <= self.distance[1]:
            raise ValueError(f"distance range must be positive and ordered, got {self.distance}")

    @property
    def board_width(self) -> float:
        return (self.board_cols - 1) * self.spacing


@dataclass(frozen=True, eq=False)
class Scene:
    dataset: Dataset
    truth: Calibration
    outliers: np.ndarray
    clean: np.ndarray
    spec: SceneSpec = field(repr=False)


def preset(name: str, **kw) -> SceneSpec:
    """Named camera presets on a 1200 x 800 sensor, from ~90 to >180 deg diagonal FOV."""
    if name == "pinhole":
        model = TargetModel(ModelKind.BC, (-0.05, 0.01))
        intr = Intrinsics((600.0, 400.0), 1.0, 700.0)
    elif name == "wide":
        model = TargetModel(ModelKind.EUCM, (0.5, 1.0))
        intr = Intrinsics((600.0, 400.0), 1.0, 550.0)
    elif name == "fisheye":
        model = TargetModel(ModelKind.KB, (0.01, -0.002, 0.0, 0.0))
        intr = Intrinsics((600.0, 400.0), 1.0, 430.0)
    elif name == "catadioptric":
        intr = Intrinsics((600.0, 400.0), 1.0, 300.0)
        model = TargetModel(ModelKind.DIV_EVEN, (-0.3, 0.01), intr.r_max_for((1200, 800)))
    else:
        raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return SceneSpec(model=model, intrinsics=intr, **kw)


def spec_for_model(kind, **kw) -> SceneSpec:
    """A representative ground truth for every model kind (wide-angle, 1200 x 800)."""
    kind = ModelKind(kind)
    intr = Intrinsics((600.0, 400.0), 1.0, 450.0)
    params = {
        ModelKind.BC: (-0.08, 0.012),
        ModelKind.KB: (0.02, -0.004, 0.0005, 0.0),
        ModelKind.UCM: (0.7,),
        ModelKind.FOV: (0.9,),
        ModelKind.EUCM: (0.55, 1.1),
        ModelKind.DS: (-0.15, 0.58),
        ModelKind.DIV: (-0.08, 0.004, 0.002),
        ModelKind.DIV_EVEN: (-0.12, 0.004),
    }[kind]
    if kind is ModelKind.BC:
        intr = replace(intr, f=650.0)
    r_max = intr.r_max_for((1200, 800)) if kind.is_backward else None
    return SceneSpec(model=TargetModel(kind, params, r_max), intrinsics=intr, **kw)


def board_layout(spec: SceneSpec) -> list[Board]:
    gx, gy = np.meshgrid(np.arange(spec.board_cols), np.arange(spec.board_rows))
    xy = np.column_stack([gx.ravel(), gy.ravel()]).astype(float) * spec.spacing
    ids = list(range(len(xy)))
    return [Board(j, ids, xy) for j in range(spec.n_boards)]


def rig_poses(spec: SceneSpec) -> list[Pose]:
    """Board poses in the frame of board 0: side by side, each turned 25 deg further."""
    out = []
    gap = spec.board_width + 2.0 * spec.spacing
    for j in range(spec.n_boards):
        R = Rotation.from_rotvec([0.0, math.radians(25.0) * j, 0.0]).as_matrix()
        out.append(Pose(R, [gap * j, 0.0, 0.0]))
    return out


def _align_z(d) -> np.ndarray:
    """Rotation taking +z onto the unit vector ``d``."""
    z = np.array([0.0, 0.0, 1.0])
    v = np.cross(z, d)
    s, c = np.linalg.norm(v), float(z @ d)
    if s < 1e-12:
        return np.eye(3) if c > 0 else np.diag([1.0, -1.0, -1.0])
    return Rotation.from_rotvec(v / s * math.atan2(s, c)).as_matrix()


def sample_pose(spec: SceneSpec, model, intr, points, rng) -> Pose:
    """Camera pose seeing every point of ``points`` (rig frame) inside the image."""
    w, h = spec.image_size
    center = points.mean(axis=0)
    lo = np.array([w, h]) * (1.0 - spec.center_region) / 2.0
    hi = np.array([w, h]) - lo
    for _ in range(spec.max_attempts):
        pix = rng.uniform(lo, hi)
        ray, ok = unproject_pixels(model, intr, pix[None])
        dist = rng.uniform(*spec.distance) * spec.board_width
        tilt = math.radians(rng.uniform(*spec.tilt_deg))
        az = rng.uniform(0.0, 2.0 * math.pi)
        roll = rng.uniform(0.0, 2.0 * math.pi)
        if not ok[0]:
            continue
        d = ray[0]
        R = (
            _align_z(d)
            @ Rotation.from_rotvec(tilt * np.array([math.cos(az), math.sin(az), 0.0])).as_matrix()
            @ Rotation.from_rotvec([0.0, 0.0, roll]).as_matrix()
        )
        t = dist * d - R @ center
        P = points @ R.T + t
        if np.any(P[:, 2] <= 0.0):
            continue
        proj, status = project_points(model, intr, P)
        if np.any(status != 0):
            continue
        if np.any(proj < 0.0) or np.any(proj[:, 0] >= w) or np.any(proj[:, 1] >= h):
            continue
        return Pose(R, t)
    raise UnreachablePose(f"no admissible pose after {spec.max_attempts} attempts")


def generate(spec: SceneSpec) -> Scene:
    """Dataset and ground truth. Deterministic in ``spec.rng_seed``."""
    rng = np.random.default_rng(spec.rng_seed)
    model, intr = spec.model, spec.intrinsics
    if model.kind.is_backward:
        model = TargetModel(model.kind, model.params, intr.r_max_for(spec.image_size))
    boards = board_layout(spec)
    rig = rig_poses(spec)
    rig_pts = np.concatenate([rig[j].apply(np.column_stack([b.xy, np.zeros(len(b.xy))])) for j, b in enumerate(boards)])
    K = spec.n_images
    cam_R = np.zeros((K, 3, 3))
    cam_t = np.zeros((K, 3))
    records, clean = [], []
    for k in range(K):
        pose = sample_pose(spec, model, intr, rig_pts, rng)
        cam_R[k], cam_t[k] = pose.R, pose.t
        for j, b in enumerate(boards):
            X3 = np.column_stack([b.xy, np.zeros(len(b.xy))])
            pix, _ = project_points(model, intr, (pose @ rig[j]).apply(X3))
            for i, fid in enumerate(b.fiducial_ids):
                records.append([k, j, fid, pix[i, 0], pix[i, 1]])
                clean.append(pix[i])
    clean = np.asarray(clean)
    uv = clean + rng.normal(0.0, spec.noise_sigma, clean.shape) if spec.noise_sigma > 0 else clean.copy()
    M = len(records)
    n_out = int(round(spec.outlier_fraction * M))
    outliers = np.zeros(M, dtype=bool)
    if n_out:
        pick = rng.choice(M, n_out, replace=False)
        outliers[pick] = True
        uv[pick] = rng.uniform([0.0, 0.0], spec.image_size, (n_out, 2))
    for m, r in enumerate(records):
        r[3], r[4] = float(uv[m, 0]), float(uv[m, 1])
    ds = Dataset.from_records(boards, [tuple(r) for r in records], spec.image_size)
    # records were generated in canonical order already
    truth = Calibration(
        model=model,
        intrinsics=intr,
        image_ids=ds.image_ids,
        cam_R=cam_R,
        cam_t=cam_t,
        cam_valid=np.ones(K, dtype=bool),
        board_ids=ds.board_ids,
        board_R=np.stack([p.R for p in rig]),
        board_t=np.stack([p.t for p in rig]),
        board_valid=np.ones(len(boards), dtype=bool),
        references=(ds.board_ids[0],),
        extent=(float(spec.image_size[0]), float(spec.image_size[1])),
    )
    truth = refresh_division(truth, ds, 2)
    return Scene(ds, truth, outliers, clean, spec)


def split(ds: Dataset, test_fraction: float = 0.2) -> tuple[Dataset, Dataset | None]:
    """Last ``floor(test_fraction * N)`` images become the test set."""
    n_test = int(math.floor(test_fraction * ds.n_images))
    if n_test == 0:
        return ds, None
    train_ids = ds.image_ids[: ds.n_images - n_test]
    test_ids = ds.image_ids[ds.n_images - n_test :]
    return ds.subset(train_ids), ds.subset(test_ids)


def drop_labelled(ds: Dataset, labels) -> Dataset:
    """Dataset without the correspondences flagged in ``labels``."""
    keep = ~np.asarray(labels, dtype=bool)
    recs = [r for r, k in zip(ds.records(), keep) if k]
    return Dataset.from_records(ds.boards, recs, ds.image_size)


def inlier_split(scene: Scene, test_fraction: float = 0.2) -> tuple[Dataset, Dataset | None]:
    """Train/test split whose test part keeps only the uncontaminated corners."""
    train, _ = split(scene.dataset, test_fraction)
    _, test = split(drop_labelled(scene.dataset, scene.outliers), test_fraction)
    return train, test


def preset_fov(name: str) -> float:
    spec = preset(name)
    model = spec.model
    if model.kind.is_backward:
        model = TargetModel(model.kind, model.params, spec.intrinsics.r_max_for(spec.image_size))
    return math.degrees(diagonal_fov(model, spec.intrinsics, spec.image_size))


# ---------------------------------------------------------------------------
# corner-correction study
# ---------------------------------------------------------------------------

STUDY_SIGMAS = tuple(round(0.1 * i, 10) for i in range(21))
# one board view has to fill much of the frame for the centre to be observable
STUDY_DISTANCE = (0.5, 1.5)
STUDY_PROFILE = (-0.2, 0.01)
CORNER_METRICS = ("center", "rotation", "translation", "grid_rms")


def _grid_rms(est_cam: BackProjCamera, est_pose: Pose, gt_model, gt_intr, gt_pose: Pose, image_size, n=(13, 9)):
    """RMS distance between a pixel grid and the estimated reprojection of the
    board-plane points that the ground truth images onto that grid."""
    w, h = image_size
    gx, gy = np.meshgrid(np.linspace(0.0, w, n[0]), np.linspace(0.0, h, n[1]))
    grid = np.column_stack([gx.ravel(), gy.ravel()])
    rays, ok = unproject_pixels(gt_model, gt_intr, grid)
    # intersect camera rays with the board plane z = 0 of the board frame
    Rt = gt_pose.R.T
    o = -Rt @ gt_pose.t
    dirs = rays @ Rt.T
    with np.errstate(divide="ignore", invalid="ignore"):
        s = -o[2] / dirs[:, 2]
    ok &= np.isfinite(s) & (s > 0)
    Xb = o + s[:, None] * dirs
    P = est_pose.apply(Xb[ok])
    pix, status = project_points(est_cam.as_target(), est_cam.intrinsics, P)
    d2 = np.sum((pix - grid[ok]) ** 2, axis=1)
    d2 = np.where(status == 0, d2, np.nan)
    return float(np.sqrt(np.nanmean(d2))) if np.any(np.isfinite(d2)) else float("nan")


def _initial_estimate(u, X, correct: bool, N: int, extent):
    cands = solve_radial_F(u, X)
    rf = select_F(cands, u, X)
    us = u
    if correct:
        rf, us = refine_F(u, X, rf)
    X3 = np.column_stack([X, np.zeros(len(X))])
    best = None
    for pp in solve_pose(rf, 1.0):
        try:
            li = solve_intrinsics_depth(us, X, pp, rf.e, 1.0, N)
        except CalibrationError:
            continue
        if li.front_fraction <= 0.5:
            continue
        intr = Intrinsics(tuple(rf.e), 1.0, li.f)
        cam = BackProjCamera(intr, DivisionProfile(li.coeffs, intr.r_max_for(extent)))
        pose = pp.full(li.t_z)
        pix, status = project_points(cam.as_target(), intr, pose.apply(X3))
        rms = float(np.sqrt(np.mean(np.sum((pix - u) ** 2, axis=1)))) if np.all(status == 0) else np.inf
        if best is None or rms < best[0]:
            best = (rms, cam, pose)
    if best is None:
        raise CalibrationError("no admissible initial estimate")
    return best[1], best[2]


def corner_correction_trials(sigma: float, trials: int = 1000, seed: int = 0, profile=STUDY_PROFILE, N: int = 2):
    """Per-trial errors (trials, 2 variants, 4 metrics) at one noise level.

    Variant 0 uses the detected corners, variant 1 the corrected ones.
    Failed estimates are NaN.
    """
    size = (1200, 800)
    intr = Intrinsics((700.0, 500.0), 1.0, 400.0)
    model = TargetModel(ModelKind.DIV_EVEN, tuple(profile), intr.r_max_for(size))
    spec = SceneSpec(model=model, intrinsics=intr, image_size=size, n_images=1, distance=STUDY_DISTANCE)
    board = board_layout(spec)[0]
    X = board.xy
    X3 = np.column_stack([X, np.zeros(len(X))])
    out = np.full((trials, 2, 4), np.nan)
    sidx = int(round(sigma * 1000))
    for n in range(trials):
        rng = np.random.default_rng([seed, sidx, n])
        gt_pose = sample_pose(spec, model, intr, X3, rng)
        clean, _ = project_points(model, intr, gt_pose.apply(X3))
        u = clean + rng.normal(0.0, sigma, clean.shape)
        for v, correct in enumerate((False, True)):
            try:
                cam, pose = _initial_estimate(u, X, correct, N, size)
            except CalibrationError:
                continue
            out[n, v, 0] = float(np.hypot(*(np.asarray(cam.intrinsics.e) - intr.e)))
            out[n, v, 1] = rotation_angle(pose.R, gt_pose.R)
            out[n, v, 2] = float(np.linalg.norm(pose.center - gt_pose.center))
            out[n, v, 3] = _grid_rms(cam, pose, model, intr, gt_pose, size)
    return out


@dataclass(frozen=True)
class StudyRow:
    sigma: float
    variant: str
    median: tuple[float, ...]
    q25: tuple[float, ...]
    q75: tuple[float, ...]
    failures: int


def corner_correction_study(sigmas=STUDY_SIGMAS, trials: int = 1000, seed: int = 0, profile=STUDY_PROFILE) -> list[StudyRow]:
    """Median and quartiles of the four error metrics per noise level, with
    and without corner correction."""
    rows = []
    for sigma in sigmas:
        errs = corner_correction_trials(sigma, trials, seed, profile)
        for v, name in enumerate(("original", "corrected")):
            e = errs[:, v, :]
            fails = int(np.sum(np.any(np.isnan(e), axis=1)))
            # a profile that fails every trial yields NaN summaries, by design
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                rows.append(
                    StudyRow(
                        sigma=float(sigma),
                        variant=name,
                        median=tuple(float(x) for x in np.nanmedian(e, axis=0)),
                        q25=tuple(float(x) for x in np.nanpercentile(e, 25, axis=0)),
                        q75=tuple(float(x) for x in np.nanpercentile(e, 75, axis=0)),
                        failures=fails,
                    )
                )
    return rows


def correction_gain(rows: list[StudyRow]) -> dict:
    """Relative reduction of the median of each metric, averaged over sigma > 0."""
    by = {}
    for r in rows:
        by.setdefault(r.sigma, {})[r.variant] = r
    gains = {m: [] for m in CORNER_METRICS}
    for sigma, pair in sorted(by.items()):
        if sigma <= 0.0:
            continue
        for i, m in enumerate(CORNER_METRICS):
            o, c = pair["original"].median[i], pair["corrected"].median[i]
            if o > 0.0:
                gains[m].append(1.0 - c / o)
    return {m: float(np.mean(v)) if v else float("nan") for m, v in gains.items()}


# ---------------------------------------------------------------------------
# degree-selection study
# ---------------------------------------------------------------------------

STUDY_DEGREES = (2, 4, 6, 8, 10)


@dataclass(frozen=True)
class DegreeRow:
    preset: str
    degree: int
    initial_rms: float
    initial_inliers: float
    refined_rms: float
    refined_inliers: float
    holdout_rms: float


def degree_selection_study(
    presets=PRESETS,
    degrees=STUDY_DEGREES,
    n_images: int = 10,
    noise: float = 0.5,
    outliers: float = 0.0,
    seed: int = 0,
    config: RansacConfig | None = None,
    **scene_kw,
) -> list[DegreeRow]:
    """Calibrate one capture per preset with each even division degree.

    *Initial* is the best linear proposal scored on all training corners,
    *refined* the result after bundle adjustment on the same corners, and
    ``holdout_rms`` the weighted RMS on the held-out 20 % of the images with
    the intrinsics frozen.
    """
    rows = []
    for name in presets:
        scene = generate(preset(name, n_images=n_images, noise_sigma=noise, outlier_fraction=outliers, rng_seed=seed, **scene_kw))
        train, test = split(scene.dataset)
        for degree in degrees:
            cfg = replace(config or RansacConfig(), division_degree=degree // 2, rng_seed=seed)
            try:
                res = calibrate(train, cfg, ModelKind.DIV_EVEN)
            except CalibrationError:
                rows.append(DegreeRow(name, degree, math.nan, 0.0, math.nan, 0.0, math.nan))
                continue
            cal = res.calibration
            ho = math.nan
            if test is not None:
                ev = evaluate_holdout(cal.model, cal.intrinsics, test, cfg, cal.board_poses, extent=cal.extent)
                ho = ev.score.rms_weighted
            init = res.initial_score
            rows.append(
                DegreeRow(
                    preset=name,
                    degree=degree,
                    initial_rms=init.rms_weighted,
                    initial_inliers=init.inlier_ratio,
                    refined_rms=res.score.rms_weighted,
                    refined_inliers=res.score.inlier_ratio,
                    holdout_rms=ho,
                )
            )
    return rows


def _mean(v) -> float:
    return float(np.mean(v)) if v else math.nan


def degree_summary(rows: list[DegreeRow]) -> dict[int, float]:
    """Refined weighted RMS per degree, averaged over presets."""
    out = {}
    for d in sorted({r.degree for r in rows}):
        out[d] = _mean([r.refined_rms for r in rows if r.degree == d])
    return out
