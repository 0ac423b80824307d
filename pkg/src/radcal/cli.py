"""Command-line interface.

Exit codes: 0 success, 1 input or validation error, 2 estimation failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from radcal import _accel
from radcal.calib import RansacConfig, calibrate, evaluate_holdout, robust_loss
from radcal.errors import CalibrationError, InputError
from radcal.formats import (
    RESIDUAL_HEADER,
    boards_to_doc,
    csv_text,
    dataclass_rows,
    detections_to_doc,
    dumps,
    load_config,
    load_dataset,
    load_report,
    report_to_doc,
    residual_rows,
    score_to_doc,
    _pose_doc,
)
from radcal.models import ModelKind
from radcal.regress import regress_model

log = logging.getLogger("radcal")

EXIT_OK, EXIT_INPUT, EXIT_ESTIMATION = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    """Usage errors are input errors (exit 1), not argparse's default 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _svg(fig, path: Path) -> None:
    # fixed hash salt and no date keep the SVG byte-identical between runs
    import matplotlib

    matplotlib.rcParams["svg.hashsalt"] = "radcal"
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    import matplotlib.pyplot as plt

    plt.close(fig)


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def residual_plot(res, inliers, tau: float, path: Path, title: str = "") -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 5))
    ok = np.all(np.isfinite(res), axis=1)
    inl = ok & inliers
    out = ok & ~inliers
    ax.scatter(res[inl, 0], res[inl, 1], s=4, c="tab:blue", label=f"inliers ({int(inl.sum())})")
    if out.any():
        ax.scatter(res[out, 0], res[out, 1], s=4, c="tab:red", label=f"outliers ({int(out.sum())})")
    lim = max(3.0 * tau, float(np.percentile(np.abs(res[inl]), 99.5)) * 1.2 if inl.any() else 3.0 * tau)
    ax.add_patch(plt.Circle((0.0, 0.0), tau, fill=False, ls="--", color="0.4"))
    ax.set_xlim(-lim, lim)
    ax.set_ylim(-lim, lim)
    ax.set_aspect("equal")
    ax.set_xlabel("du [px]")
    ax.set_ylabel("dv [px]")
    ax.set_title(title or "reprojection residuals")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    _svg(fig, path)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _config(args) -> RansacConfig:
    kw = load_config(args.config) if args.config else {}
    if "aspect_samples" in kw:
        kw["aspect_samples"] = tuple(kw["aspect_samples"])
    if args.seed is not None:
        kw["rng_seed"] = args.seed
    cfg = RansacConfig.non_square(**{k: v for k, v in kw.items() if k != "aspect_samples"}) if args.non_square else RansacConfig(**kw)
    return cfg


def cmd_calibrate(args) -> int:
    ds = load_dataset(args.boards, args.detections)
    cfg = _config(args)
    kind = ModelKind(args.model)
    res = calibrate(ds, cfg, kind)
    cal = res.calibration
    out = Path(args.out)
    extra = {
        "iterations": res.iterations,
        "proposals": res.proposals,
        "ba_iterations": res.ba.iterations if res.ba else 0,
        "ba_converged": bool(res.ba.converged) if res.ba else False,
    }
    _write(out, dumps(report_to_doc(cal, res.score, cfg, ds.extent(), extra)))
    _write(out.with_suffix(".residuals.csv"), csv_text(RESIDUAL_HEADER, residual_rows(ds, res.residuals, res.inliers)))
    residual_plot(res.residuals, res.inliers, cfg.huber_scale, out.with_suffix(".residuals.svg"), f"{kind.value} residuals")
    s = res.score
    print(f"{kind.value}: weighted RMS {s.rms_weighted:.4f} px, inliers {100 * s.inlier_ratio:.2f}% ({s.n_inliers}/{s.n})")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cal, _, cfg = load_report(args.calib)
    ds = load_dataset(args.boards, args.detections)
    cfg = cfg or RansacConfig()
    ho = evaluate_holdout(
        cal.model, cal.intrinsics, ds, cfg, cal.board_poses, extent=cal.extent or ds.extent(), init_poses=cal.camera_poses
    )
    c = ho.calibration
    doc = {
        "format": "radcal-evaluation",
        "score": score_to_doc(ho.score),
        "cameras": [
            {"image_id": k, **_pose_doc(c.cam_R[n], c.cam_t[n])} for n, k in enumerate(c.image_ids) if c.cam_valid[n]
        ],
        "failures": [{"image_id": k, "reason": r} for k, r in sorted(ho.failures.items(), key=lambda kv: str(kv[0]))],
    }
    _write(Path(args.out), dumps(doc))
    s = ho.score
    print(
        f"hold-out: weighted RMS {s.rms_weighted:.4f} px, inliers {100 * s.inlier_ratio:.2f}%, "
        f"{len(ho.failures)} image(s) without a pose"
    )
    return EXIT_OK


def cmd_convert(args) -> int:
    cal, _, cfg = load_report(args.calib)
    if cal.division is None:
        raise InputError(f"{args.calib}: report has no division block to convert from")
    kind = ModelKind(args.model)
    samples = cfg.regression_samples if cfg else 100
    reg = regress_model(kind, cal.division, samples, r_limit=cal.division.profile.r_max)
    new = replace(cal, model=reg.model, intrinsics=reg.intrinsics)
    extra = {"converted_from": cal.model.kind.value, "profile_rms": float(reg.rms), "profile_max_abs": float(reg.max_abs)}
    _write(Path(args.out), dumps(report_to_doc(new, None, cfg, cal.extent, extra)))
    print(f"{kind.value}: parameters {', '.join(repr(p) for p in reg.model.params)}; profile RMS {reg.rms:.3e}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from radcal import synth

    if args.images < 1:
        raise InputError("--images must be at least 1")
    try:
        spec = synth.preset(
            args.preset, n_images=args.images, noise_sigma=args.noise, outlier_fraction=args.outliers, rng_seed=args.seed
        )
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    scene = synth.generate(spec)
    train, test = synth.split(scene.dataset)
    out = Path(args.out)
    _write(out / "boards.json", dumps(boards_to_doc(scene.dataset.boards)))
    _write(out / "train.json", dumps(detections_to_doc(train)))
    if test is not None:
        _write(out / "test.json", dumps(detections_to_doc(test)))
    score = robust_loss(scene.truth, train)
    extra = {"preset": args.preset, "noise_sigma": args.noise, "outlier_fraction": args.outliers}
    doc = report_to_doc(scene.truth, score, None, spec.image_size, extra)
    doc["rng_seed"] = args.seed
    _write(out / "gt.json", dumps(doc))
    rows = ((k, j, i, bool(o)) for (k, j, i, _, _), o in zip(scene.dataset.records(), scene.outliers))
    _write(out / "outliers.csv", csv_text(("image_id", "board_id", "fiducial_id", "outlier"), rows))
    n_test = 0 if test is None else test.n_images
    print(f"{args.preset}: {train.n_images} train / {n_test} test images, {len(scene.dataset)} corners")
    return EXIT_OK


def cmd_study(args) -> int:
    from radcal import synth

    out = Path(args.out)
    plt = _pyplot()
    if args.which == "corner-correction":
        trials = args.trials or 1000
        profiles = {"distorted": synth.STUDY_PROFILE, "pinhole": (0.0, 0.0)}
        header = ["profile", "sigma", "variant"]
        for m in synth.CORNER_METRICS:
            header += [f"{m}_median", f"{m}_q25", f"{m}_q75"]
        header.append("failures")
        rows = []
        fig, axes = plt.subplots(2, 2, figsize=(9, 7))
        for pname, prof in profiles.items():
            study = synth.corner_correction_study(trials=trials, seed=args.seed, profile=prof)
            for r in study:
                row = [pname, r.sigma, r.variant]
                for i in range(len(synth.CORNER_METRICS)):
                    row += [r.median[i], r.q25[i], r.q75[i]]
                rows.append(row + [r.failures])
            if pname != "distorted":
                continue
            for i, (ax, m) in enumerate(zip(axes.ravel(), synth.CORNER_METRICS)):
                for variant, color in (("original", "tab:red"), ("corrected", "tab:blue")):
                    sel = [r for r in study if r.variant == variant]
                    s = [r.sigma for r in sel]
                    ax.plot(s, [r.median[i] for r in sel], color=color, label=variant)
                    ax.fill_between(s, [r.q25[i] for r in sel], [r.q75[i] for r in sel], color=color, alpha=0.2)
                ax.set_xlabel("noise sigma [px]")
                ax.set_title(m)
            axes[0, 0].legend()
            gain = synth.correction_gain(study)
            print("median reduction from corner correction: " + ", ".join(f"{k} {100 * v:.1f}%" for k, v in gain.items()))
        fig.tight_layout()
        _write(out / "corner_correction.csv", csv_text(header, rows))
        _svg(fig, out / "corner_correction.svg")
    else:
        study = synth.degree_selection_study(seed=args.seed)
        header, rows = dataclass_rows(study)
        _write(out / "degree_selection.csv", csv_text(header, rows))
        fig, ax = plt.subplots(figsize=(7, 4))
        degrees = sorted({r.degree for r in study})
        width = 0.8 / max(len(synth.PRESETS), 1)
        for n, name in enumerate(synth.PRESETS):
            vals = [next((r.refined_rms for r in study if r.preset == name and r.degree == d), np.nan) for d in degrees]
            ax.bar(np.arange(len(degrees)) + n * width, vals, width, label=name)
        ax.set_xticks(np.arange(len(degrees)) + 0.4 - width / 2)
        ax.set_xticklabels([str(d) for d in degrees])
        ax.set_xlabel("division polynomial degree")
        ax.set_ylabel("refined weighted RMS [px]")
        ax.legend(fontsize=8)
        fig.tight_layout()
        _svg(fig, out / "degree_selection.svg")
        for d, v in synth.degree_summary(study).items():
            print(f"degree {d:2d}: mean refined weighted RMS {v:.4f} px")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="radcal", description="Calibrate pinhole, fisheye and catadioptric cameras from planar targets.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    kinds = [k.value for k in ModelKind]

    c = sub.add_parser("calibrate", help="estimate intrinsics and poses")
    c.add_argument("--detections", required=True)
    c.add_argument("--boards", required=True)
    c.add_argument("--model", required=True, choices=kinds)
    c.add_argument("--out", required=True, help="report path; residual CSV and SVG are written next to it")
    c.add_argument("--config", help="JSON file with RANSAC settings")
    c.add_argument("--non-square", action="store_true", help="sample the pixel aspect ratio over [0.5, 2]")
    c.add_argument("--seed", type=int, help="RNG seed (overrides the config file)")
    c.set_defaults(func=cmd_calibrate)

    e = sub.add_parser("evaluate", help="score a calibration on held-out detections")
    e.add_argument("--calib", required=True)
    e.add_argument("--detections", required=True)
    e.add_argument("--boards", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    v = sub.add_parser("convert", help="regress another camera model from a calibration")
    v.add_argument("--calib", required=True)
    v.add_argument("--model", required=True, choices=kinds)
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_convert)

    s = sub.add_parser("synth", help="write a synthetic capture with ground truth")
    s.add_argument("--preset", required=True, choices=["pinhole", "wide", "fisheye", "catadioptric"])
    s.add_argument("--images", type=int, default=10)
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--outliers", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("study", help="run a synthetic experiment")
    t.add_argument("--which", required=True, choices=["corner-correction", "degree-selection"])
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--trials", type=int, help="trials per noise level (corner-correction, default 1000)")
    t.set_defaults(func=cmd_study)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        _accel.set_threads(int(os.environ.get("BABELCALIB_THREADS", "0") or 0))
    except ValueError:
        print("error: BABELCALIB_THREADS must be an integer", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except CalibrationError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except (ValueError, TypeError) as exc:
        # malformed settings that passed the schema but not the dataclass checks
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
