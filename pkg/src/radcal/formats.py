"""JSON file formats (boards, detections, calibration reports) and CSV writers.

Inputs are validated against strict schemas: unknown fields are rejected and
every error names the JSON path it came from. Floats are written with
``repr`` so that reading a file back gives the same doubles.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, fields
from pathlib import Path

import jsonschema
import numpy as np

from radcal import __version__
from radcal.calib import Calibration, RansacConfig, Score
from radcal.dataset import Board, Dataset
from radcal.errors import InputError
from radcal.models import BackProjCamera, DivisionProfile, Intrinsics, ModelKind, TargetModel

_ID = {"type": ["integer", "string"]}
_NUM = {"type": "number"}
_VEC2 = {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}
_VEC3 = {"type": "array", "items": _NUM, "minItems": 3, "maxItems": 3}
_MAT3 = {"type": "array", "items": _VEC3, "minItems": 3, "maxItems": 3}


def _obj(props: dict, required=None) -> dict:
    return {
        "type": "object",
        "properties": props,
        "required": list(props) if required is None else list(required),
        "additionalProperties": False,
    }


BOARDS_SCHEMA = _obj(
    {
        "units": {"type": "string"},
        "boards": {
            "type": "array",
            "minItems": 1,
            "items": _obj(
                {
                    "board_id": _ID,
                    "fiducials": {
                        "type": "array",
                        "items": _obj({"fiducial_id": _ID, "x": _NUM, "y": _NUM}),
                    },
                }
            ),
        },
    },
    required=["boards"],
)

DETECTIONS_SCHEMA = _obj(
    {
        "image_size": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 2, "maxItems": 2},
        "detections": {
            "type": "array",
            "items": _obj({"image_id": _ID, "board_id": _ID, "fiducial_id": _ID, "u": _NUM, "v": _NUM}),
        },
    },
    required=["detections"],
)

_POSE = {"R": _MAT3, "t": _VEC3}
_SCORE = _obj(
    {
        "robust_loss": _NUM,
        "inlier_ratio": _NUM,
        "rms_weighted": _NUM,
        "rms_inlier": {"type": ["number", "null"]},
        "n": {"type": "integer"},
        "n_inliers": {"type": "integer"},
    }
)
_CONFIG_PROPS = {
    "iterations": {"type": "integer", "minimum": 1},
    "sample_size": {"type": "integer", "minimum": 8},
    "huber_scale": {"type": "number", "exclusiveMinimum": 0},
    "aspect_samples": {"type": "array", "items": _NUM, "minItems": 1},
    "division_degree": {"type": "integer", "minimum": 1},
    "rng_seed": {"type": "integer", "minimum": 0},
    "p3p_triples": {"type": "integer", "minimum": 1},
    "epipolar_threshold": {"type": "number", "exclusiveMinimum": 0},
    "corner_correction": {"type": "boolean"},
    "proposal_gate": {"type": "number", "exclusiveMinimum": 0},
    "stagnation": {"type": "integer", "minimum": 1},
    "early_exit_ratio": {"type": "number"},
    "lo_iterations": {"type": "integer", "minimum": 0},
    "ba_iterations": {"type": "integer", "minimum": 0},
    "regression_samples": {"type": "integer", "minimum": 2},
}
CONFIG_SCHEMA = _obj(_CONFIG_PROPS, required=[])

REPORT_SCHEMA = _obj(
    {
        "format": {"const": "radcal-calibration"},
        "tool_version": {"type": "string"},
        "units": _obj({"board": {"type": "string"}, "image": {"type": "string"}}),
        "image_size": {"type": ["array", "null"], "items": _NUM, "minItems": 2, "maxItems": 2},
        "model": _obj(
            {
                "kind": {"enum": [k.value for k in ModelKind]},
                "params": {"type": "array", "items": _NUM},
                "r_max": {"type": ["number", "null"]},
            }
        ),
        "intrinsics": _obj({"e": _VEC2, "a": _NUM, "f": _NUM}),
        "division": {
            "oneOf": [{"type": "null"}, _obj({"coeffs": {"type": "array", "items": _NUM, "minItems": 1}, "r_max": _NUM})]
        },
        "cameras": {"type": "array", "items": _obj({"image_id": _ID, **_POSE})},
        "boards": {"type": "array", "items": _obj({"board_id": _ID, **_POSE})},
        "references": {"type": "array", "items": _ID},
        "score": {"oneOf": [{"type": "null"}, _SCORE]},
        "config": {"oneOf": [{"type": "null"}, CONFIG_SCHEMA]},
        "rng_seed": {"type": ["integer", "null"]},
        "extra": {"type": "object"},
    },
    required=["format", "tool_version", "model", "intrinsics", "division", "cameras", "boards", "score"],
)


def validate(doc, schema, what: str) -> None:
    """Raise :class:`InputError` listing every violation with its JSON path."""
    v = jsonschema.Draft202012Validator(schema)
    errs = sorted(v.iter_errors(doc), key=lambda e: list(map(str, e.absolute_path)))
    if errs:
        lines = [f"{what}: /{'/'.join(map(str, e.absolute_path))}: {e.message}" for e in errs]
        raise InputError("\n".join(lines))


def read_json(path) -> object:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc


def dumps(doc) -> str:
    return json.dumps(doc, indent=2, allow_nan=False) + "\n"


def write_json(path, doc) -> None:
    Path(path).write_text(dumps(doc))


# ---------------------------------------------------------------------------
# boards and detections
# ---------------------------------------------------------------------------


def boards_to_doc(boards, units: str = "m") -> dict:
    return {
        "units": units,
        "boards": [
            {
                "board_id": b.board_id,
                "fiducials": [
                    {"fiducial_id": fid, "x": float(x), "y": float(y)} for fid, (x, y) in zip(b.fiducial_ids, b.xy)
                ],
            }
            for b in boards
        ],
    }


def boards_from_doc(doc, what: str = "boards") -> list[Board]:
    validate(doc, BOARDS_SCHEMA, what)
    out = []
    for n, b in enumerate(doc["boards"]):
        try:
            out.append(Board(b["board_id"], [f["fiducial_id"] for f in b["fiducials"]], [(f["x"], f["y"]) for f in b["fiducials"]]))
        except InputError as exc:
            raise InputError(f"{what}: /boards/{n}: {exc}") from exc
    return out


def detections_to_doc(ds: Dataset) -> dict:
    doc = {}
    if ds.image_size is not None:
        doc["image_size"] = [float(ds.image_size[0]), float(ds.image_size[1])]
    doc["detections"] = [
        {"image_id": k, "board_id": j, "fiducial_id": i, "u": float(u), "v": float(v)} for k, j, i, u, v in ds.records()
    ]
    return doc


def dataset_from_docs(boards_doc, detections_doc) -> Dataset:
    boards = boards_from_doc(boards_doc)
    validate(detections_doc, DETECTIONS_SCHEMA, "detections")
    recs = [(d["image_id"], d["board_id"], d["fiducial_id"], d["u"], d["v"]) for d in detections_doc["detections"]]
    if not recs:
        raise InputError("detections: /detections: no detections")
    return Dataset.from_records(boards, recs, detections_doc.get("image_size"))


def load_dataset(boards_path, detections_path) -> Dataset:
    return dataset_from_docs(read_json(boards_path), read_json(detections_path))


def load_config(path) -> dict:
    doc = read_json(path)
    validate(doc, CONFIG_SCHEMA, str(path))
    return doc


# ---------------------------------------------------------------------------
# calibration reports
# ---------------------------------------------------------------------------


def _pose_doc(R, t) -> dict:
    return {"R": [[float(x) for x in row] for row in R], "t": [float(x) for x in t]}


def score_to_doc(s: Score | None):
    if s is None:
        return None
    d = asdict(s)
    if d["rms_inlier"] != d["rms_inlier"]:
        d["rms_inlier"] = None
    return d


def score_from_doc(d) -> Score | None:
    if d is None:
        return None
    d = dict(d)
    if d["rms_inlier"] is None:
        d["rms_inlier"] = float("nan")
    return Score(**d)


def config_to_doc(cfg: RansacConfig | None):
    if cfg is None:
        return None
    d = asdict(cfg)
    d["aspect_samples"] = list(d["aspect_samples"])
    return d


def config_from_doc(d) -> RansacConfig | None:
    if d is None:
        return None
    d = dict(d)
    if "aspect_samples" in d:
        d["aspect_samples"] = tuple(d["aspect_samples"])
    return RansacConfig(**d)


def report_to_doc(
    calib: Calibration,
    score: Score | None = None,
    config: RansacConfig | None = None,
    image_size=None,
    extra: dict | None = None,
) -> dict:
    model = calib.model
    div = calib.division
    extent = image_size or calib.extent
    doc = {
        "format": "radcal-calibration",
        "tool_version": __version__,
        "units": {"board": "m", "image": "px"},
        "image_size": None if extent is None else [float(extent[0]), float(extent[1])],
        "model": {
            "kind": model.kind.value,
            "params": [float(p) for p in model.params],
            "r_max": None if model.r_max is None else float(model.r_max),
        },
        "intrinsics": {
            "e": [float(calib.intrinsics.e[0]), float(calib.intrinsics.e[1])],
            "a": float(calib.intrinsics.a),
            "f": float(calib.intrinsics.f),
        },
        "division": None
        if div is None
        else {"coeffs": [float(c) for c in div.profile.coeffs], "r_max": float(div.profile.r_max)},
        "cameras": [
            {"image_id": k, **_pose_doc(calib.cam_R[n], calib.cam_t[n])}
            for n, k in enumerate(calib.image_ids)
            if calib.cam_valid[n]
        ],
        "boards": [
            {"board_id": j, **_pose_doc(calib.board_R[n], calib.board_t[n])}
            for n, j in enumerate(calib.board_ids)
            if calib.board_valid[n]
        ],
        "references": list(calib.references),
        "score": score_to_doc(score),
        "config": config_to_doc(config),
        "rng_seed": None if config is None else int(config.rng_seed),
    }
    if extra:
        doc["extra"] = extra
    return doc


def report_from_doc(doc, what: str = "report") -> tuple[Calibration, Score | None, RansacConfig | None]:
    validate(doc, REPORT_SCHEMA, what)
    try:
        intr = Intrinsics(tuple(doc["intrinsics"]["e"]), doc["intrinsics"]["a"], doc["intrinsics"]["f"])
        m = doc["model"]
        model = TargetModel(ModelKind(m["kind"]), tuple(m["params"]), m["r_max"])
        div = None
        if doc["division"] is not None:
            div = BackProjCamera(intr, DivisionProfile(tuple(doc["division"]["coeffs"]), doc["division"]["r_max"]))
    except Exception as exc:
        raise InputError(f"{what}: {exc}") from exc
    cams, boards = doc["cameras"], doc["boards"]
    ids = [c["image_id"] for c in cams]
    bids = [b["board_id"] for b in boards]
    if len(set(ids)) != len(ids) or len(set(bids)) != len(bids):
        raise InputError(f"{what}: duplicate image_id or board_id")
    calib = Calibration(
        model=model,
        intrinsics=intr,
        image_ids=tuple(ids),
        cam_R=np.array([c["R"] for c in cams], dtype=np.float64).reshape(-1, 3, 3),
        cam_t=np.array([c["t"] for c in cams], dtype=np.float64).reshape(-1, 3),
        cam_valid=np.ones(len(cams), dtype=bool),
        board_ids=tuple(bids),
        board_R=np.array([b["R"] for b in boards], dtype=np.float64).reshape(-1, 3, 3),
        board_t=np.array([b["t"] for b in boards], dtype=np.float64).reshape(-1, 3),
        board_valid=np.ones(len(boards), dtype=bool),
        references=tuple(doc.get("references", ())),
        division=div,
        extent=None if doc.get("image_size") is None else tuple(doc["image_size"]),
    )
    return calib, score_from_doc(doc["score"]), config_from_doc(doc.get("config"))


def load_report(path):
    return report_from_doc(read_json(path), str(path))


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(x) for x in r])
    return buf.getvalue()


def residual_rows(ds: Dataset, res, inliers):
    d = np.hypot(res[:, 0], res[:, 1])
    for m, (k, j, i, u, v) in enumerate(ds.records()):
        yield (k, j, i, u, v, res[m, 0], res[m, 1], d[m], bool(inliers[m]))


RESIDUAL_HEADER = ("image_id", "board_id", "fiducial_id", "u", "v", "du", "dv", "distance", "inlier")


def dataclass_rows(items):
    items = list(items)
    if not items:
        return (), []
    header = tuple(f.name for f in fields(items[0]))
    return header, [tuple(getattr(it, h) for h in header) for it in items]
