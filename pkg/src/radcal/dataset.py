"""Boards, images and indexed 2D-3D correspondences.

Correspondences are stored as flat arrays sorted by (image, board, fiducial)
identifiers, so every consumer sees the same order no matter how the input
was arranged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Union

import numpy as np

from radcal.errors import InputError

ID = Union[int, str]


def id_key(v: ID):
    """Total order over mixed integer / string identifiers."""
    return (0, v, "") if isinstance(v, int) else (1, 0, str(v))


@dataclass(frozen=True, eq=False)
class Board:
    board_id: ID
    fiducial_ids: tuple
    xy: np.ndarray

    def __post_init__(self):
        xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        object.__setattr__(self, "xy", xy)
        object.__setattr__(self, "fiducial_ids", tuple(self.fiducial_ids))
        if len(self.fiducial_ids) != len(xy):
            raise InputError(f"board {self.board_id!r}: {len(self.fiducial_ids)} ids for {len(xy)} points")
        if len(set(self.fiducial_ids)) != len(self.fiducial_ids):
            raise InputError(f"board {self.board_id!r}: duplicate fiducial_id")
        if len(xy) < 4:
            raise InputError(f"board {self.board_id!r}: needs at least 4 fiducials, has {len(xy)}")
        if not np.all(np.isfinite(xy)):
            raise InputError(f"board {self.board_id!r}: non-finite fiducial coordinate")
        c = xy - xy.mean(axis=0)
        sv = np.linalg.svd(c, compute_uv=False)
        if sv[1] <= 1e-9 * max(sv[0], 1e-300):
            raise InputError(f"board {self.board_id!r}: fiducials are collinear")

    def index(self) -> dict:
        return {fid: i for i, fid in enumerate(self.fiducial_ids)}

    def __eq__(self, other):
        return (
            isinstance(other, Board)
            and self.board_id == other.board_id
            and self.fiducial_ids == other.fiducial_ids
            and np.array_equal(self.xy, other.xy)
        )


@dataclass(frozen=True)
class Correspondence:
    image_id: ID
    board_id: ID
    fiducial_id: ID
    u: tuple[float, float]
    X: tuple[float, float]


@dataclass(frozen=True, eq=False)
class Dataset:
    """Correspondences ``u[m] <-> X[m]`` with integer codes into the ID tables."""

    boards: tuple[Board, ...]
    image_ids: tuple
    img: np.ndarray
    brd: np.ndarray
    fid: np.ndarray
    uv: np.ndarray
    image_size: tuple[float, float] | None = None

    @classmethod
    def from_records(cls, boards, records, image_size=None) -> Dataset:
        """Build from ``(image_id, board_id, fiducial_id, u, v)`` tuples."""
        boards = tuple(sorted(boards, key=lambda b: id_key(b.board_id)))
        bidx = {b.board_id: j for j, b in enumerate(boards)}
        if len(bidx) != len(boards):
            raise InputError("duplicate board_id")
        fidx = [b.index() for b in boards]
        rows = []
        seen = set()
        for image_id, board_id, fiducial_id, u, v in records:
            if board_id not in bidx:
                raise InputError(f"detection references unknown board_id {board_id!r}")
            j = bidx[board_id]
            if fiducial_id not in fidx[j]:
                raise InputError(f"detection references unknown fiducial_id {fiducial_id!r} on board {board_id!r}")
            key = (image_id, board_id, fiducial_id)
            if key in seen:
                raise InputError(f"duplicate detection for image {image_id!r}, board {board_id!r}, fiducial {fiducial_id!r}")
            seen.add(key)
            if not (math.isfinite(u) and math.isfinite(v)):
                raise InputError(f"non-finite pixel for image {image_id!r}, board {board_id!r}, fiducial {fiducial_id!r}")
            rows.append((image_id, j, fidx[j][fiducial_id], float(u), float(v)))
        if not rows:
            raise InputError("no detections")
        image_ids = tuple(sorted({r[0] for r in rows}, key=id_key))
        kidx = {k: n for n, k in enumerate(image_ids)}
        rows.sort(key=lambda r: (kidx[r[0]], r[1], id_key(boards[r[1]].fiducial_ids[r[2]])))
        img = np.array([kidx[r[0]] for r in rows], dtype=np.int64)
        brd = np.array([r[1] for r in rows], dtype=np.int64)
        fid = np.array([r[2] for r in rows], dtype=np.int64)
        uv = np.array([(r[3], r[4]) for r in rows], dtype=np.float64)
        if image_size is not None:
            image_size = (float(image_size[0]), float(image_size[1]))
        return cls(boards, image_ids, img, brd, fid, uv, image_size)

    # -- basic views --------------------------------------------------------

    def __len__(self) -> int:
        return self.uv.shape[0]

    @property
    def board_ids(self) -> tuple:
        return tuple(b.board_id for b in self.boards)

    @property
    def n_images(self) -> int:
        return len(self.image_ids)

    @property
    def n_boards(self) -> int:
        return len(self.boards)

    @property
    def X(self) -> np.ndarray:
        """Board-frame points (M, 3) with ``z = 0``."""
        out = np.zeros((len(self), 3))
        for j, b in enumerate(self.boards):
            sel = self.brd == j
            out[sel, :2] = b.xy[self.fid[sel]]
        return out

    def extent(self) -> tuple[float, float]:
        """Image size, or the detections' bounding extent when it is unknown."""
        if self.image_size is not None:
            return self.image_size
        return (float(math.ceil(self.uv[:, 0].max()) + 1), float(math.ceil(self.uv[:, 1].max()) + 1))

    def diagonal(self) -> float:
        w, h = self.extent()
        return math.hypot(w, h)

    def groups(self) -> dict[tuple[int, int], np.ndarray]:
        """Indices per (image, board) pair, in canonical order."""
        key = self.img * max(self.n_boards, 1) + self.brd
        order = np.argsort(key, kind="stable")
        uniq, start = np.unique(key[order], return_index=True)
        bounds = list(start[1:]) + [len(order)]
        return {(int(k // self.n_boards), int(k % self.n_boards)): order[s:e] for k, s, e in zip(uniq, start, bounds)}

    def correspondences(self) -> Iterator[Correspondence]:
        for m in range(len(self)):
            b = self.boards[self.brd[m]]
            x, y = b.xy[self.fid[m]]
            yield Correspondence(
                self.image_ids[self.img[m]],
                b.board_id,
                b.fiducial_ids[self.fid[m]],
                (float(self.uv[m, 0]), float(self.uv[m, 1])),
                (float(x), float(y)),
            )

    def records(self) -> list[tuple]:
        return [(c.image_id, c.board_id, c.fiducial_id, c.u[0], c.u[1]) for c in self.correspondences()]

    def subset(self, image_ids) -> Dataset:
        keep = set(image_ids)
        recs = [r for r in self.records() if r[0] in keep]
        return Dataset.from_records(self.boards, recs, self.image_size)

    def with_pixels(self, uv) -> Dataset:
        return Dataset(self.boards, self.image_ids, self.img, self.brd, self.fid, np.asarray(uv, dtype=np.float64), self.image_size)

    def __eq__(self, other):
        return (
            isinstance(other, Dataset)
            and self.boards == other.boards
            and self.image_ids == other.image_ids
            and np.array_equal(self.img, other.img)
            and np.array_equal(self.brd, other.brd)
            and np.array_equal(self.fid, other.fid)
            and np.array_equal(self.uv, other.uv)
            and self.image_size == other.image_size
        )
