"""Uncompressed COCO run-length encoding.

Pixels are read in column-major order; counts alternate background and
foreground runs and always start with a (possibly empty) background run.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class CodecError(ValueError):
    pass


class EmptyMaskError(ValueError):
    """The mask has no foreground, so it has no bounding box."""


@dataclass(frozen=True)
class RleMask:
    size: tuple[int, int]  # (height, width)
    counts: tuple[int, ...]

    @property
    def area(self) -> int:
        return int(sum(self.counts[1::2]))

    def to_json(self) -> dict:
        return {"size": list(self.size), "counts": list(self.counts)}

    @classmethod
    def from_json(cls, obj: dict) -> "RleMask":
        h, w = obj["size"]
        return cls((int(h), int(w)), tuple(int(c) for c in obj["counts"]))


def rle_encode(mask) -> RleMask:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise CodecError(f"expected a 2-D mask, got shape {mask.shape}")
    flat = mask.astype(bool).ravel(order="F")
    h, w = mask.shape
    if flat.size == 0:
        return RleMask((h, w), ())
    edges = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    counts = np.diff(np.concatenate(([0], edges, [flat.size])))
    if flat[0]:
        counts = np.concatenate(([0], counts))
    return RleMask((h, w), tuple(int(c) for c in counts))


def rle_decode(rle: RleMask) -> np.ndarray:
    h, w = rle.size
    counts = np.asarray(rle.counts, dtype=np.int64)
    if (counts < 0).any():
        raise CodecError("negative run length")
    if counts.sum() != h * w:
        raise CodecError(f"run lengths sum to {int(counts.sum())}, expected {h}*{w}={h * w}")
    values = np.arange(counts.size) % 2 == 1
    return np.repeat(values, counts).reshape((h, w), order="F").astype(np.uint8)


def _boundaries(rle: RleMask) -> np.ndarray:
    return np.cumsum(np.asarray(rle.counts, dtype=np.int64))


def rle_overlap(a: RleMask, b: RleMask) -> tuple[int, int]:
    """(intersection, union) pixel counts computed on runs, without decoding."""
    if tuple(a.size) != tuple(b.size):
        raise CodecError(f"mask sizes differ: {a.size} vs {b.size}")
    ba, bb = _boundaries(a), _boundaries(b)
    points = np.union1d(np.union1d(ba, bb), [0])
    starts, lengths = points[:-1], np.diff(points)
    # run index containing each segment; odd indices are foreground runs
    in_a = np.searchsorted(ba, starts, side="right") % 2 == 1
    in_b = np.searchsorted(bb, starts, side="right") % 2 == 1
    return int(lengths[in_a & in_b].sum()), int(lengths[in_a | in_b].sum())


def bbox_from_mask(mask) -> tuple[int, int, int, int]:
    """Tight [xmin, ymin, width, height] of the foreground."""
    mask = np.asarray(mask).astype(bool)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise EmptyMaskError("mask has no foreground pixels")
    return int(cols[0]), int(rows[0]), int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1)
