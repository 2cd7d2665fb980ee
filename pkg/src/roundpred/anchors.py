"""Class-conditional trajectory anchors in the ego frame.

For each joint maneuver class, the anchor is the per-step mean of the
ego-frame future windows of that class's training samples, after trimming
the members whose endpoints sit farthest from the componentwise-median
endpoint.  Ties during trimming break on sample identity, so the result is
invariant to sample order.  Headings average on the unit circle and are
unwrapped along the horizon.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from . import binio

ANCHOR_MAGIC = b"RPAN"
ANCHOR_VERSION = 1


class AnchorError(Exception):
    pass


def ego_frame_futures(dataset) -> np.ndarray:
    """All future windows rotated/translated into each sample's final history pose."""
    origins = dataset.ego_hist[:, -1, :]
    fut = dataset.ego_future
    c = np.cos(origins[:, 2])[:, None]
    s = np.sin(origins[:, 2])[:, None]
    dx = fut[:, :, 0] - origins[:, None, 0]
    dy = fut[:, :, 1] - origins[:, None, 1]
    out = np.empty_like(fut)
    out[:, :, 0] = c * dx + s * dy
    out[:, :, 1] = -s * dx + c * dy
    out[:, :, 2] = fut[:, :, 2] - origins[:, None, 2]
    return out


@dataclass
class AnchorSet:
    anchors: np.ndarray  # (K, F, 3) ego-frame poses
    counts: np.ndarray  # (K,) members kept after trimming
    trim: float
    dt: float
    n_location: int
    n_acc: int

    def __post_init__(self):
        self.anchors = np.asarray(self.anchors, dtype=np.float64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        k = self.n_location * self.n_acc
        if self.anchors.ndim != 3 or self.anchors.shape[0] != k or self.anchors.shape[2] != 3:
            raise AnchorError(f"anchor array shape {self.anchors.shape} does not match {k} classes")
        if self.counts.shape != (k,):
            raise AnchorError("counts shape does not match class count")

    @property
    def n_classes(self) -> int:
        return self.anchors.shape[0]

    @property
    def horizon_steps(self) -> int:
        return self.anchors.shape[1]

    def anchor_for(self, joint: int) -> np.ndarray:
        if not 1 <= joint <= self.n_classes:
            raise KeyError(f"joint class {joint} out of range 1..{self.n_classes}")
        return self.anchors[joint - 1]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(struct.pack("<ddqq", self.trim, self.dt, self.n_location, self.n_acc))
        h.update(np.ascontiguousarray(self.anchors).tobytes())
        h.update(np.ascontiguousarray(self.counts).tobytes())
        return h.hexdigest()

    def save(self, path):
        binio.write_blob(
            path,
            ANCHOR_MAGIC,
            ANCHOR_VERSION,
            meta={"trim": self.trim, "dt": self.dt, "n_location": self.n_location, "n_acc": self.n_acc},
            arrays={"anchors": self.anchors, "counts": self.counts},
        )

    @classmethod
    def load(cls, path) -> "AnchorSet":
        meta, arrays = binio.read_blob(path, ANCHOR_MAGIC, ANCHOR_VERSION)
        try:
            return cls(
                anchors=arrays["anchors"],
                counts=arrays["counts"],
                trim=float(meta["trim"]),
                dt=float(meta["dt"]),
                n_location=int(meta["n_location"]),
                n_acc=int(meta["n_acc"]),
            )
        except (KeyError, TypeError) as exc:
            raise binio.FormatError(f"{path}: bad anchor content ({exc})") from None


def build_anchors(dataset, labels, trim: float = 0.05, n_location: int = 8, n_acc: int = 3) -> AnchorSet:
    """Trimmed per-class means of ego-frame futures; every class must be populated."""
    if not 0.0 <= trim < 1.0:
        raise ValueError(f"trim fraction must be in [0, 1), got {trim}")
    k_total = n_location * n_acc
    joint = labels.joint(n_acc=n_acc)
    ego_fut = ego_frame_futures(dataset)
    fsteps = dataset.future_steps
    anchors = np.zeros((k_total, fsteps, 3))
    counts = np.zeros(k_total, dtype=np.int64)
    for k in range(1, k_total + 1):
        members = np.flatnonzero(joint == k)
        if members.size == 0:
            raise AnchorError(f"maneuver class {k} has no training members")
        endpoints = ego_fut[members, -1, :2]
        center = np.median(endpoints, axis=0)
        dist = np.hypot(*(endpoints - center).T)
        drop = int(np.floor(trim * members.size))
        ids = dataset.ids[members]
        # identity-keyed sort fixes both the trim choice and the summation
        # order, making the result independent of sample ordering
        order = np.lexsort((ids[:, 2], ids[:, 1], ids[:, 0], dist))
        members = members[order[: members.size - drop]]
        sel = ego_fut[members]
        anchors[k - 1, :, :2] = sel[:, :, :2].mean(axis=0)
        ang = sel[:, :, 2]
        anchors[k - 1, :, 2] = np.unwrap(np.arctan2(np.sin(ang).mean(axis=0), np.cos(ang).mean(axis=0)))
        counts[k - 1] = members.size
    return AnchorSet(anchors=anchors, counts=counts, trim=trim, dt=dataset.dt,
                     n_location=n_location, n_acc=n_acc)
