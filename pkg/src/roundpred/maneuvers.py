"""Maneuver labels: future location section and mean-acceleration class.

The location label is the ring section the vehicle occupies at the end of
the prediction horizon.  When the final pose is not in a circular zone, the
last circular zone visited during the horizon decides; failing that, the
section fed by the final pose's gate zone.  Samples with none of these are
unlabelable and flagged.  The acceleration label thresholds the mean
longitudinal acceleration over the horizon.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from . import binio
from .zones import ZoneMap

N_ACCELERATION = 3
DEFAULT_THRESHOLD = 0.5
LABEL_MAGIC = b"RPLB"
LABEL_VERSION = 1


class LabelingError(Exception):
    pass


class AccelerationClass(IntEnum):
    SLOWING = 1
    CONSTANT = 2
    SPEEDING = 3


def label_acceleration(mean_lon_accel: float, threshold: float = DEFAULT_THRESHOLD) -> AccelerationClass:
    """Threshold rule; values exactly at +-threshold count as CONSTANT."""
    if mean_lon_accel < -threshold:
        return AccelerationClass.SLOWING
    if mean_lon_accel > threshold:
        return AccelerationClass.SPEEDING
    return AccelerationClass.CONSTANT


def joint_class(location: int, acceleration: int, n_acc: int = N_ACCELERATION) -> int:
    """1-based joint maneuver index; location-major ordering."""
    if location < 1 or not 1 <= acceleration <= n_acc:
        raise ValueError(f"bad maneuver pair ({location}, {acceleration})")
    return (location - 1) * n_acc + acceleration


def split_joint(joint: int, n_acc: int = N_ACCELERATION) -> tuple[int, int]:
    if joint < 1:
        raise ValueError(f"joint class must be >= 1, got {joint}")
    return (joint - 1) // n_acc + 1, (joint - 1) % n_acc + 1


@dataclass(frozen=True)
class ManeuverLabel:
    location: int
    acceleration: AccelerationClass

    @property
    def joint(self) -> int:
        return joint_class(self.location, int(self.acceleration))


def label_location(future_xy: np.ndarray, zmap: ZoneMap) -> int:
    """Section for one future window; raises LabelingError when undecidable."""
    pts = np.asarray(future_xy, dtype=np.float64)[:, :2]
    ids = zmap.locate_many(pts)
    for zid in ids[::-1]:
        if zid >= 0 and zmap.zone(int(zid)).kind == "circular":
            return int(zmap.section_of(int(zid)))
    last = int(ids[-1])
    if last >= 0:
        sec = zmap.section_of(last)
        if sec is not None:
            return int(sec)
    raise LabelingError("no circular zone visited and the final pose feeds no section")


def label_sample(sample, zmap: ZoneMap, threshold: float = DEFAULT_THRESHOLD) -> ManeuverLabel:
    """Joint label for one scene sample: location of its future, accel profile."""
    return ManeuverLabel(
        location=label_location(sample.ego_future[:, :2], zmap),
        acceleration=label_acceleration(sample.future_mean_lon_accel, threshold),
    )


@dataclass
class LabelResult:
    """Per-sample labels; location -1 marks unlabelable samples."""

    location: np.ndarray
    acceleration: np.ndarray

    @property
    def labeled_mask(self) -> np.ndarray:
        return self.location > 0

    @property
    def dropped(self) -> int:
        return int(np.sum(~self.labeled_mask))

    def joint(self, n_acc: int = N_ACCELERATION) -> np.ndarray:
        out = (self.location - 1) * n_acc + self.acceleration
        out[~self.labeled_mask] = -1
        return out


def label_dataset(dataset, zmap: ZoneMap, threshold: float = DEFAULT_THRESHOLD,
                  n_location: int | None = None) -> LabelResult:
    """Vectorized labeling of every sample in a Dataset."""
    s = len(dataset)
    fsteps = dataset.future_steps if s else 0
    if s == 0:
        return LabelResult(np.zeros(0, np.int64), np.zeros(0, np.int64))
    pts = dataset.ego_future[:, :, :2].reshape(-1, 2)
    ids = zmap.locate_many(pts)
    kind_code = np.zeros(len(ids), dtype=np.int64)  # 0 none, 1 circular, 2 feeding
    section = np.full(len(ids), -1, dtype=np.int64)
    for zid in np.unique(ids):
        if zid < 0:
            continue
        z = zmap.zone(int(zid))
        sec = zmap.section_of(int(zid))
        m = ids == zid
        if z.kind == "circular":
            kind_code[m] = 1
            section[m] = sec
        elif sec is not None:
            kind_code[m] = 2
            section[m] = sec
    kind_code = kind_code.reshape(s, fsteps)
    section = section.reshape(s, fsteps)
    circ = kind_code == 1
    has_circ = circ.any(axis=1)
    last_circ = fsteps - 1 - np.argmax(circ[:, ::-1], axis=1)
    rows = np.arange(s)
    loc = np.where(
        has_circ,
        section[rows, last_circ],
        np.where(kind_code[:, -1] == 2, section[:, -1], -1),
    )
    if n_location is not None:
        bad = np.unique(loc[(loc > n_location)])
        if bad.size:
            raise LabelingError(f"section ids {bad.tolist()} exceed the {n_location}-class location space")
    a = dataset.accel
    acc = np.where(a < -threshold, 1, np.where(a > threshold, 3, 2)).astype(np.int64)
    return LabelResult(location=loc.astype(np.int64), acceleration=acc)


def save_labels(path, labels: LabelResult, threshold: float = DEFAULT_THRESHOLD,
                extra: dict | None = None):
    binio.write_blob(
        path,
        LABEL_MAGIC,
        LABEL_VERSION,
        meta={"threshold": threshold, "extra": extra or {}},
        arrays={"location": labels.location, "acceleration": labels.acceleration},
    )


def load_labels(path):
    """Read a stored label file; returns (LabelResult, meta dict)."""
    meta, arrays = binio.read_blob(path, LABEL_MAGIC, LABEL_VERSION)
    labels = LabelResult(
        location=arrays["location"].astype(np.int64),
        acceleration=arrays["acceleration"].astype(np.int64),
    )
    return labels, meta
