"""Drone-recording ingestion: CSV parsing, track filtering, sample windowing.

Recordings arrive as three CSVs sharing a numeric prefix: per-frame track
rows, per-track metadata, and recording metadata.  Parsing is strict: a
missing column raises SchemaError, a malformed cell raises ParseError with
its row number, and cross-file disagreements raise IntegrityError.

Filtering removes vulnerable road users, drops frames inside excluded map
zones, keeps each track's longest contiguous run, and trims leading and
trailing frames that lie outside every zone and farther than one vehicle
length from the nearest entry/exit gate.

Windowing cuts fixed history/future windows at a frame stride, downsampled
by keeping every k-th pose counting backward from the window end, and packs
them with co-present neighbor histories into a flat-array Dataset.
"""

from __future__ import annotations

import csv
import glob
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import binio
from .zones import ZoneMap

DATASET_MAGIC = b"RPDS"
DATASET_VERSION = 1


class IngestError(Exception):
    """Base class for ingestion failures."""


class ParseError(IngestError):
    pass


class SchemaError(IngestError):
    pass


class IntegrityError(IngestError):
    pass


@dataclass(frozen=True)
class TrackColumns:
    """Column-name mapping; defaults follow the drone-dataset convention."""

    rec: str = "recordingId"
    track: str = "trackId"
    frame: str = "frame"
    x: str = "xCenter"
    y: str = "yCenter"
    heading: str = "heading"
    lon_accel: str = "lonAcceleration"
    meta_initial: str = "initialFrame"
    meta_final: str = "finalFrame"
    meta_count: str = "numFrames"
    meta_class: str = "class"
    meta_width: str = "width"
    meta_length: str = "length"
    rate: str = "frameRate"


@dataclass(frozen=True)
class IngestConfig:
    history_raw: int = 50
    future_raw: int = 100
    downsample: int = 4
    stride: int = 25
    neighbor_radius: float | None = None
    vru_classes: tuple = ("pedestrian", "bicycle", "motorcycle")
    expected_frame_rate: int = 25
    heading_degrees: bool = True
    columns: TrackColumns = field(default_factory=TrackColumns)

    def __post_init__(self):
        if self.history_raw < self.downsample or self.future_raw < self.downsample:
            raise ValueError("window shorter than the downsample factor")
        if self.stride < 1 or self.downsample < 1:
            raise ValueError("stride and downsample must be positive")

    @property
    def history_steps(self) -> int:
        return (self.history_raw - 1) // self.downsample + 1

    @property
    def future_steps(self) -> int:
        return self.future_raw // self.downsample

    @property
    def dt(self) -> float:
        return self.downsample / self.expected_frame_rate


@dataclass
class Track:
    rec_id: int
    track_id: int
    cls: str
    width: float
    length: float
    frames: np.ndarray  # strictly consecutive after filtering
    xy: np.ndarray
    heading: np.ndarray  # radians, unwrapped
    lon_accel: np.ndarray

    def __len__(self):
        return len(self.frames)

    @property
    def poses(self) -> np.ndarray:
        return np.concatenate([self.xy, self.heading[:, None]], axis=1)

    def sliced(self, lo: int, hi: int) -> "Track":
        return replace(
            self,
            frames=self.frames[lo:hi],
            xy=self.xy[lo:hi],
            heading=self.heading[lo:hi],
            lon_accel=self.lon_accel[lo:hi],
        )


@dataclass
class Recording:
    rec_id: int
    frame_rate: int
    tracks: list


# ---------------------------------------------------------------------------
# parsing


def _read_header(path) -> list[str]:
    try:
        with open(path, newline="") as fh:
            header = next(csv.reader(fh), None)
    except OSError as exc:
        raise ParseError(f"{path}: {exc}") from None
    if not header:
        raise ParseError(f"{path}: empty file")
    return header


def _require(path, header, names):
    missing = [n for n in names if n not in header]
    if missing:
        raise SchemaError(f"{path}: missing required columns {missing}")


def _locate_bad_cell(path, header, usecols):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ParseError(f"{path}: row {row_no} has {len(row)} fields, expected {len(header)}")
            for ci in usecols:
                try:
                    float(row[ci])
                except ValueError:
                    raise ParseError(
                        f"{path}: row {row_no}, column {header[ci]!r}: cannot parse {row[ci]!r}"
                    ) from None
    raise ParseError(f"{path}: malformed numeric data")


def _load_numeric(path, names) -> dict[str, np.ndarray]:
    header = _read_header(path)
    _require(path, header, names)
    usecols = [header.index(n) for n in names]
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, usecols=usecols, ndmin=2, dtype=np.float64)
    except ValueError:
        _locate_bad_cell(path, header, usecols)
        raise
    return {n: data[:, i] for i, n in enumerate(names)}


def _read_rows(path, names) -> list[dict]:
    header = _read_header(path)
    _require(path, header, names)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return list(reader)


def load_recording(tracks_path, cfg: IngestConfig = IngestConfig()) -> Recording:
    """Parse one recording given the path of its *_tracks.csv file."""
    if not str(tracks_path).endswith("_tracks.csv"):
        raise ParseError(f"{tracks_path}: expected a *_tracks.csv path")
    base = str(tracks_path)[: -len("_tracks.csv")]
    meta_path = base + "_tracksMeta.csv"
    rec_path = base + "_recordingMeta.csv"
    c = cfg.columns

    rec_rows = _read_rows(rec_path, (c.rec, c.rate))
    if len(rec_rows) != 1:
        raise ParseError(f"{rec_path}: expected exactly one row, got {len(rec_rows)}")
    try:
        rec_id = int(float(rec_rows[0][c.rec]))
        frame_rate = int(float(rec_rows[0][c.rate]))
    except (ValueError, TypeError):
        raise ParseError(f"{rec_path}: malformed id or frame rate") from None
    if frame_rate != cfg.expected_frame_rate:
        raise IntegrityError(
            f"{rec_path}: frame rate {frame_rate} differs from expected {cfg.expected_frame_rate}"
        )

    meta_rows = _read_rows(
        meta_path, (c.rec, c.track, c.meta_initial, c.meta_final, c.meta_count, c.meta_class, c.meta_width, c.meta_length)
    )
    meta = {}
    for row_no, row in enumerate(meta_rows, start=2):
        try:
            tid = int(float(row[c.track]))
            meta[tid] = {
                "initial": int(float(row[c.meta_initial])),
                "final": int(float(row[c.meta_final])),
                "count": int(float(row[c.meta_count])),
                "cls": row[c.meta_class].strip(),
                "width": float(row[c.meta_width]),
                "length": float(row[c.meta_length]),
            }
        except (ValueError, TypeError):
            raise ParseError(f"{meta_path}: row {row_no}: malformed track metadata") from None

    cols = _load_numeric(tracks_path, (c.rec, c.track, c.frame, c.x, c.y, c.heading, c.lon_accel))
    recs = cols[c.rec].astype(np.int64)
    if len(recs) and not np.all(recs == rec_id):
        raise IntegrityError(f"{tracks_path}: rows reference a recording other than {rec_id}")
    tids = cols[c.track].astype(np.int64)
    frames = cols[c.frame].astype(np.int64)
    order = np.lexsort((frames, tids))
    tids, frames = tids[order], frames[order]
    xy = np.stack([cols[c.x][order], cols[c.y][order]], axis=1)
    heading = cols[c.heading][order]
    if cfg.heading_degrees:
        heading = np.radians(heading)
    lon_accel = cols[c.lon_accel][order]

    tracks = []
    boundaries = np.flatnonzero(np.diff(tids)) + 1
    for lo, hi in zip(np.r_[0, boundaries], np.r_[boundaries, len(tids)]):
        if hi <= lo:
            continue
        tid = int(tids[lo])
        if tid not in meta:
            raise IntegrityError(f"{tracks_path}: track {tid} missing from {meta_path}")
        m = meta.pop(tid)
        f = frames[lo:hi]
        if np.any(np.diff(f) <= 0):
            raise IntegrityError(f"{tracks_path}: track {tid} has non-increasing frames")
        if int(f[0]) != m["initial"] or int(f[-1]) != m["final"] or (hi - lo) != m["count"]:
            raise IntegrityError(
                f"{tracks_path}: track {tid} span {int(f[0])}..{int(f[-1])} ({hi - lo} rows) "
                f"disagrees with metadata {m['initial']}..{m['final']} ({m['count']})"
            )
        tracks.append(
            Track(
                rec_id=rec_id,
                track_id=tid,
                cls=m["cls"],
                width=m["width"],
                length=m["length"],
                frames=f,
                xy=xy[lo:hi],
                heading=np.unwrap(heading[lo:hi]),
                lon_accel=lon_accel[lo:hi],
            )
        )
    if meta:
        raise IntegrityError(f"{meta_path}: tracks {sorted(meta)} have no rows in {tracks_path}")
    return Recording(rec_id=rec_id, frame_rate=frame_rate, tracks=tracks)


def load_corpus(directory, cfg: IngestConfig = IngestConfig()) -> list[Recording]:
    paths = sorted(glob.glob(os.path.join(str(directory), "*_tracks.csv")))
    if not paths:
        raise ParseError(f"{directory}: no *_tracks.csv files found")
    return [load_recording(p, cfg) for p in paths]


# ---------------------------------------------------------------------------
# filtering


def filter_track(tr: Track, zmap: ZoneMap, cfg: IngestConfig) -> Track | None:
    """Apply zone-based cleanup to one track; None when nothing survives."""
    if tr.cls in cfg.vru_classes:
        return None
    ids = zmap.locate_many(tr.xy)
    excluded_ids = {z.id for z in zmap.zones_of_kind("excluded")}
    keep = ~np.isin(ids, list(excluded_ids)) if excluded_ids else np.ones(len(ids), bool)

    # longest run of kept rows with consecutive frame numbers
    breaks = np.flatnonzero(np.diff(tr.frames) != 1) + 1
    run_edges = np.r_[0, breaks, len(tr.frames)]
    best_lo = best_hi = 0
    for lo, hi in zip(run_edges[:-1], run_edges[1:]):
        m = keep[lo:hi]
        starts = np.flatnonzero(np.diff(np.r_[0, m.astype(np.int8)]) == 1) + lo
        ends = np.flatnonzero(np.diff(np.r_[m.astype(np.int8), 0]) == -1) + lo + 1
        for s, e in zip(starts, ends):
            if e - s > best_hi - best_lo:
                best_lo, best_hi = s, e
    if best_hi == best_lo:
        return None
    tr2 = tr.sliced(best_lo, best_hi)
    ids2 = ids[best_lo:best_hi]

    off_map = ids2 < 0
    if np.any(off_map):
        gate_d = zmap.min_distance_to_kinds(tr2.xy, ("entry", "exit"))
        trim = off_map & (gate_d > tr.length)
        lo = 0
        while lo < len(trim) and trim[lo]:
            lo += 1
        hi = len(trim)
        while hi > lo and trim[hi - 1]:
            hi -= 1
        if hi <= lo:
            return None
        tr2 = tr2.sliced(lo, hi)
    return tr2


def filter_recording(rec: Recording, zmap: ZoneMap, cfg: IngestConfig) -> Recording:
    kept = []
    for tr in rec.tracks:
        out = filter_track(tr, zmap, cfg)
        if out is not None and len(out) > 0:
            kept.append(out)
    return Recording(rec_id=rec.rec_id, frame_rate=rec.frame_rate, tracks=kept)


# ---------------------------------------------------------------------------
# windowing


@dataclass
class SceneSample:
    rec_id: int
    track_id: int
    t_frame: int
    ego_history: np.ndarray  # (H, 3) world poses, downsampled, ends at t_frame
    ego_future: np.ndarray  # (F, 3) world poses
    future_mean_lon_accel: float
    neighbors: np.ndarray  # (m, H, 3) co-present neighbor histories


class Dataset:
    """Flat-array sample store with ragged neighbor segments."""

    def __init__(self, ego_hist, ego_future, accel, ids, neigh, neigh_off, dt, downsample, frame_rate):
        self.ego_hist = np.asarray(ego_hist, dtype=np.float64)
        self.ego_future = np.asarray(ego_future, dtype=np.float64)
        self.accel = np.asarray(accel, dtype=np.float64)
        self.ids = np.asarray(ids, dtype=np.int64)
        self.neigh = np.asarray(neigh, dtype=np.float64)
        self.neigh_off = np.asarray(neigh_off, dtype=np.int64)
        self.dt = float(dt)
        self.downsample = int(downsample)
        self.frame_rate = int(frame_rate)
        s = len(self.ego_hist)
        if not (
            len(self.ego_future) == len(self.accel) == len(self.ids) == s
            and len(self.neigh_off) == s + 1
            and self.neigh_off[0] == 0
            and (s == 0 or self.neigh_off[-1] == len(self.neigh))
            and np.all(np.diff(self.neigh_off) >= 0)
        ):
            raise ValueError("inconsistent dataset arrays")

    def __len__(self):
        return len(self.ego_hist)

    @property
    def history_steps(self) -> int:
        return self.ego_hist.shape[1]

    @property
    def future_steps(self) -> int:
        return self.ego_future.shape[1]

    def neighbors_of(self, i: int) -> np.ndarray:
        return self.neigh[self.neigh_off[i] : self.neigh_off[i + 1]]

    def sample(self, i: int) -> SceneSample:
        r, t, f = self.ids[i]
        return SceneSample(
            rec_id=int(r),
            track_id=int(t),
            t_frame=int(f),
            ego_history=self.ego_hist[i],
            ego_future=self.ego_future[i],
            future_mean_lon_accel=float(self.accel[i]),
            neighbors=self.neighbors_of(i),
        )

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        segs = [self.neighbors_of(int(i)) for i in indices]
        counts = np.array([len(s) for s in segs], dtype=np.int64)
        if segs:
            neigh = np.concatenate(segs)
        else:
            neigh = np.zeros((0, self.ego_hist.shape[1], 3))
        return Dataset(
            self.ego_hist[indices],
            self.ego_future[indices],
            self.accel[indices],
            self.ids[indices],
            neigh,
            np.r_[0, np.cumsum(counts)],
            self.dt,
            self.downsample,
            self.frame_rate,
        )

    def save(self, path):
        binio.write_blob(
            path,
            DATASET_MAGIC,
            DATASET_VERSION,
            meta={
                "dt": self.dt,
                "downsample": self.downsample,
                "frame_rate": self.frame_rate,
                "history_steps": int(self.ego_hist.shape[1]) if len(self) else 0,
                "future_steps": int(self.ego_future.shape[1]) if len(self) else 0,
            },
            arrays={
                "ego_hist": self.ego_hist,
                "ego_future": self.ego_future,
                "accel": self.accel,
                "ids": self.ids,
                "neigh": self.neigh,
                "neigh_off": self.neigh_off,
            },
        )

    @classmethod
    def load(cls, path) -> "Dataset":
        meta, arrays = binio.read_blob(path, DATASET_MAGIC, DATASET_VERSION)
        try:
            return cls(
                arrays["ego_hist"],
                arrays["ego_future"],
                arrays["accel"],
                arrays["ids"],
                arrays["neigh"],
                arrays["neigh_off"],
                meta["dt"],
                meta["downsample"],
                meta["frame_rate"],
            )
        except (KeyError, ValueError) as exc:
            raise binio.FormatError(f"{path}: bad dataset content ({exc})") from None


def _window_indices(raw_len: int, downsample: int) -> np.ndarray:
    start = (raw_len - 1) % downsample
    return np.arange(start, raw_len, downsample)


def build_dataset(recordings, cfg: IngestConfig = IngestConfig()) -> Dataset:
    """Cut stride-spaced samples from filtered recordings."""
    h_raw, f_raw, ds = cfg.history_raw, cfg.future_raw, cfg.downsample
    hist_rel = _window_indices(h_raw, ds) - (h_raw - 1)  # offsets from anchor, <= 0
    fut_rel = _window_indices(f_raw, ds) + 1  # offsets from anchor, >= 1
    ego_h, ego_f, accel, ids, neigh, counts = [], [], [], [], [], []
    for rec in sorted(recordings, key=lambda r: r.rec_id):
        tracks = sorted(rec.tracks, key=lambda t: t.track_id)
        ranges = [(tr.track_id, int(tr.frames[0]), int(tr.frames[-1])) for tr in tracks]
        poses = {tr.track_id: tr.poses for tr in tracks}
        for tr in tracks:
            n = len(tr)
            first = int(tr.frames[0])
            own = poses[tr.track_id]
            for i in range(h_raw - 1, n - f_raw, 1):
                if (i - (h_raw - 1)) % cfg.stride != 0:
                    continue
                t_abs = first + i
                ego_h.append(own[i + hist_rel])
                ego_f.append(own[i + fut_rel])
                accel.append(float(np.mean(tr.lon_accel[i + 1 : i + f_raw + 1])))
                ids.append((rec.rec_id, tr.track_id, t_abs))
                m = 0
                for tid, lo, hi in ranges:
                    if tid == tr.track_id or lo > t_abs - (h_raw - 1) or hi < t_abs:
                        continue
                    off = t_abs - lo
                    if cfg.neighbor_radius is not None:
                        d = np.hypot(*(poses[tid][off, :2] - tr.xy[i]))
                        if d > cfg.neighbor_radius:
                            continue
                    neigh.append(poses[tid][off + hist_rel])
                    m += 1
                counts.append(m)
    s = len(ego_h)
    hs = cfg.history_steps
    fs = cfg.future_steps
    return Dataset(
        np.array(ego_h).reshape(s, hs, 3),
        np.array(ego_f).reshape(s, fs, 3),
        np.array(accel),
        np.array(ids, dtype=np.int64).reshape(s, 3),
        np.array(neigh).reshape(len(neigh), hs, 3) if neigh else np.zeros((0, hs, 3)),
        np.r_[0, np.cumsum(np.array(counts, dtype=np.int64))] if counts else np.zeros(s + 1, np.int64),
        dt=cfg.dt,
        downsample=ds,
        frame_rate=cfg.expected_frame_rate,
    )
