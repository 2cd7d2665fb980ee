"""Horizon-indexed displacement error and deterministic result reports.

Predictions and targets live in each sample's ego frame; positional RMSE is
unchanged by that rigid transform, so no conversion back to world
coordinates is needed before scoring.

Horizon times that fall between decoder steps snap to the nearest step; on
the default 0.16 s grid the 1/2/3/4 s horizons land on steps 6/12/19/25,
i.e. 0.96/1.92/3.04/4.00 s, and the report header records that mapping.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from . import net
from .ingest import Dataset
from .maneuvers import LabelResult
from .net import Model, VariantError

DEFAULT_HORIZONS = (1.0, 2.0, 3.0, 4.0)

# evaluation modes per variant: the anchored model is scored both on its
# most-probable class and on the probability-weighted mixture mean
VARIANT_MODES = {
    "2d": ("point",),
    "3d": ("point",),
    "3d-m": ("point",),
    "3d-a": ("map", "weighted"),
}

# Published full-scale results (m) at 1/2/3/4 s on the real drone-recorded
# roundabout benchmark.  Desk-scale synthetic runs are not comparable in
# magnitude; these rows travel with reports purely as context.
REFERENCE_RMSE = {
    "2d": (0.53, 1.62, 3.10, 4.92),
    "3d": (0.55, 1.32, 2.50, 4.02),
    "3d-m": (0.42, 0.87, 1.95, 3.31),
    "3d-a map": (0.39, 0.84, 1.87, 3.27),
    "3d-a weighted": (0.38, 0.80, 1.76, 3.08),
}


class EvaluationError(Exception):
    pass


def horizon_indices(horizons, dt: float, future_steps: int) -> np.ndarray:
    """0-based future-step index for each horizon time (nearest step, >= 1)."""
    steps = np.rint(np.asarray(horizons, dtype=np.float64) / dt).astype(np.int64)
    steps = np.clip(steps, 1, future_steps)
    return steps - 1


def rmse_at_horizons(pred, target, horizons, dt: float) -> np.ndarray:
    """Root-mean-square positional error at each horizon, in meters."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape[:2] != target.shape[:2]:
        raise ValueError(f"prediction horizon grid {pred.shape} does not match target {target.shape}")
    if len(pred) == 0:
        raise EvaluationError("cannot score an empty sample set")
    idx = horizon_indices(horizons, dt, pred.shape[1])
    diff = pred[:, idx, :2] - target[:, idx, :2]
    return np.sqrt(np.mean(np.sum(diff**2, axis=2), axis=0))


def predict_positions(model: Model, dataset: Dataset, indices, mode: str, batch_size: int = 256):
    """Batched ego-frame predictions and targets for a set of samples."""
    indices = np.asarray(indices, dtype=np.int64)
    preds, targets = [], []
    for start in range(0, len(indices), batch_size):
        batch = net.prepare_batch(dataset, indices[start : start + batch_size])
        preds.append(model.predict(batch, mode=mode))
        targets.append(batch["future"])
    d = model.cfg.pose_dim
    if not preds:
        f = dataset.ego_future.shape[1]
        return np.zeros((0, f, d)), np.zeros((0, f, 3))
    return np.concatenate(preds), np.concatenate(targets)


def maneuver_accuracy(model: Model, dataset: Dataset, labels: LabelResult, indices,
                      batch_size: int = 256) -> dict:
    """Fraction of samples whose predicted location/acceleration class is right."""
    if not model.cfg.uses_maneuvers:
        raise VariantError(f"variant {model.cfg.variant!r} has no maneuver heads")
    indices = np.asarray(indices, dtype=np.int64)
    loc_hits = acc_hits = 0
    for start in range(0, len(indices), batch_size):
        idx = indices[start : start + batch_size]
        batch = net.prepare_batch(dataset, idx)
        ctx = model._context(batch, training=False)
        loc, acc = model._heads(ctx)
        loc_hits += int(np.sum(np.argmax(loc.value, axis=1) + 1 == labels.location[idx]))
        acc_hits += int(np.sum(np.argmax(acc.value, axis=1) + 1 == labels.acceleration[idx]))
    n = max(len(indices), 1)
    return {"location": loc_hits / n, "acceleration": acc_hits / n}


@dataclass(frozen=True)
class RmseRow:
    label: str
    values: tuple
    n: int = 0  # samples scored; 0 marks a context row

    @property
    def average(self) -> float:
        return float(np.mean(self.values))


@dataclass(frozen=True)
class RmseReport:
    horizons: tuple
    rows: tuple
    dt: float = 0.16
    config_hash: str = ""

    def row(self, label: str) -> RmseRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(f"no row labeled {label!r}")

    def step_times(self) -> tuple:
        idx = horizon_indices(self.horizons, self.dt, 10**9)
        return tuple(float((i + 1) * self.dt) for i in idx)

    def format(self) -> str:
        steps = horizon_indices(self.horizons, self.dt, 10**9) + 1
        mapping = ", ".join(
            f"{h:g}s->step {s} ({t:.2f}s)" for h, s, t in zip(self.horizons, steps, self.step_times())
        )
        lines = [f"# horizons: {mapping}"]
        if self.config_hash:
            lines.append(f"# config {self.config_hash}")
        width = max([16] + [len(r.label) for r in self.rows])
        head = "model".ljust(width) + "".join(f"{h:>8.1f}s" for h in self.horizons) + f"{'avg':>9}{'n':>8}"
        lines += [head, "-" * len(head)]
        for r in self.rows:
            count = str(r.n) if r.n else "-"
            lines.append(
                r.label.ljust(width) + "".join(f"{v:>9.3f}" for v in r.values) + f"{r.average:>9.3f}{count:>8}"
            )
        return "\n".join(lines) + "\n"

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(f"# dt {self.dt!r}\n")
            if self.config_hash:
                fh.write(f"# config {self.config_hash}\n")
            writer = csv.writer(fh)
            writer.writerow(["model"] + [f"rmse_{h:g}s" for h in self.horizons] + ["rmse_avg", "n_samples"])
            for r in self.rows:
                writer.writerow([r.label] + [repr(float(v)) for v in r.values] + [repr(r.average), r.n])

    @classmethod
    def from_csv(cls, path, dt: float = 0.16) -> "RmseReport":
        config_hash = ""
        with open(path, newline="") as fh:
            data_lines = []
            for line in fh:
                if line.startswith("# dt "):
                    dt = float(line[5:])
                elif line.startswith("# config "):
                    config_hash = line[9:].strip()
                elif line.strip():
                    data_lines.append(line)
        reader = csv.reader(data_lines)
        header = next(reader)
        horizons = tuple(float(h[5:-1]) for h in header[1:-2])
        rows = tuple(
            RmseRow(r[0], tuple(float(v) for v in r[1:-2]), int(r[-1])) for r in reader
        )
        return cls(horizons=horizons, rows=rows, dt=dt, config_hash=config_hash)


def reference_rows(horizons=DEFAULT_HORIZONS) -> tuple:
    """Context rows with the published full-scale numbers (only on the 1-4 s grid)."""
    if tuple(horizons) != DEFAULT_HORIZONS:
        return ()
    return tuple(RmseRow(f"{label} (published)", values) for label, values in REFERENCE_RMSE.items())


def run_config_hash(run) -> str:
    """Digest of everything that determines a run's scores on its test split."""
    payload = {
        "model": asdict(run.model.cfg),
        "train": asdict(run.config),
        "anchors": run.anchors.content_hash() if run.anchors is not None else "",
        "test_ids": hashlib.sha256(np.ascontiguousarray(run.dataset.ids[run.split.test]).tobytes()).hexdigest(),
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def score_model(model: Model, dataset: Dataset, indices, mode: str,
                horizons=DEFAULT_HORIZONS, batch_size: int = 256) -> RmseRow:
    pred, target = predict_positions(model, dataset, indices, mode, batch_size)
    if len(pred) == 0:
        raise EvaluationError("cannot score an empty sample set")
    label = model.cfg.variant if mode == "point" else f"{model.cfg.variant} {mode}"
    return RmseRow(label, tuple(rmse_at_horizons(pred, target, horizons, model.cfg.dt)), n=len(pred))


def evaluate_run(run, horizons=DEFAULT_HORIZONS, indices=None, batch_size: int = 256,
                 include_reference: bool = False, modes=None) -> RmseReport:
    """Score one training run on its test partition, one row per mode."""
    idx = run.split.test if indices is None else indices
    allowed = VARIANT_MODES[run.model.cfg.variant]
    if modes is None:
        modes = allowed
    for mode in modes:
        if mode not in allowed:
            raise VariantError(f"variant '{run.model.cfg.variant}' has no evaluation mode '{mode}'")
    rows = [
        score_model(run.model, run.dataset, idx, mode, horizons, batch_size)
        for mode in modes
    ]
    if include_reference:
        rows += list(reference_rows(horizons))
    return RmseReport(horizons=tuple(horizons), rows=tuple(rows), dt=run.model.cfg.dt,
                      config_hash=run_config_hash(run))


def merge_reports(reports) -> RmseReport:
    reports = list(reports)
    horizons = reports[0].horizons
    for r in reports[1:]:
        if r.horizons != horizons or r.dt != reports[0].dt:
            raise ValueError("cannot merge reports with different horizon grids")
    merged_hash = hashlib.sha256("".join(r.config_hash for r in reports).encode()).hexdigest()
    return RmseReport(horizons=horizons, rows=tuple(row for r in reports for row in r.rows),
                      dt=reports[0].dt, config_hash=merged_hash)
