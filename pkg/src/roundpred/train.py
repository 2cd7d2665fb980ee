"""Training loop: hashed splits, minibatch optimization, early stopping.

Splits are keyed on (recording, track) so every window of a track lands in
the same partition; the assignment is a pure function of those ids and the
seed, which keeps reruns bit-identical and prevents near-duplicate windows
from leaking across partitions.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from . import diffnum as dn
from . import net
from .anchors import AnchorSet, build_anchors
from .ingest import Dataset
from .maneuvers import LabelResult
from .net import Model, ModelConfig

OPTIMIZERS = ("adam", "sgd")


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "3d-a"
    seed: int = 0
    learning_rate: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 40
    patience: int = 3
    optimizer: str = "adam"
    trim: float = 0.05
    train_fraction: float = 0.71
    val_fraction: float = 0.10
    n_location: int = 8
    n_acc: int = 3

    def __post_init__(self):
        if self.variant not in net.VARIANTS:
            raise net.VariantError(f"unknown variant {self.variant!r}; choose from {net.VARIANTS}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}; choose from {OPTIMIZERS}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be positive")
        if not (0 < self.train_fraction and 0 <= self.val_fraction and self.train_fraction + self.val_fraction < 1):
            raise ValueError("train/val fractions must leave room for a test partition")


@dataclass(frozen=True)
class SplitIndices:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def split_dataset(ids: np.ndarray, seed: int, train_fraction: float = 0.71, val_fraction: float = 0.10) -> SplitIndices:
    """Partition sample rows (rec, track, t) into train/val/test by track hash."""
    ids = np.asarray(ids, dtype=np.int64)
    cache: dict[tuple[int, int], float] = {}
    u = np.empty(len(ids))
    for i, (rec, track, _t) in enumerate(ids):
        key = (int(rec), int(track))
        if key not in cache:
            digest = hashlib.sha256(struct.pack("<qqq", key[0], key[1], seed)).digest()
            cache[key] = int.from_bytes(digest[:8], "little") / 2.0**64
        u[i] = cache[key]
    lo, hi = train_fraction, train_fraction + val_fraction
    return SplitIndices(
        train=np.flatnonzero(u < lo),
        val=np.flatnonzero((u >= lo) & (u < hi)),
        test=np.flatnonzero(u >= hi),
    )


# ---------------------------------------------------------------------------
# loss


def loss_tensor(model: Model, batch: dict, loc_idx=None, acc_idx=None, training: bool = True) -> dn.Tensor:
    """Per-sample mean of (summed per-step NLL + maneuver cross-entropy)."""
    cfg = model.cfg
    if cfg.uses_maneuvers:
        out = model.forward_training(batch, loc_idx, acc_idx, training=training)
    else:
        out = model.forward_training(batch, training=training)
    target = dn.Tensor(batch["future"][:, :, : cfg.pose_dim])
    nll = dn.gaussian_nll(target, out["mean"], out["chol"], wrap_heading=cfg.pose_dim == 3)
    loss = dn.reduce_mean(dn.reduce_sum(nll, axis=1))
    if cfg.uses_maneuvers:
        ce_loc = dn.scale(dn.reduce_mean(dn.log(dn.pick(out["loc_probs"], np.asarray(loc_idx) - 1))), -1.0)
        ce_acc = dn.scale(dn.reduce_mean(dn.log(dn.pick(out["acc_probs"], np.asarray(acc_idx) - 1))), -1.0)
        loss = dn.add(loss, dn.add(ce_loc, ce_acc))
    return loss


def evaluate_loss(model: Model, dataset: Dataset, labels: LabelResult, indices, batch_size: int = 256) -> float:
    """Objective value over a partition, in inference mode (no state updates)."""
    indices = np.asarray(indices, dtype=np.int64)
    total, count = 0.0, 0
    for start in range(0, len(indices), batch_size):
        idx = indices[start : start + batch_size]
        batch = net.prepare_batch(dataset, idx)
        loss = loss_tensor(model, batch, labels.location[idx], labels.acceleration[idx], training=False)
        total += float(loss.value) * len(idx)
        count += len(idx)
    return total / max(count, 1)


# ---------------------------------------------------------------------------
# optimizers


class Sgd:
    def __init__(self, params: dict[str, dn.Parameter], lr: float):
        self.params = params
        self.lr = lr

    def step(self):
        for p in self.params.values():
            if p.grad is not None:
                p.value = p.value - self.lr * p.grad


class Adam:
    """Standard first/second-moment estimates with bias correction."""

    def __init__(self, params: dict[str, dn.Parameter], lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(p.value) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.value) for name, p in params.items()}

    def step(self):
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * p.grad
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * p.grad**2
            p.value = p.value - self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def make_optimizer(model: Model, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(model.params, cfg.learning_rate)
    return Sgd(model.params, cfg.learning_rate)


# ---------------------------------------------------------------------------
# fitting


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = float("inf")
    epochs_run: int = 0
    diverged: bool = False
    stopped_early: bool = False


def _snapshot(model: Model):
    return {name: p.value.copy() for name, p in model.params.items()}, model.bn_state.copy()


def _restore(model: Model, snap):
    values, bn = snap
    for name, p in model.params.items():
        p.value = values[name].copy()
    model.bn_state = bn.copy()


def fit(model: Model, dataset: Dataset, labels: LabelResult, cfg: TrainConfig,
        train_idx, val_idx, log=None) -> TrainResult:
    """Optimize in place; ends with the best-validation parameters restored."""
    train_idx = np.asarray(train_idx, dtype=np.int64)
    val_idx = np.asarray(val_idx, dtype=np.int64)
    if len(train_idx) == 0 or len(val_idx) == 0:
        raise ValueError("fit needs non-empty train and validation partitions")
    opt = make_optimizer(model, cfg)
    result = TrainResult()
    best = _snapshot(model)
    stale = 0
    for epoch in range(cfg.max_epochs):
        order = np.random.default_rng([cfg.seed, 7, epoch]).permutation(train_idx)
        batch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = net.prepare_batch(dataset, idx)
            model.zero_grad()
            try:
                with dn.Tape() as tape:
                    loss = loss_tensor(model, batch, labels.location[idx], labels.acceleration[idx], training=True)
                    value = float(loss.value)
                    if not np.isfinite(value):
                        raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
                    tape.backward(loss)
            except FloatingPointError:
                result.diverged = True
                break
            opt.step()
            batch_losses.append(value)
        if result.diverged:
            break
        val_loss = evaluate_loss(model, dataset, labels, val_idx, batch_size=max(cfg.batch_size, 256))
        if not np.isfinite(val_loss):
            result.diverged = True
            break
        result.epochs_run = epoch + 1
        result.history.append(
            {"epoch": epoch, "train_loss": float(np.mean(batch_losses)), "val_loss": val_loss}
        )
        if log is not None:
            log(f"epoch {epoch:3d}  train {result.history[-1]['train_loss']:.4f}  val {val_loss:.4f}")
        if val_loss < result.best_val_loss:
            result.best_val_loss = val_loss
            result.best_epoch = epoch
            best = _snapshot(model)
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                result.stopped_early = True
                break
    _restore(model, best)
    return result


@dataclass
class TrainRun:
    """Everything downstream evaluation needs from one training invocation."""

    model: Model
    result: TrainResult
    dataset: Dataset
    labels: LabelResult
    split: SplitIndices
    anchors: AnchorSet | None
    config: TrainConfig


def labeled_subset(dataset: Dataset, labels: LabelResult) -> tuple[Dataset, LabelResult]:
    """Restrict a dataset to the samples that carry both maneuver labels."""
    keep = np.flatnonzero(labels.labeled_mask)
    ds = dataset.subset(keep)
    lab = LabelResult(labels.location[keep].copy(), labels.acceleration[keep].copy())
    return ds, lab


# ---------------------------------------------------------------------------
# capacity check: overfit a small sample set inside a fixed epoch budget

_PIN_LOG_DIAG = 2.0 * dn.LOG_DIAG_MIN  # well below the clamp floor: scale gradients stay off
_PIN_WEIGHT = 0.1
_CLIP_NORM = 1.0
_RIDGE = 1e-4
_WARM_LRS = (3e-3, 1e-3)
_REFIT_LRS = (7e-4, 3e-4, 1e-4)
_RELEASE_LR = 3e-5


@dataclass(frozen=True)
class OverfitConfig:
    """Schedule for :func:`overfit`.  Defaults are tuned for a 200-epoch budget."""

    seed: int = 0
    epochs: int = 200
    batch_size: int = 4
    bn_freeze_epoch: int = 6
    refit_start_epoch: int = 120
    release_start_epoch: int = 192

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not (0 <= self.bn_freeze_epoch <= self.refit_start_epoch <= self.release_start_epoch):
            raise ValueError("expected bn_freeze_epoch <= refit_start_epoch <= release_start_epoch")


@dataclass
class OverfitResult:
    history: list = field(default_factory=list)
    final_rmse: float = float("inf")
    epochs_run: int = 0


def _pinned_loss(model: Model, batch: dict, loc_idx=None, acc_idx=None, training: bool = True) -> dn.Tensor:
    """Warm-phase objective: the likelihood at unit scale, plus a pull that
    parks the scale outputs below the clamp floor and the couplings at zero.

    With the scale factors held at identity the position terms reduce to a
    plain squared error, so the means can converge without the log-det
    pressure that otherwise trades them away; once the raw log-diagonals sit
    below the clamp floor their gradient is zero and the full objective can
    take over without disturbing the means.
    """
    cfg = model.cfg
    if cfg.uses_maneuvers:
        out = model.forward_training(batch, loc_idx, acc_idx, training=training)
    else:
        out = model.forward_training(batch, training=training)
    target = dn.Tensor(batch["future"][:, :, : cfg.pose_dim])
    unit = dn.Tensor(np.zeros_like(out["chol"].value))
    nll = dn.gaussian_nll(target, out["mean"], unit, wrap_heading=cfg.pose_dim == 3)
    loss = dn.reduce_mean(dn.reduce_sum(nll, axis=1))
    if cfg.uses_maneuvers:
        ce_loc = dn.scale(dn.reduce_mean(dn.log(dn.pick(out["loc_probs"], np.asarray(loc_idx) - 1))), -1.0)
        ce_acc = dn.scale(dn.reduce_mean(dn.log(dn.pick(out["acc_probs"], np.asarray(acc_idx) - 1))), -1.0)
        loss = dn.add(loss, dn.add(ce_loc, ce_acc))
    log_diag = dn.slice_last(out["chol"], 0, cfg.pose_dim)
    pull = dn.sub(log_diag, dn.Tensor(np.full(log_diag.value.shape, _PIN_LOG_DIAG)))
    aux = dn.reduce_mean(dn.mul(pull, pull))
    if cfg.packed_dim > cfg.pose_dim:
        off = dn.slice_last(out["chol"], cfg.pose_dim, cfg.packed_dim)
        aux = dn.add(aux, dn.reduce_mean(dn.mul(off, off)))
    return dn.add(loss, dn.scale(aux, _PIN_WEIGHT))


def _clip_gradients(params: dict[str, dn.Parameter], limit: float):
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = float(np.sqrt(total))
    if norm > limit:
        scale = limit / norm
        for p in params.values():
            if p.grad is not None:
                np.multiply(p.grad, scale, out=p.grad)


def _refit_output(model: Model, batch: dict, loc_idx, acc_idx):
    """Closed-form ridge refit of the output affine against the rolled states.

    The decoder output layer is linear in the hidden states, so for a fixed
    body its optimum is a least-squares solve; alternating that solve with
    gradient steps on the body converges far faster than gradients alone.
    Scale columns are refit to the pinned targets of :func:`_pinned_loss`.
    """
    cfg = model.cfg
    H = model.hidden_rollout(batch, loc_idx, acc_idx)
    b, steps, hid = H.shape
    feats = np.concatenate([H.reshape(b * steps, hid), np.ones((b * steps, 1))], axis=1)
    target = batch["future"][:, :, : cfg.pose_dim].copy()
    if cfg.variant == "3d-a":
        joint = (np.asarray(loc_idx) - 1) * cfg.n_acc + np.asarray(acc_idx)
        target -= model._anchor_block(joint)[:, :, : cfg.pose_dim]
    if cfg.pose_dim == 3:
        target[:, :, 2] = np.mod(target[:, :, 2] + np.pi, 2.0 * np.pi) - np.pi
    t_chol = np.zeros((b * steps, cfg.packed_dim))
    t_chol[:, : cfg.pose_dim] = _PIN_LOG_DIAG
    rhs = np.concatenate([target.reshape(b * steps, cfg.pose_dim), t_chol], axis=1)
    gram = feats.T @ feats + _RIDGE * np.eye(feats.shape[1])
    w = np.linalg.solve(gram, feats.T @ rhs)
    model.params["out.w"].value = w[:-1].copy()
    model.params["out.b"].value = w[-1].copy()


def _final_step_rmse(model: Model, batch: dict, loc_idx, acc_idx) -> float:
    if model.cfg.uses_maneuvers:
        out = model.forward_training(batch, loc_idx, acc_idx, training=False)
    else:
        out = model.forward_training(batch, training=False)
    err = out["mean"].value[:, -1, :2] - batch["future"][:, -1, :2]
    return float(np.sqrt(np.mean(np.sum(err * err, axis=1))))


def overfit(model: Model, dataset: Dataset, labels: LabelResult | None,
            cfg: OverfitConfig, log=None) -> OverfitResult:
    """Drive the training error on one small dataset as low as the budget allows.

    Three phases inside ``cfg.epochs``: clipped minibatch descent on the
    pinned objective, the same descent with twice-per-epoch closed-form
    output refits, and a short tail on the full likelihood once the scale
    outputs are parked in the zero-gradient clamp region.
    """
    n = len(dataset.ids)
    if n == 0:
        raise ValueError("overfit needs a non-empty dataset")
    if model.cfg.uses_maneuvers:
        if labels is None:
            raise ValueError(f"variant {model.cfg.variant!r} needs labels to overfit")
        loc, acc = labels.location, labels.acceleration
    else:
        loc = acc = None
    full = net.prepare_batch(dataset, np.arange(n))
    opt_warm = Adam(model.params, _WARM_LRS[0])
    body = {k: p for k, p in model.params.items() if not k.startswith("out.")}
    opt_refit = Adam(body, _REFIT_LRS[0])
    opt_release = None
    refit_span = max(1, cfg.release_start_epoch - cfg.refit_start_epoch)
    result = OverfitResult()
    for epoch in range(cfg.epochs):
        release = epoch >= cfg.release_start_epoch
        refit = not release and epoch >= cfg.refit_start_epoch
        if release:
            if opt_release is None:
                opt_release = Adam(model.params, _RELEASE_LR)
            opt = opt_release
        elif refit:
            done = (epoch - cfg.refit_start_epoch) / refit_span
            opt = opt_refit
            opt.lr = _REFIT_LRS[0] if done < 5 / 12 else (_REFIT_LRS[1] if done < 5 / 6 else _REFIT_LRS[2])
        else:
            opt = opt_warm
            opt.lr = _WARM_LRS[0] if epoch < (cfg.refit_start_epoch * 3) // 4 else _WARM_LRS[1]
        bn_training = epoch < cfg.bn_freeze_epoch
        order = np.random.default_rng([cfg.seed, 11, epoch]).permutation(n)
        starts = range(0, n, cfg.batch_size)
        half = max(1, len(starts) // 2)
        losses = []
        for bi, start in enumerate(starts):
            idx = order[start : start + cfg.batch_size]
            batch = net.prepare_batch(dataset, idx)
            bloc = loc[idx] if loc is not None else None
            bacc = acc[idx] if acc is not None else None
            model.zero_grad()
            with dn.Tape() as tape:
                if release:
                    loss = loss_tensor(model, batch, bloc, bacc, training=bn_training)
                else:
                    loss = _pinned_loss(model, batch, bloc, bacc, training=bn_training)
                value = float(loss.value)
                if not np.isfinite(value):
                    raise FloatingPointError(f"non-finite overfit loss at epoch {epoch}")
                tape.backward(loss)
            _clip_gradients(opt.params, _CLIP_NORM)
            opt.step()
            losses.append(value)
            if refit and (bi + 1) % half == 0:
                _refit_output(model, full, loc, acc)
        rmse = _final_step_rmse(model, full, loc, acc)
        if release:
            eval_loss = float(loss_tensor(model, full, loc, acc, training=False).value)
        else:
            eval_loss = float(_pinned_loss(model, full, loc, acc, training=False).value)
        result.history.append(
            {"epoch": epoch, "loss": float(np.mean(losses)), "eval_loss": eval_loss, "rmse": rmse}
        )
        result.epochs_run = epoch + 1
        if log is not None:
            log(f"epoch {epoch:3d}  loss {eval_loss:.4f}  rmse {rmse:.4f}")
    result.final_rmse = result.history[-1]["rmse"]
    return result


def train(dataset: Dataset, labels: LabelResult, cfg: TrainConfig,
          anchors: AnchorSet | None = None, log=None) -> TrainRun:
    """Drop unlabeled samples, split by track, build anchors if needed, fit."""
    ds, lab = labeled_subset(dataset, labels)
    split = split_dataset(ds.ids, cfg.seed, cfg.train_fraction, cfg.val_fraction)
    if cfg.variant == "3d-a" and anchors is None:
        tr_labels = LabelResult(lab.location[split.train], lab.acceleration[split.train])
        anchors = build_anchors(ds.subset(split.train), tr_labels, trim=cfg.trim,
                                n_location=cfg.n_location, n_acc=cfg.n_acc)
    mcfg = ModelConfig(
        variant=cfg.variant,
        history_steps=ds.ego_hist.shape[1],
        future_steps=ds.ego_future.shape[1],
        n_location=cfg.n_location,
        n_acc=cfg.n_acc,
        dt=ds.dt,
    )
    model = Model(mcfg, anchors if cfg.variant == "3d-a" else None, seed=cfg.seed)
    result = fit(model, ds, lab, cfg, split.train, split.val, log=log)
    return TrainRun(model=model, result=result, dataset=ds, labels=lab, split=split,
                    anchors=anchors if cfg.variant == "3d-a" else None, config=cfg)
