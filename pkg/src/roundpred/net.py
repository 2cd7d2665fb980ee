"""Recurrent encoder-decoder with pose-aware pooling and maneuver conditioning.

Four variants share one architecture:

* ``2d``    position-only input and output, single decode
* ``3d``    full pose input/output, single decode
* ``3d-m``  adds location/acceleration heads; the decoder is conditioned on
            the maneuver pair (true classes while training, predicted at
            inference)
* ``3d-a``  like ``3d-m`` but the decoder emits offsets from a per-class
            anchor trajectory, giving a mixture over all maneuver classes

Every trajectory is expressed in the frame of its own final history pose;
relative neighbor geometry enters through the pooling features.  The pooled
neighborhood vector is an elementwise max over per-neighbor MLP features,
so it is invariant to neighbor order and empty neighborhoods pool to zeros.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import binio
from . import diffnum as dn
from .anchors import AnchorSet

VARIANTS = ("2d", "3d", "3d-m", "3d-a")
CKPT_MAGIC = b"RPCK"
CKPT_VERSION = 1


class VariantError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "3d-a"
    history_steps: int = 13
    future_steps: int = 25
    encoder_state: int = 32
    decoder_state: int = 64
    input_embedding: int = 16
    pooling_units: int = 256
    n_location: int = 8
    n_acc: int = 3
    dt: float = 0.16

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise VariantError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")

    @property
    def pose_dim(self) -> int:
        return 2 if self.variant == "2d" else 3

    @property
    def packed_dim(self) -> int:
        d = self.pose_dim
        return d + d * (d - 1) // 2

    @property
    def n_classes(self) -> int:
        return self.n_location * self.n_acc

    @property
    def uses_maneuvers(self) -> bool:
        return self.variant in ("3d-m", "3d-a")

    @property
    def context_dim(self) -> int:
        return self.encoder_state + self.pooling_units

    @property
    def decoder_context_dim(self) -> int:
        extra = self.n_location + self.n_acc if self.uses_maneuvers else 0
        return self.context_dim + extra


def _to_frame(seqs: np.ndarray, origin: np.ndarray) -> np.ndarray:
    """Express (..., 3) pose rows relative to one origin pose (x, y, theta)."""
    c, s = np.cos(origin[2]), np.sin(origin[2])
    dx = seqs[..., 0] - origin[0]
    dy = seqs[..., 1] - origin[1]
    out = np.empty_like(seqs)
    out[..., 0] = c * dx + s * dy
    out[..., 1] = -s * dx + c * dy
    out[..., 2] = seqs[..., 2] - origin[2]
    return out


def prepare_batch(dataset, indices) -> dict:
    """Numpy feature pack for a set of samples.

    Everything is expressed in the ego frame at the prediction time: the ego
    history ends at the zero pose, and neighbor histories keep their true
    geometry relative to the ego.
    """
    indices = np.asarray(indices, dtype=np.int64)
    ego_hist = dataset.ego_hist[indices]
    origins = ego_hist[:, -1, :]
    b = len(indices)
    ego = np.empty_like(ego_hist)
    fut = dataset.ego_future[indices]
    future = np.empty_like(fut)
    for j in range(b):
        ego[j] = _to_frame(ego_hist[j], origins[j])
        future[j] = _to_frame(fut[j], origins[j])

    neigh_blocks, rel_rows, segments = [], [], []
    total = 0
    for j, i in enumerate(indices):
        block = dataset.neighbors_of(int(i))
        m = len(block)
        segments.append((total, total + m))
        total += m
        if m:
            local = _to_frame(block, origins[j])
            neigh_blocks.append(local)
            last = local[:, -1, :]
            rel_rows.append(
                np.stack([last[:, 0], last[:, 1], np.cos(last[:, 2]), np.sin(last[:, 2])], axis=1)
            )
    hsteps = dataset.ego_hist.shape[1]
    return {
        "ego": ego,
        "future": future,
        "neigh": np.concatenate(neigh_blocks) if neigh_blocks else np.zeros((0, hsteps, 3)),
        "rel": np.concatenate(rel_rows) if rel_rows else np.zeros((0, 4)),
        "segments": np.array(segments, dtype=np.int64),
        "origins": origins,
    }


class Model:
    """Parameter container plus forward passes for training and prediction."""

    def __init__(self, cfg: ModelConfig, anchors: AnchorSet | None = None, seed: int = 0):
        if cfg.variant == "3d-a":
            if anchors is None:
                raise VariantError("the anchored variant requires an AnchorSet")
            if (
                anchors.n_location != cfg.n_location
                or anchors.n_acc != cfg.n_acc
                or anchors.horizon_steps != cfg.future_steps
            ):
                raise VariantError(
                    f"anchor grid ({anchors.n_location}x{anchors.n_acc}, {anchors.horizon_steps} steps) "
                    f"does not match the model configuration"
                )
        elif anchors is not None:
            raise VariantError(f"variant {cfg.variant!r} does not take anchors")
        self.cfg = cfg
        self.anchors = anchors
        self.params: dict[str, dn.Parameter] = {}
        self.bn_state = dn.BatchNormState(cfg.pooling_units)
        self._init_params(seed)

    # -- parameters --------------------------------------------------------

    def _add(self, name: str, value) -> dn.Parameter:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name}")
        p = dn.Parameter(name, value)
        self.params[name] = p
        return p

    def _glorot(self, rng, fan_in, fan_out):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_in, fan_out))

    def _init_params(self, seed: int):
        cfg = self.cfg
        rng = np.random.default_rng([seed])
        d = cfg.pose_dim
        emb, enc, dec = cfg.input_embedding, cfg.encoder_state, cfg.decoder_state

        self._add("embed.w", self._glorot(rng, d, emb))
        self._add("embed.b", np.zeros(emb))

        def lstm(prefixed, in_dim, hidden):
            self._add(f"{prefixed}.wx", self._glorot(rng, in_dim, 4 * hidden))
            self._add(f"{prefixed}.wh", self._glorot(rng, hidden, 4 * hidden))
            b = np.zeros(4 * hidden)
            b[hidden : 2 * hidden] = 1.0  # forget-gate bias favors memory early on
            self._add(f"{prefixed}.b", b)

        lstm("encoder", emb, enc)

        pool_in = (4 if d == 3 else 2) + enc
        self._add("pool.w", self._glorot(rng, pool_in, cfg.pooling_units))
        self._add("pool.b", np.zeros(cfg.pooling_units))
        self._add("pool.gamma", np.ones(cfg.pooling_units))
        self._add("pool.beta", np.zeros(cfg.pooling_units))

        if cfg.uses_maneuvers:
            self._add("head_loc.w", self._glorot(rng, cfg.context_dim, cfg.n_location))
            self._add("head_loc.b", np.zeros(cfg.n_location))
            self._add("head_acc.w", self._glorot(rng, cfg.context_dim, cfg.n_acc))
            self._add("head_acc.b", np.zeros(cfg.n_acc))

        dctx = cfg.decoder_context_dim
        self._add("dec_h0.w", self._glorot(rng, dctx, dec))
        self._add("dec_h0.b", np.zeros(dec))
        self._add("dec_c0.w", self._glorot(rng, dctx, dec))
        self._add("dec_c0.b", np.zeros(dec))
        self._add("dec_in.w", self._glorot(rng, dctx, dec))
        self._add("dec_in.b", np.zeros(dec))
        lstm("decoder", dec, dec)
        out_dim = d + cfg.packed_dim
        self._add("out.w", self._glorot(rng, dec, out_dim))
        self._add("out.b", np.zeros(out_dim))

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def _p(self, name: str) -> dn.Tensor:
        return self.params[name].tensor

    # -- forward pieces ----------------------------------------------------

    def _encode(self, hist: np.ndarray) -> dn.Tensor:
        d = self.cfg.pose_dim
        n = hist.shape[0]
        enc = self.cfg.encoder_state
        h = dn.Tensor(np.zeros((n, enc)))
        c = dn.Tensor(np.zeros((n, enc)))
        for t in range(hist.shape[1]):
            e = dn.leaky_relu(dn.affine(dn.Tensor(hist[:, t, :d]), self._p("embed.w"), self._p("embed.b")))
            h, c = dn.lstm_cell(e, h, c, self._p("encoder.wx"), self._p("encoder.wh"), self._p("encoder.b"))
        return h

    def _pool(self, neigh_code, rel: np.ndarray, segments: np.ndarray, training: bool):
        b = len(segments)
        units = self.cfg.pooling_units
        if len(rel) == 0:
            return dn.Tensor(np.zeros((b, units)))
        rel_dim = 4 if self.cfg.pose_dim == 3 else 2
        feats = dn.concat([dn.Tensor(rel[:, :rel_dim]), neigh_code], axis=-1)
        z = dn.affine(feats, self._p("pool.w"), self._p("pool.b"))
        z = dn.batch_norm(z, self._p("pool.gamma"), self._p("pool.beta"), self.bn_state, training=training)
        z = dn.leaky_relu(z)
        pooled, _ = dn.max_pool_over_set(z, segments)
        return pooled

    def _context(self, batch: dict, training: bool) -> dn.Tensor:
        ego_code = self._encode(batch["ego"])
        if len(batch["neigh"]):
            neigh_code = self._encode(batch["neigh"])
        else:
            neigh_code = dn.Tensor(np.zeros((0, self.cfg.encoder_state)))
        pooled = self._pool(neigh_code, batch["rel"], batch["segments"], training)
        return dn.concat([ego_code, pooled], axis=-1)

    def _heads(self, ctx):
        loc = dn.softmax(dn.affine(ctx, self._p("head_loc.w"), self._p("head_loc.b")))
        acc = dn.softmax(dn.affine(ctx, self._p("head_acc.w"), self._p("head_acc.b")))
        return loc, acc

    def _one_hot(self, loc_idx, acc_idx) -> np.ndarray:
        cfg = self.cfg
        b = len(loc_idx)
        oh = np.zeros((b, cfg.n_location + cfg.n_acc))
        oh[np.arange(b), np.asarray(loc_idx) - 1] = 1.0
        oh[np.arange(b), cfg.n_location + np.asarray(acc_idx) - 1] = 1.0
        return oh

    def _decoder_hidden(self, dctx) -> list:
        """Roll the decoder LSTM and return its hidden state per future step."""
        h = dn.affine(dctx, self._p("dec_h0.w"), self._p("dec_h0.b"))
        c = dn.affine(dctx, self._p("dec_c0.w"), self._p("dec_c0.b"))
        step_in = dn.leaky_relu(dn.affine(dctx, self._p("dec_in.w"), self._p("dec_in.b")))
        states = []
        for _ in range(self.cfg.future_steps):
            h, c = dn.lstm_cell(step_in, h, c, self._p("decoder.wx"), self._p("decoder.wh"), self._p("decoder.b"))
            states.append(h)
        return states

    def _decode(self, dctx, anchor_traj: np.ndarray | None):
        cfg = self.cfg
        outs = [dn.affine(h, self._p("out.w"), self._p("out.b")) for h in self._decoder_hidden(dctx)]
        out = dn.stack(outs, axis=1)  # (B, F, out_dim)
        mean = dn.slice_last(out, 0, cfg.pose_dim)
        chol = dn.slice_last(out, cfg.pose_dim, cfg.pose_dim + cfg.packed_dim)
        if anchor_traj is not None:
            mean = dn.add(mean, dn.Tensor(anchor_traj[:, :, : cfg.pose_dim]))
        return mean, chol

    def _anchor_block(self, joint_idx: np.ndarray) -> np.ndarray:
        return self.anchors.anchors[np.asarray(joint_idx, dtype=np.int64) - 1]

    # -- training forward --------------------------------------------------

    def forward_training(self, batch: dict, loc_idx=None, acc_idx=None, training: bool = True) -> dict:
        """Teacher-forced forward; maneuver variants require the true classes."""
        cfg = self.cfg
        ctx = self._context(batch, training)
        out: dict = {}
        if cfg.uses_maneuvers:
            if loc_idx is None or acc_idx is None:
                raise VariantError(f"variant {cfg.variant!r} needs true maneuver classes while training")
            out["loc_probs"], out["acc_probs"] = self._heads(ctx)
            dctx = dn.concat([ctx, dn.Tensor(self._one_hot(loc_idx, acc_idx))], axis=-1)
        else:
            dctx = ctx
        anchor_traj = None
        if cfg.variant == "3d-a":
            joint = (np.asarray(loc_idx) - 1) * cfg.n_acc + np.asarray(acc_idx)
            anchor_traj = self._anchor_block(joint)
        out["mean"], out["chol"] = self._decode(dctx, anchor_traj)
        return out

    def hidden_rollout(self, batch: dict, loc_idx=None, acc_idx=None) -> np.ndarray:
        """Decoder hidden states for a batch, stacked (B, F, decoder_state).

        Inference-mode forward; maneuver variants take the true classes, the
        plain variants ignore them.  The output layer is an affine map of
        these states, which lets a trainer refit it in closed form.
        """
        ctx = self._context(batch, training=False)
        if self.cfg.uses_maneuvers:
            if loc_idx is None or acc_idx is None:
                raise VariantError(f"variant {self.cfg.variant!r} needs true maneuver classes for a rollout")
            dctx = dn.concat([ctx, dn.Tensor(self._one_hot(loc_idx, acc_idx))], axis=-1)
        else:
            dctx = ctx
        states = self._decoder_hidden(dctx)
        return np.stack([s.value for s in states], axis=1)

    # -- inference ---------------------------------------------------------

    def predict(self, batch: dict, mode: str = "point"):
        cfg = self.cfg
        b = len(batch["ego"])
        if cfg.variant in ("2d", "3d"):
            if mode != "point":
                raise VariantError(f"variant {cfg.variant!r} only supports mode 'point'")
            ctx = self._context(batch, training=False)
            mean, _ = self._decode(ctx, None)
            return mean.value
        if cfg.variant == "3d-m":
            if mode != "point":
                raise VariantError("variant '3d-m' only supports mode 'point'")
            ctx = self._context(batch, training=False)
            loc, acc = self._heads(ctx)
            loc_idx = np.argmax(loc.value, axis=1) + 1
            acc_idx = np.argmax(acc.value, axis=1) + 1
            dctx = dn.concat([ctx, dn.Tensor(self._one_hot(loc_idx, acc_idx))], axis=-1)
            mean, _ = self._decode(dctx, None)
            return mean.value
        # anchored variant
        if mode not in ("map", "weighted", "mixture"):
            raise VariantError("variant '3d-a' supports modes 'map', 'weighted', 'mixture'")
        ctx = self._context(batch, training=False)
        loc, acc = self._heads(ctx)
        probs = (loc.value[:, :, None] * acc.value[:, None, :]).reshape(b, cfg.n_classes)
        if mode == "map":
            joint = np.argmax(probs, axis=1) + 1
            loc_idx = (joint - 1) // cfg.n_acc + 1
            acc_idx = (joint - 1) % cfg.n_acc + 1
            dctx = dn.concat([ctx, dn.Tensor(self._one_hot(loc_idx, acc_idx))], axis=-1)
            mean, _ = self._decode(dctx, self._anchor_block(joint))
            return mean.value
        means = np.empty((b, cfg.n_classes, cfg.future_steps, cfg.pose_dim))
        chols = np.empty((b, cfg.n_classes, cfg.future_steps, cfg.packed_dim))
        for k in range(1, cfg.n_classes + 1):
            loc_idx = np.full(b, (k - 1) // cfg.n_acc + 1)
            acc_idx = np.full(b, (k - 1) % cfg.n_acc + 1)
            dctx = dn.concat([ctx, dn.Tensor(self._one_hot(loc_idx, acc_idx))], axis=-1)
            anchor = np.broadcast_to(self.anchors.anchors[k - 1], (b, cfg.future_steps, 3)).copy()
            mean, chol = self._decode(dctx, anchor)
            means[:, k - 1] = mean.value
            chols[:, k - 1] = chol.value
        mix = MixturePrediction(probs=probs, means=means, chols=chols)
        return mix.point_weighted() if mode == "weighted" else mix


@dataclass
class MixturePrediction:
    """Full anchored mixture: per-class probabilities, means, packed scales."""

    probs: np.ndarray  # (B, K)
    means: np.ndarray  # (B, K, F, D)
    chols: np.ndarray  # (B, K, F, packed)

    def point_weighted(self) -> np.ndarray:
        return np.einsum("bk,bkfd->bfd", self.probs, self.means)

    def point_map(self) -> np.ndarray:
        best = np.argmax(self.probs, axis=1)
        return self.means[np.arange(len(best)), best]


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: Model, extra: dict | None = None):
    arrays = {f"param.{name}": p.tensor.value for name, p in model.params.items()}
    arrays["bn.running_mean"] = model.bn_state.running_mean
    arrays["bn.running_var"] = model.bn_state.running_var
    meta = {
        "config": asdict(model.cfg),
        "anchor_hash": model.anchors.content_hash() if model.anchors is not None else "",
        "extra": extra or {},
    }
    binio.write_blob(path, CKPT_MAGIC, CKPT_VERSION, meta=meta, arrays=arrays)


def load_checkpoint(path, anchors: AnchorSet | None = None) -> tuple[Model, dict]:
    meta, arrays = binio.read_blob(path, CKPT_MAGIC, CKPT_VERSION)
    cfg = ModelConfig(**meta["config"])
    if cfg.variant == "3d-a":
        if anchors is None:
            raise VariantError(f"{path}: checkpoint is anchored; pass the matching AnchorSet")
        if anchors.content_hash() != meta["anchor_hash"]:
            raise VariantError(f"{path}: anchor file does not match the one used at training time")
        model = Model(cfg, anchors)
    else:
        if anchors is not None:
            raise VariantError(f"{path}: checkpoint variant {cfg.variant!r} does not take anchors")
        model = Model(cfg)
    expect = {f"param.{name}" for name in model.params} | {"bn.running_mean", "bn.running_var"}
    if set(arrays) != expect:
        missing = sorted(expect - set(arrays))
        surplus = sorted(set(arrays) - expect)
        raise binio.FormatError(f"{path}: parameter set mismatch (missing {missing}, surplus {surplus})")
    for name, p in model.params.items():
        stored = arrays[f"param.{name}"]
        if stored.shape != p.tensor.value.shape:
            raise binio.FormatError(f"{path}: parameter {name} has shape {stored.shape}, expected {p.tensor.value.shape}")
        p.value = stored
    model.bn_state.running_mean = arrays["bn.running_mean"]
    model.bn_state.running_var = arrays["bn.running_var"]
    return model, meta["extra"]
