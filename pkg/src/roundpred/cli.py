"""Command-line pipeline driver.

One binary, seven subcommands, run in this order for a full experiment:

    synth -> preprocess -> label -> anchors -> train -> eval

plus `plot` for figures.  Every subcommand reads an optional JSON config
file (``--config``) whose keys mirror the flag names; explicit flags win
over file values, file values win over built-in defaults.  Each run writes
a line-delimited JSON manifest recording the tool version, the effective
configuration and its hash, and a sha256 per input and output file, so a
rerun can be audited byte for byte.  Failures print a single
``error: ...`` line on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from . import __version__, net, svgplot, trajkit
from .anchors import AnchorError, AnchorSet, build_anchors
from .evaluation import EvaluationError, VARIANT_MODES, evaluate_run
from .ingest import Dataset, IngestConfig, IngestError, build_dataset, filter_recording, load_corpus
from .maneuvers import DEFAULT_THRESHOLD, LabelResult, LabelingError, label_dataset, load_labels, save_labels
from .net import Model, VariantError
from .synth import RingWorld, TrafficConfig, WorldConfig, generate_corpus
from .train import TrainConfig, TrainResult, TrainRun, labeled_subset, split_dataset, train
from .zones import GeometryError, MapError, ZoneMap

from . import binio


class UsageError(Exception):
    """Bad flags or flag combinations; exits with status 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# per-subcommand defaults; every key is also a flag (dashes for underscores)
DEFAULTS = {
    "synth": {
        "out": None,
        "seed": 0,
        "recordings": 2,
        "vehicles": 40,
        "duration": 300.0,
        "noise": 0.0,
        "stride": 25,
        "a_threshold": 0.5,
    },
    "preprocess": {
        "data": None,
        "map": None,
        "out": None,
        "stride": 25,
        "neighbor_radius": None,
    },
    "label": {
        "data": None,
        "map": None,
        "out": None,
        "a_threshold": DEFAULT_THRESHOLD,
    },
    "anchors": {
        "data": None,
        "labels": None,
        "out": None,
        "seed": 0,
        "trim": 0.05,
        "train_fraction": 0.71,
        "val_fraction": 0.10,
    },
    "train": {
        "data": None,
        "labels": None,
        "anchors": None,
        "out": None,
        "variant": "3d-a",
        "seed": 0,
        "learning_rate": 1e-3,
        "batch_size": 128,
        "epochs": 40,
        "patience": 3,
        "optimizer": "adam",
        "trim": 0.05,
        "train_fraction": 0.71,
        "val_fraction": 0.10,
    },
    "eval": {
        "model": None,
        "data": None,
        "labels": None,
        "anchors": None,
        "out": None,
        "variant": None,
        "mode": None,
        "svg": 0,
        "reference": True,
    },
    "plot": {
        "anchors": None,
        "data": None,
        "sample": 0,
        "out": None,
    },
}


def _build_parser() -> _Parser:
    parser = _Parser(prog="roundpred", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"roundpred {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def cmd(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON file with defaults for this subcommand")
        return p

    p = cmd("synth", "generate a synthetic roundabout corpus with golden labels")
    p.add_argument("--out", help="output directory for CSVs, zone map and golden labels")
    p.add_argument("--seed", type=int)
    p.add_argument("--recordings", type=int)
    p.add_argument("--vehicles", type=int, help="vehicles per recording")
    p.add_argument("--duration", type=float, help="recording length in seconds")
    p.add_argument("--noise", type=float, help="position noise std in meters")
    p.add_argument("--stride", type=int, help="frame stride between golden label rows")
    p.add_argument("--a-threshold", type=float, dest="a_threshold")

    p = cmd("preprocess", "cut scene samples from a CSV corpus")
    p.add_argument("--data", help="corpus directory with *_tracks.csv files")
    p.add_argument("--map", help="zone map JSON (default: <data>/zone_map.json)")
    p.add_argument("--out", help="output dataset file")
    p.add_argument("--stride", type=int, help="frame stride between samples")
    p.add_argument("--neighbor-radius", type=float, dest="neighbor_radius",
                   help="drop neighbors farther than this at the anchor frame")

    p = cmd("label", "assign maneuver labels to every sample")
    p.add_argument("--data", help="dataset file from preprocess")
    p.add_argument("--map", help="zone map JSON")
    p.add_argument("--out", help="output labels file")
    p.add_argument("--a-threshold", type=float, dest="a_threshold")

    p = cmd("anchors", "average anchor trajectories from the training partition")
    p.add_argument("--data", help="dataset file")
    p.add_argument("--labels", help="labels file")
    p.add_argument("--out", help="output anchors file")
    p.add_argument("--seed", type=int, help="split seed (must match train)")
    p.add_argument("--trim", type=float, help="trimmed-mean fraction per tail")
    p.add_argument("--train-fraction", type=float, dest="train_fraction")
    p.add_argument("--val-fraction", type=float, dest="val_fraction")

    p = cmd("train", "fit one model variant")
    p.add_argument("--data", help="dataset file")
    p.add_argument("--labels", help="labels file")
    p.add_argument("--anchors", help="anchors file (3d-a only; built from the train split if omitted)")
    p.add_argument("--out", help="output checkpoint file")
    p.add_argument("--variant", choices=net.VARIANTS)
    p.add_argument("--seed", type=int)
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--optimizer", choices=("adam", "sgd"))
    p.add_argument("--trim", type=float)
    p.add_argument("--train-fraction", type=float, dest="train_fraction")
    p.add_argument("--val-fraction", type=float, dest="val_fraction")

    p = cmd("eval", "score a checkpoint on its test partition")
    p.add_argument("--model", help="checkpoint file from train")
    p.add_argument("--data", help="dataset file")
    p.add_argument("--labels", help="labels file")
    p.add_argument("--anchors", help="anchors file (default: <model>.anchors)")
    p.add_argument("--out", help="output stem; writes <out>.txt and <out>.csv")
    p.add_argument("--variant", choices=net.VARIANTS, help="fail unless the checkpoint is this variant")
    p.add_argument("--mode", choices=("map", "weighted"), help="restrict anchored scoring to one mode")
    p.add_argument("--svg", type=int, help="also render overlay SVGs for this many test samples")
    p.add_argument("--no-reference", action="store_false", dest="reference", default=None,
                   help="omit the published full-scale rows from the report")

    p = cmd("plot", "render anchors or a raw scene as SVG")
    p.add_argument("--anchors", help="anchors file to draw")
    p.add_argument("--data", help="dataset file for a scene drawing")
    p.add_argument("--sample", type=int, help="sample index within --data")
    p.add_argument("--out", help="output SVG path")

    return parser


def _merge_config(command: str, args: argparse.Namespace) -> dict:
    """defaults < config file < explicit flags."""
    cfg = dict(DEFAULTS[command])
    path = getattr(args, "config", None)
    if path is not None:
        try:
            with open(path) as fh:
                loaded = json.load(fh)
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON ({exc})")
        if not isinstance(loaded, dict):
            raise UsageError(f"config file {path} must hold a JSON object")
        for key, value in loaded.items():
            if key not in cfg:
                raise UsageError(f"unknown config key for {command}: {key!r}")
            cfg[key] = value
    for key in cfg:
        flag = getattr(args, key, None)
        if flag is not None:
            cfg[key] = flag
    return cfg


def _require(cfg: dict, command: str, *keys):
    for key in keys:
        if cfg[key] is None:
            raise UsageError(f"{command} needs --{key.replace('_', '-')}")


def _sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def write_manifest(primary_out, command: str, cfg: dict, inputs, outputs) -> str:
    """Line-delimited records next to the primary output; no timestamps."""
    primary_out = str(primary_out)
    if os.path.isdir(primary_out):
        path = os.path.join(primary_out, "manifest.jsonl")
    else:
        path = primary_out + ".manifest.jsonl"
    base = os.path.dirname(os.path.abspath(path))
    records = [
        {
            "kind": "run",
            "tool": "roundpred",
            "version": __version__,
            "command": command,
            "config": cfg,
            "config_hash": config_hash(cfg),
        }
    ]
    for group, paths in (("input", inputs), ("output", outputs)):
        for p in paths:
            records.append(
                {
                    "kind": group,
                    "path": os.path.relpath(os.path.abspath(str(p)), base),
                    "sha256": _sha256_file(p),
                }
            )
    with open(path, "w") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# subcommands


def _cmd_synth(cfg: dict, out) -> int:
    _require(cfg, "synth", "out")
    world = RingWorld(WorldConfig())
    traffic = TrafficConfig(
        seed=cfg["seed"],
        duration=cfg["duration"],
        vehicles=cfg["vehicles"],
        noise=cfg["noise"],
    )
    stats = generate_corpus(
        cfg["out"], world, traffic, cfg["recordings"],
        golden_stride=cfg["stride"], a_threshold=cfg["a_threshold"],
    )
    write_manifest(cfg["out"], "synth", cfg, [], stats["files"])
    print(
        f"synth: {stats['recordings']} recordings, {stats['tracks']} tracks, "
        f"{stats['golden_rows']} golden labels -> {cfg['out']}",
        file=out,
    )
    return 0


def _resolve_map(cfg: dict) -> str:
    if cfg["map"] is not None:
        return cfg["map"]
    guess = os.path.join(cfg["data"], "zone_map.json")
    if os.path.exists(guess):
        return guess
    raise UsageError("no --map given and no zone_map.json beside --data")


def _cmd_preprocess(cfg: dict, out) -> int:
    _require(cfg, "preprocess", "data", "out")
    map_path = _resolve_map(cfg)
    icfg = IngestConfig(stride=cfg["stride"], neighbor_radius=cfg["neighbor_radius"])
    zmap = ZoneMap.load(map_path)
    recordings = load_corpus(cfg["data"], icfg)
    inputs = sorted(
        os.path.join(cfg["data"], name)
        for name in os.listdir(cfg["data"])
        if name.endswith(("_tracks.csv", "_tracksMeta.csv", "_recordingMeta.csv"))
    )
    kept = [filter_recording(rec, zmap, icfg) for rec in recordings]
    dataset = build_dataset(kept, icfg)
    dataset.save(cfg["out"])
    write_manifest(cfg["out"], "preprocess", cfg, inputs + [map_path], [cfg["out"]])
    n_neigh = len(dataset.neigh)
    print(f"preprocess: {len(dataset)} samples, {n_neigh} neighbor tracks -> {cfg['out']}", file=out)
    return 0


def _cmd_label(cfg: dict, out) -> int:
    _require(cfg, "label", "data", "map", "out")
    dataset = Dataset.load(cfg["data"])
    zmap = ZoneMap.load(cfg["map"])
    labels = label_dataset(dataset, zmap, threshold=cfg["a_threshold"])
    save_labels(cfg["out"], labels, threshold=cfg["a_threshold"])
    write_manifest(cfg["out"], "label", cfg, [cfg["data"], cfg["map"]], [cfg["out"]])
    n = len(labels.location)
    print(f"label: {n - labels.dropped}/{n} samples labeled -> {cfg['out']}", file=out)
    return 0


def _cmd_anchors(cfg: dict, out) -> int:
    _require(cfg, "anchors", "data", "labels", "out")
    dataset = Dataset.load(cfg["data"])
    labels, _ = load_labels(cfg["labels"])
    ds, lab = labeled_subset(dataset, labels)
    split = split_dataset(ds.ids, cfg["seed"], cfg["train_fraction"], cfg["val_fraction"])
    tr_labels = LabelResult(lab.location[split.train], lab.acceleration[split.train])
    anchor_set = build_anchors(ds.subset(split.train), tr_labels, trim=cfg["trim"])
    anchor_set.save(cfg["out"])
    write_manifest(cfg["out"], "anchors", cfg, [cfg["data"], cfg["labels"]], [cfg["out"]])
    print(
        f"anchors: {anchor_set.n_classes} classes from {len(split.train)} "
        f"training samples -> {cfg['out']}",
        file=out,
    )
    return 0


def _cmd_train(cfg: dict, out) -> int:
    _require(cfg, "train", "data", "labels", "out")
    dataset = Dataset.load(cfg["data"])
    labels, _ = load_labels(cfg["labels"])
    anchor_set = None
    inputs = [cfg["data"], cfg["labels"]]
    if cfg["anchors"] is not None:
        if cfg["variant"] != "3d-a":
            raise UsageError(f"variant '{cfg['variant']}' does not take anchors")
        anchor_set = AnchorSet.load(cfg["anchors"])
        inputs.append(cfg["anchors"])
    tcfg = TrainConfig(
        variant=cfg["variant"],
        seed=cfg["seed"],
        learning_rate=cfg["learning_rate"],
        batch_size=cfg["batch_size"],
        max_epochs=cfg["epochs"],
        patience=cfg["patience"],
        optimizer=cfg["optimizer"],
        trim=cfg["trim"],
        train_fraction=cfg["train_fraction"],
        val_fraction=cfg["val_fraction"],
    )
    run = train(dataset, labels, tcfg, anchors=anchor_set,
                log=lambda msg: print(msg, file=out))
    extra = {
        "train_config": asdict(tcfg),
        "history": run.result.history,
        "best_epoch": run.result.best_epoch,
        "best_val_loss": run.result.best_val_loss,
        "epochs_run": run.result.epochs_run,
        "diverged": run.result.diverged,
    }
    net.save_checkpoint(cfg["out"], run.model, extra)
    outputs = [cfg["out"]]
    if run.anchors is not None:
        run.anchors.save(cfg["out"] + ".anchors")
        outputs.append(cfg["out"] + ".anchors")
    write_manifest(cfg["out"], "train", cfg, inputs, outputs)
    print(
        f"train: variant {tcfg.variant}, best epoch {run.result.best_epoch} "
        f"(val loss {run.result.best_val_loss:.4f}) -> {cfg['out']}",
        file=out,
    )
    return 0


def _load_eval_model(cfg: dict):
    """Checkpoint + anchors, honoring the <model>.anchors convention."""
    anchor_path = cfg["anchors"]
    if anchor_path is None:
        default = cfg["model"] + ".anchors"
        if os.path.exists(default):
            anchor_path = default
    anchor_set = AnchorSet.load(anchor_path) if anchor_path is not None else None
    model, extra = net.load_checkpoint(cfg["model"], anchors=anchor_set)
    inputs = [cfg["model"]] + ([anchor_path] if anchor_path is not None else [])
    return model, extra, anchor_set, inputs


def _emit_scene_svgs(run: TrainRun, stem: str, count: int) -> list:
    idx = run.split.test[:count]
    paths = []
    for j, i in enumerate(np.asarray(idx, dtype=np.int64)):
        sample = run.dataset.sample(int(i))
        origin = sample.ego_history[-1]
        hist = trajkit.ego_array(sample.ego_history, origin)
        fut = trajkit.ego_array(sample.ego_future, origin)
        neigh = [trajkit.ego_array(block, origin) for block in sample.neighbors]
        batch = net.prepare_batch(run.dataset, np.array([i]))
        if run.model.cfg.variant == "3d-a":
            mix = run.model.predict(batch, mode="mixture")
            means, probs = mix.means[0], mix.probs[0]
        else:
            means, probs = run.model.predict(batch, mode="point")[0], None
        path = f"{stem}.sample{j:03d}.svg"
        svgplot.plot_scene(path, hist, fut, means, probs=probs, neighbors=neigh)
        paths.append(path)
    return paths


def _cmd_eval(cfg: dict, out) -> int:
    # flag-level contradiction first: anchored modes need the anchored variant
    if cfg["mode"] is not None and cfg["variant"] not in (None, "3d-a"):
        raise UsageError(f"--mode {cfg['mode']} needs variant 3d-a, not {cfg['variant']}")
    _require(cfg, "eval", "model", "data", "labels", "out")
    model, extra, anchor_set, inputs = _load_eval_model(cfg)
    variant = model.cfg.variant
    if cfg["variant"] is not None and cfg["variant"] != variant:
        raise UsageError(f"checkpoint is variant '{variant}', not '{cfg['variant']}'")
    if cfg["mode"] is not None and variant != "3d-a":
        raise UsageError(f"--mode {cfg['mode']} needs variant 3d-a, not {variant}")
    dataset = Dataset.load(cfg["data"])
    labels, _ = load_labels(cfg["labels"])
    tcfg = TrainConfig(**extra["train_config"])
    ds, lab = labeled_subset(dataset, labels)
    split = split_dataset(ds.ids, tcfg.seed, tcfg.train_fraction, tcfg.val_fraction)
    run = TrainRun(model=model, result=TrainResult(), dataset=ds, labels=lab,
                   split=split, anchors=anchor_set, config=tcfg)
    modes = (cfg["mode"],) if cfg["mode"] is not None else None
    report = evaluate_run(run, include_reference=cfg["reference"], modes=modes)
    txt_path, csv_path = cfg["out"] + ".txt", cfg["out"] + ".csv"
    with open(txt_path, "w") as fh:
        fh.write(report.format())
    report.to_csv(csv_path)
    outputs = [txt_path, csv_path]
    if cfg["svg"]:
        outputs += _emit_scene_svgs(run, cfg["out"], cfg["svg"])
    write_manifest(cfg["out"] + ".txt", "eval", cfg,
                   inputs + [cfg["data"], cfg["labels"]], outputs)
    print(report.format(), file=out, end="")
    return 0


def _cmd_plot(cfg: dict, out) -> int:
    _require(cfg, "plot", "out")
    if cfg["anchors"] is None and cfg["data"] is None:
        raise UsageError("plot needs --anchors or --data")
    if cfg["anchors"] is not None and cfg["data"] is not None:
        raise UsageError("plot takes --anchors or --data, not both")
    if cfg["anchors"] is not None:
        anchor_set = AnchorSet.load(cfg["anchors"])
        svgplot.plot_anchors(anchor_set, cfg["out"])
        inputs = [cfg["anchors"]]
        desc = f"{anchor_set.n_classes} anchor trajectories"
    else:
        dataset = Dataset.load(cfg["data"])
        if not 0 <= cfg["sample"] < len(dataset):
            raise UsageError(f"--sample {cfg['sample']} outside dataset of {len(dataset)}")
        sample = dataset.sample(cfg["sample"])
        origin = sample.ego_history[-1]
        svgplot.plot_scene(
            cfg["out"],
            trajkit.ego_array(sample.ego_history, origin),
            trajkit.ego_array(sample.ego_future, origin),
            trajkit.ego_array(sample.ego_future, origin),
            neighbors=[trajkit.ego_array(b, origin) for b in sample.neighbors],
        )
        inputs = [cfg["data"]]
        desc = f"sample {cfg['sample']}"
    write_manifest(cfg["out"], "plot", cfg, inputs, [cfg["out"]])
    print(f"plot: {desc} -> {cfg['out']}", file=out)
    return 0


_HANDLERS = {
    "synth": _cmd_synth,
    "preprocess": _cmd_preprocess,
    "label": _cmd_label,
    "anchors": _cmd_anchors,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "plot": _cmd_plot,
}

_RUNTIME_ERRORS = (
    IngestError,
    binio.FormatError,
    VariantError,
    EvaluationError,
    LabelingError,
    AnchorError,
    MapError,
    GeometryError,
    FileNotFoundError,
    NotADirectoryError,
    ValueError,
    OSError,
)


def main(argv=None, out=None, err=None) -> int:
    out = sys.stdout if out is None else out
    err = sys.stderr if err is None else err
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required (see --help)")
        cfg = _merge_config(args.command, args)
        return _HANDLERS[args.command](cfg, out)
    except UsageError as exc:
        print("error: " + " ".join(str(exc).split()), file=err)
        return 2
    except _RUNTIME_ERRORS as exc:
        print("error: " + " ".join(str(exc).split()), file=err)
        return 1
