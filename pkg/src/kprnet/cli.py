"""``kprnet`` command-line interface.

Every command resolves a flat ``key = value`` run configuration from three
layers: built-in defaults, an optional ``--config`` file, then flags. The
resolved configuration is echoed to stderr before any work starts.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from kprnet import checkpoint
from kprnet.errors import ConfigError, KprnetError
from kprnet.kitti_io import (
    IGNORE,
    ScanRef,
    default_label_map,
    discover_scans,
    load_label_map,
    load_labels,
    load_scan,
    point_cloud_to_bytes,
    read_labels,
    remap,
    write_predictions,
)
from kprnet.knn import KnnConfig, knn_filter
from kprnet.kpconv import generate_kernel_points
from kprnet.metrics import ConfusionMatrix, format_table, table_rows
from kprnet.net2d import Net2DConfig, StageConfig
from kprnet.projection import ProjectionConfig, project, upsample_nearest, write_range_image
from kprnet.train import (
    KPConvConfig,
    KPRNetModel,
    PixelModel,
    Scan,
    TrainConfig,
    fit,
    load_model,
    predict_points,
    prepare_image,
    save_model,
)

log = logging.getLogger("kprnet")

# ---------------------------------------------------------------------------
# value parsers


def parse_bool(text: str) -> bool:
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def parse_sequences(text: str) -> tuple[int, ...]:
    """``"0-7,9,10"`` -> ``(0, 1, ..., 7, 9, 10)``."""
    out: list[int] = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return tuple(sorted(set(out)))


def parse_size(text: str):
    """``"145x2049"`` -> ``(145, 2049)``; ``none`` and ``auto`` pass through."""
    value = str(text).strip().lower()
    if value in ("none", "auto"):
        return value
    try:
        h, w = value.split("x")
        size = (int(h), int(w))
    except ValueError:
        raise ValueError(f"expected HxW, none or auto, got {text!r}") from None
    if min(size) < 1:
        raise ValueError(f"size must be positive, got {text!r}")
    return size


def fmt(value, key: str = "") -> str:
    if key == "upsample" and isinstance(value, tuple):
        return f"{value[0]}x{value[1]}"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


# ---------------------------------------------------------------------------
# run configuration schema: key -> (parser, default, help)

_TRAIN = TrainConfig()
_NET = Net2DConfig()
_KP = KPConvConfig()
_KNN = KnnConfig()

SCHEMA = {
    # projection
    "height": (int, 64, "range image rows"),
    "width": (int, 2048, "range image columns"),
    "fov_up": (float, 3.0, "upper vertical field of view, degrees"),
    "fov_down": (float, 25.0, "lower vertical field of view, degrees (positive)"),
    "mode": (str, "unfold", "projection: spherical or unfold"),
    "upsample": (parse_size, "auto", "nearest upsampling target HxW, none, or auto"),
    # 2D network
    "model": (str, "kpconv", "model kind: kpconv or knn (pixel classifier + KNN voting)"),
    "stem_channels": (int, _NET.stem_channels, "stem width"),
    "channels": (parse_ints, tuple(s.channels for s in _NET.stages), "stage widths at strides 4,8,16"),
    "blocks": (int, _NET.stages[0].count, "residual blocks per stage"),
    "groups": (int, _NET.stages[0].groups, "grouped-conv cardinality"),
    "aspp_rates": (parse_ints, _NET.aspp_rates, "ASPP dilation rates"),
    "decoder_channels": (int, _NET.decoder_channels, "decoder width"),
    "skip_channels": (int, _NET.skip_channels, "skip projection width"),
    "features": (int, _NET.out_feature_channels, "per-pixel feature width F"),
    "circular_padding": (parse_bool, _NET.circular_padding, "wrap convolutions around the azimuth"),
    # point convolution
    "kernels": (int, _KP.num_kernels, "kernel points K"),
    "kp_radius": (float, _KP.radius, "neighbourhood radius, meters"),
    "kp_sigma": (float, _KP.sigma, "kernel influence distance, meters"),
    "kp_channels": (int, _KP.out_channels, "KPConv output width"),
    "kernel_seed": (int, _KP.kernel_seed, "seed for kernel point placement"),
    # KNN voting
    "knn_k": (int, _KNN.k, "voters per point"),
    "knn_window": (int, _KNN.window, "odd window side"),
    "knn_sigma": (float, _KNN.sigma_gauss, "Gaussian width on range difference, meters"),
    "knn_cutoff": (float, _KNN.cutoff, "max range difference for a vote, meters (0 disables)"),
    # optimisation
    "lr": (float, _TRAIN.base_lr, "base learning rate"),
    "momentum": (float, _TRAIN.momentum, "SGD momentum"),
    "weight_decay": (float, _TRAIN.weight_decay, "L2 weight decay"),
    "epochs": (int, _TRAIN.epochs, "training epochs"),
    "warmup": (int, _TRAIN.warmup_iters, "linear warm-up iterations"),
    "batch": (int, _TRAIN.batch_size, "scans per step"),
    "crop_width": (int, _TRAIN.crop_width, "random crop width"),
    "flip_prob": (float, _TRAIN.flip_prob, "horizontal flip probability"),
    "seed": (int, 0, "random seed"),
    "checkpoint_every": (int, 1, "epochs between checkpoints"),
    # data
    "data_root": (str, "", "dataset root (default: $KPRNET_DATA)"),
    "sequences": (parse_sequences, (), "sequence ids, e.g. 0-7,9,10"),
    "label_map": (str, "", "label map file (default: built-in 19-class map)"),
    "jobs": (int, 1, "worker processes"),
}

PROJECTION_KEYS = ["height", "width", "fov_up", "fov_down", "mode", "upsample"]
NET_KEYS = [
    "model", "stem_channels", "channels", "blocks", "groups", "aspp_rates",
    "decoder_channels", "skip_channels", "features", "circular_padding",
]
KP_KEYS = ["kernels", "kp_radius", "kp_sigma", "kp_channels", "kernel_seed"]
KNN_KEYS = ["knn_k", "knn_window", "knn_sigma", "knn_cutoff"]
OPT_KEYS = ["lr", "momentum", "weight_decay", "epochs", "warmup", "batch", "crop_width", "flip_prob", "checkpoint_every"]
DATA_KEYS = ["data_root", "sequences", "label_map"]

COMMAND_KEYS = {
    "project": PROJECTION_KEYS + ["seed", "jobs"],
    "train": PROJECTION_KEYS + NET_KEYS + KP_KEYS + OPT_KEYS + DATA_KEYS + ["seed"],
    "infer": PROJECTION_KEYS + KNN_KEYS + DATA_KEYS + ["seed", "jobs"],
    "postprocess": PROJECTION_KEYS + KNN_KEYS + DATA_KEYS + ["seed", "jobs"],
    "eval": DATA_KEYS + ["seed", "jobs"],
    "kernel-points": ["kernels", "kp_radius", "kp_sigma", "seed"],
    "synth": PROJECTION_KEYS[:4] + ["sequences", "seed"],
}

COMMAND_DEFAULTS = {
    "train": {"sequences": (0, 1, 2, 3, 4, 5, 6, 7, 9, 10)},
    "eval": {"sequences": (8,)},
    "postprocess": {"sequences": (8,)},
    "infer": {"sequences": (8,)},
    "synth": {"sequences": (0, 8), "height": 32, "width": 256},
}


def read_config_file(path) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then config file, then flags; every value parsed and checked."""
    keys = COMMAND_KEYS[command]
    resolved = {key: SCHEMA[key][1] for key in keys}
    resolved.update(COMMAND_DEFAULTS.get(command, {}))
    if not resolved.get("data_root", True):
        resolved["data_root"] = os.environ.get("KPRNET_DATA", "")
    layers = []
    if getattr(args, "config", None):
        layers.append(("config file", read_config_file(args.config)))
    layers.append(("flag", {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}))
    for origin, values in layers:
        for key, raw in values.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown {origin} key {key!r}")
            if key not in keys:
                raise ConfigError(f"{origin} key {key!r} does not apply to '{command}'")
            try:
                resolved[key] = SCHEMA[key][0](raw) if isinstance(raw, str) else raw
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from None
    if resolved.get("jobs", 1) < 1:
        raise ConfigError("jobs must be >= 1")
    return resolved


def echo(command: str, cfg: dict, stream=None) -> None:
    stream = stream or sys.stderr
    print(f"# kprnet {command}", file=stream)
    for key in sorted(cfg):
        print(f"# {key} = {fmt(cfg[key], key)}", file=stream)


# ---------------------------------------------------------------------------
# config objects


def projection_config(cfg: dict) -> ProjectionConfig:
    return ProjectionConfig(
        cfg["height"], cfg["width"], math.radians(cfg["fov_up"]), math.radians(cfg["fov_down"]), cfg["mode"]
    )


def upsample_target(cfg: dict, auto):
    value = cfg["upsample"]
    if value == "auto":
        return auto
    return None if value == "none" else value


def net_config(cfg: dict) -> Net2DConfig:
    channels = cfg["channels"]
    if len(channels) != 3:
        raise ConfigError("channels needs three comma-separated stage widths")
    return Net2DConfig(
        stem_channels=cfg["stem_channels"],
        stages=tuple(StageConfig(cfg["blocks"], c, 2, cfg["groups"]) for c in channels),
        aspp_rates=cfg["aspp_rates"],
        decoder_channels=cfg["decoder_channels"],
        skip_channels=cfg["skip_channels"],
        out_feature_channels=cfg["features"],
        circular_padding=cfg["circular_padding"],
    )


def knn_config(cfg: dict) -> KnnConfig:
    return KnnConfig(cfg["knn_k"], cfg["knn_window"], cfg["knn_sigma"], cfg["knn_cutoff"])


def projection_tensors(cfg: dict, upsample) -> dict[str, np.ndarray]:
    up = (0, 0) if upsample is None else upsample
    return {
        "run.projection": np.array(
            [cfg["height"], cfg["width"], cfg["fov_up"], cfg["fov_down"], float(cfg["mode"] == "unfold"), *up]
        )
    }


def projection_from_tensors(tensors) -> tuple[dict, object]:
    h, w, up_deg, down_deg, unfold, uh, uw = (float(v) for v in tensors["run.projection"])
    values = {
        "height": int(h),
        "width": int(w),
        "fov_up": up_deg,
        "fov_down": down_deg,
        "mode": "unfold" if unfold else "spherical",
    }
    return values, (None if uh == 0 else (int(uh), int(uw)))


def label_map_of(cfg: dict):
    return load_label_map(cfg["label_map"]) if cfg["label_map"] else default_label_map()


def dataset_refs(cfg: dict, scans=None) -> list[ScanRef]:
    """Explicit scan files win; otherwise scans of ``sequences`` under ``data_root``."""
    if scans:
        refs = []
        for path in scans:
            path = Path(path)
            label = path.with_suffix(".label")
            refs.append(ScanRef(path.stem, path, label if label.exists() else None))
        return refs
    if not cfg["data_root"]:
        raise ConfigError("no scans given: pass scan files, --data-root, or set KPRNET_DATA")
    refs = discover_scans(cfg["data_root"], cfg["sequences"])
    if not refs:
        raise ConfigError(f"no scans found under {cfg['data_root']} for sequences {fmt(cfg['sequences'])}")
    return refs


def pool_map(fn, items, jobs, initializer=None, initargs=()):
    """Ordered map; a process pool when ``jobs > 1``."""
    if jobs <= 1 or len(items) <= 1:
        if initializer:
            initializer(*initargs)
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=jobs, initializer=initializer, initargs=initargs) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# commands


def _project_one(task):
    path, out_dir, proj_cfg, upsample, plot = task
    cloud = load_scan(path)
    img = project(cloud, proj_cfg)
    if upsample is not None:
        img = upsample_nearest(img, *upsample)
    out = Path(out_dir) / (Path(path).stem + ".kpri")
    out.write_bytes(write_range_image(img))
    if plot:
        from kprnet.report import range_image_figure

        range_image_figure(img.data, out.with_suffix(".png"))
    dropped = int((~img.mapped).sum())
    return Path(path).name, len(cloud), dropped, img.collision_count(), out


def cmd_project(args, cfg) -> int:
    proj_cfg = projection_config(cfg)
    upsample = upsample_target(cfg, None)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = [(p, out_dir, proj_cfg, upsample, args.plot) for p in args.scans]
    for name, n, dropped, collisions, out in pool_map(_project_one, tasks, cfg["jobs"]):
        if args.stats:
            print(f"{name}\tpoints={n}\tdropped={dropped}\tcollisions={collisions}")
        log.info("wrote %s", out)
    return 0


def load_dataset(refs, label_map) -> list[Scan]:
    scans = []
    for ref in refs:
        if ref.label_path is None:
            raise ConfigError(f"scan {ref.name} has no label file")
        cloud = load_scan(ref.scan_path)
        labels = remap(load_labels(ref.label_path), label_map)
        if len(labels) != len(cloud):
            raise ConfigError(f"scan {ref.name}: {len(labels)} labels for {len(cloud)} points")
        scans.append(Scan(cloud, labels, ref.name))
    return scans


def cmd_train(args, cfg) -> int:
    proj_cfg = projection_config(cfg)
    upsample = upsample_target(cfg, _TRAIN.upsample_to)
    train_cfg = TrainConfig(
        base_lr=cfg["lr"],
        momentum=cfg["momentum"],
        weight_decay=cfg["weight_decay"],
        epochs=cfg["epochs"],
        warmup_iters=cfg["warmup"],
        batch_size=cfg["batch"],
        crop_width=cfg["crop_width"],
        flip_prob=cfg["flip_prob"],
        seed=cfg["seed"],
        upsample_to=upsample,
    )
    net_cfg = net_config(cfg)
    if cfg["model"] == "kpconv":
        kp_cfg = KPConvConfig(cfg["kernels"], cfg["kp_radius"], cfg["kp_sigma"], cfg["kp_channels"], cfg["kernel_seed"])
        model = KPRNetModel(net_cfg, kp_cfg, seed=cfg["seed"])
    elif cfg["model"] == "knn":
        model = PixelModel(net_cfg, seed=cfg["seed"])
    else:
        raise ConfigError(f"unknown model kind {cfg['model']!r}")
    scans = load_dataset(dataset_refs(cfg, args.scans), label_map_of(cfg))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path, ckpt = out / "train_log.csv", out / "model.kprw"
    extra = projection_tensors(cfg, upsample)

    def progress(step, lr, loss):
        if args.log_every and step % args.log_every == 0:
            print(f"step {step}\tlr {lr:.6g}\tloss {loss:.4f}", file=sys.stderr)

    history = fit(
        model, scans, train_cfg, proj_cfg, log_path, ckpt, cfg["checkpoint_every"], progress, checkpoint_extra=extra
    )
    save_model(ckpt, model, extra)
    if not args.no_plot and history:
        from kprnet.report import loss_curve

        loss_curve(history, out / "loss.png")
    print(f"trained {len(history)} steps on {len(scans)} scans; final loss {history[-1][2]:.4f}")
    print(f"log: {log_path}\ncheckpoint: {ckpt}")
    return 0


_WORKER: dict = {}


def _init_infer(ckpt_path, proj_cfg, upsample, knn_cfg):
    _WORKER.update(model=load_model(ckpt_path), proj=proj_cfg, upsample=upsample, knn=knn_cfg)


def _infer_one(task):
    ref, out_root, label_map = task
    cloud = load_scan(ref.scan_path)
    pred = predict_points(_WORKER["model"], cloud, _WORKER["proj"], _WORKER["upsample"], _WORKER["knn"])
    out = Path(out_root) / ref.prediction_relpath
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(write_predictions(pred, label_map))
    return out


def _checkpoint_projection(args, cfg, ckpt_tensors):
    """Projection keys from the checkpoint unless given by flag or config file."""
    explicit = {k for k in PROJECTION_KEYS if getattr(args, k, None) is not None}
    if getattr(args, "config", None):
        explicit |= set(read_config_file(args.config)) & set(PROJECTION_KEYS)
    if "run.projection" in ckpt_tensors:
        stored, stored_up = projection_from_tensors(ckpt_tensors)
        for key, value in stored.items():
            if key not in explicit:
                cfg[key] = value
        if "upsample" not in explicit:
            cfg["upsample"] = "none" if stored_up is None else stored_up
    return projection_config(cfg), upsample_target(cfg, None)


def cmd_infer(args, cfg) -> int:
    tensors = checkpoint.load(args.checkpoint)
    proj_cfg, upsample = _checkpoint_projection(args, cfg, tensors)
    log.info("projection after checkpoint: %s", {k: fmt(cfg[k], k) for k in PROJECTION_KEYS})
    kind = "kpconv" if float(tensors["meta.kind"][0]) == 0 else "knn"
    knn = None
    if kind == "knn" and not args.no_knn:
        knn = knn_config(cfg)
    refs = dataset_refs(cfg, args.scans)
    label_map = label_map_of(cfg)
    tasks = [(ref, args.out, label_map) for ref in refs]
    outs = pool_map(_infer_one, tasks, cfg["jobs"], _init_infer, (args.checkpoint, proj_cfg, upsample, knn))
    print(f"wrote {len(outs)} prediction files under {args.out}")
    return 0


def _postprocess_one(task):
    ref, pred_root, out_root, proj_cfg, upsample, knn_cfg, label_map = task
    cloud = load_scan(ref.scan_path)
    pred_path = Path(pred_root) / ref.prediction_relpath
    pred = remap(load_labels(pred_path), label_map)
    if len(pred) != len(cloud):
        raise ConfigError(f"{pred_path}: {len(pred)} predictions for {len(cloud)} points")
    img = prepare_image(cloud, proj_cfg, upsample)
    pixel_labels = np.full(img.shape, IGNORE, dtype=np.uint8)
    pixel_labels[img.valid] = pred[img.pixel_to_point[img.valid]]
    out = Path(out_root) / ref.prediction_relpath
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(write_predictions(knn_filter(pixel_labels, img, knn_cfg), label_map))
    return out


def cmd_postprocess(args, cfg) -> int:
    if args.checkpoint:
        proj_cfg, upsample = _checkpoint_projection(args, cfg, checkpoint.load(args.checkpoint))
    else:
        proj_cfg, upsample = projection_config(cfg), upsample_target(cfg, None)
    knn = knn_config(cfg)
    label_map = label_map_of(cfg)
    refs = dataset_refs(cfg, args.scans)
    tasks = [(ref, args.predictions, args.out, proj_cfg, upsample, knn, label_map) for ref in refs]
    outs = pool_map(_postprocess_one, tasks, cfg["jobs"])
    print(f"wrote {len(outs)} filtered prediction files under {args.out}")
    return 0


def _eval_one(task):
    ref, pred_root, label_map = task
    if ref.label_path is None:
        raise ConfigError(f"scan {ref.name} has no ground-truth labels")
    gt = remap(load_labels(ref.label_path), label_map)
    pred_path = Path(pred_root) / ref.prediction_relpath
    pred = remap(read_labels(pred_path.read_bytes()), label_map)
    if len(pred) != len(gt):
        raise ConfigError(f"{pred_path}: {len(pred)} predictions for {len(gt)} labels")
    return ConfusionMatrix().update(pred, gt)


def cmd_eval(args, cfg) -> int:
    label_map = label_map_of(cfg)
    refs = dataset_refs(cfg, args.scans)
    total = ConfusionMatrix()
    for cm in pool_map(_eval_one, [(ref, args.predictions, label_map) for ref in refs], cfg["jobs"]):
        total = total + cm
    print(format_table(total, label_map.names))
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class", "iou"])
            writer.writerows(table_rows(total, label_map.names))
    if args.figure:
        from kprnet.report import iou_bar_chart

        iou_bar_chart(total.iou(), label_map.names, args.figure)
    return 0


def cmd_kernel_points(args, cfg) -> int:
    disp = generate_kernel_points(cfg["kernels"], cfg["kp_radius"], cfg["seed"], cfg["kp_sigma"])
    checkpoint.save(
        args.out,
        {
            "kpconv.kernel_points": disp.positions,
            "kpconv.radius": np.array(disp.radius),
            "kpconv.sigma": np.array(disp.sigma),
        },
    )
    for p in disp.positions:
        print("\t".join(f"{v:+.6f}" for v in p))
    return 0


def cmd_synth(args, cfg) -> int:
    """Write a small synthetic dataset in the on-disk dataset layout."""
    from kprnet.synthetic import labeled_scans

    label_map = label_map_of({"label_map": ""})
    root = Path(args.out)
    for offset, seq in enumerate(cfg["sequences"]):
        scans = labeled_scans(
            args.scans_per_sequence,
            cfg["height"],
            cfg["width"],
            seed=cfg["seed"] + 1000 * offset,
            fov_up=math.radians(cfg["fov_up"]),
            fov_down=math.radians(cfg["fov_down"]),
        )
        seq_dir = root / "sequences" / f"{seq:02d}"
        (seq_dir / "velodyne").mkdir(parents=True, exist_ok=True)
        (seq_dir / "labels").mkdir(parents=True, exist_ok=True)
        for i, (_, cloud, labels) in enumerate(scans):
            (seq_dir / "velodyne" / f"{i:06d}.bin").write_bytes(point_cloud_to_bytes(cloud))
            (seq_dir / "labels" / f"{i:06d}.label").write_bytes(write_predictions(labels, label_map))
    print(f"wrote {len(cfg['sequences']) * args.scans_per_sequence} scans under {root}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_keys(parser, command):
    for key in COMMAND_KEYS[command]:
        parser.add_argument(
            "--" + key.replace("_", "-"), dest=key, default=None, metavar=key.split("_")[-1].upper(),
            help=f"{SCHEMA[key][2]} (default {fmt(COMMAND_DEFAULTS.get(command, {}).get(key, SCHEMA[key][1]), key) or '-'})",
        )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kprnet", description="LiDAR range-image segmentation with a KPConv head.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value run configuration file")
        _add_keys(p, name)
        return p

    p = command("project", "project .bin scans to KPRI range images")
    p.add_argument("scans", nargs="+", help=".bin files")
    p.add_argument("-o", "--out", default=".", help="output directory")
    p.add_argument("--stats", action="store_true", help="print dropped points and collisions per scan")
    p.add_argument("--plot", action="store_true", help="also write a PNG of each range image")

    p = command("train", "train a model on labeled scans")
    p.add_argument("scans", nargs="*", help="explicit .bin files (labels next to them); default: dataset sequences")
    p.add_argument("-o", "--out", default="run", help="output directory for log, checkpoint and plot")
    p.add_argument("--log-every", type=int, default=0, help="print every N steps (0: silent)")
    p.add_argument("--no-plot", action="store_true", help="skip the loss curve figure")

    p = command("infer", "write .label predictions from a checkpoint")
    p.add_argument("scans", nargs="*", help="explicit .bin files; default: dataset sequences")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("-o", "--out", required=True, help="prediction root")
    p.add_argument("--no-knn", action="store_true", help="pixel models: plain back-projection instead of KNN voting")

    p = command("postprocess", "KNN-filter existing predictions")
    p.add_argument("scans", nargs="*", help="explicit .bin files; default: dataset sequences")
    p.add_argument("--predictions", required=True, help="prediction root to read")
    p.add_argument("--checkpoint", help="take projection settings from this checkpoint")
    p.add_argument("-o", "--out", required=True, help="prediction root to write")

    p = command("eval", "IoU table of predictions against ground truth")
    p.add_argument("scans", nargs="*", help="explicit .bin files; default: dataset sequences")
    p.add_argument("--predictions", required=True, help="prediction root")
    p.add_argument("--csv", help="write the table as CSV")
    p.add_argument("--figure", help="write a per-class IoU bar chart (PNG)")

    p = command("kernel-points", "generate a kernel point disposition")
    p.add_argument("-o", "--out", required=True, help="output KPRW file")

    p = command("synth", "write a synthetic labeled dataset")
    p.add_argument("-o", "--out", required=True, help="dataset root")
    p.add_argument("--scans-per-sequence", type=int, default=2)
    return parser


COMMANDS = {
    "project": cmd_project,
    "train": cmd_train,
    "infer": cmd_infer,
    "postprocess": cmd_postprocess,
    "eval": cmd_eval,
    "kernel-points": cmd_kernel_points,
    "synth": cmd_synth,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve(args.command, args)
        echo(args.command, cfg)
        return COMMANDS[args.command](args, cfg)
    except (KprnetError, OSError, ValueError, KeyError) as exc:
        message = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"kprnet {args.command}: error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
