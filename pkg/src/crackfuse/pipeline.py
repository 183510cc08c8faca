"""Run orchestration shared by the service and the CLI.

Every command resolves a flat config (defaults, then preset, then user
overrides), echoes the resolved values into the output directory before
doing any work, and writes only deterministic artifacts: rerunning a
command with the same config and seed reproduces every output byte except
the single timestamped header line of the training log.
"""

import csv
import dataclasses
import io
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (NormStats, SamplePair, SynthParams, augment,
                   fit_norm_stats, load_dataset, load_split, preprocess,
                   synth_generate, write_dataset)
from .errors import ConfigError, DataError, ShapeError, UsageError
from .fusion import (BufferAudit, attention_cost_estimate,
                     cross_attention_dense, efficient_cross_attention)
from .losses import LossWeights, composite_loss, soft_skeleton
from .metrics import aggregate, confusion, evaluate_pair
from .model import CrackSegModel, ModelConfig
from .optim import AdamW
from .tensor import Tensor, no_grad

CONFIG_ECHO = "config.txt"


# ----------------------------------------------------------------- configs

@dataclass
class ModelFields:
    """Flat model hyperparameters shared by train, eval and predict."""
    stage_channels: str = "16,32,64"
    stage_strides: str = "2,2,2"
    fusion_stages: str = "1,1,1"
    heads: int = 2
    mlp_ratio: float = 2.0
    segments: int = 4
    decoder_width: int = 32


@dataclass
class SynthConfig:
    out_dir: str = "runs/dataset"
    train_count: int = 200
    test_count: int = 40
    size: int = 64
    seed: int = 7
    crack_min: int = 1
    crack_max: int = 2
    width_min: float = 1.0
    width_max: float = 2.2
    shadows: bool = True
    watermarks: bool = True


@dataclass
class TrainConfig(ModelFields):
    data_root: str = "runs/dataset"
    out_dir: str = "runs/train"
    epochs: int = 50
    batch_size: int = 8
    lr: float = 2e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    alpha: float = 0.3
    beta: float = 1.0
    gamma: float = 1.0
    delta: float = 0.1
    skeleton_iterations: int = 10
    train_size: int = 64
    eval_size: int = 64
    threshold: float = 0.5
    augment: bool = True
    early_stop_dice: float = 0.0
    seed: int = 0


@dataclass
class EvalConfig(ModelFields):
    data_root: str = "runs/dataset"
    checkpoint: str = "runs/train/best.ckpt"
    out_dir: str = "runs/eval"
    split: str = "test"
    eval_size: int = 64
    threshold: float = 0.5
    mode: str = "micro"
    save_masks: bool = False


@dataclass
class PredictConfig(ModelFields):
    checkpoint: str = "runs/train/best.ckpt"
    rgb: str = ""
    thermal: str = ""
    out_dir: str = "runs/predict"
    eval_size: int = 64
    threshold: float = 0.5


@dataclass
class BenchConfig:
    out_dir: str = "runs/bench"
    sizes: str = "8,16,32,64,256"
    c_k: int = 64
    c_v: int = 64
    segments: int = 4
    repeats: int = 3
    max_timed_size: int = 64
    seed: int = 0


# the desk preset is the defaults; paper-protocol restores the full-scale
# training protocol (batch 8, 150 epochs, weight decay 1e-4, resize 480)
PRESETS = {
    "synth": {"desk": {}},
    "train": {"desk": {},
              "paper-protocol": {"epochs": "150", "batch_size": "8",
                                 "weight_decay": "1e-4",
                                 "train_size": "480", "eval_size": "480"}},
    "eval": {"desk": {}, "paper-protocol": {"eval_size": "480"}},
    "predict": {"desk": {}},
    "bench-attn": {"desk": {}},
}

CONFIG_CLASSES = {"synth": SynthConfig, "train": TrainConfig,
                  "eval": EvalConfig, "predict": PredictConfig,
                  "bench-attn": BenchConfig}


def _coerce(value, target_type, key):
    if not isinstance(value, str):
        return value
    try:
        if target_type is bool:
            lowered = value.lower()
            if lowered in ("true", "1", "yes"):
                return True
            if lowered in ("false", "0", "no"):
                return False
            raise ValueError(value)
        return target_type(value)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {value!r} "
                          f"as {target_type.__name__}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Flat `key = value` lines; `#` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected `key = value`, "
                              f"got {body!r}")
        key, value = body.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def build_config(command: str, preset: str = "desk", *overrides: dict):
    """Resolve defaults <- preset <- overrides (later layers win)."""
    if command not in CONFIG_CLASSES:
        raise ConfigError(f"unknown command {command!r}")
    cls = CONFIG_CLASSES[command]
    presets = PRESETS[command]
    if preset not in presets:
        raise ConfigError(f"unknown preset {preset!r} for {command}; "
                          f"choose from {sorted(presets)}")
    defaults = cls()
    values = {}
    for layer in (presets[preset], *overrides):
        for key, value in layer.items():
            if not hasattr(defaults, key):
                raise ConfigError(f"unknown config key {key!r} for {command}")
            values[key] = _coerce(value, type(getattr(defaults, key)), key)
    return dataclasses.replace(defaults, **values)


def format_config(cfg) -> str:
    """Stable `key = value` echo, parseable back by parse_config_text."""
    lines = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def _echo_config(cfg, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / CONFIG_ECHO).write_text(format_config(cfg))


def _int_tuple(text: str, key: str):
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated integers, "
                          f"got {text!r}") from None


def _bool_tuple(text: str, key: str):
    flags = []
    for part in text.split(","):
        flags.append(_coerce(part.strip(), bool, key))
    return tuple(flags)


def model_config_from(cfg: ModelFields, seed: int = 0) -> ModelConfig:
    return ModelConfig(
        stage_channels=_int_tuple(cfg.stage_channels, "stage_channels"),
        stage_strides=_int_tuple(cfg.stage_strides, "stage_strides"),
        fusion_enabled=_bool_tuple(cfg.fusion_stages, "fusion_stages"),
        heads=cfg.heads, mlp_ratio=cfg.mlp_ratio, segments=cfg.segments,
        decoder_width=cfg.decoder_width, seed=seed)


def build_model(cfg: ModelFields, seed: int = 0) -> CrackSegModel:
    """Model plus the normalization buffers every checkpoint carries."""
    model = CrackSegModel(model_config_from(cfg, seed))
    model.store.create("norm.mean", np.zeros(4, dtype=np.float32),
                       trainable=False)
    model.store.create("norm.std", np.ones(4, dtype=np.float32),
                       trainable=False)
    return model


def _load_into(model: CrackSegModel, checkpoint: str) -> NormStats:
    arrays = load_checkpoint(checkpoint)
    model.store.load_arrays(arrays, source=str(checkpoint))
    return NormStats.from_arrays(arrays)


# ------------------------------------------------------------------- synth

def run_synth(cfg: SynthConfig) -> dict:
    out = Path(cfg.out_dir)
    _echo_config(cfg, out)
    if cfg.crack_min > cfg.crack_max or cfg.crack_min < 0:
        raise ConfigError("crack_min must satisfy 0 <= crack_min <= crack_max")
    params = SynthParams(size=cfg.size,
                         crack_count=(cfg.crack_min, cfg.crack_max),
                         width_range=(cfg.width_min, cfg.width_max),
                         shadows=cfg.shadows, watermarks=cfg.watermarks)
    pairs, split = [], {}
    total = cfg.train_count + cfg.test_count
    for idx in range(total):
        pair = synth_generate((cfg.seed, idx), params,
                              sample_id=f"synth_{idx:05d}")
        pairs.append(pair)
        split[pair.id] = "train" if idx < cfg.train_count else "test"
    write_dataset(out, pairs, split=split)
    fractions = [float(p.mask.data.mean()) for p in pairs]
    stats = {
        "out_dir": str(out),
        "train_count": cfg.train_count,
        "test_count": cfg.test_count,
        "size": cfg.size,
        "crack_count_range": [cfg.crack_min, cfg.crack_max],
        "crack_width_range": [cfg.width_min, cfg.width_max],
        "foreground_mean": float(np.mean(fractions)) if pairs else 0.0,
        "foreground_min": float(np.min(fractions)) if pairs else 0.0,
        "foreground_max": float(np.max(fractions)) if pairs else 0.0,
    }
    print(f"synth: wrote {cfg.train_count} train + {cfg.test_count} test "
          f"pairs at {cfg.size}x{cfg.size} into {out}")
    print(f"synth: foreground fraction mean {stats['foreground_mean']:.4f} "
          f"min {stats['foreground_min']:.4f} max {stats['foreground_max']:.4f}; "
          f"cracks per image in [{cfg.crack_min}, {cfg.crack_max}]")
    return stats


# ------------------------------------------------------------------- train

class _RunLog:
    """Plain-text line log mirrored to stdout."""

    def __init__(self, path: Path):
        self.path = path
        self.lines = []

    def line(self, text: str):
        print(text)
        self.lines.append(text)

    def flush(self):
        self.path.write_text("\n".join(self.lines) + "\n")


def _split_pairs(root: str, wanted: str) -> list[SamplePair]:
    pairs = load_dataset(root)
    split = load_split(root)
    missing = [p.id for p in pairs if p.id not in split]
    if missing:
        raise DataError(f"split manifest is missing entries for: "
                        f"{', '.join(missing[:5])}")
    return [p for p in pairs if split[p.id] == wanted]


def _micro_dice(model: CrackSegModel, pairs, stats: NormStats,
                size: int, threshold: float) -> float:
    if not pairs:
        return float("nan")
    tp = fp = fn = 0
    with no_grad():
        for pair in pairs:
            s = preprocess(pair, size, stats)
            out = model.forward(s.rgb, s.thermal)
            t, f, _, n = confusion(out.main_prob.data, s.mask.data, threshold)
            tp, fp, fn = tp + t, fp + f, fn + n
    if tp + fp + fn == 0:
        return 1.0
    return 2 * tp / (2 * tp + fp + fn)


def _split_reports(model: CrackSegModel, pairs, stats: NormStats,
                   size: int, threshold: float):
    reports = []
    with no_grad():
        for pair in pairs:
            s = preprocess(pair, size, stats)
            out = model.forward(s.rgb, s.thermal)
            reports.append((pair.id,
                            evaluate_pair(out.main_prob.data, s.mask.data,
                                          threshold),
                            out.main_prob.data))
    return reports


def run_train(cfg: TrainConfig) -> dict:
    out = Path(cfg.out_dir)
    _echo_config(cfg, out)
    model = build_model(cfg, seed=cfg.seed)

    # fail on size/stride mismatches before any epoch runs
    model._check_spatial(cfg.train_size, cfg.train_size)
    model._check_spatial(cfg.eval_size, cfg.eval_size)
    if cfg.batch_size < 1:
        raise ConfigError("batch_size must be at least 1")

    weights = LossWeights(alpha=cfg.alpha, beta=cfg.beta, gamma=cfg.gamma,
                          delta=cfg.delta,
                          skeleton_iterations=cfg.skeleton_iterations)
    train_pairs = _split_pairs(cfg.data_root, "train")
    val_pairs = _split_pairs(cfg.data_root, "test")
    if not train_pairs:
        raise DataError(f"{cfg.data_root}: train split is empty")

    stats = fit_norm_stats(train_pairs, cfg.train_size)
    model.store["norm.mean"].data = stats.mean.copy()
    model.store["norm.std"].data = stats.std.copy()

    optimizer = AdamW(model.store, lr=cfg.lr, beta1=cfg.beta1,
                      beta2=cfg.beta2, eps=cfg.adam_eps,
                      weight_decay=cfg.weight_decay)

    log = _RunLog(out / "train.log")
    log.line(f"# train run in {out} started "
             f"{time.strftime('%Y-%m-%dT%H:%M:%S')}")
    log.line(f"# {len(train_pairs)} train / {len(val_pairs)} val samples, "
             f"{model.param_count()} trainable parameters")

    best_path = out / "best.ckpt"
    last_path = out / "last.ckpt"
    best_dice = -1.0
    best_epoch = 0
    epochs_run = 0
    keys = ("total", "main", "aux", "topology", "ce", "dice")

    for epoch in range(cfg.epochs):
        order = np.random.default_rng((cfg.seed, epoch)).permutation(
            len(train_pairs))
        sums = dict.fromkeys(keys, 0.0)
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            for sample_idx in batch:
                pair = train_pairs[sample_idx]
                if cfg.augment:
                    pair = augment(pair, seed=(cfg.seed, epoch,
                                               int(sample_idx)))
                s = preprocess(pair, cfg.train_size, stats)
                pred = model.forward(s.rgb, s.thermal)
                loss = composite_loss(s.mask, pred.main_prob, pred.aux_prob,
                                      weights)
                loss.total.scale(1.0 / len(batch)).backward()
                for key in keys:
                    sums[key] += loss.components[key]
            # delta=0 leaves the last-stage thermal-direction fusion
            # weights outside the loss graph; give them zero gradients so
            # they behave like any unreached parameter (decay only)
            for _, t in model.store.trainable():
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
            optimizer.step()
            optimizer.zero_grad()
        epochs_run = epoch + 1
        means = {k: sums[k] / len(train_pairs) for k in keys}
        val_dice = _micro_dice(model, val_pairs, stats, cfg.eval_size,
                               cfg.threshold)
        log.line(f"epoch {epoch + 1}/{cfg.epochs} "
                 f"total {means['total']:.6f} main {means['main']:.6f} "
                 f"aux {means['aux']:.6f} topology {means['topology']:.6f} "
                 f"ce {means['ce']:.6f} dice {means['dice']:.6f} "
                 f"val_dice {val_dice:.6f}")
        if val_dice > best_dice:
            best_dice = val_dice
            best_epoch = epoch + 1
            save_checkpoint(best_path, model.store.state_arrays())
        if cfg.early_stop_dice > 0 and val_dice >= cfg.early_stop_dice:
            log.line(f"early_stop epoch {epoch + 1} "
                     f"val_dice {val_dice:.6f} >= {cfg.early_stop_dice:.6f}")
            break

    save_checkpoint(last_path, model.store.state_arrays())
    if not best_path.exists():
        save_checkpoint(best_path, model.store.state_arrays())

    final_train_dice = aggregate(
        [r for _, r, _ in _split_reports(model, train_pairs, stats,
                                         cfg.eval_size, cfg.threshold)],
        "micro").dice if train_pairs else float("nan")
    log.line(f"final train_dice {final_train_dice:.8f} "
             f"best_val_dice {best_dice:.6f} best_epoch {best_epoch}")
    log.flush()

    return {
        "out_dir": str(out),
        "epochs_run": epochs_run,
        "best_val_dice": best_dice,
        "best_epoch": best_epoch,
        "final_train_dice": final_train_dice,
        "best_checkpoint": str(best_path),
        "last_checkpoint": str(last_path),
        "log_path": str(log.path),
    }


# -------------------------------------------------------------------- eval

def run_eval(cfg: EvalConfig) -> dict:
    if cfg.split not in ("train", "test"):
        raise ConfigError(f"split must be train or test, got {cfg.split!r}")
    if cfg.mode not in ("micro", "macro"):
        raise ConfigError(f"mode must be micro or macro, got {cfg.mode!r}")
    out = Path(cfg.out_dir)
    _echo_config(cfg, out)
    model = build_model(cfg)
    model._check_spatial(cfg.eval_size, cfg.eval_size)
    stats = _load_into(model, cfg.checkpoint)
    pairs = _split_pairs(cfg.data_root, cfg.split)
    if not pairs:
        raise UsageError(f"{cfg.data_root}: split {cfg.split!r} is empty")

    per_image = _split_reports(model, pairs, stats, cfg.eval_size,
                               cfg.threshold)
    report = aggregate([r for _, r, _ in per_image], cfg.mode)

    report_path = out / "report.json"
    blob = report.to_json()
    blob["split"] = cfg.split
    blob["count"] = len(per_image)
    report_path.write_text(json.dumps(blob, indent=2, sort_keys=True) + "\n")

    csv_path = out / "per_image.csv"
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["stem", "dice", "iou", "accuracy", "precision",
                     "specificity", "recall", "cl_dice"])
    for stem, rep, _ in per_image:
        writer.writerow([stem] + [f"{getattr(rep, k):.8f}"
                                  for k in ("dice", "iou", "accuracy",
                                            "precision", "specificity",
                                            "recall", "cl_dice")])
    csv_path.write_text(buffer.getvalue())

    if cfg.save_masks:
        mask_dir = out / "masks"
        mask_dir.mkdir(exist_ok=True)
        for stem, _, prob in per_image:
            mask = (prob[0] >= cfg.threshold).astype(np.uint8) * 255
            Image.fromarray(mask, mode="L").save(mask_dir / f"{stem}.png")

    print(f"eval: {cfg.split} split of {cfg.data_root} "
          f"({len(per_image)} images, {cfg.mode}): dice {report.dice:.6f} "
          f"iou {report.iou:.6f} cl_dice {report.cl_dice:.6f}")
    return {"report": blob, "report_path": str(report_path),
            "csv_path": str(csv_path), "count": len(per_image)}


# ----------------------------------------------------------------- predict

def _load_image(path: str, mode: str) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert(mode), dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return arr


def run_predict(cfg: PredictConfig) -> dict:
    if not cfg.rgb or not cfg.thermal:
        raise ConfigError("predict needs both rgb and thermal image paths")
    out = Path(cfg.out_dir)
    _echo_config(cfg, out)
    rgb = _load_image(cfg.rgb, "RGB")
    thermal = _load_image(cfg.thermal, "L")
    if rgb.shape[1:] != thermal.shape[1:]:
        raise ShapeError(f"rgb {rgb.shape[1:]} and thermal "
                         f"{thermal.shape[1:]} are misaligned")
    h, w = rgb.shape[1:]

    model = build_model(cfg)
    model._check_spatial(cfg.eval_size, cfg.eval_size)
    stats = _load_into(model, cfg.checkpoint)

    sample = SamplePair(rgb=Tensor(rgb), thermal=Tensor(thermal),
                        mask=Tensor(np.zeros((1, h, w), dtype=np.float32)),
                        id=Path(cfg.rgb).stem)
    with no_grad():
        s = preprocess(sample, cfg.eval_size, stats)
        prob = model.forward(s.rgb, s.thermal).main_prob
        prob = prob.resize_bilinear(h, w)
        mask = (prob.data[0] >= cfg.threshold)
        skel = soft_skeleton(Tensor(mask[None].astype(np.float32)),
                             iterations=10).data[0] > 0.5

    mask_path = out / "mask.png"
    Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(mask_path)

    overlay = (rgb * 255.0).round().astype(np.uint8).transpose(1, 2, 0).copy()
    overlay[mask, 0] = 255
    overlay[skel, 1] = 255
    overlay_path = out / "overlay.png"
    Image.fromarray(overlay, mode="RGB").save(overlay_path)

    result = {"mask_path": str(mask_path), "overlay_path": str(overlay_path),
              "foreground_pixels": int(mask.sum()),
              "skeleton_pixels": int(skel.sum())}
    print(f"predict: {result['foreground_pixels']} foreground px, "
          f"{result['skeleton_pixels']} skeleton px -> {mask_path}")
    return result


# ------------------------------------------------------------------- bench

def _time_best(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best * 1000.0


def run_bench(cfg: BenchConfig) -> dict:
    out = Path(cfg.out_dir)
    _echo_config(cfg, out)
    sizes = _int_tuple(cfg.sizes, "sizes")
    rows = []
    for size in sizes:
        est = attention_cost_estimate(size, size, cfg.c_k, cfg.c_v,
                                      cfg.segments)
        row = {"h": size, "w": size, "c_k": cfg.c_k, "c_v": cfg.c_v,
               "segments": cfg.segments,
               "naive_bytes": est["naive_bytes"],
               "efficient_bytes": est["efficient_bytes"],
               "ratio": est["ratio"],
               "naive_ms": None, "efficient_ms": None,
               "measured_elems": None,
               "analytic_elems": est["efficient_bytes"] // 4}
        if size <= cfg.max_timed_size:
            rng = np.random.default_rng(cfg.seed)
            q = Tensor(rng.standard_normal(
                (cfg.c_k, size, size)).astype(np.float32))
            k = Tensor(rng.standard_normal(
                (cfg.c_k, size, size)).astype(np.float32))
            v = Tensor(rng.standard_normal(
                (cfg.c_v, size, size)).astype(np.float32))
            with no_grad():
                row["naive_ms"] = _time_best(
                    lambda: cross_attention_dense(q, k, v, cfg.segments),
                    cfg.repeats)
                row["efficient_ms"] = _time_best(
                    lambda: efficient_cross_attention(q, k, v, cfg.segments),
                    cfg.repeats)
                audit = BufferAudit()
                efficient_cross_attention(q, k, v, cfg.segments, audit=audit)
            row["measured_elems"] = audit.elements
        rows.append(row)

    csv_path = out / "bench.csv"
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    header = ["h", "w", "c_k", "c_v", "segments", "naive_bytes",
              "efficient_bytes", "ratio", "naive_ms", "efficient_ms",
              "measured_elems", "analytic_elems"]
    writer.writerow(header)
    for row in rows:
        writer.writerow([
            row["h"], row["w"], row["c_k"], row["c_v"], row["segments"],
            row["naive_bytes"], row["efficient_bytes"],
            f"{row['ratio']:.2f}",
            "" if row["naive_ms"] is None else f"{row['naive_ms']:.3f}",
            "" if row["efficient_ms"] is None else f"{row['efficient_ms']:.3f}",
            "" if row["measured_elems"] is None else row["measured_elems"],
            row["analytic_elems"]])
    csv_path.write_text(buffer.getvalue())

    for row in rows:
        gb = row["naive_bytes"] / 1e9
        mb = row["efficient_bytes"] / 1e6
        print(f"bench: {row['h']}x{row['w']} naive {gb:.2f} GB vs "
              f"efficient {mb:.1f} MB (ratio {row['ratio']:.0f})")
    return {"csv_path": str(csv_path), "rows": rows}
