"""Request and response bodies for the HTTP service.

Request fields default to None, meaning "keep the preset value"; the
service layers non-None fields over the chosen preset, so a request body
of {} runs the desk defaults.
"""

from pydantic import BaseModel


class ModelOverrides(BaseModel):
    stage_channels: str | None = None
    stage_strides: str | None = None
    fusion_stages: str | None = None
    heads: int | None = None
    mlp_ratio: float | None = None
    segments: int | None = None
    decoder_width: int | None = None


class SynthRequest(BaseModel):
    preset: str = "desk"
    out_dir: str | None = None
    train_count: int | None = None
    test_count: int | None = None
    size: int | None = None
    seed: int | None = None
    crack_min: int | None = None
    crack_max: int | None = None
    width_min: float | None = None
    width_max: float | None = None
    shadows: bool | None = None
    watermarks: bool | None = None


class SynthResponse(BaseModel):
    out_dir: str
    train_count: int
    test_count: int
    size: int
    crack_count_range: list[int]
    crack_width_range: list[float]
    foreground_mean: float
    foreground_min: float
    foreground_max: float


class TrainRequest(ModelOverrides):
    preset: str = "desk"
    data_root: str | None = None
    out_dir: str | None = None
    epochs: int | None = None
    batch_size: int | None = None
    lr: float | None = None
    weight_decay: float | None = None
    beta1: float | None = None
    beta2: float | None = None
    adam_eps: float | None = None
    alpha: float | None = None
    beta: float | None = None
    gamma: float | None = None
    delta: float | None = None
    skeleton_iterations: int | None = None
    train_size: int | None = None
    eval_size: int | None = None
    threshold: float | None = None
    augment: bool | None = None
    early_stop_dice: float | None = None
    seed: int | None = None


class TrainResponse(BaseModel):
    out_dir: str
    epochs_run: int
    best_val_dice: float
    best_epoch: int
    final_train_dice: float
    best_checkpoint: str
    last_checkpoint: str
    log_path: str


class EvalRequest(ModelOverrides):
    preset: str = "desk"
    data_root: str | None = None
    checkpoint: str | None = None
    out_dir: str | None = None
    split: str | None = None
    eval_size: int | None = None
    threshold: float | None = None
    mode: str | None = None
    save_masks: bool | None = None


class EvalResponse(BaseModel):
    report: dict
    report_path: str
    csv_path: str
    count: int


class PredictRequest(ModelOverrides):
    preset: str = "desk"
    checkpoint: str | None = None
    rgb: str | None = None
    thermal: str | None = None
    out_dir: str | None = None
    eval_size: int | None = None
    threshold: float | None = None


class PredictResponse(BaseModel):
    mask_path: str
    overlay_path: str
    foreground_pixels: int
    skeleton_pixels: int


class BenchRequest(BaseModel):
    preset: str = "desk"
    out_dir: str | None = None
    sizes: str | None = None
    c_k: int | None = None
    c_v: int | None = None
    segments: int | None = None
    repeats: int | None = None
    max_timed_size: int | None = None
    seed: int | None = None


class BenchRow(BaseModel):
    h: int
    w: int
    c_k: int
    c_v: int
    segments: int
    naive_bytes: int
    efficient_bytes: int
    ratio: float
    naive_ms: float | None
    efficient_ms: float | None
    measured_elems: int | None
    analytic_elems: int


class BenchResponse(BaseModel):
    csv_path: str
    rows: list[BenchRow]


class HealthResponse(BaseModel):
    status: str
    version: str
