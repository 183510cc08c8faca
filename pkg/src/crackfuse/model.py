"""Dual-branch RGB-thermal segmentation model.

The thermal branch stacks convolutional residual blocks; the RGB branch
stacks patch-embedding transformer stages (exact self-attention over the
stage's token grid). After each enabled stage the two feature maps pass
through a bidirectional cross-fusion block and the fused maps feed the
next stage of their own branch. A lightweight decoder combines the RGB
stage features into the main probability map; an auxiliary head reads the
final thermal features so the thermal branch receives direct supervision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .fusion import CrossFusionBlock
from .params import ParamStore
from .tensor import Tensor, concat, concat_channels, split

NORM_EPS = 1e-5


@dataclass
class ModelConfig:
    stage_channels: tuple[int, int, int] = (16, 32, 64)
    stage_strides: tuple[int, int, int] = (2, 2, 2)
    fusion_enabled: tuple[bool, bool, bool] = (True, True, True)
    heads: int = 2
    mlp_ratio: float = 2.0
    segments: int = 4
    decoder_width: int = 32
    seed: int = 0

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.stage_strides = tuple(int(s) for s in self.stage_strides)
        self.fusion_enabled = tuple(bool(f) for f in self.fusion_enabled)
        if len(self.stage_channels) != 3 or len(self.stage_strides) != 3 \
                or len(self.fusion_enabled) != 3:
            raise ConfigError("stage_channels, stage_strides and fusion_enabled "
                              "must each have 3 entries")
        if any(c < 1 for c in self.stage_channels):
            raise ConfigError("stage channel widths must be positive")
        if any(s < 1 for s in self.stage_strides):
            raise ConfigError("stage strides must be positive")
        if self.segments < 1:
            raise ConfigError("segments must be positive")
        if self.heads < 1:
            raise ConfigError("heads must be positive")
        for i, c in enumerate(self.stage_channels):
            if self.fusion_enabled[i] and c % self.segments:
                raise ConfigError(f"stage {i} width {c} is not divisible by "
                                  f"the fusion segment count {self.segments}")
            if c % self.heads:
                raise ConfigError(f"stage {i} width {c} is not divisible by "
                                  f"the head count {self.heads}")
        if self.decoder_width < 1:
            raise ConfigError("decoder_width must be positive")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.stage_strides))


@dataclass
class SegOutput:
    main_prob: Tensor
    aux_prob: Tensor


# ------------------------------------------------------------------ layers

class Conv2dLayer:
    def __init__(self, store: ParamStore, name: str, cin: int, cout: int,
                 k: int, stride: int = 1, pad: int = 0, bias: bool = True,
                 init: str = "fan_in", rng: np.random.Generator | None = None,
                 dtype=np.float32):
        self.stride = stride
        self.pad = pad
        fan_in = cin * k * k
        if init == "fan_in":
            bound = 1.0 / math.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(cout, cin, k, k))
        elif init == "normal02":
            w = rng.normal(0.0, 0.02, size=(cout, cin, k, k))
        else:
            raise ConfigError(f"unknown conv init {init!r}")
        self.w = store.create(f"{name}.w", w.astype(dtype))
        self.b = None
        if bias:
            self.b = store.create(f"{name}.b", np.zeros(cout, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return x.conv2d(self.w, self.b, stride=self.stride, pad=self.pad)


class ChannelNorm:
    """Normalizes each channel over its spatial positions, then applies a
    learned per-channel scale and shift. Independent of batch composition."""

    def __init__(self, store: ParamStore, name: str, channels: int,
                 zero_scale: bool = False, dtype=np.float32):
        self.channels = channels
        init = np.zeros if zero_scale else np.ones
        self.scale = store.create(f"{name}.scale", init(channels, dtype=dtype))
        self.shift = store.create(f"{name}.shift",
                                  np.zeros(channels, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        c, h, w = x.shape
        mu = x.mean(axes=(1, 2), keepdims=True).expand((c, h, w))
        centered = x - mu
        var = (centered * centered).mean(axes=(1, 2), keepdims=True)
        denom = (var + NORM_EPS).sqrt().expand((c, h, w))
        normed = centered / denom
        s = self.scale.reshape((c, 1, 1)).expand((c, h, w))
        b = self.shift.reshape((c, 1, 1)).expand((c, h, w))
        return normed * s + b


class ResidualBlock:
    """conv-norm-relu-conv-norm with a projected shortcut. The second norm
    starts at zero scale so a fresh block is an identity over its shortcut."""

    def __init__(self, store: ParamStore, name: str, cin: int, cout: int,
                 stride: int, rng: np.random.Generator, dtype=np.float32):
        self.conv1 = Conv2dLayer(store, f"{name}.conv1", cin, cout, 3,
                                 stride=stride, pad=1, bias=False,
                                 rng=rng, dtype=dtype)
        self.norm1 = ChannelNorm(store, f"{name}.norm1", cout, dtype=dtype)
        self.conv2 = Conv2dLayer(store, f"{name}.conv2", cout, cout, 3,
                                 stride=1, pad=1, bias=False,
                                 rng=rng, dtype=dtype)
        self.norm2 = ChannelNorm(store, f"{name}.norm2", cout,
                                 zero_scale=True, dtype=dtype)
        self.shortcut = None
        if cin != cout or stride != 1:
            # kernel = stride so the projection reads every input pixel,
            # and a norm keeps each channel zero-centered; without these a
            # freshly built block (second norm at zero) is blind to pixels
            # the strided window skips and relu can silence whole channels
            self.shortcut = Conv2dLayer(store, f"{name}.shortcut", cin, cout,
                                        k=stride, stride=stride, bias=False,
                                        rng=rng, dtype=dtype)
            self.shortcut_norm = ChannelNorm(store, f"{name}.shortcut_norm",
                                             cout, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        main = self.norm2(self.conv2(self.norm1(self.conv1(x)).relu()))
        skip = self.shortcut_norm(self.shortcut(x)) if self.shortcut else x
        return (main + skip).relu()


class LayerNormTokens:
    """Per-token normalization over the channel axis of a (T, C) sequence."""

    def __init__(self, store: ParamStore, name: str, channels: int,
                 dtype=np.float32):
        self.scale = store.create(f"{name}.scale",
                                  np.ones(channels, dtype=dtype))
        self.shift = store.create(f"{name}.shift",
                                  np.zeros(channels, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        t, c = x.shape
        mu = x.mean(axes=(1,), keepdims=True).expand((t, c))
        centered = x - mu
        var = (centered * centered).mean(axes=(1,), keepdims=True)
        normed = centered / (var + NORM_EPS).sqrt().expand((t, c))
        s = self.scale.reshape((1, c)).expand((t, c))
        b = self.shift.reshape((1, c)).expand((t, c))
        return normed * s + b


class Linear:
    def __init__(self, store: ParamStore, name: str, cin: int, cout: int,
                 rng: np.random.Generator, dtype=np.float32):
        w = rng.normal(0.0, 0.02, size=(cin, cout)).astype(dtype)
        self.w = store.create(f"{name}.w", w)
        self.b = store.create(f"{name}.b", np.zeros(cout, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        t = x.shape[0]
        out = x.matmul(self.w)
        return out + self.b.reshape((1, -1)).expand((t, out.shape[1]))


class SelfAttention:
    """Exact multi-head attention over a (T, C) token sequence."""

    def __init__(self, store: ParamStore, name: str, channels: int,
                 heads: int, rng: np.random.Generator, dtype=np.float32):
        self.heads = heads
        self.dh = channels // heads
        self.q = Linear(store, f"{name}.q", channels, channels, rng, dtype)
        self.k = Linear(store, f"{name}.k", channels, channels, rng, dtype)
        self.v = Linear(store, f"{name}.v", channels, channels, rng, dtype)
        self.out = Linear(store, f"{name}.out", channels, channels, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        qs = split(self.q(x), self.heads, axis=1)
        ks = split(self.k(x), self.heads, axis=1)
        vs = split(self.v(x), self.heads, axis=1)
        scale = 1.0 / math.sqrt(self.dh)
        mixed = []
        for q, k, v in zip(qs, ks, vs):
            att = q.matmul(k.transpose()).scale(scale).softmax(axis=1)
            mixed.append(att.matmul(v))
        return self.out(concat(mixed, axis=1))


class TokenMlp:
    def __init__(self, store: ParamStore, name: str, channels: int,
                 ratio: float, rng: np.random.Generator, dtype=np.float32):
        hidden = max(1, int(round(channels * ratio)))
        self.fc1 = Linear(store, f"{name}.fc1", channels, hidden, rng, dtype)
        self.fc2 = Linear(store, f"{name}.fc2", hidden, channels, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).relu())


class TransformerStage:
    """Non-overlapping patch embedding followed by one pre-norm transformer
    block. The embedding kernel equals its stride so a spatially constant
    input yields spatially constant tokens."""

    def __init__(self, store: ParamStore, name: str, cin: int, cout: int,
                 stride: int, heads: int, mlp_ratio: float,
                 rng: np.random.Generator, dtype=np.float32):
        self.stride = stride
        self.embed = Conv2dLayer(store, f"{name}.embed", cin, cout,
                                 k=stride, stride=stride, pad=0, bias=True,
                                 init="normal02", rng=rng, dtype=dtype)
        self.norm1 = LayerNormTokens(store, f"{name}.norm1", cout, dtype)
        self.attn = SelfAttention(store, f"{name}.attn", cout, heads, rng, dtype)
        self.norm2 = LayerNormTokens(store, f"{name}.norm2", cout, dtype)
        self.mlp = TokenMlp(store, f"{name}.mlp", cout, mlp_ratio, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        fmap = self.embed(x)
        c, h, w = fmap.shape
        tokens = fmap.reshape((c, h * w)).transpose()
        tokens = tokens + self.attn(self.norm1(tokens))
        tokens = tokens + self.mlp(self.norm2(tokens))
        return tokens.transpose().reshape((c, h, w))


# ------------------------------------------------------------------- model

class CrackSegModel:
    THERMAL_IN = 1
    RGB_IN = 3

    def __init__(self, config: ModelConfig, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.store = ParamStore()
        rng = np.random.default_rng(config.seed)
        chans = config.stage_channels

        self.thermal_blocks = []
        self.rgb_stages = []
        cin_t, cin_r = self.THERMAL_IN, self.RGB_IN
        for i, (c, s) in enumerate(zip(chans, config.stage_strides)):
            self.thermal_blocks.append(ResidualBlock(
                self.store, f"thermal.stage{i}", cin_t, c, s, rng, dtype))
            self.rgb_stages.append(TransformerStage(
                self.store, f"rgb.stage{i}", cin_r, c, s,
                config.heads, config.mlp_ratio, rng, dtype))
            cin_t = cin_r = c

        self.fusion_blocks: list[CrossFusionBlock | None] = []
        for i, c in enumerate(chans):
            if config.fusion_enabled[i]:
                self.fusion_blocks.append(CrossFusionBlock(
                    self.store, f"fusion.stage{i}", channels=c, c_k=c, c_v=c,
                    n=config.segments, rng=rng, dtype=dtype))
            else:
                self.fusion_blocks.append(None)

        dw = config.decoder_width
        self.laterals = [Conv2dLayer(self.store, f"decoder.lateral{i}", c, dw,
                                     1, bias=False, rng=rng, dtype=dtype)
                         for i, c in enumerate(chans)]
        self.dec_conv1 = Conv2dLayer(self.store, "decoder.conv1", 3 * dw, dw,
                                     3, pad=1, bias=False, rng=rng, dtype=dtype)
        self.dec_norm1 = ChannelNorm(self.store, "decoder.norm1", dw, dtype=dtype)
        self.dec_conv2 = Conv2dLayer(self.store, "decoder.conv2", dw, dw,
                                     3, pad=1, bias=False, rng=rng, dtype=dtype)
        self.dec_norm2 = ChannelNorm(self.store, "decoder.norm2", dw, dtype=dtype)
        self.dec_head = Conv2dLayer(self.store, "decoder.head", dw, 1, 1,
                                    bias=True, rng=rng, dtype=dtype)
        self.aux_head = Conv2dLayer(self.store, "aux.head", chans[2], 1, 1,
                                    bias=True, rng=rng, dtype=dtype)

    # -------------------------------------------------------------- checks

    def _check_spatial(self, h: int, w: int):
        ts = self.config.total_stride
        if h % ts or w % ts:
            raise ConfigError(f"input size {h}x{w} must be divisible by the "
                              f"total stride {ts}")

    def _check_inputs(self, rgb: Tensor, thermal: Tensor):
        if rgb.ndim != 3 or rgb.shape[0] != self.RGB_IN:
            raise ShapeError(f"rgb input must be (3,H,W), got {rgb.shape}")
        if thermal.ndim != 3 or thermal.shape[0] != self.THERMAL_IN:
            raise ShapeError(f"thermal input must be (1,H,W), got {thermal.shape}")
        if rgb.shape[1:] != thermal.shape[1:]:
            raise ShapeError(f"rgb and thermal are misaligned: {rgb.shape} "
                             f"vs {thermal.shape}")
        self._check_spatial(rgb.shape[1], rgb.shape[2])

    # ------------------------------------------------------------ encoders

    def thermal_encoder(self, thermal: Tensor) -> list[Tensor]:
        """Thermal branch alone, no fusion."""
        if thermal.ndim != 3 or thermal.shape[0] != self.THERMAL_IN:
            raise ShapeError(f"thermal input must be (1,H,W), got {thermal.shape}")
        self._check_spatial(thermal.shape[1], thermal.shape[2])
        feats = []
        x = thermal
        for block in self.thermal_blocks:
            x = block(x)
            feats.append(x)
        return feats

    def rgb_encoder(self, rgb: Tensor) -> list[Tensor]:
        """RGB branch alone, no fusion."""
        if rgb.ndim != 3 or rgb.shape[0] != self.RGB_IN:
            raise ShapeError(f"rgb input must be (3,H,W), got {rgb.shape}")
        self._check_spatial(rgb.shape[1], rgb.shape[2])
        feats = []
        x = rgb
        for stage in self.rgb_stages:
            x = stage(x)
            feats.append(x)
        return feats

    # ------------------------------------------------------------- forward

    def forward(self, rgb: Tensor, thermal: Tensor) -> SegOutput:
        self._check_inputs(rgb, thermal)
        h, w = rgb.shape[1], rgb.shape[2]
        f_t, f_r = thermal, rgb
        rgb_feats = []
        for block, stage, fusion in zip(self.thermal_blocks, self.rgb_stages,
                                        self.fusion_blocks):
            f_t = block(f_t)
            f_r = stage(f_r)
            if fusion is not None:
                fused = fusion.fuse(f_t, f_r)
                f_t, f_r = fused.thermal, fused.rgb
            rgb_feats.append(f_r)

        h0, w0 = rgb_feats[0].shape[1], rgb_feats[0].shape[2]
        laterals = []
        for lat, feat in zip(self.laterals, rgb_feats):
            laterals.append(lat(feat).resize_bilinear(h0, w0))
        x = concat_channels(laterals)
        x = self.dec_norm1(self.dec_conv1(x)).relu()
        x = self.dec_norm2(self.dec_conv2(x)).relu()
        main = self.dec_head(x).resize_bilinear(h, w).sigmoid()
        aux = self.aux_head(f_t).resize_bilinear(h, w).sigmoid()
        return SegOutput(main_prob=main, aux_prob=aux)

    # ------------------------------------------------------------- helpers

    def fusion_param_count(self) -> int:
        """Analytic trainable-parameter total of the enabled fusion blocks."""
        return sum(CrossFusionBlock.param_count(c, c, c)
                   for i, c in enumerate(self.config.stage_channels)
                   if self.config.fusion_enabled[i])

    def param_count(self) -> int:
        return self.store.param_count()
