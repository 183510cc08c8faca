"""Cross-modal fusion block with linear-complexity factorized attention.

Each modality projects its feature map to query/key/value tensors with 1x1
convolutions. Channels are partitioned into n segments; within a segment the
keys (flattened to channels x positions) are softmaxed along the spatial
axis, the queries along the channel axis, and attention is factorized as

    context = V_hat @ softmax_spatial(K_hat)^T        # (Cv/n, Ck/n)
    output  = context @ softmax_channel(Q_hat)        # (Cv/n, HW)

so the (HW x HW) spatial attention map is never materialized. Queries come
from a modality's own features, keys and values from the complementary
modality, and each direction carries its own projection weights plus an
input residual.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .params import ParamStore
from .tensor import Tensor, concat_channels, split_channels


class BufferAudit:
    """Counts elements of the auxiliary buffers the efficient path allocates."""

    def __init__(self):
        self.elements = 0

    def add(self, *tensors: Tensor):
        self.elements += sum(t.size for t in tensors)


def project_qkv(x: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor):
    """1x1-convolution projections of one modality's feature map."""
    if x.ndim != 3:
        raise ShapeError(f"expected a (C,H,W) feature map, got {x.shape}")
    q = x.conv2d(w_q)
    k = x.conv2d(w_k)
    v = x.conv2d(w_v)
    return q, k, v


def efficient_cross_attention(q_same: Tensor, k_other: Tensor, v_other: Tensor,
                              n: int, audit: BufferAudit | None = None) -> Tensor:
    """Segmented factorized attention; see the module docstring for axes."""
    ck, h, w = q_same.shape
    if k_other.shape != (ck, h, w):
        raise ShapeError(f"query/key shapes disagree: {q_same.shape} vs {k_other.shape}")
    cv, h2, w2 = v_other.shape
    if (h2, w2) != (h, w):
        raise ShapeError(f"value spatial size {v_other.shape} does not match {q_same.shape}")
    if n < 1 or ck % n != 0 or cv % n != 0:
        raise ConfigError(f"segment count {n} must divide both C_k={ck} and C_v={cv}")

    hw = h * w
    ckn, cvn = ck // n, cv // n
    q_segs = split_channels(q_same, n)
    k_segs = split_channels(k_other, n)
    v_segs = split_channels(v_other, n)
    outs = []
    for i in range(n):
        k_soft = k_segs[i].reshape((ckn, hw)).softmax(axis=1)   # spatial axis
        v_hat = v_segs[i].reshape((cvn, hw))
        context = v_hat.matmul(k_soft.transpose())              # (Cv/n, Ck/n)
        q_soft = q_segs[i].reshape((ckn, hw)).softmax(axis=0)   # channel axis
        outs.append(context.matmul(q_soft).reshape((cvn, h, w)))
        if audit is not None:
            audit.add(k_soft, q_soft, v_hat, context)
    return concat_channels(outs)


def cross_attention_dense(q_same: Tensor, k_other: Tensor, v_other: Tensor,
                          n: int) -> Tensor:
    """Quadratic-memory reference: materializes each segment's full
    (HW x HW) spatial map before applying it to the values. Same operator
    as the efficient path by associativity; used for benchmarking."""
    ck, h, w = q_same.shape
    cv = v_other.shape[0]
    if n < 1 or ck % n != 0 or cv % n != 0:
        raise ConfigError(f"segment count {n} must divide both C_k={ck} and C_v={cv}")
    hw = h * w
    ckn, cvn = ck // n, cv // n
    q_segs = split_channels(q_same, n)
    k_segs = split_channels(k_other, n)
    v_segs = split_channels(v_other, n)
    outs = []
    for i in range(n):
        k_soft = k_segs[i].reshape((ckn, hw)).softmax(axis=1)
        q_soft = q_segs[i].reshape((ckn, hw)).softmax(axis=0)
        spatial_map = k_soft.transpose().matmul(q_soft)          # (HW, HW)
        v_hat = v_segs[i].reshape((cvn, hw))
        outs.append(v_hat.matmul(spatial_map).reshape((cvn, h, w)))
    return concat_channels(outs)


@dataclass
class FusionOutput:
    thermal: Tensor
    rgb: Tensor


class CrossFusionBlock:
    """Bidirectional fusion for one encoder stage.

    The two directions (thermal->rgb and rgb->thermal) hold independent
    projection weights; projection convolutions carry no bias.
    """

    def __init__(self, store: ParamStore, name: str, channels: int,
                 c_k: int, c_v: int, n: int, rng: np.random.Generator,
                 dtype=np.float32):
        if n < 1 or c_k % n != 0 or c_v % n != 0:
            raise ConfigError(
                f"{name}: segment count {n} must divide C_k={c_k} and C_v={c_v}")
        self.channels = channels
        self.c_k = c_k
        self.c_v = c_v
        self.n = n

        def conv_w(pname, cout, cin):
            bound = 1.0 / np.sqrt(cin)
            data = rng.uniform(-bound, bound, size=(cout, cin, 1, 1)).astype(dtype)
            return store.create(f"{name}.{pname}", data)

        self.wq_t = conv_w("thermal.wq", c_k, channels)
        self.wk_t = conv_w("thermal.wk", c_k, channels)
        self.wv_t = conv_w("thermal.wv", c_v, channels)
        self.wq_r = conv_w("rgb.wq", c_k, channels)
        self.wk_r = conv_w("rgb.wk", c_k, channels)
        self.wv_r = conv_w("rgb.wv", c_v, channels)
        self.proj_t = conv_w("thermal.proj", channels, c_v)
        self.proj_r = conv_w("rgb.proj", channels, c_v)

    @staticmethod
    def param_count(channels: int, c_k: int, c_v: int) -> int:
        """Analytic trainable-parameter count of one block."""
        return 2 * (2 * c_k * channels + c_v * channels) + 2 * channels * c_v

    def fuse(self, x_thermal: Tensor, x_rgb: Tensor,
             audit: BufferAudit | None = None) -> FusionOutput:
        if x_thermal.shape != x_rgb.shape:
            raise ShapeError(f"modality shapes disagree: {x_thermal.shape} "
                             f"vs {x_rgb.shape}")
        if x_thermal.shape[0] != self.channels:
            raise ShapeError(f"expected {self.channels} channels, "
                             f"got {x_thermal.shape[0]}")
        q_t, k_t, v_t = project_qkv(x_thermal, self.wq_t, self.wk_t, self.wv_t)
        q_r, k_r, v_r = project_qkv(x_rgb, self.wq_r, self.wk_r, self.wv_r)
        # Queries from a modality's own stream, keys/values from the other.
        att_t = efficient_cross_attention(q_t, k_r, v_r, self.n, audit)
        att_r = efficient_cross_attention(q_r, k_t, v_t, self.n, audit)
        out_t = att_t.conv2d(self.proj_t) + x_thermal
        out_r = att_r.conv2d(self.proj_r) + x_rgb
        return FusionOutput(thermal=out_t, rgb=out_r)


def attention_cost_estimate(h: int, w: int, c_k: int, c_v: int, n: int,
                            bytes_per_elem: int = 4) -> dict:
    """Closed-form memory cost of the spatial attention map versus the
    factorized path's auxiliary buffers."""
    if min(h, w, c_k, c_v, n) < 1:
        raise ConfigError("all dimensions must be positive")
    hw = h * w
    naive_bytes = hw * hw * bytes_per_elem
    efficient_elems = n * (c_k // n) * (c_v // n) + 2 * c_k * hw + c_v * hw
    efficient_bytes = efficient_elems * bytes_per_elem
    return {
        "naive_bytes": naive_bytes,
        "efficient_bytes": efficient_bytes,
        "ratio": naive_bytes / efficient_bytes,
    }
