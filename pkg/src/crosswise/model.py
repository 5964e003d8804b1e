"""Crossing-direction model: 2-layer GRU, multi-head self-attention encoder,
and a small classification head, with a hand-derived analytic backward pass.

All math is plain numpy; no autodiff. Forward runs batched over windows
(B, T, 16). Internals follow, per time step t of each GRU layer:

    z_t = sigmoid(x_t W_z + h_{t-1} U_z + b_z)
    r_t = sigmoid(x_t W_r + h_{t-1} U_r + b_r)
    g_t = tanh(x_t W_h + (r_t * h_{t-1}) U_h + b_h)
    h_t = (1 - z_t) * h_{t-1} + z_t * g_t

then one encoder block over the hidden sequence (scaled dot-product
attention per head on sliced Q/K/V, concat, output projection, residual +
layer norm, position-wise FFN, residual + layer norm), mean pooling over
time, FC 256->64 ReLU, FC 64->1, sigmoid. Class 1 is crosswalk B.

Training-mode dropout masks are drawn from a caller-supplied Generator so
two calls with identically seeded generators replay the same masks; the
finite-difference gradient checks rely on that.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .features import FEATURE_DIM, LAYOUT_HASH, FeatureWindow

WEIGHT_FILE_VERSION = 1


class ModelError(ValueError):
    pass


class LayoutMismatchError(ModelError):
    """Weights were produced against a different feature layout."""


@dataclass(frozen=True)
class ModelConfig:
    d_in: int = FEATURE_DIM
    d_h: int = 256
    n_heads: int = 2
    d_ff: int = 512
    dropout: float = 0.5
    pooling: str = "mean"  # or "last"

    def __post_init__(self):
        if self.d_h % self.n_heads != 0:
            raise ModelError(f"d_h={self.d_h} not divisible by n_heads={self.n_heads}")
        if self.pooling not in ("mean", "last"):
            raise ModelError(f"unknown pooling {self.pooling!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError("dropout must be in [0, 1)")

    @property
    def d_model(self) -> int:
        return self.d_h


@dataclass
class GruLayerParams:
    w_z: np.ndarray
    w_r: np.ndarray
    w_h: np.ndarray
    u_z: np.ndarray
    u_r: np.ndarray
    u_h: np.ndarray
    b_z: np.ndarray
    b_r: np.ndarray
    b_h: np.ndarray


@dataclass
class AttentionParams:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    w_ff1: np.ndarray
    b_ff1: np.ndarray
    w_ff2: np.ndarray
    b_ff2: np.ndarray
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    n_heads: int = 2


@dataclass
class HeadParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


_GRU_FIELDS = ("w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h")
_ATTN_FIELDS = ("w_q", "w_k", "w_v", "w_o", "w_ff1", "b_ff1", "w_ff2", "b_ff2",
                "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias")
_HEAD_FIELDS = ("w1", "b1", "w2", "b2")


@dataclass
class ModelParams:
    config: ModelConfig
    gru: list[GruLayerParams]
    attn: AttentionParams
    head: HeadParams
    version: int = WEIGHT_FILE_VERSION
    layout_hash: str = LAYOUT_HASH

    def named_tensors(self) -> Iterator[tuple[str, np.ndarray]]:
        for i, layer in enumerate(self.gru):
            for name in _GRU_FIELDS:
                yield f"gru{i}.{name}", getattr(layer, name)
        for name in _ATTN_FIELDS:
            yield f"attn.{name}", getattr(self.attn, name)
        for name in _HEAD_FIELDS:
            yield f"head.{name}", getattr(self.head, name)

    def get_tensor(self, name: str) -> np.ndarray:
        owner, attr = name.split(".")
        if owner.startswith("gru"):
            return getattr(self.gru[int(owner[3:])], attr)
        return getattr(self.attn if owner == "attn" else self.head, attr)

    def n_params(self) -> int:
        return sum(t.size for _, t in self.named_tensors())

    def copy(self) -> "ModelParams":
        return ModelParams(
            config=self.config,
            gru=[GruLayerParams(**{f: getattr(l, f).copy() for f in _GRU_FIELDS})
                 for l in self.gru],
            attn=AttentionParams(
                **{f: getattr(self.attn, f).copy() for f in _ATTN_FIELDS},
                n_heads=self.attn.n_heads),
            head=HeadParams(**{f: getattr(self.head, f).copy() for f in _HEAD_FIELDS}),
            version=self.version,
            layout_hash=self.layout_hash,
        )

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            config=self.config,
            gru=[GruLayerParams(**{f: getattr(l, f).astype(dtype) for f in _GRU_FIELDS})
                 for l in self.gru],
            attn=AttentionParams(
                **{f: getattr(self.attn, f).astype(dtype) for f in _ATTN_FIELDS},
                n_heads=self.attn.n_heads),
            head=HeadParams(**{f: getattr(self.head, f).astype(dtype)
                               for f in _HEAD_FIELDS}),
            version=self.version,
            layout_hash=self.layout_hash,
        )


@dataclass(frozen=True)
class Prediction:
    track_id: int
    p_b: float
    end_frame_idx: int

    def __post_init__(self):
        if not 0.0 <= self.p_b <= 1.0:
            raise ModelError(f"p_b out of [0,1]: {self.p_b}")

    @property
    def label(self) -> str:
        return "A" if self.p_b < 0.5 else "B"


# --- initialization ----------------------------------------------------------


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_in, fan_out)).astype(dtype)


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float64) -> ModelParams:
    """Xavier-uniform weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    d, dm, dff = config.d_in, config.d_model, config.d_ff

    def gru_layer(d_in: int) -> GruLayerParams:
        return GruLayerParams(
            w_z=_xavier(rng, d_in, dm, dtype), w_r=_xavier(rng, d_in, dm, dtype),
            w_h=_xavier(rng, d_in, dm, dtype),
            u_z=_xavier(rng, dm, dm, dtype), u_r=_xavier(rng, dm, dm, dtype),
            u_h=_xavier(rng, dm, dm, dtype),
            b_z=np.zeros(dm, dtype), b_r=np.zeros(dm, dtype), b_h=np.zeros(dm, dtype))

    attn = AttentionParams(
        w_q=_xavier(rng, dm, dm, dtype), w_k=_xavier(rng, dm, dm, dtype),
        w_v=_xavier(rng, dm, dm, dtype), w_o=_xavier(rng, dm, dm, dtype),
        w_ff1=_xavier(rng, dm, dff, dtype), b_ff1=np.zeros(dff, dtype),
        w_ff2=_xavier(rng, dff, dm, dtype), b_ff2=np.zeros(dm, dtype),
        ln1_gain=np.ones(dm, dtype), ln1_bias=np.zeros(dm, dtype),
        ln2_gain=np.ones(dm, dtype), ln2_bias=np.zeros(dm, dtype),
        n_heads=config.n_heads)
    head = HeadParams(w1=_xavier(rng, dm, 64, dtype), b1=np.zeros(64, dtype),
                      w2=_xavier(rng, 64, 1, dtype), b2=np.zeros(1, dtype))
    return ModelParams(config=config, gru=[gru_layer(d), gru_layer(dm)],
                       attn=attn, head=head)


# --- primitives --------------------------------------------------------------


def sigmoid(x: np.ndarray) -> np.ndarray:
    t = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))


def softmax_last(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


LN_EPS = 1e-5


def _layer_norm(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    istd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * istd
    return gain * xhat + bias, xhat, istd


def _layer_norm_backward(dy, xhat, istd, gain):
    dgain = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    dbias = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * gain
    dx = istd * (dxhat
                 - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgain, dbias


def _dropout_mask(rng: Optional[np.random.Generator], shape, rate: float, dtype):
    if rng is None or rate <= 0.0:
        return None
    keep = (rng.random(shape) >= rate).astype(dtype)
    return keep / (1.0 - rate)


def _apply_mask(x, mask):
    return x if mask is None else x * mask


# --- single-vector ops (public surface, also used by the oracle tests) -------


def gru_cell(x: np.ndarray, h_prev: np.ndarray, layer: GruLayerParams) -> np.ndarray:
    """One GRU step for a single vector pair."""
    x = np.asarray(x, dtype=float)
    h_prev = np.asarray(h_prev, dtype=float)
    if x.shape[0] != layer.w_z.shape[0] or h_prev.shape[0] != layer.u_z.shape[0]:
        raise ModelError(f"gru_cell shape mismatch: x{x.shape} h{h_prev.shape}")
    z = sigmoid(x @ layer.w_z + h_prev @ layer.u_z + layer.b_z)
    r = sigmoid(x @ layer.w_r + h_prev @ layer.u_r + layer.b_r)
    g = np.tanh(x @ layer.w_h + (r * h_prev) @ layer.u_h + layer.b_h)
    return (1.0 - z) * h_prev + z * g


def gru_forward(x_seq: np.ndarray, params: ModelParams, mode: str = "infer",
                rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Run the 2-layer GRU stack over one (T, d_in) sequence; returns (T, d_h)."""
    hs, _, _ = _gru_stack_forward(np.asarray(x_seq, dtype=float)[None], params,
                                  mode == "train", rng)
    return hs[0]


def multi_head_attention(h_seq: np.ndarray, attn: AttentionParams
                         ) -> tuple[np.ndarray, np.ndarray]:
    """Scaled dot-product multi-head attention over one (T, d) sequence.

    Returns (output, softmax weights of shape (n_heads, T, T)).
    """
    out, cache = _mha_forward(np.asarray(h_seq, dtype=float)[None], attn)
    return out[0], cache["a"][0]


def attention_encoder(h_seq: np.ndarray, attn: AttentionParams, mode: str = "infer",
                      rng: Optional[np.random.Generator] = None,
                      dropout: float = 0.0) -> np.ndarray:
    """Full encoder block (attention, FFN, norms) over one (T, d) sequence."""
    out, _ = _encoder_forward(np.asarray(h_seq, dtype=float)[None], attn,
                              dropout if mode == "train" else 0.0,
                              rng if mode == "train" else None)
    return out[0]


# --- batched forward ----------------------------------------------------------


def _flat_gemm(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    """(B, T, d) @ (d, e) as one 2-D GEMM."""
    b, t_len, d = a.shape
    return (a.reshape(b * t_len, d) @ w).reshape(b, t_len, w.shape[1])


def _outer_grad(a: np.ndarray, d: np.ndarray) -> np.ndarray:
    """sum_{b,t} outer(a[b,t], d[b,t]) as one 2-D GEMM."""
    bt = a.shape[0] * a.shape[1]
    return a.reshape(bt, a.shape[2]).T @ d.reshape(bt, d.shape[2])


def _gru_layer_forward(seq, layer: GruLayerParams):
    b, t_len, _ = seq.shape
    dm = layer.u_z.shape[0]
    # input-side projections for all steps at once; the loop only carries h
    xw_z = _flat_gemm(seq, layer.w_z) + layer.b_z
    xw_r = _flat_gemm(seq, layer.w_r) + layer.b_r
    xw_h = _flat_gemm(seq, layer.w_h) + layer.b_h
    h = np.zeros((b, dm), dtype=seq.dtype)
    hs = np.empty((b, t_len, dm), dtype=seq.dtype)
    steps = []
    for t in range(t_len):
        z = sigmoid(xw_z[:, t, :] + h @ layer.u_z)
        r = sigmoid(xw_r[:, t, :] + h @ layer.u_r)
        rh = r * h
        g = np.tanh(xw_h[:, t, :] + rh @ layer.u_h)
        steps.append((h, z, r, rh, g))
        h = (1.0 - z) * h + z * g
        hs[:, t, :] = h
    return hs, (seq, steps)


def _gru_stack_forward(x, params: ModelParams, train: bool,
                       rng: Optional[np.random.Generator]):
    rate = params.config.dropout if train else 0.0
    h1, cache1 = _gru_layer_forward(x, params.gru[0])
    mask = _dropout_mask(rng, h1.shape, rate, x.dtype) if train else None
    h1d = _apply_mask(h1, mask)
    h2, cache2 = _gru_layer_forward(h1d, params.gru[1])
    return h2, (cache1, cache2, mask), x


def _mha_forward(h_seq, attn: AttentionParams):
    b, t_len, dm = h_seq.shape
    nh = attn.n_heads
    dk = dm // nh
    q = _flat_gemm(h_seq, attn.w_q)
    k = _flat_gemm(h_seq, attn.w_k)
    v = _flat_gemm(h_seq, attn.w_v)
    qh = q.reshape(b, t_len, nh, dk).transpose(0, 2, 1, 3)
    kh = k.reshape(b, t_len, nh, dk).transpose(0, 2, 1, 3)
    vh = v.reshape(b, t_len, nh, dk).transpose(0, 2, 1, 3)
    scores = qh @ kh.transpose(0, 1, 3, 2) / math.sqrt(dk)
    a = softmax_last(scores)
    oh = a @ vh
    o = oh.transpose(0, 2, 1, 3).reshape(b, t_len, dm)
    out = _flat_gemm(o, attn.w_o)
    return out, {"h": h_seq, "qh": qh, "kh": kh, "vh": vh, "a": a, "o": o, "dk": dk}


def _encoder_forward(h_seq, attn: AttentionParams, rate: float,
                     rng: Optional[np.random.Generator]):
    attn_out, mha_cache = _mha_forward(h_seq, attn)
    m_attn = _dropout_mask(rng, attn_out.shape, rate, h_seq.dtype)
    r1 = h_seq + _apply_mask(attn_out, m_attn)
    n1, xhat1, istd1 = _layer_norm(r1, attn.ln1_gain, attn.ln1_bias)
    u = _flat_gemm(n1, attn.w_ff1) + attn.b_ff1
    fr = np.maximum(u, 0.0)
    f_out = _flat_gemm(fr, attn.w_ff2) + attn.b_ff2
    m_ffn = _dropout_mask(rng, f_out.shape, rate, h_seq.dtype)
    r2 = n1 + _apply_mask(f_out, m_ffn)
    n2, xhat2, istd2 = _layer_norm(r2, attn.ln2_gain, attn.ln2_bias)
    cache = {"mha": mha_cache, "m_attn": m_attn, "m_ffn": m_ffn,
             "xhat1": xhat1, "istd1": istd1, "xhat2": xhat2, "istd2": istd2,
             "n1": n1, "u": u, "fr": fr}
    return n2, cache


def forward_batch(x: np.ndarray, params: ModelParams, mode: str = "infer",
                  rng: Optional[np.random.Generator] = None) -> tuple[np.ndarray, dict]:
    """Probabilities of crosswalk B for a batch of windows (B, T, d_in).

    Returns (p of shape (B,), cache for backward). Train mode needs a
    Generator for the dropout masks; infer mode runs mask-free.
    """
    if params.layout_hash != LAYOUT_HASH:
        raise LayoutMismatchError(
            f"weights built for layout {params.layout_hash}, code has {LAYOUT_HASH}")
    dtype = params.head.w1.dtype
    x = np.asarray(x).astype(dtype, copy=False)
    if x.ndim != 3 or x.shape[2] != params.config.d_in:
        raise ModelError(f"expected (B, T, {params.config.d_in}) input, got {x.shape}")
    train = mode == "train"
    if train and rng is None:
        raise ModelError("train-mode forward needs a dropout Generator")
    rate = params.config.dropout if train else 0.0

    h2, gru_cache, x_in = _gru_stack_forward(x, params, train, rng)
    enc, enc_cache = _encoder_forward(h2, params.attn, rate, rng if train else None)

    if params.config.pooling == "mean":
        pooled = enc.mean(axis=1)
    else:
        pooled = enc[:, -1, :]
    u1 = pooled @ params.head.w1 + params.head.b1
    a1 = np.maximum(u1, 0.0)
    m_fc = _dropout_mask(rng if train else None, a1.shape, rate, x.dtype)
    a1d = _apply_mask(a1, m_fc)
    logit = (a1d @ params.head.w2 + params.head.b2).reshape(-1)
    p = sigmoid(logit)
    if not np.all(np.isfinite(p)):
        raise ModelError("non-finite prediction")
    cache = {"x": x_in, "gru": gru_cache, "h2": h2, "enc": enc, "enc_cache": enc_cache,
             "pooled": pooled, "u1": u1, "a1d": a1d, "m_fc": m_fc,
             "logit": logit, "p": p, "mode": mode}
    return p, cache


def forward(window: FeatureWindow, params: ModelParams, mode: str = "infer",
            rng: Optional[np.random.Generator] = None) -> tuple[Prediction, dict]:
    p, cache = forward_batch(window.matrix[None], params, mode, rng)
    return Prediction(window.track_id, float(p[0]), window.end_frame_idx), cache


def bce_loss(p: np.ndarray, y: np.ndarray) -> float:
    """Mean binary cross-entropy; clamped away from exact 0/1 for the log."""
    eps = 1e-12
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)
    return float(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).mean())


def bce_from_logits(logits: np.ndarray, y: np.ndarray) -> float:
    """Mean BCE computed from pre-sigmoid logits; exact for saturated outputs."""
    l = np.asarray(logits, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return float((np.maximum(l, 0.0) - l * y + np.log1p(np.exp(-np.abs(l)))).mean())


# --- backward -----------------------------------------------------------------


def _zero_grads(params: ModelParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(t) for name, t in params.named_tensors()}


def _gru_layer_backward(d_hs, layer_cache, layer: GruLayerParams, grads, prefix: str):
    seq, steps = layer_cache
    b, t_len, dm = d_hs.shape
    # pre-activation deltas are collected per step, then every weight gradient
    # and the input gradient reduce to one GEMM over the flattened batch*time
    da_z = np.empty((b, t_len, dm), dtype=d_hs.dtype)
    da_r = np.empty((b, t_len, dm), dtype=d_hs.dtype)
    da_h = np.empty((b, t_len, dm), dtype=d_hs.dtype)
    h_prevs = np.empty((b, t_len, dm), dtype=d_hs.dtype)
    rhs = np.empty((b, t_len, dm), dtype=d_hs.dtype)
    dh_next = np.zeros((b, dm), dtype=d_hs.dtype)
    for t in reversed(range(t_len)):
        h_prev, z, r, rh, g = steps[t]
        dh = d_hs[:, t, :] + dh_next
        dg = dh * z
        ah = dg * (1.0 - g * g)
        drh = ah @ layer.u_h.T
        ar = (drh * h_prev) * r * (1.0 - r)
        az = (dh * (g - h_prev)) * z * (1.0 - z)
        dh_next = (dh * (1.0 - z) + drh * r
                   + ar @ layer.u_r.T + az @ layer.u_z.T)
        da_z[:, t, :] = az
        da_r[:, t, :] = ar
        da_h[:, t, :] = ah
        h_prevs[:, t, :] = h_prev
        rhs[:, t, :] = rh
    grads[prefix + ".w_z"] += _outer_grad(seq, da_z)
    grads[prefix + ".w_r"] += _outer_grad(seq, da_r)
    grads[prefix + ".w_h"] += _outer_grad(seq, da_h)
    grads[prefix + ".u_z"] += _outer_grad(h_prevs, da_z)
    grads[prefix + ".u_r"] += _outer_grad(h_prevs, da_r)
    grads[prefix + ".u_h"] += _outer_grad(rhs, da_h)
    grads[prefix + ".b_z"] += da_z.sum(axis=(0, 1))
    grads[prefix + ".b_r"] += da_r.sum(axis=(0, 1))
    grads[prefix + ".b_h"] += da_h.sum(axis=(0, 1))
    return (_flat_gemm(da_z, layer.w_z.T) + _flat_gemm(da_r, layer.w_r.T)
            + _flat_gemm(da_h, layer.w_h.T))


def _mha_backward(d_out, cache, attn: AttentionParams, grads):
    h_seq, qh, kh, vh, a, o = (cache["h"], cache["qh"], cache["kh"],
                               cache["vh"], cache["a"], cache["o"])
    b, t_len, dm = h_seq.shape
    nh = attn.n_heads
    dk = cache["dk"]
    scale = 1.0 / math.sqrt(dk)

    grads["attn.w_o"] += _outer_grad(o, d_out)
    d_o = _flat_gemm(d_out, attn.w_o.T)
    d_oh = d_o.reshape(b, t_len, nh, dk).transpose(0, 2, 1, 3)
    d_a = d_oh @ vh.transpose(0, 1, 3, 2)
    d_vh = a.transpose(0, 1, 3, 2) @ d_oh
    d_scores = a * (d_a - (d_a * a).sum(axis=-1, keepdims=True))
    d_qh = (d_scores @ kh) * scale
    d_kh = (d_scores.transpose(0, 1, 3, 2) @ qh) * scale

    d_q = np.ascontiguousarray(d_qh.transpose(0, 2, 1, 3)).reshape(b, t_len, dm)
    d_k = np.ascontiguousarray(d_kh.transpose(0, 2, 1, 3)).reshape(b, t_len, dm)
    d_v = np.ascontiguousarray(d_vh.transpose(0, 2, 1, 3)).reshape(b, t_len, dm)
    grads["attn.w_q"] += _outer_grad(h_seq, d_q)
    grads["attn.w_k"] += _outer_grad(h_seq, d_k)
    grads["attn.w_v"] += _outer_grad(h_seq, d_v)
    return (_flat_gemm(d_q, attn.w_q.T) + _flat_gemm(d_k, attn.w_k.T)
            + _flat_gemm(d_v, attn.w_v.T))


def backward_batch(cache: dict, y: np.ndarray, params: ModelParams
                   ) -> dict[str, np.ndarray]:
    """Exact gradients of the mean BCE loss for every parameter tensor."""
    if cache["mode"] != "train":
        raise ModelError("backward needs a train-mode forward cache")
    grads = _zero_grads(params)
    p = cache["p"]
    b = p.shape[0]
    y = np.asarray(y, dtype=p.dtype).reshape(b)

    d_logit = (p - y) / b                                  # BCE through sigmoid
    a1d, u1, pooled = cache["a1d"], cache["u1"], cache["pooled"]
    grads["head.w2"] += a1d.T @ d_logit[:, None]
    grads["head.b2"] += d_logit.sum(keepdims=True)
    d_a1 = _apply_mask(d_logit[:, None] @ params.head.w2.T, cache["m_fc"])
    d_u1 = d_a1 * (u1 > 0)
    grads["head.w1"] += pooled.T @ d_u1
    grads["head.b1"] += d_u1.sum(axis=0)
    d_pooled = d_u1 @ params.head.w1.T

    enc = cache["enc"]
    t_len = enc.shape[1]
    d_enc = np.zeros_like(enc)
    if params.config.pooling == "mean":
        d_enc += d_pooled[:, None, :] / t_len
    else:
        d_enc[:, -1, :] = d_pooled

    ec = cache["enc_cache"]
    attn = params.attn
    d_r2, dg2, db2 = _layer_norm_backward(d_enc, ec["xhat2"], ec["istd2"], attn.ln2_gain)
    grads["attn.ln2_gain"] += dg2
    grads["attn.ln2_bias"] += db2
    d_n1 = d_r2.copy()
    d_f_out = _apply_mask(d_r2, ec["m_ffn"])
    grads["attn.w_ff2"] += _outer_grad(ec["fr"], d_f_out)
    grads["attn.b_ff2"] += d_f_out.sum(axis=(0, 1))
    d_fr = _flat_gemm(d_f_out, attn.w_ff2.T)
    d_u = d_fr * (ec["u"] > 0)
    grads["attn.w_ff1"] += _outer_grad(ec["n1"], d_u)
    grads["attn.b_ff1"] += d_u.sum(axis=(0, 1))
    d_n1 += _flat_gemm(d_u, attn.w_ff1.T)

    d_r1, dg1, db1 = _layer_norm_backward(d_n1, ec["xhat1"], ec["istd1"], attn.ln1_gain)
    grads["attn.ln1_gain"] += dg1
    grads["attn.ln1_bias"] += db1
    d_h2 = d_r1.copy()
    d_attn_out = _apply_mask(d_r1, ec["m_attn"])
    d_h2 += _mha_backward(d_attn_out, ec["mha"], attn, grads)

    cache1, cache2, m_gru = cache["gru"]
    d_h1d = _gru_layer_backward(d_h2, cache2, params.gru[1], grads, "gru1")
    d_h1 = _apply_mask(d_h1d, m_gru)
    _gru_layer_backward(d_h1, cache1, params.gru[0], grads, "gru0")
    return grads


def backward(cache: dict, y: int, params: ModelParams) -> dict[str, np.ndarray]:
    """Single-window convenience wrapper around backward_batch."""
    return backward_batch(cache, np.array([float(y)]), params)


# --- serialization ------------------------------------------------------------


def params_to_json_bytes(params: ModelParams) -> bytes:
    dtype = next(params.named_tensors())[1].dtype
    obj = {
        "version": params.version,
        "layout_hash": params.layout_hash,
        "config": {
            "d_in": params.config.d_in,
            "d_h": params.config.d_h,
            "n_heads": params.config.n_heads,
            "d_ff": params.config.d_ff,
            "pooling": params.config.pooling,
            "dropout": params.config.dropout,
            "dtype": str(np.dtype(dtype)),
        },
        "tensors": {
            name: {"shape": list(t.shape), "data": t.astype(np.float64).ravel().tolist()}
            for name, t in params.named_tensors()
        },
    }
    return (json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n").encode()


def save_params(params: ModelParams, path: str | Path) -> None:
    Path(path).write_bytes(params_to_json_bytes(params))


def load_params(path: str | Path) -> ModelParams:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if obj.get("version") != WEIGHT_FILE_VERSION:
        raise ModelError(f"unsupported weight file version {obj.get('version')}")
    cfg = obj["config"]
    config = ModelConfig(d_in=cfg["d_in"], d_h=cfg["d_h"], n_heads=cfg["n_heads"],
                         d_ff=cfg["d_ff"], dropout=cfg["dropout"],
                         pooling=cfg["pooling"])
    dtype = np.dtype(cfg.get("dtype", "float64"))
    params = init_params(config, seed=0, dtype=dtype)
    params.layout_hash = obj["layout_hash"]
    expected = {name for name, _ in params.named_tensors()}
    found = set(obj["tensors"])
    if expected != found:
        raise ModelError(f"weight file tensor mismatch: missing {expected - found}, "
                         f"unexpected {found - expected}")
    for name, entry in obj["tensors"].items():
        target = params.get_tensor(name)
        arr = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        if arr.shape != target.shape:
            raise ModelError(f"tensor {name} has shape {arr.shape}, "
                             f"expected {target.shape}")
        target[...] = arr.astype(dtype)
    return params
