"""Spatiotemporal attention encoder/predictor for skeleton sequences.

Hidden states are laid out as (batch, frames, joints, channels). Temporal
attention mixes frames independently per joint; spatial attention mixes
joints independently per frame. Every attention sublayer is pre-normalised
and residual. The past encoder (PME) stacks ST blocks; the future predictor
(FMP) stacks ST blocks each followed by a block that pulls in encoded past
features (cross-attention by default, or add/concat fusion).
"""
from __future__ import annotations

import math
from collections import Counter, OrderedDict
from contextlib import contextmanager
from dataclasses import asdict, dataclass

import numpy as np

from .diffcore import (
    ParamGroup,
    Tensor,
    broadcast_to,
    concat,
    layer_normalize,
    softmax,
)
from .errors import ConfigError, ShapeError

FUSIONS = ("cross_attention", "add", "concat")
LAYOUTS = ("sequential", "parallel")
PMG_QKV = ("shared", "separate")


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 128
    heads: int = 8
    head_dim: int = 32
    pme_layers: int = 3
    fmp_layers: int = 3
    past_frames: int = 10
    future_frames: int = 25
    joints: int = 22
    coords: int = 3
    fusion: str = "cross_attention"
    layout: str = "sequential"
    pmg_qkv: str = "shared"

    def __post_init__(self):
        for key in ("channels", "heads", "head_dim", "pme_layers", "fmp_layers",
                    "past_frames", "future_frames", "joints", "coords"):
            if int(getattr(self, key)) < 1:
                raise ConfigError(f"model.{key} must be >= 1")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"model.fusion must be one of {FUSIONS}")
        if self.layout not in LAYOUTS:
            raise ConfigError(f"model.layout must be one of {LAYOUTS}")
        if self.pmg_qkv not in PMG_QKV:
            raise ConfigError(f"model.pmg_qkv must be one of {PMG_QKV}")

    @property
    def inner(self) -> int:
        return self.heads * self.head_dim

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: ModelConfig) -> OrderedDict:
    """name -> (shape, kind) for every parameter, in canonical order."""
    C, I, K, J = cfg.channels, cfg.inner, cfg.coords, cfg.joints
    spec: OrderedDict = OrderedDict()

    def embedder(prefix, frames):
        spec[f"{prefix}.W"] = ((K, C), "weight")
        spec[f"{prefix}.b"] = ((C,), "bias")
        spec[f"{prefix}.P_t"] = ((frames, C), "pos")
        spec[f"{prefix}.P_s"] = ((J, C), "pos")

    def norm(prefix, tag="ln"):
        spec[f"{prefix}.{tag}_g"] = ((C,), "gain")
        spec[f"{prefix}.{tag}_b"] = ((C,), "bias")

    def qkv(prefix):
        for m in "qkv":
            spec[f"{prefix}.w{m}"] = ((C, I), "weight")
            spec[f"{prefix}.b{m}"] = ((I,), "bias")

    def out(prefix):
        spec[f"{prefix}.wo"] = ((I, C), "weight")
        spec[f"{prefix}.bo"] = ((C,), "bias")

    def self_attn(prefix):
        norm(prefix)
        qkv(prefix)
        out(prefix)

    embedder("past_emb", cfg.past_frames)
    embedder("future_emb", cfg.future_frames)
    for i in range(cfg.pme_layers):
        self_attn(f"pme.{i}.t")
        self_attn(f"pme.{i}.s")
    for i in range(cfg.fmp_layers):
        self_attn(f"fmp.{i}.t")
        self_attn(f"fmp.{i}.s")
        if cfg.fusion == "cross_attention":
            for axis in ("ct", "cs"):
                p = f"fmp.{i}.{axis}"
                norm(p)
                norm(p, "ctx")
                if cfg.pmg_qkv == "separate":
                    qkv(p)
                out(p)
        else:
            width = C if cfg.fusion == "add" else 2 * C
            spec[f"fmp.{i}.fuse.w"] = ((width, C), "weight")
            spec[f"fmp.{i}.fuse.b"] = ((C,), "bias")
    spec["head.W"] = ((C, K), "weight")
    spec["head.b"] = ((K,), "bias")
    return spec


def parameter_count(cfg: ModelConfig) -> int:
    return int(sum(np.prod(shape) for shape, _ in param_shapes(cfg).values()))


class ModelParams:
    """Named parameters for one model plus forward-pass instrumentation."""

    def __init__(self, config: ModelConfig, group: ParamGroup):
        self.config = config
        self.group = group
        self.counters: Counter = Counter()
        self.recorder: list | None = None

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> "ModelParams":
        """Glorot-uniform weights, zero biases, unit gains, N(0, 0.02) positional encodings."""
        rng = np.random.default_rng(seed)
        group = ParamGroup()
        for name, (shape, kind) in param_shapes(config).items():
            if kind == "weight":
                limit = math.sqrt(6.0 / (shape[0] + shape[1]))
                value = rng.uniform(-limit, limit, size=shape)
            elif kind == "pos":
                value = rng.normal(0.0, 0.02, size=shape)
            elif kind == "gain":
                value = np.ones(shape)
            else:
                value = np.zeros(shape)
            group.add(name, Tensor(value, requires_grad=True, dtype=dtype))
        return cls(config, group)

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: dict, dtype=np.float32) -> "ModelParams":
        shapes = param_shapes(config)
        missing = [n for n in shapes if n not in arrays]
        if missing:
            raise ShapeError(f"missing parameters: {missing[:5]}")
        group = ParamGroup()
        for name, (shape, _) in shapes.items():
            arr = np.asarray(arrays[name])
            if arr.shape != shape:
                raise ShapeError(f"parameter {name!r} has shape {arr.shape}, expected {shape}")
            group.add(name, Tensor(arr, requires_grad=True, dtype=dtype))
        return cls(config, group)

    def __getitem__(self, name: str) -> Tensor:
        return self.group[name]

    def __contains__(self, name: str) -> bool:
        return name in self.group

    @property
    def dtype(self):
        return next(iter(self.group.values())).dtype

    def numel(self) -> int:
        return self.group.numel()

    def copy(self) -> "ModelParams":
        return ModelParams.from_arrays(self.config, self.group.state_dict(), self.dtype)

    def zero_grad(self) -> None:
        self.group.zero_grad()


@contextmanager
def record_attention(params: ModelParams):
    """Collect (sublayer name, attention weights) for every attention call inside the block."""
    prev = params.recorder
    params.recorder = []
    try:
        yield params.recorder
    finally:
        params.recorder = prev


# ---------------------------------------------------------------------------
# building blocks

def _as_input(x, params: ModelParams) -> tuple:
    """Wrap raw arrays as constant tensors; add a batch axis to 3-D inputs."""
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=params.dtype)
    if t.ndim == 3:
        return t.reshape((1,) + t.shape), True
    if t.ndim != 4:
        raise ShapeError(f"expected (frames, joints, dims) or (batch, frames, joints, dims), got {t.shape}")
    return t, False


def _squeeze(t: Tensor, squeeze: bool) -> Tensor:
    return t.reshape(t.shape[1:]) if squeeze else t


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Apply x @ w + b on the last axis, flattening leading axes into one GEMM."""
    lead = x.shape[:-1]
    y = x.reshape(-1, x.shape[-1]) @ w + b
    return y.reshape(lead + (w.shape[1],))


def embed_joints(x, params: ModelParams, which: str = "past") -> Tensor:
    """x W + b + temporal encoding (per frame) + spatial encoding (per joint)."""
    prefix = f"{which}_emb"
    x, squeeze = _as_input(x, params)
    pt, ps = params[f"{prefix}.P_t"], params[f"{prefix}.P_s"]
    _, frames, joints, _ = x.shape
    if frames != pt.shape[0]:
        raise ShapeError(f"{which} embedder expects {pt.shape[0]} frames, got {frames}")
    if joints != ps.shape[0]:
        raise ShapeError(f"{which} embedder expects {ps.shape[0]} joints, got {joints}")
    h = linear(x, params[f"{prefix}.W"], params[f"{prefix}.b"])
    h = h + pt.reshape(frames, 1, pt.shape[1]) + ps
    return _squeeze(h, squeeze)


# (B, F, J, H, D) -> layout with the attended axis second to last
_PERM = {"temporal": (0, 2, 3, 1, 4), "spatial": (0, 1, 3, 2, 4)}
_UNPERM = {"temporal": (0, 3, 1, 2, 4), "spatial": (0, 1, 3, 2, 4)}


def _attend(q: Tensor, k: Tensor, v: Tensor, axis: str, cfg: ModelConfig, params, tag) -> Tensor:
    B, F, J, _ = q.shape
    H, D = cfg.heads, cfg.head_dim
    perm = _PERM[axis]
    qh = q.reshape(B, F, J, H, D).transpose(perm)
    kh = k.reshape(k.shape[:3] + (H, D)).transpose(perm)
    vh = v.reshape(v.shape[:3] + (H, D)).transpose(perm)
    scores = (qh @ kh.swapaxes(-1, -2)) * (1.0 / math.sqrt(D))
    weights = softmax(scores, axis=-1)
    if params.recorder is not None:
        params.recorder.append((tag, weights.data.copy()))
    z = (weights @ vh).transpose(_UNPERM[axis])
    return z.reshape(B, F, J, H * D)


def _sublayer(h: Tensor, context: Tensor | None, params: ModelParams, prefix: str,
              axis: str, qkv_prefix: str | None = None) -> Tensor:
    cfg = params.config
    C = cfg.channels
    if h.shape[-1] != C:
        raise ShapeError(f"{prefix}: hidden has {h.shape[-1]} channels, expected {C}")
    qp = qkv_prefix or prefix
    x = layer_normalize(h, -1, params[f"{prefix}.ln_g"], params[f"{prefix}.ln_b"])
    if context is None:
        src = x
    else:
        if context.shape[-1] != C:
            raise ShapeError(f"{prefix}: context has {context.shape[-1]} channels, expected {C}")
        if context.shape[0] != h.shape[0]:
            raise ShapeError(f"{prefix}: context batch {context.shape[0]} != hidden batch {h.shape[0]}")
        if axis == "temporal" and context.shape[2] != h.shape[2]:
            raise ShapeError(f"{prefix}: context has {context.shape[2]} joints, hidden has {h.shape[2]}")
        if axis == "spatial":
            if context.shape[2] != h.shape[2]:
                raise ShapeError(f"{prefix}: joint-count mismatch, hidden {h.shape[2]} vs context {context.shape[2]}")
            if context.shape[1] != h.shape[1]:
                context = context.mean(axis=1, keepdims=True)
        g_name = f"{prefix}.ctx_g" if f"{prefix}.ctx_g" in params else f"{prefix}.ln_g"
        b_name = f"{prefix}.ctx_b" if f"{prefix}.ctx_b" in params else f"{prefix}.ln_b"
        src = layer_normalize(context, -1, params[g_name], params[b_name])
    q = linear(x, params[f"{qp}.wq"], params[f"{qp}.bq"])
    k = linear(src, params[f"{qp}.wk"], params[f"{qp}.bk"])
    v = linear(src, params[f"{qp}.wv"], params[f"{qp}.bv"])
    z = _attend(q, k, v, axis, cfg, params, prefix)
    return h + linear(z, params[f"{prefix}.wo"], params[f"{prefix}.bo"])


def temporal_attention(h, context, params: ModelParams, prefix: str, qkv_prefix: str | None = None) -> Tensor:
    """Multi-head attention across frames, per joint; cross mode when ``context`` is given."""
    h, squeeze = _as_input(h, params)
    if context is not None:
        context, _ = _as_input(context, params)
    return _squeeze(_sublayer(h, context, params, prefix, "temporal", qkv_prefix), squeeze)


def spatial_attention(h, context, params: ModelParams, prefix: str, qkv_prefix: str | None = None) -> Tensor:
    """Multi-head attention across joints, per frame.

    In cross mode a context with a different frame count is mean-pooled over
    its frames and serves the same keys/values to every query frame.
    """
    h, squeeze = _as_input(h, params)
    if context is not None:
        context, _ = _as_input(context, params)
    return _squeeze(_sublayer(h, context, params, prefix, "spatial", qkv_prefix), squeeze)


def st_block(h, params: ModelParams, prefix: str) -> Tensor:
    h, squeeze = _as_input(h, params)
    if params.config.layout == "parallel":
        out = (_sublayer(h, None, params, f"{prefix}.t", "temporal")
               + _sublayer(h, None, params, f"{prefix}.s", "spatial")) * 0.5
    else:
        out = _sublayer(h, None, params, f"{prefix}.t", "temporal")
        out = _sublayer(out, None, params, f"{prefix}.s", "spatial")
    return _squeeze(out, squeeze)


def pmg_block(h, h_past, params: ModelParams, index: int) -> Tensor:
    """Inject encoded past features into the future-side hidden state of FMP block ``index``."""
    cfg = params.config
    h, squeeze = _as_input(h, params)
    h_past, _ = _as_input(h_past, params)
    if h_past.shape[-1] != cfg.channels:
        raise ShapeError(f"past features have {h_past.shape[-1]} channels, expected {cfg.channels}")
    prefix = f"fmp.{index}"
    if cfg.fusion == "cross_attention":
        shared = cfg.pmg_qkv == "shared"
        out = _sublayer(h, h_past, params, f"{prefix}.ct", "temporal",
                        f"{prefix}.t" if shared else None)
        out = _sublayer(out, h_past, params, f"{prefix}.cs", "spatial",
                        f"{prefix}.s" if shared else None)
    else:
        if h_past.shape[2] != h.shape[2]:
            raise ShapeError(f"joint-count mismatch, hidden {h.shape[2]} vs past {h_past.shape[2]}")
        pooled = h_past.mean(axis=1, keepdims=True)
        w, b = params[f"{prefix}.fuse.w"], params[f"{prefix}.fuse.b"]
        if cfg.fusion == "add":
            out = h + linear(pooled, w, b)
        else:
            tiled = broadcast_to(pooled, h.shape)
            out = h + linear(concat([h, tiled], axis=-1), w, b)
    return _squeeze(out, squeeze)


def pme_forward(x_emb, params: ModelParams, layers: int | None = None) -> Tensor:
    """Past Motion Encoder: ``layers`` (default config.pme_layers) ST blocks."""
    h, squeeze = _as_input(x_emb, params)
    params.counters["pme_forward"] += 1
    params.counters["pme_samples"] += h.shape[0]
    n = params.config.pme_layers if layers is None else layers
    for i in range(n):
        h = st_block(h, params, f"pme.{i}")
    return _squeeze(h, squeeze)


def fmp_forward(h_future, h_past, params: ModelParams) -> Tensor:
    """Future Motion Predictor: per block, an ST block then a past-guided block."""
    h, squeeze = _as_input(h_future, params)
    h_past, _ = _as_input(h_past, params)
    params.counters["fmp_forward"] += 1
    for i in range(params.config.fmp_layers):
        h = st_block(h, params, f"fmp.{i}")
        h = pmg_block(h, h_past, params, i)
    return _squeeze(h, squeeze)


def predict_head(h: Tensor, params: ModelParams) -> Tensor:
    return linear(h, params["head.W"], params["head.b"])


def encode_past(x_past, params: ModelParams) -> Tensor:
    return pme_forward(embed_joints(x_past, params, "past"), params)


def predict_future(x_past, params: ModelParams, return_features: bool = False):
    """Forecast L future frames from the observed past.

    The future branch starts from an all-zero pose sequence, so only the
    embedder bias and positional encodings seed it.
    """
    x, squeeze = _as_input(x_past, params)
    cfg = params.config
    h_past = encode_past(x, params)
    zeros = np.zeros((x.shape[0], cfg.future_frames, cfg.joints, cfg.coords), dtype=params.dtype)
    h_future = embed_joints(zeros, params, "future")
    features = fmp_forward(h_future, h_past, params)
    out = _squeeze(predict_head(features, params), squeeze)
    if return_features:
        return out, _squeeze(features, squeeze)
    return out


def reconstruct(x_masked, h_past, which: str, params: ModelParams) -> Tensor:
    """Reconstruct a full (masked) sequence; ``past`` uses PME, ``future`` uses FMP guided by ``h_past``."""
    if which == "past":
        return predict_head(pme_forward(embed_joints(x_masked, params, "past"), params), params)
    if which == "future":
        if h_past is None:
            raise ValueError("future reconstruction needs encoded past features")
        h = fmp_forward(embed_joints(x_masked, params, "future"), h_past, params)
        return predict_head(h, params)
    raise ValueError(f"which must be 'past' or 'future', got {which!r}")


def pooled_features(features: Tensor | np.ndarray) -> np.ndarray:
    """Mean over frames and joints of (B, F, J, C) features -> (B, C)."""
    data = features.data if isinstance(features, Tensor) else np.asarray(features)
    return data.mean(axis=(-3, -2))
