"""Two-stage training: masked reconstruction pretraining, then forecasting finetune."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import masking
from .diffcore import AdamState, CosineSchedule, ParamGroup, Tensor, adam_step, clip_grad_norm, cosine_lr
from .errors import (
    BadMagicError,
    ConfigError,
    CorruptFileError,
    ShapeError,
    ShapeIncompatibleError,
    TruncatedFileError,
    VersionMismatchError,
)
from .model import ModelConfig, ModelParams, encode_past, param_shapes, predict_future, reconstruct
from .motiondata import SampleWindow

PRETRAIN_MODES = ("mask", "denoise", "none")


@dataclass
class TrainConfig:
    steps: int = 3000
    batch: int = 24
    lr: float = 5e-4
    lr_min: float = 0.0
    alpha: float = 1.0
    mask_rate: float = 0.75
    mask_strategy: str = "velocity"
    mask_invert: bool = False
    pretrain_mode: str = "mask"
    noise_sigma: float = 0.05
    grad_clip: float = 0.0
    freeze_pme: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if not 0.0 <= self.mask_rate <= 1.0:
            raise ConfigError("mask rate must lie in [0, 1]")
        if self.pretrain_mode not in PRETRAIN_MODES:
            raise ConfigError(f"pretrain mode must be one of {PRETRAIN_MODES}")
        if self.mask_strategy not in masking.STRATEGIES:
            raise ConfigError(f"mask strategy must be one of {masking.STRATEGIES}")
        if self.steps < 0 or self.batch < 1:
            raise ConfigError("steps must be >= 0 and batch >= 1")


# ---------------------------------------------------------------------------
# losses

def _as_pair(a, b) -> tuple:
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a), dtype=np.asarray(a).dtype if np.asarray(a).dtype.kind == "f" else None)
    b = b if isinstance(b, Tensor) else Tensor(np.asarray(b), dtype=a.dtype)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mean_squared_joint_error(pred, gt) -> Tensor:
    """Mean over (batch,) frames and joints of the squared Euclidean joint error."""
    pred, gt = _as_pair(pred, gt)
    d = pred - gt
    return (d * d).sum(axis=-1).mean()


def pretrain_loss(rec_past, gt_past, rec_future, gt_future, alpha: float = 1.0) -> Tensor:
    return mean_squared_joint_error(rec_past, gt_past) + mean_squared_joint_error(rec_future, gt_future) * alpha


def finetune_loss(pred, gt) -> Tensor:
    return mean_squared_joint_error(pred, gt)


# ---------------------------------------------------------------------------
# optimisation plumbing

PME_PREFIXES = ("past_emb.", "pme.")


class Optimizer:
    """Adam over a parameter group with a cosine schedule keyed on the update count."""

    def __init__(self, params: ModelParams, schedule: CosineSchedule, grad_clip: float = 0.0,
                 freeze_pme: bool = False, state: AdamState | None = None):
        names = [n for n in params.group if not (freeze_pme and n.startswith(PME_PREFIXES))]
        self.group = ParamGroup([(n, params[n]) for n in names])
        self.schedule = schedule
        self.grad_clip = grad_clip
        self.state = state or AdamState()
        self.last_grad_norm = 0.0

    @property
    def lr(self) -> float:
        return cosine_lr(self.schedule, min(self.state.step, self.schedule.total_steps))

    def step(self) -> float:
        lr = self.lr
        if self.grad_clip > 0:
            self.last_grad_norm = clip_grad_norm(self.group, self.grad_clip)
        adam_step(self.group, self.state, lr)
        return lr


def make_optimizer(params: ModelParams, cfg: TrainConfig, steps: int | None = None,
                   freeze_pme: bool | None = None) -> Optimizer:
    total = max(int(cfg.steps if steps is None else steps), 1)
    schedule = CosineSchedule(total, cfg.lr, cfg.lr_min)
    freeze = cfg.freeze_pme if freeze_pme is None else freeze_pme
    return Optimizer(params, schedule, cfg.grad_clip, freeze)


def _batch_arrays(batch, dtype) -> tuple:
    if isinstance(batch, tuple):
        past, future = batch
    else:
        past = np.stack([w.past for w in batch])
        future = np.stack([w.future for w in batch])
    return np.asarray(past, dtype=dtype), np.asarray(future, dtype=dtype)


def _sample_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def corrupt_batch(x: np.ndarray, cfg: TrainConfig, step: int, stream: int) -> np.ndarray:
    """Mask (or noise) each sequence of a (B, F, J, K) batch independently."""
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        seed = _sample_seed(cfg.seed, step, i, stream)
        if cfg.pretrain_mode == "denoise":
            out[i] = masking.add_noise(x[i], cfg.noise_sigma, seed)
        else:
            out[i], _ = masking.mask_sequence(x[i], cfg.mask_rate, cfg.mask_strategy, seed, cfg.mask_invert)
    return out


def pretrain_step(batch, params: ModelParams, optimizer: Optimizer, cfg: TrainConfig) -> float:
    """One pretraining update; returns the batch loss (0.0 and no update when mode is ``none``).

    1. hide part of the past and reconstruct it through PME + head;
    2. encode the complete past with PME;
    3. hide part of the future and reconstruct it through FMP guided by step 2.
    """
    if cfg.pretrain_mode == "none":
        return 0.0
    past, future = _batch_arrays(batch, params.dtype)
    step = optimizer.state.step
    past_in = corrupt_batch(past, cfg, step, 0)
    future_in = corrupt_batch(future, cfg, step, 1)
    rec_past = reconstruct(past_in, None, "past", params)
    h_past = encode_past(past, params)
    rec_future = reconstruct(future_in, h_past, "future", params)
    loss = pretrain_loss(rec_past, past, rec_future, future, cfg.alpha)
    params.zero_grad()
    loss.backward()
    optimizer.step()
    return loss.item()


def finetune_step(batch, params: ModelParams, optimizer: Optimizer, cfg: TrainConfig) -> float:
    past, future = _batch_arrays(batch, params.dtype)
    loss = finetune_loss(predict_future(past, params), future)
    params.zero_grad()
    loss.backward()
    optimizer.step()
    return loss.item()


def batch_indices(n: int, batch: int, seed: int):
    """Endless stream of index batches; each epoch is a fresh seeded permutation."""
    rng = np.random.default_rng(seed)
    batch = min(batch, n)
    while True:
        perm = rng.permutation(n)
        for start in range(0, n, batch):
            yield perm[start:start + batch]


def run_stage(stage: str, params: ModelParams, past: np.ndarray, future: np.ndarray, cfg: TrainConfig,
              optimizer: Optimizer | None = None, log: Callable | None = None,
              callback: Callable | None = None) -> tuple:
    """Train for ``cfg.steps`` updates. Returns (per-step losses, optimizer).

    ``log(step, lr, loss)`` is called after every update; ``callback(step)``
    may return True to stop early.
    """
    if stage not in ("pretrain", "finetune"):
        raise ValueError(f"unknown stage {stage!r}")
    if len(past) != len(future) or len(past) == 0:
        raise ShapeError("need the same non-zero number of past and future windows")
    step_fn = pretrain_step if stage == "pretrain" else finetune_step
    if stage == "pretrain" and cfg.pretrain_mode == "none":
        return [], optimizer
    optimizer = optimizer or make_optimizer(params, cfg, freeze_pme=cfg.freeze_pme if stage == "finetune" else False)
    past = np.asarray(past, dtype=params.dtype)
    future = np.asarray(future, dtype=params.dtype)
    batches = batch_indices(len(past), cfg.batch, _sample_seed(cfg.seed, 7 if stage == "pretrain" else 11))
    losses = []
    for _ in range(cfg.steps):
        idx = next(batches)
        lr = optimizer.lr
        loss = step_fn((past[idx], future[idx]), params, optimizer, cfg)
        losses.append(loss)
        if log is not None:
            log(optimizer.state.step, lr, loss)
        if callback is not None and callback(optimizer.state.step):
            break
    return losses, optimizer


def windows_to_arrays(windows: Sequence[SampleWindow]) -> tuple:
    return np.stack([w.past for w in windows]), np.stack([w.future for w in windows])


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"MCKP"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    params: ModelParams
    step: int = 0
    seed: int = 0
    config: dict = field(default_factory=dict)
    adam: AdamState | None = None


def _encode_tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    out = [struct.pack("<H", len(raw)), raw, struct.pack("<B", arr.ndim)]
    out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    tensors = [(n, t.data) for n, t in ckpt.params.group.items()]
    adam_meta = None
    if ckpt.adam is not None:
        a = ckpt.adam
        for n in ckpt.params.group:
            if n in a.m:
                tensors.append((f"adam.m/{n}", a.m[n]))
                tensors.append((f"adam.v/{n}", a.v[n]))
        adam_meta = {"step": a.step, "beta1": a.beta1, "beta2": a.beta2, "epsilon": a.epsilon}
    meta = {
        "model": ckpt.params.config.to_dict(),
        "config": ckpt.config,
        "step": int(ckpt.step),
        "seed": int(ckpt.seed),
        "adam": adam_meta,
    }
    blob = [CKPT_MAGIC, bytes([CKPT_VERSION]), struct.pack("<I", len(tensors))]
    blob.extend(_encode_tensor(n, a) for n, a in tensors)
    meta_raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob.append(struct.pack("<I", len(meta_raw)))
    blob.append(meta_raw)
    Path(path).write_bytes(b"".join(blob))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int, what: str) -> bytes:
        end = self.pos + n
        if end > len(self.raw):
            raise TruncatedFileError(
                f"{self.path}: {what} needs bytes {self.pos}..{end} but file ends at {len(self.raw)}")
        chunk = self.raw[self.pos:end]
        self.pos = end
        return chunk

    def unpack(self, fmt: str, what: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))


def load_checkpoint(path, model_config: ModelConfig | None = None) -> Checkpoint:
    """Decode an MCKP file completely before building any parameters.

    When ``model_config`` is given, every tensor must match the shapes that
    configuration implies.
    """
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}, expected {CKPT_MAGIC!r}")
    r = _Reader(raw, path)
    r.take(4, "magic")
    (version,) = r.unpack("<B", "version")
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {CKPT_VERSION}")
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for i in range(count):
        (nlen,) = r.unpack("<H", f"tensor {i} name length")
        try:
            name = r.take(nlen, f"tensor {i} name").decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptFileError(f"{path}: tensor {i} name is not valid UTF-8") from None
        (rank,) = r.unpack("<B", f"tensor {name!r} rank")
        dims = r.unpack(f"<{rank}I", f"tensor {name!r} dims")
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = r.take(4 * n, f"tensor {name!r} payload")
        if name in tensors:
            raise CorruptFileError(f"{path}: duplicate tensor {name!r}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    (mlen,) = r.unpack("<I", "metadata length")
    meta_raw = r.take(mlen, "metadata")
    if r.pos != len(raw):
        raise CorruptFileError(f"{path}: {len(raw) - r.pos} unexpected trailing bytes after offset {r.pos}")
    try:
        meta = json.loads(meta_raw.decode("utf-8"))
        stored_cfg = ModelConfig(**meta["model"])
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise CorruptFileError(f"{path}: unreadable metadata ({exc})") from None

    cfg = model_config or stored_cfg
    for name, (shape, _) in param_shapes(cfg).items():
        if name not in tensors:
            raise ShapeIncompatibleError(f"{path}: tensor {name!r} missing for the requested model")
        if tensors[name].shape != shape:
            raise ShapeIncompatibleError(
                f"{path}: tensor {name!r} has shape {tensors[name].shape}, model expects {shape}")
    params = ModelParams.from_arrays(cfg, tensors)
    adam = None
    if meta.get("adam"):
        a = meta["adam"]
        adam = AdamState(beta1=a["beta1"], beta2=a["beta2"], epsilon=a["epsilon"], step=a["step"])
        for name in params.group:
            if f"adam.m/{name}" in tensors:
                adam.m[name] = tensors[f"adam.m/{name}"]
                adam.v[name] = tensors[f"adam.v/{name}"]
    return Checkpoint(params, meta.get("step", 0), meta.get("seed", 0), meta.get("config", {}), adam)


def checkpoint_io(path, mode: str, ckpt: Checkpoint | None = None, model_config: ModelConfig | None = None):
    if mode == "save":
        if ckpt is None:
            raise ValueError("save mode needs a checkpoint")
        save_checkpoint(path, ckpt)
        return None
    if mode == "load":
        return load_checkpoint(path, model_config)
    raise ValueError(f"mode must be 'save' or 'load', got {mode!r}")


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
