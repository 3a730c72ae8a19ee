"""Run configuration: JSON document merged over defaults, validated key by key."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .masking import STRATEGIES
from .model import FUSIONS, LAYOUTS, PMG_QKV, ModelConfig
from .training import PRETRAIN_MODES, TrainConfig

DEFAULTS: dict = {
    "seed": 0,
    "out": "runs/default",
    "model": {
        "channels": 128,
        "heads": 8,
        "head_dim": 32,
        "pme_layers": 3,
        "fmp_layers": 3,
        "past_frames": 10,
        "future_frames": 25,
        "joints": 22,
        "coords": 3,
        "fusion": "cross_attention",
        "layout": "sequential",
        "pmg_qkv": "shared",
    },
    "data": {
        "fps": 25,
        "stride": 5,
        "eval_stride": 25,
        "center_on_root": True,
        "test_fraction": 0.25,
    },
    "synth": {
        "skeleton": "humanoid22",
        "classes": 4,
        "per_class": 8,
        "frames": 150,
        "fps": 50,
    },
    "mask": {
        "rate": 0.75,
        "strategy": "velocity",
        "invert": False,
    },
    "pretrain": {
        "mode": "mask",
        "steps": 3000,
        "alpha": 1.0,
        "noise_sigma": 0.05,
    },
    "finetune": {
        "steps": 3000,
        "freeze_pme": False,
    },
    "train": {
        "lr": 5e-4,
        "lr_min": 0.0,
        "batch": 24,
        "grad_clip": 0.0,
    },
    "eval": {
        "horizons_ms": [80, 160, 320, 400, 560, 1000],
        "batch": 64,
        "probe_split": 0.5,
    },
}


def _between(lo, hi, lo_open=False, hi_open=False):
    def check(v):
        return (v > lo if lo_open else v >= lo) and (v < hi if hi_open else v <= hi)
    return check


def _positive(v):
    return v > 0


def _non_negative(v):
    return v >= 0


def _one_of(options):
    return lambda v: v in options


# dotted key -> (predicate, human readable constraint)
CONSTRAINTS = {
    "seed": (_non_negative, "seed >= 0"),
    "model.channels": (_positive, "channels > 0"),
    "model.heads": (_positive, "heads > 0"),
    "model.head_dim": (_positive, "head_dim > 0"),
    "model.pme_layers": (_positive, "pme_layers > 0"),
    "model.fmp_layers": (_positive, "fmp_layers > 0"),
    "model.past_frames": (lambda v: v >= 2, "past_frames >= 2"),
    "model.future_frames": (_positive, "future_frames > 0"),
    "model.joints": (_positive, "joints > 0"),
    "model.coords": (_positive, "coords > 0"),
    "model.fusion": (_one_of(FUSIONS), f"fusion in {FUSIONS}"),
    "model.layout": (_one_of(LAYOUTS), f"layout in {LAYOUTS}"),
    "model.pmg_qkv": (_one_of(PMG_QKV), f"pmg_qkv in {PMG_QKV}"),
    "data.fps": (_positive, "fps > 0"),
    "data.stride": (_positive, "stride > 0"),
    "data.eval_stride": (_positive, "eval_stride > 0"),
    "data.test_fraction": (_between(0, 1, hi_open=True), "test_fraction ∈ [0,1)"),
    "synth.skeleton": (_one_of(("humanoid22", "humanoid10")), "skeleton in ('humanoid22', 'humanoid10')"),
    "synth.classes": (_positive, "classes > 0"),
    "synth.per_class": (_positive, "per_class > 0"),
    "synth.frames": (lambda v: v >= 2, "frames >= 2"),
    "synth.fps": (_positive, "fps > 0"),
    "mask.rate": (_between(0, 1), "rate ∈ [0,1]"),
    "mask.strategy": (_one_of(STRATEGIES), f"strategy in {STRATEGIES}"),
    "pretrain.mode": (_one_of(PRETRAIN_MODES), f"mode in {PRETRAIN_MODES}"),
    "pretrain.steps": (_non_negative, "steps >= 0"),
    "pretrain.alpha": (_non_negative, "alpha >= 0"),
    "pretrain.noise_sigma": (_non_negative, "noise_sigma >= 0"),
    "finetune.steps": (_non_negative, "steps >= 0"),
    "train.lr": (_positive, "lr > 0"),
    "train.lr_min": (_non_negative, "lr_min >= 0"),
    "train.batch": (_positive, "batch > 0"),
    "train.grad_clip": (_non_negative, "grad_clip >= 0"),
    "eval.horizons_ms": (lambda v: len(v) > 0 and all(h > 0 for h in v), "non-empty list of positive ms"),
    "eval.batch": (_positive, "batch > 0"),
    "eval.probe_split": (_between(0, 1, True, True), "probe_split ∈ (0,1)"),
}


def _type_ok(default, value) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, list):
        return isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
    return isinstance(value, type(default))


def _merge(base: dict, over: dict, path: str = "") -> dict:
    if not isinstance(over, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(over).__name__}")
    out = copy.deepcopy(base)
    for key, value in over.items():
        dotted = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"{dotted}: unknown key")
        if isinstance(base[key], dict):
            out[key] = _merge(base[key], value, dotted)
            continue
        if not _type_ok(base[key], value):
            raise ConfigError(f"{dotted}: expected {type(base[key]).__name__}, got {type(value).__name__}")
        out[key] = float(value) if isinstance(base[key], float) else copy.deepcopy(value)
    return out


def _validate(values: dict) -> None:
    for dotted, (ok, text) in CONSTRAINTS.items():
        node = values
        for part in dotted.split("."):
            node = node[part]
        if not ok(node):
            raise ConfigError(f"{dotted}: constraint violated, need {text}, got {node!r}")
    try:
        ModelConfig(**values["model"])
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from None


@dataclass
class RunConfig:
    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def seed(self) -> int:
        return self.values["seed"]

    @property
    def out(self) -> str:
        return self.values["out"]

    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.values["model"])

    def train_config(self, stage: str) -> TrainConfig:
        v = self.values
        steps = v[stage]["steps"]
        return TrainConfig(
            steps=steps,
            batch=v["train"]["batch"],
            lr=v["train"]["lr"],
            lr_min=v["train"]["lr_min"],
            alpha=v["pretrain"]["alpha"],
            mask_rate=v["mask"]["rate"],
            mask_strategy=v["mask"]["strategy"],
            mask_invert=v["mask"]["invert"],
            pretrain_mode=v["pretrain"]["mode"],
            noise_sigma=v["pretrain"]["noise_sigma"],
            grad_clip=v["train"]["grad_clip"],
            freeze_pme=v["finetune"]["freeze_pme"],
            seed=v["seed"],
        )

    def with_overrides(self, **kw) -> "RunConfig":
        """Apply top-level overrides such as seed or out; None values are ignored."""
        return config_from_dict({**self.values, **{k: v for k, v in kw.items() if v is not None}})

    def to_dict(self) -> dict:
        return copy.deepcopy(self.values)

    def to_json(self) -> str:
        return json.dumps(self.values, sort_keys=True, indent=2)


def config_from_dict(doc: dict) -> RunConfig:
    values = _merge(DEFAULTS, doc)
    _validate(values)
    return RunConfig(values)


def parse_config(path=None) -> RunConfig:
    """Load a JSON config file (or use pure defaults when ``path`` is None)."""
    if path is None:
        return config_from_dict({})
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"{p}: cannot read config ({exc.strerror or exc})") from None
    try:
        doc = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON at line {exc.lineno} column {exc.colno}") from None
    return config_from_dict(doc)
