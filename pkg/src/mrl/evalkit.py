"""MPJPE at millisecond horizons, naive baselines, linear probing and report files."""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_is_fitted

from .diffcore import no_grad
from .errors import DataError, ShapeError
from .model import ModelParams, pooled_features, predict_future
from .motiondata import SampleWindow, ms_to_frame
from .validation import check_features, check_motion_batch

BASELINES = ("zero_velocity", "const_velocity")


def mpjpe(pred, gt, frame: int) -> float:
    """Mean joint position error at 1-based future frame ``frame``."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 3:
        raise ShapeError(f"expected matching (L, J, K) arrays, got {pred.shape} and {gt.shape}")
    if not 1 <= frame <= pred.shape[0]:
        raise DataError(f"frame {frame} outside 1..{pred.shape[0]}")
    return float(np.linalg.norm(pred[frame - 1] - gt[frame - 1], axis=-1).mean())


def mpjpe_frames(pred, gt) -> np.ndarray:
    """Per-sample, per-frame errors for (B, L, J, K) batches -> (B, L)."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return np.linalg.norm(pred - gt, axis=-1).mean(axis=-1)


def baseline_predict(x_past, L: int, kind: str) -> np.ndarray:
    """Repeat the last observed pose, or extrapolate its last velocity, for L frames.

    Works on (T, J, K) and on batched (B, T, J, K) input.
    """
    x = np.asarray(x_past)
    if kind not in BASELINES:
        raise ValueError(f"kind must be one of {BASELINES}")
    if L < 1:
        raise DataError("L must be >= 1")
    last = x[..., -1:, :, :]
    steps = np.arange(1, L + 1, dtype=x.dtype if x.dtype.kind == "f" else np.float64)
    steps = steps.reshape(L, 1, 1)
    if kind == "zero_velocity":
        return np.repeat(last, L, axis=-3)
    if x.shape[-3] < 2:
        raise DataError("const_velocity needs at least 2 past frames")
    vel = last - x[..., -2:-1, :, :]
    return last + steps * vel


@dataclass
class HorizonRow:
    ms: int
    frame: int
    mpjpe: float
    zero_velocity: float
    const_velocity: float


@dataclass
class EvalReport:
    rows: list
    samples: int
    probe_accuracy: float | None = None
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        ms = [r.ms for r in self.rows]
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise DataError("horizons must be strictly increasing")

    @property
    def average(self) -> float:
        return float(np.mean([r.mpjpe for r in self.rows]))

    def baseline_average(self, kind: str) -> float:
        return float(np.mean([getattr(r, kind) for r in self.rows]))

    def to_dict(self) -> dict:
        return {
            "rows": [asdict(r) for r in self.rows],
            "average": {
                "mpjpe": self.average,
                "zero_velocity": self.baseline_average("zero_velocity"),
                "const_velocity": self.baseline_average("const_velocity"),
            },
            "samples": self.samples,
            "probe_accuracy": self.probe_accuracy,
            "config_hash": self.config_hash,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        rows = [HorizonRow(**r) for r in d["rows"]]
        return cls(rows, d["samples"], d.get("probe_accuracy"), d.get("config_hash", ""), d.get("extra", {}))


def _predictor(model) -> Callable:
    if isinstance(model, ModelParams):
        def run(past):
            with no_grad():
                return predict_future(past, model).data
        return run
    if callable(model):
        return model
    raise TypeError("model must be ModelParams or a callable mapping past batches to forecasts")


def evaluate(model, windows: Sequence[SampleWindow], horizons_ms: Sequence[int], fps: int,
             batch_size: int = 64, config_hash: str = "") -> EvalReport:
    """Mean MPJPE over windows at each horizon, alongside both naive baselines.

    ``model`` is a ModelParams or any callable taking a (B, T, J, K) past batch.
    """
    if len(windows) == 0:
        raise DataError("cannot evaluate an empty window list")
    horizons = sorted(int(h) for h in horizons_ms)
    frames = [ms_to_frame(h, fps) for h in horizons]
    past = np.stack([w.past for w in windows])
    future = np.stack([w.future for w in windows])
    check_motion_batch(past, future)
    L = future.shape[1]
    if frames and frames[-1] > L:
        raise DataError(f"horizon {horizons[-1]} ms needs frame {frames[-1]} but windows hold {L} future frames")
    predict = _predictor(model)
    errs = []
    for start in range(0, len(windows), batch_size):
        sl = slice(start, start + batch_size)
        errs.append(mpjpe_frames(predict(past[sl]), future[sl]))
    model_err = np.concatenate(errs).mean(axis=0)
    zv = mpjpe_frames(baseline_predict(past, L, "zero_velocity"), future).mean(axis=0)
    cv = mpjpe_frames(baseline_predict(past, L, "const_velocity"), future).mean(axis=0)
    rows = [HorizonRow(h, f, float(model_err[f - 1]), float(zv[f - 1]), float(cv[f - 1]))
            for h, f in zip(horizons, frames)]
    return EvalReport(rows, len(windows), config_hash=config_hash)


def extract_features(params: ModelParams, past, batch_size: int = 64) -> np.ndarray:
    """Penultimate FMP features mean-pooled over frames and joints -> (B, C)."""
    past = np.asarray(past)
    out = []
    with no_grad():
        for start in range(0, len(past), batch_size):
            _, feats = predict_future(past[start:start + batch_size], params, return_features=True)
            out.append(pooled_features(feats))
    return np.concatenate(out).astype(np.float64)


class LinearProbe(ClassifierMixin, BaseEstimator):
    """Multinomial logistic regression fit by full-batch gradient descent on standardized features."""

    def __init__(self, iterations: int = 500, lr: float = 0.1):
        self.iterations = iterations
        self.lr = lr

    def fit(self, X, y):
        X = check_features(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ShapeError(f"{len(X)} feature rows but {len(y)} labels")
        self.classes_ = unique_labels(y)
        if len(self.classes_) < 2:
            raise DataError("linear probe needs at least two classes")
        self.mean_ = X.mean(axis=0)
        self.scale_ = X.std(axis=0)
        self.scale_[self.scale_ < 1e-12] = 1.0
        Z = (X - self.mean_) / self.scale_
        onehot = (y[:, None] == self.classes_[None, :]).astype(np.float64)
        n, k = len(Z), len(self.classes_)
        W = np.zeros((Z.shape[1], k))
        b = np.zeros(k)
        for _ in range(self.iterations):
            p = _softmax_rows(Z @ W + b)
            g = (p - onehot) / n
            W -= self.lr * (Z.T @ g)
            b -= self.lr * g.sum(axis=0)
        self.coef_, self.intercept_ = W, b
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_features(X)
        return ((X - self.mean_) / self.scale_) @ self.coef_ + self.intercept_

    def predict_proba(self, X):
        return _softmax_rows(self.decision_function(X))

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def probe_split(labels, split: float, seed: int) -> tuple:
    """Stratified (train_idx, test_idx); ``split`` is the training fraction."""
    if not 0.0 < split < 1.0:
        raise DataError("split must lie strictly between 0 and 1")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        cut = min(max(int(round(split * len(idx))), 1), max(len(idx) - 1, 1))
        train.extend(idx[:cut])
        test.extend(idx[cut:])
    return np.sort(np.array(train, dtype=int)), np.sort(np.array(test, dtype=int))


def linear_probe(features, labels, split: float = 0.5, seed: int = 0, iterations: int = 500,
                 lr: float = 0.1) -> float:
    """Held-out accuracy of a linear classifier trained on a ``split`` fraction."""
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise DataError("linear probe needs at least two classes")
    train, test = probe_split(labels, split, seed)
    if len(test) == 0:
        raise DataError("no held-out samples left after the split")
    clf = LinearProbe(iterations, lr).fit(np.asarray(features)[train], labels[train])
    return float(clf.score(np.asarray(features)[test], labels[test]))


def config_hash(config) -> str:
    """sha256 over the canonical JSON encoding (or raw bytes) of a config."""
    if isinstance(config, (bytes, bytearray)):
        raw = bytes(config)
    else:
        raw = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(raw).hexdigest()


def emit_report(report: EvalReport, directory) -> tuple:
    """Write report.csv and report.json into ``directory``; returns both paths."""
    d = Path(directory)
    csv_path, json_path = d / "report.csv", d / "report.json"
    try:
        d.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["horizon_ms", "frame", "mpjpe_model", "mpjpe_zero_vel", "mpjpe_const_vel"])
            for r in report.rows:
                w.writerow([r.ms, r.frame, repr(r.mpjpe), repr(r.zero_velocity), repr(r.const_velocity)])
        json_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write report to {d}: {exc.strerror or exc}") from exc
    return csv_path, json_path
