"""Masked motion pretraining and skeleton motion forecasting on a small NumPy autodiff engine."""
from .config import RunConfig, parse_config
from .estimators import LinearProbe, MotionForecaster, VelocityMasker
from .evalkit import EvalReport, baseline_predict, emit_report, evaluate, linear_probe, mpjpe
from .masking import MaskPlan, build_mask, mask_sequence
from .model import ModelConfig, ModelParams, parameter_count, predict_future
from .motiondata import MotionSequence, SampleWindow, SkeletonSpec, synth_generate
from .training import Checkpoint, TrainConfig, checkpoint_io, finetune_loss, pretrain_loss

__version__ = "0.1.0"
