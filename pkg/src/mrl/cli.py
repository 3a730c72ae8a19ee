"""Command-line entry point: ``mrl <subcommand> [--config PATH] [--seed N] [--out DIR] [--checkpoint PATH]``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import evalkit, masking, motiondata, training
from .config import RunConfig, parse_config
from .errors import ConfigError, DataError, MRLError
from .model import ModelParams

log = logging.getLogger("mrl")

SUBCOMMANDS = ("synth", "pretrain", "finetune", "eval", "probe", "mask-dump")


def _data_dir(args, cfg: RunConfig) -> Path:
    d = Path(args.data) if args.data else Path(cfg.out) / "data"
    if not (d / "index.json").is_file():
        raise DataError(f"{d}: no dataset found (missing index.json); run `mrl synth` or pass --data")
    return d


def _split_windows(args, cfg: RunConfig) -> tuple:
    seqs = motiondata.read_dataset(_data_dir(args, cfg))
    train, test = motiondata.split_sequences(seqs, cfg["data"]["test_fraction"], cfg.seed)
    m, d = cfg["model"], cfg["data"]

    def make(part, stride):
        return motiondata.prepare_windows(part, m["past_frames"], m["future_frames"], d["fps"],
                                          stride, d["center_on_root"])
    return make(train, d["stride"]), make(test, d["eval_stride"])


def _check_joints(windows, cfg: RunConfig) -> None:
    if windows and windows[0].past.shape[1:] != (cfg["model"]["joints"], cfg["model"]["coords"]):
        raise ConfigError(f"model.joints/coords = {cfg['model']['joints']}/{cfg['model']['coords']} "
                          f"but the dataset has {windows[0].past.shape[1:]}")


def _load_params(path, cfg: RunConfig) -> training.Checkpoint:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{p}: checkpoint not found")
    return training.load_checkpoint(p, cfg.model_config())


def _train(stage: str, args, cfg: RunConfig, params: ModelParams) -> int:
    train_w, _ = _split_windows(args, cfg)
    if not train_w:
        raise DataError("dataset produced no training windows; check data.stride and sequence lengths")
    _check_joints(train_w, cfg)
    past, future, _ = motiondata.stack_windows(train_w)
    tcfg = cfg.train_config(stage)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"{stage}.log", "w") as fh:
        def write(step, lr, loss):
            fh.write(f"step={step} lr={lr:.8g} loss={loss:.8g}\n")
        _, opt = training.run_stage(stage, params, past, future, tcfg, log=write)
    ckpt_path = out / f"{stage}.mckp"
    training.save_checkpoint(ckpt_path, training.Checkpoint(
        params, step=opt.state.step if opt else 0, seed=cfg.seed, config=cfg.to_dict(),
        adam=opt.state if opt else None))
    log.info("wrote %s", ckpt_path)
    return 0


def cmd_synth(args, cfg: RunConfig) -> int:
    s = cfg["synth"]
    spec = motiondata.SkeletonSpec.named(s["skeleton"])
    seqs = motiondata.synth_generate(spec, s["classes"], s["per_class"], s["frames"], cfg.seed, s["fps"])
    d = Path(cfg.out) / "data"
    motiondata.write_dataset(d, seqs)
    log.info("wrote %d sequences to %s", len(seqs), d)
    return 0


def cmd_pretrain(args, cfg: RunConfig) -> int:
    params = ModelParams.init(cfg.model_config(), seed=cfg.seed)
    return _train("pretrain", args, cfg, params)


def cmd_finetune(args, cfg: RunConfig) -> int:
    if args.checkpoint:
        params = _load_params(args.checkpoint, cfg).params
    else:
        params = ModelParams.init(cfg.model_config(), seed=cfg.seed)
    return _train("finetune", args, cfg, params)


def _eval_checkpoint(args, cfg: RunConfig) -> Path:
    return Path(args.checkpoint) if args.checkpoint else Path(cfg.out) / "finetune.mckp"


def cmd_eval(args, cfg: RunConfig) -> int:
    params = _load_params(_eval_checkpoint(args, cfg), cfg).params
    _, test_w = _split_windows(args, cfg)
    _check_joints(test_w, cfg)
    report = evalkit.evaluate(params, test_w, cfg["eval"]["horizons_ms"], cfg["data"]["fps"],
                              cfg["eval"]["batch"], evalkit.config_hash(cfg.to_dict()))
    csv_path, _ = evalkit.emit_report(report, cfg.out)
    log.info("average mpjpe %.6g over %d windows, wrote %s", report.average, report.samples, csv_path)
    return 0


def cmd_probe(args, cfg: RunConfig) -> int:
    params = _load_params(_eval_checkpoint(args, cfg), cfg).params
    train_w, test_w = _split_windows(args, cfg)
    windows = train_w + test_w
    _check_joints(windows, cfg)
    past, _, labels = motiondata.stack_windows(windows)
    feats = evalkit.extract_features(params, past, cfg["eval"]["batch"])
    split = cfg["eval"]["probe_split"]
    acc = evalkit.linear_probe(feats, labels, split, cfg.seed)
    shuffled = np.random.default_rng(cfg.seed).permutation(labels)
    control = evalkit.linear_probe(feats, shuffled, split, cfg.seed)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    record = {"accuracy": acc, "shuffled_accuracy": control, "classes": int(len(np.unique(labels))),
              "samples": int(len(labels)), "config_hash": evalkit.config_hash(cfg.to_dict())}
    (out / "probe.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    log.info("probe accuracy %.4f (shuffled control %.4f)", acc, control)
    return 0


def cmd_mask_dump(args, cfg: RunConfig) -> int:
    if args.input:
        seq = motiondata.read_sequence(args.input)
    else:
        d = _data_dir(args, cfg)
        seq = motiondata.read_dataset(d)[0]
    m = cfg["mask"]
    plan = masking.build_mask(masking.joint_velocity(seq.coords), m["rate"], m["strategy"], cfg.seed, m["invert"])
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "mask.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "joint", "velocity", "masked"])
        # frame 0 has no velocity and is never a candidate, so rows start at frame 1
        for t in range(1, plan.masked.shape[0]):
            for j in range(plan.masked.shape[1]):
                w.writerow([t, j, repr(float(plan.velocity_mag[t - 1, j])), int(plan.masked[t, j])])
    log.info("masked %d of %d positions, wrote %s", plan.count, plan.velocity_mag.size, path)
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "probe": cmd_probe,
    "mask-dump": cmd_mask_dump,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mrl", description="Masked motion pretraining and forecasting.")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", help="JSON config file merged over the defaults")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", help="output directory (overrides config 'out')")
    parser.add_argument("--checkpoint", help="MCKP checkpoint to start from or evaluate")
    parser.add_argument("--data", help="dataset directory (default: <out>/data)")
    parser.add_argument("--input", help="single MSEQ file for mask-dump")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _thread_limit():
    raw = os.environ.get("MRL_THREADS")
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"MRL_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"MRL_THREADS must be a positive integer, got {raw!r}")
    return n


def run(subcommand: str, cfg: RunConfig, args=None) -> int:
    if args is None:
        args = build_parser().parse_args([subcommand])
    with threadpool_limits(limits=_thread_limit()):
        return COMMANDS[subcommand](args, cfg)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="mrl: %(message)s", stream=sys.stderr)
    try:
        cfg = parse_config(args.config).with_overrides(seed=args.seed, out=args.out)
        return run(args.subcommand, cfg, args)
    except (MRLError, OSError, ValueError) as exc:
        msg = " ".join(str(exc).split())
        print(f"mrl {args.subcommand}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
