"""Acceptance criteria, each at its stated tolerance.

Every test records its outcome through the ``criterion`` fixture, so the
terminal summary prints one PASS/FAIL line per criterion even under ``-q``.
Criteria 6 to 9 train real models and take several minutes on one CPU.
"""
import math
import time

import numpy as np
import pytest

from mrl import evalkit, masking, motiondata as md, training
from mrl.diffcore import Tensor, check_gradients, no_grad
from mrl.model import ModelConfig, ModelParams, embed_joints, pme_forward, predict_future, reconstruct
from test_diffcore import _prim_cases

HORIZONS = [80, 160, 320, 400, 560, 1000]

# desk-scale benchmark shared by criteria 7, 8 and 9
BENCH_MODEL = dict(channels=32, heads=4, head_dim=8, pme_layers=2, fmp_layers=2,
                   past_frames=10, future_frames=25, joints=10)
BENCH_PRETRAIN_STEPS = 200
BENCH_FINETUNE_STEPS = 200
BENCH_LR = 2e-3
BENCH_BATCH = 16
BENCH_SEEDS = range(5)


# ------------------------------------------------------------------ 1

def test_01_gradient_fidelity(criterion):
    t0 = time.perf_counter()
    worst = {}
    for name, (fn, inputs) in _prim_cases().items():
        worst[name] = check_gradients(lambda: (fn(), inputs), samples=200).max_rel_error

    cfg = ModelConfig(channels=8, heads=2, head_dim=4, pme_layers=2, fmp_layers=2,
                      past_frames=4, future_frames=4, joints=3, coords=3)
    params = ModelParams.init(cfg, seed=0, dtype=np.float64)
    rng = np.random.default_rng(0)
    past, future = rng.normal(size=(2, 4, 3, 3))
    past_in, _ = masking.mask_sequence(past, 0.5)
    future_in, _ = masking.mask_sequence(future, 0.5)
    leaves = [params[n] for n in params.group]

    def graph():
        rec_past = reconstruct(Tensor(past_in), None, "past", params)
        h_past = pme_forward(embed_joints(Tensor(past), params, "past"), params)
        rec_future = reconstruct(Tensor(future_in), h_past, "future", params)
        return training.pretrain_loss(rec_past, past, rec_future, future, 1.0), leaves

    worst["pretrain graph"] = check_gradients(graph, samples=600, seed=1).max_rel_error
    elapsed = time.perf_counter() - t0
    bad = {k: v for k, v in worst.items() if not v < 1e-4}
    ok = not bad and elapsed < 60
    criterion(1, "gradient fidelity", ok,
              f"max rel err {max(worst.values()):.2e} over {len(worst)} graphs, {elapsed:.1f}s")
    assert not bad, bad
    assert elapsed < 60


# ------------------------------------------------------------------ 2

def _sort_oracle(vel, r):
    steps, joints = vel.shape
    k = math.floor(r * steps * joints + 0.5)
    order = sorted(range(steps * joints), key=lambda i: (-vel.flat[i], i))
    out = np.zeros((steps + 1, joints), dtype=bool)
    for i in order[:k]:
        out[1 + i // joints, i % joints] = True
    return out


def test_02_mask_count_exactness(criterion):
    rng = np.random.default_rng(2024)
    failures = 0
    for trial in range(100):
        T, J = int(rng.integers(2, 17)), int(rng.integers(1, 25))
        r = [0, 0.25, 0.5, 0.75][trial % 4]
        x = rng.normal(size=(T, J, 3))
        if trial % 3 == 0:
            # quantised motion produces many tied velocities
            x = np.round(x)
            x[:, : J // 2] = x[:1, : J // 2]
        plan = masking.build_mask(masking.joint_velocity(x), r)
        expected = math.floor(r * (T - 1) * J + 0.5)
        if plan.count != expected or not np.array_equal(plan.masked, _sort_oracle(plan.velocity_mag, r)):
            failures += 1
    criterion(2, "mask-count exactness", failures == 0, f"{100 - failures}/100 instances match the sort oracle")
    assert failures == 0


# ------------------------------------------------------------------ 3

def _loop_sq(rec, gt):
    F, J, K = gt.shape
    total = 0.0
    for f in range(F):
        for j in range(J):
            for k in range(K):
                total += (gt[f, j, k] - rec[f, j, k]) ** 2
    return total / (F * J)


def test_03_loss_oracles(criterion):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(50):
        T, L, J = (int(v) for v in rng.integers(1, 8, size=3))
        a, b = rng.normal(size=(2, T, J, 3))
        c, d = rng.normal(size=(2, L, J, 3))
        alpha = float(rng.uniform(0, 3))
        worst = max(worst,
                    abs(training.pretrain_loss(a, b, c, d, alpha).item() - (_loop_sq(a, b) + alpha * _loop_sq(c, d))),
                    abs(training.finetune_loss(c, d).item() - _loop_sq(c, d)))
    criterion(3, "loss oracles", worst < 1e-10, f"max abs diff {worst:.1e} over 50 fixtures")
    assert worst < 1e-10


# ------------------------------------------------------------------ 4

def _rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def test_04_mpjpe_oracle(criterion):
    rng = np.random.default_rng(4)
    cfg = ModelConfig(channels=8, heads=2, head_dim=4, pme_layers=1, fmp_layers=1,
                      past_frames=10, future_frames=25, joints=5)
    params = ModelParams.init(cfg, seed=4)
    windows = [md.SampleWindow(rng.normal(size=(10, 5, 3)), rng.normal(size=(25, 5, 3))) for _ in range(20)]
    report = evalkit.evaluate(params, windows, HORIZONS, 25, batch_size=7)
    loop_diff = 0.0
    for row in report.rows:
        per_sample = []
        for w in windows:
            with no_grad():
                pred = predict_future(w.past, params).data
            err = 0.0
            for j in range(5):
                err += math.sqrt(sum((pred[row.frame - 1, j, k] - w.future[row.frame - 1, j, k]) ** 2 for k in range(3)))
            per_sample.append(err / 5)
        loop_diff = max(loop_diff, abs(row.mpjpe - sum(per_sample) / len(per_sample)))

    a, b = rng.normal(size=(2, 25, 5, 3))
    ref = evalkit.mpjpe(a, b, 10)
    rigid_diff = 0.0
    for _ in range(50):
        R, t = _rotation(rng), rng.normal(size=3) * 5
        rigid_diff = max(rigid_diff, abs(evalkit.mpjpe(a @ R.T + t, b @ R.T + t, 10) - ref))
    ok = loop_diff < 1e-6 and rigid_diff < 1e-5
    criterion(4, "MPJPE oracle", ok, f"loop diff {loop_diff:.1e}, rigid diff {rigid_diff:.1e}")
    assert loop_diff < 1e-6
    assert rigid_diff < 1e-5


# ------------------------------------------------------------------ 5

def test_05_horizon_mapping(criterion):
    expected = {80: 2, 160: 4, 320: 8, 400: 10, 560: 14, 1000: 25}
    got = {ms: md.ms_to_frame(ms, 25) for ms in expected}
    criterion(5, "horizon mapping at 25 fps", got == expected, str(got))
    assert got == expected


# ------------------------------------------------------------------ 6

def test_06_overfit_sanity(criterion):
    t0 = time.perf_counter()
    seqs = md.synth_generate(md.SkeletonSpec.humanoid10(), 4, 8, 90, seed=0, fps=50)
    windows = [md.prepare_windows([s], 10, 25, 25)[0] for s in seqs]
    past, future, labels = md.stack_windows(windows)
    assert len(windows) == 32 and len(set(labels)) == 4
    frame = md.ms_to_frame(400, 25)
    baseline = evalkit.mpjpe_frames(evalkit.baseline_predict(past, 25, "zero_velocity"), future)[:, frame - 1].mean()

    params = ModelParams.init(ModelConfig(**BENCH_MODEL), seed=0)
    cfg = training.TrainConfig(steps=3000, batch=16, lr=2e-3, seed=0)
    best = [math.inf]

    def check(step):
        if step % 250 == 0:
            with no_grad():
                pred = predict_future(past, params).data
            best[0] = evalkit.mpjpe_frames(pred, future)[:, frame - 1].mean() / baseline
            return best[0] < 0.10
        return False

    training.run_stage("finetune", params, past, future, cfg, callback=check)
    elapsed = time.perf_counter() - t0
    ratio = best[0]
    ok = ratio < 0.10 and elapsed < 600
    criterion(6, "overfit sanity", ok,
              f"train MPJPE at 400 ms = {ratio:.3f} x zero-velocity baseline in {elapsed:.0f}s")
    assert ratio < 0.10
    assert elapsed < 600


# ------------------------------------------------------------------ 7, 8, 9

@pytest.fixture(scope="module")
def bench():
    """Held-out synthetic benchmark and, per seed, scratch / r=0.75 / r=0 results."""
    seqs = md.synth_generate(md.SkeletonSpec.humanoid10(), 4, 8, 150, seed=0, fps=50)
    train_seqs, test_seqs = md.split_sequences(seqs, 0.25, seed=0)
    train_w = md.prepare_windows(train_seqs, 10, 25, 25, stride=5)
    test_w = md.prepare_windows(test_seqs, 10, 25, 25, stride=5)
    past, future, _ = md.stack_windows(train_w)
    mcfg = ModelConfig(**BENCH_MODEL)

    def run(seed, rate):
        params = ModelParams.init(mcfg, seed=seed)
        if rate is not None:
            training.run_stage("pretrain", params, past, future, training.TrainConfig(
                steps=BENCH_PRETRAIN_STEPS, batch=BENCH_BATCH, lr=BENCH_LR, mask_rate=rate, seed=seed))
        pretrained = params.copy()
        training.run_stage("finetune", params, past, future, training.TrainConfig(
            steps=BENCH_FINETUNE_STEPS, batch=BENCH_BATCH, lr=BENCH_LR, seed=seed))
        return evalkit.evaluate(params, test_w, HORIZONS, 25).average, pretrained

    results = {}
    for seed in BENCH_SEEDS:
        scratch, _ = run(seed, None)
        masked, pre = run(seed, 0.75)
        unmasked, _ = run(seed, 0.0)
        results[seed] = {"scratch": scratch, "r75": masked, "r0": unmasked, "pretrained": pre}
    return {"results": results, "train": train_w, "test": test_w}


def test_07_pretraining_helps(bench, criterion):
    res = bench["results"]
    assert len(bench["test"]) >= 64
    wins = sum(r["r75"] <= r["scratch"] for r in res.values())
    detail = ", ".join(f"seed {s}: {r['r75']:.3f} vs {r['scratch']:.3f}" for s, r in res.items())
    criterion(7, "pretraining helps", wins >= 3, f"{wins}/5 seeds ({detail})")
    assert wins >= 3


def test_08_mask_rate_ordering(bench, criterion):
    res = bench["results"].values()
    m75 = float(np.median([r["r75"] for r in res]))
    m0 = float(np.median([r["r0"] for r in res]))
    criterion(8, "mask-rate ordering", m75 <= m0, f"median MPJPE r=0.75 {m75:.4f} vs r=0 {m0:.4f}")
    assert m75 <= m0


def test_09_representation_probe(bench, criterion):
    params = bench["results"][0]["pretrained"]
    past, _, labels = md.stack_windows(bench["train"] + bench["test"])
    feats = evalkit.extract_features(params, past)
    acc = evalkit.linear_probe(feats, labels, 0.5, seed=0)
    shuffled = np.random.default_rng(0).permutation(labels)
    control = evalkit.linear_probe(feats, shuffled, 0.5, seed=0)
    n_test = len(labels) - len(evalkit.probe_split(labels, 0.5, 0)[0])
    sigma = math.sqrt(0.25 * 0.75 / n_test)
    ok = acc >= 0.80 and abs(control - 0.25) <= 3 * sigma
    criterion(9, "representation probe", ok,
              f"accuracy {acc:.3f}, shuffled control {control:.3f} (chance 0.25 +/- {3 * sigma:.3f})")
    assert acc >= 0.80
    assert abs(control - 0.25) <= 3 * sigma


# ------------------------------------------------------------------ 10

def test_10_determinism_and_persistence(criterion, tmp_path):
    seqs = md.synth_generate(md.SkeletonSpec.humanoid10(), 4, 4, 90, seed=1, fps=50)
    past, future, _ = md.stack_windows(md.prepare_windows(seqs, 10, 25, 25, stride=5))
    mcfg = ModelConfig(**{**BENCH_MODEL, "channels": 16, "heads": 2, "pme_layers": 1, "fmp_layers": 1})
    cfg = training.TrainConfig(steps=100, batch=8, lr=1e-3, seed=7)

    def trace():
        params = ModelParams.init(mcfg, seed=7)
        losses, opt = training.run_stage("finetune", params, past, future, cfg)
        return losses, params, opt

    a, params, opt = trace()
    b, _, _ = trace()
    path = tmp_path / "c.mckp"
    training.checkpoint_io(path, "save", training.Checkpoint(params, opt.state.step, 7, {}, opt.state))
    loaded = training.checkpoint_io(path, "load", model_config=mcfg)
    with no_grad():
        same = predict_future(past, params).data.tobytes() == predict_future(past, loaded.params).data.tobytes()
    ok = a == b and same
    criterion(10, "determinism and persistence", ok,
              f"100-step traces identical: {a == b}; reloaded predictions bit-identical: {same}")
    assert a == b
    assert same


# ------------------------------------------------------------------ 11

def test_11_permutation_equivariance(criterion):
    # Asserted in float64. In float32 the residual stream reaches magnitudes of
    # 5 to 8, where one ulp is ~5e-7, and permuting joints reorders the sums in
    # spatial attention, so the float32 deviation is reported alongside.
    rng = np.random.default_rng(11)
    cfg = ModelConfig(joints=22)
    worst = {}
    for dtype in (np.float64, np.float32):
        params = ModelParams.init(cfg, seed=11, dtype=dtype)
        params["past_emb.P_t"].data[:] = 0
        params["past_emb.P_s"].data[:] = 0
        dev = 0.0
        for _ in range(5):
            x = rng.normal(size=(10, 22, 3))
            perm = rng.permutation(22)
            with no_grad():
                a = pme_forward(embed_joints(x, params), params).data[:, perm]
                b = pme_forward(embed_joints(x[:, perm], params), params).data
            dev = max(dev, float(np.abs(a - b).max()))
        worst[dtype] = dev
    ok = worst[np.float64] < 1e-6
    criterion(11, "permutation equivariance", ok,
              f"max deviation {worst[np.float64]:.1e} in float64 (float32 rounding: {worst[np.float32]:.1e})")
    assert worst[np.float64] < 1e-6
