"""Tests for schedules, the EMA teacher, AdamW, the step loop, and checkpoints."""

import json
import os

import numpy as np
import pytest

from graydino.augment import MultiCropConfig
from graydino.backbone import ViTConfig
from graydino.engine import (CheckpointError, OptimizerConfig, OptimizerState,
                             TrainConfig, TrainingDivergence, adamw_step,
                             center_resize, clip_gradients, collapse_metric,
                             ema_update, evaluate_collapse, init_trainer,
                             load_checkpoint, lr_at, momentum_at,
                             save_checkpoint, train, train_step)
from graydino.numerics import Tensor
from graydino.objectives import LossWeights, TemperatureSchedule

from conftest import make_manifest

# a step on full 32x32 views is too slow for unit tests; this config keeps the
# whole pipeline but runs on 8px global and 4px local views
SMALL_VIT = ViTConfig(patch_size=4, dim=16, depth=2, heads=2, view_sizes=(8, 4),
                      num_prototypes=8, bottleneck_dim=8, head_hidden=16)
SMALL_CROP = MultiCropConfig(global_size=8, local_size=4, local_count=2)
SMALL_TRAIN = TrainConfig(batch_size=2, total_steps=4, seed=5)
SCHED = TemperatureSchedule()


def small_state(seed=5):
    return init_trainer(SMALL_VIT, seed)


def run_one_step(state, tconf=SMALL_TRAIN, man_seed=77):
    from graydino.data import load_example
    man = make_manifest(man_seed, 4)
    batch = [load_example(man, i) for i in range(tconf.batch_size)]
    temps = SCHED.at(state.step, tconf.total_steps)
    return train_step(state, batch, crop_cfg=SMALL_CROP,
                      weights=LossWeights(), temps=temps, tconf=tconf)


# ---------------------------------------------------------------------------
# schedules


def test_momentum_endpoints():
    assert momentum_at(0, 200) == 0.996
    assert momentum_at(200, 200) == 1.0


def test_momentum_midpoint():
    assert momentum_at(100, 200) == pytest.approx(0.998, abs=1e-15)


def test_momentum_clamps_past_total():
    assert momentum_at(500, 200) == 1.0


def test_momentum_nondecreasing():
    vals = [momentum_at(s, 200) for s in range(201)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_momentum_validates_range():
    with pytest.raises(ValueError):
        momentum_at(0, 200, start=0.9, end=0.8)
    with pytest.raises(ValueError):
        momentum_at(0, 0)


def test_lr_warmup_starts_at_zero():
    assert lr_at(0, 200, 0.1, 4e-3) == 0.0


def test_lr_warmup_end_hits_base():
    assert lr_at(20, 200, 0.1, 4e-3) == pytest.approx(4e-3, abs=1e-18)


def test_lr_final_step_is_zero():
    assert abs(lr_at(200, 200, 0.1, 4e-3)) <= 1e-12


def test_lr_junction_is_continuous():
    base = 4e-3
    left = lr_at(19, 200, 0.1, base)
    right = lr_at(20, 200, 0.1, base)
    # one warmup step of slope base/20 to the cosine start
    assert abs(right - left - base / 20) <= 1e-12


def test_lr_clamps_and_validates():
    assert abs(lr_at(999, 200, 0.1, 1e-2)) <= 1e-12
    with pytest.raises(ValueError):
        lr_at(0, 200, 1.0, 1e-2)


def test_lr_no_warmup_starts_at_base():
    assert lr_at(0, 100, 0.0, 2e-3) == 2e-3


# ---------------------------------------------------------------------------
# ema


def params_of(values, grad=False):
    return {k: Tensor(np.asarray(v, dtype=np.float64), requires_grad=grad)
            for k, v in values.items()}


def test_ema_lambda_one_is_identity():
    t = params_of({"w": [[2.0, 3.0]]})
    before = t["w"].data.copy()
    ema_update(t, params_of({"w": [[9.0, -9.0]]}), 1.0)
    assert np.array_equal(t["w"].data, before)


def test_ema_lambda_zero_copies_student():
    t = params_of({"w": [[2.0, 3.0]]})
    s = params_of({"w": [[9.0, -9.0]]})
    ema_update(t, s, 0.0)
    assert np.array_equal(t["w"].data, s["w"].data)


def test_ema_scalar_arithmetic():
    t = params_of({"w": 2.0})
    ema_update(t, params_of({"w": 1.0}), 0.996)
    assert t["w"].data == pytest.approx(1.996, abs=1e-15)


def test_ema_shape_and_name_mismatch():
    with pytest.raises(ValueError):
        ema_update(params_of({"w": [1.0, 2.0]}), params_of({"w": [[1.0]]}), 0.5)
    with pytest.raises(ValueError):
        ema_update(params_of({"w": [1.0]}), params_of({"v": [1.0]}), 0.5)


def test_ema_convexity():
    rng = np.random.default_rng(0)
    t = params_of({"w": rng.normal(size=(4, 4))})
    old = t["w"].data.copy()
    s = params_of({"w": rng.normal(size=(4, 4))})
    ema_update(t, s, 0.3)
    lo = np.minimum(old, s["w"].data)
    hi = np.maximum(old, s["w"].data)
    assert np.all(t["w"].data >= lo - 1e-15)
    assert np.all(t["w"].data <= hi + 1e-15)


# ---------------------------------------------------------------------------
# clipping and adamw


def test_clip_below_threshold_untouched():
    g = {"a": np.array([3.0, 4.0])}
    norm = clip_gradients(g, 10.0)
    assert norm == 5.0
    assert np.array_equal(g["a"], [3.0, 4.0])


def test_clip_scales_to_max_norm():
    g = {"a": np.array([3.0, 4.0]), "b": np.array([12.0])}
    clip_gradients(g, 1.0)
    total = np.sqrt(sum(float(np.sum(v * v)) for v in g.values()))
    assert total == pytest.approx(1.0, abs=1e-12)


def test_clip_zero_disables():
    g = {"a": np.array([300.0])}
    clip_gradients(g, 0.0)
    assert g["a"][0] == 300.0


def test_adamw_first_step_is_signlike():
    cfg = OptimizerConfig(weight_decay=0.0)
    p = params_of({"w": np.array([[5.0]])}, grad=True)
    opt = OptimizerState.init(p)
    g = 0.37
    adamw_step(opt, p, {"w": np.array([[g]])}, lr=0.01, cfg=cfg)
    expect = 5.0 - 0.01 * g / (abs(g) + cfg.eps)
    assert p["w"].data[0, 0] == pytest.approx(expect, abs=1e-15)


def test_adamw_zero_grad_no_decay_keeps_params():
    p = params_of({"w": np.array([[1.5, -2.0]])}, grad=True)
    opt = OptimizerState.init(p)
    adamw_step(opt, p, {"w": np.zeros((1, 2))}, lr=0.1,
               cfg=OptimizerConfig(weight_decay=0.0))
    assert np.array_equal(p["w"].data, [[1.5, -2.0]])


def test_adamw_decay_shrinks_matrices_only():
    p = params_of({"w": np.array([[2.0]]), "cls": np.array([[2.0]]),
                   "ln.b": np.array([2.0])}, grad=True)
    opt = OptimizerState.init(p)
    zero = {k: np.zeros(v.shape) for k, v in p.items()}
    adamw_step(opt, p, zero, lr=0.5, cfg=OptimizerConfig(weight_decay=0.1))
    assert p["w"].data[0, 0] == pytest.approx(2.0 * (1 - 0.5 * 0.1), abs=1e-15)
    assert p["cls"].data[0, 0] == 2.0     # tokens exempt from decay
    assert p["ln.b"].data[0] == 2.0       # vectors exempt from decay


def test_adamw_fifty_steps_on_square():
    # reference: the plain AdamW recursion written out longhand
    b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.1
    x_ref, m, v = 5.0, 0.0, 0.0
    trace_ref = []
    for t in range(1, 51):
        g = 2.0 * x_ref
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x_ref -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        trace_ref.append(x_ref)

    p = params_of({"x": np.array(5.0)}, grad=True)
    opt = OptimizerState.init(p)
    cfg = OptimizerConfig(weight_decay=0.0)
    trace = []
    for _ in range(50):
        g = {"x": 2.0 * p["x"].data}
        adamw_step(opt, p, g, lr=lr, cfg=cfg)
        trace.append(float(p["x"].data))

    assert np.allclose(trace, trace_ref, atol=1e-12)
    tail = [abs(x) for x in trace[5:]]
    assert all(b < a for a, b in zip(tail, tail[1:]))
    assert abs(trace[-1]) < 1.0


def test_adamw_nonfinite_gradient_names_parameter():
    p = params_of({"good": np.array([1.0]), "broken": np.array([1.0])}, grad=True)
    opt = OptimizerState.init(p)
    g = {"good": np.array([0.1]), "broken": np.array([np.nan])}
    with pytest.raises(TrainingDivergence, match="broken"):
        adamw_step(opt, p, g, lr=0.1)


def test_adamw_missing_gradient_rejected():
    p = params_of({"w": np.array([1.0])}, grad=True)
    opt = OptimizerState.init(p)
    with pytest.raises(ValueError):
        adamw_step(opt, p, {}, lr=0.1)


# ---------------------------------------------------------------------------
# train_step


def test_step_teacher_matches_ema_recursion_bitwise():
    state = small_state()
    old_teacher = {k: t.data.copy() for k, t in state.teacher_all().items()}
    lam = momentum_at(0, SMALL_TRAIN.total_steps)
    run_one_step(state)
    student = state.trainable()
    for name, t in state.teacher_all().items():
        expect = lam * old_teacher[name] + (1.0 - lam) * student[name].data
        assert np.array_equal(t.data, expect), name


def test_step_teacher_has_no_gradient_state():
    state = small_state()
    run_one_step(state)
    for t in state.teacher_all().values():
        assert not t.requires_grad
        assert t.grad is None


def test_step_lambda_one_freezes_teacher():
    tconf = TrainConfig(batch_size=2, total_steps=4, seed=5,
                        momentum_start=1.0, momentum_end=1.0)
    state = small_state()
    before = {k: t.data.copy() for k, t in state.teacher_all().items()}
    run_one_step(state, tconf)
    for name, t in state.teacher_all().items():
        assert np.array_equal(t.data, before[name]), name


def test_step_zero_lr_leaves_student_drags_teacher():
    # warmup_frac 0.25 of 4 steps puts one true lr=0 step at the front
    tconf = TrainConfig(batch_size=2, total_steps=4, seed=5, warmup_frac=0.25)
    state = small_state()
    s_before = {k: t.data.copy() for k, t in state.trainable().items()}
    t_before = {k: t.data.copy() for k, t in state.teacher_all().items()}
    report = run_one_step(state, tconf)
    assert report["lr"] == 0.0
    lam = report["lambda"]
    for name, t in state.trainable().items():
        assert np.array_equal(t.data, s_before[name]), name
    for name, t in state.teacher_all().items():
        expect = lam * t_before[name] + (1 - lam) * s_before[name]
        assert np.array_equal(t.data, expect), name


def test_step_report_fields_and_total():
    state = small_state()
    r = run_one_step(state)
    for key in ("step", "L_image", "L_patch", "L_koleo", "L_total",
                "lr", "lambda", "tau_t", "grad_norm"):
        assert key in r
    w = LossWeights()
    expect = (w.alpha_image * r["L_image"] + w.alpha_patch * r["L_patch"]
              + w.alpha_koleo * r["L_koleo"])
    assert r["L_total"] == pytest.approx(expect, abs=1e-12)
    assert r["tau_t"] == 0.04
    assert state.step == 1


def test_step_updates_both_centers():
    state = small_state()
    run_one_step(state)
    assert np.any(state.center_image.center != 0.0)
    assert np.any(state.center_patch.center != 0.0)
    assert not np.array_equal(state.center_image.center,
                              state.center_patch.center)


def test_step_rejects_empty_batch():
    state = small_state()
    with pytest.raises(ValueError):
        train_step(state, [], crop_cfg=SMALL_CROP, weights=LossWeights(),
                   temps=SCHED.at(0, 4), tconf=SMALL_TRAIN)


# ---------------------------------------------------------------------------
# the loop: logs, checkpoints, resume


def test_train_writes_log_and_checkpoints(tmp_path):
    man = make_manifest(101, 6)
    tconf = TrainConfig(batch_size=2, total_steps=4, seed=3, checkpoint_every=2)
    out = str(tmp_path / "run")
    res = train(man, SMALL_VIT, SMALL_CROP, tconf, LossWeights(), SCHED, out_dir=out)

    lines = open(os.path.join(out, "train_log.jsonl")).read().splitlines()
    assert len(lines) == 4
    for i, line in enumerate(lines):
        row = json.loads(line)
        assert row["step"] == i
        assert set(row) == {"step", "L_image", "L_patch", "L_koleo", "L_total",
                            "lr", "lambda", "tau_t"}
    assert sorted(f for f in os.listdir(out) if f.endswith(".bin")) == [
        "ckpt_step2.bin", "ckpt_step4.bin"]
    assert res["state"].step == 4


def test_train_runs_are_reproducible():
    man = make_manifest(102, 6)
    tconf = TrainConfig(batch_size=2, total_steps=3, seed=9)
    a = train(man, SMALL_VIT, SMALL_CROP, tconf, LossWeights(), SCHED)
    b = train(man, SMALL_VIT, SMALL_CROP, tconf, LossWeights(), SCHED)
    assert a["reports"] == b["reports"]
    sa, sb = a["state"], b["state"]
    for name in sa.trainable():
        assert np.array_equal(sa.trainable()[name].data,
                              sb.trainable()[name].data)


def test_resume_retraces_uninterrupted_run(tmp_path):
    man = make_manifest(103, 6)
    tconf = TrainConfig(batch_size=2, total_steps=4, seed=4, checkpoint_every=2)

    full_dir = str(tmp_path / "full")
    full = train(man, SMALL_VIT, SMALL_CROP, tconf, LossWeights(), SCHED,
                 out_dir=full_dir)

    resumed_dir = str(tmp_path / "resumed")
    resumed = train(man, SMALL_VIT, SMALL_CROP, tconf, LossWeights(), SCHED,
                    out_dir=resumed_dir,
                    resume=os.path.join(full_dir, "ckpt_step2.bin"))

    fa, fb = full["state"], resumed["state"]
    for name in fa.trainable():
        assert np.array_equal(fa.trainable()[name].data,
                              fb.trainable()[name].data), name
    for name in fa.teacher_all():
        assert np.array_equal(fa.teacher_all()[name].data,
                              fb.teacher_all()[name].data), name

    full_log = open(os.path.join(full_dir, "train_log.jsonl")).read().splitlines()
    res_log = open(os.path.join(resumed_dir, "train_log.jsonl")).read().splitlines()
    assert res_log == full_log[2:]


def test_resume_rejects_config_mismatch(tmp_path):
    state = small_state()
    path = str(tmp_path / "ck.bin")
    save_checkpoint(state, path)
    other = ViTConfig(patch_size=4, dim=32, depth=2, heads=2, view_sizes=(8, 4),
                      num_prototypes=8, bottleneck_dim=8, head_hidden=16)
    man = make_manifest(104, 4)
    with pytest.raises(CheckpointError):
        train(man, other, SMALL_CROP, SMALL_TRAIN, LossWeights(), SCHED,
              resume=path)


# ---------------------------------------------------------------------------
# checkpoint format


def test_checkpoint_roundtrip_bytes(tmp_path):
    state = small_state()
    run_one_step(state)  # nonzero moments and centers
    p1 = str(tmp_path / "a.bin")
    p2 = str(tmp_path / "b.bin")
    save_checkpoint(state, p1, extra={"note": "x"})
    loaded, extra = load_checkpoint(p1)
    assert extra == {"note": "x"}
    assert loaded.step == state.step
    save_checkpoint(loaded, p2, extra={"note": "x"})
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_checkpoint_restores_exact_state(tmp_path):
    state = small_state()
    run_one_step(state)
    path = str(tmp_path / "c.bin")
    save_checkpoint(state, path)
    loaded, _ = load_checkpoint(path)
    for name, t in state.trainable().items():
        assert np.array_equal(loaded.trainable()[name].data, t.data)
        assert loaded.trainable()[name].requires_grad
    for name, t in state.teacher_all().items():
        assert np.array_equal(loaded.teacher_all()[name].data, t.data)
        assert not loaded.teacher_all()[name].requires_grad
    assert np.array_equal(loaded.center_image.center, state.center_image.center)
    assert np.array_equal(loaded.center_patch.center, state.center_patch.center)
    assert loaded.opt.step_count == state.opt.step_count
    for name in state.opt.m:
        assert np.array_equal(loaded.opt.m[name], state.opt.m[name])
        assert np.array_equal(loaded.opt.v[name], state.opt.v[name])


def test_checkpoint_bad_magic(tmp_path):
    path = str(tmp_path / "bad.bin")
    with open(path, "wb") as fh:
        fh.write(b"NOTACKPT" + b"\x00" * 32)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    state = small_state()
    path = str(tmp_path / "t.bin")
    save_checkpoint(state, path)
    blob = open(path, "rb").read()
    with open(path, "wb") as fh:
        fh.write(blob[:len(blob) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_missing_file():
    with pytest.raises(CheckpointError):
        load_checkpoint("/nonexistent/nowhere.bin")


# ---------------------------------------------------------------------------
# collapse metric and evaluation view


def test_collapse_identical_rows_zero():
    p = np.tile([0.2, 0.3, 0.5], (5, 1))
    assert collapse_metric(p) == 0.0


def test_collapse_two_onehots_half():
    assert collapse_metric(np.array([[1.0, 0.0], [0.0, 1.0]])) == 0.5


def test_collapse_matches_manual_std():
    rng = np.random.default_rng(1)
    p = rng.uniform(size=(6, 4))
    p /= p.sum(axis=1, keepdims=True)
    assert collapse_metric(p) == pytest.approx(
        float(p.std(axis=0).mean()), abs=1e-15)


def test_collapse_needs_two_rows():
    with pytest.raises(ValueError):
        collapse_metric(np.array([[1.0, 0.0]]))


def test_center_resize_shape_and_determinism():
    from graydino.data import load_example
    man = make_manifest(105, 2)
    img = load_example(man, 0).image
    a = center_resize(img, 0.02, 8)
    b = center_resize(img, 0.02, 8)
    assert a.shape == (8, 8)
    assert np.array_equal(a, b)


def test_center_resize_empty_image_uses_full_frame():
    out = center_resize(np.zeros((12, 12)), 0.02, 8)
    assert out.shape == (8, 8)
    assert np.all(out == 0.0)


def test_evaluate_collapse_returns_scalar():
    state = small_state()
    man = make_manifest(106, 6)
    v = evaluate_collapse(state, man, SCHED.at(0, 4), SMALL_CROP, max_images=6)
    assert isinstance(v, float)
    assert v >= 0.0
