"""Acceptance suite: nine end-to-end checks over the whole pipeline.

Each test prints one `CRITERION n [...]: PASS/FAIL` line (run pytest with -s
to see them) and backs the verdict with hard assertions.  The desk-scale
training run used by criteria 5 and 6 is built once per module; everything is
seed-pinned, so reruns are bit-for-bit repeatable.
"""

import json
import time

import numpy as np
import pytest

from graydino import augment, checks, cli, data, engine, objectives
from graydino import numerics as nm
from graydino import probe
from graydino.backbone import ViTConfig

# desk-scale run shared by criteria 5 and 6
DESK_VIT = ViTConfig()
DESK_CROP = augment.MultiCropConfig()
DESK_TEMPLATE = data.PhantomTemplate()
DESK_TRAIN = engine.TrainConfig(batch_size=16, total_steps=200,
                                warmup_frac=0.25, base_lr=6e-4, seed=8)
CORPUS_SEED = 21
PROBE_TRAIN_SEED, PROBE_EVAL_SEED = 31, 32


def _line(num: int, label: str, ok: bool, detail: str) -> None:
    print(f"CRITERION {num} [{label}]: {'PASS' if ok else 'FAIL'} ({detail})")


def _corpus(template: data.PhantomTemplate, seed: int, n: int) -> data.DatasetManifest:
    rr = data.derive_rng(seed, 0)
    recs = []
    for _ in range(n):
        spec = data.sample_phantom_spec(template, rr)
        recs.append(data.ManifestRecord(phantom=spec, label=spec.label))
    return data.DatasetManifest(seed=seed, records=recs)


@pytest.fixture(scope="module")
def desk():
    manifest = _corpus(DESK_TEMPLATE, CORPUS_SEED, 500)
    t0 = time.time()
    out = engine.train(manifest, DESK_VIT, DESK_CROP, DESK_TRAIN,
                       objectives.LossWeights(), objectives.TemperatureSchedule())
    return {"manifest": manifest, "state": out["state"], "reports": out["reports"],
            "train_seconds": time.time() - t0}


# ------------------------------------------------------------- criterion 1

def test_gradients_match_central_differences():
    t0 = time.time()
    report = checks.run_gradient_checks(master_seed=0, seeds_per_check=20,
                                        tolerance=1e-4)
    elapsed = time.time() - t0
    worst = max(c["max_rel_err"] for c in report["checks"])
    names = {c["name"] for c in report["checks"]}
    ok = (report["passed"] and elapsed < 120.0
          and {"dino_image_loss", "ibot_patch_loss", "koleo_loss",
               "backbone_full"} <= names)
    _line(1, "gradient oracle", ok,
          f"{len(report['checks'])} checks x20 seeds, worst rel err {worst:.2e}, "
          f"{elapsed:.1f}s")
    assert report["passed"]
    assert {"dino_image_loss", "ibot_patch_loss", "koleo_loss", "backbone_full"} <= names
    assert worst <= 1e-4
    assert elapsed < 120.0


# ------------------------------------------------------------- criterion 2

def test_guided_crops_always_land_inside_their_boxes():
    t0 = time.time()
    # half the corpus uses near-frame-filling bodies so the padded box gets
    # clipped against the image border, the regime where naive samplers leak
    tight = data.PhantomTemplate(margin=1, body_fill=(0.90, 0.98),
                                 center_jitter=0.01)
    wide = data.PhantomTemplate()
    rng = data.derive_rng(77, 0)
    cfg = augment.MultiCropConfig()
    checked = 0
    fallbacks = 0
    for i in range(1000):
        spec = data.sample_phantom_spec(tight if i % 2 else wide, rng)
        img, _, _ = data.generate_phantom(spec, seed=i)
        vs = augment.multi_crop(img, cfg, data.derive_rng(77, 1, i))
        bp = vs.box_padded
        for crop, fb in zip(vs.crops, vs.used_fallback):
            fallbacks += int(fb)
            assert bp.y_min <= crop.i <= bp.y_max
            assert bp.x_min <= crop.j <= bp.x_max
            assert crop.i >= 0 and crop.j >= 0
            assert crop.i + crop.h <= img.shape[0]
            assert crop.j + crop.w <= img.shape[1]
            checked += 1
    elapsed = time.time() - t0
    ok = checked == 10_000 and fallbacks == 0 and elapsed < 60.0
    _line(2, "crop containment", ok,
          f"{checked} crops on 1000 phantoms, {fallbacks} fallbacks, {elapsed:.1f}s")
    assert checked == 10_000
    assert fallbacks == 0
    assert elapsed < 60.0


# ------------------------------------------------------------- criterion 3

def test_guided_crops_cover_content_at_least_twice_as_well():
    t0 = time.time()
    # content box is the central 32x32 quarter of a 64x64 canvas
    e = data.Ellipse
    images = []
    for k in range(40):
        spec = data.PhantomSpec(
            height=64, width=64, body=e(31.5, 31.5, 16.0, 16.0),
            lungs=(e(25.0, 31.5, 5.0, 9.0), e(38.0, 31.5, 5.0, 9.0)),
            nodules=(data.Nodule(cx=25.0, cy=31.5, r=2.0, intensity=0.9),)
            if k % 2 else (),
            margin=8, body_intensity=0.7, lung_intensity=0.2,
            texture_amp=0.4, texture_cells=5)
        img, box, _ = data.generate_phantom(spec, seed=100 + k)
        frac = (box.y_max - box.y_min + 1) * (box.x_max - box.x_min + 1) / img.size
        assert 0.20 <= frac <= 0.30
        images.append(img)
    result = augment.crop_overlap_experiment(images, augment.MultiCropConfig(),
                                             n_crops=10_000, seed=5)
    elapsed = time.time() - t0
    ratio = result["overlap_ratio"]
    ok = ratio >= 2.0 and result["n_crops"] == 10_000 and elapsed < 60.0
    _line(3, "guidance effectiveness", ok,
          f"guided {result['mean_guided_overlap']:.3f} vs unguided "
          f"{result['mean_unguided_overlap']:.3f}, ratio {ratio:.2f}, {elapsed:.1f}s")
    assert result["n_crops"] == 10_000
    assert ratio >= 2.0
    assert elapsed < 60.0


# ------------------------------------------------------------- criterion 4

def test_teacher_is_an_exact_ema_mirror_with_no_gradients():
    vit = ViTConfig(patch_size=4, dim=16, depth=2, heads=2, view_sizes=(8, 4),
                    num_prototypes=8, bottleneck_dim=8, head_hidden=16)
    crop_cfg = augment.MultiCropConfig(global_size=8, local_size=4, local_count=2)
    tconf = engine.TrainConfig(batch_size=4, total_steps=50, seed=11)
    manifest = _corpus(data.PhantomTemplate(), 13, 8)
    batch_all = [data.load_example(manifest, i) for i in range(8)]

    state = engine.init_trainer(vit, seed=tconf.seed)
    shadow = {name: t.data.copy() for name, t in state.teacher.items()}
    shadow_head = {name: t.data.copy() for name, t in state.teacher_head.items()}
    sched = objectives.TemperatureSchedule()
    for step in range(50):
        batch = [batch_all[(step * 4 + k) % 8] for k in range(4)]
        report = engine.train_step(state, batch, crop_cfg=crop_cfg,
                                   weights=objectives.LossWeights(),
                                   temps=sched.at(step, 50), tconf=tconf)
        lam = report["lambda"]
        for name, src in state.student.items():
            shadow[name] = lam * shadow[name] + (1.0 - lam) * src.data
        for name, src in state.student_head.items():
            shadow_head[name] = lam * shadow_head[name] + (1.0 - lam) * src.data

    exact = all(np.array_equal(shadow[n], t.data) for n, t in state.teacher.items())
    exact &= all(np.array_equal(shadow_head[n], t.data)
                 for n, t in state.teacher_head.items())
    gradfree = all(not t.requires_grad and t.grad is None
                   for group in (state.teacher, state.teacher_head)
                   for t in group.values())
    # the optimizer must track student-side tensors only
    student_names = set(state.student) | set(state.student_head)
    opt_clean = set(state.opt.m) == student_names
    endpoints = (engine.momentum_at(0, 50) == 0.996
                 and engine.momentum_at(50, 50) == 1.0
                 and engine.momentum_at(0, 200) == 0.996
                 and engine.momentum_at(200, 200) == 1.0)
    ok = exact and gradfree and opt_clean and endpoints
    _line(4, "teacher EMA asymmetry", ok,
          f"50-step recursion bit-exact={exact}, grad-free={gradfree}, "
          f"optimizer student-only={opt_clean}, endpoints exact={endpoints}")
    assert exact and gradfree and opt_clean and endpoints


# ------------------------------------------------------------- criterion 5

def test_desk_training_descends_without_collapsing(desk):
    t0 = time.time()
    reports = desk["reports"]
    first = float(np.mean([r["L_total"] for r in reports[:20]]))
    last = float(np.mean([r["L_total"] for r in reports[-20:]]))
    temps = objectives.TemperatureSchedule().at(DESK_TRAIN.total_steps,
                                                DESK_TRAIN.total_steps)
    collapse = engine.evaluate_collapse(desk["state"], desk["manifest"], temps,
                                        DESK_CROP)
    elapsed = desk["train_seconds"] + (time.time() - t0)
    ok = last < first and collapse > 1e-3 and elapsed < 600.0
    _line(5, "training sanity", ok,
          f"L_total first20 {first:.4f} -> last20 {last:.4f}, "
          f"collapse {collapse:.2e} (> 1e-3 required), {elapsed:.0f}s")
    assert len(reports) == DESK_TRAIN.total_steps
    assert last < first
    assert collapse > 1e-3
    assert elapsed < 600.0


# ------------------------------------------------------------- criterion 6

def test_pretrained_features_outscore_random_features_under_linear_probe(desk):
    t0 = time.time()
    train_man = _corpus(DESK_TEMPLATE, PROBE_TRAIN_SEED, 400)
    eval_man = _corpus(DESK_TEMPLATE, PROBE_EVAL_SEED, 400)
    random_state = engine.init_trainer(DESK_VIT, seed=DESK_TRAIN.seed)

    scores = {}
    for name, state in (("trained", desk["state"]), ("random", random_state)):
        feats = probe.extract_features(state, train_man, DESK_CROP)
        lin = probe.train_linear_probe(feats, seed=0)
        ev = probe.extract_features(state, eval_man, DESK_CROP)
        scores[name] = (probe.evaluate_probe(lin, ev, "accuracy").value,
                        probe.evaluate_probe(lin, ev, "auroc").value)
    acc_gap = scores["trained"][0] - scores["random"][0]
    auroc_gap = scores["trained"][1] - scores["random"][1]
    elapsed = time.time() - t0
    ok = acc_gap >= 0.10 and auroc_gap >= 0.05 and elapsed < 300.0
    _line(6, "probing protocol", ok,
          f"acc {scores['random'][0]:.3f} -> {scores['trained'][0]:.3f} "
          f"(gap {acc_gap:+.3f}, need >= +0.10), "
          f"auroc {scores['random'][1]:.3f} -> {scores['trained'][1]:.3f} "
          f"(gap {auroc_gap:+.3f}, need >= +0.05), {elapsed:.0f}s")
    assert len(eval_man.records) == 400
    assert acc_gap >= 0.10
    assert auroc_gap >= 0.05
    assert elapsed < 300.0


# ------------------------------------------------------------- criterion 7

def _pair_count_auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else (0.5 if p == q else 0.0)
    return wins / (len(pos) * len(neg))


def test_auroc_agrees_with_pair_enumeration_and_rank_invariance():
    rng = np.random.default_rng(99)
    exact_matches = 0
    for _ in range(100):
        n = int(rng.integers(4, 40))
        labels = np.zeros(n, dtype=int)
        labels[rng.choice(n, size=int(rng.integers(1, n)), replace=False)] = 1
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        scores = rng.integers(0, 6, size=n) / 5.0   # coarse grid forces ties
        if probe.auroc(scores, labels) == _pair_count_auroc(scores, labels):
            exact_matches += 1
    monotone_ok = 0
    transforms = [lambda x: 3.0 * x + 1.0, lambda x: np.exp(0.5 * x),
                  lambda x: x ** 3, lambda x: np.arctan(x) + 0.1 * x]
    for trial in range(100):
        n = int(rng.integers(4, 40))
        labels = (rng.uniform(size=n) < 0.5).astype(int)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        scores = rng.integers(0, 50, size=n) / 7.0
        base = probe.auroc(scores, labels)
        f = transforms[trial % len(transforms)]
        if probe.auroc(f(scores), labels) == base:
            monotone_ok += 1
    ok = exact_matches == 100 and monotone_ok == 100
    _line(7, "metric correctness", ok,
          f"pair enumeration exact on {exact_matches}/100 sets, "
          f"monotone invariance on {monotone_ok}/100 trials")
    assert exact_matches == 100
    assert monotone_ok == 100


# ------------------------------------------------------------- criterion 8

def test_runs_and_checkpoints_are_byte_reproducible(tmp_path):
    manifest = _corpus(data.PhantomTemplate(), 7, 6)
    data.save_manifest(manifest, str(tmp_path / "man.json"))
    doc = {
        "manifest": "man.json",
        "train": {"batch_size": 2, "total_steps": 10, "seed": 5,
                  "checkpoint_every": 5},
        "crop": {"global": {"size": 8}, "local": {"size": 4, "count": 2}},
        "vit": {"patch_size": 4, "dim": 16, "depth": 2, "heads": 2,
                "view_sizes": [8, 4], "num_prototypes": 8, "bottleneck_dim": 8,
                "head_hidden": 16},
    }
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps(doc))

    outs = []
    for sub in ("a", "b"):
        rc = cli.main(["pretrain", "--config", str(cfg),
                       "--out", str(tmp_path / sub), "--deterministic"])
        assert rc == 0
        outs.append(tmp_path / sub)
    log_same = (outs[0] / "train_log.jsonl").read_bytes() == \
               (outs[1] / "train_log.jsonl").read_bytes()
    ckpts = sorted(p.name for p in outs[0].glob("ckpt_step*.bin"))
    ckpt_same = all((outs[0] / n).read_bytes() == (outs[1] / n).read_bytes()
                    for n in ckpts)

    # save -> load -> save must reproduce the file bit for bit
    src = outs[0] / "ckpt_step10.bin"
    state, extra = engine.load_checkpoint(str(src))
    resaved = tmp_path / "resaved.bin"
    engine.save_checkpoint(state, str(resaved), extra=extra)
    roundtrip_same = src.read_bytes() == resaved.read_bytes()

    ok = log_same and ckpt_same and roundtrip_same and len(ckpts) >= 2
    _line(8, "determinism and persistence", ok,
          f"logs identical={log_same}, {len(ckpts)} checkpoints identical="
          f"{ckpt_same}, save/load/save identical={roundtrip_same}")
    assert log_same and ckpt_same and roundtrip_same


# ------------------------------------------------------------- criterion 9

def test_loss_identities_and_weighting_linearity():
    K = 256
    # one teacher view, two student views, all uniform: exactly one scored
    # pair, whose cross-entropy is ln K
    t_probs = np.full((1, K), 1.0 / K)
    s_logp = nm.log_softmax_t(nm.Tensor(np.zeros((2, K))))
    image = objectives.dino_image_loss(t_probs, s_logp)
    image_err = abs(float(image.data) - np.log(K))

    uniform = nm.Tensor(np.full((3, K), 1.0 / K))
    koleo_uniform = abs(float(objectives.koleo_loss(uniform).data))
    onehot = np.zeros((1, K))
    onehot[0, 3] = 1.0
    koleo_onehot = abs(float(objectives.koleo_loss(nm.Tensor(onehot)).data)
                       - np.log(K))

    rng = np.random.default_rng(4)
    parts = [nm.tsum(nm.Tensor(rng.uniform(0.1, 1.0, size=7))) for _ in range(3)]
    vals = [float(p.data) for p in parts]
    worst_lin = 0.0
    for _ in range(100):
        a, b, c = rng.uniform(0.01, 3.0, size=3)
        w = objectives.LossWeights(alpha_image=a, alpha_patch=b, alpha_koleo=c)
        total = objectives.total_loss(w, *parts)
        worst_lin = max(worst_lin,
                        abs(float(total.data) - (a * vals[0] + b * vals[1]
                                                 + c * vals[2])))
    ok = (image_err <= 1e-12 and koleo_uniform <= 1e-12
          and koleo_onehot <= 1e-12 and worst_lin <= 1e-12)
    _line(9, "loss identities", ok,
          f"uniform-pair err {image_err:.1e}, koleo(U) {koleo_uniform:.1e}, "
          f"koleo(one-hot)-lnK {koleo_onehot:.1e}, linearity worst "
          f"{worst_lin:.1e}")
    assert image_err <= 1e-12
    assert koleo_uniform <= 1e-12
    assert koleo_onehot <= 1e-12
    assert worst_lin <= 1e-12
