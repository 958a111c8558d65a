"""Finite-difference verification suite for every differentiable code path.

Each named check builds a scalar function of its inputs and compares the
reverse-mode gradient against central finite differences over many random
instances, reporting the worst relative error.  Test inputs are drawn at unit
scale on purpose: production-scale initializations (sigma 0.02) push values
through near-zero normalization denominators where the finite-difference
oracle itself loses accuracy, which would test the oracle, not the gradients.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nm
from .numerics import Tensor
from .backbone import ViTConfig, init_backbone, init_head, encode, project
from .objectives import (CenterState, dino_image_loss, ibot_patch_loss, koleo_loss,
                         teacher_distribution)

__all__ = ["run_gradient_checks", "TINY_VIT", "DEFAULT_TOLERANCE"]

DEFAULT_TOLERANCE = 1e-4
TINY_VIT = ViTConfig(patch_size=4, dim=16, depth=2, heads=2, view_sizes=(8,),
                     num_prototypes=8, bottleneck_dim=8, head_hidden=16)


def _op_cases(rng: np.random.Generator):
    """One (name, build, inputs) triple per differentiable operation."""
    a = rng.normal(size=(4, 5))
    b = rng.normal(size=(4, 5))
    v = rng.normal(size=(5,))
    m1 = rng.normal(size=(4, 3))
    m2 = rng.normal(size=(3, 6))
    bat1 = rng.normal(size=(2, 3, 4))
    bat2 = rng.normal(size=(2, 4, 5))
    pos = rng.uniform(0.5, 2.0, size=(4, 5))
    simplex = rng.uniform(0.1, 1.0, size=7)
    simplex = simplex / simplex.sum()
    gain = 1.0 + 0.1 * rng.normal(size=5)
    bias = 0.1 * rng.normal(size=5)
    scalar = np.array(rng.normal())
    # every weighting constant is drawn up front: the build closures are
    # re-evaluated by the finite-difference oracle and must be pure
    c1 = rng.normal(size=(4, 5))
    c2 = rng.normal(size=(2, 5))
    c3 = rng.normal(size=(3, 5))
    cb = rng.normal(size=(2, 3, 4))
    c_mm = rng.normal(size=(4, 6))
    c_bmm = rng.normal(size=(2, 3, 5))
    c_rows = rng.normal(size=(4, 5))
    c_vec = rng.normal(size=5)
    c_col = rng.normal(size=(4, 1))
    scat = rng.normal(size=(2, 5))

    def weighted_sum(t, c):
        return nm.tsum(nm.mul(t, Tensor(c)))

    return [
        ("add", lambda x, y: weighted_sum(nm.add(x, y), c1), [a, b]),
        ("add_scalar", lambda x, s: weighted_sum(nm.add(x, s), c1), [a, scalar]),
        ("sub", lambda x, y: weighted_sum(nm.sub(x, y), c1), [a, b]),
        ("mul", lambda x, y: weighted_sum(nm.mul(x, y), c1), [a, b]),
        ("scale", lambda x: weighted_sum(nm.scale(x, -1.7), c1), [a]),
        ("div_scalar", lambda x: weighted_sum(x / 2.5, c1), [a]),
        ("matmul", lambda x, y: weighted_sum(nm.matmul(x, y), c_mm), [m1, m2]),
        ("bmm", lambda x, y: weighted_sum(nm.bmm(x, y), c_bmm), [bat1, bat2]),
        ("transpose", lambda x: weighted_sum(nm.transpose(x, (2, 0, 1)), cb.transpose(2, 0, 1)),
         [cb]),
        ("reshape", lambda x: weighted_sum(nm.reshape(x, (2, 10)), c1.reshape(2, 10)), [a]),
        ("concat", lambda x, y: weighted_sum(nm.concat([x, y], axis=0),
                                             np.concatenate([c2, c3], axis=0)),
         [c2 * 1.0, c3 * 1.0]),
        ("take_rows", lambda x: weighted_sum(nm.take_rows(x, [0, 2, 2, 3]), c_rows), [a]),
        ("scatter_rows", lambda x, r: weighted_sum(nm.scatter_rows(x, [1, 3], r), c1),
         [a, scat]),
        ("repeat_rows", lambda x: weighted_sum(nm.repeat_rows(x, 3), c3), [v]),
        ("bias_add", lambda x, y: weighted_sum(nm.bias_add(x, y), c1), [a, v]),
        ("tsum", lambda x: nm.tsum(nm.mul(x, Tensor(c1))), [a]),
        ("tsum_axis", lambda x: weighted_sum(nm.tsum(x, axis=0), c_vec), [a]),
        ("tmean", lambda x: nm.tmean(nm.mul(x, Tensor(c1))), [a]),
        ("tmean_axis", lambda x: weighted_sum(nm.tmean(x, axis=1, keepdims=True), c_col),
         [a]),
        ("tlog", lambda x: weighted_sum(nm.tlog(x), c1), [pos]),
        ("texp", lambda x: weighted_sum(nm.texp(x), c1), [a * 0.5]),
        ("gelu", lambda x: weighted_sum(nm.gelu(x), c1), [a]),
        ("layer_norm", lambda x, g, bi: weighted_sum(nm.layer_norm(x, g, bi), c1),
         [a, gain, bias]),
        ("softmax_t", lambda x: weighted_sum(nm.softmax_t(x, tau=0.7), c1), [a]),
        ("log_softmax_t", lambda x: weighted_sum(nm.log_softmax_t(x, tau=0.7), c1), [a]),
        ("l2_normalize", lambda x: weighted_sum(nm.l2_normalize(x), c1), [a]),
        ("kl_to_uniform", lambda p: nm.kl_to_uniform(p), [simplex]),
    ]


def _loss_cases(rng: np.random.Generator):
    K = 6
    center = CenterState(center=rng.normal(size=K) * 0.1)
    t_img = teacher_distribution(rng.normal(size=(2, K)), center, 0.06)
    t_patch = teacher_distribution(rng.normal(size=(5, K)), center, 0.06)
    student_img = rng.normal(size=(4, K))
    student_patch = rng.normal(size=(5, K))

    return [
        ("dino_image_loss",
         lambda lg: dino_image_loss(t_img, nm.log_softmax_t(lg, tau=0.1)),
         [student_img]),
        ("ibot_patch_loss",
         lambda lg: ibot_patch_loss(t_patch, nm.log_softmax_t(lg, tau=0.1), [0, 2, 4]),
         [student_patch]),
        ("koleo_loss",
         lambda lg: koleo_loss(nm.softmax_t(lg, tau=0.1)),
         [student_patch]),
    ]


def _conditioned_arrays(params: dict[str, Tensor], rng: np.random.Generator):
    out = []
    for name, t in params.items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("g",):
            out.append(1.0 + 0.1 * rng.normal(size=t.shape))
        elif leaf in ("b",) or t.ndim == 1:
            out.append(0.1 * rng.normal(size=t.shape))
        else:
            fan = t.shape[-1] if t.ndim >= 1 else 1
            out.append(rng.normal(size=t.shape) * (0.7 / np.sqrt(fan)))
    return out


def _backbone_case(rng: np.random.Generator):
    params = init_backbone(TINY_VIT, rng)
    head = init_head(TINY_VIT, rng)
    arrays = _conditioned_arrays(params, rng) + _conditioned_arrays(head, rng)
    img = rng.uniform(0.0, 1.0, size=(8, 8))
    n_backbone = len(params)
    weight = rng.normal(size=(5, TINY_VIT.num_prototypes))

    def build(*ts):
        p = {k: t for k, t in zip(params, ts[:n_backbone])}
        h = {k: t for k, t in zip(head, ts[n_backbone:])}
        out = encode(p, TINY_VIT, img, mask_indices=[1, 3])
        logits = project(h, nm.concat([out.cls_feat, out.patch_feats], axis=0))
        return nm.tsum(nm.mul(logits, Tensor(weight)))

    return build, arrays


def run_gradient_checks(master_seed: int = 0, seeds_per_check: int = 20,
                        tolerance: float = DEFAULT_TOLERANCE,
                        backbone_coords: int = 2) -> dict:
    """Run the whole suite; returns a JSON-ready report.

    ``backbone_coords`` limits the finite-difference probe to that many random
    coordinates per parameter tensor for the full-model check (the analytic
    side is always complete); all other checks difference every coordinate.
    """
    ss = np.random.SeedSequence(master_seed)
    results = []

    names = [name for name, _, _ in _op_cases(np.random.default_rng(0))]
    names += [name for name, _, _ in _loss_cases(np.random.default_rng(0))]
    worst: dict[str, float] = {name: 0.0 for name in names}
    worst["backbone_full"] = 0.0

    for trial, child in enumerate(ss.spawn(seeds_per_check)):
        rng = np.random.Generator(np.random.PCG64(child))
        for name, build, inputs in _op_cases(rng) + _loss_cases(rng):
            err = nm.gradient_check(build, inputs)
            worst[name] = max(worst[name], err)
        build, arrays = _backbone_case(rng)
        err = nm.gradient_check(build, arrays, coords=backbone_coords,
                                rng=np.random.default_rng(1000 + trial))
        worst["backbone_full"] = max(worst["backbone_full"], err)

    for name in worst:
        results.append({"name": name, "max_rel_err": float(worst[name]),
                        "passed": bool(worst[name] <= tolerance)})
    return {
        "tolerance": tolerance,
        "seeds_per_check": seeds_per_check,
        "passed": all(r["passed"] for r in results),
        "checks": results,
    }
