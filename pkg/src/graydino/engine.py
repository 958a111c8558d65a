"""Training engine: schedules, optimizer, EMA teacher, checkpoints, the loop.

One training step, per image in the batch: build content-guided views, run the
teacher over the global views (no gradient path by construction), run the
student over every view with one designated global view patch-masked, and
score the three losses.  Gradients flow only into student parameters; the
teacher then moves toward the student by an exponential moving average whose
momentum follows a cosine schedule, and the center tracking teacher logits is
updated once per step.

Memory note: image-level and patch losses are backpropagated per image (their
batch reduction is a mean), while the uniformity regularizer couples the whole
batch through the averaged patch distribution, so only the masked-view
subgraphs are kept alive until the batch-level backward.  Gradient
accumulation across these backward passes is exact.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .numerics import Tensor
from .augment import MultiCropConfig, content_box, extract_crop, multi_crop, resize_bilinear
from .backbone import (BackboneOutput, ViTConfig, clone_params, encode, init_backbone,
                       init_head, num_patches, project)
from .data import DatasetManifest, derive_rng, iterate_batches
from .objectives import (CenterState, LossWeights, TemperatureSchedule, Temperatures,
                         dino_image_loss, ibot_patch_loss, koleo_loss, sample_mask,
                         teacher_distribution, total_loss, update_center)

__all__ = [
    "TrainingDivergence", "CheckpointError", "TrainConfig", "OptimizerConfig",
    "OptimizerState", "TrainerState", "momentum_at", "lr_at", "ema_update",
    "adamw_step", "clip_gradients", "init_trainer", "train_step", "train",
    "collapse_metric", "evaluate_collapse", "center_resize",
    "save_checkpoint", "load_checkpoint", "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = b"GDCKPT01"


class TrainingDivergence(RuntimeError):
    """Loss or gradients stopped being finite."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class CheckpointError(ValueError):
    """A checkpoint file is malformed or inconsistent with its header."""


# ---------------------------------------------------------------------------
# schedules


def momentum_at(step: int, total: int, start: float = 0.996, end: float = 1.0) -> float:
    """Cosine ramp of the teacher EMA momentum; clamps to ``end`` past ``total``."""
    if not 0.0 <= start <= end <= 1.0:
        raise ValueError(f"need 0 <= start <= end <= 1, got {start}, {end}")
    if total < 1:
        raise ValueError("total must be >= 1")
    if step >= total:
        return end
    t = max(step, 0)
    return end - (end - start) * (1.0 + np.cos(np.pi * t / total)) / 2.0


def lr_at(step: int, total: int, warmup_frac: float, base_lr: float) -> float:
    """Linear warmup from 0 to base_lr, then cosine decay to 0 at ``total``."""
    if total < 1:
        raise ValueError("total must be >= 1")
    if not 0.0 <= warmup_frac < 1.0:
        raise ValueError("warmup_frac must be in [0, 1)")
    warm = int(round(warmup_frac * total))
    t = min(max(step, 0), total)
    if t < warm:
        return base_lr * t / warm
    span = max(total - warm, 1)
    return base_lr * (1.0 + np.cos(np.pi * (t - warm) / span)) / 2.0


def ema_update(teacher: dict[str, Tensor], student: dict[str, Tensor], lam: float) -> None:
    """theta_t <- lam * theta_t + (1 - lam) * theta_s, elementwise in float64.

    The exact expression matters: tests recompute the recursion bit-for-bit.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"momentum must be in [0, 1], got {lam}")
    if set(teacher) != set(student):
        raise ValueError("teacher and student parameter names differ")
    for name, t in teacher.items():
        s = student[name]
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch for {name}: {t.shape} vs {s.shape}")
        t.data = lam * t.data + (1.0 - lam) * s.data


# ---------------------------------------------------------------------------
# optimizer


@dataclass(frozen=True)
class OptimizerConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.04

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must be in [0, 1)")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ValueError("eps must be positive, weight_decay nonnegative")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step_count: int = 0

    @staticmethod
    def init(params: dict[str, Tensor]) -> "OptimizerState":
        return OptimizerState(m={k: np.zeros(t.shape) for k, t in params.items()},
                              v={k: np.zeros(t.shape) for k, t in params.items()},
                              step_count=0)


def _decays(name: str, t: Tensor) -> bool:
    # matrices decay; vectors, norm gains/biases, tokens and positions do not
    leaf = name.rsplit(".", 1)[-1] if "." in name else name
    if leaf in ("cls", "mask_token") or ".pos." in f".{name}":
        return False
    return t.ndim >= 2


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients jointly so the global L2 norm is at most max_norm.

    max_norm = 0 disables clipping.  Returns the pre-clip global norm.
    """
    sq = 0.0
    for g in grads.values():
        sq += float(np.sum(g * g))
    norm = float(np.sqrt(sq))
    if max_norm > 0.0 and norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def adamw_step(opt: OptimizerState, params: dict[str, Tensor],
               grads: dict[str, np.ndarray], lr: float,
               cfg: OptimizerConfig = OptimizerConfig()) -> None:
    """One decoupled-weight-decay Adam update on the given parameters.

    Weight decay shrinks eligible parameters before the adaptive step; moments
    are bias-corrected.  Raises TrainingDivergence naming the first parameter
    whose gradient is not finite.
    """
    for name in params:
        if name not in grads:
            raise ValueError(f"missing gradient for parameter {name}")
        if not np.all(np.isfinite(grads[name])):
            raise TrainingDivergence(f"non-finite gradient for parameter {name}")
    opt.step_count += 1
    t = opt.step_count
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if cfg.weight_decay > 0.0 and _decays(name, p):
            p.data = p.data - lr * cfg.weight_decay * p.data
        opt.m[name] = cfg.beta1 * opt.m[name] + (1.0 - cfg.beta1) * g
        opt.v[name] = cfg.beta2 * opt.v[name] + (1.0 - cfg.beta2) * (g * g)
        mhat = opt.m[name] / bc1
        vhat = opt.v[name] / bc2
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + cfg.eps)


# ---------------------------------------------------------------------------
# trainer state


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    total_steps: int = 200
    warmup_frac: float = 0.1
    base_lr: float = 2e-3
    weight_decay: float = 0.04
    clip_norm: float = 3.0              # 0 disables clipping
    seed: int = 0
    momentum_start: float = 0.996
    momentum_end: float = 1.0
    center_momentum: float = 0.9
    mask_ratio: tuple[float, float] = (0.1, 0.5)
    checkpoint_every: int = 0           # 0 = final checkpoint only
    pair_reduction: str = "mean"

    def __post_init__(self):
        if self.batch_size < 1 or self.total_steps < 1:
            raise ValueError("batch_size and total_steps must be positive")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must be in [0, 1)")
        if self.base_lr <= 0 or self.weight_decay < 0 or self.clip_norm < 0:
            raise ValueError("base_lr must be positive; decay and clip nonnegative")
        if not 0.0 <= self.momentum_start <= self.momentum_end <= 1.0:
            raise ValueError("momentum schedule must satisfy 0 <= start <= end <= 1")
        if not 0.0 <= self.center_momentum <= 1.0:
            raise ValueError("center momentum must be in [0, 1]")
        lo, hi = self.mask_ratio
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError("mask_ratio must be an ordered pair within [0, 1]")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be nonnegative")
        if self.pair_reduction not in ("mean", "sum"):
            raise ValueError("pair_reduction must be 'mean' or 'sum'")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mask_ratio"] = list(self.mask_ratio)
        return d


@dataclass
class TrainerState:
    vit: ViTConfig
    student: dict[str, Tensor]
    teacher: dict[str, Tensor]
    student_head: dict[str, Tensor]
    teacher_head: dict[str, Tensor]
    # class-token and patch logits have very different running statistics, so
    # each stream keeps its own center
    center_image: CenterState
    center_patch: CenterState
    opt: OptimizerState
    step: int = 0

    def trainable(self) -> dict[str, Tensor]:
        merged = dict(self.student)
        merged.update(self.student_head)
        return merged

    def teacher_all(self) -> dict[str, Tensor]:
        merged = dict(self.teacher)
        merged.update(self.teacher_head)
        return merged


def init_trainer(vit: ViTConfig, seed: int, center_momentum: float = 0.9) -> TrainerState:
    """Student and teacher start identical; only the student is trainable."""
    student = init_backbone(vit, derive_rng(seed, 0), trainable=True)
    student_head = init_head(vit, derive_rng(seed, 1), trainable=True)
    teacher = clone_params(student, trainable=False)
    teacher_head = clone_params(student_head, trainable=False)
    merged = dict(student)
    merged.update(student_head)
    return TrainerState(vit=vit, student=student, teacher=teacher,
                        student_head=student_head, teacher_head=teacher_head,
                        center_image=CenterState(center=np.zeros(vit.num_prototypes),
                                                 momentum=center_momentum),
                        center_patch=CenterState(center=np.zeros(vit.num_prototypes),
                                                 momentum=center_momentum),
                        opt=OptimizerState.init(merged), step=0)


# ---------------------------------------------------------------------------
# the step


def _class_logits(params, head, vit, view, mask_indices=None) -> tuple[Tensor, BackboneOutput]:
    out = encode(params, vit, view, mask_indices=mask_indices)
    return project(head, out.cls_feat), out


def train_step(state: TrainerState, batch, *, crop_cfg: MultiCropConfig,
               weights: LossWeights, temps: Temperatures, tconf: TrainConfig) -> dict:
    """Run one optimization step over a batch of loaded examples."""
    if not batch:
        raise ValueError("empty batch")
    step = state.step
    lam = momentum_at(step, tconf.total_steps, tconf.momentum_start, tconf.momentum_end)
    lr = lr_at(step, tconf.total_steps, tconf.warmup_frac, tconf.base_lr)

    trainable = state.trainable()
    nm.zero_grads(trainable.values())

    n_img = len(batch)
    image_loss_sum = 0.0
    patch_loss_sum = 0.0
    teacher_cls_rows = []
    teacher_patch_rows = []
    koleo_parts: list[Tensor] = []      # masked-view patch probs, graphs kept alive

    for slot, example in enumerate(batch):
        rng = derive_rng(tconf.seed, 4, step, slot)
        views = multi_crop(example.image, crop_cfg, rng)
        n_global = crop_cfg.global_count
        n_patch = num_patches(state.vit, crop_cfg.global_size)
        mask = sample_mask(rng, n_patch, tconf.mask_ratio)

        # teacher forward on global views only; logits leave the graph as data
        t_cls = []
        t_patch_probs = None
        for j in range(n_global):
            logits_t, out_t = _class_logits(state.teacher, state.teacher_head,
                                            state.vit, views.views[j])
            t_cls.append(logits_t.data[0])
            if j == 0:
                patch_logits_t = project(state.teacher_head, out_t.patch_feats)
                teacher_patch_rows.append(patch_logits_t.data)
                t_patch_probs = teacher_distribution(patch_logits_t.data,
                                                     state.center_patch, temps.teacher)
        t_cls = np.stack(t_cls, axis=0)
        teacher_cls_rows.append(t_cls)
        t_probs = teacher_distribution(t_cls, state.center_image, temps.teacher)

        # student forward on all views; global view 0 carries the patch mask
        s_cls_rows = []
        s_patch_logits = None
        for i, view in enumerate(views.views):
            use_mask = mask if i == 0 else None
            logits_s, out_s = _class_logits(state.student, state.student_head,
                                            state.vit, view, mask_indices=use_mask)
            s_cls_rows.append(logits_s)
            if i == 0:
                s_patch_logits = project(state.student_head, out_s.patch_feats)
        s_cls = nm.concat(s_cls_rows, axis=0)
        s_logp = nm.log_softmax_t(s_cls, tau=temps.student)

        img_loss = dino_image_loss(t_probs, s_logp, pair_reduction=tconf.pair_reduction)
        patch_loss = ibot_patch_loss(t_patch_probs, nm.log_softmax_t(
            s_patch_logits, tau=temps.student), mask)

        image_loss_sum += img_loss.item()
        patch_loss_sum += patch_loss.item()
        if not (np.isfinite(img_loss.item()) and np.isfinite(patch_loss.item())):
            raise TrainingDivergence(f"non-finite loss at step {step}", step=step)

        # backpropagate the decomposable terms now; keep only the patch-prob
        # subgraph for the batch-coupled uniformity term
        per_image = nm.scale(nm.add(nm.scale(img_loss, weights.alpha_image),
                                    nm.scale(patch_loss, weights.alpha_patch)),
                             1.0 / n_img)
        per_image.backward()
        koleo_parts.append(nm.softmax_t(s_patch_logits, tau=temps.student))

    kol = koleo_loss(nm.concat(koleo_parts, axis=0))
    koleo_val = kol.item()
    if not np.isfinite(koleo_val):
        raise TrainingDivergence(f"non-finite loss at step {step}", step=step)
    nm.scale(kol, weights.alpha_koleo).backward()

    grads = {}
    for name, p in trainable.items():
        grads[name] = p.grad if p.grad is not None else np.zeros(p.shape)
    grad_norm = clip_gradients(grads, tconf.clip_norm)
    adamw_step(state.opt, trainable, grads, lr,
               OptimizerConfig(weight_decay=tconf.weight_decay))

    ema_update(state.teacher, state.student, lam)
    ema_update(state.teacher_head, state.student_head, lam)
    state.center_image = update_center(state.center_image,
                                       np.concatenate(teacher_cls_rows, axis=0))
    state.center_patch = update_center(state.center_patch,
                                       np.concatenate(teacher_patch_rows, axis=0))
    state.step = step + 1

    image_loss_mean = image_loss_sum / n_img
    patch_loss_mean = patch_loss_sum / n_img
    total = (weights.alpha_image * image_loss_mean
             + weights.alpha_patch * patch_loss_mean
             + weights.alpha_koleo * koleo_val)
    return {
        "step": step,
        "L_image": image_loss_mean,
        "L_patch": patch_loss_mean,
        "L_koleo": koleo_val,
        "L_total": total,
        "lr": lr,
        "lambda": lam,
        "tau_t": temps.teacher,
        "grad_norm": grad_norm,
    }


# ---------------------------------------------------------------------------
# diagnostics


def collapse_metric(distributions: np.ndarray) -> float:
    """Mean per-dimension standard deviation of distributions across images.

    Values near zero mean every image maps to the same prototype distribution,
    the signature of a collapsed representation.
    """
    d = np.asarray(distributions, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] < 2:
        raise ValueError(f"need at least two (rows, K) distributions, got {d.shape}")
    return float(d.std(axis=0, ddof=0).mean())


def center_resize(img: np.ndarray, theta: float, out_size: int) -> np.ndarray:
    """Deterministic evaluation view: crop to the content box, resize square."""
    box = content_box(img, theta)
    if box is None:
        crop = np.asarray(img, dtype=np.float64)
    else:
        crop = np.asarray(img, dtype=np.float64)[box.y_min:box.y_max + 1,
                                                 box.x_min:box.x_max + 1]
    return resize_bilinear(crop, out_size, out_size)


def evaluate_collapse(state: TrainerState, manifest: DatasetManifest,
                      temps: Temperatures, crop_cfg: MultiCropConfig,
                      max_images: int = 64) -> float:
    """Collapse diagnostic over the first images of the manifest (teacher branch)."""
    from .data import load_example
    n = min(max_images, len(manifest.records))
    if n < 2:
        raise ValueError("need at least two images for the collapse metric")
    rows = []
    for i in range(n):
        ex = load_example(manifest, i)
        view = center_resize(ex.image, crop_cfg.theta, crop_cfg.global_size)
        logits, _ = _class_logits(state.teacher, state.teacher_head, state.vit, view)
        rows.append(teacher_distribution(logits.data[0], state.center_image,
                                         temps.teacher))
    return collapse_metric(np.stack(rows, axis=0))


# ---------------------------------------------------------------------------
# checkpoint container: magic, u64 header length, JSON header, tensor payload


def _canonical_json(doc: dict) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _tensor_map(state: TrainerState) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for prefix, group in (("student", state.student), ("teacher", state.teacher),
                          ("student_head", state.student_head),
                          ("teacher_head", state.teacher_head)):
        for name, t in group.items():
            out[f"{prefix}.{name}"] = t.data
    out["center.image"] = state.center_image.center
    out["center.patch"] = state.center_patch.center
    for name, arr in state.opt.m.items():
        out[f"opt.m.{name}"] = arr
    for name, arr in state.opt.v.items():
        out[f"opt.v.{name}"] = arr
    return out


def save_checkpoint(state: TrainerState, path: str, extra: dict | None = None) -> None:
    """Write the trainer state: magic, u64 LE header length, canonical JSON
    header, then float64 little-endian tensor blocks in sorted name order."""
    tensors = _tensor_map(state)
    index = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    header = {
        "format": 1,
        "vit": state.vit.to_dict(),
        "step": state.step,
        "center_momentum": state.center_image.momentum,
        "opt_step_count": state.opt.step_count,
        "tensors": index,
        "extra": extra or {},
    }
    blob = _canonical_json(header)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in sorted(tensors):
            fh.write(np.ascontiguousarray(tensors[name], dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[TrainerState, dict]:
    """Inverse of save_checkpoint; returns (state, extra header dict)."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + hlen:
        raise CheckpointError(f"{path}: truncated header block")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: undecodable header ({exc})") from exc
    if header.get("format") != 1:
        raise CheckpointError(f"{path}: unsupported format {header.get('format')}")

    payload = raw[16 + hlen:]
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * 8
        if end > len(payload):
            raise CheckpointError(f"{path}: tensor {entry['name']} exceeds payload")
        tensors[entry["name"]] = np.frombuffer(
            payload[start:end], dtype="<f8").astype(np.float64).reshape(shape)

    vit = ViTConfig.from_dict(header["vit"])

    # "student." is a prefix of "student_head.", so exclusions must be explicit
    def group(prefix: str, trainable: bool, exclude: str | None = None) -> dict[str, Tensor]:
        plen = len(prefix) + 1
        names = sorted(k[plen:] for k in tensors if k.startswith(prefix + ".")
                       and not (exclude and k.startswith(exclude + ".")))
        return {n: Tensor(tensors[f"{prefix}.{n}"], requires_grad=trainable)
                for n in names}

    student = group("student", True, exclude="student_head")
    teacher = group("teacher", False, exclude="teacher_head")
    student_head = group("student_head", True)
    teacher_head = group("teacher_head", False)
    for cname in ("center.image", "center.patch"):
        if cname not in tensors:
            raise CheckpointError(f"{path}: missing tensor {cname}")

    merged_names = list(student) + list(student_head)
    opt = OptimizerState(
        m={k: tensors[f"opt.m.{k}"] for k in merged_names},
        v={k: tensors[f"opt.v.{k}"] for k in merged_names},
        step_count=int(header["opt_step_count"]),
    )
    cm = float(header["center_momentum"])
    state = TrainerState(
        vit=vit, student=student, teacher=teacher,
        student_head=student_head, teacher_head=teacher_head,
        center_image=CenterState(center=tensors["center.image"], momentum=cm),
        center_patch=CenterState(center=tensors["center.patch"], momentum=cm),
        opt=opt, step=int(header["step"]),
    )
    # sanity: reconstructed tensor set must match what a save would emit
    missing = set(tensors) - set(_tensor_map(state))
    if missing:
        raise CheckpointError(f"{path}: unrecognized tensors {sorted(missing)[:4]}")
    return state, header.get("extra", {})


# ---------------------------------------------------------------------------
# the loop


def train(manifest: DatasetManifest, vit: ViTConfig, crop_cfg: MultiCropConfig,
          tconf: TrainConfig, weights: LossWeights, temp_schedule: TemperatureSchedule,
          out_dir: str | None = None, resume: str | None = None,
          on_step=None) -> dict:
    """Run the full training loop; returns a summary report.

    Writes ``train_log.jsonl`` (one JSON object per step) and checkpoints
    ``ckpt_step{N}.bin`` into ``out_dir`` when given.  ``resume`` loads a
    checkpoint and continues from its step; determinism is stateless, so a
    resumed run retraces the exact batch order and augmentation draws of an
    uninterrupted one.  ``on_step(state, report)`` runs after every step.
    """
    if resume is not None:
        state, _ = load_checkpoint(resume)
        if state.vit != vit:
            raise CheckpointError("resume checkpoint config does not match run config")
    else:
        state = init_trainer(vit, tconf.seed, tconf.center_momentum)

    log_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_fh = open(os.path.join(out_dir, "train_log.jsonl"), "a")

    batches_per_epoch = (len(manifest.records) + tconf.batch_size - 1) // tconf.batch_size
    reports = []
    try:
        while state.step < tconf.total_steps:
            epoch = state.step // batches_per_epoch
            index_in_epoch = state.step % batches_per_epoch
            for bi, batch in enumerate(iterate_batches(manifest, tconf.batch_size, epoch)):
                if bi < index_in_epoch:
                    continue
                if state.step >= tconf.total_steps:
                    break
                temps = temp_schedule.at(state.step, tconf.total_steps)
                report = train_step(state, batch, crop_cfg=crop_cfg, weights=weights,
                                    temps=temps, tconf=tconf)
                reports.append(report)
                if log_fh is not None:
                    line = json.dumps({k: report[k] for k in
                                       ("step", "L_image", "L_patch", "L_koleo",
                                        "L_total", "lr", "lambda", "tau_t")})
                    log_fh.write(line + "\n")
                    log_fh.flush()
                if on_step is not None:
                    on_step(state, report)
                if (out_dir is not None and tconf.checkpoint_every > 0
                        and state.step % tconf.checkpoint_every == 0
                        and state.step < tconf.total_steps):
                    save_checkpoint(state, os.path.join(
                        out_dir, f"ckpt_step{state.step}.bin"),
                        extra={"seed": tconf.seed, "train": tconf.to_dict(),
                               "crop": dataclasses.asdict(crop_cfg)})
    finally:
        if log_fh is not None:
            log_fh.close()

    final_path = None
    if out_dir is not None:
        final_path = os.path.join(out_dir, f"ckpt_step{state.step}.bin")
        save_checkpoint(state, final_path,
                        extra={"seed": tconf.seed, "train": tconf.to_dict(),
                               "crop": dataclasses.asdict(crop_cfg)})
    return {"state": state, "reports": reports, "final_checkpoint": final_path}
