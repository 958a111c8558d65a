"""Self-distillation losses and the teacher-side conditioning around them.

The student is trained to match sharpened, centered teacher distributions at
two granularities: whole-image (class token, across view pairs) and per-patch
(masked positions only).  A third term pushes the batch-averaged patch
distribution toward uniform, penalizing prototype collapse.  Teacher-side
quantities are plain numpy arrays, so no gradient can reach the teacher by
construction; student-side quantities are autodiff tensors.

Conventions: "logits" are raw prototype cosines, "distributions" live on the
probability simplex, and student inputs to cross-entropies are log
distributions (computed by the caller with the student temperature).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import Tensor

__all__ = [
    "ObjectiveError", "Temperatures", "TemperatureSchedule", "CenterState",
    "LossWeights", "teacher_distribution", "update_center", "sample_mask",
    "dino_image_loss", "ibot_patch_loss", "koleo_loss", "total_loss",
]


class ObjectiveError(ValueError):
    """Loss inputs violate a precondition (view counts, masks, simplex)."""


@dataclass(frozen=True)
class Temperatures:
    student: float = 0.1
    teacher: float = 0.04

    def __post_init__(self):
        if not 0.0 < self.teacher < self.student:
            raise ObjectiveError(
                f"need 0 < teacher temp < student temp, got {self.teacher} vs {self.student}")


@dataclass(frozen=True)
class TemperatureSchedule:
    """Fixed student temperature; teacher temperature ramps linearly early on."""

    student: float = 0.1
    teacher_start: float = 0.04
    teacher_end: float = 0.07
    warmup_frac: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.teacher_start <= self.teacher_end < self.student:
            raise ObjectiveError("need 0 < teacher_start <= teacher_end < student")
        if not 0.0 <= self.warmup_frac <= 1.0:
            raise ObjectiveError("warmup_frac must be in [0, 1]")

    def at(self, step: int, total_steps: int) -> Temperatures:
        ramp = max(1, int(round(self.warmup_frac * total_steps)))
        frac = min(max(step, 0), ramp) / ramp
        teacher = self.teacher_start + frac * (self.teacher_end - self.teacher_start)
        return Temperatures(student=self.student, teacher=teacher)


@dataclass
class CenterState:
    center: np.ndarray          # (K,)
    momentum: float = 0.9

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        if self.center.ndim != 1:
            raise ObjectiveError(f"center must be a vector, got shape {self.center.shape}")
        if not np.all(np.isfinite(self.center)):
            raise ObjectiveError("center must be finite")
        if not 0.0 <= self.momentum < 1.0 and self.momentum != 1.0:
            raise ObjectiveError("center momentum must be in [0, 1]")


@dataclass(frozen=True)
class LossWeights:
    alpha_image: float = 1.0
    alpha_patch: float = 1.0
    alpha_koleo: float = 0.1

    def __post_init__(self):
        w = (self.alpha_image, self.alpha_patch, self.alpha_koleo)
        if any(a < 0 for a in w):
            raise ObjectiveError("loss weights must be nonnegative")
        if not any(a > 0 for a in w):
            raise ObjectiveError("at least one loss weight must be positive")


def teacher_distribution(logits: np.ndarray, center: CenterState,
                         teacher_temp: float) -> np.ndarray:
    """Centered, sharpened teacher distribution(s): softmax((logits - c)/tau).

    Pure numpy on purpose: the teacher path must be gradient-free.  Accepts a
    single K-vector or a stack (rows, K); softmax runs over the last axis,
    max-subtracted for stability at sharp temperatures.
    """
    if teacher_temp <= 0.0:
        raise ObjectiveError(f"teacher temperature must be positive, got {teacher_temp}")
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[-1] != center.center.shape[0]:
        raise ObjectiveError(f"logit dim {logits.shape[-1]} does not match "
                             f"center dim {center.center.shape[0]}")
    z = (logits - center.center) / teacher_temp
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def update_center(state: CenterState, teacher_logits: np.ndarray) -> CenterState:
    """EMA of the batch-mean teacher logits: c <- m*c + (1-m)*mean."""
    batch = np.asarray(teacher_logits, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[0] < 1:
        raise ObjectiveError(f"need a nonempty (rows, K) logit batch, got {batch.shape}")
    if batch.shape[1] != state.center.shape[0]:
        raise ObjectiveError("logit dim does not match center dim")
    m = state.momentum
    new = m * state.center + (1.0 - m) * batch.mean(axis=0)
    return CenterState(center=new, momentum=m)


def sample_mask(rng: np.random.Generator, n_patches: int,
                ratio_range: tuple[float, float] = (0.1, 0.5)) -> np.ndarray:
    """Patch indices to mask: uniform ratio in the range, at least one index,
    sampled without replacement, returned sorted."""
    if n_patches < 1:
        raise ObjectiveError("need at least one patch to mask")
    lo, hi = ratio_range
    if not 0.0 <= lo <= hi <= 1.0:
        raise ObjectiveError(f"mask ratio range must be within [0, 1], got {ratio_range}")
    ratio = rng.uniform(lo, hi)
    count = max(1, int(round(ratio * n_patches)))
    return np.sort(rng.choice(n_patches, size=count, replace=False))


def _check_simplex(p: np.ndarray, what: str) -> None:
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-9):
        raise ObjectiveError(f"{what} rows must lie on the probability simplex")


def dino_image_loss(teacher_probs: np.ndarray, student_logp: Tensor,
                    pair_reduction: str = "mean") -> Tensor:
    """Image-level distillation cross-entropy over view pairs.

    ``teacher_probs`` holds the teacher's distributions for the global views
    (rows 0..G-1, aligned with the first G student views).  ``student_logp``
    holds the student's log distributions for all V views.  Every ordered pair
    (student view i, teacher view j) with i != j contributes -sum_k Pt log Ps;
    the default reduction divides by the pair count so the magnitude does not
    depend on the view counts (set ``pair_reduction="sum"`` for the raw sum).
    """
    teacher_probs = np.asarray(teacher_probs, dtype=np.float64)
    if teacher_probs.ndim != 2:
        raise ObjectiveError(f"teacher_probs must be (G, K), got {teacher_probs.shape}")
    n_teacher = teacher_probs.shape[0]
    n_student = student_logp.shape[0]
    if n_teacher < 1:
        raise ObjectiveError("need at least one teacher view")
    if n_student < 2 or n_student < n_teacher:
        raise ObjectiveError("need at least two student views covering the teacher views")
    if student_logp.shape[1] != teacher_probs.shape[1]:
        raise ObjectiveError("teacher and student prototype dims differ")
    if pair_reduction not in ("mean", "sum"):
        raise ObjectiveError(f"unknown pair_reduction {pair_reduction!r}")
    _check_simplex(teacher_probs, "teacher")

    # -sum_i sum_{j != i} Pt[j] . logPs[i] collapses to one weighted sum with
    # per-student-view targets A[i] = sum_{j != i} Pt[j]
    totals = teacher_probs.sum(axis=0, keepdims=True)            # (1, K)
    weights = np.repeat(totals, n_student, axis=0)
    weights[:n_teacher] -= teacher_probs                          # remove i == j pairs
    loss = nm.scale(nm.tsum(nm.mul(Tensor(weights), student_logp)), -1.0)
    pairs = n_teacher * (n_student - 1)
    return nm.scale(loss, 1.0 / pairs) if pair_reduction == "mean" else loss


def ibot_patch_loss(teacher_patch_probs: np.ndarray, student_patch_logp: Tensor,
                    mask_indices) -> Tensor:
    """Masked-patch distillation: mean cross-entropy at the masked positions.

    The teacher distributions come from its unmasked pass over the same view;
    only rows named by ``mask_indices`` (the patches the student saw as mask
    tokens) are scored.
    """
    idx = [int(i) for i in mask_indices]
    if len(idx) == 0:
        raise ObjectiveError("mask must contain at least one patch index")
    teacher_patch_probs = np.asarray(teacher_patch_probs, dtype=np.float64)
    if teacher_patch_probs.shape != tuple(student_patch_logp.shape):
        raise ObjectiveError(
            f"teacher {teacher_patch_probs.shape} and student "
            f"{tuple(student_patch_logp.shape)} patch grids differ")
    if any(i < 0 or i >= teacher_patch_probs.shape[0] for i in idx):
        raise ObjectiveError("mask index out of range")
    _check_simplex(teacher_patch_probs[idx], "teacher patch")

    student_rows = nm.take_rows(student_patch_logp, idx)
    target = Tensor(teacher_patch_probs[idx])
    return nm.scale(nm.tsum(nm.mul(target, student_rows)), -1.0 / len(idx))


def koleo_loss(patch_probs: Tensor) -> Tensor:
    """KL(mean patch distribution || uniform) over a batch of distributions.

    Zero exactly when the batch-averaged distribution is uniform; ln K at the
    one-hot extreme.  Unlike the cross-entropies this regularizer takes
    student *probabilities* (a stack of simplex rows), not log probabilities.
    """
    if patch_probs.ndim != 2 or patch_probs.shape[0] < 1:
        raise ObjectiveError(f"need a (rows, K) stack, got {tuple(patch_probs.shape)}")
    _check_simplex(patch_probs.data, "patch distribution")
    return nm.kl_to_uniform(nm.tmean(patch_probs, axis=0))


def total_loss(weights: LossWeights, image_loss: Tensor, patch_loss: Tensor,
               koleo: Tensor) -> Tensor:
    for name, t in (("image", image_loss), ("patch", patch_loss), ("koleo", koleo)):
        if not np.all(np.isfinite(t.data)):
            raise ObjectiveError(f"{name} loss is not finite")
    return nm.add(nm.add(nm.scale(image_loss, weights.alpha_image),
                         nm.scale(patch_loss, weights.alpha_patch)),
                  nm.scale(koleo, weights.alpha_koleo))
