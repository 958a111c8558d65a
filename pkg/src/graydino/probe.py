"""Frozen-feature linear probing and the evaluation metrics.

Features are taken from the teacher branch of a checkpointed trainer state
with a deterministic evaluation view (content-box crop, bilinear resize); the
backbone is never updated here.  A multinomial logistic-regression probe is
trained on top by full-batch gradient descent using the autodiff module.  The
extracted feature set carries a content hash that is re-verified whenever the
set is consumed, so accidental mutation of "frozen" features fails loudly.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from . import numerics as nm
from .numerics import Tensor
from .augment import MultiCropConfig
from .backbone import encode
from .data import DatasetManifest, load_example
from .engine import TrainerState, center_resize, _tensor_map

__all__ = [
    "ProbeError", "FrozenFeatureSet", "LinearProbe", "MetricReport",
    "state_digest", "extract_features", "train_linear_probe",
    "predict", "predict_proba", "accuracy", "auroc", "evaluate_probe",
]


class ProbeError(ValueError):
    """Probe inputs violate a precondition (labels, classes, hashes)."""


def state_digest(state: TrainerState) -> str:
    """Content hash of every tensor in a trainer state (checkpoint identity)."""
    h = hashlib.sha256()
    tensors = _tensor_map(state)
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(np.ascontiguousarray(tensors[name], dtype="<f8").tobytes())
    return h.hexdigest()


@dataclass
class FrozenFeatureSet:
    features: np.ndarray        # (N, d)
    labels: np.ndarray          # (N,) dense class ids
    checkpoint_id: str
    manifest_hash: str
    content_hash: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ProbeError(f"features {self.features.shape} and labels "
                             f"{self.labels.shape} do not align")
        if not self.content_hash:
            self.content_hash = self._digest()

    def _digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.features, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        return h.hexdigest()

    def verify(self) -> None:
        if self._digest() != self.content_hash:
            raise ProbeError("frozen feature set was mutated after extraction")

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0


def _manifest_digest(manifest: DatasetManifest) -> str:
    import json
    doc = json.dumps(manifest.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(doc.encode()).hexdigest()


def extract_features(state: TrainerState, manifest: DatasetManifest,
                     crop_cfg: MultiCropConfig) -> FrozenFeatureSet:
    """Teacher-branch class-token features for every record in the manifest.

    Each image is deterministically cropped to its content box and resized to
    the global view size; no randomness is involved, so the same checkpoint
    and manifest always produce bitwise-identical features.
    """
    feats = []
    labels = []
    for i, rec in enumerate(manifest.records):
        if rec.label is None:
            raise ProbeError(f"record {i} has no label; probing needs labeled data")
        ex = load_example(manifest, i)
        view = center_resize(ex.image, crop_cfg.theta, crop_cfg.global_size)
        out = encode(state.teacher, state.vit, view)
        feats.append(out.cls_feat.data[0])
        labels.append(rec.label)
    return FrozenFeatureSet(features=np.stack(feats, axis=0),
                            labels=np.array(labels, dtype=np.int64),
                            checkpoint_id=state_digest(state),
                            manifest_hash=_manifest_digest(manifest))


@dataclass
class LinearProbe:
    weights: np.ndarray         # (d, C)
    bias: np.ndarray            # (C,)
    lr: float
    iterations: int
    seed: int

    def __post_init__(self):
        if self.weights.ndim != 2 or self.weights.shape[1] < 2:
            raise ProbeError("probe must map to at least 2 classes")
        if self.bias.shape != (self.weights.shape[1],):
            raise ProbeError("bias shape does not match class count")


def train_linear_probe(features: FrozenFeatureSet, lr: float = 0.1,
                       iterations: int = 500, seed: int = 0) -> LinearProbe:
    """Multinomial logistic regression by full-batch gradient descent.

    Only the probe's weight matrix and bias are updated; the feature set is
    hash-verified before and after training.  Descent is preconditioned by
    per-dimension standardization and the result is expressed back in raw
    feature coordinates, so ``predict`` needs no extra state.
    """
    features.verify()
    labels = features.labels
    classes = np.unique(labels)
    n_classes = int(labels.max()) + 1
    if classes.size < 2:
        raise ProbeError("probe training needs at least two classes present")
    if lr <= 0 or iterations < 0:
        raise ProbeError("lr must be positive and iterations nonnegative")

    # gradient descent runs on standardized features (train-set mean/std), a
    # diagonal preconditioner without which a fixed step count is hostage to
    # the feature scale; the affine transform is folded back into the returned
    # weights afterwards, so the probe stays linear in the raw features
    mu = features.features.mean(axis=0)
    sd = features.features.std(axis=0)
    sd = np.where(sd > 0.0, sd, 1.0)
    x_std = (features.features - mu) / sd

    # zero init makes the zero-iteration probe predict by the argmax tie rule
    # (lowest class index), a documented baseline; seed is kept for provenance
    d = features.features.shape[1]
    w = Tensor(np.zeros((d, n_classes)), requires_grad=True)
    b = Tensor(np.zeros(n_classes), requires_grad=True)
    x = Tensor(x_std)
    onehot = np.zeros((labels.shape[0], n_classes))
    onehot[np.arange(labels.shape[0]), labels] = 1.0

    for _ in range(iterations):
        nm.zero_grads([w, b])
        logp = nm.log_softmax_t(nm.bias_add(nm.matmul(x, w), b), tau=1.0)
        loss = nm.scale(nm.tsum(nm.mul(Tensor(onehot), logp)), -1.0 / labels.shape[0])
        loss.backward()
        w.data = w.data - lr * w.grad
        b.data = b.data - lr * b.grad

    features.verify()
    w_raw = w.data / sd[:, None]
    b_raw = b.data - mu @ w_raw
    return LinearProbe(weights=w_raw, bias=b_raw,
                       lr=lr, iterations=iterations, seed=seed)


def predict_proba(probe: LinearProbe, features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != probe.weights.shape[0]:
        raise ProbeError(f"features {x.shape} do not match probe input dim "
                         f"{probe.weights.shape[0]}")
    z = x @ probe.weights + probe.bias
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict(probe: LinearProbe, features: np.ndarray) -> np.ndarray:
    """Class predictions; argmax ties resolve to the lowest class index."""
    return np.argmax(predict_proba(probe, features), axis=1)


def accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape or predictions.size < 1:
        raise ProbeError(f"predictions {predictions.shape} and labels "
                         f"{labels.shape} must be equal-length and nonempty")
    return float(np.mean(predictions == labels))


def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank-based AUROC: P(score_pos > score_neg) with ties counted half.

    Computed from average ranks, which matches brute-force enumeration of all
    (positive, negative) pairs exactly, ties included.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ProbeError("scores and labels must be equal-length vectors")
    if not np.all((labels == 0) | (labels == 1)):
        raise ProbeError("labels must be binary (0/1)")
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise ProbeError("AUROC needs both classes present")
    ranks = rankdata(scores, method="average")
    rank_sum = float(ranks[labels == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


@dataclass(frozen=True)
class MetricReport:
    metric: str
    value: float
    n: int
    classes: int
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ProbeError(f"metric value {self.value} outside [0, 1]")

    def to_dict(self) -> dict:
        return {"metric": self.metric, "value": self.value, "n": self.n,
                "classes": self.classes, "seed": self.seed}


def evaluate_probe(probe: LinearProbe, eval_set: FrozenFeatureSet,
                   metric: str, seed: int = 0) -> MetricReport:
    """Score a trained probe on a frozen evaluation set.

    Binary AUROC uses the probe's positive-class probability as the score.
    """
    eval_set.verify()
    if metric == "accuracy":
        value = accuracy(predict(probe, eval_set.features), eval_set.labels)
    elif metric == "auroc":
        if eval_set.num_classes != 2:
            raise ProbeError("AUROC is defined here for the two-class task only")
        scores = predict_proba(probe, eval_set.features)[:, 1]
        value = auroc(scores, eval_set.labels)
    else:
        raise ProbeError(f"unknown metric {metric!r} (want auroc or accuracy)")
    return MetricReport(metric=metric, value=value, n=int(eval_set.labels.shape[0]),
                        classes=eval_set.num_classes, seed=seed)
