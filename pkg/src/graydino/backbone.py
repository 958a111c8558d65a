"""A small single-channel Vision Transformer and its prototype projection head.

Parameters live in flat, name-keyed dicts of autodiff tensors so the optimizer
and checkpoint code can treat the model as an ordered set of named arrays.
The same weights encode both view resolutions; each supported side length gets
its own learned positional table.  Patch masking (for the masked-patch loss)
swaps selected patch embeddings for a learned mask token before positions are
added.  The head maps features through a three-layer MLP into a unit-norm
bottleneck and scores them against row-normalized prototypes, so its logits
are cosines in [-1, 1]; temperatures are applied downstream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .numerics import Tensor

__all__ = [
    "ConfigError", "ViTConfig", "BackboneOutput",
    "trunc_normal", "init_backbone", "init_head", "clone_params",
    "patchify", "encode", "project", "num_patches",
]


class ConfigError(ValueError):
    """Model configuration and input geometry disagree."""


@dataclass(frozen=True)
class ViTConfig:
    patch_size: int = 4
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    view_sizes: tuple[int, ...] = (32, 16)   # every side length encode() must accept
    num_prototypes: int = 256
    bottleneck_dim: int = 32
    head_hidden: int = 64

    def __post_init__(self):
        if self.patch_size < 1 or self.dim < 1 or self.depth < 1 or self.heads < 1:
            raise ConfigError("patch_size, dim, depth, heads must be positive")
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if not self.view_sizes:
            raise ConfigError("at least one view size is required")
        for side in self.view_sizes:
            if side % self.patch_size != 0:
                raise ConfigError(f"view size {side} not divisible by patch {self.patch_size}")
        if self.num_prototypes < 2:
            raise ConfigError("need at least 2 prototypes")
        if self.bottleneck_dim < 1 or self.head_hidden < 1 or self.mlp_ratio <= 0:
            raise ConfigError("head dimensions must be positive")

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.dim * self.mlp_ratio))

    def to_dict(self) -> dict:
        return {"patch_size": self.patch_size, "dim": self.dim, "depth": self.depth,
                "heads": self.heads, "mlp_ratio": self.mlp_ratio,
                "view_sizes": list(self.view_sizes),
                "num_prototypes": self.num_prototypes,
                "bottleneck_dim": self.bottleneck_dim, "head_hidden": self.head_hidden}

    @staticmethod
    def from_dict(d: dict) -> "ViTConfig":
        known = {"patch_size", "dim", "depth", "heads", "mlp_ratio", "view_sizes",
                 "num_prototypes", "bottleneck_dim", "head_hidden"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown backbone keys: {sorted(extra)}")
        kw = dict(d)
        if "view_sizes" in kw:
            kw["view_sizes"] = tuple(int(s) for s in kw["view_sizes"])
        return ViTConfig(**kw)


@dataclass
class BackboneOutput:
    cls_feat: Tensor        # (1, dim)
    patch_feats: Tensor     # (N, dim)


def num_patches(config: ViTConfig, side: int) -> int:
    if side not in config.view_sizes:
        raise ConfigError(f"view size {side} not in configured sizes {config.view_sizes}")
    return (side // config.patch_size) ** 2


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) with samples beyond 2 std redrawn until inside."""
    x = rng.normal(0.0, std, size=shape)
    while True:
        bad = np.abs(x) > 2.0 * std
        if not bad.any():
            return x
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))


def init_backbone(config: ViTConfig, rng: np.random.Generator,
                  trainable: bool = True) -> dict[str, Tensor]:
    """Fresh backbone parameters; creation order is fixed for reproducibility."""
    p, d = config.patch_size, config.dim
    params: dict[str, np.ndarray] = {}
    params["patch_proj.w"] = trunc_normal(rng, (p * p, d))
    params["patch_proj.b"] = np.zeros(d)
    params["cls"] = trunc_normal(rng, (1, d))
    params["mask_token"] = trunc_normal(rng, (d,))
    for side in config.view_sizes:
        n = (side // p) ** 2
        params[f"pos.{side}"] = trunc_normal(rng, (n + 1, d))
    for i in range(config.depth):
        pre = f"blocks.{i}."
        params[pre + "ln1.g"] = np.ones(d)
        params[pre + "ln1.b"] = np.zeros(d)
        for name in ("wq", "wk", "wv", "wo"):
            params[pre + f"attn.{name}.w"] = trunc_normal(rng, (d, d))
            params[pre + f"attn.{name}.b"] = np.zeros(d)
        params[pre + "ln2.g"] = np.ones(d)
        params[pre + "ln2.b"] = np.zeros(d)
        params[pre + "mlp.fc1.w"] = trunc_normal(rng, (d, config.mlp_hidden))
        params[pre + "mlp.fc1.b"] = np.zeros(config.mlp_hidden)
        params[pre + "mlp.fc2.w"] = trunc_normal(rng, (config.mlp_hidden, d))
        params[pre + "mlp.fc2.b"] = np.zeros(d)
    params["ln_f.g"] = np.ones(d)
    params["ln_f.b"] = np.zeros(d)
    return {k: Tensor(v, requires_grad=trainable) for k, v in params.items()}


def init_head(config: ViTConfig, rng: np.random.Generator,
              trainable: bool = True) -> dict[str, Tensor]:
    d, h, b, k = config.dim, config.head_hidden, config.bottleneck_dim, config.num_prototypes
    params = {
        "head.fc1.w": trunc_normal(rng, (d, h)), "head.fc1.b": np.zeros(h),
        "head.fc2.w": trunc_normal(rng, (h, h)), "head.fc2.b": np.zeros(h),
        "head.fc3.w": trunc_normal(rng, (h, b)), "head.fc3.b": np.zeros(b),
        "head.protos": trunc_normal(rng, (k, b)),
    }
    return {key: Tensor(v, requires_grad=trainable) for key, v in params.items()}


def clone_params(params: dict[str, Tensor], trainable: bool) -> dict[str, Tensor]:
    return {k: Tensor(np.array(t.data, copy=True), requires_grad=trainable)
            for k, t in params.items()}


def patchify(img: np.ndarray, patch_size: int) -> np.ndarray:
    """Split a square view into row-major p*p patches: (N, p*p) with N=(side/p)^2."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise ConfigError(f"expected a square 2-D view, got shape {img.shape}")
    side = img.shape[0]
    if side % patch_size != 0:
        raise ConfigError(f"side {side} not divisible by patch size {patch_size}")
    g = side // patch_size
    return (img.reshape(g, patch_size, g, patch_size)
               .transpose(0, 2, 1, 3)
               .reshape(g * g, patch_size * patch_size))


def _linear(x: Tensor, params: dict[str, Tensor], name: str) -> Tensor:
    return nm.bias_add(nm.matmul(x, params[name + ".w"]), params[name + ".b"])


def _attention(x: Tensor, params: dict[str, Tensor], prefix: str, heads: int) -> Tensor:
    tokens, d = x.shape
    dh = d // heads
    q = _linear(x, params, prefix + "attn.wq")
    k = _linear(x, params, prefix + "attn.wk")
    v = _linear(x, params, prefix + "attn.wv")
    # (tokens, d) -> (heads, tokens, dh)
    q = nm.transpose(nm.reshape(q, (tokens, heads, dh)), (1, 0, 2))
    k = nm.transpose(nm.reshape(k, (tokens, heads, dh)), (1, 0, 2))
    v = nm.transpose(nm.reshape(v, (tokens, heads, dh)), (1, 0, 2))
    att = nm.scale(nm.bmm(q, nm.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dh))
    att = nm.softmax_t(att, tau=1.0)
    out = nm.bmm(att, v)
    out = nm.reshape(nm.transpose(out, (1, 0, 2)), (tokens, d))
    return _linear(out, params, prefix + "attn.wo")


def _mlp(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    h = nm.gelu(_linear(x, params, prefix + "mlp.fc1"))
    return _linear(h, params, prefix + "mlp.fc2")


def encode(params: dict[str, Tensor], config: ViTConfig, img: np.ndarray,
           mask_indices=None) -> BackboneOutput:
    """Run the transformer over one view.

    ``mask_indices`` names patch rows whose embeddings are replaced by the
    learned mask token; the swap happens before positional addition so masked
    patches keep their position identity but lose their content.
    """
    img = np.asarray(img, dtype=np.float64)
    side = img.shape[0]
    n = num_patches(config, side)

    x = nm.bias_add(nm.matmul(Tensor(patchify(img, config.patch_size)),
                              params["patch_proj.w"]),
                    params["patch_proj.b"])
    if mask_indices is not None and len(mask_indices) > 0:
        idx = [int(i) for i in mask_indices]
        if any(i < 0 or i >= n for i in idx):
            raise ConfigError(f"mask index out of range for {n} patches")
        x = nm.scatter_rows(x, idx, nm.repeat_rows(params["mask_token"], len(idx)))
    x = nm.concat([params["cls"], x], axis=0)
    x = nm.add(x, params[f"pos.{side}"])

    for i in range(config.depth):
        pre = f"blocks.{i}."
        x = nm.add(x, _attention(nm.layer_norm(x, params[pre + "ln1.g"],
                                               params[pre + "ln1.b"]),
                                 params, pre, config.heads))
        x = nm.add(x, _mlp(nm.layer_norm(x, params[pre + "ln2.g"],
                                         params[pre + "ln2.b"]),
                           params, pre))
    x = nm.layer_norm(x, params["ln_f.g"], params["ln_f.b"])
    return BackboneOutput(cls_feat=nm.take_rows(x, [0]),
                          patch_feats=nm.take_rows(x, list(range(1, n + 1))))


def project(head: dict[str, Tensor], feats: Tensor) -> Tensor:
    """Map (rows, dim) features to (rows, K) cosine logits in [-1, 1]."""
    if feats.ndim != 2 or feats.shape[1] != head["head.fc1.w"].shape[0]:
        raise nm.ShapeError(f"project: features {feats.shape} do not match head "
                            f"input dim {head['head.fc1.w'].shape[0]}")
    h = nm.gelu(_linear(feats, head, "head.fc1"))
    h = nm.gelu(_linear(h, head, "head.fc2"))
    z = nm.l2_normalize(_linear(h, head, "head.fc3"))
    protos = nm.l2_normalize(head["head.protos"])
    return nm.matmul(z, nm.transpose(protos, (1, 0)))
