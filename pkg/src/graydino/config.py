"""Run configuration: one JSON document wiring the whole pipeline together.

Parsing is strict: unknown keys anywhere in the document are rejected with the
full key path (for example ``train.learning_rate``), so typos fail before any
work starts.  Every block is optional and falls back to the documented
defaults; only the manifest path is mandatory for training runs.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass

from .augment import MultiCropConfig
from .backbone import ViTConfig
from .engine import TrainConfig
from .objectives import LossWeights, TemperatureSchedule

__all__ = ["ConfigError", "RunConfig", "parse_run_config", "load_run_config",
           "crop_config_to_dict", "run_config_to_dict"]


class ConfigError(ValueError):
    """A configuration document is malformed; the message names the key path."""


@dataclass(frozen=True)
class RunConfig:
    manifest: str | None
    output_dir: str | None
    train: TrainConfig
    crop: MultiCropConfig
    vit: ViTConfig
    loss_weights: LossWeights
    temperatures: TemperatureSchedule


def _reject_unknown(doc: dict, allowed, path: str) -> None:
    extra = sorted(set(doc) - set(allowed))
    if extra:
        raise ConfigError(f"unknown key {path}.{extra[0]}" if path
                          else f"unknown key {extra[0]}")


def _build(cls, doc: dict, path: str, tuple_fields=()):
    """Instantiate a flat dataclass from a dict, naming the failing key path."""
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    _reject_unknown(doc, names, path)
    kw = dict(doc)
    for name in tuple_fields:
        if name in kw:
            if not isinstance(kw[name], (list, tuple)):
                raise ConfigError(f"{path}.{name}: expected an array")
            kw[name] = tuple(kw[name])
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _parse_crop(doc: dict, path: str) -> MultiCropConfig:
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected an object")
    _reject_unknown(doc, {"theta", "pad_frac", "global", "local", "aspect", "flip_p"}, path)
    kw: dict = {}
    for simple in ("theta", "pad_frac", "flip_p"):
        if simple in doc:
            kw[simple] = doc[simple]
    if "aspect" in doc:
        kw["aspect"] = tuple(doc["aspect"])
    for side in ("global", "local"):
        if side in doc:
            block = doc[side]
            if not isinstance(block, dict):
                raise ConfigError(f"{path}.{side}: expected an object")
            _reject_unknown(block, {"count", "size", "scale"}, f"{path}.{side}")
            if "count" in block:
                kw[f"{side}_count"] = block["count"]
            if "size" in block:
                kw[f"{side}_size"] = block["size"]
            if "scale" in block:
                kw[f"{side}_scale"] = tuple(block["scale"])
    try:
        return MultiCropConfig(**kw)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def crop_config_to_dict(crop: MultiCropConfig) -> dict:
    return {
        "theta": crop.theta,
        "pad_frac": crop.pad_frac,
        "global": {"count": crop.global_count, "size": crop.global_size,
                   "scale": list(crop.global_scale)},
        "local": {"count": crop.local_count, "size": crop.local_size,
                  "scale": list(crop.local_scale)},
        "aspect": list(crop.aspect),
        "flip_p": crop.flip_p,
    }


def parse_run_config(doc: dict, base_dir: str = ".") -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be an object")
    _reject_unknown(doc, {"manifest", "output_dir", "train", "crop", "vit",
                          "loss_weights", "temperatures"}, "")
    manifest = doc.get("manifest")
    if manifest is not None:
        if not isinstance(manifest, str):
            raise ConfigError("manifest: expected a path string")
        if not os.path.isabs(manifest):
            manifest = os.path.join(base_dir, manifest)
    output_dir = doc.get("output_dir")
    if output_dir is not None and not os.path.isabs(output_dir):
        output_dir = os.path.join(base_dir, output_dir)

    train = _build(TrainConfig, doc.get("train", {}), "train", tuple_fields=("mask_ratio",))
    crop = _parse_crop(doc.get("crop", {}), "crop")
    vit = _build(ViTConfig, doc.get("vit", {}), "vit", tuple_fields=("view_sizes",))
    weights = _build(LossWeights, doc.get("loss_weights", {}), "loss_weights")
    temps = _build(TemperatureSchedule, doc.get("temperatures", {}), "temperatures")

    if crop.global_size not in vit.view_sizes or crop.local_size not in vit.view_sizes:
        raise ConfigError("crop: view sizes must appear in vit.view_sizes")
    return RunConfig(manifest=manifest, output_dir=output_dir, train=train,
                     crop=crop, vit=vit, loss_weights=weights, temperatures=temps)


def load_run_config(path: str) -> RunConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_run_config(doc, base_dir=os.path.dirname(os.path.abspath(path)))


def run_config_to_dict(cfg: RunConfig) -> dict:
    return {
        "manifest": cfg.manifest,
        "output_dir": cfg.output_dir,
        "train": cfg.train.to_dict(),
        "crop": crop_config_to_dict(cfg.crop),
        "vit": cfg.vit.to_dict(),
        "loss_weights": dataclasses.asdict(cfg.loss_weights),
        "temperatures": dataclasses.asdict(cfg.temperatures),
    }
