"""Image decoding, a synthetic chest-phantom corpus, and deterministic batching.

Images are plain 2-D float64 arrays with intensities in [0, 1] (grayscale,
row 0 at the top).  The phantom generator stands in for real radiographs: it
renders a bright body ellipse with two darker lung ellipses on an exactly-zero
background, optionally drops bright nodules into a lung, and reports the
ground-truth content bounding box straight from the geometry so the content
analysis stage can be tested against a known answer.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from PIL import Image

from .augment import BoundingBox

__all__ = [
    "DecodeError", "ValidationError",
    "load_image", "read_pgm", "write_pgm", "check_image",
    "Ellipse", "Nodule", "PhantomSpec", "PhantomTemplate",
    "generate_phantom", "phantom_content_box", "sample_phantom_spec",
    "ManifestRecord", "DatasetManifest", "load_manifest", "save_manifest",
    "LoadedExample", "load_example", "iterate_batches", "derive_rng",
]


class DecodeError(ValueError):
    """An image file could not be decoded into a grayscale intensity grid."""


class ValidationError(ValueError):
    """A spec, manifest, or argument violates its invariants."""


def derive_rng(seed: int, *key: int) -> np.random.Generator:
    """Deterministic generator for (seed, purpose-key) pairs.

    All randomness in the package flows through this, so any unit of work
    (an epoch permutation, one phantom, one augmented view) can be recomputed
    in isolation without replaying a global stream.
    """
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))))


# ---------------------------------------------------------------------------
# image IO


def check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValidationError(f"image must be 2-D and nonempty, got shape {img.shape}")
    if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
        raise ValidationError("image intensities must be finite and within [0, 1]")
    return img


def _pgm_tokens(raw: bytes):
    # token stream over the header; '#' starts a comment through end of line
    i = 0
    n = len(raw)
    while i < n:
        c = raw[i:i + 1]
        if c.isspace():
            i += 1
        elif c == b"#":
            while i < n and raw[i:i + 1] not in (b"\n", b"\r"):
                i += 1
        else:
            j = i
            while j < n and not raw[j:j + 1].isspace() and raw[j:j + 1] != b"#":
                j += 1
            yield raw[i:j], j
            i = j


def read_pgm(path: str) -> np.ndarray:
    """Decode a P2 (ASCII) or P5 (binary) PGM into intensities in [0, 1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    toks = _pgm_tokens(raw)
    try:
        magic, _ = next(toks)
    except StopIteration:
        raise DecodeError(f"{path}: empty file") from None
    if magic not in (b"P2", b"P5"):
        raise DecodeError(f"{path}: unsupported format magic {magic!r} (want P2 or P5)")
    try:
        width = int(next(toks)[0])
        height = int(next(toks)[0])
        maxval, end = next(toks)
        maxval = int(maxval)
    except (StopIteration, ValueError):
        raise DecodeError(f"{path}: truncated or malformed PGM header") from None
    if width < 1 or height < 1:
        raise DecodeError(f"{path}: invalid dimensions {width}x{height}")
    if not 0 < maxval <= 65535:
        raise DecodeError(f"{path}: maxval {maxval} out of range (1..65535)")

    if magic == b"P2":
        vals = []
        for tok, _ in toks:
            try:
                vals.append(int(tok))
            except ValueError:
                raise DecodeError(f"{path}: non-numeric sample {tok!r}") from None
        if len(vals) != width * height:
            raise DecodeError(f"{path}: truncated file, expected {width * height} "
                              f"samples, found {len(vals)}")
        data = np.array(vals, dtype=np.float64)
    else:
        # P5: exactly one whitespace byte after maxval, then raw samples
        body = raw[end + 1:]
        itemsize = 1 if maxval < 256 else 2
        need = width * height * itemsize
        if len(body) < need:
            raise DecodeError(f"{path}: truncated file, expected {need} "
                              f"payload bytes, found {len(body)}")
        dtype = np.uint8 if itemsize == 1 else ">u2"  # 2-byte samples are big-endian
        data = np.frombuffer(body[:need], dtype=dtype).astype(np.float64)

    if data.size and data.max() > maxval:
        raise DecodeError(f"{path}: sample exceeds declared maxval {maxval}")
    return (data / float(maxval)).reshape(height, width)


def write_pgm(path: str, img: np.ndarray, maxval: int = 255) -> None:
    """Write intensities in [0, 1] as a binary (P5) PGM."""
    img = check_image(img)
    if not 0 < maxval <= 65535:
        raise ValidationError(f"maxval {maxval} out of range (1..65535)")
    q = np.floor(img * maxval + 0.5).astype(np.uint16)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode("ascii")
    payload = q.astype(np.uint8 if maxval < 256 else ">u2").tobytes()
    with open(path, "wb") as fh:
        fh.write(header + payload)


def _load_png(path: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode == "L":
                return np.asarray(im, dtype=np.float64) / 255.0
            if mode in ("I", "I;16", "I;16B"):
                arr = np.asarray(im, dtype=np.float64)
                if arr.min() < 0 or arr.max() > 65535:
                    raise DecodeError(f"{path}: sample values outside 16-bit range")
                return arr / 65535.0
            raise DecodeError(f"{path}: PNG mode {mode!r} is not 8/16-bit grayscale "
                              "(multi-channel input is rejected)")
    except DecodeError:
        raise
    except Exception as exc:
        raise DecodeError(f"{path}: truncated or undecodable PNG ({exc})") from exc


def load_image(path: str) -> np.ndarray:
    """Load a PGM (P2/P5) or grayscale PNG, normalized by the format maxval."""
    if not os.path.isfile(path):
        raise DecodeError(f"{path}: no such file")
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head[:2] in (b"P2", b"P5"):
        img = read_pgm(path)
    elif head[:8] == b"\x89PNG\r\n\x1a\n":
        img = _load_png(path)
    else:
        raise DecodeError(f"{path}: unsupported format (want PGM P2/P5 or grayscale PNG)")
    return check_image(img)


# ---------------------------------------------------------------------------
# phantom geometry


@dataclass(frozen=True)
class Ellipse:
    cx: float
    cy: float
    rx: float
    ry: float

    def __post_init__(self):
        if self.rx <= 0 or self.ry <= 0:
            raise ValidationError(f"ellipse radii must be positive, got {self}")


@dataclass(frozen=True)
class Nodule:
    cx: float
    cy: float
    r: float
    intensity: float

    def __post_init__(self):
        if self.r <= 0:
            raise ValidationError("nodule radius must be positive")
        if not 0.0 < self.intensity <= 1.0:
            raise ValidationError("nodule intensity must be in (0, 1]")


def _edge_alpha(ys: np.ndarray, xs: np.ndarray, e: Ellipse) -> np.ndarray:
    # soft coverage: 0 outside, ramps over roughly one pixel inside the boundary
    f = ((xs - e.cx) / e.rx) ** 2 + ((ys - e.cy) / e.ry) ** 2
    return np.clip((1.0 - np.sqrt(f)) * min(e.rx, e.ry), 0.0, 1.0)


def _boundary_inside(inner, outer: Ellipse, samples: int = 720) -> bool:
    t = np.linspace(0.0, 2.0 * np.pi, samples, endpoint=False)
    if isinstance(inner, Nodule):
        bx = inner.cx + inner.r * np.cos(t)
        by = inner.cy + inner.r * np.sin(t)
    else:
        bx = inner.cx + inner.rx * np.cos(t)
        by = inner.cy + inner.ry * np.sin(t)
    f = ((bx - outer.cx) / outer.rx) ** 2 + ((by - outer.cy) / outer.ry) ** 2
    return bool(np.all(f < 1.0))


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry and shading of one synthetic chest image.

    The background (everything outside the body ellipse) renders to exactly
    zero, emulating a collimated radiograph, which keeps the near-zero content
    threshold meaningful.
    """

    height: int
    width: int
    body: Ellipse
    lungs: tuple[Ellipse, Ellipse]
    nodules: tuple[Nodule, ...] = ()
    margin: int = 8
    body_intensity: float = 0.5
    lung_intensity: float = 0.2
    texture_amp: float = 0.15
    texture_cells: int = 6      # noise-grid resolution; higher = finer texture

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValidationError("phantom canvas must be at least 1x1")
        if self.margin < 0:
            raise ValidationError("margin must be nonnegative")
        if not 0.0 < self.body_intensity <= 1.0:
            raise ValidationError("body intensity must be in (0, 1]")
        if not 0.0 < self.lung_intensity <= 1.0:
            raise ValidationError("lung intensity must be in (0, 1] (zero would "
                                  "punch holes in the content mask)")
        if not 0.0 <= self.texture_amp < 1.0:
            raise ValidationError("texture amplitude must be in [0, 1)")
        if self.texture_cells < 2:
            raise ValidationError("texture grid needs at least 2x2 cells")
        b = self.body
        if (b.cx - b.rx < self.margin or b.cx + b.rx > self.width - 1 - self.margin
                or b.cy - b.ry < self.margin or b.cy + b.ry > self.height - 1 - self.margin):
            raise ValidationError("body ellipse must lie strictly inside the border margin")
        for lung in self.lungs:
            if not _boundary_inside(lung, b):
                raise ValidationError("lung ellipse extends outside the body ellipse")
        for nod in self.nodules:
            if not any(_boundary_inside(nod, lung) for lung in self.lungs):
                raise ValidationError("nodule does not lie inside a lung ellipse")

    @property
    def label(self) -> int:
        """1 = nodule present, 0 = nodule absent."""
        return 1 if self.nodules else 0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["body"] = dataclasses.asdict(self.body)
        d["lungs"] = [dataclasses.asdict(l) for l in self.lungs]
        d["nodules"] = [dataclasses.asdict(n) for n in self.nodules]
        return d

    @staticmethod
    def from_dict(d: dict) -> "PhantomSpec":
        known = {f.name for f in dataclasses.fields(PhantomSpec)}
        extra = set(d) - known
        if extra:
            raise ValidationError(f"unknown phantom keys: {sorted(extra)}")
        missing = {"height", "width", "body", "lungs"} - set(d)
        if missing:
            raise ValidationError(f"phantom spec missing keys: {sorted(missing)}")
        kw = dict(d)
        kw["body"] = Ellipse(**d["body"])
        kw["lungs"] = tuple(Ellipse(**l) for l in d["lungs"])
        kw["nodules"] = tuple(Nodule(**n) for n in d.get("nodules", ()))
        return PhantomSpec(**kw)


def _smooth_field(rng: np.random.Generator, height: int, width: int,
                  cells: int = 6) -> np.ndarray:
    # low-resolution noise grid, bilinearly upsampled (corners map to corners)
    grid = rng.uniform(-1.0, 1.0, size=(cells, cells))
    gy = np.linspace(0.0, cells - 1.0, height)
    gx = np.linspace(0.0, cells - 1.0, width)
    y0 = np.minimum(gy.astype(int), cells - 2)
    x0 = np.minimum(gx.astype(int), cells - 2)
    fy = (gy - y0)[:, None]
    fx = (gx - x0)[None, :]
    a = grid[np.ix_(y0, x0)]
    b = grid[np.ix_(y0, x0 + 1)]
    c = grid[np.ix_(y0 + 1, x0)]
    d = grid[np.ix_(y0 + 1, x0 + 1)]
    return a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + d * fy * fx


def phantom_content_box(spec: PhantomSpec) -> BoundingBox:
    """Tight bounding box of all pixels the renderer will make positive.

    Evaluates the body-ellipse coverage formula on the pixel grid, never the
    rendered intensities, so it serves as an independent ground truth for the
    content analysis stage.
    """
    ys = np.arange(spec.height, dtype=np.float64)[:, None]
    xs = np.arange(spec.width, dtype=np.float64)[None, :]
    support = _edge_alpha(ys, xs, spec.body) > 0.0
    rows = np.flatnonzero(support.any(axis=1))
    cols = np.flatnonzero(support.any(axis=0))
    if rows.size == 0:
        raise ValidationError("phantom body produces no positive pixels")
    return BoundingBox(x_min=int(cols[0]), y_min=int(rows[0]),
                       x_max=int(cols[-1]), y_max=int(rows[-1]))


def generate_phantom(spec: PhantomSpec, seed: int) -> tuple[np.ndarray, BoundingBox, int]:
    """Render a phantom; returns (image, ground-truth content box, class label).

    Bitwise deterministic per (spec, seed).  Every pixel strictly inside the
    body ellipse is positive; everything else is exactly zero, so the returned
    box is also the tight box of {intensity > 0}.
    """
    ys = np.arange(spec.height, dtype=np.float64)[:, None]
    xs = np.arange(spec.width, dtype=np.float64)[None, :]

    a_body = _edge_alpha(ys, xs, spec.body)
    img = spec.body_intensity * a_body
    for lung in spec.lungs:
        a = a_body * _edge_alpha(ys, xs, lung)
        img = img + a * (spec.lung_intensity - img)
    for nod in spec.nodules:
        a = a_body * _edge_alpha(ys, xs, Ellipse(nod.cx, nod.cy, nod.r, nod.r))
        img = img + a * (nod.intensity - img)

    if spec.texture_amp > 0.0:
        rng = derive_rng(seed, 7)
        img = img * (1.0 + spec.texture_amp * _smooth_field(rng, spec.height, spec.width,
                                                            spec.texture_cells))

    img = np.clip(img, 0.0, 1.0)
    return img, phantom_content_box(spec), spec.label


# ---------------------------------------------------------------------------
# phantom corpus template


@dataclass(frozen=True)
class PhantomTemplate:
    """Sampling ranges for a randomized phantom corpus."""

    height: int = 64
    width: int = 64
    margin: int = 8
    nodule_prob: float = 0.5
    body_fill: tuple[float, float] = (0.55, 0.95)   # fraction of the usable half-extent
    center_jitter: float = 0.03                     # fraction of the canvas
    nodule_radius: tuple[float, float] = (2.0, 4.0)
    nodule_intensity: tuple[float, float] = (0.65, 0.95)
    max_nodules: int = 4
    # wide appearance ranges keep the corpus image-level diverse; the class
    # label must stay the only factor tied to nodule presence
    body_intensity: tuple[float, float] = (0.20, 0.70)
    lung_intensity: tuple[float, float] = (0.02, 0.50)
    texture_amp: tuple[float, float] = (0.30, 0.95)
    texture_cells: tuple[int, int] = (2, 9)
    # lung half-extents and center offset as fractions of the body ellipse;
    # lung size caps nodule radius, so these also control lesion salience.
    # draws that poke outside the body are rejected and retried
    lung_rx_frac: tuple[float, float] = (0.22, 0.50)
    lung_ry_frac: tuple[float, float] = (0.42, 0.85)
    lung_offset_frac: tuple[float, float] = (0.32, 0.60)

    def __post_init__(self):
        if not 0.0 <= self.nodule_prob <= 1.0:
            raise ValidationError("nodule_prob must be in [0, 1]")
        if self.max_nodules < 1:
            raise ValidationError("max_nodules must be >= 1")
        usable_x = (self.width - 1) / 2.0 - self.margin
        usable_y = (self.height - 1) / 2.0 - self.margin
        if usable_x <= 2 or usable_y <= 2:
            raise ValidationError("canvas too small for the margin")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "PhantomTemplate":
        known = {f.name for f in dataclasses.fields(PhantomTemplate)}
        extra = set(d) - known
        if extra:
            raise ValidationError(f"unknown template keys: {sorted(extra)}")
        kw = dict(d)
        for name in ("body_fill", "nodule_radius", "nodule_intensity",
                     "body_intensity", "lung_intensity", "texture_amp",
                     "texture_cells", "lung_rx_frac", "lung_ry_frac",
                     "lung_offset_frac"):
            if name in kw:
                kw[name] = tuple(kw[name])
        return PhantomTemplate(**kw)


def sample_phantom_spec(template: PhantomTemplate, rng: np.random.Generator) -> PhantomSpec:
    """Draw one randomized phantom geometry from the template's ranges."""
    t = template
    cx0 = (t.width - 1) / 2.0
    cy0 = (t.height - 1) / 2.0
    cx = cx0 + rng.uniform(-t.center_jitter, t.center_jitter) * t.width
    cy = cy0 + rng.uniform(-t.center_jitter, t.center_jitter) * t.height
    max_rx = min(cx - t.margin, t.width - 1 - t.margin - cx)
    max_ry = min(cy - t.margin, t.height - 1 - t.margin - cy)
    rx = rng.uniform(*t.body_fill) * max_rx
    ry = rng.uniform(*t.body_fill) * max_ry
    body = Ellipse(cx, cy, rx, ry)

    # two lungs, mirrored about the body axis with a little jitter; the widest
    # draws can poke outside the body, so reject and retry, then fall back to
    # a conservative geometry that is contained for any jitter
    for _ in range(64):
        lrx = rx * rng.uniform(*t.lung_rx_frac)
        lry = ry * rng.uniform(*t.lung_ry_frac)
        loff = rx * rng.uniform(*t.lung_offset_frac)
        lcy = cy + ry * rng.uniform(-0.08, 0.08)
        lungs = (Ellipse(cx - loff, lcy, lrx, lry), Ellipse(cx + loff, lcy, lrx, lry))
        if all(_boundary_inside(lung, body) for lung in lungs):
            break
    else:
        lungs = (Ellipse(cx - 0.44 * rx, cy, 0.36 * rx, 0.60 * ry),
                 Ellipse(cx + 0.44 * rx, cy, 0.36 * rx, 0.60 * ry))

    nodules: list[Nodule] = []
    if rng.uniform() < t.nodule_prob:
        count = int(rng.integers(1, t.max_nodules + 1))
        for _ in range(count):
            lung = lungs[int(rng.integers(0, 2))]
            minr = min(lung.rx, lung.ry)
            r = float(rng.uniform(*t.nodule_radius))
            r = max(1.0, min(r, 0.5 * minr - 0.5))
            # sufficient containment condition: in the coordinates where the
            # lung is a unit disk, the nodule becomes an ellipse inside a disk
            # of radius r/minr, so any center within 1 - (r+0.5)/minr works
            s = 1.0 - (r + 0.5) / minr
            if s <= 0.0:
                continue
            ang = rng.uniform(0.0, 2.0 * np.pi)
            rad = s * np.sqrt(rng.uniform())
            nodules.append(Nodule(cx=lung.cx + lung.rx * rad * np.cos(ang),
                                  cy=lung.cy + lung.ry * rad * np.sin(ang),
                                  r=r,
                                  intensity=float(rng.uniform(*t.nodule_intensity))))

    return PhantomSpec(height=t.height, width=t.width, body=body, lungs=lungs,
                       nodules=tuple(nodules), margin=t.margin,
                       body_intensity=float(rng.uniform(*t.body_intensity)),
                       lung_intensity=float(rng.uniform(*t.lung_intensity)),
                       texture_amp=float(rng.uniform(*t.texture_amp)),
                       texture_cells=int(rng.integers(t.texture_cells[0],
                                                      t.texture_cells[1] + 1)))


# ---------------------------------------------------------------------------
# dataset manifests and batching


@dataclass
class ManifestRecord:
    path: str | None = None
    phantom: PhantomSpec | None = None
    label: int | None = None
    content_box: tuple[int, int, int, int] | None = None  # optional ground truth

    def __post_init__(self):
        if (self.path is None) == (self.phantom is None):
            raise ValidationError("record must have exactly one of 'path' or 'phantom'")


@dataclass
class DatasetManifest:
    seed: int
    records: list[ManifestRecord]
    base_dir: str = field(default=".", compare=False)

    def __post_init__(self):
        if len(self.records) < 1:
            raise ValidationError("manifest must contain at least one record")
        labels = [r.label for r in self.records if r.label is not None]
        if labels:
            present = set(labels)
            if min(present) != 0 or present != set(range(max(present) + 1)):
                raise ValidationError(f"labels must be dense integers 0..C-1, got {sorted(present)}")

    @property
    def num_classes(self) -> int:
        labels = [r.label for r in self.records if r.label is not None]
        return (max(labels) + 1) if labels else 0

    def to_dict(self) -> dict:
        records = []
        for r in self.records:
            d: dict = {}
            if r.path is not None:
                d["path"] = r.path
            else:
                d["phantom"] = r.phantom.to_dict()
            if r.label is not None:
                d["label"] = r.label
            if r.content_box is not None:
                d["content_box"] = list(r.content_box)
            records.append(d)
        return {"seed": self.seed, "records": records}


_RECORD_KEYS = {"path", "phantom", "label", "content_box"}


def load_manifest(path: str) -> DatasetManifest:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read manifest {path}: {exc}") from exc
    if not isinstance(doc, dict) or "seed" not in doc or "records" not in doc:
        raise ValidationError(f"manifest {path} must be an object with 'seed' and 'records'")
    records = []
    for i, rec in enumerate(doc["records"]):
        extra = set(rec) - _RECORD_KEYS
        if extra:
            raise ValidationError(f"manifest record {i}: unknown keys {sorted(extra)}")
        records.append(ManifestRecord(
            path=rec.get("path"),
            phantom=PhantomSpec.from_dict(rec["phantom"]) if "phantom" in rec else None,
            label=rec.get("label"),
            content_box=tuple(rec["content_box"]) if "content_box" in rec else None,
        ))
    return DatasetManifest(seed=int(doc["seed"]), records=records,
                           base_dir=os.path.dirname(os.path.abspath(path)))


def save_manifest(manifest: DatasetManifest, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(manifest.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")


class LoadedExample(NamedTuple):
    index: int
    image: np.ndarray
    label: int | None


def load_example(manifest: DatasetManifest, index: int) -> LoadedExample:
    """Materialize one record: decode its file or render its phantom."""
    rec = manifest.records[index]
    if rec.path is not None:
        path = rec.path if os.path.isabs(rec.path) else os.path.join(manifest.base_dir, rec.path)
        img = load_image(path)
    else:
        img, _, _ = generate_phantom(rec.phantom, seed=_phantom_seed(manifest.seed, index))
    return LoadedExample(index=index, image=img, label=rec.label)


def _phantom_seed(manifest_seed: int, index: int) -> int:
    return int(derive_rng(manifest_seed, 3, index).integers(0, 2 ** 63))


def iterate_batches(manifest: DatasetManifest, batch_size: int, epoch: int):
    """Yield lists of LoadedExample in a seeded per-epoch permutation.

    The permutation depends only on (manifest.seed, epoch); the final short
    batch is kept.  Phantom records render with a per-record seed that is
    independent of the epoch, so the underlying dataset is fixed.
    """
    if batch_size < 1:
        raise ValidationError(f"batch_size must be >= 1, got {batch_size}")
    order = derive_rng(manifest.seed, 2, epoch).permutation(len(manifest.records))
    for start in range(0, len(order), batch_size):
        yield [load_example(manifest, int(i)) for i in order[start:start + batch_size]]
