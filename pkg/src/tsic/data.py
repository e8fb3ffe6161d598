"""Core value types (images, latents, text embeddings) and manifest ingestion.

Everything here is an immutable value: arrays are copied in, validated, and
frozen, so instances are safe to share across workers.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "ImageTensor",
    "LatentCode",
    "HyperLatent",
    "TextKind",
    "TextEmbedding",
    "ManifestRecord",
    "DatasetManifest",
    "ManifestError",
    "load_manifest",
    "write_manifest",
    "normalize_image",
    "denormalize_image",
    "pad_to_multiple",
    "crop_image",
]

TEXT_DIM = 512
MIN_IMAGE_SIDE = 16


class ManifestError(ValueError):
    """Raised for malformed dataset manifests."""


def _freeze(arr):
    arr = np.array(arr)
    arr.flags.writeable = False
    return arr


def _check_integer_valued(values, what):
    if values.size and not np.array_equal(values, np.trunc(values)):
        raise ValueError(f"{what} is flagged quantized but holds non-integer values")


@dataclass(frozen=True)
class ImageTensor:
    """RGB image in normalized float form: 3 x H x W, values in [-1, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[0] != 3:
            raise ValueError(f"expected 3xHxW pixels, got shape {px.shape}")
        if px.shape[1] < MIN_IMAGE_SIDE or px.shape[2] < MIN_IMAGE_SIDE:
            raise ValueError(
                f"image sides must be >= {MIN_IMAGE_SIDE}, got {px.shape[1]}x{px.shape[2]}"
            )
        if not np.all(np.isfinite(px)):
            raise ValueError("image contains non-finite values")
        object.__setattr__(self, "pixels", _freeze(np.clip(px, -1.0, 1.0)))

    @property
    def height(self):
        return self.pixels.shape[1]

    @property
    def width(self):
        return self.pixels.shape[2]


@dataclass(frozen=True)
class LatentCode:
    """Main feature grid y / y_hat: C x H' x W'."""

    values: np.ndarray
    quantized: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise ValueError(f"latent must be CxH'xW', got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("latent contains non-finite values")
        if self.quantized:
            _check_integer_valued(v, "latent")
        object.__setattr__(self, "values", _freeze(v))

    @property
    def channels(self):
        return self.values.shape[0]

    @property
    def grid_hw(self):
        return self.values.shape[1], self.values.shape[2]


@dataclass(frozen=True)
class HyperLatent:
    """Hyper latent z / z_hat parameterizing the entropy model: C_z x H'' x W''."""

    values: np.ndarray
    quantized: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise ValueError(f"hyper latent must be C_zxH''xW'', got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("hyper latent contains non-finite values")
        if self.quantized:
            _check_integer_valued(v, "hyper latent")
        object.__setattr__(self, "values", _freeze(v))

    @property
    def channels(self):
        return self.values.shape[0]

    @property
    def grid_hw(self):
        return self.values.shape[1], self.values.shape[2]


class TextKind(enum.Enum):
    MATCHED = "matched"
    MISMATCHED = "mismatched"
    ZERO = "zero"


@dataclass(frozen=True)
class TextEmbedding:
    """512-d side-information vector plus its provenance."""

    vector: np.ndarray
    kind: TextKind = TextKind.MATCHED

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if v.shape != (TEXT_DIM,):
            raise ValueError(f"text embedding must have length {TEXT_DIM}, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("text embedding contains non-finite values")
        if self.kind is TextKind.ZERO and np.any(v != 0.0):
            raise ValueError("zero-kind embedding must be exactly all zeros")
        object.__setattr__(self, "vector", _freeze(v))

    @classmethod
    def zero(cls):
        return cls(np.zeros(TEXT_DIM), TextKind.ZERO)

    def as_kind(self, kind):
        return TextEmbedding(self.vector, kind)


@dataclass(frozen=True)
class ManifestRecord:
    image_path: str
    captions: tuple[str, ...]

    def __post_init__(self):
        if len(self.captions) < 1:
            raise ManifestError("record must carry at least one caption")
        object.__setattr__(self, "captions", tuple(self.captions))

    def resolve(self, base: Path) -> Path:
        p = Path(self.image_path)
        return p if p.is_absolute() else base / p


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[ManifestRecord, ...]
    base_dir: Path = field(default_factory=Path)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "base_dir", Path(self.base_dir))

    def __len__(self):
        return len(self.records)


def load_manifest(path) -> DatasetManifest:
    """Parse a line-delimited manifest: one JSON record per line with fields
    `image` (path string) and `captions` (non-empty list of strings).

    Image paths are resolved against the manifest's directory and must exist.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    base = path.parent
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict) or "image" not in obj or "captions" not in obj:
                raise ManifestError(f"line {lineno}: record needs 'image' and 'captions' fields")
            captions = obj["captions"]
            if not isinstance(captions, list) or not captions:
                raise ManifestError(f"line {lineno}: captions must be a non-empty list")
            if not all(isinstance(c, str) for c in captions):
                raise ManifestError(f"line {lineno}: captions must all be strings")
            record = ManifestRecord(str(obj["image"]), tuple(captions))
            if not record.resolve(base).exists():
                raise ManifestError(f"line {lineno}: image path does not resolve: {obj['image']}")
            records.append(record)
    return DatasetManifest(tuple(records), base)


def write_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in manifest.records:
            fh.write(json.dumps({"image": rec.image_path, "captions": list(rec.captions)}) + "\n")
    return path


def normalize_image(raw) -> ImageTensor:
    """Map integer pixels 0..255 linearly onto [-1, 1] (0 -> -1, 255 -> +1)."""
    arr = np.asarray(raw)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected 3-channel 3xHxW input, got shape {arr.shape}")
    return ImageTensor((2.0 * arr.astype(np.float64)) / 255.0 - 1.0)


def denormalize_image(img: ImageTensor) -> np.ndarray:
    """Inverse of normalize_image; exact on the 0..255 integer lattice."""
    raw = np.rint((img.pixels + 1.0) * 127.5)
    return np.clip(raw, 0, 255).astype(np.uint8)


def pad_to_multiple(img: ImageTensor, multiple: int):
    """Reflect-pad bottom/right so both sides are multiples of `multiple`.

    Returns the padded image and the original (H, W) for post-decode cropping.
    """
    if multiple < 1:
        raise ValueError("multiple must be >= 1")
    h, w = img.height, img.width
    target_h = math.ceil(h / multiple) * multiple
    target_w = math.ceil(w / multiple) * multiple
    if (target_h, target_w) == (h, w):
        return img, (h, w)
    px = img.pixels
    # np.pad reflect caps each step at dim-1; iterate for very large multiples
    while px.shape[1] < target_h or px.shape[2] < target_w:
        ph = min(target_h - px.shape[1], px.shape[1] - 1)
        pw = min(target_w - px.shape[2], px.shape[2] - 1)
        px = np.pad(px, ((0, 0), (0, ph), (0, pw)), mode="reflect")
    return ImageTensor(px), (h, w)


def crop_image(img: ImageTensor, dims) -> ImageTensor:
    h, w = dims
    return ImageTensor(img.pixels[:, :h, :w])
