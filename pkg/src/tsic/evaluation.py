"""Metrics, RD curves, BD-rate, the caption-stability protocol, and map dumps.

bpp is always measured from the actual bitstream payload (8 bytes-to-bits of
the two coded payloads over the original pixel count), never from the model
estimate. PSNR is defined on the [-1, 1] range: 10*log10(4 / mse), with an
infinite-PSNR sentinel when the reconstruction is exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np
from scipy.interpolate import PchipInterpolator

from .data import ImageTensor, TextEmbedding, TextKind
from .entropy_codec import bit_allocation_map, decompress_latents
from .imageio import write_png
from .perceptual import create_perceptual_adapter
from .ssa import TextEncoderAdapter, embed_text
from .training import variant_inference_text

__all__ = [
    "PSNR_SENTINEL",
    "psnr_from_mse",
    "RdPoint",
    "RdCurve",
    "evaluate",
    "build_curve",
    "bd_rate",
    "stability_protocol",
    "emit_maps",
    "emit_maps_for_bitstream",
    "write_map_files",
    "write_rdpoints",
    "read_rdpoints",
]

PSNR_SENTINEL = math.inf
_PEAK_SQUARED = 4.0  # [-1, 1] pixels: peak-to-peak 2, squared


def psnr_from_mse(mse: float) -> float:
    if mse < 0:
        raise ValueError("mse must be nonnegative")
    if mse == 0.0:
        return PSNR_SENTINEL
    return 10.0 * math.log10(_PEAK_SQUARED / mse)


@dataclass(frozen=True)
class RdPoint:
    """Per-image evaluation record; psnr_db always derives from mse."""

    bpp: float
    mse: float
    perc_proxy: float
    psnr_db: float = field(init=False)
    dist_score: float | None = None
    image_id: str = ""
    variant_id: str = "full"
    caption_id: str = ""

    def __post_init__(self):
        if self.bpp <= 0:
            raise ValueError("bpp must be positive for a coded image")
        object.__setattr__(self, "psnr_db", psnr_from_mse(self.mse))

    def to_dict(self):
        d = asdict(self)
        if d["psnr_db"] == math.inf:
            d["psnr_db"] = "inf"
        return d


def write_rdpoints(points, path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for p in points:
            fh.write(json.dumps(p.to_dict()) + "\n")
    return path


def read_rdpoints(path):
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            d = json.loads(line)
            d.pop("psnr_db", None)
            out.append(RdPoint(**d))
    return out


@dataclass(frozen=True)
class RdCurve:
    """Operating points as (mean bpp, mean quality), bpp strictly increasing."""

    points: tuple

    def __post_init__(self):
        pts = tuple((float(b), float(q)) for b, q in self.points)
        if len(pts) < 2:
            raise ValueError("a rate curve needs at least 2 points")
        bpps = [b for b, _ in pts]
        if any(b2 <= b1 for b1, b2 in zip(bpps, bpps[1:])):
            raise ValueError("curve bpp values must be strictly increasing")
        if any(b <= 0 for b in bpps):
            raise ValueError("curve bpp values must be positive")
        object.__setattr__(self, "points", pts)

    @property
    def bpp(self):
        return np.array([b for b, _ in self.points])

    @property
    def quality(self):
        return np.array([q for _, q in self.points])


def evaluate(imageset, model, captions, variant="full", *, text_adapter=None,
             perceptual=None) -> list:
    """Per-image RdPoints with actual file bpp.

    imageset: sequence of (image_id, ImageTensor); captions: one caption per
    image, routed through the variant's inference rule.
    """
    imageset = list(imageset)
    if not imageset:
        raise ValueError("evaluate needs at least one image")
    if len(captions) != len(imageset):
        raise ValueError("need exactly one caption per image")
    if text_adapter is None:
        text_adapter = TextEncoderAdapter.create("deterministic_stub")
    if perceptual is None:
        perceptual = create_perceptual_adapter("ms_dssim")

    points = []
    for (image_id, img), caption in zip(imageset, captions):
        obj = model.compress_image(img)
        bpp = obj.file_bpp
        matched = embed_text(caption, text_adapter)
        text = variant_inference_text(variant, matched)
        decoded = model.decompress_image(obj, text)
        mse = float(np.mean((img.pixels - decoded.pixels) ** 2))
        perc = float(perceptual.distance(img.pixels, decoded.pixels))
        points.append(RdPoint(bpp=bpp, mse=mse, perc_proxy=perc,
                              image_id=str(image_id), variant_id=variant, caption_id=str(caption)[:48]))
    return points


def build_curve(points_per_operating_point) -> RdCurve:
    """Aggregate lists of RdPoints (one list per operating point) into a
    curve of (mean bpp, mean perceptual proxy), sorted by bpp."""
    agg = []
    for pts in points_per_operating_point:
        if not pts:
            raise ValueError("operating point with no evaluation records")
        agg.append((float(np.mean([p.bpp for p in pts])),
                    float(np.mean([p.perc_proxy for p in pts]))))
    agg.sort(key=lambda t: t[0])
    return RdCurve(tuple(agg))


def bd_rate(baseline: RdCurve, test: RdCurve) -> float:
    """Bjontegaard delta rate of `test` against `baseline`, in percent.

    Fits log-bpp against quality (piecewise cubic Hermite; straight line
    when a curve has only 2 points), integrates the difference over the
    overlapping quality interval, and maps the mean log-rate gap back to a
    percentage. Positive means the test curve spends more rate at equal
    quality.
    """
    qb, rb = _sorted_quality_lograte(baseline)
    qt, rt = _sorted_quality_lograte(test)
    lo = max(qb.min(), qt.min())
    hi = min(qb.max(), qt.max())
    if not hi > lo:
        raise ValueError("curves have no overlapping quality range")
    samples = np.linspace(lo, hi, 256)
    fb = _interpolate(qb, rb, samples)
    ft = _interpolate(qt, rt, samples)
    avg_diff = np.trapezoid(ft - fb, samples) / (hi - lo)
    return float((math.exp(avg_diff) - 1.0) * 100.0)


def _sorted_quality_lograte(curve: RdCurve):
    q = curve.quality
    r = np.log(curve.bpp)
    order = np.argsort(q)
    q, r = q[order], r[order]
    if np.any(np.diff(q) <= 0):
        raise ValueError("curve quality values must be distinct for interpolation")
    return q, r


def _interpolate(q, r, samples):
    if q.size >= 3:
        return PchipInterpolator(q, r)(samples)
    # linear fallback at 2 points
    return np.interp(samples, q, r)


def stability_protocol(model, image: ImageTensor, matched_captions, mismatched_caption,
                       *, text_adapter=None, perceptual=None) -> list:
    """Compress once, decode once per caption; one RdPoint row per caption
    with the mismatched row last. bpp is identical across rows by
    construction (the bitstream never saw the text)."""
    if len(matched_captions) < 1:
        raise ValueError("stability protocol needs at least one matched caption plus a mismatch")
    if text_adapter is None:
        text_adapter = TextEncoderAdapter.create("deterministic_stub")
    if perceptual is None:
        perceptual = create_perceptual_adapter("ms_dssim")

    obj = model.compress_image(image)
    bpp = obj.file_bpp
    rows = []
    labeled = [(str(i + 1), c, False) for i, c in enumerate(matched_captions)]
    labeled.append(("mismatch", mismatched_caption, True))
    for label, caption, is_mismatch in labeled:
        emb = embed_text(caption, text_adapter)
        if is_mismatch:
            emb = emb.as_kind(TextKind.MISMATCHED)
        decoded = model.decompress_image(obj, emb)
        mse = float(np.mean((image.pixels - decoded.pixels) ** 2))
        perc = float(perceptual.distance(image.pixels, decoded.pixels))
        rows.append(RdPoint(bpp=bpp, mse=mse, perc_proxy=perc, caption_id=label))
    return rows


def _diverging_colormap(norm: np.ndarray) -> np.ndarray:
    """Map [0, 1] to a blue-white-red ramp, uint8 [3, H, W]."""
    t = np.clip(norm, 0.0, 1.0)
    below = t < 0.5
    u = np.where(below, t * 2.0, (t - 0.5) * 2.0)
    r = np.where(below, 60 + 195 * u, 255 - 75 * u)
    g = np.where(below, 90 + 165 * u, 255 - 215 * u)
    b = np.where(below, 200 + 55 * u, 255 - 195 * u)
    return np.stack([r, g, b]).astype(np.uint8)


def write_map_files(masks, bit_alloc: np.ndarray, out_dir):
    """Write collected per-stage masks and a bit-allocation grid to disk.

    Masks go out as grayscale PNGs ([0,1] mapped onto 0..255) plus raw float
    .npy sidecars; the bit-allocation map as a per-image-normalized diverging
    colormap plus its raw grid. Returns the list of written paths.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"map output directory is not writable: {out_dir}") from exc

    written = []
    for i, m in enumerate(masks):
        grid = np.asarray(m)[0].astype(np.float64)
        png = out_dir / f"mask_stage{i}.png"
        write_png(png, np.rint(np.clip(grid, 0, 1) * 255).astype(np.uint8))
        npy = out_dir / f"mask_stage{i}.npy"
        np.save(npy, grid)
        written.extend([png, npy])

    span = bit_alloc.max() - bit_alloc.min()
    norm = (bit_alloc - bit_alloc.min()) / span if span > 0 else np.full_like(bit_alloc, 0.5)
    png = out_dir / "bit_allocation.png"
    write_png(png, _diverging_colormap(norm))
    npy = out_dir / "bit_allocation.npy"
    np.save(npy, bit_alloc)
    written.extend([png, npy])
    return written


def emit_maps(model, image: ImageTensor, caption, out_dir, *, text_adapter=None):
    """Compress the image, decode it under the caption, and dump the decode's
    per-SSA-stage prediction masks plus the latent bit-allocation map."""
    if text_adapter is None:
        text_adapter = TextEncoderAdapter.create("deterministic_stub")
    if caption is None:
        text = TextEmbedding.zero()
    else:
        text = embed_text(caption, text_adapter)

    obj = model.compress_image(image)
    return emit_maps_for_bitstream(model, obj, text, out_dir)


def emit_maps_for_bitstream(model, obj, text: TextEmbedding, out_dir):
    """Map emission for an existing compressed object (decode-side view)."""
    y_hat, z_hat = decompress_latents(obj, model.hyperprior)
    masks = []
    model.decompress_image(obj, text, collect_masks=masks)
    bam = bit_allocation_map(y_hat, z_hat, model.hyperprior)
    return write_map_files(masks, bam, out_dir)
