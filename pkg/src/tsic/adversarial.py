"""Text-and-latent-conditional discriminator and the adversarial losses.

The discriminator scores whether an image looks real AND matches the given
text. Its three inputs: the image, the quantized latent (aligned to the
image-feature grid by the feature harmonization module, a 1x1 projection
plus nearest resampling), and the 512-d text embedding (spatially
replicated, concatenated channelwise, then convolved). The output head is a
sigmoid map averaged into one score per sample.

Generator adversarial loss: -E[D(fake, latent, matched_text)].
Discriminator loss (natural log, scores clamped to [eps, 1-eps]):

    mean[ -log(1 - D(fake, matched)) - log(D(real, matched))
          - log(1 - D(real, mismatched)) ]
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import ImageTensor, LatentCode, TextEmbedding
from .nn import Conv2d, collect_named

__all__ = [
    "SCORE_EPS",
    "BatchLabel",
    "DiscriminatorBatch",
    "DiscriminatorParams",
    "discriminate",
    "discriminator_forward",
    "generator_adv_loss",
    "discriminator_loss",
    "derangement",
]

SCORE_EPS = 1e-6


class BatchLabel(enum.Enum):
    REAL_MATCHED = "real_matched"
    FAKE_MATCHED = "fake_matched"
    REAL_MISMATCHED = "real_mismatched"


@dataclass(frozen=True)
class DiscriminatorBatch:
    image: ImageTensor
    latent: LatentCode
    text: TextEmbedding
    label: BatchLabel


class DiscriminatorParams:
    """Image conv stack + FHM latent projection + text fusion + sigmoid head."""

    def __init__(self, *, latent_channels=64, width=32, text_dim=512, rng, dtype=np.float32):
        self.latent_channels = latent_channels
        self.width = width
        self.text_dim = text_dim
        self.img1 = Conv2d(3, width, 3, stride=2, rng=rng, dtype=dtype)
        self.img2 = Conv2d(width, width, 3, stride=2, rng=rng, dtype=dtype)
        self.fhm = Conv2d(latent_channels, width, 1, rng=rng, dtype=dtype)
        self.fuse = Conv2d(2 * width + text_dim, width, 1, rng=rng, dtype=dtype)
        self.mid = Conv2d(width, width, 3, stride=2, rng=rng, dtype=dtype)
        self.head = Conv2d(width, 1, 3, rng=rng, dtype=dtype)

    def _parts(self):
        return [("img1", self.img1), ("img2", self.img2), ("fhm", self.fhm),
                ("fuse", self.fuse), ("mid", self.mid), ("head", self.head)]

    def named_parameters(self, prefix=""):
        return collect_named(self._parts(), prefix)[0]

    def named_buffers(self, prefix=""):
        return []


def discriminator_forward(x: Tensor, latent: Tensor, text: Tensor, params: DiscriminatorParams) -> Tensor:
    """Batched scores in (0, 1): mean of the sigmoid output map per sample."""
    n, _, h, w = x.shape
    if latent.shape[2] * 16 != h or latent.shape[3] * 16 != w:
        raise ValueError(
            f"image {h}x{w} and latent grid {latent.shape[2]}x{latent.shape[3]} "
            "are not in the 16x ratio the discriminator fuses at"
        )
    feats = ad.leaky_relu(params.img2(ad.leaky_relu(params.img1(x))))  # H/4 grid
    proj = params.fhm(latent)
    proj = ad.upsample_nearest2x(ad.upsample_nearest2x(proj))  # H/16 -> H/4
    tgrid = ad.spatial_replicate(text, feats.shape[2], feats.shape[3])
    fused = ad.leaky_relu(params.fuse(ad.concat([feats, proj, tgrid], axis=1)))
    fused = ad.leaky_relu(params.mid(fused))
    score_map = ad.sigmoid(params.head(fused))
    return ad.tmean(score_map, axis=(1, 2, 3))


def discriminate(batch: DiscriminatorBatch, params: DiscriminatorParams) -> float:
    """Score one (image, latent, text) triple in eval mode."""
    if not batch.latent.quantized:
        raise ValueError("discriminator conditions on the quantized latent")
    dtype = params.img1.w.data.dtype
    x = Tensor(batch.image.pixels[None].astype(dtype))
    y = Tensor(batch.latent.values[None].astype(dtype))
    v = Tensor(batch.text.vector[None].astype(dtype))
    return float(discriminator_forward(x, y, v, params).data[0])


def generator_adv_loss(scores_fake):
    """Negative mean of fake-sample scores (non-saturating direct form)."""
    if isinstance(scores_fake, Tensor):
        return ad.tmean(scores_fake) * -1.0
    return float(-np.mean(np.asarray(scores_fake, dtype=np.float64)))


def _clamped_log(x):
    """log of the argument floored at SCORE_EPS (and capped at 1).

    Flooring the log argument rather than the raw score keeps the loss
    finite at saturation while leaving the ideal fixed point exact:
    a perfect discriminator scores (0, 1, 0) and every term is -log(1) = 0.
    """
    if isinstance(x, Tensor):
        return ad.log(ad.clamp(x, SCORE_EPS, 1.0))
    return np.log(np.clip(np.asarray(x, dtype=np.float64), SCORE_EPS, 1.0))


def discriminator_loss(s_fake_matched, s_real_matched, s_real_mismatched):
    """Three-part cross-entropy pushing D to accept matched-real pairs and
    reject both fakes and mismatched pairs. Always finite via clamping."""
    if isinstance(s_fake_matched, Tensor):
        one = 1.0
        term_fake = ad.tmean(_clamped_log(one - s_fake_matched)) * -1.0
        term_real = ad.tmean(_clamped_log(s_real_matched)) * -1.0
        term_mis = ad.tmean(_clamped_log(one - s_real_mismatched)) * -1.0
        return term_fake + term_real + term_mis
    sf = np.asarray(s_fake_matched, dtype=np.float64)
    sr = np.asarray(s_real_matched, dtype=np.float64)
    sm = np.asarray(s_real_mismatched, dtype=np.float64)
    return float(
        -np.mean(_clamped_log(1.0 - sf)) - np.mean(_clamped_log(sr)) - np.mean(_clamped_log(1.0 - sm))
    )


def derangement(n: int, rng) -> np.ndarray:
    """Random permutation of range(n) with no fixed points (Sattolo cycle),
    used to pair every sample with someone else's caption."""
    if n < 2:
        raise ValueError("derangement needs at least 2 elements")
    perm = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i))
        perm[i], perm[j] = perm[j], perm[i]
    return perm
