"""Hyperprior entropy model, rate estimation, and the real bitstream.

The main latent y_hat is coded per element under a conditional Gaussian
N(mu, sigma) whose parameters the hyper-decoder derives from the hyper
latent z_hat; z_hat itself is coded under a learned per-channel logistic
density. Interval probabilities P[v] = CDF(v + 0.5) - CDF(v - 0.5) drive
both the differentiable rate estimate and the fixed-point tables handed to
the range coder, so measured file sizes track the estimate closely.

Bitstream layout (all integers little-endian):

    magic "TSIC" | version u8 | H u32 | W u32 | model-id u16
    | len_z u32 | payload_z | checksum_z u32
    | len_y u32 | payload_y | checksum_y u32

checksum_* is the CRC32 of the decoded symbol values; z is coded first so
the decoder can rebuild (mu, sigma) before touching the y payload. H and W
are the pre-padding image dims, which is what bpp is measured against.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import HyperLatent, ImageTensor, LatentCode, pad_to_multiple
from .nn import Conv2d, collect_named
from .range_coder import RangeCoderError, range_decode, range_encode, stream_crc32
from .transforms import DOWNSAMPLE_FACTOR, EncoderParams, encode, quantize, QuantizeMode, round_half_away

__all__ = [
    "SIGMA_MIN",
    "HyperpriorParams",
    "RateEstimate",
    "CompressedObject",
    "BitstreamError",
    "bits_from_probabilities",
    "estimate_rate",
    "bit_allocation_map",
    "compress",
    "decompress_latents",
]

SIGMA_MIN = 1e-2
MAGIC = b"TSIC"
FORMAT_VERSION = 1
HEADER_BYTES = 15          # magic + version + H + W + model-id
FRAME_BYTES = 16           # two length fields + two checksums
# floor keeps -log2 finite and its pass-through gradient (1/likelihood)
# within float32 range during training
_LIKELIHOOD_FLOOR = 1e-9
_LOG2 = math.log(2.0)
_SUPPORT_SIGMA_FACTOR = 16.0
_SUPPORT_MARGIN = 8
_INV_SQRT2 = 1.0 / math.sqrt(2.0)


class BitstreamError(ValueError):
    """Raised for malformed or mismatched compressed objects."""


class HyperpriorParams:
    """Hyper analysis/synthesis transforms plus the factorized z density.

    The synthesis path emits per-element (mu, sigma) for the main latent;
    sigma is softplus-bounded below by SIGMA_MIN so no probability table
    collapses.
    """

    def __init__(self, *, latent_channels=64, hyper_channels=32, hidden=32, rng, dtype=np.float32):
        self.latent_channels = latent_channels
        self.hyper_channels = hyper_channels
        self.hidden = hidden
        self.enc1 = Conv2d(latent_channels, hidden, 3, stride=2, rng=rng, dtype=dtype)
        self.enc2 = Conv2d(hidden, hyper_channels, 3, stride=2, rng=rng, dtype=dtype)
        self.dec1 = Conv2d(hyper_channels, hidden, 3, rng=rng, dtype=dtype)
        self.dec2 = Conv2d(hidden, 2 * latent_channels, 3, rng=rng, dtype=dtype)
        self.z_mean = Tensor(np.zeros(hyper_channels, dtype=dtype), requires_grad=True)
        self.z_scale_raw = Tensor(np.zeros(hyper_channels, dtype=dtype), requires_grad=True)

    # -- transforms ---------------------------------------------------------
    def hyper_analyze(self, y: Tensor) -> Tensor:
        return self.enc2(ad.leaky_relu(self.enc1(y)))

    def hyper_synthesize(self, z: Tensor, grid_hw):
        hp, wp = grid_hw
        h = ad.leaky_relu(self.dec1(ad.upsample_nearest2x(z)))
        raw = self.dec2(ad.upsample_nearest2x(h))
        raw = ad.crop2d(raw, hp, wp)
        c = self.latent_channels
        mu = _take_channels(raw, 0, c)
        sigma_raw = _take_channels(raw, c, 2 * c)
        sigma = ad.softplus(sigma_raw) + SIGMA_MIN
        return mu, sigma

    def z_density(self):
        """Per-channel logistic location and (floored) scale for z."""
        scale = ad.softplus(self.z_scale_raw) + SIGMA_MIN
        return self.z_mean, scale

    # -- parameter plumbing ---------------------------------------------------
    def _parts(self):
        return [("enc1", self.enc1), ("enc2", self.enc2), ("dec1", self.dec1), ("dec2", self.dec2)]

    def named_parameters(self, prefix=""):
        params = collect_named(self._parts(), prefix)[0]
        params.append((prefix + "z_mean", self.z_mean))
        params.append((prefix + "z_scale_raw", self.z_scale_raw))
        return params

    def named_buffers(self, prefix=""):
        return []

    def digest16(self) -> int:
        """16-bit fingerprint of the entropy-model parameters (the part a
        decoder must share exactly for lossless latent recovery)."""
        crc = 0
        for _, p in self.named_parameters():
            crc = zlib.crc32(np.ascontiguousarray(p.data).tobytes(), crc)
        return crc & 0xFFFF


def _take_channels(t: Tensor, lo, hi):
    out = t.data[:, lo:hi]

    def back(g):
        full = np.zeros_like(t.data)
        full[:, lo:hi] = g
        return full

    return Tensor(out, parents=((t, back),))


# -- interval likelihoods --------------------------------------------------------


def gaussian_interval_likelihood(v: Tensor, mu: Tensor, sigma: Tensor) -> Tensor:
    """P[v] = Phi((v+0.5-mu)/sigma) - Phi((v-0.5-mu)/sigma), floored."""
    sigma = ad.lower_bound(sigma, SIGMA_MIN)
    centered = v - mu
    upper = _normal_cdf((centered + 0.5) / sigma)
    lower = _normal_cdf((centered - 0.5) / sigma)
    return ad.lower_bound(upper - lower, _LIKELIHOOD_FLOOR)


def _normal_cdf(x: Tensor) -> Tensor:
    return (ad.erf(x * _INV_SQRT2) + 1.0) * 0.5


def logistic_interval_likelihood(v: Tensor, mu: Tensor, scale: Tensor) -> Tensor:
    upper = ad.sigmoid((v - mu + 0.5) / scale)
    lower = ad.sigmoid((v - mu - 0.5) / scale)
    return ad.lower_bound(upper - lower, _LIKELIHOOD_FLOOR)


def rate_bits_tensor(y_view: Tensor, mu: Tensor, sigma: Tensor,
                     z_view: Tensor, z_mu: Tensor, z_scale: Tensor):
    """Differentiable total bits for the batched training views of (y, z)."""
    ly = gaussian_interval_likelihood(y_view, mu, sigma)
    bits_y = ad.tsum(ad.log(ly)) * (-1.0 / _LOG2)
    n, cz = z_view.shape[0], z_view.shape[1]
    zm = ad.reshape(z_mu, (1, cz, 1, 1))
    zs = ad.reshape(z_scale, (1, cz, 1, 1))
    lz = logistic_interval_likelihood(z_view, ad.broadcast_to(zm, z_view.shape), ad.broadcast_to(zs, z_view.shape))
    bits_z = ad.tsum(ad.log(lz)) * (-1.0 / _LOG2)
    return bits_y, bits_z


def bits_from_probabilities(probs) -> float:
    """Ideal code length in bits of symbols with the given probabilities."""
    p = np.asarray(probs, dtype=np.float64)
    if np.any(p <= 0) or np.any(p > 1):
        raise ValueError("probabilities must lie in (0, 1]")
    return float(-np.log2(p).sum())


@dataclass(frozen=True)
class RateEstimate:
    bits_y: float
    bits_z: float
    bpp: float

    def __post_init__(self):
        if self.bits_y < 0 or self.bits_z < 0:
            raise ValueError("rate components must be nonnegative")


def _eval_mu_sigma(z_hat: HyperLatent, params: HyperpriorParams, grid_hw):
    z = Tensor(z_hat.values[None])
    mu, sigma = params.hyper_synthesize(z, grid_hw)
    return mu.data[0], sigma.data[0]


def _z_density_np(params: HyperpriorParams):
    mu, scale = params.z_density()
    return mu.data.astype(np.float64), scale.data.astype(np.float64)


def _gaussian_interval_np(v, mu, sigma):
    from scipy.special import ndtr

    sigma = np.maximum(sigma, SIGMA_MIN)
    c = v - mu
    return np.maximum(ndtr((c + 0.5) / sigma) - ndtr((c - 0.5) / sigma), _LIKELIHOOD_FLOOR)


def _logistic_cdf_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _logistic_interval_np(v, mu, scale):
    return np.maximum(
        _logistic_cdf_np((v - mu + 0.5) / scale) - _logistic_cdf_np((v - mu - 0.5) / scale),
        _LIKELIHOOD_FLOOR,
    )


def estimate_rate(y_hat: LatentCode, z_hat: HyperLatent, params: HyperpriorParams, dims) -> RateEstimate:
    """Model-estimated bits for the (possibly noise-relaxed) latents.

    bits_y sums -log2 of the conditional-Gaussian interval probabilities;
    bits_z uses the factorized logistic. bpp divides by the original pixel
    count in `dims`.
    """
    h, w = dims
    mu, sigma = _eval_mu_sigma(z_hat, params, y_hat.grid_hw)
    ly = _gaussian_interval_np(y_hat.values, mu, sigma)
    bits_y = float(-np.log2(ly).sum())
    z_mu, z_scale = _z_density_np(params)
    lz = _logistic_interval_np(z_hat.values, z_mu[:, None, None], z_scale[:, None, None])
    bits_z = float(-np.log2(lz).sum())
    return RateEstimate(bits_y=bits_y, bits_z=bits_z, bpp=(bits_y + bits_z) / (h * w))


def bit_allocation_map(y_hat: LatentCode, z_hat: HyperLatent, params: HyperpriorParams) -> np.ndarray:
    """Per-position mean over channels of -log2 P[y_hat] (an H' x W' grid)."""
    mu, sigma = _eval_mu_sigma(z_hat, params, y_hat.grid_hw)
    ly = _gaussian_interval_np(y_hat.values, mu, sigma)
    return (-np.log2(ly)).mean(axis=0)


# -- fixed-point tables ------------------------------------------------------------


def _support_tables(mu, sigma, cdf):
    """Shared-width integer supports and renormalized pmf tables.

    Support is centered per element at round(mu) with half-width
    max(3, ceil(16*sigma_max) + margin); residual tail mass folds into the
    edge bins. Everything derives from (mu, sigma) only, so the decoder
    rebuilds identical tables.
    """
    mu = mu.reshape(-1).astype(np.float64)
    sigma = sigma.reshape(-1).astype(np.float64)
    centers = round_half_away(mu).astype(np.int64)
    k = int(max(3, math.ceil(_SUPPORT_SIGMA_FACTOR * float(sigma.max())) + _SUPPORT_MARGIN))
    offsets = np.arange(-k, k + 1, dtype=np.float64)
    edges_hi = centers[:, None] + offsets[None, :] + 0.5 - mu[:, None]
    edges_lo = centers[:, None] + offsets[None, :] - 0.5 - mu[:, None]
    pmf = cdf(edges_hi / sigma[:, None]) - cdf(edges_lo / sigma[:, None])
    pmf = np.maximum(pmf, 0.0)
    tail = np.maximum(1.0 - pmf.sum(axis=1), 0.0)
    pmf[:, 0] += tail * 0.5
    pmf[:, -1] += tail * 0.5
    pmf /= pmf.sum(axis=1, keepdims=True)
    return centers, k, pmf


def _gaussian_tables(mu, sigma):
    from scipy.special import ndtr

    return _support_tables(mu, sigma, ndtr)


def _logistic_tables(mu, scale, grid_hw, channels):
    h, w = grid_hw
    mu_full = np.broadcast_to(mu[:, None, None], (channels, h, w))
    scale_full = np.broadcast_to(scale[:, None, None], (channels, h, w))
    return _support_tables(mu_full, scale_full, _logistic_cdf_np)


def _encode_grid(values, centers, k, pmfs) -> bytes:
    indices = values.reshape(-1).astype(np.int64) - (centers - k)
    if np.any(indices < 0) or np.any(indices >= 2 * k + 1):
        raise RangeCoderError(
            "quantized value outside the entropy model's coded support; "
            "the model is too far from these latents to code them"
        )
    return range_encode(indices, list(pmfs))


def _decode_grid(payload, centers, k, pmfs, count, crc):
    indices = range_decode(payload, list(pmfs), count)
    values = indices + (centers - k)
    if stream_crc32(payload, values) != crc:
        raise BitstreamError(
            "stream checksum mismatch (corrupt payload or wrong model parameters)"
        )
    return values


# -- container -------------------------------------------------------------------


@dataclass(frozen=True)
class CompressedObject:
    """Serialized bitstream: header fields plus the two coded payloads."""

    height: int
    width: int
    model_id: int
    payload_z: bytes
    payload_y: bytes
    checksum_z: int
    checksum_y: int
    version: int = FORMAT_VERSION

    @property
    def payload_bits(self) -> int:
        return 8 * (len(self.payload_z) + len(self.payload_y))

    @property
    def file_bpp(self) -> float:
        return self.payload_bits / (self.height * self.width)

    def to_bytes(self) -> bytes:
        head = struct.pack("<4sBIIH", MAGIC, self.version, self.height, self.width, self.model_id)
        return (
            head
            + struct.pack("<I", len(self.payload_z))
            + self.payload_z
            + struct.pack("<I", self.checksum_z)
            + struct.pack("<I", len(self.payload_y))
            + self.payload_y
            + struct.pack("<I", self.checksum_y)
        )

    @classmethod
    def from_bytes(cls, blob: bytes) -> "CompressedObject":
        if len(blob) < HEADER_BYTES + FRAME_BYTES:
            raise BitstreamError("bitstream too short to hold a valid header")
        magic, version, h, w, model_id = struct.unpack("<4sBIIH", blob[:HEADER_BYTES])
        if magic != MAGIC:
            raise BitstreamError(f"bad magic bytes {magic!r}; not a TSIC bitstream")
        if version != FORMAT_VERSION:
            raise BitstreamError(f"unsupported bitstream version {version}")
        pos = HEADER_BYTES
        (len_z,) = struct.unpack("<I", blob[pos : pos + 4])
        pos += 4
        if pos + len_z + 4 > len(blob):
            raise BitstreamError("truncated bitstream: z payload exceeds file size")
        payload_z = blob[pos : pos + len_z]
        pos += len_z
        (crc_z,) = struct.unpack("<I", blob[pos : pos + 4])
        pos += 4
        if pos + 4 > len(blob):
            raise BitstreamError("truncated bitstream: missing y payload length")
        (len_y,) = struct.unpack("<I", blob[pos : pos + 4])
        pos += 4
        if pos + len_y + 4 > len(blob):
            raise BitstreamError("truncated bitstream: y payload exceeds file size")
        payload_y = blob[pos : pos + len_y]
        pos += len_y
        (crc_y,) = struct.unpack("<I", blob[pos : pos + 4])
        pos += 4
        if pos != len(blob):
            raise BitstreamError("trailing bytes after bitstream end")
        return cls(h, w, model_id, payload_z, payload_y, crc_z, crc_y, version=version)


def compress(img: ImageTensor, encoder: EncoderParams, hyperprior: HyperpriorParams) -> CompressedObject:
    """Full encode path: pad -> analysis -> round -> hyper-code -> range-code.

    The caption plays no role here; side information enters only at decode.
    """
    orig_h, orig_w = img.height, img.width
    padded, _ = pad_to_multiple(img, DOWNSAMPLE_FACTOR)
    y = encode(padded, encoder)
    y_hat = quantize(y, QuantizeMode.EVAL_ROUND)
    z = hyperprior.hyper_analyze(Tensor(y_hat.values[None]))
    z_hat = HyperLatent(round_half_away(z.data[0]), quantized=True)

    z_mu, z_scale = _z_density_np(hyperprior)
    zc, zk, zpmf = _logistic_tables(z_mu, z_scale, z_hat.grid_hw, z_hat.channels)
    payload_z = _encode_grid(z_hat.values, zc, zk, zpmf)

    mu, sigma = _eval_mu_sigma(z_hat, hyperprior, y_hat.grid_hw)
    yc, yk, ypmf = _gaussian_tables(mu, sigma)
    payload_y = _encode_grid(y_hat.values, yc, yk, ypmf)

    return CompressedObject(
        height=orig_h,
        width=orig_w,
        model_id=hyperprior.digest16(),
        payload_z=payload_z,
        payload_y=payload_y,
        checksum_z=stream_crc32(payload_z, z_hat.values.reshape(-1).astype(np.int64)),
        checksum_y=stream_crc32(payload_y, y_hat.values.reshape(-1).astype(np.int64)),
    )


def latent_grid_dims(height: int, width: int):
    """(H', W') and (H'', W'') for an image of the given original dims."""
    hp = math.ceil(height / DOWNSAMPLE_FACTOR)
    wp = math.ceil(width / DOWNSAMPLE_FACTOR)
    hz = math.ceil(hp / 4)
    wz = math.ceil(wp / 4)
    return (hp, wp), (hz, wz)


def decompress_latents(obj: CompressedObject, hyperprior: HyperpriorParams,
                       *, verify_model=True):
    """Recover (y_hat, z_hat) exactly from a compressed object."""
    if verify_model and obj.model_id != hyperprior.digest16():
        raise BitstreamError(
            f"bitstream model-id {obj.model_id:#06x} does not match these "
            f"entropy-model parameters ({hyperprior.digest16():#06x})"
        )
    (hp, wp), (hz, wz) = latent_grid_dims(obj.height, obj.width)
    cz, cy = hyperprior.hyper_channels, hyperprior.latent_channels

    z_mu, z_scale = _z_density_np(hyperprior)
    zc, zk, zpmf = _logistic_tables(z_mu, z_scale, (hz, wz), cz)
    z_vals = _decode_grid(obj.payload_z, zc, zk, zpmf, cz * hz * wz, obj.checksum_z)
    z_hat = HyperLatent(z_vals.reshape(cz, hz, wz).astype(np.float64), quantized=True)

    mu, sigma = _eval_mu_sigma(z_hat, hyperprior, (hp, wp))
    yc, yk, ypmf = _gaussian_tables(mu, sigma)
    y_vals = _decode_grid(obj.payload_y, yc, yk, ypmf, cy * hp * wp, obj.checksum_y)
    y_hat = LatentCode(y_vals.reshape(cy, hp, wp).astype(np.float64), quantized=True)
    return y_hat, z_hat
