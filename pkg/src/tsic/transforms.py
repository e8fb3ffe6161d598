"""Analysis transform (encoder), quantizer, and the staged synthesis
transform (generator) with SSA conditioning points.

The encoder downsamples 16x through exactly four stride-2 stages; the
generator mirrors it with a residual-block section followed by four nearest
up-convolutions and a tanh-bounded tail. SSA blocks sit after the residual
section and after every upsampling stage (five insertion points).
"""

from __future__ import annotations

import enum

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import ImageTensor, LatentCode, TextEmbedding
from .nn import Conv2d, collect_named
from .ssa import SsaStack

__all__ = [
    "QuantizeMode",
    "EncoderParams",
    "GeneratorParams",
    "encode",
    "quantize",
    "quantize_tensor",
    "round_half_away",
    "generate",
    "generator_forward",
    "DOWNSAMPLE_FACTOR",
    "SSA_INSERTION_POINTS",
]

DOWNSAMPLE_FACTOR = 16
SSA_INSERTION_POINTS = 5


class QuantizeMode(enum.Enum):
    TRAIN_NOISE = "train_noise"
    TRAIN_STE = "train_ste"
    EVAL_ROUND = "eval_round"


def round_half_away(values: np.ndarray) -> np.ndarray:
    """Elementwise round half away from zero (not banker's rounding)."""
    values = np.asarray(values)
    return np.copysign(np.floor(np.abs(values) + 0.5), values)


class EncoderParams:
    """Analysis transform: head conv, four stride-2 stages, tail conv.

    The tail is initialized with extra gain so latents start several
    quantization steps wide: early training then explores nonzero rates and
    the rate-target controller anneals down onto the operating point, rather
    than the rate collapsing to zero before reconstruction learns to use it.
    """

    def __init__(self, *, hidden=32, latent_channels=64, rng, dtype=np.float32):
        self.hidden = hidden
        self.latent_channels = latent_channels
        self.head = Conv2d(3, hidden, 3, rng=rng, dtype=dtype)
        self.downs = [
            Conv2d(hidden, hidden, 3, stride=2, rng=rng, dtype=dtype),
            Conv2d(hidden, hidden, 3, stride=2, rng=rng, dtype=dtype),
            Conv2d(hidden, hidden, 3, stride=2, rng=rng, dtype=dtype),
            Conv2d(hidden, latent_channels, 3, stride=2, rng=rng, dtype=dtype),
        ]
        self.tail = Conv2d(latent_channels, latent_channels, 3, rng=rng, dtype=dtype)
        self.tail.w.data = self.tail.w.data * np.asarray(4.0, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        h = ad.leaky_relu(self.head(x))
        for conv in self.downs:
            h = ad.leaky_relu(conv(h))
        return self.tail(h)

    def _parts(self):
        return [("head", self.head)] + [(f"down{i}", c) for i, c in enumerate(self.downs)] + [("tail", self.tail)]

    def named_parameters(self, prefix=""):
        return collect_named(self._parts(), prefix)[0]

    def named_buffers(self, prefix=""):
        return []


class GeneratorParams:
    """Synthesis transform: head conv, N residual blocks, four nearest-up
    convolution stages, tanh tail to 3 channels."""

    def __init__(self, *, latent_channels=64, hidden=32, resblocks=9, rng, dtype=np.float32):
        if resblocks < 1:
            raise ValueError("generator needs at least one residual block")
        self.latent_channels = latent_channels
        self.hidden = hidden
        self.n_resblocks = resblocks
        self.head = Conv2d(latent_channels, hidden, 3, rng=rng, dtype=dtype)
        self.resblocks = [
            (Conv2d(hidden, hidden, 3, rng=rng, dtype=dtype), Conv2d(hidden, hidden, 3, rng=rng, dtype=dtype))
            for _ in range(resblocks)
        ]
        self.ups = [Conv2d(hidden, hidden, 3, rng=rng, dtype=dtype) for _ in range(4)]
        self.tail = Conv2d(hidden, 3, 3, rng=rng, dtype=dtype)

    def ssa_channel_list(self):
        """Channel width at each SSA insertion point (post-residual + 4 ups)."""
        return [self.hidden] * SSA_INSERTION_POINTS

    def _parts(self):
        parts = [("head", self.head)]
        for i, (c1, c2) in enumerate(self.resblocks):
            parts.append((f"res{i}a", c1))
            parts.append((f"res{i}b", c2))
        parts.extend((f"up{i}", c) for i, c in enumerate(self.ups))
        parts.append(("tail", self.tail))
        return parts

    def named_parameters(self, prefix=""):
        return collect_named(self._parts(), prefix)[0]

    def named_buffers(self, prefix=""):
        return []


def encode(img: ImageTensor, params: EncoderParams) -> LatentCode:
    """Analysis transform of one image; dims must already be multiples of 16."""
    h, w = img.height, img.width
    if h % DOWNSAMPLE_FACTOR or w % DOWNSAMPLE_FACTOR:
        raise ValueError(
            f"encode needs dims that are multiples of {DOWNSAMPLE_FACTOR}; "
            f"got {h}x{w} (pad_to_multiple first)"
        )
    dtype = params.head.w.data.dtype
    out = params.forward(Tensor(img.pixels[None].astype(dtype)))
    return LatentCode(out.data[0].astype(np.float64), quantized=False)


def quantize_tensor(t: Tensor, mode: QuantizeMode, rng=None) -> Tensor:
    """Graph-level quantization: additive noise, straight-through round, or
    hard rounding (no gradient path in eval mode)."""
    if mode is QuantizeMode.TRAIN_NOISE:
        if rng is None:
            raise ValueError("train_noise quantization needs an rng")
        noise = rng.uniform(-0.5, 0.5, t.shape).astype(t.data.dtype)
        return t + Tensor(noise)
    if mode is QuantizeMode.TRAIN_STE:
        return ad.round_ste(t)
    if mode is QuantizeMode.EVAL_ROUND:
        return Tensor(round_half_away(t.data))
    raise ValueError(f"unknown quantize mode: {mode!r}")


def quantize(code, mode: QuantizeMode, rng=None):
    """Quantize a LatentCode or HyperLatent value.

    eval_round rounds half away from zero; train_noise adds U[-0.5, 0.5);
    train_ste rounds (its identity sensitivity lives in quantize_tensor).
    """
    if code.quantized:
        raise ValueError("input is already quantized")
    cls = type(code)
    if mode is QuantizeMode.EVAL_ROUND or mode is QuantizeMode.TRAIN_STE:
        return cls(round_half_away(code.values), quantized=True)
    if mode is QuantizeMode.TRAIN_NOISE:
        if rng is None:
            raise ValueError("train_noise quantization needs an rng")
        return cls(code.values + rng.uniform(-0.5, 0.5, code.values.shape), quantized=False)
    raise ValueError(f"unknown quantize mode: {mode!r}")


def generator_forward(y: Tensor, text: Tensor, params: GeneratorParams, ssa: SsaStack,
                      *, training, update_stats=True, collect_masks=None) -> Tensor:
    """Batched synthesis: [N,C,H',W'] latent + [N,512] text -> [N,3,16H',16W']."""
    if y.shape[1] != params.latent_channels:
        raise ValueError(
            f"latent has {y.shape[1]} channels but generator expects {params.latent_channels}"
        )
    if len(ssa) != SSA_INSERTION_POINTS:
        raise ValueError(f"generator uses {SSA_INSERTION_POINTS} SSA blocks, stack has {len(ssa)}")

    def conditioned(h, block):
        if collect_masks is not None:
            collect_masks.append(block.predict_mask_t(h).data[:, 0])
        return block.forward(h, text, training=training, update_stats=update_stats)

    h = ad.leaky_relu(params.head(y))
    for c1, c2 in params.resblocks:
        h = h + c2(ad.leaky_relu(c1(h)))
    h = conditioned(h, ssa[0])
    for i, up in enumerate(params.ups):
        h = ad.leaky_relu(up(ad.upsample_nearest2x(h)))
        h = conditioned(h, ssa[i + 1])
    return ad.tanh(params.tail(h))


def generate(latent: LatentCode, text: TextEmbedding, params: GeneratorParams,
             ssa: SsaStack, collect_masks=None) -> ImageTensor:
    """Decode one quantized latent with text side information (eval mode)."""
    if not latent.quantized:
        raise ValueError("generate expects a quantized latent")
    dtype = params.head.w.data.dtype
    y = Tensor(latent.values[None].astype(dtype))
    v = Tensor(text.vector[None].astype(dtype))
    out = generator_forward(y, v, params, ssa, training=False, collect_masks=collect_masks)
    return ImageTensor(out.data[0].astype(np.float64))
