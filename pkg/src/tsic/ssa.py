"""Text side-information extraction and Semantic-Spatial Aware conditioning.

An SSA block predicts a spatial mask from the current reconstruction
features, derives per-channel affine parameters (gamma, beta) from the text
embedding through two small perceptrons, and adds the masked affine of the
normalized features back onto the input:

    out = x + m * (gamma * BN(x) + beta)

The text encoder is an adapter: a frozen pretrained backend when its
optional dependencies and weights are configured, or a deterministic
hash-based stub that needs nothing but a seed.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import TEXT_DIM, TextEmbedding, TextKind
from .nn import BatchNorm2d, Conv2d, Linear, collect_named

__all__ = [
    "TextBackendUnavailable",
    "DeterministicStubBackend",
    "PretrainedFrozenBackend",
    "TextEncoderAdapter",
    "embed_text",
    "SemanticMask",
    "AffineParams",
    "SsaBlock",
    "SsaStack",
    "predict_mask",
    "affine_from_text",
    "ssa_transform",
    "apply_modulation",
]

_TOKEN_RE = re.compile(r"[a-z0-9]+")
_BAG_WEIGHT = 0.95
_STRING_WEIGHT = 0.05


class TextBackendUnavailable(RuntimeError):
    """Raised when the pretrained text backend cannot run in this environment."""


def _hash_vector(material: bytes) -> np.ndarray:
    digest = hashlib.sha256(material).digest()
    gen = np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "little")))
    return gen.uniform(-1.0, 1.0, TEXT_DIM)


class DeterministicStubBackend:
    """Pure function of (caption, seed): bag-of-token hash vectors blended
    with a whole-string hash vector, all components in [-1, 1].

    Captions sharing words land near each other, so paraphrases of the same
    scene stay close while unrelated captions are near-orthogonal.
    """

    name = "deterministic_stub"

    def __init__(self, seed: int = 0):
        self.seed = int(seed)

    def embed(self, caption: str) -> np.ndarray:
        prefix = str(self.seed).encode()
        tokens = _TOKEN_RE.findall(caption.lower())
        if tokens:
            bag = np.mean([_hash_vector(prefix + b"|tok|" + t.encode()) for t in tokens], axis=0)
        else:
            bag = np.zeros(TEXT_DIM)
        whole = _hash_vector(prefix + b"|str|" + caption.encode())
        return _BAG_WEIGHT * bag + _STRING_WEIGHT * whole


class PretrainedFrozenBackend:
    """Adapter for a frozen pretrained text tower (CLIP-class, 512-d output).

    Weights are only ever loaded from a configured path; nothing is
    downloaded. Without the optional torch/open_clip stack and a weights
    path this backend refuses to construct.
    """

    name = "pretrained_frozen"

    def __init__(self, weights_path=None):
        if weights_path is None:
            raise TextBackendUnavailable(
                "pretrained text backend needs a configured weights path; "
                "fall back to text_backend='deterministic_stub'"
            )
        try:
            import open_clip  # noqa: F401
            import torch  # noqa: F401
        except ImportError as exc:
            raise TextBackendUnavailable(
                "pretrained text backend needs torch + open_clip installed; "
                "fall back to text_backend='deterministic_stub'"
            ) from exc
        import torch

        self._torch = torch
        import open_clip

        model = open_clip.create_model("ViT-B-32", pretrained=None)
        state = torch.load(weights_path, map_location="cpu")
        model.load_state_dict(state, strict=False)
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        self._model = model
        self._tokenize = open_clip.get_tokenizer("ViT-B-32")

    def embed(self, caption: str) -> np.ndarray:
        with self._torch.no_grad():
            tokens = self._tokenize([caption])
            feats = self._model.encode_text(tokens)[0].numpy().astype(np.float64)
        if feats.shape != (TEXT_DIM,):
            raise TextBackendUnavailable(f"pretrained tower returned dim {feats.shape}, expected {TEXT_DIM}")
        return feats


@dataclass
class TextEncoderAdapter:
    """Selected text backend plus the fixed 512-d output contract."""

    backend: object
    output_dim: int = TEXT_DIM

    @classmethod
    def create(cls, backend: str = "deterministic_stub", *, seed: int = 0, weights_path=None):
        if backend == "deterministic_stub":
            return cls(DeterministicStubBackend(seed))
        if backend == "pretrained_frozen":
            return cls(PretrainedFrozenBackend(weights_path))
        raise ValueError(f"unknown text backend: {backend!r}")

    @property
    def name(self):
        return self.backend.name


def embed_text(caption: str, adapter: TextEncoderAdapter) -> TextEmbedding:
    """Embed a caption as matched side information (512-d, deterministic)."""
    vec = np.asarray(adapter.backend.embed(caption), dtype=np.float64)
    return TextEmbedding(vec, TextKind.MATCHED)


@dataclass(frozen=True)
class SemanticMask:
    """Spatial weights in [0, 1] steering where text modulation applies."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"mask must be h x w, got shape {v.shape}")
        if v.size and (v.min() < 0.0 or v.max() > 1.0):
            raise ValueError("mask values must lie in [0, 1]")
        vv = np.array(v)
        vv.flags.writeable = False
        object.__setattr__(self, "values", vv)


@dataclass(frozen=True)
class AffineParams:
    gamma_c: np.ndarray
    beta_c: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.gamma_c, dtype=np.float64)
        b = np.asarray(self.beta_c, dtype=np.float64)
        if g.ndim != 1 or g.shape != b.shape:
            raise ValueError("gamma_c and beta_c must be 1-D arrays of equal length")
        object.__setattr__(self, "gamma_c", g)
        object.__setattr__(self, "beta_c", b)


class _TextMlp:
    """512 -> hidden -> c perceptron with a smooth nonlinearity between."""

    def __init__(self, channels, hidden, *, rng, dtype):
        self.fc1 = Linear(TEXT_DIM, hidden, rng=rng, dtype=dtype)
        self.fc2 = Linear(hidden, channels, rng=rng, dtype=dtype)

    def __call__(self, v):
        return self.fc2(ad.tanh(self.fc1(v)))

    def named_parameters(self, prefix=""):
        return self.fc1.named_parameters(prefix + "fc1.") + self.fc2.named_parameters(prefix + "fc2.")

    def named_buffers(self, prefix=""):
        return []


class SsaBlock:
    """One Semantic-Spatial Aware conditioning block at a fixed channel width."""

    def __init__(self, channels, *, hidden=256, rng, dtype=np.float32):
        self.channels = channels
        mid = max(channels // 2, 1)
        self.mask_conv1 = Conv2d(channels, mid, 3, rng=rng, dtype=dtype)
        self.mask_conv2 = Conv2d(mid, 1, 3, rng=rng, dtype=dtype)
        self.gamma_mlp = _TextMlp(channels, hidden, rng=rng, dtype=dtype)
        self.beta_mlp = _TextMlp(channels, hidden, rng=rng, dtype=dtype)
        self.norm = BatchNorm2d(channels, dtype=dtype)

    # -- tensor-level pieces -------------------------------------------------
    def predict_mask_t(self, feats: Tensor) -> Tensor:
        if feats.shape[1] != self.channels:
            raise ValueError(f"block expects {self.channels} channels, got {feats.shape[1]}")
        h = ad.leaky_relu(self.mask_conv1(feats))
        return ad.sigmoid(self.mask_conv2(h))

    def affine_t(self, text: Tensor):
        return self.gamma_mlp(text), self.beta_mlp(text)

    def forward(self, feats: Tensor, text: Tensor, *, training, update_stats=True) -> Tensor:
        mask = self.predict_mask_t(feats)
        gamma, beta = self.affine_t(text)
        normalized = self.norm(feats, training=training, update_stats=update_stats)
        n = feats.shape[0]
        gamma4 = ad.reshape(gamma, (n, self.channels, 1, 1))
        beta4 = ad.reshape(beta, (n, self.channels, 1, 1))
        return feats + mask * (gamma4 * normalized + beta4)

    def named_parameters(self, prefix=""):
        params, _ = collect_named(
            [("mask_conv1", self.mask_conv1), ("mask_conv2", self.mask_conv2),
             ("gamma_mlp", self.gamma_mlp), ("beta_mlp", self.beta_mlp)],
            prefix,
        )
        return params

    def named_buffers(self, prefix=""):
        return self.norm.named_buffers(prefix + "norm.")


class SsaStack:
    """One SSA block per generator insertion point (5 by default)."""

    def __init__(self, blocks):
        self.blocks = list(blocks)

    @classmethod
    def create(cls, channel_list, *, hidden=256, rng, dtype=np.float32):
        return cls([SsaBlock(c, hidden=hidden, rng=rng, dtype=dtype) for c in channel_list])

    def __len__(self):
        return len(self.blocks)

    def __getitem__(self, i):
        return self.blocks[i]

    def named_parameters(self, prefix=""):
        out = []
        for i, b in enumerate(self.blocks):
            out.extend(b.named_parameters(f"{prefix}block{i}."))
        return out

    def named_buffers(self, prefix=""):
        out = []
        for i, b in enumerate(self.blocks):
            out.extend(b.named_buffers(f"{prefix}block{i}."))
        return out


# -- value-level operations ----------------------------------------------------


def predict_mask(features: np.ndarray, block: SsaBlock) -> SemanticMask:
    """Mask for a single c x h x w feature grid; sigmoid keeps it in [0, 1]."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 3 or feats.shape[0] != block.channels:
        raise ValueError(f"features must be {block.channels}xhxw, got shape {feats.shape}")
    out = block.predict_mask_t(Tensor(feats[None])).data[0, 0]
    return SemanticMask(out)


def affine_from_text(text: TextEmbedding, block: SsaBlock) -> AffineParams:
    gamma, beta = block.affine_t(Tensor(text.vector[None]))
    return AffineParams(gamma.data[0], beta.data[0])


def apply_modulation(features: np.ndarray, mask: np.ndarray, gamma: np.ndarray,
                     beta: np.ndarray, normalized: np.ndarray) -> np.ndarray:
    """The conditioning arithmetic alone: x + m * (gamma * x_norm + beta)."""
    features = np.asarray(features, dtype=np.float64)
    g = np.asarray(gamma, dtype=np.float64)[:, None, None]
    b = np.asarray(beta, dtype=np.float64)[:, None, None]
    return features + np.asarray(mask)[None] * (g * np.asarray(normalized) + b)


def ssa_transform(features: np.ndarray, text: TextEmbedding, block: SsaBlock) -> np.ndarray:
    """Full SSA conditioning of a single c x h x w grid (eval-mode statistics)."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 3 or feats.shape[0] != block.channels:
        raise ValueError(f"features must be {block.channels}xhxw, got shape {feats.shape}")
    out = block.forward(Tensor(feats[None]), Tensor(text.vector[None]), training=False)
    return out.data[0]
