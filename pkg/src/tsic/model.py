"""Bundle of all trainable networks plus checkpoint and image-level codec IO."""

from __future__ import annotations

from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .adversarial import DiscriminatorParams
from .checkpoint import CheckpointError, load_arrays, save_arrays
from .data import ImageTensor, TextEmbedding, crop_image
from .entropy_codec import CompressedObject, HyperpriorParams, compress, decompress_latents
from .ssa import SsaStack
from .transforms import EncoderParams, GeneratorParams, generate

__all__ = ["ModelConfig", "CodecModel"]


@dataclass(frozen=True)
class ModelConfig:
    latent_channels: int = 64
    hidden_channels: int = 32
    hyper_channels: int = 32
    resblocks: int = 9
    ssa_hidden: int = 256
    disc_width: int = 32
    dtype: str = "float32"

    def np_dtype(self):
        return np.dtype(self.dtype)


class CodecModel:
    """Encoder + hyperprior + generator + SSA stack (+ discriminator in
    stage-2 training). Owns checkpoint serialization."""

    def __init__(self, config: ModelConfig, encoder, generator, ssa, hyperprior, discriminator=None):
        self.config = config
        self.encoder = encoder
        self.generator = generator
        self.ssa = ssa
        self.hyperprior = hyperprior
        self.discriminator = discriminator

    @classmethod
    def create(cls, config: ModelConfig = ModelConfig(), *, seed: int = 0, with_discriminator=False):
        rng = np.random.default_rng(np.random.PCG64(seed))
        dtype = config.np_dtype()
        encoder = EncoderParams(hidden=config.hidden_channels, latent_channels=config.latent_channels,
                                rng=rng, dtype=dtype)
        generator = GeneratorParams(latent_channels=config.latent_channels, hidden=config.hidden_channels,
                                    resblocks=config.resblocks, rng=rng, dtype=dtype)
        ssa = SsaStack.create(generator.ssa_channel_list(), hidden=config.ssa_hidden, rng=rng, dtype=dtype)
        hyperprior = HyperpriorParams(latent_channels=config.latent_channels, hyper_channels=config.hyper_channels,
                                      hidden=config.hidden_channels, rng=rng, dtype=dtype)
        disc = None
        if with_discriminator:
            disc = DiscriminatorParams(latent_channels=config.latent_channels, width=config.disc_width,
                                       rng=rng, dtype=dtype)
        return cls(config, encoder, generator, ssa, hyperprior, disc)

    def init_discriminator(self, seed: int):
        """Fresh discriminator (stage-2 startup re-initializes it)."""
        rng = np.random.default_rng(np.random.PCG64(seed))
        self.discriminator = DiscriminatorParams(
            latent_channels=self.config.latent_channels, width=self.config.disc_width,
            rng=rng, dtype=self.config.np_dtype(),
        )
        return self.discriminator

    # -- parameter access ------------------------------------------------------
    def _sections(self, include_disc=True):
        parts = [("encoder", self.encoder), ("generator", self.generator),
                 ("ssa", self.ssa), ("hyperprior", self.hyperprior)]
        if include_disc and self.discriminator is not None:
            parts.append(("discriminator", self.discriminator))
        return parts

    def named_parameters(self, include_disc=True):
        out = []
        for name, sec in self._sections(include_disc):
            out.extend(sec.named_parameters(name + "."))
        return out

    def named_buffers(self):
        out = []
        for name, sec in self._sections():
            out.extend(sec.named_buffers(name + "."))
        return out

    def codec_parameters(self):
        """Everything updated by the rate-distortion objective (E, P, G, SSA)."""
        return [p for _, p in self.named_parameters(include_disc=False)]

    @property
    def model_id(self) -> int:
        return self.hyperprior.digest16()

    # -- checkpoint IO -----------------------------------------------------------
    def save(self, path, extra_meta: dict | None = None) -> Path:
        arrays = {name: p.data for name, p in self.named_parameters()}
        arrays.update({"buffer." + name: b for name, b in self.named_buffers()})
        meta = {"model_config": asdict(self.config),
                "has_discriminator": self.discriminator is not None}
        meta.update(extra_meta or {})
        return save_arrays(path, arrays, meta)

    @classmethod
    def load(cls, path):
        arrays, meta = load_arrays(path)
        if "model_config" not in meta:
            raise CheckpointError(f"checkpoint {path} is missing its model config")
        config = ModelConfig(**meta["model_config"])
        model = cls.create(config, seed=0, with_discriminator=meta.get("has_discriminator", False))
        model.load_state(arrays)
        return model, meta

    def load_state(self, arrays, include_disc=True):
        for name, p in self.named_parameters(include_disc=include_disc):
            if name not in arrays:
                raise CheckpointError(f"checkpoint missing parameter {name!r}")
            if tuple(arrays[name].shape) != tuple(p.data.shape):
                raise CheckpointError(f"shape mismatch for {name!r}")
            p.data = arrays[name].astype(p.data.dtype)
        for name, _ in self.named_buffers():
            key = "buffer." + name
            if key in arrays:
                self._assign_buffer(name, arrays[key])

    def _assign_buffer(self, dotted, value):
        section, rest = dotted.split(".", 1)
        obj = dict(self._sections())[section]
        *path, leaf = rest.split(".")
        for part in path:
            if part.startswith("block") and hasattr(obj, "blocks"):
                obj = obj.blocks[int(part[5:])]
            else:
                obj = getattr(obj, part)
        setattr(obj, leaf, np.array(value))

    # -- image-level codec -------------------------------------------------------
    def compress_image(self, img: ImageTensor) -> CompressedObject:
        return compress(img, self.encoder, self.hyperprior)

    def decompress_image(self, obj: CompressedObject, text: TextEmbedding, collect_masks=None) -> ImageTensor:
        y_hat, _ = decompress_latents(obj, self.hyperprior)
        decoded = generate(y_hat, text, self.generator, self.ssa, collect_masks=collect_masks)
        return crop_image(decoded, (obj.height, obj.width))
