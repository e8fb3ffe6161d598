"""Loss assembly, rate targeting, ablation variants, and two-stage training.

Stage 1 trains encoder, hyperprior and generator (with SSA conditioning) on
rate + distortion alone. Stage 2 resumes from a stage-1 checkpoint, brings
up a fresh discriminator, and alternates one discriminator step with one
generator step per batch, the generator now carrying the weighted
adversarial term. The scalar objective:

    total = lambda_eff * bpp + (k_m * d_mse + k_p * d_perc) + beta * adv_g

with lambda_eff switched between a low/high pair by comparing the batch bpp
against the configured target, so each run lands near its operating point.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .adversarial import derangement, discriminator_forward, discriminator_loss, generator_adv_loss
from .data import DatasetManifest, ImageTensor, TextEmbedding, normalize_image
from .entropy_codec import RateEstimate, rate_bits_tensor
from .imageio import load_image
from .model import CodecModel, ModelConfig
from .perceptual import create_perceptual_adapter
from .ssa import TextEncoderAdapter
from .transforms import QuantizeMode, generator_forward, quantize_tensor

__all__ = [
    "VARIANTS",
    "TARGET_BPP_POINTS",
    "TrainConfig",
    "LossReport",
    "TrainResult",
    "distortion",
    "egp_loss",
    "rate_target_controller",
    "apply_variant",
    "variant_inference_text",
    "train_stage",
]

VARIANTS = ("full", "no_g_text", "no_d_text", "no_text")
TARGET_BPP_POINTS = (0.15, 0.30, 0.45)


@dataclass(frozen=True)
class TrainConfig:
    """Flat training configuration; serializes to a flat key-value document."""

    target_bpp: float = 0.30
    beta: float = 0.15
    k_m: float = 1.0
    k_p: float = 0.075 * 2.0 ** -5
    stage: int = 1
    batch_size: int | None = None       # defaults: 8 in stage 1, 16 in stage 2
    epochs: int = 5
    learning_rate: float = 1e-4
    variant: str = "full"
    seed: int = 0
    lambda_low: float = 0.1
    lambda_high: float = 2.0
    latent_channels: int = 64
    hidden_channels: int = 32
    hyper_channels: int = 32
    resblocks: int = 9
    ssa_hidden: int = 256
    disc_width: int = 32
    text_backend: str = "deterministic_stub"
    perceptual: str = "ms_dssim"
    dtype: str = "float32"
    deterministic: bool = True

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not any(math.isclose(self.target_bpp, t) for t in TARGET_BPP_POINTS):
            raise ValueError(f"target_bpp must be one of {TARGET_BPP_POINTS}")
        if self.k_m < 0 or self.k_p < 0:
            raise ValueError("k_m and k_p must be nonnegative")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if not self.lambda_low < self.lambda_high:
            raise ValueError("lambda_low must be below lambda_high")

    @property
    def effective_batch_size(self) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 8 if self.stage == 1 else 16

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            latent_channels=self.latent_channels,
            hidden_channels=self.hidden_channels,
            hyper_channels=self.hyper_channels,
            resblocks=self.resblocks,
            ssa_hidden=self.ssa_hidden,
            disc_width=self.disc_width,
            dtype=self.dtype,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass(frozen=True)
class LossReport:
    """Per-step (or epoch-mean) loss decomposition.

    rate_bits is the mean coded bits per image in the batch; bpp divides it
    by the pixel count, and total always re-derives from the logged parts.
    """

    total: float
    rate_bits: float
    bpp: float
    d_mse: float
    d_lpips_proxy: float
    adv_g: float
    adv_d: float
    lambda_effective: float

    def recompute_total(self, cfg: TrainConfig) -> float:
        d = cfg.k_m * self.d_mse + cfg.k_p * self.d_lpips_proxy
        return self.lambda_effective * self.bpp + d + cfg.beta * self.adv_g

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class TrainResult:
    checkpoint_path: Path
    history: tuple
    model: CodecModel


def distortion(x, x_hat, cfg: TrainConfig, adapter=None):
    """d = k_m * MSE + k_p * perceptual over [-1, 1] pixels.

    Accepts a pair of ImageTensors (returns floats) or batched Tensors
    (returns graph nodes). The perceptual adapter defaults to the configured
    proxy.
    """
    if adapter is None:
        adapter = create_perceptual_adapter(cfg.perceptual)
    if isinstance(x, Tensor):
        if x.shape != x_hat.shape:
            raise ValueError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
        d_mse = ad.tmean(ad.square(x - x_hat))
        d_perc = adapter.distance(x, x_hat)
        return cfg.k_m * d_mse + cfg.k_p * d_perc, d_mse, d_perc
    if isinstance(x, ImageTensor):
        x, x_hat = x.pixels, x_hat.pixels
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    d_mse = float(np.mean((x - x_hat) ** 2))
    d_perc = float(adapter.distance(x, x_hat))
    return cfg.k_m * d_mse + cfg.k_p * d_perc, d_mse, d_perc


def egp_loss(rate: RateEstimate, d: float, adv_g: float, cfg: TrainConfig,
             lambda_eff: float | None = None, *, d_mse=None, d_perc=None, adv_d=0.0) -> LossReport:
    """Assemble the scalar objective from its parts into a LossReport."""
    lam = cfg.lambda_low if lambda_eff is None else lambda_eff
    total = lam * rate.bpp + d + cfg.beta * adv_g
    if d_mse is None:
        d_mse, d_perc = d / cfg.k_m if cfg.k_m else 0.0, 0.0
    return LossReport(
        total=float(total),
        rate_bits=float(rate.bits_y + rate.bits_z),
        bpp=float(rate.bpp),
        d_mse=float(d_mse),
        d_lpips_proxy=float(d_perc),
        adv_g=float(adv_g),
        adv_d=float(adv_d),
        lambda_effective=float(lam),
    )


def rate_target_controller(current_bpp: float, target_bpp: float, lambda_pair) -> float:
    """Two-point rate targeting: penalize harder above target, ease below;
    ties go to the weaker penalty."""
    lam_low, lam_high = lambda_pair
    if not lam_low < lam_high:
        raise ValueError("lambda_pair must be (low, high) with low < high")
    return lam_high if current_bpp > target_bpp else lam_low


def lambda_pair_for_target(target_bpp: float):
    """Desk-scale default (lambda_low, lambda_high) per operating point.

    Lower-rate points carry uniformly stronger rate pressure so the three
    trained models land on separated, monotone operating points even when a
    desk-scale model's unconstrained rate sits near the middle target.
    """
    table = {0.15: (0.08, 20.0), 0.30: (0.01, 3.0), 0.45: (0.002, 1.0)}
    for key, pair in table.items():
        if math.isclose(target_bpp, key):
            return pair
    raise ValueError(f"no default lambda pair for target {target_bpp!r}")


def apply_variant(variant: str, text_g: TextEmbedding, text_d: TextEmbedding):
    """Route text into generator/discriminator according to the ablation
    variant: full keeps both, no_g_text zeroes the generator side, no_d_text
    zeroes the discriminator side, no_text zeroes both."""
    if variant == "full":
        return text_g, text_d
    if variant == "no_g_text":
        return TextEmbedding.zero(), text_d
    if variant == "no_d_text":
        return text_g, TextEmbedding.zero()
    if variant == "no_text":
        return TextEmbedding.zero(), TextEmbedding.zero()
    raise ValueError(f"unknown variant: {variant!r}")


def variant_inference_text(variant: str, matched: TextEmbedding) -> TextEmbedding:
    """Decode-time text rule: variants that trained the generator without
    text decode with zero features; removing only the discriminator text
    keeps normal text input at inference."""
    if variant in ("full", "no_d_text"):
        return matched
    if variant in ("no_g_text", "no_text"):
        return TextEmbedding.zero()
    raise ValueError(f"unknown variant: {variant!r}")


# -- training loop -----------------------------------------------------------------


def _load_training_set(manifest: DatasetManifest):
    images, captions = [], []
    dims = None
    for rec in manifest.records:
        raw = load_image(rec.resolve(manifest.base_dir))
        img = normalize_image(raw)
        if dims is None:
            dims = (img.height, img.width)
        elif (img.height, img.width) != dims:
            raise ValueError("training requires a uniform image size across the manifest")
        images.append(img.pixels)
        captions.append(rec.captions)
    if not images:
        raise ValueError("manifest holds no records")
    return np.stack(images), captions, dims


def _embed_batch(captions, idx, caption_idx, adapter):
    vecs = []
    for i, k in zip(idx, caption_idx):
        caps = captions[i]
        vecs.append(adapter.backend.embed(caps[k % len(caps)]))
    return np.stack(vecs)


def _variant_text_matrices(variant, matched):
    zeros = np.zeros_like(matched)
    g = zeros if variant in ("no_g_text", "no_text") else matched
    d = zeros if variant in ("no_d_text", "no_text") else matched
    return g, d


def train_stage(manifest: DatasetManifest, cfg: TrainConfig, run_dir, resume=None) -> TrainResult:
    """Run one training stage over the manifest and write a checkpoint plus a
    line-delimited LossReport history under run_dir."""
    from .nn import Adam

    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if cfg.stage == 2 and resume is None:
        raise ValueError("stage 2 requires a stage-1 checkpoint (resume=...)")

    rng = np.random.default_rng(np.random.PCG64(np.random.SeedSequence([cfg.seed, cfg.stage])))
    model = CodecModel.create(cfg.model_config(), seed=cfg.seed, with_discriminator=(cfg.stage == 2))
    if resume is not None:
        from .checkpoint import load_arrays

        arrays, _ = load_arrays(resume)
        model.load_state(arrays, include_disc=False)
    if cfg.stage == 2:
        model.init_discriminator(cfg.seed + 7919)

    adapter = TextEncoderAdapter.create(cfg.text_backend, seed=cfg.seed)
    perceptual = create_perceptual_adapter(cfg.perceptual)
    images, captions, (h, w) = _load_training_set(manifest)
    dtype = cfg.model_config().np_dtype()
    images = images.astype(dtype)

    bs = cfg.effective_batch_size
    n = images.shape[0]
    if n < bs:
        raise ValueError(f"dataset of {n} images is smaller than batch size {bs}")

    adam_codec = Adam(model.codec_parameters(), lr=cfg.learning_rate)
    adam_disc = Adam([p for _, p in model.discriminator.named_parameters()],
                     lr=cfg.learning_rate) if cfg.stage == 2 else None

    history = []
    log_path = run_dir / f"stage{cfg.stage}_loss_log.jsonl"
    pixels_per_image = h * w
    with open(log_path, "w", encoding="utf-8") as log:
        for epoch in range(cfg.epochs):
            order = rng.permutation(n)
            step_reports = []
            for start in range(0, n - bs + 1, bs):
                idx = order[start : start + bs]
                x = Tensor(images[idx])
                caption_idx = rng.integers(0, 1 << 30, size=bs)
                matched = _embed_batch(captions, idx, caption_idx, adapter).astype(dtype)
                g_mat, d_mat = _variant_text_matrices(cfg.variant, matched)
                mis_mat = d_mat[derangement(bs, rng)]
                text_g, text_d, text_mis = Tensor(g_mat), Tensor(d_mat), Tensor(mis_mat)

                y = model.encoder.forward(x)
                if cfg.stage == 1:
                    y_dec = quantize_tensor(y, QuantizeMode.TRAIN_NOISE, rng)
                    y_rate = y_dec
                else:
                    y_rate = quantize_tensor(y, QuantizeMode.TRAIN_NOISE, rng)
                    y_dec = quantize_tensor(y, QuantizeMode.TRAIN_STE)
                z = model.hyperprior.hyper_analyze(y_dec)
                z_rate = quantize_tensor(z, QuantizeMode.TRAIN_NOISE, rng)
                mu, sigma = model.hyperprior.hyper_synthesize(z_rate, (y.shape[2], y.shape[3]))
                z_mu, z_scale = model.hyperprior.z_density()
                bits_y, bits_z = rate_bits_tensor(y_rate, mu, sigma, z_rate, z_mu, z_scale)
                bits_per_image = (bits_y + bits_z) * (1.0 / bs)
                bpp_t = bits_per_image * (1.0 / pixels_per_image)

                x_hat = generator_forward(y_dec, text_g, model.generator, model.ssa, training=True)

                lam = rate_target_controller(float(bpp_t.data), cfg.target_bpp,
                                             (cfg.lambda_low, cfg.lambda_high))

                adv_d_val = 0.0
                if cfg.stage == 2:
                    x_hat_det = x_hat.detach()
                    y_det = y_dec.detach()
                    s_fake = discriminator_forward(x_hat_det, y_det, text_d, model.discriminator)
                    s_real = discriminator_forward(x, y_det, text_d, model.discriminator)
                    s_mis = discriminator_forward(x, y_det, text_mis, model.discriminator)
                    loss_d = discriminator_loss(s_fake, s_real, s_mis)
                    adam_disc.zero_grad()
                    loss_d.backward()
                    adam_disc.step()
                    adv_d_val = float(loss_d.data)

                    s_fake_g = discriminator_forward(x_hat, y_dec, text_d, model.discriminator)
                    adv_g_t = generator_adv_loss(s_fake_g)
                else:
                    adv_g_t = Tensor(np.zeros((), dtype=dtype))

                d_t, mse_t, perc_t = distortion(x, x_hat, cfg, perceptual)
                total_t = lam * bpp_t + d_t + cfg.beta * adv_g_t
                adam_codec.zero_grad()
                total_t.backward()
                adam_codec.step()

                report = egp_loss(
                    RateEstimate(bits_y=float(bits_y.data) / bs, bits_z=float(bits_z.data) / bs,
                                 bpp=float(bpp_t.data)),
                    float(d_t.data), float(adv_g_t.data), cfg, lam,
                    d_mse=float(mse_t.data), d_perc=float(perc_t.data), adv_d=adv_d_val,
                )
                log.write(json.dumps({"epoch": epoch, "step": len(step_reports),
                                      **report.to_dict()}) + "\n")
                step_reports.append(report)

            history.append(_mean_report(step_reports))
            log.flush()

    ckpt = run_dir / f"stage{cfg.stage}_checkpoint.tsck"
    model.save(ckpt, extra_meta={"stage": cfg.stage, "train_config": cfg.to_dict(),
                                 "epochs_completed": cfg.epochs})
    return TrainResult(checkpoint_path=ckpt, history=tuple(history), model=model)


def _mean_report(reports) -> LossReport:
    def mean(attr):
        return float(np.mean([getattr(r, attr) for r in reports]))

    return LossReport(
        total=mean("total"),
        rate_bits=mean("rate_bits"),
        bpp=mean("bpp"),
        d_mse=mean("d_mse"),
        d_lpips_proxy=mean("d_lpips_proxy"),
        adv_g=mean("adv_g"),
        adv_d=mean("adv_d"),
        lambda_effective=mean("lambda_effective"),
    )
