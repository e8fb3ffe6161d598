"""tsic: learned image compression with decoder-side text conditioning.

A desk-scale codec in numpy/scipy: four-stage analysis/synthesis transforms,
a hyperprior entropy model feeding a real range-coded bitstream, semantic-
spatial text modulation in the decoder, and a text-conditional adversarial
training objective, plus the evaluation protocols (BD-rate, caption
stability, bit-allocation maps) to study what the text buys.
"""

from .data import (
    DatasetManifest,
    HyperLatent,
    ImageTensor,
    LatentCode,
    ManifestRecord,
    TextEmbedding,
    TextKind,
    crop_image,
    denormalize_image,
    load_manifest,
    normalize_image,
    pad_to_multiple,
    write_manifest,
)
from .entropy_codec import (
    CompressedObject,
    HyperpriorParams,
    RateEstimate,
    bit_allocation_map,
    bits_from_probabilities,
    compress,
    decompress_latents,
    estimate_rate,
)
from .evaluation import RdCurve, RdPoint, bd_rate, emit_maps, evaluate, psnr_from_mse, stability_protocol
from .model import CodecModel, ModelConfig
from .ssa import (
    AffineParams,
    SemanticMask,
    SsaBlock,
    SsaStack,
    TextEncoderAdapter,
    affine_from_text,
    embed_text,
    predict_mask,
    ssa_transform,
)
from .training import (
    LossReport,
    TrainConfig,
    apply_variant,
    distortion,
    egp_loss,
    rate_target_controller,
    train_stage,
    variant_inference_text,
)
from .transforms import EncoderParams, GeneratorParams, QuantizeMode, encode, generate, quantize

__version__ = "0.1.0"
