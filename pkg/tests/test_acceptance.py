"""Acceptance criteria, one test per criterion, each printing a PASS line.

The desk-scale protocol: ~200 synthetic 64x64 image-caption pairs, a reduced
but structurally complete model, all four text-ablation variants at the
three operating points. Training fixtures are shared module-wide and run two
variants in parallel; expect tens of minutes of CPU for the full module.
"""

import math
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import pytest

from tsic import autodiff as ad
from tsic.autodiff import Tensor
from tsic.adversarial import discriminator_loss
from tsic.data import TextEmbedding, normalize_image
from tsic.entropy_codec import bit_allocation_map, decompress_latents, estimate_rate
from tsic.evaluation import RdCurve, bd_rate, build_curve, emit_maps, evaluate, stability_protocol
from tsic.model import CodecModel
from tsic.perceptual import create_perceptual_adapter
from tsic.ssa import SsaBlock, TextEncoderAdapter, apply_modulation, embed_text, predict_mask
from tsic.synthetic import captions_for, make_dataset, mismatched_caption, render_scene
from tsic.training import TrainConfig, lambda_pair_for_target, train_stage
from tsic.transforms import quantize, QuantizeMode, encode
from tsic.data import pad_to_multiple

from helpers import relative_error

# -- desk-scale experiment recipe ---------------------------------------------------

SEED = 11
DATA_SEED = 3
N_TRAIN = 192
N_EVAL = 24
TARGETS = (0.15, 0.30, 0.45)
VARIANTS = ("full", "no_g_text", "no_d_text", "no_text")
WIDTHS = dict(latent_channels=32, hidden_channels=24, hyper_channels=16,
              resblocks=4, ssa_hidden=96)
S1 = dict(stage=1, epochs=12, learning_rate=6e-4)
S2 = dict(stage=2, epochs=8, learning_rate=2e-4)


# the discriminator only exists in stage 2, so variants differing purely on
# the discriminator side share their stage-1 run bit-for-bit
STAGE1_PROXY = {"full": "full", "no_d_text": "full",
                "no_g_text": "no_g_text", "no_text": "no_g_text"}


def _stage1_job(args):
    proxy_variant, target, data_dir, out_dir = args
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        from tsic.data import load_manifest

        manifest = load_manifest(Path(data_dir) / "manifest.jsonl")
        lo, hi = lambda_pair_for_target(target)
        run = Path(out_dir) / f"s1_{proxy_variant}_{target:.2f}"
        cfg = TrainConfig(target_bpp=target, seed=SEED, variant=proxy_variant,
                          lambda_low=lo, lambda_high=hi, **WIDTHS, **S1)
        r = train_stage(manifest, cfg, run)
        return proxy_variant, target, str(r.checkpoint_path)


def _stage2_job(args):
    variant, target, s1_ckpt, data_dir, out_dir = args
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        from tsic.data import load_manifest

        manifest = load_manifest(Path(data_dir) / "manifest.jsonl")
        lo, hi = lambda_pair_for_target(target)
        run = Path(out_dir) / f"{variant}_{target:.2f}"
        cfg = TrainConfig(target_bpp=target, seed=SEED, variant=variant,
                          lambda_low=lo, lambda_high=hi, **WIDTHS, **S2)
        r = train_stage(manifest, cfg, run, resume=s1_ckpt)
        return variant, target, str(r.checkpoint_path)


@pytest.fixture(scope="module")
def desk_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk_data")
    make_dataset(root, count=N_TRAIN, size=64, seed=DATA_SEED)
    return root


@pytest.fixture(scope="module")
def eval_scenes():
    rng = np.random.default_rng(1234)
    images, captions, attrs_list = [], [], []
    for i in range(N_EVAL):
        px, attrs = render_scene(rng, size=64)
        images.append((f"eval{i}", normalize_image(px)))
        captions.append(captions_for(attrs)[i % 5])
        attrs_list.append(attrs)
    return images, captions, attrs_list


@pytest.fixture(scope="module")
def trained_grid(desk_data, tmp_path_factory):
    """All four variants at the three operating points (the heavy fixture)."""
    out = tmp_path_factory.mktemp("desk_runs")
    s1_jobs = [(pv, t, str(desk_data), str(out)) for pv in ("full", "no_g_text") for t in TARGETS]
    stage1 = {}
    with ProcessPoolExecutor(max_workers=2) as pool:
        for proxy, target, ckpt in pool.map(_stage1_job, s1_jobs):
            stage1[(proxy, target)] = ckpt
    s2_jobs = [(v, t, stage1[(STAGE1_PROXY[v], t)], str(desk_data), str(out))
               for v in VARIANTS for t in TARGETS]
    checkpoints = {}
    with ProcessPoolExecutor(max_workers=2) as pool:
        for variant, target, ckpt in pool.map(_stage2_job, s2_jobs):
            checkpoints[(variant, target)] = Path(ckpt)
    return checkpoints


@pytest.fixture(scope="module")
def full_model(trained_grid):
    model, _ = CodecModel.load(trained_grid[("full", 0.30)])
    return model


@pytest.fixture(scope="module")
def adapter():
    return TextEncoderAdapter.create("deterministic_stub", seed=SEED)


def _pass(n, detail):
    print(f"\nPASS criterion-{n}: {detail}")


# -- criteria -----------------------------------------------------------------------


def test_criterion_01_bitstream_integrity(full_model, eval_scenes):
    images, _, _ = eval_scenes
    assert len(images) == 24
    start = time.time()
    worst_gap = 0.0
    for _, img in images:
        obj = full_model.compress_image(img)
        y_hat, z_hat = decompress_latents(obj, full_model.hyperprior)
        padded, _ = pad_to_multiple(img, 16)
        expect = quantize(encode(padded, full_model.encoder), QuantizeMode.EVAL_ROUND)
        np.testing.assert_array_equal(y_hat.values, expect.values)

        est = estimate_rate(y_hat, z_hat, full_model.hyperprior, (img.height, img.width))
        est_bits = est.bits_y + est.bits_z
        gap = abs(obj.payload_bits - est_bits)
        assert gap <= 0.02 * est_bits + 64 * 8
        worst_gap = max(worst_gap, gap - 0.02 * est_bits)
    elapsed = time.time() - start
    assert elapsed < 120.0
    _pass(1, f"24 images lossless, file-vs-estimate within 2%+64B, {elapsed:.1f}s")


def test_criterion_02_rate_arithmetic_oracle():
    from tsic.entropy_codec import SIGMA_MIN, HyperpriorParams, bits_from_probabilities
    from tsic.data import HyperLatent, LatentCode

    params = HyperpriorParams(latent_channels=1, hyper_channels=1, hidden=2,
                              rng=np.random.default_rng(0), dtype=np.float64)
    for _, p in params.named_parameters():
        p.data = np.zeros_like(p.data)
    params.dec2.b.data[1] = math.log(math.expm1(1.0 - SIGMA_MIN))  # sigma exactly 1

    est = estimate_rate(LatentCode(np.zeros((1, 1, 1)), quantized=True),
                        HyperLatent(np.zeros((1, 1, 1)), quantized=True),
                        params, dims=(16, 16))
    oracle = -math.log2(0.5 * (1 + math.erf(0.5 / math.sqrt(2)))
                        - 0.5 * (1 + math.erf(-0.5 / math.sqrt(2))))
    assert est.bits_y == pytest.approx(oracle, abs=1e-9)
    assert abs(est.bits_y - 1.3850) <= 1e-3

    uniform = bits_from_probabilities(np.full(16, 1.0 / 256))
    assert uniform == 128.0  # exactly 8 bits/symbol
    _pass(2, f"unit-gaussian zero-symbol = {est.bits_y:.4f} bits, uniform-256 = 8 bits/symbol exact")


def test_criterion_03_ssa_correctness():
    rng = np.random.default_rng(0)
    block = SsaBlock(4, hidden=16, rng=rng, dtype=np.float64)

    # masks bounded over 1e4+ random values
    checked = 0
    while checked < 10_000:
        feats = rng.uniform(-80, 80, (4, 8, 8))
        mask = predict_mask(feats, block)
        assert mask.values.min() >= 0.0 and mask.values.max() <= 1.0
        checked += mask.values.size

    # zero mask -> exact identity
    feats = rng.uniform(-2, 2, (4, 5, 5))
    out = apply_modulation(feats, np.zeros((5, 5)), rng.uniform(-1, 1, 4),
                           rng.uniform(-1, 1, 4), rng.uniform(-2, 2, (4, 5, 5)))
    np.testing.assert_array_equal(out, feats)

    # FD gradient agreement on a 2x4x4 instance at float64
    block2 = SsaBlock(2, hidden=8, rng=np.random.default_rng(5), dtype=np.float64)
    feats0 = rng.uniform(-2, 2, (1, 2, 4, 4))
    text0 = rng.uniform(-1, 1, (1, 512))
    probe = rng.standard_normal((1, 2, 4, 4))

    ft = Tensor(feats0.copy(), requires_grad=True)
    tt = Tensor(text0.copy(), requires_grad=True)
    out_t = block2.forward(ft, tt, training=True, update_stats=False)
    ad.tsum(out_t * Tensor(probe)).backward()

    def scalar(feats, text):
        o = block2.forward(Tensor(feats), Tensor(text), training=True, update_stats=False)
        return float((o.data * probe).sum())

    eps = 1e-6
    worst = 0.0
    for idx in [(0, 0, 1, 2), (0, 1, 3, 0), (0, 0, 0, 0)]:
        hi = feats0.copy(); hi[idx] += eps
        lo = feats0.copy(); lo[idx] -= eps
        fd = (scalar(hi, text0) - scalar(lo, text0)) / (2 * eps)
        worst = max(worst, relative_error(ft.grad[idx], fd))
    for idx in [(0, 3), (0, 200), (0, 511)]:
        hi = text0.copy(); hi[idx] += eps
        lo = text0.copy(); lo[idx] -= eps
        fd = (scalar(feats0, hi) - scalar(feats0, lo)) / (2 * eps)
        worst = max(worst, relative_error(tt.grad[idx], fd))
    assert worst < 1e-3
    _pass(3, f"10^4 mask values in [0,1]; zero-mask identity; FD gradient agreement {worst:.2e}")


def test_criterion_04_loss_formulas():
    # distortion with the published constants k_m=1, k_p=0.075*2^-5
    class FixedPerc:
        def distance(self, x, y):
            return 0.32

    from tsic.data import ImageTensor
    from tsic.training import distortion

    cfg = TrainConfig()
    x = ImageTensor(np.zeros((3, 16, 16)))
    y = ImageTensor(np.full((3, 16, 16), 0.2))
    d, d_mse, d_perc = distortion(x, y, cfg, adapter=FixedPerc())
    assert d_mse == pytest.approx(0.04, abs=1e-15)
    assert d == pytest.approx(0.04075, abs=1e-12)

    # discriminator-loss fixed points
    perfect = discriminator_loss(np.array([0.0]), np.array([1.0]), np.array([0.0]))
    assert perfect == 0.0
    half = discriminator_loss(np.array([0.5]), np.array([0.5]), np.array([0.5]))
    assert abs(half - 3 * math.log(2)) <= 1e-9
    _pass(4, f"d = 0.04075 exact; perfect D = 0 exact; all-0.5 = {half:.12f} (3 ln 2)")


def test_criterion_05_decoder_only_side_information(full_model, eval_scenes, adapter):
    images, captions, attrs_list = eval_scenes
    img = images[0][1]

    # the encoder interface takes no text at all; bytes are caption-free
    blob_a = full_model.compress_image(img).to_bytes()
    blob_b = full_model.compress_image(img).to_bytes()
    assert blob_a == blob_b

    # stability rows reuse one bitstream: the rate column is constant exactly
    rows = stability_protocol(full_model, img, list(captions_for(attrs_list[0])),
                              mismatched_caption(attrs_list[0], np.random.default_rng(1)),
                              text_adapter=adapter)
    bpps = {r.bpp for r in rows}
    assert len(bpps) == 1

    # decoding under different texts consumes the identical bytes
    out_m = full_model.decompress_image(
        full_model.compress_image(img), embed_text(captions[0], adapter))
    out_z = full_model.decompress_image(
        full_model.compress_image(img), TextEmbedding.zero())
    assert full_model.compress_image(img).to_bytes() == blob_a
    assert not np.array_equal(out_m.pixels, out_z.pixels)  # text changes pixels, not bytes
    _pass(5, f"bitstream bitwise caption-independent; constant rate column {rows[0].bpp:.4f} bpp")


def test_criterion_06_stability_direction(full_model, eval_scenes, adapter):
    _, _, attrs_list = eval_scenes
    rng = np.random.default_rng(7)
    per_sentence = np.zeros(5)
    mismatch_total = 0.0
    n_img = 12
    scene_rng = np.random.default_rng(1234)
    # regenerate the same eval scenes to pair each with its attrs
    scenes = [render_scene(scene_rng, size=64) for _ in range(N_EVAL)]
    for px, attrs in scenes[:n_img]:
        img = normalize_image(px)
        rows = stability_protocol(full_model, img, list(captions_for(attrs)),
                                  mismatched_caption(attrs, rng), text_adapter=adapter)
        for k in range(5):
            per_sentence[k] += rows[k].perc_proxy
        mismatch_total += rows[5].perc_proxy
    per_sentence /= n_img
    mismatch_mean = mismatch_total / n_img
    mutual = per_sentence.mean()
    spread = np.max(np.abs(per_sentence - mutual) / mutual)
    assert spread < 0.01, f"matched-caption spread {spread:.4%} exceeds 1%"
    assert mismatch_mean > per_sentence.max(), (
        f"mismatched captions should decode strictly worse: {mismatch_mean:.5f} "
        f"vs worst matched {per_sentence.max():.5f}"
    )
    _pass(6, f"5 matched sentences within {spread:.3%} of mutual mean; "
             f"mismatch {mismatch_mean:.5f} > all matched (max {per_sentence.max():.5f})")


def test_criterion_07_ablation_direction(trained_grid, eval_scenes, adapter):
    images, captions, _ = eval_scenes
    curves = {}
    for variant in VARIANTS:
        per_point = []
        for target in TARGETS:
            model, _ = CodecModel.load(trained_grid[(variant, target)])
            per_point.append(evaluate(images, model, captions, variant, text_adapter=adapter))
        curves[variant] = build_curve(per_point)

    bd = {v: bd_rate(curves["full"], curves[v]) for v in ("no_d_text", "no_g_text", "no_text")}
    assert bd["no_text"] > bd["no_g_text"] > 0.0, f"ordering violated: {bd}"
    assert bd["no_d_text"] > 0.0, f"no_d_text should cost rate vs full: {bd}"
    _pass(7, "BD-rate vs full (perc axis): "
             + ", ".join(f"{v}={bd[v]:+.2f}%" for v in ("no_d_text", "no_g_text", "no_text")))


def test_criterion_08_bd_rate_tool():
    q = np.array([30.0, 33.0, 36.0, 39.0])
    r = np.array([0.1, 0.2, 0.4, 0.8])
    base = RdCurve(tuple(zip(r, q)))
    assert bd_rate(base, base) == 0.0

    doubled = RdCurve(tuple(zip(2 * r, q)))
    assert abs(bd_rate(base, doubled) - 100.0) <= 0.1

    def rate_of_quality(x):
        return math.exp(0.21 * x + 0.004 * x * x - 7.0)

    qs_base = np.array([26.0, 30.0, 34.0, 38.0])
    qs_test = np.array([27.0, 31.0, 35.0, 37.5])
    curve_a = RdCurve(tuple((rate_of_quality(x), x) for x in qs_base))
    curve_b = RdCurve(tuple((1.5 * rate_of_quality(x), x) for x in qs_test))
    shift = bd_rate(curve_a, curve_b)
    assert abs(shift - 50.0) <= 0.5
    _pass(8, f"identical=0 exact; doubled=+100+-0.1; log2(1.5) shift={shift:+.3f}% (+-0.5)")


def test_criterion_09_training_smoke(desk_data, tmp_path_factory):
    from tsic.data import load_manifest

    manifest = load_manifest(desk_data / "manifest.jsonl")
    lo, hi = lambda_pair_for_target(0.30)
    cfg = TrainConfig(target_bpp=0.30, seed=SEED, variant="full",
                      lambda_low=lo, lambda_high=hi, stage=1, epochs=5,
                      learning_rate=6e-4, **WIDTHS)
    run_a = tmp_path_factory.mktemp("smoke_a")
    run_b = tmp_path_factory.mktemp("smoke_b")
    res_a = train_stage(manifest, cfg, run_a)
    totals = [rep.total for rep in res_a.history]
    assert all(b < a for a, b in zip(totals, totals[1:])), f"not strictly decreasing: {totals}"

    res_b = train_stage(manifest, cfg, run_b)
    bytes_a = res_a.checkpoint_path.read_bytes()
    bytes_b = res_b.checkpoint_path.read_bytes()
    assert bytes_a == bytes_b
    _pass(9, f"epoch totals strictly decrease {totals[0]:.4f} -> {totals[-1]:.4f}; "
             f"reruns bitwise identical ({len(bytes_a)} bytes)")


def test_supporting_bpp_monotone_in_rate_pressure(trained_grid, eval_scenes, adapter):
    """Across the three operating points, stronger rate pressure (the lower
    bpp target's harsher lambda pair) yields lower mean bpp on held-out data."""
    images, captions, _ = eval_scenes
    means = []
    for target in TARGETS:
        model, _ = CodecModel.load(trained_grid[("full", target)])
        pts = evaluate(images, model, captions, "full", text_adapter=adapter)
        means.append(float(np.mean([p.bpp for p in pts])))
    assert means[0] < means[1] < means[2], f"bpp not monotone across operating points: {means}"
    print(f"\nsupporting: held-out mean bpp per operating point {[f'{m:.4f}' for m in means]}")


def test_supporting_discriminator_mismatch_sensitivity(trained_grid, eval_scenes, adapter):
    """After training, the discriminator scores real/matched pairs above
    real/mismatched pairs on held-out data (direction, not magnitude)."""
    from tsic.adversarial import discriminator_forward

    model, _ = CodecModel.load(trained_grid[("full", 0.30)])
    assert model.discriminator is not None
    images, captions, attrs_list = eval_scenes
    rng = np.random.default_rng(3)
    matched_scores, mismatched_scores = [], []
    for (name, img), caption, attrs in zip(images[:12], captions[:12], attrs_list[:12]):
        y_hat = quantize(encode(img, model.encoder), QuantizeMode.EVAL_ROUND)
        dtype = np.float32
        x = Tensor(img.pixels[None].astype(dtype))
        y = Tensor(y_hat.values[None].astype(dtype))
        sm = embed_text(caption, adapter)
        smis = embed_text(mismatched_caption(attrs, rng), adapter)
        matched_scores.append(float(discriminator_forward(
            x, y, Tensor(sm.vector[None].astype(dtype)), model.discriminator).data[0]))
        mismatched_scores.append(float(discriminator_forward(
            x, y, Tensor(smis.vector[None].astype(dtype)), model.discriminator).data[0]))
    assert np.mean(mismatched_scores) < np.mean(matched_scores)
    print(f"\nsupporting: D(real, matched) mean {np.mean(matched_scores):.4f} > "
          f"D(real, mismatched) mean {np.mean(mismatched_scores):.4f}")


def test_supporting_masks_respond_to_text(full_model, eval_scenes, adapter, tmp_path_factory):
    """Zero-text and matched-text decodes of one bitstream produce differing
    prediction masks on the trained full model."""
    from tsic.evaluation import emit_maps_for_bitstream

    images, captions, _ = eval_scenes
    img = images[1][1]
    obj = full_model.compress_image(img)
    d_zero = tmp_path_factory.mktemp("maps_zero")
    d_text = tmp_path_factory.mktemp("maps_text")
    emit_maps_for_bitstream(full_model, obj, TextEmbedding.zero(), d_zero)
    emit_maps_for_bitstream(full_model, obj, embed_text(captions[1], adapter), d_text)
    differing = 0
    for i in range(5):
        a = np.load(d_zero / f"mask_stage{i}.npy")
        b = np.load(d_text / f"mask_stage{i}.npy")
        differing += int(not np.array_equal(a, b))
    assert differing >= 1
    print(f"\nsupporting: {differing}/5 mask stages differ between zero-text and matched-text decode")


def test_criterion_10_map_consistency(full_model, eval_scenes, adapter, tmp_path_factory):
    images, captions, _ = eval_scenes
    out = tmp_path_factory.mktemp("maps")
    img = images[0][1]
    paths = emit_maps(full_model, img, captions[0], out, text_adapter=adapter)
    mask_pngs = [p for p in paths if p.name.startswith("mask_stage") and p.suffix == ".png"]
    assert len(mask_pngs) == 5

    bam = np.load(out / "bit_allocation.npy")
    obj = full_model.compress_image(img)
    y_hat, z_hat = decompress_latents(obj, full_model.hyperprior)
    est = estimate_rate(y_hat, z_hat, full_model.hyperprior, (img.height, img.width))
    total = bam.mean() * y_hat.channels * bam.size
    assert abs(total - est.bits_y) <= 1e-6 * est.bits_y
    _pass(10, f"5 mask files; bit-map total {total:.2f} == bits_y {est.bits_y:.2f} within 1e-6")
