"""Caption stability and the text-ablation variants, in miniature.

Trains the full model plus the three text-ablation variants at one operating
point (small budget), then:
  1. decodes one bitstream under five paraphrased captions and one wrong
     caption (the rate column is constant by construction; quality moves),
  2. compares the variants' mean rate/quality on held-out scenes.

The acceptance suite runs the same protocols at a larger budget with three
operating points per variant and full BD-rate tables.

Run:  python3 demos/05_stability_and_ablation.py   (several minutes on CPU)
"""

import tempfile
from pathlib import Path

import numpy as np

from tsic import CodecModel, normalize_image
from tsic.evaluation import evaluate, stability_protocol
from tsic.ssa import TextEncoderAdapter
from tsic.synthetic import captions_for, make_dataset, mismatched_caption, render_scene
from tsic.training import TrainConfig, lambda_pair_for_target, train_stage

work = Path(tempfile.mkdtemp(prefix="tsic_demo05_"))
manifest = make_dataset(work / "data", count=96, size=64, seed=3)
lo, hi = lambda_pair_for_target(0.30)
shared = dict(target_bpp=0.30, seed=11, lambda_low=lo, lambda_high=hi,
              latent_channels=32, hidden_channels=24, hyper_channels=16,
              resblocks=4, ssa_hidden=96)

models = {}
for variant in ("full", "no_g_text", "no_d_text", "no_text"):
    cfg1 = TrainConfig(stage=1, epochs=5, learning_rate=6e-4, variant=variant, **shared)
    r1 = train_stage(manifest, cfg1, work / variant)
    cfg2 = TrainConfig(stage=2, epochs=2, learning_rate=2e-4, variant=variant, **shared)
    r2 = train_stage(manifest, cfg2, work / variant, resume=r1.checkpoint_path)
    models[variant] = r2.model
    print(f"trained {variant}: bpp={r2.history[-1].bpp:.3f} mse={r2.history[-1].d_mse:.4f}")

adapter = TextEncoderAdapter.create("deterministic_stub", seed=11)

print("\n== stability: one bitstream, six captions ==")
rng = np.random.default_rng(99)
pixels, attrs = render_scene(rng, size=64)
img = normalize_image(pixels)
rows = stability_protocol(models["full"], img, list(captions_for(attrs)),
                          mismatched_caption(attrs, rng), text_adapter=adapter)
print(f"{'sentence':<10} {'bpp':>8} {'psnr(dB)':>10} {'perc':>10}")
for row in rows:
    print(f"{row.caption_id:<10} {row.bpp:>8.4f} {row.psnr_db:>10.4f} {row.perc_proxy:>10.6f}")
print("rate is identical in every row: the text never touches the bitstream")

print("\n== variants on 12 held-out scenes (decode text per each variant's rule) ==")
eval_rng = np.random.default_rng(1234)
imageset, captions = [], []
for i in range(12):
    px, attrs = render_scene(eval_rng, size=64)
    imageset.append((f"eval{i}", normalize_image(px)))
    captions.append(captions_for(attrs)[0])
print(f"{'variant':<11} {'bpp':>8} {'mse':>9} {'perc':>9}")
for variant, model in models.items():
    pts = evaluate(imageset, model, captions, variant, text_adapter=adapter)
    print(f"{variant:<11} {np.mean([p.bpp for p in pts]):>8.4f} "
          f"{np.mean([p.mse for p in pts]):>9.5f} {np.mean([p.perc_proxy for p in pts]):>9.5f}")
print("\ndirection to look for: the full model reconstructs best at equal rate;")
print("text-ablated variants pay for the missing side information in quality.")
