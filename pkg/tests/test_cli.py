"""CLI surfaces: argument contracts, reproducible artifacts, config freezing."""

import json

import numpy as np
import pytest

from tsic.cli import main
from tsic.imageio import read_png, write_png
from tsic.model import CodecModel, ModelConfig
from tsic.synthetic import make_dataset


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "model.tsck"
    model = CodecModel.create(
        ModelConfig(latent_channels=12, hidden_channels=8, hyper_channels=8,
                    resblocks=2, ssa_hidden=32),
        seed=1,
    )
    model.save(path, extra_meta={"stage": 1})
    return path


@pytest.fixture(scope="module")
def image_png(tmp_path_factory):
    p = tmp_path_factory.mktemp("img") / "x.png"
    write_png(p, np.random.default_rng(0).integers(0, 256, (3, 64, 64), dtype=np.uint8))
    return p


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    make_dataset(root, count=6, size=64, seed=2)
    return root / "manifest.jsonl"


class TestTrainCommand:
    def test_stage1_writes_checkpoint_log_and_frozen_config(self, dataset, tmp_path):
        run = tmp_path / "run"
        rc = main([
            "train", "--manifest", str(dataset), "--stage", "1", "--target-bpp", "0.3",
            "--run-dir", str(run), "--seed", "3",
            "--set", "epochs=1", "--set", "batch_size=4",
            "--set", "latent_channels=8", "--set", "hidden_channels=8",
            "--set", "hyper_channels=8", "--set", "resblocks=1", "--set", "ssa_hidden=16",
        ])
        assert rc == 0
        assert (run / "stage1_checkpoint.tsck").exists()
        assert (run / "stage1_loss_log.jsonl").read_text().strip()
        frozen = json.loads((run / "config.json").read_text())
        assert frozen["target_bpp"] == 0.3 and frozen["seed"] == 3

    def test_stage2_without_stage1_checkpoint_names_artifact(self, dataset, tmp_path):
        with pytest.raises(SystemExit, match="stage1_checkpoint.tsck"):
            main(["train", "--manifest", str(dataset), "--stage", "2",
                  "--run-dir", str(tmp_path / "fresh")])

    def test_variant_recorded_in_frozen_config(self, dataset, tmp_path):
        run = tmp_path / "runv"
        main([
            "train", "--manifest", str(dataset), "--stage", "1", "--variant", "no_text",
            "--run-dir", str(run), "--set", "epochs=1", "--set", "batch_size=4",
            "--set", "latent_channels=8", "--set", "hidden_channels=8",
            "--set", "hyper_channels=8", "--set", "resblocks=1", "--set", "ssa_hidden=16",
        ])
        assert json.loads((run / "config.json").read_text())["variant"] == "no_text"


class TestCompressCommand:
    def test_writes_tsic_stream(self, checkpoint, image_png, tmp_path, capsys):
        out = tmp_path / "x.tsic"
        rc = main(["compress", str(image_png), "--checkpoint", str(checkpoint), "--out", str(out)])
        assert rc == 0
        assert out.read_bytes()[:4] == b"TSIC"
        assert "bpp=" in capsys.readouterr().out

    def test_byte_identical_reruns(self, checkpoint, image_png, tmp_path):
        a, b = tmp_path / "a.tsic", tmp_path / "b.tsic"
        main(["compress", str(image_png), "--checkpoint", str(checkpoint), "--out", str(a)])
        main(["compress", str(image_png), "--checkpoint", str(checkpoint), "--out", str(b)])
        assert a.read_bytes() == b.read_bytes()

    def test_caption_flag_rejected_at_encoder(self, checkpoint, image_png, tmp_path, capsys):
        with pytest.raises(SystemExit):
            main(["compress", str(image_png), "--checkpoint", str(checkpoint),
                  "--out", str(tmp_path / "x.tsic"), "--caption", "text plays no role here"])
        assert "--caption" in capsys.readouterr().err

    def test_unreadable_image_rejected(self, checkpoint, tmp_path):
        with pytest.raises(SystemExit, match="not found"):
            main(["compress", str(tmp_path / "missing.png"),
                  "--checkpoint", str(checkpoint), "--out", str(tmp_path / "x.tsic")])


class TestDecompressCommand:
    @pytest.fixture()
    def bitstream(self, checkpoint, image_png, tmp_path):
        out = tmp_path / "s.tsic"
        main(["compress", str(image_png), "--checkpoint", str(checkpoint), "--out", str(out)])
        return out

    def test_caption_decode_restores_dims(self, checkpoint, bitstream, tmp_path):
        out = tmp_path / "y.png"
        rc = main(["decompress", str(bitstream), "--checkpoint", str(checkpoint),
                   "--caption", "a gold disk", "--out", str(out)])
        assert rc == 0
        assert read_png(out).shape == (3, 64, 64)

    def test_no_text_decode(self, checkpoint, bitstream, tmp_path):
        out = tmp_path / "z.png"
        rc = main(["decompress", str(bitstream), "--checkpoint", str(checkpoint),
                   "--no-text", "--out", str(out)])
        assert rc == 0 and out.exists()

    def test_caption_and_no_text_mutually_exclusive(self, checkpoint, bitstream, tmp_path):
        with pytest.raises(SystemExit):
            main(["decompress", str(bitstream), "--checkpoint", str(checkpoint),
                  "--caption", "x", "--no-text", "--out", str(tmp_path / "w.png")])

    def test_different_captions_same_input_different_output(self, checkpoint, bitstream, tmp_path):
        out1, out2 = tmp_path / "c1.png", tmp_path / "c2.png"
        main(["decompress", str(bitstream), "--checkpoint", str(checkpoint),
              "--caption", "a crimson square on navy", "--out", str(out1)])
        main(["decompress", str(bitstream), "--checkpoint", str(checkpoint),
              "--caption", "a teal disk on gold", "--out", str(out2)])
        assert not np.array_equal(read_png(out1), read_png(out2))

    def test_corrupt_stream_errors(self, checkpoint, bitstream, tmp_path):
        blob = bytearray(bitstream.read_bytes())
        blob[25] ^= 0xAA
        bad = tmp_path / "bad.tsic"
        bad.write_bytes(bytes(blob))
        with pytest.raises(SystemExit, match="decode failed|checksum"):
            main(["decompress", str(bad), "--checkpoint", str(checkpoint),
                  "--no-text", "--out", str(tmp_path / "nope.png")])

    def test_wrong_checkpoint_model_id_errors(self, bitstream, tmp_path):
        other = tmp_path / "other.tsck"
        CodecModel.create(
            ModelConfig(latent_channels=12, hidden_channels=8, hyper_channels=8,
                        resblocks=2, ssa_hidden=32),
            seed=999,
        ).save(other)
        with pytest.raises(SystemExit, match="model-id"):
            main(["decompress", str(bitstream), "--checkpoint", str(other),
                  "--no-text", "--out", str(tmp_path / "nope.png")])

    def test_filesystem_roundtrip_equals_in_memory(self, checkpoint, image_png, bitstream, tmp_path):
        from tsic.data import TextEmbedding, denormalize_image, normalize_image
        from tsic.entropy_codec import CompressedObject
        from tsic.imageio import load_image

        out = tmp_path / "fs.png"
        main(["decompress", str(bitstream), "--checkpoint", str(checkpoint),
              "--no-text", "--out", str(out)])

        model, _ = CodecModel.load(checkpoint)
        img = normalize_image(load_image(image_png))
        obj = model.compress_image(img)
        assert obj.to_bytes() == bitstream.read_bytes()  # encode path bit-exact
        decoded = model.decompress_image(CompressedObject.from_bytes(bitstream.read_bytes()),
                                         TextEmbedding.zero())
        np.testing.assert_array_equal(read_png(out), denormalize_image(decoded))

    def test_emit_maps_during_decompress(self, checkpoint, bitstream, tmp_path):
        maps_dir = tmp_path / "decode_maps"
        rc = main(["decompress", str(bitstream), "--checkpoint", str(checkpoint),
                   "--no-text", "--out", str(tmp_path / "img.png"),
                   "--emit-maps", str(maps_dir)])
        assert rc == 0
        assert len(list(maps_dir.glob("mask_stage*.png"))) == 5
        assert (maps_dir / "bit_allocation.npy").exists()


class TestEvalStabilityMaps:
    def test_eval_writes_rdpoints(self, checkpoint, dataset, tmp_path, capsys):
        out = tmp_path / "eval"
        rc = main(["eval", "--checkpoint", str(checkpoint), "--manifest", str(dataset),
                   "--out", str(out)])
        assert rc == 0
        lines = (out / "rdpoints.jsonl").read_text().strip().splitlines()
        assert len(lines) == 6
        assert "bpp=" in capsys.readouterr().out

    def test_stability_prints_six_rows(self, checkpoint, image_png, tmp_path, capsys):
        rc = main(["stability", "--checkpoint", str(checkpoint), "--image", str(image_png),
                   "--caption", "one", "--caption", "two", "--caption", "three",
                   "--caption", "four", "--caption", "five",
                   "--mismatched", "wrong", "--out", str(tmp_path / "st")])
        assert rc == 0
        out = capsys.readouterr().out
        assert out.count("\n") >= 7  # header + 6 rows
        assert "mismatch" in out

    def test_emit_maps_writes_five_masks(self, checkpoint, image_png, tmp_path):
        rc = main(["emit-maps", "--checkpoint", str(checkpoint), "--image", str(image_png),
                   "--caption", "a scene", "--out-dir", str(tmp_path / "maps")])
        assert rc == 0
        masks = list((tmp_path / "maps").glob("mask_stage*.png"))
        assert len(masks) == 5

    def test_ablate_missing_checkpoints_listed(self, dataset, tmp_path):
        with pytest.raises(SystemExit, match="no_text:0.3"):
            main(["ablate", "--manifest", str(dataset),
                  "--checkpoint", "full:0.3=/nonexistent/a.tsck"])
