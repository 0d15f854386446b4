"""End-to-end CLI tests (in-process main)."""

import csv
import io

import numpy as np
import pytest
from PIL import Image

from crafill import images
from crafill.cli import main


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A tiny dataset plus trained base-64 weights shared by the tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    data.mkdir()
    rng = np.random.default_rng(0)
    for i in range(3):
        arr = rng.integers(0, 256, (64, 64, 3), dtype=np.uint8)
        Image.fromarray(arr, "RGB").save(data / f"img_{i}.png")
    out = root / "run"
    code = main(
        [
            "--seed", "3",
            "train",
            "--dataset", str(data),
            "--out", str(out),
            "--steps", "1",
            "--image-size", "64",
            "--width", "0.25",
            "--batch", "1",
            "--checkpoint-every", "1",
        ]
    )
    assert code == 0
    return root


class TestTrainCommand:
    def test_checkpoints_and_log(self, workdir):
        run = workdir / "run"
        assert (run / "checkpoint_000000.craw").exists()
        assert (run / "checkpoint_000001.craw").exists()
        assert (run / "train.jsonl").read_text().count("\n") == 1

    def test_steps_zero_writes_initial_checkpoint(self, workdir, tmp_path):
        code = main(
            [
                "train",
                "--dataset", str(workdir / "data"),
                "--out", str(tmp_path),
                "--steps", "0",
                "--image-size", "64",
                "--width", "0.25",
            ]
        )
        assert code == 0
        assert (tmp_path / "checkpoint_000000.craw").exists()


class TestInpaintCommand:
    def test_empty_mask_reproduces_input_pixels(self, workdir, tmp_path):
        inp = workdir / "data" / "img_0.png"
        mask = tmp_path / "mask.png"
        images.save_mask(mask, np.zeros((64, 64), np.float32))
        outp = tmp_path / "out.png"
        code = main(
            [
                "inpaint",
                "--input", str(inp),
                "--mask", str(mask),
                "--weights", str(workdir / "run" / "checkpoint_000001.craw"),
                "--output", str(outp),
            ]
        )
        assert code == 0
        with Image.open(inp) as a, Image.open(outp) as b:
            np.testing.assert_array_equal(np.asarray(a.convert("RGB")), np.asarray(b))

    def test_inpaints_hole_and_pads(self, workdir, tmp_path):
        rng = np.random.default_rng(1)
        arr = rng.integers(0, 256, (96, 80, 3), dtype=np.uint8)
        inp = tmp_path / "in.png"
        Image.fromarray(arr, "RGB").save(inp)
        m = np.zeros((96, 80), np.float32)
        m[20:60, 20:60] = 1.0
        mask = tmp_path / "mask.png"
        images.save_mask(mask, m)
        outp = tmp_path / "out.png"
        code = main(
            [
                "inpaint",
                "--input", str(inp),
                "--mask", str(mask),
                "--weights", str(workdir / "run" / "checkpoint_000001.craw"),
                "--output", str(outp),
                "--pad",
            ]
        )
        assert code == 0
        with Image.open(outp) as im:
            out = np.asarray(im)
        assert out.shape == (96, 80, 3)
        ctx = ~m.astype(bool)
        np.testing.assert_array_equal(out[ctx], arr[ctx])

    def test_missing_weights_exit_2(self, workdir, tmp_path, capsys):
        inp = workdir / "data" / "img_0.png"
        mask = tmp_path / "m.png"
        images.save_mask(mask, np.zeros((64, 64), np.float32))
        code = main(
            [
                "inpaint",
                "--input", str(inp),
                "--mask", str(mask),
                "--weights", str(tmp_path / "nope.craw"),
                "--output", str(tmp_path / "o.png"),
            ]
        )
        assert code == 2
        assert "nope.craw" in capsys.readouterr().err

    def test_mask_size_mismatch_exit_4(self, workdir, tmp_path):
        inp = workdir / "data" / "img_0.png"
        mask = tmp_path / "m.png"
        images.save_mask(mask, np.zeros((32, 32), np.float32))
        code = main(
            [
                "inpaint",
                "--input", str(inp),
                "--mask", str(mask),
                "--weights", str(workdir / "run" / "checkpoint_000001.craw"),
                "--output", str(tmp_path / "o.png"),
            ]
        )
        assert code == 4


class TestBenchCommand:
    def test_csv_report_and_mac_identity(self, workdir, tmp_path):
        out = tmp_path / "bench.csv"
        code = main(
            [
                "bench",
                "--weights", str(workdir / "run" / "checkpoint_000001.craw"),
                "--bench-sizes", "64,128,192",
                "--output", str(out),
            ]
        )
        assert code == 0
        rows = list(csv.DictReader(io.StringIO(out.read_text())))
        assert [r["resolution"] for r in rows] == ["64", "128", "192"]
        assert len({r["conv_macs"] for r in rows}) == 1
        taps = [int(r["resample_taps"]) for r in rows]
        assert taps[0] < taps[1] < taps[2]


class TestMaskgenCommand:
    def test_deterministic_bytes(self, tmp_path):
        d1, d2 = tmp_path / "a", tmp_path / "b"
        for d in (d1, d2):
            code = main(
                ["--seed", "7", "maskgen", "--out", str(d), "--n", "3",
                 "--size", "96x128"]
            )
            assert code == 0
        for i in range(3):
            b1 = (d1 / f"mask_{i:05d}.png").read_bytes()
            b2 = (d2 / f"mask_{i:05d}.png").read_bytes()
            assert b1 == b2

    def test_masks_are_binary_pngs(self, tmp_path):
        main(["maskgen", "--out", str(tmp_path), "--n", "2", "--size", "64x64"])
        m = images.load_mask(tmp_path / "mask_00000.png")
        assert set(np.unique(m)) <= {0.0, 1.0}


class TestCheckgradCommand:
    def test_all_ops_under_tolerance(self, capsys):
        assert main(["checkgrad"]) == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out
        assert "gated_lwgc_sc" in out


class TestUsage:
    def test_unknown_flag_exit_1(self, capsys):
        assert main(["inpaint", "--bogus"]) == 1

    def test_bad_size_exit_1(self, tmp_path):
        assert main(["maskgen", "--out", str(tmp_path), "--size", "potato"]) == 1
