import csv
import json

import pytest
from click.testing import CliRunner

from conftest import natural_image
from octcodec.cli import EXIT_FORMAT, EXIT_IO, EXIT_MODEL, EXIT_USAGE, METRIC_FIELDS, image_metrics, main
from octcodec.codec import encode_image_bytes, load_model, read_image


def run(*args):
    return CliRunner().invoke(main, [str(a) for a in args], catch_exceptions=False)


@pytest.fixture(scope="module")
def image_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("imgs")
    (d / "a.png").write_bytes(encode_image_bytes(natural_image("coffee", (90, 100))))
    (d / "b.ppm").write_bytes(encode_image_bytes(natural_image("chelsea", (64, 48)), ".ppm"))
    return d


class TestEncodeDecode:
    def test_roundtrip_and_stats(self, tiny_ckpt, image_dir, tmp_path):
        r = run("encode", image_dir / "a.png", "--model", tiny_ckpt, "--lambda", 0.01, "--out", tmp_path / "a.mgoc")
        assert r.exit_code == 0, r.output
        size = (tmp_path / "a.mgoc").stat().st_size
        assert f"bytes={size}" in r.output
        assert f"bpp={8 * size / 9000:.6f}" in r.output
        r = run("decode", tmp_path / "a.mgoc", "--model", tiny_ckpt, "--out", tmp_path / "a.png")
        assert r.exit_code == 0, r.output
        assert "width=100 height=90 lambda=0.01" in r.output
        assert read_image(tmp_path / "a.png").shape == (90, 100, 3)

    def test_byte_identical_runs(self, tiny_ckpt, image_dir, tmp_path):
        for name in ("x", "y"):
            run("encode", image_dir / "b.ppm", "--model", tiny_ckpt, "--lambda", 0.003, "--out", tmp_path / f"{name}.mgoc")
            run("decode", tmp_path / f"{name}.mgoc", "--model", tiny_ckpt, "--out", tmp_path / f"{name}.png")
        assert (tmp_path / "x.mgoc").read_bytes() == (tmp_path / "y.mgoc").read_bytes()
        assert (tmp_path / "x.png").read_bytes() == (tmp_path / "y.png").read_bytes()

    def test_out_of_band_lambda(self, tiny_ckpt, image_dir, tmp_path):
        r = run("encode", image_dir / "a.png", "--model", tiny_ckpt, "--lambda", 0.3, "--out", tmp_path / "o.mgoc")
        assert r.exit_code == EXIT_MODEL
        assert "middle" in r.output and not (tmp_path / "o.mgoc").exists()

    def test_missing_image(self, tiny_ckpt, tmp_path):
        r = run("encode", tmp_path / "none.png", "--model", tiny_ckpt, "--lambda", 0.01, "--out", tmp_path / "o.mgoc")
        assert r.exit_code == EXIT_IO

    def test_unsupported_format(self, tiny_ckpt, tmp_path):
        (tmp_path / "a.jpg").write_bytes(b"")
        r = run("encode", tmp_path / "a.jpg", "--model", tiny_ckpt, "--lambda", 0.01, "--out", tmp_path / "o.mgoc")
        assert r.exit_code == EXIT_USAGE

    def test_missing_option_is_usage_error(self, image_dir, tmp_path):
        assert run("encode", image_dir / "a.png", "--lambda", 0.01, "--out", tmp_path / "o").exit_code == EXIT_USAGE

    def test_corrupt_stream(self, tiny_ckpt, tmp_path):
        (tmp_path / "bad.mgoc").write_bytes(b"MGOC garbage")
        r = run("decode", tmp_path / "bad.mgoc", "--model", tiny_ckpt, "--out", tmp_path / "bad.png")
        assert r.exit_code == EXIT_FORMAT and not (tmp_path / "bad.png").exists()

    def test_model_mismatch_writes_nothing(self, tiny_ckpt, tiny_model, image_dir, tmp_path):
        from octcodec.params import save_checkpoint
        from octcodec.training import LambdaSet, checkpoint_meta

        other = tmp_path / "other.ckpt"
        save_checkpoint(other, tiny_model.store.state(), checkpoint_meta(tiny_model, 3, LambdaSet.table("high")))
        run("encode", image_dir / "a.png", "--model", tiny_ckpt, "--lambda", 0.01, "--out", tmp_path / "a.mgoc")
        r = run("decode", tmp_path / "a.mgoc", "--model", other, "--out", tmp_path / "a.png")
        assert r.exit_code == EXIT_MODEL and not (tmp_path / "a.png").exists()

    def test_bad_checkpoint(self, image_dir, tmp_path):
        (tmp_path / "m.ckpt").write_bytes(b"junk")
        r = run("encode", image_dir / "a.png", "--model", tmp_path / "m.ckpt", "--lambda", 0.01, "--out", tmp_path / "o")
        assert r.exit_code == EXIT_FORMAT


class TestEval:
    def test_rows_and_bpp_consistency(self, tiny_ckpt, image_dir, tmp_path):
        r = run("eval", image_dir, "--model", tiny_ckpt, "--lambda", 0.001, "--lambda", 0.01, "--out", tmp_path / "m.csv", "--threads", 2)
        assert r.exit_code == 0, r.output
        with open(tmp_path / "m.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert tuple(rows[0]) == METRIC_FIELDS
        assert len(rows) == 2 * 2
        row = next(x for x in rows if x["image_id"] == "a" and float(x["lambda"]) == 0.01)
        run("encode", image_dir / "a.png", "--model", tiny_ckpt, "--lambda", 0.01, "--out", tmp_path / "a.mgoc")
        expected = 8 * (tmp_path / "a.mgoc").stat().st_size / 9000
        assert abs(float(row["bpp"]) - expected) < 1e-9
        assert row["y_msssim"] == "nan"

    def test_unreadable_image_skipped(self, tiny_ckpt, image_dir, tmp_path):
        d = tmp_path / "mixed"
        d.mkdir()
        (d / "a.png").write_bytes((image_dir / "a.png").read_bytes())
        (d / "broken.png").write_bytes(b"not a png")
        r = run("eval", d, "--model", tiny_ckpt, "--lambda", 0.01, "--out", tmp_path / "m.csv")
        assert r.exit_code == 0 and "skipped=1" in r.output

    def test_all_fail(self, tiny_ckpt, tmp_path):
        d = tmp_path / "broken"
        d.mkdir()
        (d / "x.png").write_bytes(b"nope")
        r = run("eval", d, "--model", tiny_ckpt, "--lambda", 0.01, "--out", tmp_path / "m.csv")
        assert r.exit_code == EXIT_IO and not (tmp_path / "m.csv").exists()

    def test_lossless_metrics_are_inf(self):
        img = natural_image("astronaut")
        row = image_metrics(img, img)
        assert row["yuv_psnr"] == float("inf") and row["y_msssim_db"] == float("inf")


class TestRdCurve:
    def test_default_points_span_band(self, tiny_ckpt, image_dir, tmp_path):
        r = run("rd-curve", image_dir / "b.ppm", "--model", tiny_ckpt, "--points", 4, "--out", tmp_path / "rd.csv", "--gnuplot", tmp_path / "rd.dat")
        assert r.exit_code == 0, r.output
        with open(tmp_path / "rd.csv") as fh:
            lams = [float(x["lambda"]) for x in csv.DictReader(fh)]
        assert lams[0] == pytest.approx(1e-4) and lams[-1] == pytest.approx(0.1) and len(lams) == 4
        assert len((tmp_path / "rd.dat").read_text().splitlines()) == 5


class TestRateControl:
    def test_target_below_container_overhead(self, tiny_ckpt, image_dir, tmp_path):
        # the 27-byte header alone is 0.07 bpp on a 64x48 image
        r = run("rate-control", image_dir / "b.ppm", "--model", tiny_ckpt, "--target-bpp", 0.01, "--out", tmp_path / "r.mgoc")
        assert r.exit_code == EXIT_USAGE
        assert "outside the achievable span" in r.output
        assert not (tmp_path / "r.mgoc").exists()

    def test_rejects_nonpositive_target(self, tiny_ckpt, image_dir, tmp_path):
        r = run("rate-control", image_dir / "b.ppm", "--model", tiny_ckpt, "--target-bpp", 0, "--out", tmp_path / "r.mgoc")
        assert r.exit_code == EXIT_USAGE


class TestTrain:
    def test_smoke_run_and_resume(self, image_dir, tmp_path):
        cfg = dict(steps=2, batch_size=1, patch_size=32, lambdas=[0.001, 0.01], images=str(image_dir), out_dir=str(tmp_path / "run"))
        (tmp_path / "c.json").write_text(json.dumps(cfg))
        r = run("train", "--config", tmp_path / "c.json")
        assert r.exit_code == 0, r.output
        loaded = load_model(tmp_path / "run" / "latest.ckpt")
        assert loaded.lambda_span == (0.001, 0.01)
        r = run("train", "--config", tmp_path / "c.json", "--steps", 3)
        assert "step=3" in r.output

    def test_invalid_config_before_compute(self, tmp_path):
        (tmp_path / "c.yaml").write_text("steps: -1\n")
        r = run("train", "--config", tmp_path / "c.yaml")
        assert r.exit_code == EXIT_USAGE

    def test_missing_images(self, tmp_path):
        r = run("train", "--preset", "smoke", "--images", tmp_path / "none", "--out", tmp_path / "o")
        assert r.exit_code == EXIT_IO
