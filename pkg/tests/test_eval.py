"""Whole-image evaluation: metric rows, averages, diff images, determinism."""

import os
import shutil

import numpy as np
import pytest

from densedenoise.data import NoiseSpec, add_awgn, noise_stream_for_name, read_pgm
from densedenoise.evaluation import MetricReport, MetricRow, denoise_image, diff_image, evaluate, file_hash
from densedenoise.metrics import ms_ssim, psnr, ssim
from densedenoise.model import ModelConfig, build
from densedenoise.tensor import ShapeMismatchError


def zero_residual_net():
    """A network whose residual output is exactly zero (denoised == noisy)."""
    net = build(ModelConfig.micro(), seed=0)
    for p in net.parameters():
        if p.name.endswith("final_conv.weight") or p.name.endswith("final_conv.bias"):
            p.value.data[...] = 0.0
    return net


@pytest.fixture
def image_dir(tmp_path, asset_dir):
    d = tmp_path / "imgs"
    d.mkdir()
    for name in ("camera.pgm", "coins.pgm", "clock.pgm"):
        shutil.copy(os.path.join(asset_dir, name), d)
    return str(d)


def test_zero_residual_rows_match_noisy(image_dir):
    net = zero_residual_net()
    report = evaluate(net, image_dir, NoiseSpec(sigma=25.0, seed=3))
    assert len(report.rows) == 3
    for row in report.rows:
        assert not row.error
        # Residual is zero, so the denoised image is the clipped noisy image.
        assert row.denoised_psnr == pytest.approx(row.noisy_psnr, abs=1e-9)


def test_rows_sorted_by_filename(image_dir):
    net = zero_residual_net()
    report = evaluate(net, image_dir, NoiseSpec(sigma=10.0, seed=0))
    names = [r.filename for r in report.rows]
    assert names == sorted(names)


def test_row_values_match_direct_computation(image_dir):
    net = zero_residual_net()
    noise = NoiseSpec(sigma=15.0, seed=7)
    report = evaluate(net, image_dir, noise)
    row = next(r for r in report.rows if r.filename == "coins.pgm")
    clean = read_pgm(os.path.join(image_dir, "coins.pgm")).to_unit(np.float32)
    noisy = add_awgn(clean, noise, stream=noise_stream_for_name("coins.pgm"))
    den = np.clip(denoise_image(net, noisy), 0.0, 1.0)
    assert row.denoised_psnr == pytest.approx(psnr(clean, den, 1.0), abs=1e-9)
    assert row.ssim == pytest.approx(ssim(clean, den), abs=1e-9)
    assert row.ms_ssim == pytest.approx(ms_ssim(clean, den), abs=1e-9)


def test_averages_are_arithmetic_means(image_dir):
    net = zero_residual_net()
    report = evaluate(net, image_dir, NoiseSpec(sigma=25.0, seed=1))
    avg = report.averages()
    for key, attr in [("noisy_psnr", "noisy_psnr"), ("denoised_psnr", "denoised_psnr"),
                      ("ssim", "ssim"), ("ms_ssim", "ms_ssim")]:
        mean = np.mean([getattr(r, attr) for r in report.rows])
        assert avg[key] == pytest.approx(mean, abs=1e-9)


def test_report_ignores_extra_directory_entries(image_dir, tmp_path):
    (tmp_path / "imgs" / "notes.txt").write_text("not an image")
    net = zero_residual_net()
    report = evaluate(net, image_dir, NoiseSpec(sigma=25.0, seed=1))
    assert len(report.rows) == 3


def test_corrupt_file_yields_error_row_not_crash(image_dir):
    bad = os.path.join(image_dir, "broken.pgm")
    with open(bad, "wb") as f:
        f.write(b"P5\n10 10\n255\nshort")
    net = zero_residual_net()
    report = evaluate(net, image_dir, NoiseSpec(sigma=25.0, seed=1))
    errs = [r for r in report.rows if r.error]
    assert len(errs) == 1 and errs[0].filename == "broken.pgm"
    assert len(report.averages()) == 4  # good rows still averaged


def test_empty_directory_rejected(tmp_path):
    net = zero_residual_net()
    with pytest.raises(ValueError):
        evaluate(net, str(tmp_path), NoiseSpec(sigma=25.0, seed=0))


def test_report_independent_of_extra_files_in_stream_choice(image_dir, tmp_path, asset_dir):
    """Adding another image must not change existing rows (per-name streams)."""
    net = zero_residual_net()
    before = evaluate(net, image_dir, NoiseSpec(sigma=25.0, seed=5))
    shutil.copy(os.path.join(asset_dir, "moon.pgm"), image_dir)
    after = evaluate(net, image_dir, NoiseSpec(sigma=25.0, seed=5))
    by_name = {r.filename: r for r in after.rows}
    for r in before.rows:
        assert by_name[r.filename].noisy_psnr == pytest.approx(r.noisy_psnr, abs=0)
        assert by_name[r.filename].denoised_psnr == pytest.approx(r.denoised_psnr, abs=0)


def test_report_text_and_tsv_deterministic(image_dir):
    net = zero_residual_net()
    a = evaluate(net, image_dir, NoiseSpec(sigma=25.0, seed=9))
    b = evaluate(net, image_dir, NoiseSpec(sigma=25.0, seed=9))
    assert a.to_text() == b.to_text()
    assert a.to_tsv() == b.to_tsv()


def test_tsv_round_trip_fields(image_dir):
    net = zero_residual_net()
    report = evaluate(net, image_dir, NoiseSpec(sigma=25.0, seed=2))
    lines = report.to_tsv().strip().split("\n")
    assert lines[0].split("\t")[0] == "filename"
    assert len(lines) == 1 + len(report.rows)
    first = lines[1].split("\t")
    assert first[0] == report.rows[0].filename
    assert float(first[2]) == pytest.approx(report.rows[0].noisy_psnr, abs=1e-5)


def test_denoise_image_matches_batched_forward():
    net = build(ModelConfig.micro(), seed=4)
    rng = np.random.Generator(np.random.Philox(key=77))
    img = rng.random((24, 28), dtype=np.float32)
    single = denoise_image(net, img)
    from densedenoise.tensor import Tensor
    batched = net.denoise(Tensor(np.stack([img, img])[:, None])).data
    np.testing.assert_array_equal(single, batched[0, 0])
    np.testing.assert_array_equal(single, batched[1, 0])


def test_diff_image_identity_is_mid_gray():
    img = np.linspace(0, 1, 64, dtype=np.float64).reshape(8, 8)
    d = diff_image(img, img)
    assert np.all(d.pixels == 128)  # round(0.5*255 + 0.5) = 128


def test_diff_image_gain_and_clipping():
    ref = np.zeros((4, 4))
    test = np.full((4, 4), 0.25)
    d = diff_image(ref, test, gain=4.0)  # 0.5 + 4*0.25 = 1.5 -> clipped to 1
    assert np.all(d.pixels == 255)
    d2 = diff_image(test, ref, gain=1.0)  # 0.5 - 0.25 = 0.25
    assert np.all(d2.pixels == int(np.floor(0.25 * 255 + 0.5)))


def test_diff_image_shape_and_gain_validation():
    with pytest.raises(ShapeMismatchError):
        diff_image(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ValueError):
        diff_image(np.zeros((4, 4)), np.zeros((4, 4)), gain=0.0)


def test_file_hash_stable_and_content_sensitive(tmp_path):
    p = tmp_path / "f.bin"
    p.write_bytes(b"hello")
    h1 = file_hash(str(p))
    assert h1 == file_hash(str(p)) and len(h1) == 16
    p.write_bytes(b"hellp")
    assert file_hash(str(p)) != h1


def test_report_text_contains_average_and_model_line(image_dir):
    net = zero_residual_net()
    report = evaluate(net, image_dir, NoiseSpec(sigma=25.0, seed=0),
                      checkpoint_hash="abc123")
    text = report.to_text()
    assert "average" in text
    assert "checkpoint=abc123" in text
    assert f"params={net.count_parameters()[0]}" in text


def test_averages_empty_when_all_rows_error():
    report = MetricReport(rows=[MetricRow("x.pgm", 25, 0, 0, 0, 0, error="bad")])
    assert report.averages() == {}
    assert "ERROR: bad" in report.to_text()
