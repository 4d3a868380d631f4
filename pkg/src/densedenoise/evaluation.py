"""Whole-image evaluation: per-image PSNR/SSIM/MS-SSIM rows, dataset
averages, and difference-image export.

The network is fully convolutional, so whole images are denoised without
patching.  Metrics are computed on the [0,1]-clipped denoised image, the
standard protocol for published denoising tables; PSNR rows are reported in
the 8-bit convention (peak 255 on de-normalized pixels is identical to peak
1.0 on normalized ones).
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import GrayImage, NoiseSpec, add_awgn, list_pgm_files, noise_stream_for_name, read_pgm
from .metrics import SsimParams, ms_ssim, psnr, ssim
from .model import Network
from .tensor import Tensor


@dataclass
class MetricRow:
    filename: str
    sigma: float
    noisy_psnr: float
    denoised_psnr: float
    ssim: float
    ms_ssim: float
    error: str = ""


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)
    variant: str = ""
    checkpoint_hash: str = ""
    parameter_count: int = 0
    sigma: float = 0.0

    def averages(self) -> dict:
        ok = [r for r in self.rows if not r.error]
        if not ok:
            return {}
        return {
            "noisy_psnr": float(np.mean([r.noisy_psnr for r in ok])),
            "denoised_psnr": float(np.mean([r.denoised_psnr for r in ok])),
            "ssim": float(np.mean([r.ssim for r in ok])),
            "ms_ssim": float(np.mean([r.ms_ssim for r in ok])),
        }

    def to_text(self) -> str:
        hdr = f"{'file':<24} {'sigma':>6} {'noisy dB':>9} {'denoised dB':>12} {'SSIM':>8} {'MS-SSIM':>8}"
        lines = [hdr, "-" * len(hdr)]
        for r in self.rows:
            if r.error:
                lines.append(f"{r.filename:<24} ERROR: {r.error}")
            else:
                lines.append(
                    f"{r.filename:<24} {r.sigma:>6.1f} {r.noisy_psnr:>9.3f}"
                    f" {r.denoised_psnr:>12.3f} {r.ssim:>8.4f} {r.ms_ssim:>8.4f}"
                )
        avg = self.averages()
        if avg:
            lines.append("-" * len(hdr))
            lines.append(
                f"{'average':<24} {self.sigma:>6.1f} {avg['noisy_psnr']:>9.3f}"
                f" {avg['denoised_psnr']:>12.3f} {avg['ssim']:>8.4f} {avg['ms_ssim']:>8.4f}"
            )
        lines.append(
            f"model={self.variant} params={self.parameter_count} checkpoint={self.checkpoint_hash}"
        )
        return "\n".join(lines) + "\n"

    def to_tsv(self) -> str:
        lines = ["filename\tsigma\tnoisy_psnr\tdenoised_psnr\tssim\tms_ssim\terror"]
        for r in self.rows:
            lines.append(
                f"{r.filename}\t{r.sigma:g}\t{r.noisy_psnr:.6f}\t{r.denoised_psnr:.6f}"
                f"\t{r.ssim:.8f}\t{r.ms_ssim:.8f}\t{r.error}"
            )
        return "\n".join(lines) + "\n"


def file_hash(path: str) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()[:16]


def denoise_image(net: Network, noisy_unit: np.ndarray) -> np.ndarray:
    out = net.denoise(Tensor(noisy_unit[None, None]))
    return out.data[0, 0]


def evaluate(net: Network, image_dir: str, noise: NoiseSpec,
             ssim_params: SsimParams = SsimParams(),
             checkpoint_hash: str = "") -> MetricReport:
    """Corrupt, denoise, and score every PGM in the directory (sorted).
    Per-image noise streams come from the filename, so the report does not
    depend on directory enumeration order."""
    paths = list_pgm_files(image_dir)
    if not paths:
        raise ValueError(f"no PGM images in {image_dir!r}")
    total, _ = net.count_parameters()
    report = MetricReport(variant=net.config.variant, parameter_count=total,
                          sigma=noise.sigma, checkpoint_hash=checkpoint_hash)
    for path in paths:
        name = os.path.basename(path)
        try:
            clean = read_pgm(path).to_unit(np.float32)
        except (OSError, ValueError) as e:
            report.rows.append(MetricRow(name, noise.sigma, 0, 0, 0, 0, error=str(e)))
            continue
        noisy = add_awgn(clean, noise, stream=noise_stream_for_name(name))
        denoised = np.clip(denoise_image(net, noisy), 0.0, 1.0)
        noisy_c = np.clip(noisy, 0.0, 1.0)
        report.rows.append(
            MetricRow(
                name,
                noise.sigma,
                noisy_psnr=psnr(clean, noisy_c, peak=1.0),
                denoised_psnr=psnr(clean, denoised, peak=1.0),
                ssim=ssim(clean, denoised, ssim_params),
                ms_ssim=ms_ssim(clean, denoised, ssim_params),
            )
        )
    return report


def diff_image(reference: np.ndarray, test: np.ndarray, gain: float = 4.0) -> GrayImage:
    """Mid-gray-centered difference image: 0.5 + gain*(test - reference)."""
    ref = np.asarray(reference, dtype=np.float64)
    tst = np.asarray(test, dtype=np.float64)
    if ref.shape != tst.shape:
        raise T.ShapeMismatchError("diff_image", ref.shape, tst.shape)
    if gain <= 0:
        raise ValueError("gain must be positive")
    return GrayImage.from_unit(np.clip(0.5 + gain * (tst - ref), 0.0, 1.0))
