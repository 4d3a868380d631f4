"""Dense-block residual denoiser with first-layer feature forwarding.

Library + CLI for grayscale AWGN denoising: a from-scratch tensor/autodiff
core, the dense-skip network and its depthwise-separable variant, a
differentiable MS-SSIM, two-stage training, and PSNR/SSIM evaluation.
"""

from .data import GrayImage, NoiseSpec, add_awgn, make_dataset, read_pgm, write_pgm
from .metrics import SsimParams, ms_ssim, psnr, ssim
from .model import ModelConfig, Network, build, build_dncnn_ref
from .checkpoint import load_checkpoint, save_checkpoint
from .tensor import Tape, Tensor, no_grad
from .training import TrainConfig, train_stage1, train_stage2

__version__ = "0.1.0"

__all__ = [
    "GrayImage", "NoiseSpec", "add_awgn", "make_dataset", "read_pgm", "write_pgm",
    "SsimParams", "ms_ssim", "psnr", "ssim",
    "ModelConfig", "Network", "build", "build_dncnn_ref",
    "load_checkpoint", "save_checkpoint",
    "Tape", "Tensor", "no_grad",
    "TrainConfig", "train_stage1", "train_stage2",
]
