"""Image quality metrics: PSNR, single-scale SSIM, and a differentiable
multi-scale SSIM suitable for use inside a training loss.

SSIM statistics use a normalized gaussian window and valid-region
convolution (no padding), which avoids border bias and matches the naive
per-pixel oracle exactly.  MS-SSIM follows the standard formulation: the
contrast/structure term at every scale, luminance only at the coarsest,
dyadic downsampling between scales, each factor raised to its scale weight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

# canonical 5-scale weights from the MS-SSIM literature
MSSSIM_WEIGHTS_5 = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)

_POS_FLOOR = 1e-8  # keeps the per-scale factors positive before the power


@dataclass
class SsimParams:
    window_size: int = 11
    window_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0
    scales: int = 5
    scale_weights: tuple = field(default=MSSSIM_WEIGHTS_5)

    def __post_init__(self):
        if len(self.scale_weights) != self.scales:
            raise ValueError(
                f"{len(self.scale_weights)} scale weights for {self.scales} scales"
            )

    def with_scales(self, scales: int) -> "SsimParams":
        """Truncate to the first `scales` weights, renormalized to sum 1."""
        w = np.asarray(MSSSIM_WEIGHTS_5[:scales], dtype=np.float64)
        w = w / w.sum()
        return SsimParams(
            self.window_size, self.window_sigma, self.k1, self.k2,
            self.dynamic_range, scales, tuple(w.tolist()),
        )


def gaussian_window(size: int, sigma: float, dtype=np.float64) -> np.ndarray:
    """2-D gaussian normalized to sum 1."""
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    w = np.outer(g, g)
    return (w / w.sum()).astype(dtype)


def psnr(reference, test, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE); identical images report +inf."""
    a = np.asarray(reference, dtype=np.float64)
    b = np.asarray(test, dtype=np.float64)
    if a.shape != b.shape:
        raise T.ShapeMismatchError("psnr", a.shape, b.shape)
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _as_nchw(img) -> Tensor:
    if isinstance(img, Tensor):
        t = img
    else:
        t = Tensor(np.asarray(img))
    if t.ndim == 2:
        return T.reshape(t, (1, 1) + t.shape)
    if t.ndim == 4:
        return t
    raise ValueError(f"expected 2-D image or [N,1,H,W] tensor, got shape {t.shape}")


def _effective_window(params: SsimParams, h: int, w: int) -> np.ndarray:
    """Shrink the window (keeping it odd) when the image is smaller than it."""
    if min(h, w) < 2:
        raise ValueError(f"image {h}x{w} too small for SSIM")
    size = min(params.window_size, h, w)
    if size % 2 == 0:
        size -= 1
    if size < 1:
        raise ValueError(f"image {h}x{w} too small for SSIM")
    return gaussian_window(size, params.window_sigma)


def _ssim_terms(x: Tensor, y: Tensor, params: SsimParams):
    """Per-image luminance and contrast/structure means: two [N] tensors."""
    n, c, h, w = x.shape
    if c != 1:
        raise ValueError("SSIM operates on single-channel images")
    win = _effective_window(params, h, w).astype(x.dtype)
    wt = Tensor(win[None, None])

    def filt(t: Tensor) -> Tensor:
        return T.conv2d(t, wt, padding=0)

    c1 = (params.k1 * params.dynamic_range) ** 2
    c2 = (params.k2 * params.dynamic_range) ** 2

    mu_x = filt(x)
    mu_y = filt(y)
    mu_xx = T.square(mu_x)
    mu_yy = T.square(mu_y)
    mu_xy = T.mul(mu_x, mu_y)
    sig_xx = T.sub(filt(T.square(x)), mu_xx)
    sig_yy = T.sub(filt(T.square(y)), mu_yy)
    sig_xy = T.sub(filt(T.mul(x, y)), mu_xy)

    lum = T.div(
        T.add(T.mul(mu_xy, 2.0), c1),
        T.add(T.add(mu_xx, mu_yy), c1),
    )
    cs = T.div(
        T.add(T.mul(sig_xy, 2.0), c2),
        T.add(T.add(sig_xx, sig_yy), c2),
    )
    return T.mean_per_image(lum), T.mean_per_image(cs)


def ssim_tensor(x, y, params: SsimParams = SsimParams()) -> Tensor:
    """Differentiable single-scale SSIM per image: [N] tensor.

    SSIM is taken as the mean of the local luminance*cs map; with a shared
    window this equals mean(lum_map * cs_map).
    """
    xt, yt = _as_nchw(x), _as_nchw(y)
    if xt.shape != yt.shape:
        raise T.ShapeMismatchError("ssim", xt.shape, yt.shape)
    n, c, h, w = xt.shape
    if c != 1:
        raise ValueError("SSIM operates on single-channel images")
    win = _effective_window(params, h, w).astype(xt.dtype)
    wt = Tensor(win[None, None])

    def filt(t):
        return T.conv2d(t, wt, padding=0)

    c1 = (params.k1 * params.dynamic_range) ** 2
    c2 = (params.k2 * params.dynamic_range) ** 2
    mu_x, mu_y = filt(xt), filt(yt)
    mu_xx, mu_yy, mu_xy = T.square(mu_x), T.square(mu_y), T.mul(mu_x, mu_y)
    sig_xx = T.sub(filt(T.square(xt)), mu_xx)
    sig_yy = T.sub(filt(T.square(yt)), mu_yy)
    sig_xy = T.sub(filt(T.mul(xt, yt)), mu_xy)
    num = T.mul(T.add(T.mul(mu_xy, 2.0), c1), T.add(T.mul(sig_xy, 2.0), c2))
    den = T.mul(T.add(T.add(mu_xx, mu_yy), c1), T.add(T.add(sig_xx, sig_yy), c2))
    return T.mean_per_image(T.div(num, den))


def ssim(reference, test, params: SsimParams = SsimParams()) -> float:
    with T.no_grad():
        return float(ssim_tensor(reference, test, params).data.reshape(-1)[0])


def ms_ssim_tensor(x, y, params: SsimParams = SsimParams()) -> Tensor:
    """Differentiable MS-SSIM per image: [N] tensor on the active tape."""
    xt, yt = _as_nchw(x), _as_nchw(y)
    if xt.shape != yt.shape:
        raise T.ShapeMismatchError("ms_ssim", xt.shape, yt.shape)
    h, w = xt.shape[2], xt.shape[3]
    # every scale must keep at least a 1x1 valid region after halving
    max_scales = 1
    while max_scales < params.scales and min(h, w) // (2 ** max_scales) >= 2:
        max_scales += 1
    p = params if max_scales == params.scales else params.with_scales(max_scales)

    result = None
    for s in range(p.scales):
        last = s == p.scales - 1
        lum, cs = _ssim_terms(xt, yt, p)
        factor = T.pow_scalar(T.clamp_min(cs, _POS_FLOOR), p.scale_weights[s])
        if last:
            lum_f = T.pow_scalar(T.clamp_min(lum, _POS_FLOOR), p.scale_weights[s])
            factor = T.mul(factor, lum_f)
        result = factor if result is None else T.mul(result, factor)
        if not last:
            xt = T.avg_pool2(xt)
            yt = T.avg_pool2(yt)
    return result


def ms_ssim(reference, test, params: SsimParams = SsimParams()) -> float:
    with T.no_grad():
        return float(ms_ssim_tensor(reference, test, params).data.reshape(-1)[0])
