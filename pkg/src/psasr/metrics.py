"""Y-channel PSNR/SSIM and radially averaged power spectra."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = ["EvalProtocol", "rgb_to_y", "psnr", "ssim", "radial_power_spectrum", "evaluate_pair"]

Y_COEFFS = (65.481, 128.553, 24.966)


@dataclass(frozen=True)
class EvalProtocol:
    crop_border: int = 0
    y_coeffs: tuple[float, float, float] = Y_COEFFS
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 255.0
    win_size: int = 11
    sigma: float = 1.5

    @classmethod
    def for_scale(cls, scale: int) -> "EvalProtocol":
        return cls(crop_border=scale)

    def __post_init__(self):
        if self.crop_border < 0:
            raise ValueError(f"crop border must be >= 0, got {self.crop_border}")


def rgb_to_y(img: np.ndarray, coeffs=Y_COEFFS) -> np.ndarray:
    """BT.601 limited-range luma on the 0-255 scale for an (H, W, 3) image in [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    y = img[..., 0] * coeffs[0] + img[..., 1] * coeffs[1] + img[..., 2] * coeffs[2] + 16.0
    return y[..., None]


def _prepare(a, b, crop: int):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image extents differ: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = a[..., 0], b[..., 0]
    if crop:
        a = a[crop:-crop, crop:-crop]
        b = b[crop:-crop, crop:-crop]
    return a, b


def psnr(a: np.ndarray, b: np.ndarray, protocol: EvalProtocol = EvalProtocol()) -> float:
    """PSNR in dB on single-channel images in the 0-255 domain; inf when identical."""
    a, b = _prepare(a, b, protocol.crop_border)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(protocol.data_range ** 2 / mse)


def _gaussian(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def ssim(a: np.ndarray, b: np.ndarray, protocol: EvalProtocol = EvalProtocol()) -> float:
    """Mean single-scale SSIM with an 11x11 Gaussian window (valid region only)."""
    a, b = _prepare(a, b, protocol.crop_border)
    n = protocol.win_size
    if a.shape[0] < n or a.shape[1] < n:
        raise ValueError(f"image {a.shape} smaller than the {n}x{n} SSIM window")
    if np.array_equal(a, b):
        return 1.0
    c1 = (protocol.k1 * protocol.data_range) ** 2
    c2 = (protocol.k2 * protocol.data_range) ** 2
    g = _gaussian(n, protocol.sigma)
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a ** 2
    sbb = _filter_valid(b * b, g) - mu_b ** 2
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def evaluate_pair(sr_rgb: np.ndarray, gt_rgb: np.ndarray, protocol: EvalProtocol) -> tuple[float, float]:
    ys, yg = rgb_to_y(sr_rgb), rgb_to_y(gt_rgb)
    return psnr(ys, yg, protocol), ssim(ys, yg, protocol)


def radial_power_spectrum(feat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Channel-averaged power |F|^2 binned by integer radius from the centred DC term.

    Returns (normalized radial frequency in [0, 1], mean power per bin).
    """
    feat = np.asarray(feat, dtype=np.float64)
    if feat.ndim == 2:
        feat = feat[..., None]
    h, w, _ = feat.shape
    if h < 2 or w < 2:
        raise ValueError(f"spectrum needs at least 2x2, got {h}x{w}")
    spec = np.fft.fftshift(np.fft.fft2(feat, axes=(0, 1)), axes=(0, 1))
    power = (np.abs(spec) ** 2).mean(axis=2)
    ky = np.arange(h) - h // 2
    kx = np.arange(w) - w // 2
    radius = np.rint(np.hypot(ky[:, None], kx[None, :])).astype(np.int64)
    nbins = radius.max() + 1
    sums = np.bincount(radius.ravel(), weights=power.ravel(), minlength=nbins)
    counts = np.bincount(radius.ravel(), minlength=nbins)
    curve = sums / np.maximum(counts, 1)
    freq = np.arange(nbins) / max(nbins - 1, 1)
    return freq, curve
