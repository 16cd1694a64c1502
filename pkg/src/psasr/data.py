"""Image I/O, bicubic degradation, patch sampling, L1 loss and Adam."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import tensor as T
from .model import ParameterStore
from .tensor import Tensor

log = logging.getLogger(__name__)

__all__ = [
    "TrainRecipe", "RECIPES", "load_png", "save_png", "cubic_kernel", "bicubic_resize",
    "sample_patch", "augment", "l1_loss", "learning_rate", "adam_step", "list_images",
]


@dataclass(frozen=True)
class TrainRecipe:
    patch: int = 48
    batch: int = 32
    iterations: int = 500_000
    lr: float = 2e-4
    milestones: tuple[int, ...] = (250_000, 400_000, 450_000, 475_000)
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    rot90: bool = True
    hflip: bool = True
    seed: int = 0

    def validation_errors(self, window: int | None = None) -> list[str]:
        errs = []
        if self.patch < 1 or self.batch < 1 or self.iterations < 1:
            errs.append("patch, batch and iterations must be >= 1")
        if self.lr <= 0:
            errs.append("learning rate must be positive")
        ms = list(self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            errs.append(f"milestones must be strictly increasing: {ms}")
        if ms and ms[-1] >= self.iterations:
            errs.append(f"milestone {ms[-1]} not below total iterations {self.iterations}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            errs.append("adam betas must be in [0, 1) and eps positive")
        if window is not None and self.patch < window:
            log.info("patch %d smaller than window %d; padding will be engaged", self.patch, window)
        return errs

    def validate(self, window: int | None = None) -> "TrainRecipe":
        errs = self.validation_errors(window)
        if errs:
            raise ValueError("invalid train recipe: " + "; ".join(errs))
        return self


RECIPES = {
    "classical": TrainRecipe(),
    "light": TrainRecipe(patch=64),
    "toy": TrainRecipe(patch=16, batch=8, iterations=2000, lr=2e-3,
                       milestones=(1000, 1600, 1800, 1900), rot90=False, hflip=False),
}


# ---------------------------------------------------------------- image I/O

def load_png(path: str | Path) -> np.ndarray:
    """8-bit RGB PNG -> (H, W, 3) float32 in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.clip(img, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)


def save_png(img: np.ndarray, path: str | Path):
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def list_images(directory: str | Path) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() == ".png")


# ---------------------------------------------------------------- resampling

def cubic_kernel(x, a: float = -0.5):
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def _resize_matrix(n_in: int, n_out: int, antialias: bool) -> np.ndarray:
    scale = n_out / n_in
    kscale = scale if (antialias and scale < 1) else 1.0
    width = 4.0 / kscale
    centers = (np.arange(n_out) + 0.5) / scale - 0.5
    first = np.floor(centers - width / 2).astype(np.int64)
    taps = int(math.ceil(width)) + 2
    idx = first[:, None] + np.arange(taps)[None, :]
    w = kscale * cubic_kernel(kscale * (centers[:, None] - idx))
    w /= w.sum(axis=1, keepdims=True)
    mat = np.zeros((n_out, n_in))
    np.add.at(mat, (np.repeat(np.arange(n_out), taps), np.clip(idx, 0, n_in - 1).ravel()), w.ravel())
    return mat


def bicubic_resize(img: np.ndarray, size: tuple[int, int], antialias: bool = True) -> np.ndarray:
    """Separable cubic-convolution resize of an (H, W, C) image to ``size`` = (height, width).

    Sample coordinates outside the image are clamped to the border.
    """
    oh, ow = size
    if oh < 1 or ow < 1:
        raise ValueError(f"target extents must be positive, got {oh}x{ow}")
    img = np.asarray(img, dtype=np.float64)
    my = _resize_matrix(img.shape[0], oh, antialias)
    mx = _resize_matrix(img.shape[1], ow, antialias)
    out = np.einsum("ij,jkc->ikc", my, img)
    out = np.einsum("lk,ikc->ilc", mx, out)
    return out.astype(np.float32)


def downscale(hr: np.ndarray, scale: int) -> np.ndarray:
    h, w = hr.shape[:2]
    return bicubic_resize(hr, (h // scale, w // scale), antialias=True)


# ---------------------------------------------------------------- patches

def augment(img: np.ndarray, k: int, flip: bool) -> np.ndarray:
    out = np.rot90(img, k, axes=(0, 1))
    return np.ascontiguousarray(out[:, ::-1] if flip else out)


def sample_patch(hr: np.ndarray, scale: int, lr_patch: int, rng: np.random.Generator,
                 lr: np.ndarray | None = None, rot90: bool = True, hflip: bool = True):
    """Aligned (lr, hr) crops; the HR crop is ``scale`` times the LR crop.

    When ``lr`` is not given it is synthesized by bicubic downscaling. Returns
    None (and logs) when the image is too small for the requested patch.
    """
    if lr is None:
        lr = downscale(hr, scale)
    lh, lw = lr.shape[:2]
    if lh < lr_patch or lw < lr_patch or hr.shape[0] < scale * lr_patch or hr.shape[1] < scale * lr_patch:
        log.warning("skipping image %sx%s: smaller than LR patch %d at x%d",
                    hr.shape[0], hr.shape[1], lr_patch, scale)
        return None
    y = int(rng.integers(0, lh - lr_patch + 1))
    x = int(rng.integers(0, lw - lr_patch + 1))
    lp = lr[y:y + lr_patch, x:x + lr_patch]
    hp = hr[scale * y:scale * (y + lr_patch), scale * x:scale * (x + lr_patch)]
    k = int(rng.integers(0, 4)) if rot90 else 0
    flip = bool(rng.integers(0, 2)) if hflip else False
    return augment(lp, k, flip), augment(hp, k, flip)


# ---------------------------------------------------------------- loss / optimizer

def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    return T.abs_mean_diff(pred, target)


def learning_rate(recipe: TrainRecipe, step: int) -> float:
    passed = sum(1 for m in recipe.milestones if step >= m)
    return recipe.lr * 0.5 ** passed


def adam_step(store: ParameterStore, recipe: TrainRecipe, step: int) -> float:
    """One bias-corrected Adam update in place; ``step`` counts from 0. Returns the LR used."""
    lr = learning_rate(recipe, step)
    t = step + 1
    b1, b2 = recipe.beta1, recipe.beta2
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for name, p in store.items():
        if p.grad is None:
            raise ValueError(f"adam_step: missing gradient for {name}")
        g = p.grad.astype(np.float64)
        m, v = store.moments.get(name, (np.zeros_like(g), np.zeros_like(g)))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        store.moments[name] = (m, v)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + recipe.eps)).astype(p.data.dtype)
    store.step = t
    return lr
