"""Training loop shared by the CLI and the tests."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import TrainRecipe, adam_step, bicubic_resize, l1_loss, sample_patch
from .metrics import EvalProtocol, psnr, rgb_to_y
from .model import Model, model_forward
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

__all__ = ["TrainLog", "train", "synthetic_image", "fixed_patches", "batch_psnr"]


@dataclass
class TrainLog:
    iters: list[int]
    losses: list[float]
    lrs: list[float]

    def to_csv(self) -> str:
        lines = ["iter,loss,lr"]
        lines += [f"{i},{l:.9g},{r:.9g}" for i, l, r in zip(self.iters, self.losses, self.lrs)]
        return "\n".join(lines) + "\n"


def synthetic_image(rng: np.random.Generator, h: int, w: int, terms: int = 6,
                    max_freq: float = 6.0) -> np.ndarray:
    """Random RGB image in [0, 1] built from plane waves of up to ``max_freq`` cycles per image."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.empty((h, w, 3))
    for c in range(3):
        acc = np.full((h, w), 0.5)
        for _ in range(terms):
            fy, fx = rng.uniform(-max_freq, max_freq, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            acc += rng.uniform(0.03, 0.1) * np.sin(2 * np.pi * (fy * yy / h + fx * xx / w) + phase)
        img[..., c] = acc
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def fixed_patches(hr_images: list[np.ndarray], scale: int, lr_patch: int, count: int,
                  rng: np.random.Generator, recipe: TrainRecipe | None = None):
    """Draw ``count`` aligned patch pairs, cycling over images; skips images that are too small."""
    lrs, hrs = [], []
    rot = recipe.rot90 if recipe else False
    flip = recipe.hflip if recipe else False
    usable = list(hr_images)
    i = 0
    while len(lrs) < count and usable:
        img = usable[i % len(usable)]
        pair = sample_patch(img, scale, lr_patch, rng, rot90=rot, hflip=flip)
        if pair is None:
            usable.remove(img)
            continue
        lrs.append(pair[0])
        hrs.append(pair[1])
        i += 1
    if not lrs:
        raise ValueError("no image large enough for the requested patch size")
    return np.stack(lrs), np.stack(hrs)


def batch_psnr(pred: np.ndarray, target: np.ndarray, scale: int) -> float:
    """Mean Y-channel PSNR over a batch of (H, W, 3) images."""
    prot = EvalProtocol.for_scale(scale)
    vals = [psnr(rgb_to_y(np.clip(p, 0, 1)), rgb_to_y(t), prot) for p, t in zip(pred, target)]
    return float(np.mean(vals))


def train(model: Model, recipe: TrainRecipe, lr_batch: np.ndarray, hr_batch: np.ndarray,
          iterations: int | None = None, log_every: int = 0, start: int = 0) -> TrainLog:
    """Full-batch training on fixed patches; deterministic for fixed inputs."""
    n = iterations if iterations is not None else recipe.iterations
    x = Tensor(np.ascontiguousarray(lr_batch, dtype=np.float32))
    y = Tensor(np.ascontiguousarray(hr_batch, dtype=np.float32))
    out = TrainLog([], [], [])
    for it in range(start, start + n):
        model.store.zero_grad()
        with Tape() as tape:
            loss = l1_loss(model_forward(model, x), y)
        tape.backward(loss)
        lr = adam_step(model.store, recipe, it)
        out.iters.append(it)
        out.losses.append(float(loss.data.reshape(())))
        out.lrs.append(lr)
        if log_every and it % log_every == 0:
            log.info("iter %d loss %.6f lr %.3g", it, out.losses[-1], lr)
    return out
