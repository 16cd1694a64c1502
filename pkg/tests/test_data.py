import math
import struct
from dataclasses import replace

import numpy as np
import pytest

from psasr.checkpoint import (
    MAGIC, CheckpointFormatError, IncompatibleCheckpoint, load_checkpoint, save_checkpoint,
)
from psasr.data import (
    RECIPES, TrainRecipe, adam_step, augment, bicubic_resize, cubic_kernel, downscale, l1_loss,
    learning_rate, load_png, sample_patch, save_png,
)
from psasr.metrics import psnr
from psasr.model import ParameterStore, build_model, preset
from psasr.tensor import Tape, Tensor, grad_check
from psasr.train import fixed_patches, synthetic_image


# ---------------------------------------------------------------- bicubic

def test_cubic_kernel_values():
    assert cubic_kernel(0.0) == 1.0
    assert cubic_kernel(1.0) == 0.0
    assert cubic_kernel(2.0) == 0.0
    assert cubic_kernel(0.5) == pytest.approx(0.5625)
    assert cubic_kernel(-0.5) == cubic_kernel(0.5)


@pytest.mark.parametrize("size", [(5, 7), (24, 40), (12, 20)])
def test_resize_constant_image(size):
    img = np.full((12, 20, 3), 0.37, np.float32)
    out = bicubic_resize(img, size)
    assert out.shape == size + (3,)
    assert np.max(np.abs(out - 0.37)) < 1e-6
    y = np.full(size, 0.37 * 255)
    assert psnr(y, out[..., 0].astype(np.float64) * 255) > 100 or np.array_equal(y, out[..., 0] * 255)


def test_resize_identity_and_errors():
    img = np.random.default_rng(0).random((9, 11, 3)).astype(np.float32)
    np.testing.assert_allclose(bicubic_resize(img, (9, 11)), img, atol=1e-6)
    with pytest.raises(ValueError):
        bicubic_resize(img, (0, 4))


def test_antialias_widens_support():
    img = np.zeros((64, 1, 1), np.float32)
    img[30] = 1.0
    aa = bicubic_resize(img, (16, 1), antialias=True)[:, 0, 0]
    raw = bicubic_resize(img, (16, 1), antialias=False)[:, 0, 0]
    assert np.count_nonzero(np.abs(aa) > 1e-7) > np.count_nonzero(np.abs(raw) > 1e-7)
    assert aa.sum() == pytest.approx(0.25, abs=1e-6)  # mass preserved at 1/4 density


# ---------------------------------------------------------------- patches

def test_patch_alignment_and_extents():
    rng = np.random.default_rng(0)
    hr = rng.random((200, 150, 3)).astype(np.float32)
    lr = downscale(hr, 2)
    lp, hp = sample_patch(hr, 2, 48, np.random.default_rng(5), lr=lr, rot90=False, hflip=False)
    assert lp.shape == (48, 48, 3) and hp.shape == (96, 96, 3)
    # locate the crop and check co-location with integer arithmetic
    r = np.random.default_rng(5)
    y, x = int(r.integers(0, 100 - 48 + 1)), int(r.integers(0, 75 - 48 + 1))
    assert np.array_equal(lp, lr[y:y + 48, x:x + 48])
    assert np.array_equal(hp, hr[2 * y:2 * y + 96, 2 * x:2 * x + 96])


def test_patch_determinism_and_skip(caplog):
    hr = np.random.default_rng(1).random((64, 64, 3)).astype(np.float32)
    a = [sample_patch(hr, 2, 8, np.random.default_rng(3)) for _ in range(2)]
    assert all(np.array_equal(u, v) for u, v in zip(a[0], a[1]))
    assert sample_patch(hr, 4, 20, np.random.default_rng(0)) is None
    assert "skipping" in caplog.text


@pytest.mark.parametrize("k, flip", [(1, False), (2, True), (3, False), (0, True)])
def test_augmentation_commutes_with_downscale(k, flip):
    hr = synthetic_image(np.random.default_rng(2), 48, 48, max_freq=3)
    a = downscale(augment(hr, k, flip), 2)
    b = augment(downscale(hr, 2), k, flip)
    assert np.max(np.abs(a - b)) < 1e-5


def test_patch_pairing_under_augmentation():
    hr = synthetic_image(np.random.default_rng(3), 64, 64, max_freq=3)
    for seed in range(4):
        lp, hp = sample_patch(hr, 2, 12, np.random.default_rng(seed))
        assert np.max(np.abs(downscale(hp, 2)[2:-2, 2:-2] - lp[2:-2, 2:-2])) < 2e-3


def test_png_roundtrip(tmp_path):
    img = np.random.default_rng(4).integers(0, 256, (5, 6, 3)).astype(np.float32) / 255
    save_png(img, tmp_path / "a.png")
    assert np.array_equal(load_png(tmp_path / "a.png"), img)


# ---------------------------------------------------------------- loss

def test_l1_values_and_gradient():
    rng = np.random.default_rng(5)
    t = rng.random((1, 4, 4, 3))
    assert float(l1_loss(Tensor(t), Tensor(t)).data.reshape(())) == 0.0
    assert float(l1_loss(Tensor(t + 0.25), Tensor(t)).data.reshape(())) == pytest.approx(0.25)
    p = Tensor(t + rng.choice([-1, 1], t.shape) * rng.uniform(0.1, 0.5, t.shape))
    assert grad_check(lambda a: l1_loss(a, Tensor(t)), [p]) < 1e-6
    with pytest.raises(ValueError):
        l1_loss(Tensor(t), Tensor(t[:, :3]))


def test_l1_tie_subgradient_zero():
    t = np.zeros((1, 1, 2, 2))
    p = Tensor(t.copy(), requires_grad=True)
    with Tape() as tape:
        loss = l1_loss(p, Tensor(t))
    tape.backward(loss)
    assert not p.grad.any()


# ---------------------------------------------------------------- optimizer

def _one_param_store(value, grad):
    st = ParameterStore()
    t = st.add("w", np.array(value, np.float32).reshape(1, 1, 1, -1))
    t.grad = np.array(grad, np.float32).reshape(t.shape)
    return st


def test_adam_zero_grad_keeps_params():
    st = _one_param_store([1.0, -2.0], [0.0, 0.0])
    adam_step(st, RECIPES["classical"], 0)
    assert st["w"].data.ravel().tolist() == [1.0, -2.0]


def test_adam_first_step_is_lr():
    st = _one_param_store([0.0, 0.0], [3.0, -0.5])
    lr = adam_step(st, RECIPES["classical"], 0)
    assert lr == 2e-4
    np.testing.assert_allclose(st["w"].data.ravel(), [-2e-4, 2e-4], rtol=1e-4)
    assert st.step == 1 and "w" in st.moments


def test_adam_missing_grad_names_tensor():
    st = ParameterStore()
    st.add("groups.0.conv.weight", np.zeros((1, 1, 1, 1), np.float32))
    with pytest.raises(ValueError, match="groups.0.conv.weight"):
        adam_step(st, RECIPES["toy"], 0)


def test_learning_rate_schedule():
    rec = RECIPES["classical"]
    assert learning_rate(rec, 249_999) == 2e-4
    assert learning_rate(rec, 250_000) == 1e-4
    assert learning_rate(rec, 400_000) == 5e-5
    assert learning_rate(rec, 499_999) == 2e-4 / 16


def test_recipe_validation():
    assert RECIPES["light"].patch == 64 and RECIPES["classical"].patch == 48
    assert (RECIPES["classical"].beta1, RECIPES["classical"].beta2) == (0.9, 0.99)
    with pytest.raises(ValueError):
        TrainRecipe(milestones=(10, 5), iterations=20).validate()
    with pytest.raises(ValueError):
        TrainRecipe(milestones=(10, 30), iterations=20).validate()


def test_fixed_patches_skips_small_images():
    rng = np.random.default_rng(6)
    imgs = [np.zeros((8, 8, 3), np.float32), synthetic_image(rng, 40, 40)]
    lrb, hrb = fixed_patches(imgs, 2, 8, 3, rng)
    assert lrb.shape == (3, 8, 8, 3) and hrb.shape == (3, 16, 16, 3)
    with pytest.raises(ValueError):
        fixed_patches(imgs[:1], 2, 8, 3, rng)


# ---------------------------------------------------------------- checkpoint

def random_store(seed=0):
    rng = np.random.default_rng(seed)
    st = ParameterStore()
    for i, shape in enumerate([(3, 3, 4, 8), (1, 1, 1, 8), (1, 1, 2, 49)]):
        st.add(f"layer{i}.w", rng.standard_normal(shape).astype(np.float32))
    st["layer0.w"].data[0, 0, 0, 0] = np.float32(-0.0)
    st["layer1.w"].data[0, 0, 0, 1] = np.float32(1e-40)  # subnormal
    return st


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    cfg = preset("tiny")
    store, _ = build_model(cfg, seed=3)
    path = tmp_path / "m.ckpt"
    save_checkpoint(store, path, cfg)
    back, cfg2 = load_checkpoint(path, expect=cfg)
    assert cfg2 == cfg and list(back) == list(store)
    for k in store:
        assert back[k].data.tobytes() == store[k].data.tobytes()
    st = random_store()
    save_checkpoint(st, path)
    back, none = load_checkpoint(path)
    assert none is None
    assert all(back[k].data.tobytes() == st[k].data.tobytes() for k in st)


def test_checkpoint_header_layout(tmp_path):
    path = tmp_path / "a.ckpt"
    save_checkpoint(random_store(), path)
    raw = path.read_bytes()
    assert raw[:8] == MAGIC
    assert struct.unpack_from("<I", raw, 8)[0] == 1


def test_truncation_rejected(tmp_path):
    path = tmp_path / "a.ckpt"
    save_checkpoint(random_store(), path)
    raw = path.read_bytes()
    for cut in (3, 10, 20, 40, len(raw) - 1):
        (tmp_path / "t.ckpt").write_bytes(raw[:cut])
        with pytest.raises(CheckpointFormatError, match="at byte"):
            load_checkpoint(tmp_path / "t.ckpt")


@pytest.mark.parametrize("where, value", [(0, b"X"), (8, b"\x02"), (12, b"\xff")])
def test_corruption_rejected(tmp_path, where, value):
    path = tmp_path / "a.ckpt"
    save_checkpoint(random_store(), path)
    raw = bytearray(path.read_bytes())
    raw[where:where + 1] = value
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "a.ckpt"
    save_checkpoint(random_store(), path)
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(CheckpointFormatError, match="trailing"):
        load_checkpoint(path)


def test_config_mismatch(tmp_path):
    cfg = preset("tiny")
    store, _ = build_model(cfg)
    save_checkpoint(store, tmp_path / "a.ckpt", cfg)
    with pytest.raises(IncompatibleCheckpoint):
        load_checkpoint(tmp_path / "a.ckpt", expect=replace(cfg, scale=3))
