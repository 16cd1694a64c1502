"""Command-line entry point: cost, gradcheck, train-toy, infer, eval, spectrum.

Exit codes: 0 success, 1 validation error, 2 runtime or numeric error.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import io
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .attention import PSA, Standard, TokenReduction, TokenSampling
from .checkpoint import CheckpointFormatError, IncompatibleCheckpoint, load_checkpoint, save_checkpoint
from .cost import DEFAULT_RESOLUTION, count_macs
from .data import RECIPES, TrainRecipe, list_images, load_png, sample_patch, save_png
from .metrics import EvalProtocol, evaluate_pair, radial_power_spectrum
from .model import PRESETS, Model, ModelConfig, build_model, model_forward, self_ensemble_infer, upscale_image
from .tensor import NumericError, ParameterError, Tensor
from . import gradsuite
from .train import batch_psnr, fixed_patches, train

log = logging.getLogger("psasr")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
TOY_MILESTONE_FRACTIONS = (0.5, 0.8, 0.9, 0.95)


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- run config

_VARIANT_KEYS = ("variant", "r", "t", "sample_seed")
SECTIONS = {
    "model": [f.name for f in fields(ModelConfig) if f.name != "variant"] + ["preset", "seed", *_VARIANT_KEYS],
    "train": [f.name for f in fields(TrainRecipe)] + ["recipe"],
    "eval": [f.name for f in fields(EvalProtocol)] + ["scale"],
}


def _field_types(cls) -> dict:
    return {f.name: f.default for f in fields(cls)}


def _convert(value: str, default, key: str):
    text = value.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, tuple):
            elem = type(default[0]) if default else int
            return tuple(elem(p) for p in text.replace(",", " ").split())
        if default is None:  # optional int
            return None if text.lower() in ("", "none") else int(text)
        return type(default)(text)
    except ValueError:
        raise ConfigError(f"cannot parse {key} = {value!r}") from None


def load_run_config(path: str | None) -> dict[str, dict[str, str]]:
    merged = {s: {} for s in SECTIONS}
    if not path:
        return merged
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]; expected {sorted(SECTIONS)}")
        for key, value in cp.items(section):
            if key not in SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            merged[section][key] = value
    return merged


def apply_flags(merged: dict, args: argparse.Namespace) -> dict:
    for section, keys in SECTIONS.items():
        for key in keys:
            value = getattr(args, f"{section}_{key}", None)
            if value is not None:
                merged[section][key] = str(value)
    return merged


def echo_config(merged: dict, out) -> None:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for section, kv in merged.items():
        if kv:
            cp[section] = kv
    buf = io.StringIO()
    cp.write(buf)
    text = buf.getvalue().strip()
    if text:
        out.write("".join(f"# {line}\n" for line in text.splitlines()))


def model_config(section: dict[str, str], default_preset: str) -> tuple[ModelConfig, int]:
    name = section.get("preset", default_preset)
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    base = PRESETS[name]
    types = _field_types(ModelConfig)
    overrides = {k: _convert(v, types[k], k) for k, v in section.items() if k in types and k != "variant"}
    seed = int(_convert(section.get("seed", "0"), 0, "seed"))
    variant = base.variant
    kind = section.get("variant")
    r = _convert(section["r"], 0, "r") if "r" in section else None
    t = _convert(section["t"], 0, "t") if "t" in section else None
    sseed = _convert(section.get("sample_seed", "0"), 0, "sample_seed")
    if kind is not None or r is not None or t is not None:
        kind = kind or {PSA: "psa", TokenReduction: "token_reduction", TokenSampling: "token_sampling",
                        Standard: "standard"}[type(variant)]
        if kind == "psa":
            variant = PSA(r or getattr(variant, "r", 2))
        elif kind == "token_reduction":
            variant = TokenReduction(r or getattr(variant, "r", 2))
        elif kind == "token_sampling":
            variant = TokenSampling(t or max(1, base.window // 2), sseed)
        elif kind == "standard":
            variant = Standard()
        else:
            raise ConfigError(f"unknown variant {kind!r}")
    cfg = replace(base, **overrides, variant=variant)
    errs = cfg.validation_errors()
    if errs:
        raise ConfigError("invalid model config: " + "; ".join(errs))
    return cfg, seed


def train_recipe(section: dict[str, str]) -> TrainRecipe:
    name = section.get("recipe", "toy")
    if name not in RECIPES:
        raise ConfigError(f"unknown recipe {name!r}; choose from {sorted(RECIPES)}")
    base = RECIPES[name]
    types = _field_types(TrainRecipe)
    overrides = {k: _convert(v, types[k], k) for k, v in section.items() if k in types}
    if "iterations" in overrides and "milestones" not in overrides and name == "toy":
        n = overrides["iterations"]
        overrides["milestones"] = tuple(sorted({int(n * f) for f in TOY_MILESTONE_FRACTIONS} - {0}))
    rec = replace(base, **overrides)
    errs = rec.validation_errors()
    if errs:
        raise ConfigError("invalid train recipe: " + "; ".join(errs))
    return rec


def eval_protocol(section: dict[str, str]) -> EvalProtocol:
    types = _field_types(EvalProtocol)
    kw = {k: _convert(v, types[k], k) for k, v in section.items() if k in types}
    if "crop_border" not in kw and "scale" in section:
        kw["crop_border"] = _convert(section["scale"], 0, "scale")
    try:
        return EvalProtocol(**kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------- arguments

def _model_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("model")
    g.add_argument("--preset", dest="model_preset", choices=sorted(PRESETS))
    for flag, typ in (("scale", int), ("window", int), ("small-window", int), ("channels", int),
                      ("groups", int), ("blocks", int), ("heads", int), ("convffn-kernel", int),
                      ("ffn-ratio", float), ("upsampler", str), ("r", int), ("t", int),
                      ("sample-seed", int), ("seed", int)):
        g.add_argument(f"--{flag}", dest="model_" + flag.replace("-", "_"), type=typ)
    g.add_argument("--variant", dest="model_variant",
                   choices=["psa", "standard", "token_reduction", "token_sampling"])


def _resolution(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"resolution must look like 1280x720, got {text!r}") from None
    return w, h


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="psasr", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="INI file with [model], [train], [eval] sections")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("cost", help="parameter and MAC report")
    _model_flags(c)
    c.add_argument("--resolution", type=_resolution, default=DEFAULT_RESOLUTION,
                   help="output WxH (default 1280x720)")
    c.add_argument("--csv", help="write per-layer CSV here")

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--inject-bug", choices=gradsuite.case_names(), help="corrupt one backward (test mode)")
    g.add_argument("--only", nargs="+", choices=gradsuite.case_names())

    t = sub.add_parser("train-toy", help="overfit a handful of patches")
    _model_flags(t)
    t.add_argument("--data", required=True, help="directory of HR PNGs")
    t.add_argument("--lr-data", help="directory of co-named LR PNGs (default: bicubic from HR)")
    t.add_argument("--iters", dest="train_iterations", type=int)
    t.add_argument("--lr", dest="train_lr", type=float)
    t.add_argument("--batch", dest="train_batch", type=int, help="number of fixed patches")
    t.add_argument("--patch", dest="train_patch", type=int, help="LR patch size")
    t.add_argument("--recipe", dest="train_recipe", choices=sorted(RECIPES))
    t.add_argument("--train-seed", dest="train_seed", type=int)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="loss curve CSV (default: <out>.csv)")

    i = sub.add_parser("infer", help="super-resolve one PNG")
    _model_flags(i)
    i.add_argument("--ckpt", required=True)
    i.add_argument("--in", dest="inp", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--self-ensemble", action="store_true")
    i.add_argument("--debug-dump", help="write each ensemble branch and the mean as .npy here")

    e = sub.add_parser("eval", help="PSNR/SSIM of SR images against ground truth")
    e.add_argument("--sr", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--scale", dest="eval_scale", type=int, required=True)
    e.add_argument("--crop-border", dest="eval_crop_border", type=int)
    e.add_argument("--csv", help="write the report here instead of stdout")
    e.add_argument("--workers", type=int, default=1)

    s = sub.add_parser("spectrum", help="radial power spectrum of block activations")
    s.add_argument("--ckpt", action="append", required=True, help="repeat to compare models")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--layer", action="append", help="block name, e.g. groups.0.blocks.1 (default: all)")
    s.add_argument("--csv", help="write curves here instead of stdout")
    return p


# ---------------------------------------------------------------- commands

def cmd_cost(args, merged, out) -> int:
    cfg, _ = model_config(merged["model"], "classical")
    rep = count_macs(cfg, args.resolution)
    out.write(rep.summary() + "\n")
    out.write(f"padded LR extent {rep.lr_extent[0]}x{rep.lr_extent[1]}\n")
    if args.csv:
        Path(args.csv).write_text(rep.to_csv())
    return EXIT_OK


def cmd_gradcheck(args, merged, out) -> int:
    results = gradsuite.run_suite(args.seed, inject=args.inject_bug, only=args.only)
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["check", "max_rel_err", "tol", "status"])
    for r in results:
        w.writerow([r.name, f"{r.error:.3e}", f"{r.tol:g}", "PASS" if r.ok else "FAIL"])
    failed = [r.name for r in results if not r.ok]
    if failed:
        log.error("gradient check failed: %s", ", ".join(failed))
        return EXIT_RUNTIME
    return EXIT_OK


def _load_pairs(hr_dir: str, lr_dir: str | None):
    paths = list_images(hr_dir)
    if not paths:
        raise FileNotFoundError(f"no PNG files in {hr_dir}")
    hrs = [load_png(p) for p in paths]
    lrs = [load_png(Path(lr_dir) / p.name) for p in paths] if lr_dir else None
    return hrs, lrs


def cmd_train_toy(args, merged, out) -> int:
    cfg, seed = model_config(merged["model"], "tiny")
    rec = train_recipe(merged["train"])
    hrs, lrs = _load_pairs(args.data, args.lr_data)
    rng = np.random.default_rng(rec.seed)
    if lrs is None:
        lrb, hrb = fixed_patches(hrs, cfg.scale, rec.patch, rec.batch, rng, rec)
    else:
        lp, hp = [], []
        for k in range(rec.batch):
            pair = sample_patch(hrs[k % len(hrs)], cfg.scale, rec.patch, rng, lr=lrs[k % len(hrs)],
                                rot90=rec.rot90, hflip=rec.hflip)
            if pair is None:
                raise ValueError("training image smaller than the requested patch")
            lp.append(pair[0])
            hp.append(pair[1])
        lrb, hrb = np.stack(lp), np.stack(hp)
    store, model = build_model(cfg, seed)
    curve = train(model, rec, lrb, hrb, log_every=max(1, rec.iterations // 20))
    save_checkpoint(store, args.out, cfg)
    Path(args.log or f"{args.out}.csv").write_text(curve.to_csv())
    pred = model_forward(model, Tensor(lrb)).data
    out.write(f"final loss {curve.losses[-1]:.6g}  train PSNR {batch_psnr(pred, hrb, cfg.scale):.2f} dB\n")
    return EXIT_OK


def _model_from_ckpt(path: str, merged) -> Model:
    expect = None
    if merged["model"]:
        section = dict(merged["model"])
        section.pop("seed", None)
        if section:
            expect, _ = model_config(section, section.get("preset", "tiny"))
    store, cfg = load_checkpoint(path, expect=expect)
    if cfg is None:
        raise IncompatibleCheckpoint(f"{path} carries no model config")
    built, _ = build_model(cfg)
    if list(built) != list(store) or any(built[k].shape != store[k].shape for k in store):
        raise IncompatibleCheckpoint(f"{path}: tensors do not match the echoed config")
    return Model(cfg, store)


def cmd_infer(args, merged, out) -> int:
    model = _model_from_ckpt(args.ckpt, merged)
    img = load_png(args.inp)
    if args.self_ensemble:
        branches = []
        sr = self_ensemble_infer(model, img, branches)
        if args.debug_dump:
            d = Path(args.debug_dump)
            d.mkdir(parents=True, exist_ok=True)
            for k, b in enumerate(branches):
                np.save(d / f"branch{k}.npy", b)
            np.save(d / "mean.npy", sr)
    else:
        sr = upscale_image(model, img)
    save_png(sr, args.out)
    out.write(f"wrote {args.out} ({sr.shape[1]}x{sr.shape[0]})\n")
    return EXIT_OK


def _fmt(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.6f}"


def cmd_eval(args, merged, out) -> int:
    prot = eval_protocol(merged["eval"])
    gts = list_images(args.gt)
    missing = [p.name for p in gts if not (Path(args.sr) / p.name).exists()]
    if missing:
        for name in missing:
            sys.stderr.write(f"missing SR counterpart: {name}\n")
        raise ConfigError(f"{len(missing)} ground-truth image(s) without SR counterpart")
    if not gts:
        raise ConfigError(f"no PNG files in {args.gt}")

    def one(p):
        return evaluate_pair(load_png(Path(args.sr) / p.name), load_png(p), prot)

    with ThreadPoolExecutor(max_workers=max(1, args.workers)) as pool:
        scores = list(pool.map(one, gts))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", "psnr_db", "ssim"])
    for p, (ps, ss) in zip(gts, scores):
        w.writerow([p.name, _fmt(ps), _fmt(ss)])
    w.writerow(["mean", _fmt(float(np.mean([s[0] for s in scores]))), _fmt(float(np.mean([s[1] for s in scores])))])
    if args.csv:
        Path(args.csv).write_text(buf.getvalue())
    else:
        out.write(buf.getvalue())
    return EXIT_OK


def cmd_spectrum(args, merged, out) -> int:
    img = load_png(args.inp)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "layer", "freq", "power", "log10_power"])
    for path in args.ckpt:
        model = _model_from_ckpt(path, {"model": {}})
        model.collect = True
        model.features.clear()
        model_forward(model, Tensor(img[None]))
        label = f"{Path(path).stem}[{'convffn' if model.cfg.convffn_kernel else 'ffn'}]"
        layers = args.layer or list(model.features)
        for layer in layers:
            if layer not in model.features:
                raise ConfigError(f"unknown layer {layer!r}; available: {list(model.features)}")
            freq, curve = radial_power_spectrum(model.features[layer][0])
            for f, c in zip(freq, curve):
                w.writerow([label, layer, f"{f:.6f}", f"{c:.9g}", f"{math.log10(max(c, 1e-300)):.6f}"])
    if args.csv:
        Path(args.csv).write_text(buf.getvalue())
    else:
        out.write(buf.getvalue())
    return EXIT_OK


COMMANDS = {
    "cost": cmd_cost, "gradcheck": cmd_gradcheck, "train-toy": cmd_train_toy,
    "infer": cmd_infer, "eval": cmd_eval, "spectrum": cmd_spectrum,
}


def main(argv: list[str] | None = None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        merged = apply_flags(load_run_config(args.config), args)
        echo_config(merged, out)
        return COMMANDS[args.command](args, merged, out)
    except (ConfigError, ParameterError, IncompatibleCheckpoint, CheckpointFormatError) as exc:
        sys.stderr.write(f"psasr: error: {exc}\n")
        return EXIT_INVALID
    except (NumericError, OSError, ValueError) as exc:
        sys.stderr.write(f"psasr: runtime error: {exc}\n")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
