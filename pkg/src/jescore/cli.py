"""Command-line entry point.

Every subcommand reads one JSON config document. Flags only pick the
config, override the seed or output directory, and force deterministic
single-threaded execution.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import autodiff as ad
from . import reports
from .adversarial import AttackConfig, robust_accuracy_curve
from .analysis import evaluate, jacobian_report, psnr_column
from .biasvar import (STYLIZED_BIAS_DOMINATED, STYLIZED_VARIANCE_DOMINATED, FamilySpec, crossing_point,
                      regime_sweep)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (DataError, GmmOracleModel, GmmSpec, ImageBatch, add_noise, gmm_sample, load_dataset,
                   save_dataset, two_class_world)
from .gradresnet import ArchConfig, ConfigError, small_config
from .joint import build_joint
from .trainer import NumericalAbort, TrainConfig, Trainer

log = logging.getLogger("jescore")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _strict(cls, data, where: str):
    """Build dataclass ``cls`` from a JSON object, rejecting unknown keys and bad types."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _check(cond: bool, msg: str):
    if not cond:
        raise ConfigError(msg)


# configs

@dataclass
class MakeDataConfig:
    gmm: Optional[dict] = None          # explicit GmmSpec; default is the two-class world
    world: dict = field(default_factory=dict)  # keyword overrides for the two-class world
    train_size: int = 5000
    test_size: int = 2000
    pixel_dtype: str = "f32"
    seed: int = 0

    def __post_init__(self):
        _check(self.train_size > 0 and self.test_size >= 0, "make-data: sizes must be positive")
        _check(self.pixel_dtype in ("f32", "u8"), "make-data: pixel_dtype must be f32 or u8")
        _check(self.gmm is None or not self.world, "make-data: give either gmm or world, not both")


@dataclass
class TrainRunConfig:
    data: str = ""
    arch: Optional[dict] = None         # default: the small test architecture
    train: dict = field(default_factory=dict)
    resume: Optional[str] = None
    dtype: str = "f32"
    seed: int = 0

    def __post_init__(self):
        _check(bool(self.data), "train: data path is required")
        _check(self.dtype in ("f32", "f64"), "train: dtype must be f32 or f64")


@dataclass
class EvalConfig:
    checkpoint: Optional[str] = None
    data: str = ""
    sigmas: list = field(default_factory=lambda: [15.0, 25.0, 50.0])
    gmm: Optional[str] = None           # adds an oracle row
    max_samples: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        _check(bool(self.data), "eval: data path is required")
        _check(self.checkpoint is not None or self.gmm is not None, "eval: need checkpoint or gmm")
        _check(all(float(s) > 0 for s in self.sigmas), "eval: sigmas must be positive")


@dataclass
class DenoiseConfig:
    checkpoint: str = ""
    data: str = ""
    index: int = 0
    sigma: float = 25.0
    label: Optional[int] = None         # class to condition on; omit for the unconditional path
    scale: float = 500.0
    seed: int = 0

    def __post_init__(self):
        _check(bool(self.checkpoint) and bool(self.data), "denoise: checkpoint and data are required")
        _check(self.sigma > 0, "denoise: sigma must be positive")


@dataclass
class AttackRunConfig:
    checkpoint: str = ""
    data: str = ""
    baseline: Optional[str] = None      # second checkpoint attacked on the same inputs
    norm: str = "linf"
    epsilons: list = field(default_factory=lambda: [0.0, 2.0, 4.0, 8.0, 16.0])
    steps: int = 20
    step_size: Optional[float] = None
    random_start: bool = True
    max_samples: Optional[int] = 500
    seed: int = 0

    def __post_init__(self):
        _check(bool(self.checkpoint) and bool(self.data), "attack: checkpoint and data are required")
        _check(all(float(e) >= 0 for e in self.epsilons), "attack: epsilons must be nonnegative")
        AttackConfig(norm=self.norm, steps=self.steps)


@dataclass
class JacobianConfig:
    data: str = ""
    checkpoint: Optional[str] = None
    gmm: Optional[str] = None           # analyze the oracle denoiser instead of a model
    index: int = 0
    sigma: float = 25.0
    k: int = 3
    add_noise: bool = True
    seed: int = 0

    def __post_init__(self):
        _check(bool(self.data), "jacobian: data path is required")
        _check((self.checkpoint is None) != (self.gmm is None), "jacobian: give exactly one of checkpoint, gmm")
        _check(self.sigma > 0 and self.k >= 1, "jacobian: need sigma > 0 and k >= 1")


@dataclass
class BiasVarConfig:
    family: dict = field(default_factory=dict)
    n_grid: list = field(default_factory=lambda: [200, 400, 800, 1600, 3200, 6400])
    repetitions: int = 500
    mc_n: int = 10_000
    constants_n: int = 100_000
    stylized: bool = True
    seed: int = 0

    def __post_init__(self):
        _check(self.repetitions >= 2, "biasvar: need at least two repetitions")
        _check(len(self.n_grid) >= 2, "biasvar: n_grid needs two or more sizes")


# helpers

def _limit(batch, n: Optional[int]):
    return batch if n is None or n >= len(batch) else batch.subset(np.arange(n))


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _write_blob(path: Path, arr) -> dict:
    arr = np.ascontiguousarray(np.asarray(arr), dtype="<f8")
    path.write_bytes(arr.tobytes())
    return {"file": path.name, "shape": list(arr.shape), "dtype": "f64"}


def _load_model(path: str):
    return load_checkpoint(path).model().eval()


# subcommands

def cmd_make_data(cfg: MakeDataConfig, out: Path) -> dict:
    if cfg.gmm is not None:
        try:
            g = GmmSpec.from_dict(cfg.gmm)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"make-data: bad gmm: {exc}") from exc
    else:
        try:
            g = two_class_world(**cfg.world)
        except TypeError as exc:
            raise ConfigError(f"make-data: bad world: {exc}") from exc
    def draw(n, stream):
        batch = gmm_sample(g, n, [cfg.seed, stream])
        if cfg.pixel_dtype == "u8":
            batch = ImageBatch(np.clip(np.round(batch.images), 0, 255), batch.labels, batch.num_classes)
        return batch

    train = draw(cfg.train_size, 0)
    save_dataset(out / "train", train, cfg.pixel_dtype)
    if cfg.test_size:
        save_dataset(out / "test", draw(cfg.test_size, 1), cfg.pixel_dtype)
    g.save(out / "gmm.json")
    return {"train": len(train), "test": cfg.test_size}


def cmd_train(cfg: TrainRunConfig, out: Path) -> dict:
    data = load_dataset(cfg.data)
    tcfg = TrainConfig.from_dict({**cfg.train, "seed": cfg.seed})
    if cfg.resume:
        ckpt = load_checkpoint(cfg.resume)
        model = ckpt.model()
        state, start = ckpt.optimizer_state(), ckpt.iteration
        if ckpt.train is not None and ckpt.train_config().to_dict() != tcfg.to_dict():
            raise ConfigError("train: resume checkpoint was trained with a different TrainConfig")
    else:
        arch = ArchConfig.from_dict(cfg.arch) if cfg.arch is not None else small_config(data.images.shape[1])
        model = build_joint(arch, data.num_classes, cfg.seed)
        if cfg.dtype == "f64":
            model = model.double()
        state, start = None, 0
    if model.config.input_channels != data.images.shape[1] or model.num_classes != data.num_classes:
        raise DataError("train: dataset does not match the model's channels or classes")
    trainer = Trainer(model, data, tcfg, state, start)
    trainer.run(out_dir=out)
    final = save_checkpoint(out / "final.jesm", model, tcfg, trainer.state, trainer.iteration,
                            trainer.history[-1] if trainer.history else None)
    rows = reports.read_csv(out / "metrics.csv")
    if rows:
        reports.plot_training(out / "training.png", rows)
    return {"iteration": trainer.iteration, "checkpoint": str(final)}


def cmd_eval(cfg: EvalConfig, out: Path) -> dict:
    batch = _limit(load_dataset(cfg.data), cfg.max_samples)
    sigmas = [float(s) for s in cfg.sigmas]
    rows = []
    if cfg.checkpoint is not None:
        model = _load_model(cfg.checkpoint)
        rows.append({"model": "checkpoint", **evaluate(model, batch.images, batch.labels, sigmas, cfg.seed)})
    if cfg.gmm is not None:
        g = GmmSpec.load(cfg.gmm)
        oracle = GmmOracleModel(g, 0.0)
        rows.append({"model": "oracle", **evaluate(oracle, batch.images, batch.labels, sigmas, cfg.seed)})
    cols = ["model", "accuracy"] + [psnr_column(s) for s in sigmas]
    reports.write_csv(out / "eval.csv", rows, cols)
    reports.plot_psnr(out / "eval.png", rows, sigmas)
    return {"rows": len(rows)}


def cmd_denoise(cfg: DenoiseConfig, out: Path) -> dict:
    batch = load_dataset(cfg.data)
    if not 0 <= cfg.index < len(batch):
        raise DataError(f"denoise: index {cfg.index} outside dataset of {len(batch)}")
    model = _load_model(cfg.checkpoint).double()
    clean = batch.images[cfg.index:cfg.index + 1].astype(np.float64)
    noisy, _ = add_noise(clean, cfg.sigma, cfg.seed)
    y = torch.from_numpy(noisy)
    uncond = model.denoise_uncond(y, cfg.sigma).detach().numpy()
    out.mkdir(parents=True, exist_ok=True)
    meta = {"sigma": cfg.sigma, "index": cfg.index, "label": cfg.label, "scale": cfg.scale,
            "blobs": {"clean": _write_blob(out / "clean.f64", clean[0]),
                      "noisy": _write_blob(out / "noisy.f64", noisy[0]),
                      "unconditional": _write_blob(out / "unconditional.f64", uncond[0])}}
    panels = {"noisy": noisy[0], "unconditional": uncond[0]}
    if cfg.label is not None:
        if not 0 <= cfg.label < model.num_classes:
            raise ConfigError(f"denoise: label {cfg.label} outside [0, {model.num_classes})")
        cond = model.denoise_cond(y, torch.tensor([cfg.label]), cfg.sigma).detach().numpy()
        diff = cfg.scale * (cond - uncond)
        meta["blobs"]["conditional"] = _write_blob(out / "conditional.f64", cond[0])
        meta["blobs"]["difference"] = _write_blob(out / "difference.f64", diff[0])
        panels.update({"conditional": cond[0], f"difference x{cfg.scale:g}": diff[0]})
    _write_json(out / "denoise.json", meta)
    reports.plot_images(out / "denoise.png", panels)
    return {"label": cfg.label}


def cmd_attack(cfg: AttackRunConfig, out: Path) -> dict:
    batch = _limit(load_dataset(cfg.data), cfg.max_samples)
    models = {"model": cfg.checkpoint}
    if cfg.baseline:
        models["baseline"] = cfg.baseline
    base = AttackConfig(norm=cfg.norm, epsilon=1.0, steps=cfg.steps, step_size=cfg.step_size,
                        random_start=cfg.random_start)
    rows, curves = [], {}
    for label, path in models.items():
        model = _load_model(path)
        curve = robust_accuracy_curve(model, batch.torch_images(), batch.labels, cfg.norm,
                                      [float(e) for e in cfg.epsilons], base, cfg.seed)
        curves[label] = curve
        rows += [{"model": label, **r} for r in curve]
    reports.write_csv(out / "robust_accuracy.csv", rows, ["model", "epsilon", "accuracy", "n", "seed"])
    reports.plot_robust_accuracy(out / "robust_accuracy.png", curves, cfg.norm)
    return {"rows": len(rows)}


def cmd_jacobian(cfg: JacobianConfig, out: Path) -> dict:
    batch = load_dataset(cfg.data)
    if not 0 <= cfg.index < len(batch):
        raise DataError(f"jacobian: index {cfg.index} outside dataset of {len(batch)}")
    x = batch.images[cfg.index:cfg.index + 1].astype(np.float64)
    y = add_noise(x, cfg.sigma, cfg.seed)[0] if cfg.add_noise else x
    if cfg.checkpoint is not None:
        model = _load_model(cfg.checkpoint)
    else:
        model = GmmOracleModel(GmmSpec.load(cfg.gmm), cfg.sigma)
    _check(cfg.k <= y[0].size // 2, "jacobian: k must be at most half the image dimension")
    report = jacobian_report(model, y, cfg.sigma, cfg.k, input_id=str(cfg.index))
    report.save(out)
    reports.plot_jacobian(out / "jacobian.png", report, y.shape[1:])
    return {"asymmetry": report.asymmetry}


def cmd_biasvar(cfg: BiasVarConfig, out: Path) -> dict:
    try:
        spec = FamilySpec.from_dict(cfg.family)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"biasvar: bad family: {exc}") from exc
    curve = regime_sweep(spec, cfg.n_grid, cfg.repetitions, cfg.seed, cfg.mc_n, cfg.constants_n)
    reports.write_csv(out / "regime_curve.csv", curve.rows,
                      ["n", "estimator", "mean_kl", "stderr", "bound", "separated"])

    def clean(obj):
        if isinstance(obj, dict):
            return {k: clean(v) for k, v in obj.items()}
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        if isinstance(obj, (np.floating, np.integer)):
            return obj.item()
        return obj

    _write_json(out / "constants.json", clean({"family": spec.to_dict(), "repetitions": cfg.repetitions,
                                               "asymptotic": curve.constants, "fitted": curve.fits}))
    reports.plot_regime_curve(out / "regime_curve.png", curve)
    if cfg.stylized:
        panels = [STYLIZED_BIAS_DOMINATED, STYLIZED_VARIANCE_DOMINATED]
        reports.plot_stylized_bounds(out / "stylized_bounds.png", panels)
        _write_json(out / "stylized_bounds.json",
                    [{**p, "crossing_n": crossing_point(**p)} for p in panels])
    return {k: v["v"] for k, v in curve.fits.items()}


COMMANDS = {
    "make-data": (MakeDataConfig, cmd_make_data),
    "train": (TrainRunConfig, cmd_train),
    "eval": (EvalConfig, cmd_eval),
    "denoise": (DenoiseConfig, cmd_denoise),
    "attack": (AttackRunConfig, cmd_attack),
    "jacobian": (JacobianConfig, cmd_jacobian),
    "biasvar": (BiasVarConfig, cmd_biasvar),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jescore", description=__doc__.split("\n")[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="JSON config document")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", default=None, help="output directory (default: ./out/<command>)")
    parser.add_argument("--deterministic", action="store_true",
                        help="single-threaded, deterministic kernels")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def load_config(command: str, path, seed: Optional[int] = None):
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if isinstance(data, dict) and seed is not None:
        data = {**data, "seed": seed}
    return _strict(COMMANDS[command][0], data, command)


def run(command: str, config, out, deterministic: bool = False) -> dict:
    if deterministic:
        ad.set_deterministic(True)
    torch.manual_seed(getattr(config, "seed", 0))
    return COMMANDS[command][1](config, Path(out))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = args.out or str(Path("out") / args.command)
    try:
        config = load_config(args.command, args.config, args.seed)
        summary = run(args.command, config, out, args.deterministic)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps({"command": args.command, "out": out, **summary}, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
