"""Joint training: cross-entropy on noisy images plus denoising score matching.

Each iteration draws two independent batches. The classification batch is
flipped, crop-augmented and noised with sigma <= 20; the denoising batch is
only flipped and noised with sigma <= 100. Gradients of the summed loss are
applied in a single AdamW step under a cosine learning-rate decay.

All randomness for iteration ``t`` is derived from ``(seed, t)`` so a run
resumed from a checkpoint replays the uninterrupted trace exactly.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .data import ImageBatch, NoiseSchedule, add_noise, padded_random_crop, random_hflip
from .gradresnet import ConfigError
from .joint import JointModel

log = logging.getLogger(__name__)

METRIC_FIELDS = ["iteration", "lr", "ce_loss", "dsm_loss", "grad_norm", "wall_time"]


class NumericalAbort(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    iterations: int = 78000
    lr: float = 3e-4
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_classification: int = 128
    batch_denoising: int = 64
    sigma_classification: tuple[float, float] = (1.0, 20.0)
    sigma_denoising: tuple[float, float] = (1.0, 100.0)
    dsm_variant: str = "unconditional"
    objective: str = "joint"
    classification_noise: bool = True
    hflip: bool = True
    crop_padding: int = 4
    seed: int = 0
    metrics_every: int = 100
    checkpoint_every: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.sigma_classification = tuple(float(s) for s in self.sigma_classification)
        self.sigma_denoising = tuple(float(s) for s in self.sigma_denoising)
        self.validate()

    def validate(self):
        if self.lr <= 0 or self.iterations <= 0:
            raise ConfigError("lr and iterations must be positive")
        if self.batch_classification <= 0 or self.batch_denoising <= 0:
            raise ConfigError("batch sizes must be positive")
        if self.weight_decay < 0 or self.crop_padding < 0:
            raise ConfigError("weight_decay and crop_padding must be nonnegative")
        if self.dsm_variant not in ("unconditional", "conditional"):
            raise ConfigError(f"unknown dsm_variant {self.dsm_variant!r}")
        if self.objective not in ("joint", "classification", "denoising"):
            raise ConfigError(f"unknown objective {self.objective!r}")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError("betas must be two numbers in [0, 1)")
        try:
            self.schedule_classification
            self.schedule_denoising
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def schedule_classification(self) -> NoiseSchedule:
        return NoiseSchedule(*self.sigma_classification)

    @property
    def schedule_denoising(self) -> NoiseSchedule:
        return NoiseSchedule(*self.sigma_denoising)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("betas", "sigma_classification", "sigma_denoising"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


# losses

def ce_loss(model, y: torch.Tensor, labels) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    return -model.log_cond_class(y).gather(1, labels.view(-1, 1)).mean()


def dsm_loss(score: torch.Tensor, sigma, eps) -> torch.Tensor:
    """Mean over the batch of ``||sigma * score + eps||^2 / d``."""
    if eps is None:
        raise ValueError("the denoising loss needs the noise draws eps")
    eps = torch.as_tensor(eps, dtype=score.dtype)
    sigma = torch.as_tensor(sigma, dtype=score.dtype)
    if sigma.dim() == 1:
        sigma = sigma.view(-1, *([1] * (score.dim() - 1)))
    resid = sigma * score + eps
    d = resid[0].numel()
    return (resid ** 2).reshape(resid.shape[0], -1).sum(1).mean() / d


def model_dsm_loss(model: JointModel, y, sigma, eps, labels=None, variant="unconditional"):
    if variant == "conditional":
        if labels is None:
            raise ValueError("conditional denoising loss needs labels")
        score = model.score_conditional(y, labels, create_graph=True)
    else:
        score = model.score_marginal(y, create_graph=True)
    return dsm_loss(score, sigma, eps)


def total_loss(model: JointModel, cls_y, cls_labels, den_y, den_sigma, den_eps,
               den_labels=None, variant="unconditional"):
    """Returns ``(total, ce, dsm)``; the two terms use their own batches."""
    ce = ce_loss(model, cls_y, cls_labels)
    dsm = model_dsm_loss(model, den_y, den_sigma, den_eps, den_labels, variant)
    return ce + dsm, ce, dsm


# optimizer

def cosine_lr(t: int, total: int, lr_max: float) -> float:
    return lr_max * (1.0 + math.cos(math.pi * t / total)) / 2.0


@dataclass
class OptimizerState:
    step: int = 0
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: OptimizerState, lr: float,
               weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """In-place AdamW update with decoupled decay and bias-corrected moments."""
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)} for {name}")
            m = state.exp_avg.get(name)
            v = state.exp_avg_sq.get(name)
            if m is None:
                m = state.exp_avg[name] = torch.zeros_like(p)
                v = state.exp_avg_sq[name] = torch.zeros_like(p)
            p.mul_(1.0 - lr * weight_decay)
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            denom = (v / c2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-lr / c1)


# batches

def _stream_indices(n: int, start: int, size: int, seed: int, tag: int) -> np.ndarray:
    """Positions ``start .. start+size`` of an endless stream of per-epoch permutations."""
    out = []
    pos = start
    while len(out) < size:
        epoch, offset = divmod(pos, n)
        perm = np.random.default_rng([seed, tag, epoch]).permutation(n)
        take = min(size - len(out), n - offset)
        out.extend(perm[offset:offset + take])
        pos += take
    return np.asarray(out)


def make_batches(data: ImageBatch, cfg: TrainConfig, t: int):
    """The classification and denoising batches of iteration ``t``."""
    n = len(data)
    rng = np.random.default_rng([cfg.seed, 2, t])
    ci = _stream_indices(n, t * cfg.batch_classification, cfg.batch_classification, cfg.seed, 0)
    x = data.images[ci]
    if cfg.hflip:
        x = random_hflip(x, rng)
    if cfg.crop_padding:
        x = padded_random_crop(x, cfg.crop_padding, rng)
    if cfg.classification_noise:
        cs = cfg.schedule_classification.sample(len(ci), rng)
        x, _ = add_noise(x, cs, rng)
    cls = (x, data.labels[ci])

    di = _stream_indices(n, t * cfg.batch_denoising, cfg.batch_denoising, cfg.seed, 1)
    xd = data.images[di]
    if cfg.hflip:
        xd = random_hflip(xd, rng)
    ds = cfg.schedule_denoising.sample(len(di), rng)
    yd, eps = add_noise(xd, ds, rng)
    den = (yd, ds, eps, data.labels[di])
    return cls, den


def epochs_done(cfg: TrainConfig, n: int, t: int) -> float:
    """Epoch count follows the classification loader."""
    return t * cfg.batch_classification / n


# loop

class Trainer:
    def __init__(self, model: JointModel, data: ImageBatch, cfg: TrainConfig,
                 state: Optional[OptimizerState] = None, iteration: int = 0):
        self.model, self.data, self.cfg = model, data, cfg
        self.state = state or OptimizerState()
        self.iteration = iteration
        self.history: list[dict] = []
        self._start_time = time.time()

    @property
    def dtype(self):
        return next(self.model.parameters()).dtype

    def losses(self, t: int):
        cfg, dt = self.cfg, self.dtype
        (cx, cl), (dy, ds, de, dl) = make_batches(self.data, cfg, t)
        zero = torch.zeros((), dtype=dt)
        ce = dsm = zero
        if cfg.objective in ("joint", "classification"):
            ce = ce_loss(self.model, torch.as_tensor(cx, dtype=dt), cl)
        if cfg.objective in ("joint", "denoising"):
            dsm = model_dsm_loss(self.model, torch.as_tensor(dy, dtype=dt), ds, de, dl, cfg.dsm_variant)
        return ce + dsm, ce, dsm

    def step(self) -> dict:
        cfg, t = self.cfg, self.iteration
        params = dict(self.model.named_parameters())
        total, ce, dsm = self.losses(t)
        if not torch.isfinite(total):
            raise NumericalAbort(f"non-finite loss at iteration {t}: "
                                 f"ce={float(ce.detach())}, dsm={float(dsm.detach())}")
        names = [k for k, p in params.items() if p.requires_grad]
        gs = torch.autograd.grad(total, [params[k] for k in names], allow_unused=True)
        grads = {k: (torch.zeros_like(params[k]) if g is None else g) for k, g in zip(names, gs)}
        grad_norm = float(torch.sqrt(sum((g.double() ** 2).sum() for g in grads.values())))
        lr = cosine_lr(t, cfg.iterations, cfg.lr)
        adamw_step(params, grads, self.state, lr, cfg.weight_decay, cfg.betas, cfg.adam_eps)
        self.iteration += 1
        row = {"iteration": self.iteration, "lr": lr, "ce_loss": float(ce.detach()), "dsm_loss": float(dsm.detach()),
               "grad_norm": grad_norm, "wall_time": time.time() - self._start_time}
        self.history.append(row)
        return row

    def run(self, until: Optional[int] = None, out_dir=None, on_checkpoint=None) -> list[dict]:
        """Train up to iteration ``until`` (default: the configured total).

        With ``out_dir`` set, metrics rows are appended to ``metrics.csv`` every
        ``metrics_every`` steps and checkpoints are written on schedule; a
        non-finite loss writes ``diagnostic.jesm`` before raising.
        """
        from .checkpoint import save_checkpoint

        cfg = self.cfg
        until = cfg.iterations if until is None else min(until, cfg.iterations)
        writer = None
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            path = out_dir / "metrics.csv"
            fresh = not path.exists() or self.iteration == 0
            fh = open(path, "w" if fresh else "a", newline="")
            writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
            if fresh:
                writer.writeheader()
        try:
            while self.iteration < until:
                try:
                    row = self.step()
                except NumericalAbort:
                    if out_dir is not None:
                        save_checkpoint(out_dir / "diagnostic.jesm", self.model, cfg, self.state,
                                        self.iteration, self.history[-1] if self.history else None)
                    raise
                t = self.iteration
                if cfg.metrics_every and (t % cfg.metrics_every == 0 or t == until):
                    log.info("iter %d lr %.3g ce %.4f dsm %.4f |g| %.3g", t, row["lr"],
                             row["ce_loss"], row["dsm_loss"], row["grad_norm"])
                    if writer is not None:
                        writer.writerow({k: row[k] for k in METRIC_FIELDS})
                if out_dir is not None and cfg.checkpoint_every and t % cfg.checkpoint_every == 0:
                    path = out_dir / f"checkpoint_{t:07d}.jesm"
                    save_checkpoint(path, self.model, cfg, self.state, t, row)
                    if on_checkpoint:
                        on_checkpoint(path)
        finally:
            if writer is not None:
                fh.close()
        return self.history


def train(model: JointModel, data: ImageBatch, cfg: TrainConfig, out_dir=None) -> Trainer:
    trainer = Trainer(model, data, cfg)
    trainer.run(out_dir=out_dir)
    return trainer
