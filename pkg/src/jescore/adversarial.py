"""Projected gradient descent attacks and robustness curves.

Attacks ascend the cross-entropy of the true label on the 0-255 pixel
scale. Under ``linf`` each step moves by ``step_size * sign(grad)``; under
``l2`` by ``step_size * grad / ||grad||``. After every step the perturbation
is projected back onto the epsilon ball and the image onto the valid pixel
box.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .gradresnet import ConfigError


@dataclass
class AttackConfig:
    norm: str = "linf"
    epsilon: float = 8.0
    steps: int = 40
    step_size: Optional[float] = None  # default 2.5 * epsilon / steps
    random_start: bool = True
    sigma_eval: float = 0.0

    def __post_init__(self):
        if self.norm not in ("linf", "l2"):
            raise ConfigError(f"unknown norm {self.norm!r}")
        if self.epsilon < 0 or self.steps < 1 or self.sigma_eval < 0:
            raise ConfigError("need epsilon >= 0, steps >= 1, sigma_eval >= 0")

    @property
    def alpha(self) -> float:
        return 2.5 * self.epsilon / self.steps if self.step_size is None else float(self.step_size)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "AttackConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown attack keys: {sorted(unknown)}")
        return cls(**data)


def _dtype(model, x):
    try:
        return next(model.parameters()).dtype
    except (AttributeError, StopIteration):
        return x.dtype if torch.is_floating_point(x) else torch.float64


def _per_sample_norm(t: torch.Tensor) -> torch.Tensor:
    return t.reshape(t.shape[0], -1).norm(dim=1).view(-1, *([1] * (t.dim() - 1)))


def _project(delta: torch.Tensor, cfg: AttackConfig) -> torch.Tensor:
    if cfg.norm == "linf":
        return delta.clamp(-cfg.epsilon, cfg.epsilon)
    norm = _per_sample_norm(delta)
    factor = torch.clamp(cfg.epsilon / torch.clamp(norm, min=1e-12), max=1.0)
    return delta * factor


def _random_start(shape, cfg: AttackConfig, gen: torch.Generator, dtype) -> torch.Tensor:
    if cfg.norm == "linf":
        return (torch.rand(shape, generator=gen, dtype=dtype) * 2 - 1) * cfg.epsilon
    direction = torch.randn(shape, generator=gen, dtype=dtype)
    direction = direction / torch.clamp(_per_sample_norm(direction), min=1e-12)
    d = int(np.prod(shape[1:]))
    radius = torch.rand(shape[0], generator=gen, dtype=dtype) ** (1.0 / d) * cfg.epsilon
    return direction * radius.view(-1, *([1] * (len(shape) - 1)))


def pgd(model, images, labels, cfg: AttackConfig, seed: int = 0,
        lo: float = 0.0, hi: float = 255.0) -> torch.Tensor:
    """Adversarial versions of ``images`` for ``model.log_cond_class``.

    The pixel box is widened to include the clean image itself so that clean
    inputs slightly outside [lo, hi] never push the output off the epsilon ball.
    """
    x = torch.as_tensor(np.asarray(images) if not torch.is_tensor(images) else images)
    dtype = _dtype(model, x)
    x = x.detach().to(dtype)
    labels = torch.as_tensor(labels, dtype=torch.long).view(-1, 1)
    if cfg.epsilon == 0:
        return x.clone()
    box_lo = torch.clamp(x, max=lo)
    box_hi = torch.clamp(x, min=hi)
    gen = torch.Generator().manual_seed(int(seed))
    delta = _random_start(x.shape, cfg, gen, dtype) if cfg.random_start else torch.zeros_like(x)
    delta = torch.max(torch.min(x + _project(delta, cfg), box_hi), box_lo) - x
    for _ in range(cfg.steps):
        adv = (x + delta).requires_grad_(True)
        inp = adv
        if cfg.sigma_eval > 0:
            inp = adv + cfg.sigma_eval * torch.randn(x.shape, generator=gen, dtype=dtype)
        with torch.enable_grad():
            loss = -model.log_cond_class(inp).gather(1, labels).sum()
            (g,) = torch.autograd.grad(loss, adv)
        if cfg.norm == "linf":
            step = g.sign()
        else:
            step = g / torch.clamp(_per_sample_norm(g), min=1e-30)
        delta = _project(delta + cfg.alpha * step, cfg)
        delta = torch.max(torch.min(x + delta, box_hi), box_lo) - x
        delta = delta.detach()
    return (x + delta).detach()


def accuracy(model, images, labels) -> float:
    x = torch.as_tensor(images)
    with torch.no_grad():
        pred = model.log_cond_class(x.to(_dtype(model, x))).argmax(1)
    return float((pred.numpy() == np.asarray(labels)).mean())


def robust_accuracy_curve(model, images, labels, norm: str, epsilons: Sequence[float],
                          cfg: Optional[AttackConfig] = None, seed: int = 0) -> list[dict]:
    """Rows ``(epsilon, accuracy, n, seed)``; epsilon 0 is the clean accuracy."""
    base = cfg or AttackConfig(norm=norm)
    rows = []
    for eps in epsilons:
        attack = AttackConfig(norm=norm, epsilon=float(eps), steps=base.steps,
                              step_size=None if base.step_size is None else base.step_size * eps / max(base.epsilon, 1e-12),
                              random_start=base.random_start, sigma_eval=base.sigma_eval)
        adv = pgd(model, images, labels, attack, seed)
        rows.append({"epsilon": float(eps), "accuracy": accuracy(model, adv, labels),
                     "n": int(len(labels)), "seed": int(seed)})
    return rows


def is_monotone(rows: list[dict], slack: float = 0.01) -> bool:
    acc = [r["accuracy"] for r in sorted(rows, key=lambda r: r["epsilon"])]
    return all(b <= a + slack for a, b in zip(acc, acc[1:]))


def adversarial_gradient_sweep(model, y, c, sigmas: Sequence[float]) -> list[dict]:
    """Norm of grad_y log p(c|y) over noise levels, with the denoiser-difference cross-check.

    ``grad_norm`` is averaged over the batch; ``route_discrepancy`` is the
    largest relative difference between the direct gradient and
    ``(D_c - D_u) / sigma^2``.
    """
    y = torch.as_tensor(y)
    rows = []
    for s in sigmas:
        if s <= 0:
            raise ValueError("noise levels must be positive")
        direct = model.adversarial_gradient(y, c, s)
        via = model.adversarial_gradient_from_denoisers(y, c, s)
        norms = direct.reshape(direct.shape[0], -1).norm(dim=1)
        diff = (direct - via).reshape(direct.shape[0], -1).norm(dim=1)
        rel = diff / torch.clamp(norms, min=1e-30)
        rows.append({"sigma": float(s), "grad_norm": float(norms.mean()),
                     "route_discrepancy": float(rel.max()) if float(norms.max()) > 0 else float(diff.max())})
    return rows
