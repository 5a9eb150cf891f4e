"""Joint log-density of noisy images and labels, and everything derived from it.

The classifier is linear in the features and the image log-density is
quadratic in them::

    log p(c | y) = (W f(y))_c - logsumexp_c' (W f(y))_c'
    log p(y)     = -1/2 (w . f(y))^2            (normalizer dropped)
    log p(y, c)  = log p(y) + log p(c | y)

Scores are input gradients of these, and the Tweedie denoisers are
``y + sigma^2 * score``. The normalizing constant never depends on ``y`` so it
is omitted everywhere.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from . import autodiff as ad
from .gradresnet import ArchConfig, FeatureNet, build


class JointModel(nn.Module):
    def __init__(self, net: FeatureNet, num_classes: int):
        super().__init__()
        if num_classes < 2:
            raise ValueError("need at least two classes")
        k = net.config.feature_dim
        self.net = net
        self.num_classes = num_classes
        self.W = nn.Parameter(torch.zeros(num_classes, k))
        self.w = nn.Parameter(torch.zeros(k))

    @property
    def config(self) -> ArchConfig:
        return self.net.config

    def features(self, y):
        return self.net(y)

    def logits(self, y):
        return ad.linear_biasfree(self.features(y), self.W)

    def _heads(self, y):
        f = self.features(y)
        logits = ad.linear_biasfree(f, self.W)
        energy = f @ self.w
        return logits, -0.5 * energy ** 2

    def log_cond_class(self, y):
        logits = self.logits(y)
        return logits - ad.logsumexp(logits, dim=1).unsqueeze(1)

    def log_marginal_unnorm(self, y):
        f = self.features(y)
        return -0.5 * (f @ self.w) ** 2

    def log_joint_unnorm(self, y, c):
        c = self._check_labels(c, y.shape[0])
        logits, log_marg = self._heads(y)
        log_cond = logits - ad.logsumexp(logits, dim=1).unsqueeze(1)
        return log_marg + log_cond.gather(1, c.view(-1, 1)).squeeze(1)

    def log_joint_all(self, y):
        """(N, C) matrix of log p(y, c) for every class."""
        logits, log_marg = self._heads(y)
        return log_marg.unsqueeze(1) + logits - ad.logsumexp(logits, dim=1).unsqueeze(1)

    def _check_labels(self, c, n):
        c = torch.as_tensor(c, dtype=torch.long)
        if c.dim() == 0:
            c = c.expand(n)
        if c.shape != (n,):
            raise ValueError(f"expected {n} labels, got shape {tuple(c.shape)}")
        if (c < 0).any() or (c >= self.num_classes).any():
            raise ValueError(f"class index outside [0, {self.num_classes})")
        return c

    # scores and denoisers

    def score_marginal(self, y, create_graph=False):
        return ad.input_grad(self.log_marginal_unnorm, y, create_graph)

    def score_conditional(self, y, c, create_graph=False):
        c = self._check_labels(c, y.shape[0])
        return ad.input_grad(lambda t: self.log_joint_unnorm(t, c), y, create_graph)

    def class_gradient(self, y, c, create_graph=False):
        """grad_y log p(c | y)."""
        c = self._check_labels(c, y.shape[0])
        return ad.input_grad(lambda t: self.log_cond_class(t).gather(1, c.view(-1, 1)), y, create_graph)

    def denoise_uncond(self, y, sigma, create_graph=False):
        sigma2 = _sigma_squared(sigma, y)
        return y.detach() + sigma2 * self.score_marginal(y, create_graph)

    def denoise_cond(self, y, c, sigma, create_graph=False):
        sigma2 = _sigma_squared(sigma, y)
        return y.detach() + sigma2 * self.score_conditional(y, c, create_graph)

    def adversarial_gradient(self, y, c, sigma):
        """grad_y log p(c | y), computed directly (sigma only validated)."""
        _sigma_squared(sigma, y)
        return self.class_gradient(y, c)

    def adversarial_gradient_from_denoisers(self, y, c, sigma):
        """(D_c(y, c) - D_u(y)) / sigma^2, the denoiser-difference route."""
        sigma2 = _sigma_squared(sigma, y)
        return (self.denoise_cond(y, c, sigma) - self.denoise_uncond(y, sigma)) / sigma2

    def predict(self, y):
        with torch.no_grad():
            return self.logits(y).argmax(dim=1)


def _sigma_squared(sigma, y):
    s = torch.as_tensor(sigma, dtype=y.dtype)
    if (s <= 0).any():
        raise ValueError("sigma must be positive")
    if s.dim() == 1:
        s = s.view(-1, *([1] * (y.dim() - 1)))
    return s ** 2


def build_joint(config: ArchConfig, num_classes: int, seed: int = 0) -> JointModel:
    """Feature net plus head, both initialized from ``seed``."""
    net = build(config, seed)
    model = JointModel(net, num_classes)
    gen = torch.Generator().manual_seed(int(seed) + 7919)
    bound = 1.0 / math.sqrt(config.feature_dim)
    with torch.no_grad():
        model.W.uniform_(-bound, bound, generator=gen)
        model.w.uniform_(-bound, bound, generator=gen)
    return model
