"""Differentiable primitives and gradient utilities.

Every network and loss in the package is composed from the functions here.
Reverse-mode differentiation is delegated to torch autograd; what this module
adds is a narrow, shape-checked surface (no implicit broadcasting except the
per-channel gain), an exact-erf GELU, bias-free normalizations, and the
finite-difference machinery used for verification (gradient checks and
Hessian-vector products).
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

Tensor = torch.Tensor


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class UsageError(RuntimeError):
    """Raised when a differentiation request cannot be honoured."""


def _require_ndim(x: Tensor, ndim: int, what: str) -> None:
    if x.dim() != ndim:
        raise ShapeError(f"{what} must be {ndim}-d, got shape {tuple(x.shape)}")


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0,
           bias: Optional[Tensor] = None) -> Tensor:
    """Zero-padded 2-d cross-correlation, NCHW input and OIKK kernel."""
    _require_ndim(x, 4, "conv2d input")
    _require_ndim(kernel, 4, "conv2d kernel")
    if kernel.shape[1] != x.shape[1]:
        raise ShapeError(
            f"kernel expects {kernel.shape[1]} input channels, input has {x.shape[1]}")
    kh, kw = kernel.shape[-2:]
    if x.shape[2] + 2 * padding < kh or x.shape[3] + 2 * padding < kw:
        raise ShapeError(f"spatial size {tuple(x.shape[2:])} too small for kernel {kh}x{kw}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ShapeError("conv2d bias must have one entry per output channel")
    return F.conv2d(x, kernel, bias=bias, stride=stride, padding=padding)


def gelu(x: Tensor) -> Tensor:
    """x * Phi(x) with the exact normal CDF."""
    return F.gelu(x, approximate="none")


def relu(x: Tensor) -> Tensor:
    return torch.clamp_min(x, 0.0)


def groupnorm_biasfree(x: Tensor, gain: Tensor, groups: int, eps: float = 1e-5,
                       bias: Optional[Tensor] = None) -> Tensor:
    """Per-sample group standardization followed by a per-channel gain.

    ``bias`` exists only for the ablation that re-introduces additive terms;
    the default path has no shift anywhere.
    """
    _require_ndim(x, 4, "groupnorm input")
    channels = x.shape[1]
    if groups < 1 or channels % groups:
        raise ShapeError(f"{groups} groups do not divide {channels} channels")
    if gain.shape != (channels,):
        raise ShapeError("groupnorm gain must have one entry per channel")
    return F.group_norm(x, groups, weight=gain, bias=bias, eps=eps)


def batchnorm_eval(x: Tensor, gain: Tensor, eps: float = 1e-5,
                   bias: Optional[Tensor] = None) -> Tensor:
    """Batch-norm in eval mode with frozen unit statistics (mean 0, var 1)."""
    _require_ndim(x, 4, "batchnorm input")
    if gain.shape != (x.shape[1],):
        raise ShapeError("batchnorm gain must have one entry per channel")
    out = x * (gain / np.sqrt(1.0 + eps)).view(1, -1, 1, 1)
    if bias is not None:
        out = out + bias.view(1, -1, 1, 1)
    return out


def linear_biasfree(x: Tensor, weight: Tensor) -> Tensor:
    """``x @ weight.T`` for x of shape (N, in) and weight of shape (out, in)."""
    _require_ndim(x, 2, "linear input")
    _require_ndim(weight, 2, "linear weight")
    if weight.shape[1] != x.shape[1]:
        raise ShapeError(f"weight {tuple(weight.shape)} incompatible with input {tuple(x.shape)}")
    return x @ weight.T


def logsumexp(x: Tensor, dim: int = -1) -> Tensor:
    if x.shape[dim] == 0:
        raise ShapeError("logsumexp over an empty axis")
    return torch.logsumexp(x, dim=dim)


def grad(output: Tensor, wrt: Tensor, create_graph: bool = False) -> Tensor:
    """Reverse-mode gradient of a scalar ``output`` with respect to ``wrt``."""
    if output.numel() != 1:
        raise UsageError("grad needs a scalar output; reduce first")
    if not wrt.requires_grad:
        raise UsageError("wrt does not require grad, so it was not recorded")
    try:
        (g,) = torch.autograd.grad(output, wrt, create_graph=create_graph)
    except RuntimeError as exc:
        raise UsageError(f"wrt is not reachable from output: {exc}") from exc
    return g


def input_grad(fn: Callable[[Tensor], Tensor], y: Tensor, create_graph: bool = False) -> Tensor:
    """Gradient of ``fn(y).sum()`` w.r.t. ``y``, for per-sample scalar fns."""
    if not y.requires_grad:
        y = y.detach().requires_grad_(True)
    with torch.enable_grad():
        out = fn(y).sum()
        return grad(out, y, create_graph=create_graph)


def fd_step(y: Tensor) -> Tensor:
    """Central-difference step (machine eps)^(1/3) * (1 + |y_i|)."""
    eps = torch.finfo(y.dtype).eps
    return eps ** (1.0 / 3.0) * (1.0 + y.abs())


def finite_difference_grad(fn: Callable[[Tensor], Tensor], y: Tensor) -> Tensor:
    """Central finite-difference gradient of a scalar function, one coordinate at a time.

    Independent of autograd; used as the oracle for gradient checks. Cost is
    two evaluations per coordinate, so keep ``y`` small.
    """
    y = y.detach()
    flat = y.reshape(-1)
    steps = fd_step(flat)
    out = torch.empty_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            h = steps[i].item()
            plus = flat.clone()
            minus = flat.clone()
            plus[i] += h
            minus[i] -= h
            f_plus = fn(plus.view_as(y)).sum().item()
            f_minus = fn(minus.view_as(y)).sum().item()
            out[i] = (f_plus - f_minus) / ((plus[i] - minus[i]).item())
    return out.view_as(y)


def hvp(fn: Callable[[Tensor], Tensor], y: Tensor, v: Tensor, h: Optional[float] = None) -> Tensor:
    """Hessian-vector product of a scalar function by central differences of its gradient.

    ``(grad(y + h v) - grad(y - h v)) / (2 h)`` with ``h = 1e-3 / ||v||``,
    evaluated in double precision. ``fn`` maps y to per-sample scalars that
    are summed.
    """
    norm = float(v.double().norm())
    if not np.isfinite(norm) or norm < 1e-12:
        raise ValueError("hvp direction must be a nonzero finite vector")
    if h is None:
        h = 1e-3 / norm
    y64 = y.detach().double()
    v64 = v.detach().double()
    g_plus = input_grad(fn, y64 + h * v64)
    g_minus = input_grad(fn, y64 - h * v64)
    return (g_plus - g_minus) / (2.0 * h)


def relative_error(a, b) -> float:
    """``||a - b|| / max(||b||, tiny)`` for tensors or arrays."""
    a = np.asarray(a.detach().cpu() if isinstance(a, Tensor) else a, dtype=np.float64)
    b = np.asarray(b.detach().cpu() if isinstance(b, Tensor) else b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def set_deterministic(flag: bool = True) -> None:
    """Single-threaded, deterministic kernels so gradients replay bitwise."""
    if flag:
        torch.set_num_threads(1)
    torch.use_deterministic_algorithms(flag)
