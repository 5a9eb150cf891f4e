"""Denoiser introspection: Jacobians, their spectra, local linearity, PSNR.

The unconditional denoiser is ``D(y) = y + sigma^2 grad log p(y)`` so its
Jacobian is ``I + sigma^2 H`` with ``H`` the Hessian of the log-density. It is
assembled column by column from finite-difference Hessian-vector products,
symmetrized, and diagonalized with a dense cyclic Jacobi solver.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from . import autodiff as ad
from .adversarial import accuracy
from .data import add_noise

MAX_DENSE_DIM = 4096


def as_double(model):
    """A float64 copy of an ``nn.Module`` model; other models pass through."""
    if isinstance(model, nn.Module):
        return copy.deepcopy(model).double()
    return model


def _single(y) -> torch.Tensor:
    y = torch.as_tensor(y, dtype=torch.float64)
    if y.dim() == 3:
        y = y.unsqueeze(0)
    if y.shape[0] != 1:
        raise ValueError("Jacobian analysis takes one image at a time")
    return y


def hessian_log_marginal(model, y) -> np.ndarray:
    """Dense d x d Hessian of log p(y) from one HVP per basis direction."""
    m = as_double(model)
    y = _single(y)
    d = y[0].numel()
    if d > MAX_DENSE_DIM:
        raise ValueError(f"d={d} exceeds the dense limit {MAX_DENSE_DIM}; "
                         "crop the image or use an iterative top-k method")
    cols = np.empty((d, d))
    basis = torch.zeros(d, dtype=torch.float64)
    for i in range(d):
        basis.zero_()
        basis[i] = 1.0
        cols[:, i] = ad.hvp(m.log_marginal_unnorm, y, basis.view_as(y)).reshape(-1).numpy()
    return cols


@dataclass
class DenoiserJacobian:
    matrix: np.ndarray     # symmetrized
    asymmetry: float       # ||J - J^T||_F / ||J||_F before symmetrizing


def denoiser_jacobian(model, y, sigma: float) -> DenoiserJacobian:
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    h = hessian_log_marginal(model, y)
    j = np.eye(h.shape[0]) + sigma ** 2 * h
    asym = float(np.linalg.norm(j - j.T) / np.linalg.norm(j))
    return DenoiserJacobian(0.5 * (j + j.T), asym)


def _round_robin(n: int):
    """Rounds of disjoint index pairs covering every pair once (n even)."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        rounds.append((np.array(players[: n // 2]), np.array(players[n // 2:][::-1])))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def eig_symmetric(a, tol: float = 1e-15, max_sweeps: int = 60):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Rotations are scheduled in round-robin order so each round annihilates
    n/2 disjoint off-diagonal pairs at once. Returns eigenvalues in ascending
    order and the matching orthonormal eigenvectors as columns.
    """
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("need a square matrix")
    scale = np.linalg.norm(a)
    if scale and np.linalg.norm(a - a.T) > 1e-6 * scale:
        raise ValueError("matrix is not symmetric")
    n = a.shape[0]
    if n == 0:
        return np.zeros(0), np.zeros((0, 0))
    size = n + (n % 2)
    work = np.zeros((size, size))
    work[:n, :n] = 0.5 * (a + a.T)
    v = np.eye(size)
    rounds = _round_robin(size)
    for _ in range(max_sweeps):
        off = np.linalg.norm(work - np.diag(np.diag(work)))
        if off <= tol * max(scale, 1e-300):
            break
        for p, q in rounds:
            apq = work[p, q]
            active = np.abs(apq) > 1e-300
            if not active.any():
                continue
            p, q, apq = p[active], q[active], apq[active]
            theta = (work[q, q] - work[p, p]) / (2.0 * apq)
            t = np.where(theta >= 0, 1.0, -1.0) / (np.abs(theta) + np.sqrt(theta ** 2 + 1.0))
            c = 1.0 / np.sqrt(t ** 2 + 1.0)
            s = t * c
            cols_p, cols_q = work[:, p].copy(), work[:, q].copy()
            work[:, p] = c * cols_p - s * cols_q
            work[:, q] = s * cols_p + c * cols_q
            rows_p, rows_q = work[p, :].copy(), work[q, :].copy()
            work[p, :] = c[:, None] * rows_p - s[:, None] * rows_q
            work[q, :] = s[:, None] * rows_p + c[:, None] * rows_q
            work[p, q] = 0.0
            work[q, p] = 0.0
            vp, vq = v[:, p].copy(), v[:, q].copy()
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
    vals = np.diag(work)[:n]
    vecs = v[:n, :n]
    order = np.argsort(vals, kind="stable")
    return vals[order], vecs[:, order]


def local_linearity_residual(model, y, sigma: float, jacobian: Optional[np.ndarray] = None) -> float:
    """``||D(y) - J(y) y|| / ||D(y)||``; zero for degree-1 homogeneous denoisers."""
    m = as_double(model)
    y = _single(y)
    if jacobian is None:
        jacobian = denoiser_jacobian(m, y, sigma).matrix
    d = m.denoise_uncond(y, sigma).detach().reshape(-1).numpy()
    jy = jacobian @ y.reshape(-1).numpy()
    return float(np.linalg.norm(d - jy) / np.linalg.norm(d))


def homogeneity_eligible(model) -> bool:
    cfg = getattr(model, "config", None)
    return bool(cfg is not None and cfg.homogeneous)


def psnr(clean, estimate, peak: float = 255.0) -> float:
    """Mean over images of ``10 log10(peak^2 / MSE)``; ``inf`` when every MSE is zero."""
    clean = np.asarray(clean, dtype=np.float64)
    estimate = np.asarray(estimate, dtype=np.float64)
    if clean.shape != estimate.shape:
        raise ValueError(f"shape mismatch {clean.shape} vs {estimate.shape}")
    if clean.ndim < 2:
        clean, estimate = clean[None], estimate[None]
    mse = ((clean - estimate) ** 2).reshape(clean.shape[0], -1).mean(1)
    with np.errstate(divide="ignore"):
        db = 10.0 * np.log10(peak ** 2 / mse)
    return float(np.mean(db))


@dataclass
class JacobianReport:
    input_id: str
    sigma: float
    matrix: np.ndarray
    eigenvalues: np.ndarray   # sorted by decreasing magnitude
    eigenvectors: np.ndarray  # columns, same order
    asymmetry: float
    k: int = 3
    local_linearity: Optional[float] = None
    local_linearity_asserted: bool = False
    extra: dict = field(default_factory=dict)

    @property
    def top(self):
        return self.eigenvalues[: self.k], self.eigenvectors[:, : self.k]

    @property
    def bottom(self):
        return self.eigenvalues[-self.k:], self.eigenvectors[:, -self.k:]

    def eigen_residual(self) -> float:
        """max_i ||J v_i - l_i v_i|| / ||J|| over the reported pairs."""
        vals = np.concatenate([self.top[0], self.bottom[0]])
        vecs = np.concatenate([self.top[1], self.bottom[1]], axis=1)
        r = self.matrix @ vecs - vecs * vals
        return float(np.linalg.norm(r, axis=0).max() / np.linalg.norm(self.matrix, 2))

    def save(self, directory) -> Path:
        """JSON metadata plus raw little-endian float64 blobs."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        blobs = {
            "matrix": self.matrix,
            "eigenvalues": self.eigenvalues,
            "top_vectors": self.top[1].T,
            "bottom_vectors": self.bottom[1].T,
        }
        index = {}
        for name, arr in blobs.items():
            fname = f"{name}.f64"
            (directory / fname).write_bytes(np.ascontiguousarray(arr, dtype="<f8").tobytes())
            index[name] = {"file": fname, "shape": list(arr.shape), "dtype": "f64"}
        meta = {
            "input_id": self.input_id,
            "sigma": self.sigma,
            "dim": int(self.matrix.shape[0]),
            "k": self.k,
            "asymmetry": self.asymmetry,
            "eigen_residual": self.eigen_residual(),
            "top_eigenvalues": self.top[0].tolist(),
            "bottom_eigenvalues": self.bottom[0].tolist(),
            "local_linearity": self.local_linearity,
            "local_linearity_asserted": self.local_linearity_asserted,
            "blobs": index,
            **self.extra,
        }
        (directory / "report.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return directory

    @classmethod
    def load(cls, directory) -> "JacobianReport":
        directory = Path(directory)
        meta = json.loads((directory / "report.json").read_text())

        def blob(name):
            info = meta["blobs"][name]
            raw = (directory / info["file"]).read_bytes()
            return np.frombuffer(raw, dtype="<f8").reshape(info["shape"]).copy()

        matrix = blob("matrix")
        vals, vecs = eig_symmetric(matrix)
        order = np.argsort(-np.abs(vals), kind="stable")
        return cls(meta["input_id"], meta["sigma"], matrix, blob("eigenvalues"), vecs[:, order],
                   meta["asymmetry"], meta["k"], meta["local_linearity"], meta["local_linearity_asserted"])


def jacobian_report(model, y, sigma: float, k: int = 3, input_id: str = "0") -> JacobianReport:
    jac = denoiser_jacobian(model, y, sigma)
    vals, vecs = eig_symmetric(jac.matrix)
    order = np.argsort(-np.abs(vals), kind="stable")
    eligible = homogeneity_eligible(model)
    lin = local_linearity_residual(model, y, sigma, jac.matrix) if hasattr(model, "denoise_uncond") else None
    return JacobianReport(input_id, float(sigma), jac.matrix, vals[order], vecs[:, order],
                          jac.asymmetry, k, lin, eligible)


def psnr_column(sigma: float) -> str:
    return f"psnr_sigma_{float(sigma):g}"


def evaluate(model, images, labels, sigmas, seed: int = 0, batch_size: int = 256) -> dict:
    """Clean accuracy and per-noise-level PSNR of ``model.denoise_uncond``.

    Any object exposing ``log_cond_class`` and ``denoise_uncond`` works,
    including the closed-form oracle. Noise for level ``i`` uses seed
    ``(seed, i)`` so every model sees the same noisy inputs.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    row = {}
    if hasattr(model, "log_cond_class"):
        hits = 0.0
        for i in range(0, len(images), batch_size):
            chunk = labels[i:i + batch_size]
            hits += accuracy(model, torch.from_numpy(images[i:i + batch_size]), chunk) * len(chunk)
        row["accuracy"] = hits / len(images)
    dtype = next(model.parameters()).dtype if isinstance(model, nn.Module) else torch.float64
    for i, s in enumerate(sigmas):
        noisy, _ = add_noise(images, float(s), [seed, i])
        out = []
        for j in range(0, len(noisy), batch_size):
            y = torch.from_numpy(noisy[j:j + batch_size]).to(dtype)
            out.append(model.denoise_uncond(y, float(s)).detach().double().numpy())
        row[psnr_column(s)] = psnr(images, np.concatenate(out))
    return row
