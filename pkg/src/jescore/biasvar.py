"""Generative versus discriminative estimators on a two-class Gaussian family.

The family is ``p_theta(x, c) = pi_c N(x; mu_c, I)`` with
``theta = (a, mu_1, mu_2)``, ``a = log(pi_1 / pi_2)``, so ``m = 2d + 1``
parameters. Its conditional is logistic with weight ``w = mu_1 - mu_2`` and
offset ``b = a - (|mu_1|^2 - |mu_2|^2) / 2``, which only identifies ``d + 1``
directions of ``theta``.

The true world draws each class from ``N(mu_c, rho^2 I)``. ``rho = 1`` is
well specified. Any other ``rho`` keeps the true conditional logistic, so
the discriminative fit stays unbiased while the generative fit (which
assumes unit variance) does not.

Labels are encoded as ``t = 1`` for class 1 and ``t = 0`` for class 2.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit, log_expit


@dataclass
class FamilySpec:
    d: int = 2
    prior_logit: float = 0.3
    mu1: Optional[np.ndarray] = None
    mu2: Optional[np.ndarray] = None
    rho: float = 1.0

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("d must be positive")
        if self.mu1 is None:
            self.mu1 = np.full(self.d, 0.5 / np.sqrt(self.d))
        if self.mu2 is None:
            self.mu2 = -np.full(self.d, 0.5 / np.sqrt(self.d))
        self.mu1 = np.asarray(self.mu1, dtype=np.float64)
        self.mu2 = np.asarray(self.mu2, dtype=np.float64)
        if self.mu1.shape != (self.d,) or self.mu2.shape != (self.d,):
            raise ValueError("class means must have length d")
        if self.rho <= 0:
            raise ValueError("rho must be positive")

    @property
    def well_specified(self) -> bool:
        return self.rho == 1.0

    @property
    def m(self) -> int:
        return 2 * self.d + 1

    @property
    def m_eff(self) -> int:
        return self.d + 1

    @property
    def theta_true(self) -> np.ndarray:
        """Parameters of the true class prior and means."""
        return pack(self.prior_logit, self.mu1, self.mu2)

    def true_logistic(self) -> tuple[np.ndarray, float]:
        r2 = self.rho ** 2
        w = (self.mu1 - self.mu2) / r2
        b = self.prior_logit - 0.5 * (self.mu1 @ self.mu1 - self.mu2 @ self.mu2) / r2
        return w, b

    def to_dict(self) -> dict:
        return {"d": self.d, "prior_logit": self.prior_logit, "mu1": self.mu1.tolist(),
                "mu2": self.mu2.tolist(), "rho": self.rho}

    @classmethod
    def from_dict(cls, data: dict) -> "FamilySpec":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown family keys: {sorted(unknown)}")
        return cls(**data)


def pack(a, mu1, mu2) -> np.ndarray:
    return np.concatenate([[a], mu1, mu2])


def unpack(theta: np.ndarray, d: int):
    return theta[0], theta[1:1 + d], theta[1 + d:1 + 2 * d]


def logistic_of(theta: np.ndarray, d: int) -> tuple[np.ndarray, float]:
    a, mu1, mu2 = unpack(theta, d)
    return mu1 - mu2, a - 0.5 * (mu1 @ mu1 - mu2 @ mu2)


def sample(spec: FamilySpec, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(rng)
    t = (rng.random(n) < expit(spec.prior_logit)).astype(np.float64)
    means = np.where(t[:, None] == 1, spec.mu1, spec.mu2)
    return means + spec.rho * rng.standard_normal((n, spec.d)), t


class ClassAbsent(ValueError):
    pass


def fit_generative(x: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Closed-form maximum likelihood: empirical prior logit and class means."""
    n1 = t.sum()
    n0 = len(t) - n1
    if n1 == 0 or n0 == 0:
        raise ClassAbsent("both classes must be present")
    mu1 = x[t == 1].mean(0)
    mu2 = x[t == 0].mean(0)
    return pack(np.log(n1 / n0), mu1, mu2)


@dataclass
class LogisticFit:
    w: np.ndarray
    b: float
    iterations: int
    separated: bool


def fit_logistic(x: np.ndarray, t: np.ndarray, max_iter: int = 100, cap: float = 1e3,
                 tol: float = 1e-12) -> LogisticFit:
    """Unregularized logistic regression by damped Newton with backtracking."""
    n, d = x.shape
    z = np.hstack([np.ones((n, 1)), x])
    beta = np.zeros(d + 1)

    def nll(beta):
        eta = z @ beta
        return -(t * log_expit(eta) + (1 - t) * log_expit(-eta)).sum()

    f = nll(beta)
    separated = False
    it = 0
    for it in range(1, max_iter + 1):
        p = expit(z @ beta)
        g = z.T @ (p - t)
        h = (z * (p * (1 - p))[:, None]).T @ z
        try:
            step = np.linalg.solve(h + 1e-12 * np.eye(d + 1), g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(h, g, rcond=None)[0]
        lam = 1.0
        while True:
            cand = beta - lam * step
            fc = nll(cand)
            if fc <= f - 1e-4 * lam * (g @ step) or lam < 1e-10:
                break
            lam *= 0.5
        beta, f_old, f = cand, f, fc
        if np.linalg.norm(beta[1:]) > cap:
            separated = True
            break
        if abs(f_old - f) <= tol * max(1.0, abs(f)) and np.abs(g).max() < 1e-8 * n:
            break
    # a hyperplane that classifies every point correctly proves the MLE does not exist
    separated = separated or bool(np.all((2 * t - 1) * (z @ beta) > 0))
    return LogisticFit(beta[1:], float(beta[0]), it, separated)


def theta_from_logistic(w: np.ndarray, b: float, reference: np.ndarray) -> np.ndarray:
    """The parameter closest to ``reference`` whose conditional has weight ``w`` and offset ``b``.

    With ``s = mu_1 + mu_2`` the constraint is ``a = b + w.s / 2`` and the
    squared displacement is ``(a - a_r)^2 + |s - s_r|^2 / 2 + const``, whose
    minimizer is ``s = s_r - lam w`` with
    ``lam = (b - a_r + w.s_r / 2) / (1 + |w|^2 / 2)``.
    """
    d = len(w)
    a_r, m1_r, m2_r = unpack(reference, d)
    s_r = m1_r + m2_r
    lam = (b - a_r + 0.5 * w @ s_r) / (1.0 + 0.5 * w @ w)
    s = s_r - lam * w
    a = b + 0.5 * w @ s
    return pack(a, (s + w) / 2, (s - w) / 2)


@dataclass
class DiscriminativeFit:
    theta: np.ndarray
    separated: bool


def fit_discriminative(x: np.ndarray, t: np.ndarray, reference: Optional[np.ndarray] = None) -> DiscriminativeFit:
    """Conditional maximum likelihood, returned as the minimum-norm displacement from ``reference``."""
    if t.sum() == 0 or t.sum() == len(t):
        raise ClassAbsent("both classes must be present")
    d = x.shape[1]
    ref = np.zeros(2 * d + 1) if reference is None else np.asarray(reference, dtype=np.float64)
    fit = fit_logistic(x, t)
    return DiscriminativeFit(theta_from_logistic(fit.w, fit.b, ref), fit.separated)


# generalization error

def _bernoulli_kl(eta_p: np.ndarray, eta_q: np.ndarray) -> np.ndarray:
    """KL(Bern(sigmoid(eta_p)) || Bern(sigmoid(eta_q))), stable in the logits."""
    p = expit(eta_p)
    return p * (log_expit(eta_p) - log_expit(eta_q)) + (1 - p) * (log_expit(-eta_p) - log_expit(-eta_q))


def kl_on_sample(theta: np.ndarray, spec: FamilySpec, x: np.ndarray) -> np.ndarray:
    w_true, b_true = spec.true_logistic()
    w, b = logistic_of(theta, spec.d)
    return _bernoulli_kl(x @ w_true + b_true, x @ w + b)


def kl_generalization_error(theta: np.ndarray, spec: FamilySpec, mc_n: int = 10_000,
                            seed=0) -> tuple[float, float]:
    """Monte-Carlo mean and standard error of E_x KL(p(c|x) || p_theta(c|x))."""
    if mc_n < 1:
        raise ValueError("mc_n must be positive")
    x, _ = sample(spec, mc_n, seed)
    kl = kl_on_sample(theta, spec, x)
    se = float(kl.std(ddof=1) / np.sqrt(mc_n)) if mc_n > 1 else float("nan")
    return float(kl.mean()), se


# asymptotic constants

def _grad_hess_generative(theta, x, t):
    d = x.shape[1]
    a, mu1, mu2 = unpack(theta, d)
    n = len(t)
    pa = expit(a)
    grads = np.hstack([-(t - pa)[:, None], -t[:, None] * (x - mu1), -(1 - t)[:, None] * (x - mu2)])
    diag = np.hstack([np.full((n, 1), pa * (1 - pa)), np.repeat(t[:, None], d, 1), np.repeat((1 - t)[:, None], d, 1)])
    return grads, np.mean(diag, 0)[None] * np.eye(2 * d + 1)


def _grad_hess_discriminative(theta, x, t, p_true=None):
    d = x.shape[1]
    a, mu1, mu2 = unpack(theta, d)
    w, b = logistic_of(theta, d)
    eta = x @ w + b
    p = expit(eta)
    geta = np.hstack([np.ones((len(t), 1)), x - mu1, mu2 - x])
    grads = -(t - p)[:, None] * geta
    curv = np.einsum("n,ni,nj->ij", p * (1 - p), geta, geta) / len(t)
    second = np.concatenate([[0.0], np.ones(d), -np.ones(d)])
    # E[t | x] in place of t: exact zero when p matches the true conditional
    resid = t - p if p_true is None else p_true - p
    hess = curv + np.mean(resid) * np.diag(second)
    return grads, hess


def true_conditional(spec: FamilySpec, x: np.ndarray) -> np.ndarray:
    w, b = spec.true_logistic()
    return expit(x @ w + b)


def per_sample_terms(kind: str, theta, x, t, p_true=None):
    """Per-sample gradients and the mean Hessian of the negative log-likelihood."""
    if kind == "generative":
        return _grad_hess_generative(theta, x, t)
    if kind == "discriminative":
        return _grad_hess_discriminative(theta, x, t, p_true)
    raise ValueError(f"unknown estimator kind {kind!r}")


def pinv_sym(h: np.ndarray, cutoff: float = 1e-8) -> np.ndarray:
    """Pseudo-inverse of a symmetric matrix, dropping eigenvalues below ``cutoff * max|eig|``."""
    vals, vecs = np.linalg.eigh(0.5 * (h + h.T))
    keep = np.abs(vals) > cutoff * np.abs(vals).max()
    inv = np.zeros_like(vals)
    inv[keep] = 1.0 / vals[keep]
    return (vecs * inv) @ vecs.T


def theta_star(spec: FamilySpec, kind: str) -> np.ndarray:
    """Population optimum of each estimator.

    Generative: true prior logit and class means (the unit-variance MLE of a
    mean ignores the variance). Discriminative: the true logistic conditional,
    placed at the minimum-norm displacement from the generative optimum.
    """
    gen = spec.theta_true
    if kind == "generative":
        return gen
    w, b = spec.true_logistic()
    return theta_from_logistic(w, b, gen)


def fisher_matrices(spec: FamilySpec, theta, n: int, seed=0):
    """Mean Hessian and gradient covariance of -log p_theta(c|x) under the true world."""
    x, t = sample(spec, n, seed)
    grads, hess = _grad_hess_discriminative(theta, x, t, true_conditional(spec, x))
    return hess, np.cov(grads.T, bias=True)


def joint_hessian_split(spec: FamilySpec, theta, n: int, seed=0):
    """E[-hess log p(x,c)], E[-hess log p(c|x)] and their difference E[-hess log p(x)]."""
    x, t = sample(spec, n, seed)
    _, h_joint = _grad_hess_generative(theta, x, t)
    _, h_cond = _grad_hess_discriminative(theta, x, t, true_conditional(spec, x))
    return h_joint, h_cond, h_joint - h_cond


def asymptotic_constants(spec: FamilySpec, kind: str, sample_n: int = 100_000,
                         kl_n: int = 10_000, seed=0, cutoff: float = 1e-8) -> dict:
    """Bias ``b`` and variance ``v`` with ``E[err(theta_n)] ~ b + v / (2n)``.

    ``Sigma = H^+ Cov[grad l] H^+`` with ``H`` the mean Hessian of the
    estimator's own loss, and ``v = Tr(Sigma E[-hess log p_theta*(c|x)])``.
    Expectations are Monte-Carlo averages over the true world.
    """
    th = theta_star(spec, kind)
    x, t = sample(spec, sample_n, seed)
    p_true = true_conditional(spec, x)
    grads, h = per_sample_terms(kind, th, x, t, p_true)
    cov = np.cov(grads.T, bias=True)
    h_plus = pinv_sym(h, cutoff)
    sigma = h_plus @ cov @ h_plus
    _, h_cond = _grad_hess_discriminative(th, x, t, p_true)
    v = float(np.trace(sigma @ h_cond))
    b, b_se = kl_generalization_error(th, spec, kl_n, seed + 1 if isinstance(seed, int) else seed)
    vals = np.linalg.eigvalsh(0.5 * (h + h.T))
    rel = np.abs(vals) / np.abs(vals).max()
    rank = int((rel > cutoff).sum())
    # eigenvalues within three decades of the cutoff make the rank decision fragile
    ill = bool(np.any((rel > cutoff) & (rel < 1e3 * cutoff)))
    return {"kind": kind, "b": b, "b_stderr": b_se, "v": v, "m": spec.m, "m_eff": spec.m_eff,
            "hessian_rank": rank, "ill_conditioned": ill, "theta_star": th.tolist()}


# regime curves

@dataclass
class RegimeCurve:
    n_grid: list
    repetitions: int
    rows: list = field(default_factory=list)   # dicts: n, estimator, mean_kl, stderr, bound, separated
    fits: dict = field(default_factory=dict)   # estimator -> {b, v, b_se, v_se, residual}
    constants: dict = field(default_factory=dict)

    def series(self, estimator: str, key: str = "mean_kl") -> np.ndarray:
        return np.array([r[key] for r in self.rows if r["estimator"] == estimator])


def fit_bias_variance(n: Sequence[float], mean: Sequence[float], stderr: Sequence[float]) -> dict:
    """Weighted least squares of ``mean = b + (v/2) / n``."""
    n = np.asarray(n, dtype=np.float64)
    if len(n) < 2:
        raise ValueError("need at least two sample sizes to separate b from v")
    y = np.asarray(mean, dtype=np.float64)
    se = np.maximum(np.asarray(stderr, dtype=np.float64), 1e-300)
    a = np.stack([np.ones_like(n), 1.0 / n], 1)
    wts = 1.0 / se
    coef, *_ = np.linalg.lstsq(a * wts[:, None], y * wts, rcond=None)
    cov = np.linalg.inv((a * wts[:, None] ** 2).T @ a)
    resid = y - a @ coef
    chi2 = float(((resid / se) ** 2).sum())
    return {"b": float(coef[0]), "v": float(2 * coef[1]), "b_se": float(np.sqrt(cov[0, 0])),
            "v_se": float(2 * np.sqrt(cov[1, 1])), "chi2": chi2, "dof": len(n) - 2}


def regime_sweep(spec: FamilySpec, n_grid: Sequence[int], repetitions: int, seed: int = 0,
                 mc_n: int = 10_000, constants_n: int = 100_000) -> RegimeCurve:
    """Monte-Carlo generalization error of both estimators over training-set sizes.

    Every repetition has its own seed derived from ``seed``; one shared test
    sample evaluates all fits. Separated discriminative fits are excluded and
    counted.
    """
    n_grid = [int(n) for n in n_grid]
    if any(b <= a for a, b in zip(n_grid, n_grid[1:])):
        raise ValueError("n_grid must be increasing")
    x_test, _ = sample(spec, mc_n, [seed, 0])
    consts = {k: asymptotic_constants(spec, k, constants_n, kl_n=mc_n, seed=seed + 17)
              for k in ("generative", "discriminative")}
    curve = RegimeCurve(n_grid, repetitions, constants=consts)
    for n in n_grid:
        errs = {"generative": [], "discriminative": []}
        separated = 0
        for r in range(repetitions):
            rng = np.random.default_rng([seed, 1, n, r])
            while True:
                x, t = sample(spec, n, rng)
                if 0 < t.sum() < n:
                    break
            errs["generative"].append(kl_on_sample(fit_generative(x, t), spec, x_test).mean())
            dis = fit_discriminative(x, t)
            if dis.separated:
                separated += 1
            else:
                errs["discriminative"].append(kl_on_sample(dis.theta, spec, x_test).mean())
        for est, vals in errs.items():
            vals = np.asarray(vals)
            c = consts[est]
            curve.rows.append({
                "n": n, "estimator": est, "mean_kl": float(vals.mean()),
                "stderr": float(vals.std(ddof=1) / np.sqrt(len(vals))),
                "bound": c["b"] + c["v"] / (2 * n),
                "separated": separated if est == "discriminative" else 0,
            })
    for est in ("generative", "discriminative"):
        if len(n_grid) < 2:
            break
        rows = [r for r in curve.rows if r["estimator"] == est]
        curve.fits[est] = fit_bias_variance([r["n"] for r in rows], [r["mean_kl"] for r in rows],
                                            [r["stderr"] for r in rows])
    return curve


# stylized bounds

STYLIZED_BIAS_DOMINATED = {"b_gen": 5.0, "b_dis": 1.0, "v_gen": 20.0, "v_dis": 100.0}
STYLIZED_VARIANCE_DOMINATED = {"b_gen": 1.0, "b_dis": 1.0, "v_gen": 100.0, "v_dis": 10000.0}


def stylized_bounds(n, b_gen, b_dis, v_gen, v_dis):
    """The idealized error curves ``b + v / n`` of both estimators."""
    n = np.asarray(n, dtype=np.float64)
    return b_gen + v_gen / n, b_dis + v_dis / n


def crossing_point(b_gen, b_dis, v_gen, v_dis) -> Optional[float]:
    """Sample size where the two stylized curves meet, or ``None`` if they never do."""
    db, dv = b_gen - b_dis, v_dis - v_gen
    if db == 0:
        return None
    n = dv / db
    return float(n) if n > 0 else None
