"""Closed-form densities, samplers, moments, and divergences.

Categorical, Dirichlet, and diagonal-Gaussian laws shared by all four
models. Tensor-valued variants (suffix ``_rows``) are differentiable on
the gradient tape and operate on (N, K) concentration matrices; plain
helpers take numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import autodiff as ad
from .autodiff import Tensor, as_tensor

NLL_PROB_FLOOR = 1e-12


@dataclass
class SeededRng:
    """Deterministic RNG handle: identical (seed, stream) -> identical draws."""

    seed: int
    stream: int = 0
    algorithm: str = "pcg64"
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.algorithm != "pcg64":
            raise ValueError(f"unsupported rng algorithm: {self.algorithm}")
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream,))
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def spawn(self, stream: int) -> "SeededRng":
        return SeededRng(seed=self.seed, stream=stream)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n):
        return self._gen.permutation(n)


def _check_alpha(alpha):
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(alpha <= 0.0):
        raise ValueError("Dirichlet concentrations must be strictly positive")
    return alpha


# ---------------------------------------------------------------------------
# Dirichlet


def dirichlet_kl(alpha_q, alpha_p) -> float:
    """KL(Dir(alpha_q) || Dir(alpha_p)) in log-gamma space."""
    q = _check_alpha(alpha_q)
    p = _check_alpha(alpha_p)
    if q.shape != p.shape:
        raise ValueError(f"dirichlet_kl: length mismatch {q.shape} vs {p.shape}")
    q0, p0 = q.sum(), p.sum()
    val = (
        special.gammaln(q0)
        - special.gammaln(p0)
        + np.sum(special.gammaln(p) - special.gammaln(q))
        + np.sum((q - p) * (special.psi(q) - special.psi(q0)))
    )
    return float(val)


def dirichlet_kl_rows(alpha_q: Tensor, alpha_p) -> Tensor:
    """Row-wise KL(Dir(q_row) || Dir(p)) for an (N, K) tensor; returns (N, 1)."""
    alpha_q = as_tensor(alpha_q)
    n, k = alpha_q.shape
    p = _check_alpha(alpha_p)
    ones = np.ones((k, 1))
    a0 = ad.matmul(alpha_q, ones)                      # (N,1)
    lg_a0 = ad.lgamma(a0)
    sum_lg_a = ad.matmul(ad.lgamma(alpha_q), ones)     # (N,1)
    psi_a = ad.digamma(alpha_q)                        # (N,K)
    psi_a0_full = ad.matmul(ad.digamma(a0), np.ones((1, k)))  # (N,K)
    cross = ad.matmul(ad.mul(ad.sub(alpha_q, p), ad.sub(psi_a, psi_a0_full)), ones)
    const = float(np.sum(special.gammaln(p)) - special.gammaln(p.sum()))
    kl = ad.add(ad.add(ad.sub(lg_a0, sum_lg_a), cross), np.full((n, 1), const))
    return kl


def dirichlet_moments(alpha):
    """Mean and variance vectors of Dir(alpha)."""
    a = _check_alpha(alpha)
    a0 = a.sum()
    mean = a / a0
    var = a * (a0 - a) / (a0 * a0 * (a0 + 1.0))
    return mean, var


def dirichlet_moments_rows(alpha: Tensor):
    """Differentiable row-wise Dirichlet mean and variance for (N, K) alpha."""
    alpha = as_tensor(alpha)
    n, k = alpha.shape
    ones_k1 = np.ones((k, 1))
    ones_1k = np.ones((1, k))
    a0 = ad.matmul(ad.matmul(alpha, ones_k1), ones_1k)  # (N,K) each row filled with alpha_0
    inv_a0 = ad.reciprocal(a0)
    mean = ad.mul(alpha, inv_a0)
    inv_a0p1 = ad.reciprocal(ad.add(a0, np.ones((n, k))))
    var = ad.mul(ad.mul(ad.mul(mean, ad.sub(a0, alpha)), inv_a0), inv_a0p1)
    return mean, var


def dirichlet_expected_log_prob(alpha, k: int) -> float:
    """E_Dir(alpha)[log pi_k] = psi(alpha_k) - psi(alpha_0)."""
    a = _check_alpha(alpha)
    if not 0 <= k < len(a):
        raise IndexError(f"class index {k} out of range for K={len(a)}")
    return float(special.psi(a[k]) - special.psi(a.sum()))


def dirichlet_expected_log_prob_rows(alpha: Tensor, labels) -> Tensor:
    """Row-wise psi(alpha_y) - psi(alpha_0) for integer labels; returns (N, 1)."""
    alpha = as_tensor(alpha)
    n, k = alpha.shape
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= k:
        raise IndexError("label out of range")
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    ones = np.ones((k, 1))
    psi_a = ad.digamma(alpha)
    psi_sel = ad.matmul(ad.mul(psi_a, onehot), ones)   # (N,1)
    psi_a0 = ad.digamma(ad.matmul(alpha, ones))        # (N,1)
    return ad.sub(psi_sel, psi_a0)


def dirichlet_sample(alpha, rng: SeededRng):
    """One draw from Dir(alpha) via Gamma samples.

    Entries with alpha_k < 1 use the boosting identity (draw Gamma(a+1),
    scale by U^(1/a)) for numerical robustness.
    """
    a = _check_alpha(alpha)
    g = np.empty_like(a)
    small = a < 1.0
    if np.any(~small):
        g[~small] = rng.generator.gamma(a[~small])
    if np.any(small):
        boost = rng.generator.gamma(a[small] + 1.0)
        u = rng.uniform(size=small.sum())
        g[small] = boost * u ** (1.0 / a[small])
    g = np.maximum(g, np.finfo(np.float64).tiny)
    return g / g.sum()


def dirichlet_sample_many(alpha, n: int, rng: SeededRng):
    """n i.i.d. draws from Dir(alpha), shape (n, K)."""
    a = _check_alpha(alpha)
    g = np.empty((n, len(a)))
    small = a < 1.0
    if np.any(~small):
        g[:, ~small] = rng.generator.gamma(a[~small], size=(n, int((~small).sum())))
    if np.any(small):
        boost = rng.generator.gamma(a[small] + 1.0, size=(n, int(small.sum())))
        u = rng.uniform(size=(n, int(small.sum())))
        g[:, small] = boost * u ** (1.0 / a[small])
    g = np.maximum(g, np.finfo(np.float64).tiny)
    return g / g.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# diagonal Gaussian


def gaussian_reparam_sample(mean: Tensor, logvar: Tensor, rng: SeededRng) -> Tensor:
    """mean + exp(logvar/2) * eps with eps ~ N(0, I); differentiable."""
    mean, logvar = as_tensor(mean), as_tensor(logvar)
    if mean.shape != logvar.shape:
        raise ValueError(f"reparam: {mean.shape} vs {logvar.shape}")
    eps = rng.normal(size=mean.shape)
    return ad.add(mean, ad.mul(ad.exp(ad.scale(0.5, logvar)), as_tensor(eps)))


def gaussian_kl_diag(mean_q, logvar_q, mean_p, logvar_p):
    """KL(N(mq, diag exp lq) || N(mp, diag exp lp)).

    Tensor-aware: returns a scalar Tensor if any argument is tracked.
    """
    mq, lq = as_tensor(mean_q), as_tensor(logvar_q)
    mp = np.asarray(mean_p, dtype=np.float64)
    lp = np.asarray(logvar_p, dtype=np.float64)
    if mq.shape != lq.shape or mq.shape != mp.shape or mp.shape != lp.shape:
        raise ValueError("gaussian_kl_diag: length mismatch")
    var_p = np.exp(lp)
    inv_var_p = as_tensor(1.0 / var_p)
    var_q = ad.exp(lq)
    diff = ad.sub(mq, as_tensor(mp))
    quad = ad.mul(ad.add(var_q, ad.mul(diff, diff)), inv_var_p)
    inner = ad.sub(ad.add(quad, as_tensor(lp)), lq)
    total = ad.tsum(inner)
    return ad.scale(0.5, ad.add(total, as_tensor(np.array(-float(mq.data.size)))))


def gaussian_kl_diag_value(mean_q, logvar_q, mean_p, logvar_p) -> float:
    return float(gaussian_kl_diag(mean_q, logvar_q, mean_p, logvar_p).data)


# ---------------------------------------------------------------------------
# categorical


def categorical_nll(probs, label: int) -> float:
    """-log p_label with a 1e-12 probability floor."""
    p = np.asarray(probs, dtype=np.float64)
    if abs(p.sum() - 1.0) > 1e-6:
        raise ValueError(f"probs do not sum to 1: sum={p.sum()}")
    if not 0 <= label < len(p):
        raise IndexError(f"label {label} out of range for K={len(p)}")
    return float(-np.log(max(p[label], NLL_PROB_FLOOR)))


def categorical_nll_batch(probs, labels):
    """Vector of floored NLLs plus the count of floored events."""
    p = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    sel = p[np.arange(len(labels)), labels]
    floored = int(np.sum(sel < NLL_PROB_FLOOR))
    return -np.log(np.maximum(sel, NLL_PROB_FLOOR)), floored
