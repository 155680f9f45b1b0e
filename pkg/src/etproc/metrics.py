"""Total-calibration metrics and predictive-variance decompositions.

NLL / ECE / AUROC over prediction sets, the two law-of-total-variance
decompositions (global-weight models and hierarchical Dirichlet models),
and the exact Bayes-risk oracle for Gaussian-mixture tasks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .distributions import categorical_nll_batch


@dataclass
class PredictionSet:
    """Class-probability rows with true labels."""

    probs: np.ndarray   # (N, K), rows on the simplex
    labels: np.ndarray  # (N,) ints in [0, K)

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.probs.ndim != 2 or len(self.probs) != len(self.labels):
            raise ValueError("probs/labels shape mismatch")
        if np.any(np.abs(self.probs.sum(axis=1) - 1.0) > 1e-6):
            raise ValueError("prediction rows must sum to 1 within 1e-6")
        k = self.probs.shape[1]
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= k):
            raise ValueError("labels out of range")

    def entropies(self):
        return np.array([entropy(row) for row in self.probs])


@dataclass
class DecompositionTriple:
    """Per-class variance split: reducible + irreducible + data = total."""

    reducible: np.ndarray
    irreducible: np.ndarray
    data: np.ndarray
    total: np.ndarray


def nll(preds: PredictionSet) -> float:
    if len(preds.labels) == 0:
        raise ValueError("empty prediction set")
    vals, _ = categorical_nll_batch(preds.probs, preds.labels)
    return float(vals.mean())


def error_rate(preds: PredictionSet) -> float:
    return float(np.mean(preds.probs.argmax(axis=1) != preds.labels))


def ece(preds: PredictionSet, n_bins: int = 10) -> float:
    """Binned |accuracy - confidence| gap on max class probability.

    Bins are right-closed: ((m-1)/M, m/M]; empty bins contribute 0.
    """
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    conf = preds.probs.max(axis=1)
    correct = preds.probs.argmax(axis=1) == preds.labels
    n = len(conf)
    # right-closed binning: bin m covers ((m-1)/M, m/M]
    idx = np.ceil(conf * n_bins).astype(int) - 1
    idx = np.clip(idx, 0, n_bins - 1)
    total = 0.0
    for m in range(n_bins):
        mask = idx == m
        cnt = int(mask.sum())
        if cnt == 0:
            continue
        total += cnt / n * abs(correct[mask].mean() - conf[mask].mean())
    return float(total)


def auroc(scores_in, scores_out) -> float:
    """Exact Mann-Whitney rank statistic P(out > in) + 0.5 P(out == in)."""
    a = np.asarray(scores_in, dtype=np.float64)
    b = np.asarray(scores_out, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("both score lists must be non-empty")
    order = np.argsort(np.concatenate([a, b]), kind="mergesort")
    combined = np.concatenate([a, b])[order]
    is_out = np.concatenate([np.zeros(len(a), bool), np.ones(len(b), bool)])[order]
    # midranks with tie handling
    ranks = np.empty(len(combined))
    i = 0
    while i < len(combined):
        j = i
        while j + 1 < len(combined) and combined[j + 1] == combined[i]:
            j += 1
        ranks[i : j + 1] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum_out = ranks[is_out].sum()
    n_out, n_in = len(b), len(a)
    u = rank_sum_out - n_out * (n_out + 1) / 2.0
    return float(u / (n_in * n_out))


def entropy(probs) -> float:
    """Shannon entropy with 0 log 0 = 0; lies in [0, log K]."""
    p = np.asarray(probs, dtype=np.float64)
    if abs(p.sum() - 1.0) > 1e-6:
        raise ValueError("entropy: input not on the simplex")
    nz = p > 0.0
    return float(-np.sum(p[nz] * np.log(p[nz])))


# ---------------------------------------------------------------------------
# variance decompositions


def decompose_pbm(sampler, n_samples: int) -> DecompositionTriple:
    """Two-term split for models with global random weights only.

    ``sampler(s)`` returns the s-th class-probability vector h under a
    fresh weight draw. Biased (1/S) variance keeps the identity
    reducible + data = total exact on the same draws.
    """
    if n_samples < 2:
        raise ValueError("need at least 2 samples")
    draws = np.stack([np.asarray(sampler(s), dtype=np.float64) for s in range(n_samples)])
    mean_h = draws.mean(axis=0)
    reducible = draws.var(axis=0)
    data = (draws * (1.0 - draws)).mean(axis=0)
    total = mean_h * (1.0 - mean_h)
    return DecompositionTriple(reducible, np.zeros_like(reducible), data, total)


def decompose_cbm(alpha_sampler, n_outer: int) -> DecompositionTriple:
    """Three-term split for hierarchical Dirichlet models.

    ``alpha_sampler(s)`` returns the concentration vector under the s-th
    draw of the global variables; the inner Dirichlet moments are
    analytic, so no inner sampling is needed.
    """
    if n_outer < 2:
        raise ValueError("need at least 2 outer samples")
    means, dirvars, datavars = [], [], []
    for s in range(n_outer):
        a = np.asarray(alpha_sampler(s), dtype=np.float64)
        a0 = a.sum()
        m = a / a0
        v = a * (a0 - a) / (a0 * a0 * (a0 + 1.0))
        means.append(m)
        dirvars.append(v)
        datavars.append(m * (1.0 - m) - v)  # E[pi(1-pi)] = m(1-m) - Var[pi]
    means = np.stack(means)
    reducible = means.var(axis=0)
    irreducible = np.stack(dirvars).mean(axis=0)
    data = np.stack(datavars).mean(axis=0)
    p_bar = means.mean(axis=0)
    total = p_bar * (1.0 - p_bar)
    return DecompositionTriple(reducible, irreducible, data, total)


# ---------------------------------------------------------------------------
# ground-truth oracle for Gaussian-mixture tasks


@dataclass
class MixtureOracle:
    """K-mode 1-D Gaussian generative process with known class posteriors."""

    priors: np.ndarray   # (K,)
    means: np.ndarray    # (K,)
    variances: np.ndarray  # (K,)

    def __post_init__(self):
        self.priors = np.asarray(self.priors, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.variances = np.asarray(self.variances, dtype=np.float64)
        if abs(self.priors.sum() - 1.0) > 1e-9:
            raise ValueError("class priors must sum to 1")
        if np.any(self.variances <= 0.0):
            raise ValueError("class variances must be positive")

    def class_densities(self, x):
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        d = np.exp(-0.5 * (x[:, None] - self.means) ** 2 / self.variances)
        return d / np.sqrt(2.0 * np.pi * self.variances)

    def f_true(self, x):
        """Posterior class probabilities at each x; shape (N, K)."""
        w = self.class_densities(x) * self.priors
        tot = w.sum(axis=1, keepdims=True)
        if np.any(tot <= 0.0):
            raise ValueError("zero total density at query point")
        return w / tot

    def marginal_density(self, x):
        return (self.class_densities(x) * self.priors).sum(axis=1)

    def point_risk(self, hypothesis_probs, x):
        """Risk of predicting argmax(hypothesis) at x under the true posteriors."""
        f = self.f_true(x)
        pred = np.atleast_2d(hypothesis_probs).argmax(axis=1)
        return 1.0 - f[np.arange(len(f)), pred]

    def irreducible_risk(self, x):
        """min(1 - max f, max f) at each x."""
        fmax = self.f_true(x).max(axis=1)
        return np.minimum(1.0 - fmax, fmax)

    def bayes_error(self, lo=-12.0, hi=12.0):
        """Average risk of the Bayes-optimal rule, by numerical integration."""

        def integrand(x):
            f = self.f_true(np.array([x]))[0]
            return (1.0 - f.max()) * self.marginal_density(np.array([x]))[0]

        val, _ = integrate.quad(integrand, lo, hi, limit=200)
        return float(val)


def bayes_oracle(oracle: MixtureOracle, x):
    """(f_true row, point risk of the Bayes rule, irreducible risk) at x."""
    f = oracle.f_true(x)[0]
    risk = oracle.point_risk(f, x)[0]
    return f, float(risk), float(oracle.irreducible_risk(x)[0])


def risk_product_check(pi: float, pi_prime: float) -> bool:
    """Ordering consistency of min(1-p, p) and (1-p)p on [0.5, 1]."""
    if not (0.5 <= pi <= 1.0 and 0.5 <= pi_prime <= 1.0):
        raise ValueError("both arguments must lie in [0.5, 1]")
    antecedent = min(1.0 - pi, pi) >= min(1.0 - pi_prime, pi_prime)
    consequent = (1.0 - pi) * pi >= (1.0 - pi_prime) * pi_prime
    return (not antecedent) or consequent
