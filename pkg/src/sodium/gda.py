"""Gaussian discriminant analysis on latent vectors.

One Gaussian per class, fitted from empirical means and covariances in a
single pass, with trace-scaled diagonal shrinkage so degenerate classes
still yield a usable density. Densities are joint with the class prior.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SHRINKAGE_SCALE = 1e-3
SHRINKAGE_FLOOR = 1e-6  # keeps the all-identical-points case positive definite


@dataclass
class GdaModel:
    class_ids: tuple
    means: np.ndarray        # (K, d)
    covariances: np.ndarray  # (K, d, d), pre-shrinkage
    priors: np.ndarray       # (K,)
    shrinkage: np.ndarray    # (K,) epsilon added to each diagonal
    chol: np.ndarray         # (K, d, d) Cholesky factors of cov + eps*I
    log_det: np.ndarray      # (K,)

    @property
    def dim(self):
        return self.means.shape[1]

    def class_index(self, class_id):
        try:
            return self.class_ids.index(class_id)
        except ValueError:
            raise ValueError(f"unknown class {class_id}; fitted on {self.class_ids}") from None


def fit(samples, shrinkage=None) -> GdaModel:
    """Fit per-class Gaussians from an iterable of (vector, class) pairs.

    One accumulation pass collects counts, sums and outer-product sums;
    means and covariances (n-1 denominator) follow in closed form.
    ``shrinkage`` overrides the default trace-scaled epsilon.
    """
    counts, sums, outers, dim = {}, {}, {}, None
    for vec, label in samples:
        v = np.asarray(vec, dtype=np.float64)
        if dim is None:
            dim = v.shape[0]
        if label not in counts:
            counts[label] = 0
            sums[label] = np.zeros(dim)
            outers[label] = np.zeros((dim, dim))
        counts[label] += 1
        sums[label] += v
        outers[label] += np.outer(v, v)
    if not counts:
        raise ValueError("cannot fit on an empty sample set")
    for label, n in counts.items():
        if n < 2:
            raise ValueError(f"class {label} has {n} sample(s); need at least 2")

    class_ids = tuple(sorted(counts))
    total = sum(counts.values())
    k = len(class_ids)
    means = np.zeros((k, dim))
    covs = np.zeros((k, dim, dim))
    priors = np.zeros(k)
    eps = np.zeros(k)
    chol = np.zeros((k, dim, dim))
    log_det = np.zeros(k)
    for i, label in enumerate(class_ids):
        n = counts[label]
        mu = sums[label] / n
        cov = (outers[label] - n * np.outer(mu, mu)) / (n - 1)
        cov = 0.5 * (cov + cov.T)
        e = shrinkage if shrinkage is not None else \
            max(SHRINKAGE_SCALE * float(np.trace(cov)) / dim, SHRINKAGE_FLOOR)
        means[i], covs[i], priors[i], eps[i] = mu, cov, counts[label] / total, e
        chol[i] = np.linalg.cholesky(cov + e * np.eye(dim))
        log_det[i] = 2.0 * float(np.sum(np.log(np.diag(chol[i]))))
    return GdaModel(class_ids=class_ids, means=means, covariances=covs,
                    priors=priors, shrinkage=eps, chol=chol, log_det=log_det)


def log_density(model: GdaModel, vec, class_id) -> float:
    """log prior + log N(vec; mean, cov + eps*I), via the cached Cholesky factor."""
    i = model.class_index(class_id)
    d = model.dim
    diff = np.asarray(vec, dtype=np.float64) - model.means[i]
    z = np.linalg.solve(model.chol[i], diff)
    return float(np.log(model.priors[i])
                 - 0.5 * (d * math.log(2.0 * math.pi) + model.log_det[i] + z @ z))


def log_densities(model: GdaModel, vecs) -> np.ndarray:
    """Per-class joint log densities for a batch; shape (n, K)."""
    vecs = np.atleast_2d(np.asarray(vecs, dtype=np.float64))
    out = np.zeros((vecs.shape[0], len(model.class_ids)))
    d = model.dim
    const = d * math.log(2.0 * math.pi)
    for i in range(len(model.class_ids)):
        diff = vecs - model.means[i]
        z = np.linalg.solve(model.chol[i], diff.T)
        out[:, i] = np.log(model.priors[i]) - 0.5 * (const + model.log_det[i]
                                                     + np.sum(z * z, axis=0))
    return out


def max_log_density(model: GdaModel, vecs) -> np.ndarray:
    return np.max(log_densities(model, vecs), axis=1)


def screen(model: GdaModel, vec, threshold: float) -> bool:
    """True when every per-class joint density falls below the threshold.

    Comparison happens on the density scale; a log-space comparison against
    log(threshold) is equivalent.
    """
    if threshold <= 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    best = float(max_log_density(model, np.asarray(vec)[None, :])[0])
    return math.exp(best) < threshold


def screen_batch(model: GdaModel, vecs, threshold: float) -> np.ndarray:
    if threshold <= 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    return np.exp(max_log_density(model, vecs)) < threshold


def threshold_from_quantile(model: GdaModel, vecs, quantile: float = 0.005) -> float:
    """Low quantile of the training max-class densities, used as the screen threshold."""
    if not 0.0 < quantile < 1.0:
        raise ValueError(f"quantile must be in (0, 1), got {quantile}")
    dens = np.exp(max_log_density(model, vecs))
    return float(np.quantile(dens, quantile))
