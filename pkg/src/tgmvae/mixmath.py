"""Closed-form probability kernels, k-means and a diagonal-covariance GMM."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

VARIANCE_FLOOR = 1e-6
MIN_WEIGHT = 1e-8
MAX_RESEEDS = 3
COVARIANCE_TYPES = ("diag", "spherical")


class MixtureError(ValueError):
    """Invalid input to a mixture routine or an unrecoverable fit."""


@dataclass(frozen=True)
class DirichletPrior:
    """Concentrations ``(alpha, ..., alpha, beta)``: alpha for each major cluster, beta for the remainder."""

    alpha: float = 1.0
    beta: float = 1.1

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise MixtureError("Dirichlet concentrations must be positive")

    def concentrations(self, k: int) -> np.ndarray:
        return np.array([self.alpha] * (k - 1) + [self.beta], dtype=np.float64)


@dataclass
class DiagGmm:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, d)
    variances: np.ndarray  # (K, d)
    log_likelihood: list[float]

    @property
    def K(self) -> int:
        return len(self.weights)


def kl_identity_gaussians(mu_a, mu_b) -> float:
    """KL between two unit-covariance Gaussians, ``0.5 * |mu_a - mu_b|^2``."""
    a = np.asarray(mu_a, dtype=np.float64)
    b = np.asarray(mu_b, dtype=np.float64)
    if a.shape != b.shape:
        raise MixtureError(f"dimension mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return 0.5 * float(d @ d)


def kl_categorical(q, p) -> float:
    """``sum_i q_i log(q_i / p_i)`` with ``0 log 0 = 0``."""
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if q.shape != p.shape:
        raise MixtureError(f"length mismatch: {q.shape} vs {p.shape}")
    nz = q > 0
    if np.any(p[nz] <= 0):
        raise MixtureError("KL is infinite: p has a zero where q does not")
    return float(np.sum(q[nz] * (np.log(q[nz]) - np.log(p[nz]))))


def dirichlet_log_density(pi, prior: DirichletPrior) -> float:
    """Log density of ``Dir(alpha, ..., alpha, beta)`` at a point of the simplex."""
    pi = np.asarray(pi, dtype=np.float64)
    if np.any(pi <= 0) or abs(pi.sum() - 1.0) > 1e-9:
        raise MixtureError("pi must be strictly positive and sum to 1")
    conc = prior.concentrations(len(pi))
    return float(gammaln(conc.sum()) - gammaln(conc).sum() + np.sum((conc - 1.0) * np.log(pi)))


def _pairwise_sq(points, centers):
    return (
        (points**2).sum(axis=1)[:, None]
        - 2.0 * points @ centers.T
        + (centers**2).sum(axis=1)[None, :]
    ).clip(min=0.0)


def kmeans_pp_init(points, k, rng) -> np.ndarray:
    n = len(points)
    centers = [points[rng.integers(n)]]
    d2 = _pairwise_sq(points, centers[0][None, :])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers.append(points[idx])
        d2 = np.minimum(d2, _pairwise_sq(points, points[idx][None, :])[:, 0])
    return np.array(centers)


def kmeans(points, k: int, seed: int = 0, max_iter: int = 100, n_init: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with k-means++ seeding.

    Returns ``(centers, labels)`` with 0-based labels. With ``n_init > 1``
    the lowest-inertia of that many seeded runs is kept.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise MixtureError("kmeans needs a non-empty 2-D point array")
    if k < 1 or k > len(np.unique(x, axis=0)):
        raise MixtureError(f"k={k} exceeds the number of distinct points")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        centers, labels = _lloyd(x, k, rng, max_iter)
        inertia = float(((x - centers[labels]) ** 2).sum())
        if best is None or inertia < best[0]:
            best = (inertia, centers, labels)
    return best[1], best[2]


def _lloyd(x, k, rng, max_iter):
    centers = kmeans_pp_init(x, k, rng)
    labels = None
    for _ in range(max_iter):
        new_labels = np.argmin(_pairwise_sq(x, centers), axis=1)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            members = x[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
            else:
                # empty cluster: move it to the point farthest from its center
                far = np.argmax(_pairwise_sq(x, centers)[np.arange(len(x)), labels])
                centers[j] = x[far]
    labels = np.argmin(_pairwise_sq(x, centers), axis=1)
    return centers, labels


def _log_joint(x, weights, means, variances):
    """``log w_k + log N(x | mean_k, diag(var_k))`` for every point and component."""
    inv = 1.0 / variances
    quad = (x**2) @ inv.T - 2.0 * x @ (means * inv).T + ((means**2) * inv).sum(axis=1)
    log_det = np.log(variances).sum(axis=1)
    d = x.shape[1]
    return np.log(weights) - 0.5 * (d * math.log(2 * math.pi) + log_det + quad)


def _m_step(x, resp, nk, var_floor, covariance):
    means = (resp.T @ x) / nk[:, None]
    variances = np.empty_like(means)
    for k in range(len(nk)):
        c = x - means[k]
        variances[k] = (resp[:, k] @ (c * c)) / nk[k]
    if covariance == "spherical":
        variances[:] = variances.mean(axis=1, keepdims=True)
    return means, np.maximum(variances, var_floor)


def gmm_em_fit(
    points,
    K: int,
    seed: int = 0,
    max_iter: int = 200,
    tol: float = 1e-6,
    var_floor: float = VARIANCE_FLOOR,
    covariance: str = "diag",
) -> DiagGmm:
    """Fit a diagonal-covariance Gaussian mixture by EM, initialised from k-means.

    ``covariance="spherical"`` ties the variances of each component across
    dimensions (one scalar per component, stored broadcast to ``d``).
    Iterates until the average log-likelihood gain drops below ``tol``.
    A component whose weight falls under 1e-8 is re-seeded from a random
    point; after three re-seeds the fit fails.
    """
    x = np.asarray(points, dtype=np.float64)
    if K < 1:
        raise MixtureError("K must be at least 1")
    if covariance not in COVARIANCE_TYPES:
        raise MixtureError(f"covariance must be one of {COVARIANCE_TYPES}")
    if x.ndim != 2 or len(x) == 0:
        raise MixtureError("need a non-empty 2-D point array")
    n, d = x.shape
    rng = np.random.default_rng(seed)
    centers, labels = kmeans(x, K, seed=seed)
    global_var = np.maximum(x.var(axis=0), var_floor)
    means = centers.copy()
    variances = np.empty((K, d))
    weights = np.empty(K)
    for k in range(K):
        members = x[labels == k]
        weights[k] = max(len(members), 1) / n
        variances[k] = members.var(axis=0) if len(members) > 1 else global_var
    if covariance == "spherical":
        variances[:] = variances.mean(axis=1, keepdims=True)
    variances = np.maximum(variances, var_floor)
    weights /= weights.sum()

    history: list[float] = []
    reseeds = 0
    for _ in range(max_iter):
        lj = _log_joint(x, weights, means, variances)
        lse = logsumexp(lj, axis=1, keepdims=True)
        ll = float(lse.mean())
        if history and ll - history[-1] < tol:
            history.append(ll)
            break
        history.append(ll)
        resp = np.exp(lj - lse)
        nk = resp.sum(axis=0)
        weights = nk / n
        collapsed = np.flatnonzero(weights < MIN_WEIGHT)
        if len(collapsed):
            reseeds += 1
            if reseeds > MAX_RESEEDS:
                raise MixtureError("GMM component collapsed repeatedly")
            means, variances = _m_step(x, resp, np.maximum(nk, 1e-300), var_floor, covariance)
            for k in collapsed:
                means[k] = x[rng.integers(n)]
                variances[k] = global_var.mean() if covariance == "spherical" else global_var
                weights[k] = 1.0 / n
            weights /= weights.sum()
            history.clear()
            continue
        means, variances = _m_step(x, resp, nk, var_floor, covariance)
    return DiagGmm(weights, means, variances, history)


def gmm_predict(model: DiagGmm, points) -> np.ndarray:
    """Posterior component probabilities; one simplex row per point."""
    x = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if x.shape[1] != model.means.shape[1]:
        raise MixtureError(f"point dimension {x.shape[1]} != model dimension {model.means.shape[1]}")
    lj = _log_joint(x, model.weights, model.means, model.variances)
    return np.exp(lj - logsumexp(lj, axis=1, keepdims=True))
