"""Synthetic dynamic-connectivity data and sliding-window correlations.

States are 1-based; ids ``1..n_major`` are the major states.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SELF_WEIGHT = 0.9
MAJOR_CONCENTRATION = 10.0
MINOR_CONCENTRATION = 1.0


@dataclass
class StateSequence:
    labels: np.ndarray  # int, values in 1..n_states
    n_major: int

    def __len__(self):
        return len(self.labels)


@dataclass
class CommunityMatrix:
    u: np.ndarray  # loading vector in {-1, 0, 1}^R

    @property
    def matrix(self) -> np.ndarray:
        return np.outer(self.u, self.u).astype(np.float64)


def sample_transition_matrix(n_states: int = 10, n_major: int = 5, seed: int = 0) -> np.ndarray:
    """Row i is ``0.9 e_i + 0.1 b_i`` with ``b_i ~ Dir(10,...,10, 1,...,1)`` (majors first)."""
    if not 1 <= n_major <= n_states:
        raise ValueError(f"need 1 <= n_major <= n_states, got {n_major}, {n_states}")
    rng = np.random.default_rng(seed)
    conc = np.array([MAJOR_CONCENTRATION] * n_major + [MINOR_CONCENTRATION] * (n_states - n_major))
    b = rng.dirichlet(conc, size=n_states)
    return SELF_WEIGHT * np.eye(n_states) + (1.0 - SELF_WEIGHT) * b


def sample_state_sequence(P, T: int, seed: int = 0, n_major: int | None = None) -> StateSequence:
    """Markov chain of length ``T`` started from a uniformly drawn state."""
    P = np.asarray(P, dtype=np.float64)
    if T < 1:
        raise ValueError("T must be at least 1")
    n = len(P)
    rng = np.random.default_rng(seed)
    cum = np.cumsum(P, axis=1)
    cum[:, -1] = 1.0
    draws = rng.random(T)
    labels = np.empty(T, dtype=np.int64)
    s = int(rng.integers(n))
    labels[0] = s
    for t in range(1, T):
        s = int(np.searchsorted(cum[s], draws[t], side="right"))
        labels[t] = s
    return StateSequence(labels + 1, n if n_major is None else n_major)


def make_community_matrices(n_states: int, n_roi: int, seed: int = 0) -> list[CommunityMatrix]:
    """One loading vector per state, entries uniform over {-1, 0, 1}.

    All-zero vectors and vectors equal (up to sign) to an earlier state's are
    redrawn so every state is distinguishable.
    """
    if n_roi < 2:
        raise ValueError("n_roi must be at least 2")
    if n_states > (3**n_roi - 1) // 2:
        raise ValueError("too many states for the number of ROIs")
    rng = np.random.default_rng(seed)
    seen: set[bytes] = set()
    out = []
    while len(out) < n_states:
        u = rng.integers(-1, 2, size=n_roi).astype(np.int8)
        if not u.any():
            continue
        key = u if u[np.flatnonzero(u)[0]] > 0 else -u
        if key.tobytes() in seen:
            continue
        seen.add(key.tobytes())
        out.append(CommunityMatrix(u.astype(np.float64)))
    return out


def synthesize_signals(seq: StateSequence, communities, noise_std: float = 0.1, seed: int = 0) -> np.ndarray:
    """``x_t = u_{s_t} * g_t + noise`` with scalar ``g_t ~ N(0, 1)``.

    The scalar factor samples ``N(0, u u^T)`` exactly even though that
    covariance is singular.
    """
    labels = np.asarray(seq.labels if isinstance(seq, StateSequence) else seq)
    U = np.array([c.u for c in communities])
    if labels.min() < 1 or labels.max() > len(U):
        raise ValueError("state ids not covered by the community matrices")
    rng = np.random.default_rng(seed)
    T = len(labels)
    factor = rng.standard_normal(T)
    noise = rng.standard_normal((T, U.shape[1])) * noise_std
    return U[labels - 1] * factor[:, None] + noise


def oas_intensity(S: np.ndarray, n: int) -> float:
    """Oracle-approximating shrinkage intensity for an MLE covariance ``S`` from ``n`` samples."""
    p = S.shape[0]
    tr = np.trace(S)
    tr2 = np.sum(S * S)
    num = (1.0 - 2.0 / p) * tr2 + tr**2
    den = (n + 1.0 - 2.0 / p) * (tr2 - tr**2 / p)
    if den <= 0:
        return 1.0
    return float(min(1.0, num / den))


def oas_shrink(S: np.ndarray, n: int) -> tuple[np.ndarray, float]:
    rho = oas_intensity(S, n)
    p = S.shape[0]
    target = np.trace(S) / p * np.eye(p)
    return (1.0 - rho) * S + rho * target, rho


def upper_triangle(mat: np.ndarray) -> np.ndarray:
    """Strict upper triangle, row-major. Works on a stack of matrices too."""
    R = mat.shape[-1]
    iu = np.triu_indices(R, k=1)
    return mat[..., iu[0], iu[1]]


def from_upper_triangle(vec, unit_diagonal: bool = True) -> np.ndarray:
    """Rebuild symmetric matrices from strict-upper-triangle vectors."""
    v = np.asarray(vec, dtype=np.float64)
    m = v.shape[-1]
    R = int(round((1 + np.sqrt(1 + 8 * m)) / 2))
    if R * (R - 1) // 2 != m:
        raise ValueError(f"{m} is not a triangular number")
    out = np.zeros(v.shape[:-1] + (R, R))
    iu = np.triu_indices(R, k=1)
    out[..., iu[0], iu[1]] = v
    out[..., iu[1], iu[0]] = v
    if unit_diagonal:
        out[..., np.arange(R), np.arange(R)] = 1.0
    return out


def _cov_to_corr(cov):
    sd = np.sqrt(np.clip(np.diagonal(cov, axis1=-2, axis2=-1), 0.0, None))
    denom = sd[..., :, None] * sd[..., None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        corr = np.where(denom > 0, cov / np.where(denom > 0, denom, 1.0), 0.0)
    return np.clip(corr, -1.0, 1.0)


def sliding_window_correlations(series, w: int = 11, shrinkage: bool = False) -> np.ndarray:
    """Correlation vectors for every length-``w`` window at stride 1.

    Returns a ``(T - w + 1, R(R-1)/2)`` array; row ``i`` covers time points
    ``i .. i + w - 1`` and its centre is ``i + w // 2``. Channels with zero
    variance inside a window get correlation 0.
    """
    x = np.asarray(series, dtype=np.float64)
    if w < 3:
        raise ValueError("window length must be at least 3")
    if x.ndim != 2 or len(x) < w:
        raise ValueError(f"series of shape {x.shape} is shorter than the window {w}")
    win = sliding_window_view(x, w, axis=0)  # (N, R, w)
    centered = win - win.mean(axis=2, keepdims=True)
    cov = np.einsum("nit,njt->nij", centered, centered) / w
    if shrinkage:
        for i in range(len(cov)):
            cov[i], _ = oas_shrink(cov[i], w)
    return upper_triangle(_cov_to_corr(cov))


def window_centers(T: int, w: int) -> np.ndarray:
    return np.arange(T - w + 1) + w // 2


def ground_truth_window_labels(seq, w: int) -> np.ndarray:
    """Majority state per window; ties go to the centre state if it is tied, else the lowest id."""
    labels = np.asarray(seq.labels if isinstance(seq, StateSequence) else seq)
    T = len(labels)
    if w < 3 or T < w:
        raise ValueError("need 3 <= w <= T")
    n_states = int(labels.max())
    onehot = np.zeros((T + 1, n_states), dtype=np.int64)
    onehot[np.arange(1, T + 1), labels - 1] = 1
    cum = onehot.cumsum(axis=0)
    counts = cum[w:] - cum[:-w]  # (T - w + 1, n_states)
    best = counts.max(axis=1, keepdims=True)
    out = np.argmax(counts, axis=1) + 1
    centre = labels[window_centers(T, w)]
    centre_tied = counts[np.arange(len(counts)), centre - 1] == best[:, 0]
    n_tied = (counts == best).sum(axis=1)
    fix = (n_tied > 1) & centre_tied
    out[fix] = centre[fix]
    return out
