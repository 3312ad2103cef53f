"""Independent reference implementations shared by the unit tests and the acceptance gate."""

import math
from collections import Counter
from itertools import permutations

import numpy as np
from scipy.stats import multivariate_normal

from tgmvae import model as M
from tgmvae.mixmath import kl_identity_gaussians
from tgmvae.model import ModelConfig

PARAM_GROUPS = {
    "encoder": ("enc_w1", "enc_b1", "enc_w2", "enc_b2", "enc_w3", "enc_b3"),
    "decoder": ("dec_w1", "dec_b1", "dec_w2", "dec_b2", "dec_w3", "dec_b3"),
    "heads": ("head_b_w", "head_b_b", "head_m_w", "head_m_b"),
    "means": ("mu",),
    "psi": ("psi_logits",),
}


def small_config(**kw):
    base = dict(input_dim=6, encoder_dims=(5, 4, 2), K=4, gamma=0.1, lam=3.0, sigma_x=0.7, alpha=1.5)
    base.update(kw)
    return ModelConfig(**base)


def random_params(config, seed, scale=0.5):
    rng = np.random.default_rng(seed)
    return {k: scale * rng.normal(size=s) for k, s in M.param_shapes(config).items()}


def softmax(a):
    e = np.exp(a - a.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def reference_loss(params, cfg, x, eps, n_total):
    """The bound written out directly in numpy, independent of the graph code."""
    h1 = np.tanh(x @ params["enc_w1"] + params["enc_b1"])
    h2 = np.tanh(h1 @ params["enc_w2"] + params["enc_b2"])
    mu_t = h2 @ params["enc_w3"] + params["enc_b3"]
    z = mu_t + eps
    g1 = np.tanh(z @ params["dec_w1"] + params["dec_b1"])
    g2 = np.tanh(g1 @ params["dec_w2"] + params["dec_b2"])
    out = g2 @ params["dec_w3"] + params["dec_b3"]
    if cfg.recon_loss == "bce":
        p = 1 / (1 + np.exp(-out))
        recon = -(x * np.log(p) + (1 - x) * np.log(1 - p)).sum(axis=1)
    else:
        recon = ((x - out) ** 2).sum(axis=1) / (2 * cfg.sigma_x**2)
    recon = recon * cfg.recon_weight
    q_m = softmax(h2 @ params["head_m_w"] + params["head_m_b"])
    psi = softmax(params["psi_logits"])[0]
    kl_gauss = np.array([sum(q_m[i, k] * kl_identity_gaussians(mu_t[i], params["mu"][k])
                             for k in range(cfg.K - 1)) for i in range(len(x))])
    kl_cat = (q_m * np.log(q_m / psi)).sum(axis=1)
    dir_prior = -(cfg.alpha - 1) * np.log(psi).sum()
    inlier = recon + kl_gauss + kl_cat
    if cfg.gamma == 0:
        total, kl_bern = inlier.mean(), 0.0
    else:
        q_b = softmax(h2 @ params["head_b_w"] + params["head_b_b"])
        ber = np.array([1 - cfg.gamma, cfg.gamma])
        if cfg.bern_kl == "sample":
            kl_bern = (q_b * np.log(q_b / ber)).sum(axis=1).mean()
        else:
            qbar = q_b.mean(axis=0)
            kl_bern = (qbar * np.log(qbar / ber)).sum()
        total = (q_b[:, 0] * inlier).mean() + cfg.lam * kl_bern
    total += dir_prior / n_total
    return dict(recon=recon.mean(), kl_gauss=kl_gauss.mean(), kl_cat=kl_cat.mean(),
                kl_bern=kl_bern, dir_prior=dir_prior, total=total)


def fd_group_errors(params, cfg, x, eps, h=1e-5):
    """Max abs deviation over max abs finite-difference gradient, per parameter group."""
    _, grads = M.elbo_loss_and_grads(params, cfg, x, eps)

    def f():
        return M.elbo_loss(params, cfg, x, eps).total

    errors = {}
    for group, names in PARAM_GROUPS.items():
        num, ana = [], []
        for name in names:
            p = params[name]
            for idx in np.ndindex(p.shape):
                orig = p[idx]
                p[idx] = orig + h
                up = f()
                p[idx] = orig - h
                down = f()
                p[idx] = orig
                num.append((up - down) / (2 * h))
                ana.append(grads[name][idx])
        num, ana = np.array(num), np.array(ana)
        errors[group] = np.abs(num - ana).max() / max(np.abs(num).max(), 1e-12)
    return errors


def mc_kl_gaussians(mu_a, mu_b, n, rng):
    z = mu_a + rng.standard_normal((n, len(mu_a)))
    log_ratio = multivariate_normal(mu_a).logpdf(z) - multivariate_normal(mu_b).logpdf(z)
    return log_ratio.mean(), log_ratio.std(ddof=1) / math.sqrt(n)


def mc_kl_categorical(q, p, n, rng):
    draws = rng.choice(len(q), size=n, p=q)
    log_ratio = np.log(q[draws]) - np.log(p[draws])
    return log_ratio.mean(), log_ratio.std(ddof=1) / math.sqrt(n)


def brute_force_frobenius(cost):
    n_pred, n_true = cost.shape
    best = None
    for perm in permutations(range(n_true), n_pred):
        total = sum(cost[i, perm[i]] for i in range(n_pred))
        if best is None or total < best[0] - 1e-12:
            best = (total, perm)
    return best


def brute_force_accuracy(pred, true, n_classes):
    majors = list(range(1, n_classes))
    best = 0.0
    for perm in permutations(majors):
        mapping = dict(zip(majors, perm))
        mapped = np.array([mapping.get(p, n_classes) for p in pred])
        best = max(best, float(np.mean(mapped == true)))
    return best


def majority_oracle(seq, w):
    out = []
    for i in range(len(seq) - w + 1):
        counts = Counter(seq[i : i + w])
        best = max(counts.values())
        tied = [s for s, c in counts.items() if c == best]
        centre = seq[i + w // 2]
        out.append(centre if centre in tied else min(tied))
    return out


def brute_force_dwell(seq):
    """Per-state and overall mean run length by walking the sequence."""
    runs = []
    start = 0
    for i in range(1, len(seq) + 1):
        if i == len(seq) or seq[i] != seq[start]:
            runs.append((seq[start], i - start))
            start = i
    per_state = {}
    for s, n in runs:
        per_state.setdefault(s, []).append(n)
    return {s: sum(v) / len(v) for s, v in per_state.items()}, sum(n for _, n in runs) / len(runs)


def brute_force_occupancy(seq):
    return {s: sum(1 for t in seq if t == s) / len(seq) for s in set(seq)}
