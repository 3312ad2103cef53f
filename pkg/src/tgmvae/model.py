"""Truncated Gaussian-mixture VAE: parameters, networks, loss, training, assignment.

The encoder is a 3-layer dense trunk ``D_in -> h1 -> h2 -> d`` (tanh on the
two hidden layers, linear latent mean). Two softmax heads on the second
hidden layer give the inlier/outlier posterior ``q_b`` and the major-cluster
posterior ``q_m``. The decoder mirrors the encoder. The latent posterior has
identity covariance, so a sample is ``z = mu + eps``.

Class labels are 1-based: ``1..K-1`` are the major clusters and ``K`` is the
remainder (outlier) class.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import ndcore
from .mixmath import kmeans
from .ndcore import Graph, NonFiniteError

log = logging.getLogger(__name__)

RECON_MODES = ("gaussian", "bce")
BERN_KL_MODES = ("batch", "sample")
KMEANS_RESTARTS = 10
HEAD_WARMUP_EPOCHS = 5

ModelParams = dict  # name -> float64 ndarray


class ConfigError(ValueError):
    pass


class TrainingAborted(NonFiniteError):
    def __init__(self, msg, epoch, batch):
        super().__init__(msg)
        self.epoch = epoch
        self.batch = batch


def leading_power_of_two(n: int) -> int:
    """Largest power of two strictly smaller than ``n``."""
    if n < 2:
        raise ConfigError(f"input dimension {n} too small")
    return 1 << ((n - 1).bit_length() - 1)


@dataclass
class ModelConfig:
    input_dim: int = 105
    encoder_dims: tuple | None = None  # None: (leading power of two, 16, 3)
    K: int = 6
    gamma: float = 0.075
    lam: float = 200.0
    sigma_x: float = 0.5
    alpha: float = 1.0
    beta: float = 1.1
    recon_loss: str = "gaussian"
    bern_kl: str = "batch"
    epochs: int = 100
    batch_size: int = 256
    seed: int = 0
    pretrain_epochs: int = 20
    learning_rate: float = 1e-3
    recon_weight: float = 1.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.K < 2:
            raise ConfigError("K must be at least 2")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.lam <= 0 or self.sigma_x <= 0:
            raise ConfigError("lam and sigma_x must be positive")
        if self.alpha <= 0 or self.beta <= 0:
            raise ConfigError("Dirichlet concentrations must be positive")
        if self.recon_loss not in RECON_MODES:
            raise ConfigError(f"recon_loss must be one of {RECON_MODES}")
        if self.bern_kl not in BERN_KL_MODES:
            raise ConfigError(f"bern_kl must be one of {BERN_KL_MODES}")
        if self.input_dim < 1:
            raise ConfigError("input_dim must be positive")
        if self.encoder_dims is not None:
            dims = tuple(int(v) for v in self.encoder_dims)
            if len(dims) != 3 or min(dims) < 1:
                raise ConfigError(f"encoder_dims must be three positive ints, got {self.encoder_dims}")
            self.encoder_dims = dims
        if self.epochs < 0 or self.pretrain_epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs, pretrain_epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not self.recon_weight > 0:
            raise ConfigError("recon_weight must be positive")

    @property
    def dims(self) -> tuple[int, int, int]:
        if self.encoder_dims is not None:
            return tuple(self.encoder_dims)
        return (leading_power_of_two(self.input_dim), 16, 3)

    @property
    def latent_dim(self) -> int:
        return self.dims[2]

    @property
    def n_major(self) -> int:
        return self.K - 1

    def to_dict(self) -> dict:
        return asdict(self)


CONFIG_FIELDS = tuple(f.name for f in fields(ModelConfig))


@dataclass
class PosteriorOutput:
    mu: np.ndarray  # (n, d) latent mean
    q_b: np.ndarray  # (n, 2) inlier, outlier
    q_m: np.ndarray  # (n, K-1)
    q_c: np.ndarray  # (n, K)


@dataclass
class LossBreakdown:
    recon: float
    kl_gauss: float
    kl_cat: float
    kl_bern: float
    dir_prior: float
    total: float

    FIELDS = ("recon", "kl_gauss", "kl_cat", "kl_bern", "dir_prior", "total")


@dataclass
class Normalizer:
    """Per-dimension min-max map onto the unit cube, fitted on training data."""

    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def fit(cls, data) -> Normalizer:
        x = np.asarray(data, dtype=np.float64)
        return cls(x.min(axis=0), x.max(axis=0))

    def transform(self, data) -> np.ndarray:
        x = np.asarray(data, dtype=np.float64)
        span = self.hi - self.lo
        safe = np.where(span > 0, span, 1.0)
        return np.clip((x - self.lo) / safe, 0.0, 1.0) * (span > 0)


# -- parameters ---------------------------------------------------------------


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, int]]:
    h1, h2, d = config.dims
    D = config.input_dim
    return {
        "enc_w1": (D, h1), "enc_b1": (1, h1),
        "enc_w2": (h1, h2), "enc_b2": (1, h2),
        "enc_w3": (h2, d), "enc_b3": (1, d),
        "dec_w1": (d, h2), "dec_b1": (1, h2),
        "dec_w2": (h2, h1), "dec_b2": (1, h1),
        "dec_w3": (h1, D), "dec_b3": (1, D),
        "head_b_w": (h2, 2), "head_b_b": (1, 2),
        "head_m_w": (h2, config.n_major), "head_m_b": (1, config.n_major),
        "mu": (config.n_major, d),
        "psi_logits": (1, config.n_major),
    }


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases, ``mu ~ 0.1 N(0, I)``, uniform psi."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(("_b1", "_b2", "_b3", "_b_b", "_m_b")) or name == "psi_logits":
            params[name] = np.zeros(shape)
        elif name == "mu":
            params[name] = 0.1 * rng.standard_normal(shape)
        else:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-limit, limit, size=shape)
    return params


def assemble_pi(psi, gamma: float) -> np.ndarray:
    """Class prior over ``K`` classes from the major-cluster simplex and remainder share."""
    psi = np.asarray(psi, dtype=np.float64)
    return np.append(psi * (1.0 - gamma), gamma)


def psi(params: ModelParams) -> np.ndarray:
    return ndcore.softmax(params["psi_logits"])[0]


# -- inference (plain numpy) --------------------------------------------------


def _trunk(params, x):
    h1 = np.tanh(x @ params["enc_w1"] + params["enc_b1"])
    h2 = np.tanh(h1 @ params["enc_w2"] + params["enc_b2"])
    return h2, h2 @ params["enc_w3"] + params["enc_b3"]


def encode(params: ModelParams, config: ModelConfig, x) -> PosteriorOutput:
    x = ndcore.as_matrix(x)
    if x.shape[1] != config.input_dim:
        raise ndcore.ShapeError(f"expected input dimension {config.input_dim}, got {x.shape[1]}")
    h2, mu = _trunk(params, x)
    q_m = ndcore.softmax(h2 @ params["head_m_w"] + params["head_m_b"])
    if config.gamma > 0:
        q_b = ndcore.softmax(h2 @ params["head_b_w"] + params["head_b_b"])
    else:
        q_b = np.tile([1.0, 0.0], (len(x), 1))
    q_c = np.hstack([q_m * q_b[:, :1], q_b[:, 1:]])
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(q_c))):
        raise NonFiniteError("non-finite encoder activations")
    return PosteriorOutput(mu, q_b, q_m, q_c)


def reparameterize(mu, eps) -> np.ndarray:
    mu = np.asarray(mu, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if mu.shape != eps.shape:
        raise ndcore.ShapeError(f"mu {mu.shape} vs eps {eps.shape}")
    return mu + eps


def decode(params: ModelParams, config: ModelConfig, z) -> np.ndarray:
    z = ndcore.as_matrix(z)
    g1 = np.tanh(z @ params["dec_w1"] + params["dec_b1"])
    g2 = np.tanh(g1 @ params["dec_w2"] + params["dec_b2"])
    out = g2 @ params["dec_w3"] + params["dec_b3"]
    if config.recon_loss == "bce":
        return 1.0 / (1.0 + np.exp(-out))
    return out


def posterior_assign(params: ModelParams, config: ModelConfig, x) -> tuple[np.ndarray, np.ndarray]:
    """Labels in ``1..K`` (argmax of ``q_c``, lowest index on ties) and ``q_c``."""
    q_c = encode(params, config, x).q_c
    return np.argmax(q_c, axis=1) + 1, q_c


def assign_from_heads(q_b, q_m) -> np.ndarray:
    q_b = ndcore.as_matrix(q_b)
    q_m = ndcore.as_matrix(q_m)
    q_c = np.hstack([q_m * q_b[:, :1], q_b[:, 1:]])
    return np.argmax(q_c, axis=1) + 1


# -- loss graph ---------------------------------------------------------------


class LossGraph:
    """The negated bound as an ``ndcore`` graph, built once per configuration.

    Node ids for every breakdown component are kept so one forward pass
    yields both the total and its parts.
    """

    def __init__(self, config: ModelConfig, n_total: int):
        self.config = config
        g = self.graph = Graph()
        params = {name: g.param(name) for name in param_shapes(config)}
        x = g.input("x")
        eps = g.input("eps")

        h1 = g.tanh(g.affine(x, params["enc_w1"], params["enc_b1"]))
        h2 = g.tanh(g.affine(h1, params["enc_w2"], params["enc_b2"]))
        mu_t = g.affine(h2, params["enc_w3"], params["enc_b3"])
        z = g.add(mu_t, eps)
        d1 = g.tanh(g.affine(z, params["dec_w1"], params["dec_b1"]))
        d2 = g.tanh(g.affine(d1, params["dec_w2"], params["dec_b2"]))
        out = g.affine(d2, params["dec_w3"], params["dec_b3"])
        if config.recon_loss == "bce":
            recon_i = g.sum(g.bce_logits(out, x), axis=1)
        else:
            recon_i = g.scale(g.sum(g.square(g.sub(x, out)), axis=1), 0.5 / config.sigma_x**2)
        if config.recon_weight != 1.0:
            recon_i = g.scale(recon_i, config.recon_weight)

        logits_m = g.affine(h2, params["head_m_w"], params["head_m_b"])
        q_m = g.softmax(logits_m)
        log_q_m = g.log_softmax(logits_m)
        log_psi = g.log_softmax(params["psi_logits"])
        kl_gauss_i = g.sum(g.mul(q_m, g.scale(g.sqdist(mu_t, params["mu"]), 0.5)), axis=1)
        kl_cat_i = g.sum(g.mul(q_m, g.sub(log_q_m, log_psi)), axis=1)
        inlier_loss_i = g.add(g.add(recon_i, kl_gauss_i), kl_cat_i)

        # unnormalised -log Dir(psi | alpha): vanishes at alpha = 1
        dir_prior = g.scale(g.sum(log_psi), -(config.alpha - 1.0))

        if config.gamma > 0:
            logits_b = g.affine(h2, params["head_b_w"], params["head_b_b"])
            q_b = g.softmax(logits_b)
            log_ber = g.const([[math.log1p(-config.gamma), math.log(config.gamma)]])
            if config.bern_kl == "sample":
                kl_bern = g.mean(g.sum(g.mul(q_b, g.sub(g.log_softmax(logits_b), log_ber)), axis=1))
            else:
                q_bar = g.mean(q_b, axis=0)
                kl_bern = g.sum(g.mul(q_bar, g.sub(g.log(q_bar), log_ber)))
            bound = g.add(
                g.mean(g.mul(g.column(q_b, 0), inlier_loss_i)),
                g.scale(kl_bern, config.lam),
            )
        else:
            kl_bern = g.const(0.0)
            bound = g.mean(inlier_loss_i)
        self.total = g.add(bound, g.scale(dir_prior, 1.0 / n_total))
        self.parts = {
            "recon": g.mean(recon_i),
            "kl_gauss": g.mean(kl_gauss_i),
            "kl_cat": g.mean(kl_cat_i),
            "kl_bern": kl_bern,
            "dir_prior": dir_prior,
            "total": self.total,
        }
        self.kl_gauss_i = kl_gauss_i
        self.recon_i = recon_i

    def evaluate(self, params, x, eps, grads=True):
        bindings = dict(params)
        bindings["x"] = x
        bindings["eps"] = eps
        self.graph.forward(bindings)
        breakdown = LossBreakdown(**{k: float(self.graph.value(n)[0, 0]) for k, n in self.parts.items()})
        return breakdown, (self.graph.backward(self.total) if grads else None)


class AutoencoderGraph:
    """Reconstruction-only graph on the deterministic latent mean; used for pretraining."""

    def __init__(self, config: ModelConfig):
        g = self.graph = Graph()
        p = {name: g.param(name) for name in param_shapes(config)}
        x = g.input("x")
        h1 = g.tanh(g.affine(x, p["enc_w1"], p["enc_b1"]))
        h2 = g.tanh(g.affine(h1, p["enc_w2"], p["enc_b2"]))
        mu_t = g.affine(h2, p["enc_w3"], p["enc_b3"])
        d1 = g.tanh(g.affine(mu_t, p["dec_w1"], p["dec_b1"]))
        d2 = g.tanh(g.affine(d1, p["dec_w2"], p["dec_b2"]))
        out = g.affine(d2, p["dec_w3"], p["dec_b3"])
        if config.recon_loss == "bce":
            recon_i = g.sum(g.bce_logits(out, x), axis=1)
        else:
            recon_i = g.scale(g.sum(g.square(g.sub(x, out)), axis=1), 0.5 / config.sigma_x**2)
        if config.recon_weight != 1.0:
            recon_i = g.scale(recon_i, config.recon_weight)
        self.total = g.mean(recon_i)

    def evaluate(self, params, x):
        bindings = dict(params)
        bindings["x"] = x
        self.graph.forward(bindings)
        return float(self.graph.value(self.total)[0, 0]), self.graph.backward(self.total)


class HeadWarmupGraph:
    """Cross-entropy of the cluster head against fixed k-means labels."""

    def __init__(self, config: ModelConfig):
        g = self.graph = Graph()
        p = {name: g.param(name) for name in param_shapes(config)}
        x = g.input("x")
        target = g.input("target")
        h1 = g.tanh(g.affine(x, p["enc_w1"], p["enc_b1"]))
        h2 = g.tanh(g.affine(h1, p["enc_w2"], p["enc_b2"]))
        log_q = g.log_softmax(g.affine(h2, p["head_m_w"], p["head_m_b"]))
        self.total = g.scale(g.mean(g.sum(g.mul(target, log_q), axis=1)), -1.0)

    def evaluate(self, params, x, target):
        bindings = dict(params)
        bindings["x"] = x
        bindings["target"] = target
        self.graph.forward(bindings)
        grads = self.graph.backward(self.total)
        return float(self.graph.value(self.total)[0, 0]), {k: grads[k] for k in HEAD_M}


HEAD_M = ("head_m_w", "head_m_b")


def elbo_loss(params: ModelParams, config: ModelConfig, batch, eps, n_total: int | None = None) -> LossBreakdown:
    """Loss breakdown for one batch with fixed noise draws ``eps`` (one row per sample)."""
    batch = ndcore.as_matrix(batch)
    if len(batch) == 0:
        raise ValueError("empty batch")
    graph = LossGraph(config, n_total or len(batch))
    breakdown, _ = graph.evaluate(params, batch, ndcore.as_matrix(eps), grads=False)
    return breakdown


def elbo_loss_and_grads(params, config, batch, eps, n_total=None):
    graph = LossGraph(config, n_total or len(batch))
    return graph.evaluate(params, ndcore.as_matrix(batch), ndcore.as_matrix(eps))


# -- training -----------------------------------------------------------------


@dataclass
class TrainResult:
    params: ModelParams
    history: list[dict] = field(default_factory=list)
    steps: int = 0


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _check_finite(value, epoch, batch):
    if not math.isfinite(value):
        raise TrainingAborted(f"non-finite loss at epoch {epoch}, batch {batch}", epoch, batch)


def train(data, config: ModelConfig, progress=None) -> TrainResult:
    """Pretrain a plain autoencoder, seed cluster means by k-means, then minimise the bound.

    ``data`` must already be normalised to the unit cube. ``progress`` is an
    optional callable receiving each history row.
    """
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != config.input_dim:
        raise ndcore.ShapeError(f"data shape {x.shape} does not match input_dim {config.input_dim}")
    n = len(x)
    rng = np.random.default_rng(config.seed)
    params = init_params(config, config.seed)
    result = TrainResult(params)
    if config.epochs == 0 and config.pretrain_epochs == 0:
        return result

    if config.pretrain_epochs:
        ae = AutoencoderGraph(config)
        state = ndcore.AdamState(lr=config.learning_rate)
        for epoch in range(config.pretrain_epochs):
            total = 0.0
            for b, idx in enumerate(_batches(n, config.batch_size, rng)):
                loss, grads = ae.evaluate(params, x[idx])
                _check_finite(loss, epoch, b)
                total += loss * len(idx)
                params, state = ndcore.adam_step(params, grads, state)
                result.steps += 1
            row = {"phase": "pretrain", "epoch": epoch, "recon": total / n}
            row.update({k: 0.0 for k in LossBreakdown.FIELDS if k not in row})
            row["total"] = row["recon"]
            result.history.append(row)
            if progress:
                progress(row, params)
        latent = encode(params, config, x).mu
        n_distinct = len(np.unique(latent, axis=0))
        if n_distinct >= config.n_major:
            centers, labels = kmeans(latent, config.n_major, seed=config.seed, n_init=KMEANS_RESTARTS)
            params["mu"] = centers
            if HEAD_WARMUP_EPOCHS:
                onehot = np.eye(config.n_major)[labels]
                warm = HeadWarmupGraph(config)
                hstate = ndcore.AdamState(lr=config.learning_rate)
                for _ in range(HEAD_WARMUP_EPOCHS):
                    for idx in _batches(n, config.batch_size, rng):
                        _, grads = warm.evaluate(params, x[idx], onehot[idx])
                        head = {k: params[k] for k in HEAD_M}
                        head, hstate = ndcore.adam_step(head, grads, hstate)
                        params.update(head)

    loss_graph = LossGraph(config, n)
    state = ndcore.AdamState(lr=config.learning_rate)
    d = config.latent_dim
    for epoch in range(config.epochs):
        sums = dict.fromkeys(LossBreakdown.FIELDS, 0.0)
        for b, idx in enumerate(_batches(n, config.batch_size, rng)):
            eps = rng.standard_normal((len(idx), d))
            parts, grads = loss_graph.evaluate(params, x[idx], eps)
            _check_finite(parts.total, epoch, b)
            for k in sums:
                sums[k] += getattr(parts, k) * len(idx)
            try:
                params, state = ndcore.adam_step(params, grads, state)
            except NonFiniteError as exc:
                raise TrainingAborted(f"{exc} at epoch {epoch}, batch {b}", epoch, b) from exc
            result.steps += 1
        row = {"phase": "train", "epoch": epoch}
        row.update({k: v / n for k, v in sums.items()})
        result.history.append(row)
        log.debug("epoch %d total %.6f", epoch, row["total"])
        if progress:
            progress(row, params)
    result.params = params
    return result
