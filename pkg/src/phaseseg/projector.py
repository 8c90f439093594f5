"""Frame-feature projection head, prototype classifier and pseudo-label training."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import sot
from . import tape as ad
from .clustering import init_prototypes
from .pose_io import sample_bins

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class ProjectorConfig:
    input_dim: int = 64
    hidden_dim: int = 64
    latent_dim: int = 40
    num_classes: int = 4
    temperature: float = 0.1
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 30
    n_bins: int = 5
    batch_videos: int = 2
    subset_size: int = 2048
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.num_classes < 1 or self.n_bins < 1:
            raise ValueError("num_classes and n_bins must be >= 1")

    def to_dict(self):
        return asdict(self)


@dataclass
class ProjectorParams:
    weights: dict  # w1, b1, w2, b2, prototypes
    temperature: float = 0.1

    @property
    def prototypes(self):
        return self.weights["prototypes"]


@dataclass
class FitResult:
    params: ProjectorParams
    log: list = field(default_factory=list)


def init_mlp(cfg: ProjectorConfig, seed: int | None = None) -> dict:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    return {
        "w1": rng.normal(0, np.sqrt(2.0 / cfg.input_dim), (cfg.input_dim, cfg.hidden_dim)),
        "b1": np.zeros(cfg.hidden_dim),
        "w2": rng.normal(0, np.sqrt(1.0 / cfg.hidden_dim), (cfg.hidden_dim, cfg.latent_dim)),
        "b2": np.zeros(cfg.latent_dim),
    }


def project_nodes(x, w):
    h = ad.relu(x @ w["w1"] + w["b1"])
    return h @ w["w2"] + w["b2"]


def classify_nodes(z, prototypes, temperature):
    zn = z / ad.sqrt((z * z).sum(axis=-1, keepdims=True))
    an = prototypes / ad.sqrt((prototypes * prototypes).sum(axis=-1, keepdims=True))
    return ad.softmax(zn @ an.T * (1.0 / temperature))


def project(features: np.ndarray, params: ProjectorParams | dict) -> np.ndarray:
    w = params.weights if isinstance(params, ProjectorParams) else params
    features = np.asarray(features, dtype=np.float64)
    if features.shape[-1] != w["w1"].shape[0]:
        raise ad.ShapeError(f"features have width {features.shape[-1]}, projector expects {w['w1'].shape[0]}")
    return np.maximum(features @ w["w1"] + w["b1"], 0.0) @ w["w2"] + w["b2"]


def classify(x: np.ndarray, params: ProjectorParams) -> np.ndarray:
    """Softmax over classes of cosine similarity to each prototype / temperature."""
    if params.temperature <= 0:
        raise ValueError("temperature must be positive")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    A = params.prototypes
    xn = np.linalg.norm(x, axis=-1, keepdims=True)
    an = np.linalg.norm(A, axis=-1, keepdims=True)
    if np.any(xn == 0) or np.any(an == 0):
        raise ValueError("cosine similarity undefined for zero-norm vectors")
    logits = (x / xn) @ (A / an).T / params.temperature
    logits -= logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    out = e / e.sum(axis=-1, keepdims=True)
    return out[0] if single else out


def loss_pseudo(probabilities, pseudo):
    """Cross-entropy of predictions against soft targets, summed over batch, frames, classes."""
    if isinstance(probabilities, ad.Node):
        pseudo = np.asarray(pseudo, dtype=np.float64)
        if np.any(pseudo < 0):
            raise ValueError("pseudo-labels must be nonnegative")
        return -(ad.log(probabilities, floor=LOG_FLOOR) * probabilities.tape.const(pseudo)).sum()
    probs = [np.asarray(p, dtype=np.float64) for p in _batch(probabilities)]
    targets = [np.asarray(p, dtype=np.float64) for p in _batch(pseudo)]
    total = 0.0
    for f, P in zip(probs, targets):
        if np.any(P < 0):
            raise ValueError("pseudo-labels must be nonnegative")
        total -= float(np.sum(P * np.log(np.maximum(f, LOG_FLOOR))))
    return total


def _batch(x):
    if isinstance(x, np.ndarray) and x.ndim == 2:
        return [x]
    return list(x)


def check_prototypes(A: np.ndarray, tol: float = 1e-9) -> None:
    norms = np.linalg.norm(A, axis=1)
    if not np.all(np.isfinite(A)) or np.any(norms == 0):
        raise FloatingPointError("prototypes contain non-finite or zero-norm rows")
    An = A / norms[:, None]
    cos = An @ An.T
    np.fill_diagonal(cos, -np.inf)
    if np.max(cos) > 1 - tol:
        i, j = np.unravel_index(np.argmax(cos), cos.shape)
        raise FloatingPointError(f"prototypes {i} and {j} collapsed (cosine {cos[i, j]:.12f})")


def batch_loss(weights: dict, samples, targets, temperature: float):
    """Pseudo-label loss and gradients over a list of (features, target) pairs."""
    t = ad.Tape()
    leaves = {k: t.leaf(v, name=k) for k, v in weights.items()}
    loss = None
    for x, P in zip(samples, targets):
        f = classify_nodes(project_nodes(t.const(x), leaves), leaves["prototypes"], temperature)
        term = loss_pseudo(f, P)
        loss = term if loss is None else loss + term
    t.backward(loss)
    return float(loss.value), {k: n.grad for k, n in leaves.items()}


def _as_array(f):
    return np.asarray(getattr(f, "features", f), dtype=np.float64)


def initial_params(features, cfg: ProjectorConfig) -> ProjectorParams:
    weights = init_mlp(cfg)
    projected = [project(_as_array(f), weights) for f in features]
    weights["prototypes"] = init_prototypes(projected, cfg.num_classes, cfg.subset_size, cfg.seed)
    return ProjectorParams(weights, cfg.temperature)


def fit(features, cfg: ProjectorConfig, sot_cfg: sot.SOTConfig = sot.SOTConfig(),
        params: ProjectorParams | None = None) -> FitResult:
    """Alternate OT pseudo-labelling and Adam steps on the projector and prototypes.

    ``features`` is a list of per-video T x H arrays from the frozen encoder.
    """
    features = [_as_array(f) for f in features]
    if params is None:
        params = initial_params(features, cfg)
    weights = {k: v.copy() for k, v in params.weights.items()}
    check_prototypes(weights["prototypes"])
    adam = ad.AdamState()
    history = []
    for epoch in range(1, cfg.epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(features))
        ot_total, loss_total, n = 0.0, 0.0, 0
        for lo in range(0, len(order), cfg.batch_videos):
            samples, targets = [], []
            for v in order[lo:lo + cfg.batch_videos]:
                feats = features[v]
                idx = sample_bins(len(feats), min(cfg.n_bins, len(feats)), rng)
                x = feats[idx]
                bundle = sot.build_costs(project(x, weights), weights["prototypes"], sot_cfg)
                res = sot.solve(bundle, sot_cfg)
                ot_total += res.trace[-1]
                samples.append(x)
                targets.append(sot.pseudo_labels(res.plan))
            loss, grads = batch_loss(weights, samples, targets, cfg.temperature)
            weights, adam = ad.adam_step(weights, grads, adam, cfg.learning_rate, cfg.weight_decay)
            check_prototypes(weights["prototypes"])
            loss_total += loss
            n += len(samples)
        history.append({"epoch": epoch, "ot_objective": ot_total / n, "loss": loss_total / n})
        log.info("fit epoch %d ot=%.6f loss=%.6f", epoch, ot_total / n, loss_total / n)
    return FitResult(ProjectorParams(weights, cfg.temperature), history)


def segment(features: np.ndarray, params: ProjectorParams, sot_cfg: sot.SOTConfig = sot.SOTConfig()):
    """Project one video's features, solve the transport problem, decode labels.

    Returns (labels, plan).
    """
    z = project(_as_array(features), params)
    res = sot.solve(sot.build_costs(z, params.prototypes, sot_cfg), sot_cfg)
    return sot.decode(res.plan), res.plan
