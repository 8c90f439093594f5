"""Attention-based spatio-temporal graph encoder trained by pose denoising.

Each block mixes frames with temporal attention, filters joints with
Chebyshev polynomials of the scaled skeleton Laplacian (modulated by spatial
attention), applies a 1-D temporal convolution, adds a residual and layer
normalizes over channels. Arrays are laid out batch x frames x joints x channels.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tape as ad
from .pose_io import (MPII_GRAPH, PoseSequence, SkeletonGraph, WindowBatch, concat_batches,
                      corrupt, make_windows, normalize_sequence)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EncoderConfig:
    num_blocks: int = 3
    cheb_order: int = 3
    block_channels: tuple = (16, 32, 64)
    cheb_filters: int = 7
    temporal_kernel: int = 3
    hidden_dim: int = 64
    attention_dim: int = 16
    window: int = 30
    train_stride: int = 5
    lambda_vel: float = 1.0
    noise_factor: float = 0.1
    learning_rate: float = 1e-4
    epochs: int = 100
    batch_size: int = 8
    seed: int = 0
    normalize: bool = True

    def __post_init__(self):
        object.__setattr__(self, "block_channels", tuple(int(c) for c in self.block_channels))
        if self.num_blocks < 1 or len(self.block_channels) != self.num_blocks:
            raise ValueError("need num_blocks >= 1 and one channel count per block")
        if self.block_channels[-1] != self.hidden_dim:
            raise ValueError("last block channel count must equal hidden_dim")
        if self.cheb_order < 1 or self.cheb_filters < 1:
            raise ValueError("cheb_order and cheb_filters must be >= 1")
        if self.temporal_kernel < 1 or self.temporal_kernel % 2 == 0:
            raise ValueError("temporal_kernel must be odd")
        if self.window < 2:
            raise ValueError("window must be >= 2")

    def to_dict(self):
        d = asdict(self)
        d["block_channels"] = list(self.block_channels)
        return d


@dataclass(frozen=True, eq=False)
class EmbeddingSequence:
    video_id: str
    features: np.ndarray


@dataclass
class TrainResult:
    params: dict
    log: list = field(default_factory=list)
    adam: ad.AdamState | None = None


def scaled_laplacian(graph: SkeletonGraph) -> np.ndarray:
    A = graph.adjacency
    deg = A.sum(axis=1)
    if np.any(deg == 0):
        raise ValueError(f"joint {int(np.flatnonzero(deg == 0)[0])} has no edges")
    d = 1.0 / np.sqrt(deg)
    L = np.eye(len(A)) - d[:, None] * A * d[None, :]
    lam_max = np.linalg.eigvalsh(L).max()
    return (2.0 / lam_max) * L - np.eye(len(A))


def cheb_polynomials(L_tilde: np.ndarray, order: int) -> list[np.ndarray]:
    if order < 1:
        raise ValueError("order must be >= 1")
    polys = [np.eye(len(L_tilde))]
    if order > 1:
        polys.append(L_tilde.copy())
    for _ in range(2, order):
        polys.append(2 * L_tilde @ polys[-1] - polys[-2])
    return polys


def param_shapes(cfg: EncoderConfig, window: int | None = None, joints: int = 16) -> dict:
    W = cfg.window if window is None else window
    shapes = {}
    c_in = 2
    for b, c_out in enumerate(cfg.block_channels):
        p = f"block{b}."
        shapes[p + "tatt_u"] = (c_in, cfg.attention_dim)
        shapes[p + "tatt_v"] = (c_in, cfg.attention_dim)
        shapes[p + "tatt_b"] = (W, W)
        shapes[p + "satt_u"] = (c_in, cfg.attention_dim)
        shapes[p + "satt_v"] = (c_in, cfg.attention_dim)
        shapes[p + "satt_b"] = (joints, joints)
        for g in range(cfg.cheb_filters):
            shapes[p + f"theta{g}"] = (cfg.cheb_order, c_in, c_out)
        shapes[p + "tconv"] = (cfg.temporal_kernel, c_out, c_out)
        if c_in != c_out:
            shapes[p + "res"] = (c_in, c_out)
        shapes[p + "ln_gamma"] = (c_out,)
        shapes[p + "ln_beta"] = (c_out,)
        c_in = c_out
    shapes["head_w"] = (cfg.hidden_dim, 2)
    shapes["head_b"] = (2,)
    return shapes


def init_params(cfg: EncoderConfig, seed: int | None = None, window: int | None = None) -> dict:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params = {}
    for name, shape in param_shapes(cfg, window).items():
        kind = name.split(".")[-1]
        if kind.endswith("_b") or kind == "ln_beta" or name == "head_b":
            params[name] = np.zeros(shape)
        elif kind == "ln_gamma":
            params[name] = np.ones(shape)
        elif kind.startswith(("tatt", "satt")):
            params[name] = rng.normal(0.0, 0.1 / np.sqrt(shape[0]), shape)
        elif kind.startswith("theta"):
            fan_in = shape[0] * shape[1] * cfg.cheb_filters
            params[name] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), shape)
        elif kind == "tconv":
            params[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[0] * shape[1]), shape)
        else:
            params[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape)
    return params


def _attention(pooled, u, v, bias):
    # pooled: B x N x C -> row-stochastic B x N x N
    q = pooled @ u
    k = pooled @ v
    scores = q @ k.transpose(0, 2, 1) * (1.0 / np.sqrt(u.shape[1])) + bias
    return ad.softmax(scores)


def temporal_attention(X, p, prefix=""):
    """Frame-by-frame attention (B x W x W) from joint-pooled block input."""
    X, p, wrapped = _as_nodes(X, p)
    out = _attention(X.mean(axis=2), p[prefix + "tatt_u"], p[prefix + "tatt_v"], p[prefix + "tatt_b"])
    return out.value if wrapped else out


def spatial_attention(X, p, prefix=""):
    """Joint-by-joint attention (B x J x J) from frame-pooled block input."""
    X, p, wrapped = _as_nodes(X, p)
    out = _attention(X.mean(axis=1), p[prefix + "satt_u"], p[prefix + "satt_v"], p[prefix + "satt_b"])
    return out.value if wrapped else out


def _as_nodes(X, p):
    if isinstance(X, ad.Node):
        return X, p, False
    t = ad.Tape()
    X = np.asarray(X, dtype=np.float64)
    out = t.const(X[None] if X.ndim == 3 else X)
    return out, {k: t.const(v) for k, v in p.items()}, True


def block_forward(X, p, polys, prefix=""):
    """One encoder block on a B x W x J x C_in node; returns B x W x J x C_out."""
    tape = X.tape
    B, W, J, C_in = X.shape
    E = temporal_attention(X, p, prefix)
    Xm = (E @ X.reshape(B, W, J * C_in)).reshape(B, W, J, C_in)

    S = spatial_attention(Xm, p, prefix)
    # joints-major layout turns the graph filtering into one batched GEMM per order
    Xj = Xm.transpose(0, 2, 1, 3).reshape(B, J, W * C_in)
    terms = [((S * tape.const(Tk)) @ Xj).reshape(B, J, W, C_in) for Tk in polys]
    Z = terms[0] if len(terms) == 1 else ad.concat(terms, axis=-1)
    groups = [p[k] for k in sorted(p) if k.startswith(prefix + "theta")]
    theta = groups[0]
    for g in groups[1:]:
        theta = theta + g
    K, _, C_out = theta.shape
    Y = ad.relu((Z @ theta.reshape(K * C_in, C_out)).transpose(0, 2, 1, 3))

    kernel = p[prefix + "tconv"]
    ksize = kernel.shape[0]
    pad = ksize // 2
    if pad:
        zeros = tape.const(np.zeros((B, pad, J, C_out)))
        Yp = ad.concat([zeros, Y, zeros], axis=1)
    else:
        Yp = Y
    conv = None
    for s in range(ksize):
        term = Yp[:, s:s + W] @ kernel[s]
        conv = term if conv is None else conv + term

    res = X @ p[prefix + "res"] if (prefix + "res") in p else X
    return ad.layer_norm(conv + res) * p[prefix + "ln_gamma"] + p[prefix + "ln_beta"]


def encoder_forward(window, p, polys, num_blocks):
    """Run all blocks; returns (frame features B x W x H, reconstruction B x W x J x 2)."""
    h = window
    for b in range(num_blocks):
        h = block_forward(h, p, polys, prefix=f"block{b}.")
    features = h.mean(axis=2)
    recon = h @ p["head_w"] + p["head_b"]
    return features, recon


class Encoder:
    """Convenience wrapper holding params, config and Chebyshev basis."""

    def __init__(self, params: dict, cfg: EncoderConfig, graph: SkeletonGraph = MPII_GRAPH):
        self.params = params
        self.cfg = cfg
        self.polys = cheb_polynomials(scaled_laplacian(graph), cfg.cheb_order)

    def __call__(self, windows: np.ndarray):
        t = ad.Tape()
        leaves = {k: t.const(v) for k, v in self.params.items()}
        x = t.const(np.asarray(windows, dtype=np.float64))
        feats, recon = encoder_forward(x, leaves, self.polys, self.cfg.num_blocks)
        return feats.value, recon.value


def _pair(recon, clean):
    if isinstance(recon, ad.Node):
        clean = clean if isinstance(clean, ad.Node) else recon.tape.const(clean)
        return recon, clean, False
    recon = np.asarray(recon, dtype=np.float64)
    clean = np.asarray(clean, dtype=np.float64)
    t = ad.Tape()
    return t.const(recon), t.const(clean), True


def loss_mse(recon, clean):
    """Mean over batch, frames and joints of the squared 2-D position error."""
    r, c, plain = _pair(recon, clean)
    if r.shape != c.shape:
        raise ad.ShapeError(f"recon {r.shape} vs clean {c.shape}")
    B, W, J, _ = r.shape
    d = r - c
    out = (d * d).sum() * (1.0 / (B * W * J))
    return float(out.value) if plain else out


def loss_vel(recon, clean):
    """Squared error of frame-to-frame displacements, divided by B*W*J."""
    r, c, plain = _pair(recon, clean)
    if r.shape != c.shape:
        raise ad.ShapeError(f"recon {r.shape} vs clean {c.shape}")
    B, W, J, _ = r.shape
    if W < 2:
        raise ValueError("velocity loss needs at least 2 frames")
    d = (r[:, 1:] - r[:, :-1]) - (c[:, 1:] - c[:, :-1])
    out = (d * d).sum() * (1.0 / (B * W * J))
    return float(out.value) if plain else out


def loss_total(recon, clean, lambda_vel):
    plain = not isinstance(recon, ad.Node)
    if plain:
        return loss_mse(recon, clean) + lambda_vel * loss_vel(recon, clean)
    return loss_mse(recon, clean) + loss_vel(recon, clean) * lambda_vel


def _prepare(dataset, cfg):
    return [normalize_sequence(s) if cfg.normalize else s for s in dataset]


def denoise_step(params, clean, noisy, cfg, polys):
    """Forward + backward on one batch; returns (grads, mse, vel, total)."""
    t = ad.Tape()
    leaves = {k: t.leaf(v, name=k) for k, v in params.items()}
    _, recon = encoder_forward(t.const(noisy), leaves, polys, cfg.num_blocks)
    mse = loss_mse(recon, clean)
    vel = loss_vel(recon, clean)
    total = mse + vel * cfg.lambda_vel
    t.backward(total)
    grads = {k: n.grad for k, n in leaves.items()}
    return grads, float(mse.value), float(vel.value), float(total.value)


def train_denoiser(dataset: list[PoseSequence], cfg: EncoderConfig, params: dict | None = None,
                   adam: ad.AdamState | None = None, start_epoch: int = 0,
                   graph: SkeletonGraph = MPII_GRAPH) -> TrainResult:
    """Train the encoder to reconstruct clean windows from noisy ones.

    Resuming passes the previous ``params``/``adam`` and ``start_epoch``; epoch
    numbering in the log continues from there.
    """
    if not dataset:
        raise ValueError("empty dataset")
    seqs = _prepare(dataset, cfg)
    clean_all = concat_batches(make_windows(s, cfg.window, cfg.train_stride) for s in seqs).windows
    polys = cheb_polynomials(scaled_laplacian(graph), cfg.cheb_order)
    params = init_params(cfg) if params is None else {k: v.copy() for k, v in params.items()}
    adam = adam or ad.AdamState()
    history = []
    n = len(clean_all)
    for epoch in range(start_epoch + 1, start_epoch + cfg.epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n)
        sums = np.zeros(3)
        for bi, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            clean = clean_all[idx]
            noisy = corrupt_array(clean, cfg.noise_factor, [cfg.seed, epoch, bi])
            grads, mse, vel, total = denoise_step(params, clean, noisy, cfg, polys)
            if not np.isfinite(total):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, batch {bi}: mse={mse} vel={vel}")
            params, adam = ad.adam_step(params, grads, adam, cfg.learning_rate)
            sums += len(idx) * np.array([mse, vel, total])
        mse, vel, total = sums / n
        history.append({"epoch": epoch, "mse": float(mse), "vel": float(vel), "total": float(total)})
        log.info("epoch %d mse=%.6f vel=%.6f total=%.6f", epoch, mse, vel, total)
    return TrainResult(params, history, adam)


def corrupt_array(windows: np.ndarray, noise_factor: float, seed) -> np.ndarray:
    return corrupt(WindowBatch(windows, [None] * len(windows)), noise_factor, seed).windows


def extract_features(seq: PoseSequence, params: dict, cfg: EncoderConfig,
                     graph: SkeletonGraph = MPII_GRAPH) -> EmbeddingSequence:
    """Per-frame features from serial, non-overlapping windows (no noise)."""
    if cfg.normalize:
        seq = normalize_sequence(seq)
    batch = make_windows(seq, cfg.window, cfg.window)
    feats, _ = Encoder(params, cfg, graph)(batch.windows)
    rows = feats.reshape(-1, feats.shape[-1])[: len(seq)]
    return EmbeddingSequence(seq.video_id, np.ascontiguousarray(rows))
