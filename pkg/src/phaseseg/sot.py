"""Structured unbalanced optimal transport between frames and phase prototypes.

The objective over a T x K coupling ``P`` is

    F(P) = alpha * <C_temp P C_cat, P> + (1 - alpha) * <C_vis, P> + lam * KL(P^T 1 || q)

The first term charges temporally close frame pairs that land in different
classes; the KL term softly pulls the class masses toward the prior ``q``.
Every row of ``P`` carries mass 1/T. :func:`solve` minimizes F by entropic
mirror descent (multiplicative updates followed by row rescaling).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass(frozen=True)
class SOTConfig:
    alpha: float = 0.6
    lambda_kl: float = 0.5
    q: tuple | None = None  # class prior; uniform when None
    radius: float = 0.04  # temporal kernel radius as a fraction of sequence length
    min_radius: float = 2.0  # in frames
    step_size: float = 0.5
    max_iters: int = 200
    tol: float = 1e-6

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.lambda_kl < 0:
            raise ValueError("lambda_kl must be nonnegative")
        if not 0.0 < self.radius <= 1.0:
            raise ValueError("radius must lie in (0, 1]")
        if self.step_size <= 0 or self.max_iters < 1 or self.tol <= 0:
            raise ValueError("step_size, max_iters and tol must be positive")
        if self.q is not None:
            q = tuple(float(v) for v in self.q)
            if min(q) <= 0 or abs(sum(q) - 1.0) > 1e-9:
                raise ValueError("q must be strictly positive and sum to 1")
            object.__setattr__(self, "q", q)

    def prior(self, K: int) -> np.ndarray:
        if self.q is None:
            return np.full(K, 1.0 / K)
        if len(self.q) != K:
            raise ValueError(f"prior has {len(self.q)} entries, expected {K}")
        return np.asarray(self.q)

    def to_dict(self):
        d = asdict(self)
        d["q"] = None if self.q is None else list(self.q)
        return d


@dataclass(frozen=True, eq=False)
class CostBundle:
    C_vis: np.ndarray
    C_temp: np.ndarray
    C_cat: np.ndarray

    def __post_init__(self):
        T, K = self.C_vis.shape
        if self.C_temp.shape != (T, T) or self.C_cat.shape != (K, K):
            raise ValueError(f"cost shapes disagree: vis {self.C_vis.shape}, temp {self.C_temp.shape}, cat {self.C_cat.shape}")

    @property
    def shape(self):
        return self.C_vis.shape


@dataclass
class SolveResult:
    plan: np.ndarray
    trace: list = field(default_factory=list)
    iterations: int = 0


def visual_cost(X: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Cosine distance between every frame embedding and every prototype."""
    X = np.asarray(X, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    xn = np.linalg.norm(X, axis=1)
    an = np.linalg.norm(A, axis=1)
    if np.any(xn == 0):
        raise ValueError(f"zero-norm embedding at row {int(np.flatnonzero(xn == 0)[0])}")
    if np.any(an == 0):
        raise ValueError(f"zero-norm prototype at row {int(np.flatnonzero(an == 0)[0])}")
    cos = (X @ A.T) / (xn[:, None] * an[None, :])
    return 1.0 - np.clip(cos, -1.0, 1.0)


def temporal_cost(T_len: int, r: float, min_radius: float = 0.0) -> np.ndarray:
    """Truncated linear proximity kernel: max(0, 1 - |i-j| / radius), zero diagonal.

    ``radius = max(r * T_len, min_radius)`` frames.
    """
    if T_len < 1:
        raise ValueError("T_len must be >= 1")
    if not 0.0 < r <= 1.0:
        raise ValueError("r must lie in (0, 1]")
    radius = max(r * T_len, min_radius)
    i = np.arange(T_len)
    C = np.maximum(0.0, 1.0 - np.abs(i[:, None] - i[None, :]) / radius)
    np.fill_diagonal(C, 0.0)
    return C


def category_cost(K: int) -> np.ndarray:
    if K < 1:
        raise ValueError("K must be >= 1")
    return 1.0 - np.eye(K)


def build_costs(X: np.ndarray, A: np.ndarray, cfg: SOTConfig) -> CostBundle:
    return CostBundle(visual_cost(X, A), temporal_cost(len(X), cfg.radius, cfg.min_radius),
                      category_cost(len(A)))


def kl_marginal(plan: np.ndarray, q: np.ndarray) -> float:
    q = np.asarray(q, dtype=np.float64)
    if np.any(q <= 0):
        raise ValueError("prior q must be strictly positive")
    m = np.asarray(plan).sum(axis=0)
    pos = m > 0
    return float(np.sum(m[pos] * np.log(m[pos] / q[pos])))


def objective(plan: np.ndarray, bundle: CostBundle, cfg: SOTConfig) -> float:
    if plan.shape != bundle.shape:
        raise ValueError(f"plan shape {plan.shape} != cost shape {bundle.shape}")
    gw = np.sum((bundle.C_temp @ plan @ bundle.C_cat) * plan)
    lin = np.sum(bundle.C_vis * plan)
    kl = kl_marginal(plan, cfg.prior(plan.shape[1])) if cfg.lambda_kl else 0.0
    return float(cfg.alpha * gw + (1 - cfg.alpha) * lin + cfg.lambda_kl * kl)


def objective_gradient(plan: np.ndarray, bundle: CostBundle, cfg: SOTConfig) -> np.ndarray:
    Ct, Cc = bundle.C_temp, bundle.C_cat
    grad = cfg.alpha * (Ct @ plan @ Cc + Ct.T @ plan @ Cc.T) + (1 - cfg.alpha) * bundle.C_vis
    if cfg.lambda_kl:
        m = plan.sum(axis=0)
        if np.any(m <= 0):
            raise ValueError(f"class {int(np.flatnonzero(m <= 0)[0])} has zero mass")
        grad = grad + cfg.lambda_kl * (np.log(m / cfg.prior(len(m))) + 1.0)[None, :]
    return grad


def solve(bundle: CostBundle, cfg: SOTConfig = SOTConfig()) -> SolveResult:
    """Entropic mirror descent with every row held at mass 1/T."""
    T, K = bundle.shape
    plan = np.full((T, K), 1.0 / (T * K))
    trace = [objective(plan, bundle, cfg)]
    it = 0
    for it in range(1, cfg.max_iters + 1):
        g = objective_gradient(plan, bundle, cfg)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient at iteration {it}")
        # row-wise shift leaves the normalized update unchanged and avoids overflow
        step = np.exp(-cfg.step_size * (g - g.min(axis=1, keepdims=True)))
        new = plan * step
        new = np.maximum(new / (T * new.sum(axis=1, keepdims=True)), 1e-300)
        delta = np.abs(new - plan).sum()
        plan = new
        trace.append(objective(plan, bundle, cfg))
        if delta < cfg.tol:
            break
    return SolveResult(plan, trace, it)


def decode(plan: np.ndarray) -> np.ndarray:
    """Per-frame argmax; ties go to the lower class index."""
    return np.argmax(np.asarray(plan), axis=1)


def pseudo_labels(plan: np.ndarray) -> np.ndarray:
    plan = np.asarray(plan, dtype=np.float64)
    s = plan.sum(axis=1, keepdims=True)
    if np.any(s <= 0):
        raise ValueError(f"row {int(np.flatnonzero(s[:, 0] <= 0)[0])} has no mass")
    return plan / s


def hard_plan(labels: np.ndarray, K: int) -> np.ndarray:
    """One-hot plan of a labelling with each row scaled to mass 1/T."""
    labels = np.asarray(labels)
    P = np.zeros((len(labels), K))
    P[np.arange(len(labels)), labels] = 1.0 / len(labels)
    return P
