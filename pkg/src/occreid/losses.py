"""Training objectives: smoothed identity loss, query decorrelation,
contrast triplet, reverse triplet, and their weighted total.

All batch reductions default to a plain sum over samples.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigError, ContractError, NumericError, ShapeError

DIST_EPS = 1e-12


@dataclass
class LossConfig:
    epsilon: float = 0.1  # label smoothing
    alpha: float = 1.0  # decorrelation penalty
    margin: float = 0.3  # triplet margin
    lam: float = 1.0  # reverse triplet scale
    reduction: str = "sum"
    decorrelation_mode: str = "shared"  # or "per_image" (decoder outputs)

    def __post_init__(self):
        if not 0.0 <= self.epsilon < 1.0:
            raise ConfigError(f"loss: epsilon={self.epsilon} outside [0, 1)")
        if self.alpha < 0 or self.lam < 0:
            raise ConfigError("loss: alpha and lam must be non-negative")
        if self.margin <= 0:
            raise ConfigError(f"loss: margin={self.margin} must be positive")
        if self.reduction not in ("sum", "mean"):
            raise ConfigError(f"loss: unknown reduction {self.reduction!r}")
        if self.decorrelation_mode not in ("shared", "per_image"):
            raise ConfigError(f"loss: unknown decorrelation_mode {self.decorrelation_mode!r}")


def _reduce(x: Tensor, reduction: str) -> Tensor:
    return dc.sum_(x) if reduction == "sum" else dc.mean(x)


def smoothed_targets(labels: np.ndarray, num_classes: int, epsilon: float, dtype=np.float64) -> np.ndarray:
    q = np.full((len(labels), num_classes), epsilon / num_classes, dtype=dtype)
    q[np.arange(len(labels)), labels] = 1.0 - epsilon + epsilon / num_classes
    return q


def id_loss(logits: Tensor, labels, epsilon: float = 0.1, reduction: str = "sum") -> Tensor:
    """Cross entropy against label-smoothed targets, via log-softmax."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] != len(labels):
        raise ShapeError(f"id_loss: logits {logits.shape} vs {len(labels)} labels")
    m = logits.shape[1]
    if m < 2:
        raise ConfigError(f"id_loss: need at least 2 identities, got {m}")
    if labels.size and (labels.min() < 0 or labels.max() >= m):
        raise ContractError(f"id_loss: labels must lie in [0, {m}), got range [{labels.min()}, {labels.max()}]")
    q = smoothed_targets(labels, m, epsilon, logits.dtype)
    per_sample = dc.scale(dc.sum_(dc.mul(dc.log_softmax(logits, axis=-1), q), axis=-1), -1.0)
    return _reduce(per_sample, reduction)


def query_cosines(Q: Tensor) -> Tensor:
    """Pairwise cosine similarity of the rows of Q (..., N_q, d)."""
    norms = np.sqrt((Q.data * Q.data).sum(axis=-1))
    if np.any(norms == 0):
        bad = np.argwhere(norms == 0)[0]
        raise NumericError(f"decorrelation: query row {tuple(int(i) for i in bad)} has zero norm")
    qn = dc.l2norm(Q, axis=-1)
    axes = tuple(range(Q.ndim - 2)) + (Q.ndim - 1, Q.ndim - 2)
    return dc.matmul(qn, dc.transpose(qn, axes))


def decorrelation_loss(Q: Tensor, alpha: float = 1.0, batch_size: int = 1) -> Tensor:
    """alpha * N * sum over ordered pairs n != m of |cos(q_n, q_m)|.

    ``Q`` is either the shared (N_q, d) query embedding, in which case the
    per-image sum collapses to the factor ``batch_size``, or per-image query
    states (B, N_q, d), which are summed over B (``batch_size`` is then
    ignored).
    """
    if Q.ndim not in (2, 3):
        raise ShapeError(f"decorrelation: expected (N_q, d) or (B, N_q, d), got {Q.shape}")
    nq = Q.shape[-2]
    off = 1.0 - np.eye(nq, dtype=Q.dtype)
    total = dc.sum_(dc.mul(dc.abs_(query_cosines(Q)), off))
    factor = alpha * (batch_size if Q.ndim == 2 else 1)
    return dc.scale(total, factor)


def max_offdiag_cosine(Q: np.ndarray) -> float:
    qn = Q / np.linalg.norm(Q, axis=-1, keepdims=True)
    c = np.abs(qn @ qn.T)
    np.fill_diagonal(c, 0.0)
    return float(c.max())


def mean_offdiag_cosine(Q: np.ndarray) -> float:
    qn = Q / np.linalg.norm(Q, axis=-1, keepdims=True)
    c = np.abs(qn @ qn.T)
    n = len(Q)
    return float((c.sum() - np.trace(c)) / (n * (n - 1)))


def pair_distance(x: Tensor, y: Tensor) -> Tensor:
    """Euclidean distance between L2-normalised rows."""
    diff = dc.sub(dc.l2norm(x, axis=-1), dc.l2norm(y, axis=-1))
    return dc.sqrt(dc.add(dc.sum_(dc.mul(diff, diff), axis=-1), DIST_EPS))


def distance_matrix_np(x: np.ndarray) -> np.ndarray:
    """All-pairs training distance on a detached (B, D) feature matrix."""
    xn = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
    sq = np.maximum(2.0 - 2.0 * (xn @ xn.T), 0.0)
    return np.sqrt(sq + DIST_EPS)


def triplet_hinge(d_ap, d_an, margin: float = 0.3, reduction: str = "sum") -> Tensor:
    """sum of [margin + d_ap - d_an]_+."""
    d_ap, d_an = dc.as_tensor(d_ap), dc.as_tensor(d_an)
    return _reduce(dc.relu(dc.add(dc.sub(d_ap, d_an), margin)), reduction)


def _check_triplet(a: Tensor, p: Tensor, n: Tensor) -> None:
    if not (a.shape == p.shape == n.shape):
        raise ContractError(f"triplet: feature shapes differ, {a.shape}, {p.shape}, {n.shape}")


def triplet_loss(f_a: Tensor, f_p: Tensor, f_n: Tensor, margin: float = 0.3,
                 reduction: str = "sum") -> Tensor:
    """Pull anchors toward positives, push them from negatives (ID space)."""
    _check_triplet(f_a, f_p, f_n)
    return triplet_hinge(pair_distance(f_a, f_p), pair_distance(f_a, f_n), margin, reduction)


def reverse_triplet_loss(fbar_a: Tensor, fbar_p: Tensor, fbar_n: Tensor, margin: float = 0.3,
                         reduction: str = "sum") -> Tensor:
    """Same triplets with roles swapped, applied in the occlusion space:
    same-obstacle pairs are pulled together, same-ID pairs pushed apart."""
    _check_triplet(fbar_a, fbar_p, fbar_n)
    return triplet_hinge(pair_distance(fbar_a, fbar_n), pair_distance(fbar_a, fbar_p), margin, reduction)


@dataclass
class LossComponents:
    ce: Tensor
    o: Tensor
    tri: Tensor
    rtri: Tensor

    def values(self) -> tuple[float, float, float, float]:
        return tuple(float(dc.as_tensor(t).item()) for t in (self.ce, self.o, self.tri, self.rtri))


def total_loss(components: LossComponents, lam: float = 1.0) -> Tensor:
    c = components
    out = dc.add(dc.add(c.ce, c.o), c.tri)
    return dc.add(out, dc.scale(dc.as_tensor(c.rtri), lam))
