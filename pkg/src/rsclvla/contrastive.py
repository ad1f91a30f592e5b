"""State-weighted contrastive objective and its ablation variants.

Soft weights turn pairwise proprioceptive distances into row-stochastic
targets for a weighted InfoNCE between clean and augmented embeddings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .encoder import SUMMARY, TokenSequence
from .tensor import Tensor

SUPERVISION_KINDS = ("proprio_state", "next_action", "action_sequence_dtw", "one_hot")
AUGMENTATION_KINDS = ("view_cutoff", "token_cutoff", "feature_cutoff", "none")
REDUCTIONS = ("sum", "mean")


class ContrastiveError(ValueError):
    pass


@dataclass(frozen=True)
class SupervisionTarget:
    kind: str = "proprio_state"
    gamma: float | None = None

    def __post_init__(self):
        if self.kind not in SUPERVISION_KINDS:
            raise ContrastiveError(f"unknown supervision kind {self.kind!r}")
        if (self.kind == "action_sequence_dtw") != (self.gamma is not None):
            raise ContrastiveError("gamma is required for, and only for, action_sequence_dtw")
        if self.gamma is not None and self.gamma <= 0:
            raise ContrastiveError("gamma must be positive")


# ---------------------------------------------------------------- soft weights


def pairwise_euclidean(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    diff = x[:, None, :] - x[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def weights_from_distances(dist: np.ndarray, beta: float) -> np.ndarray:
    if beta <= 0:
        raise ContrastiveError(f"beta must be positive, got {beta}")
    logits = -np.asarray(dist, dtype=np.float64) / beta
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def soft_weights(q: np.ndarray, beta: float) -> np.ndarray:
    """Row-softmax of -||q_i - q_j|| / beta over the batch (self included)."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape[0] < 1:
        raise ContrastiveError("empty batch")
    if not np.isfinite(q).all():
        raise ContrastiveError("non-finite proprioceptive state")
    return weights_from_distances(pairwise_euclidean(q), beta)


# ---------------------------------------------------------------- soft-DTW


def _dtw_table(a: np.ndarray, b: np.ndarray, gamma: float | None) -> np.ndarray:
    """Batched DP over pairs: a (P, Ta, d), b (P, Tb, d) -> (P,)."""
    cost = ((a[:, :, None, :] - b[:, None, :, :]) ** 2).sum(axis=-1)
    p, ta, tb = cost.shape
    r = np.full((p, ta + 1, tb + 1), np.inf)
    r[:, 0, 0] = 0.0
    for i in range(1, ta + 1):
        for j in range(1, tb + 1):
            prev = np.stack([r[:, i - 1, j - 1], r[:, i - 1, j], r[:, i, j - 1]])
            m = prev.min(axis=0)
            if gamma is None:
                soft = m
            else:
                soft = m - gamma * np.log(np.exp(-(prev - m) / gamma).sum(axis=0))
            r[:, i, j] = cost[:, i - 1, j - 1] + soft
    return r[:, ta, tb]


def _as_seq(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[:, None] if x.ndim == 1 else x


def soft_dtw(seq_a, seq_b, gamma: float) -> float:
    """Soft-DTW with squared-Euclidean cell cost and soft-min temperature gamma."""
    a, b = _as_seq(seq_a), _as_seq(seq_b)
    if len(a) == 0 or len(b) == 0:
        raise ContrastiveError("soft_dtw: empty sequence")
    if gamma <= 0:
        raise ContrastiveError("soft_dtw: gamma must be positive")
    return float(_dtw_table(a[None], b[None], gamma)[0])


def hard_dtw(seq_a, seq_b) -> float:
    a, b = _as_seq(seq_a), _as_seq(seq_b)
    if len(a) == 0 or len(b) == 0:
        raise ContrastiveError("dtw: empty sequence")
    return float(_dtw_table(a[None], b[None], None)[0])


def soft_dtw_batch(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    """Soft-DTW for aligned pairs a[p] vs b[p]; a (P, Ta, d), b (P, Tb, d)."""
    if gamma <= 0:
        raise ContrastiveError("soft_dtw: gamma must be positive")
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape[1] == 0 or b.shape[1] == 0:
        raise ContrastiveError("soft_dtw: empty sequence")
    return _dtw_table(a, b, gamma)


def pairwise_soft_dtw(seqs: np.ndarray, gamma: float) -> np.ndarray:
    seqs = np.asarray(seqs, dtype=np.float64)
    n = len(seqs)
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    return soft_dtw_batch(seqs[ii.ravel()], seqs[jj.ravel()], gamma).reshape(n, n)


# ---------------------------------------------------------------- supervision


def supervision_distances(batch: Mapping[str, np.ndarray], target: SupervisionTarget) -> np.ndarray | None:
    """B x B distances for the target; None for one_hot (identity weights)."""
    need = {
        "proprio_state": "q",
        "next_action": "next_action",
        "action_sequence_dtw": "chunk",
        "one_hot": None,
    }[target.kind]
    if need is None:
        return None
    if need not in batch:
        raise ContrastiveError(f"batch lacks field {need!r} required by {target.kind}")
    if target.kind == "action_sequence_dtw":
        return pairwise_soft_dtw(batch[need], target.gamma)
    return pairwise_euclidean(batch[need])


def supervision_weights(batch: Mapping[str, np.ndarray], target: SupervisionTarget, beta: float) -> np.ndarray:
    if target.kind == "proprio_state":
        if "q" not in batch:
            raise ContrastiveError("batch lacks field 'q' required by proprio_state")
        return soft_weights(batch["q"], beta)
    dist = supervision_distances(batch, target)
    if dist is None:
        key = next(iter(batch))
        return np.eye(len(batch[key]))
    return weights_from_distances(dist, beta)


# ---------------------------------------------------------------- augmentation


def _content_positions(seq: TokenSequence) -> np.ndarray:
    return np.array([i for i, t in enumerate(seq.view_map) if t != SUMMARY])


def _apply_mask(seq: TokenSequence, mask: np.ndarray) -> TokenSequence:
    return seq.with_tokens(T.mul(seq.tokens, Tensor(mask)))


def view_cutoff(seq: TokenSequence, rng: np.random.Generator) -> tuple[TokenSequence, np.ndarray]:
    """Zero every token of one uniformly drawn view per sample.

    Returns the masked sequence and the chosen 1-based view index per sample.
    """
    n_views = seq.n_views
    if n_views < 2:
        raise ContrastiveError("view cutoff needs at least two views")
    b, n, _ = seq.tokens.shape
    chosen = rng.integers(1, n_views + 1, size=b)
    mask = np.ones((b, n, 1))
    for v in range(1, n_views + 1):
        pos = seq.view_positions(v)
        rows = np.flatnonzero(chosen == v)
        mask[np.ix_(rows, pos)] = 0.0
    return _apply_mask(seq, mask), chosen


def _check_p(p: float) -> None:
    if not 0.0 < p < 1.0:
        raise ContrastiveError(f"cutoff probability must be in (0, 1), got {p}")


def token_cutoff(seq: TokenSequence, rng: np.random.Generator, p: float) -> TokenSequence:
    """Drop each content token row independently with probability p."""
    _check_p(p)
    b, n, _ = seq.tokens.shape
    mask = np.ones((b, n, 1))
    pos = _content_positions(seq)
    mask[:, pos, 0] = (rng.uniform(size=(b, len(pos))) >= p).astype(np.float64)
    return _apply_mask(seq, mask)


def feature_cutoff(seq: TokenSequence, rng: np.random.Generator, p: float) -> TokenSequence:
    """Drop each feature column (across all tokens of a sample) with probability p."""
    _check_p(p)
    b, _, d = seq.tokens.shape
    keep = (rng.uniform(size=(b, 1, d)) >= p).astype(np.float64)
    return _apply_mask(seq, keep)


def embedding_view_cutoff(z: Tensor, n_views: int, rng: np.random.Generator) -> tuple[Tensor, np.ndarray]:
    """Cutoff applied directly to projected embeddings: zero one of n_views contiguous feature slices."""
    if n_views < 2:
        raise ContrastiveError("view cutoff needs at least two views")
    b, d = z.shape
    chosen = rng.integers(1, n_views + 1, size=b)
    edges = np.linspace(0, d, n_views + 1).round().astype(int)
    mask = np.ones((b, d))
    for r, v in enumerate(chosen):
        mask[r, edges[v - 1] : edges[v]] = 0.0
    return T.mul(z, Tensor(mask)), chosen


def augment(seq: TokenSequence, kind: str, rng: np.random.Generator, p: float = 0.1) -> TokenSequence:
    if kind == "view_cutoff":
        return view_cutoff(seq, rng)[0]
    if kind == "token_cutoff":
        return token_cutoff(seq, rng, p)
    if kind == "feature_cutoff":
        return feature_cutoff(seq, rng, p)
    if kind == "none":
        return seq
    raise ContrastiveError(f"unknown augmentation {kind!r}")


# ---------------------------------------------------------------- loss


def rscl_loss(z: Tensor, z_aug: Tensor, weights: np.ndarray, tau: float, reduction: str = "sum") -> Tensor:
    """-sum_ij W_ij log softmax_j(cos(z_i, z~_j) / tau); anchors clean, candidates augmented.

    ``reduction="mean"`` divides by the batch size (average over anchors).
    """
    if tau <= 0:
        raise ContrastiveError("tau must be positive")
    if reduction not in REDUCTIONS:
        raise ContrastiveError(f"reduction must be one of {REDUCTIONS}, got {reduction!r}")
    w = np.asarray(weights, dtype=np.float64)
    b = z.shape[0]
    if z.shape != z_aug.shape or w.shape != (b, b):
        raise ContrastiveError(f"shape mismatch: z {z.shape}, z_aug {z_aug.shape}, W {w.shape}")
    for name, x in (("z", z), ("z_aug", z_aug)):
        if (np.linalg.norm(x.data, axis=1) == 0).any():
            raise ContrastiveError(f"zero-norm embedding row in {name}")
    sim = T.matmul(T.l2_normalize(z), T.transpose(T.l2_normalize(z_aug)))
    logp = T.log_softmax(T.scale(sim, 1.0 / tau))
    scale = -1.0 / b if reduction == "mean" else -1.0
    return T.scale(T.sum(T.mul(logp, Tensor(w))), scale)


def lambda_schedule(step: int, max_steps: int) -> float:
    """Cosine decay of the contrastive weight from 1 at step 0 to 0 at max_steps."""
    if max_steps < 1:
        raise ContrastiveError("max_steps must be >= 1")
    if step < 0 or step > max_steps:
        raise ContrastiveError(f"step {step} outside [0, {max_steps}]")
    return 0.5 * (1.0 + math.cos(math.pi * step / max_steps))
