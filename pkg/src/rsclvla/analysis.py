"""Representation-alignment metrics: linear CKA and mutual-kNN CKNNA."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .encoder import ModelConfig, adapter_forward, backbone_forward, pool
from .serialize import decode_array, encode_array, write_json_atomic
from .synthenv import Dataset
from .tensor import Tensor


class AlignmentError(ValueError):
    pass


def _center(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    return x - x.mean(axis=0, keepdims=True)


def linear_cka(x, y) -> float:
    """HSIC(K, L) / sqrt(HSIC(K, K) HSIC(L, L)) with linear kernels on centered data."""
    xc, yc = _center(x), _center(y)
    if xc.shape[0] != yc.shape[0]:
        raise AlignmentError(f"row counts differ: {xc.shape[0]} vs {yc.shape[0]}")
    if xc.shape[0] < 2:
        raise AlignmentError("need at least two rows")
    k, l = xc @ xc.T, yc @ yc.T
    hkl = (k * l).sum()
    hkk, hll = (k * k).sum(), (l * l).sum()
    if hkk == 0 or hll == 0:
        raise AlignmentError("zero self-HSIC (constant embeddings)")
    return float(hkl / np.sqrt(hkk * hll))


def _hsic_unbiased(k: np.ndarray, l: np.ndarray) -> float:
    m = k.shape[0]
    kt = k.copy()
    lt = l.copy()
    np.fill_diagonal(kt, 0.0)
    np.fill_diagonal(lt, 0.0)
    val = (
        (kt * lt.T).sum()
        + kt.sum() * lt.sum() / ((m - 1) * (m - 2))
        - 2.0 * (kt @ lt).sum() / (m - 2)
    )
    return float(val / (m * (m - 3)))


def knn_mask(kernel: np.ndarray, k: int) -> np.ndarray:
    """mask[i, j] = 1 iff j != i is among the k largest kernel values in row i.

    Ties go to the lower column index (stable sort on the negated kernel).
    """
    n = kernel.shape[0]
    ranked = kernel.astype(np.float64, copy=True)
    np.fill_diagonal(ranked, -np.inf)
    order = np.argsort(-ranked, axis=1, kind="stable")[:, :k]
    mask = np.zeros((n, n))
    np.put_along_axis(mask, order, 1.0, axis=1)
    return mask


def cknna(x, y, k: int = 10) -> float:
    """Kernel alignment restricted to mutual k-nearest-neighbour pairs.

    Cross term uses pairs that are neighbours in both spaces; each
    self-alignment uses that space's own neighbour mask.
    """
    xc, yc = _center(x), _center(y)
    n = xc.shape[0]
    if yc.shape[0] != n:
        raise AlignmentError(f"row counts differ: {n} vs {yc.shape[0]}")
    if k < 1 or n <= k:
        raise AlignmentError(f"need n > k >= 1, got n={n}, k={k}")
    if n < 4:
        raise AlignmentError("unbiased HSIC needs at least 4 rows")
    kx, ly = xc @ xc.T, yc @ yc.T
    mx, my = knn_mask(kx, k), knn_mask(ly, k)
    joint = mx * my
    if not joint.any():
        raise AlignmentError("no mutual nearest-neighbour pairs")
    s_xy = _hsic_unbiased(joint * kx, joint * ly)
    s_xx = _hsic_unbiased(mx * kx, mx * kx)
    s_yy = _hsic_unbiased(my * ly, my * ly)
    if s_xx <= 0 or s_yy <= 0:
        raise AlignmentError("non-positive self-alignment; cannot normalize")
    return float(s_xy / np.sqrt(s_xx * s_yy))


# ---------------------------------------------------------------- embedding dumps


@dataclass
class EmbeddingDump:
    x: np.ndarray  # (n, d_model) pooled adapter outputs
    q: np.ndarray  # (n, 3) normalized proprio
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.x) != len(self.q):
            raise AlignmentError("embedding and proprio row counts differ")

    def save(self, path) -> None:
        write_json_atomic(path, {"X": encode_array(self.x), "Q": encode_array(self.q), "meta": self.meta})

    @classmethod
    def load(cls, path) -> "EmbeddingDump":
        d = json.loads(Path(path).read_text())
        return cls(decode_array(d["X"]), decode_array(d["Q"]), d.get("meta", {}))


def analysis_slice(ds: Dataset, per_task: int, window: int) -> list[tuple[int, int]]:
    """(trajectory, t) pairs: the first ``per_task`` trajectories of each task, strided by ``window``."""
    if window < 1:
        raise AlignmentError("window must be >= 1")
    picked: dict[int, list[int]] = {}
    for i, tr in enumerate(ds.trajectories):
        lst = picked.setdefault(tr.task_id, [])
        if len(lst) < per_task:
            lst.append(i)
    pairs = []
    for task in sorted(picked):
        for i in picked[task]:
            pairs += [(i, t) for t in range(0, len(ds.trajectories[i]), window)]
    return pairs


def dump_embeddings(
    params: dict[str, Tensor], cfg: ModelConfig, ds: Dataset, window: int = 2, per_task: int = 10, meta=None
) -> EmbeddingDump:
    """Token-mean of the adapter's conditioning outputs, no augmentation."""
    pairs = analysis_slice(ds, per_task, window)
    if not pairs:
        raise AlignmentError("empty analysis slice")
    if ds.trajectories[0].views.shape[1:] != (cfg.n_views, cfg.view_dim):
        raise AlignmentError("dataset views do not match the checkpoint's model config")
    views = np.stack([ds.trajectories[i].views[t] for i, t in pairs])
    tasks = np.array([ds.trajectories[i].task_id for i, _ in pairs])
    q = ds.normalize_proprio(np.stack([ds.trajectories[i].proprio[t] for i, t in pairs]))
    with T.no_grad():
        seq = backbone_forward(params, views, tasks, cfg)
        h, _ = adapter_forward(params, seq, cfg)
        x = pool(h).data.copy()
    info = {"n": len(pairs), "window": window, "per_task": per_task}
    info.update(meta or {})
    return EmbeddingDump(x, q, info)
