"""Flow-matching action head: timestep prior, interpolation, loss, Euler sampler."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .encoder import ModelConfig, TokenSequence, _uniform, pool
from .tensor import Tensor

TIMESTEP_CAP = 0.999
BETA_ALPHA = 1.5
S_FREQS = (1.0, 8.0)


class FlowError(ValueError):
    pass


def sample_timestep(rng: np.random.Generator, size=None):
    """s = a * (1 - x) with x ~ Beta(1.5, 1) drawn as u ** (1/1.5)."""
    u = rng.uniform(size=size)
    return timestep_from_beta(u ** (1.0 / BETA_ALPHA))


def timestep_from_beta(x):
    return TIMESTEP_CAP * (1.0 - np.asarray(x, dtype=np.float64))


@dataclass(frozen=True)
class FlowSample:
    s: np.ndarray  # (B,) or scalar
    epsilon: np.ndarray
    a_s: np.ndarray
    target: np.ndarray


def interpolate(actions, epsilon, s) -> FlowSample:
    """A_s = s*A + (1-s)*eps with regression target eps - A.  ``s`` is per-sample."""
    a = np.asarray(actions, dtype=np.float64)
    eps = np.asarray(epsilon, dtype=np.float64)
    if a.shape != eps.shape:
        raise FlowError(f"interpolate: shapes {a.shape} and {eps.shape} differ")
    s_arr = np.asarray(s, dtype=np.float64)
    if ((s_arr < 0) | (s_arr > 1)).any():
        raise FlowError("s must lie in [0, 1]")
    sb = s_arr.reshape(s_arr.shape + (1,) * (a.ndim - s_arr.ndim))
    return FlowSample(s_arr, eps, sb * a + (1.0 - sb) * eps, eps - a)


def timestep_embedding(s) -> np.ndarray:
    s = np.atleast_1d(np.asarray(s, dtype=np.float64))[:, None]
    w = np.asarray(S_FREQS)[None]
    return np.concatenate([np.sin(s * w), np.cos(s * w)], axis=1)


def init_decoder_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    d_in = cfg.d_model + cfg.d_proprio + cfg.horizon * cfg.d_action + 2 * len(S_FREQS)
    dims = [d_in, cfg.dec_hidden, cfg.dec_hidden, cfg.horizon * cfg.d_action]
    p = {}
    for j in range(3):
        p[f"decoder.l{j + 1}.W"] = Tensor(_uniform(rng, dims[j], (dims[j], dims[j + 1])), requires_grad=True)
        p[f"decoder.l{j + 1}.b"] = Tensor(_uniform(rng, dims[j], (dims[j + 1],)), requires_grad=True)
    return p


def decoder_forward(params: dict[str, Tensor], h: TokenSequence | Tensor, a_s, q, s, cfg: ModelConfig) -> Tensor:
    """Predict eps - A from pooled h, the noisy chunk, proprio and s.  Output (B, H, d_a)."""
    pooled = pool(h) if isinstance(h, TokenSequence) else h
    b = pooled.shape[0]
    a_flat = T.reshape(T.as_tensor(a_s), (b, cfg.horizon * cfg.d_action))
    x = T.concat([pooled, T.as_tensor(q), a_flat, Tensor(timestep_embedding(s))], axis=1)
    x = T.tanh(T.add(T.matmul(x, params["decoder.l1.W"]), params["decoder.l1.b"]))
    x = T.tanh(T.add(T.matmul(x, params["decoder.l2.W"]), params["decoder.l2.b"]))
    x = T.add(T.matmul(x, params["decoder.l3.W"]), params["decoder.l3.b"])
    return T.reshape(x, (b, cfg.horizon, cfg.d_action))


def fm_loss(prediction: Tensor, sample: FlowSample) -> Tensor:
    return T.mse(prediction, Tensor(sample.target))


def euler_integrate(
    velocity: Callable[[np.ndarray, np.ndarray], np.ndarray],
    shape: tuple[int, ...],
    k: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Euler integration from noise (s=0) to data (s=1).

    ``velocity(x, s)`` returns the model's eps - A estimate; each step moves
    x <- x - (1/k) * prediction.
    """
    if k < 1:
        raise FlowError("need at least one Euler step")
    x = rng.standard_normal(shape)
    dt = 1.0 / k
    for i in range(k):
        s = np.full(shape[0], i * dt)
        x = x - dt * np.asarray(velocity(x, s))
    return x


def sample_actions(params: dict[str, Tensor], h, q, k: int, rng: np.random.Generator, cfg: ModelConfig) -> np.ndarray:
    """Denoise a (B, H, d_a) chunk with the decoder conditioned on (h, q)."""
    with T.no_grad():
        pooled = pool(h) if isinstance(h, TokenSequence) else T.as_tensor(h)
    q = T.as_tensor(q)

    def velocity(x, s):
        with T.no_grad():
            return decoder_forward(params, pooled, x, q, s, cfg).data

    return euler_integrate(velocity, (pooled.shape[0], cfg.horizon, cfg.d_action), k, rng)
