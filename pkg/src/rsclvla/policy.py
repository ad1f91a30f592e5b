"""Closed-loop chunk policy backed by trained parameters."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .encoder import ModelConfig, adapter_forward, backbone_forward
from .flowmatch import sample_actions
from .synthenv import ACTION_CENTER, ACTION_SCALE, Observation
from .tensor import Tensor


def normalize_actions(a: np.ndarray) -> np.ndarray:
    return (np.asarray(a) - ACTION_CENTER) / ACTION_SCALE


def denormalize_actions(a: np.ndarray) -> np.ndarray:
    return ACTION_CENTER + ACTION_SCALE * np.asarray(a)


class ModelPolicy:
    def __init__(self, params: dict[str, Tensor], cfg: ModelConfig, proprio_mean, proprio_std, k: int = 16):
        self.params = params
        self.cfg = cfg
        self.mean = np.asarray(proprio_mean)
        self.std = np.asarray(proprio_std)
        self.k = k

    def __call__(self, obs: Observation, rng: np.random.Generator) -> np.ndarray:
        with T.no_grad():
            seq = backbone_forward(self.params, obs.views, obs.task_id, self.cfg)
            h, _ = adapter_forward(self.params, seq, self.cfg)
        q = (obs.proprio - self.mean) / self.std
        chunk = sample_actions(self.params, h, q, self.k, rng, self.cfg)
        return denormalize_actions(chunk)
