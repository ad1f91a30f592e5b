"""Toy backbone, adapter with summarization token, and contrastive projector."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .tensor import Tensor

SUMMARY = "summarization"
INSTRUCTION = "instruction"


class EncoderError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_views: int = 2
    view_dim: int = 16
    n_tok: int = 4
    d_model: int = 64
    n_instr: int = 2
    d_hidden: int = 64
    d_proj: int = 16
    adapter_mixing: str = "attention"  # or "tokenwise"
    horizon: int = 8
    d_action: int = 3
    d_proprio: int = 3
    dec_hidden: int = 512


@dataclass(frozen=True)
class TokenSequence:
    """Batched tokens of shape (B, N, d_model) plus the owner tag of each position."""

    tokens: Tensor
    view_map: tuple[str, ...]

    @property
    def has_summary(self) -> bool:
        return SUMMARY in self.view_map

    def view_positions(self, view: int) -> np.ndarray:
        return np.array([i for i, tag in enumerate(self.view_map) if tag == f"view{view}"])

    @property
    def n_views(self) -> int:
        return len({t for t in self.view_map if t.startswith("view")})

    def with_tokens(self, tokens: Tensor) -> "TokenSequence":
        return replace(self, tokens=tokens)


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_encoder_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    d = cfg.d_model
    p: dict[str, np.ndarray] = {}
    for v in range(1, cfg.n_views + 1):
        p[f"backbone.view{v}.W"] = _uniform(rng, cfg.view_dim, (cfg.view_dim, cfg.n_tok * d))
        p[f"backbone.view{v}.b"] = _uniform(rng, cfg.view_dim, (cfg.n_tok * d,))
    p["backbone.instr.E"] = _uniform(rng, 1, (cfg.n_instr, d))
    if cfg.adapter_mixing == "attention":
        for name in ("Wq", "Wk", "Wv", "Wo"):
            p[f"adapter.attn.{name}"] = _uniform(rng, d, (d, d))
    elif cfg.adapter_mixing != "tokenwise":
        raise EncoderError(f"unknown adapter_mixing {cfg.adapter_mixing!r}")
    p["adapter.l1.W"] = _uniform(rng, d, (d, d))
    p["adapter.l1.b"] = _uniform(rng, d, (d,))
    p["adapter.l2.W"] = _uniform(rng, d, (d, d))
    p["adapter.l2.b"] = _uniform(rng, d, (d,))
    p["adapter.u"] = rng.normal(0.0, 0.02, size=(1, d))
    p["projector.l1.W"] = _uniform(rng, d, (d, cfg.d_hidden))
    p["projector.l1.b"] = _uniform(rng, d, (cfg.d_hidden,))
    p["projector.l2.W"] = _uniform(rng, cfg.d_hidden, (cfg.d_hidden, cfg.d_proj))
    p["projector.l2.b"] = _uniform(rng, cfg.d_hidden, (cfg.d_proj,))
    return {k: Tensor(v, requires_grad=True) for k, v in p.items()}


def backbone_forward(params: dict[str, Tensor], views, instruction_ids, cfg: ModelConfig) -> TokenSequence:
    """Tokenize each view (linear + tanh) and append one instruction token.

    views: (B, V, view_dim); instruction_ids: (B,).
    """
    views = np.asarray(views, dtype=np.float64)
    ids = np.asarray(instruction_ids, dtype=np.int64).reshape(-1)
    if views.ndim != 3 or views.shape[1:] != (cfg.n_views, cfg.view_dim):
        raise EncoderError(f"views must be (B, {cfg.n_views}, {cfg.view_dim}), got {views.shape}")
    if ids.shape[0] != views.shape[0]:
        raise EncoderError("one instruction id per sample required")
    if (ids < 0).any() or (ids >= cfg.n_instr).any():
        raise EncoderError(f"unknown instruction id in {sorted(set(ids.tolist()))}")
    b = views.shape[0]
    parts, tags = [], []
    for v in range(1, cfg.n_views + 1):
        x = Tensor(views[:, v - 1])
        y = T.add(T.matmul(x, params[f"backbone.view{v}.W"]), params[f"backbone.view{v}.b"])
        parts.append(T.tanh(T.reshape(y, (b, cfg.n_tok, cfg.d_model))))
        tags += [f"view{v}"] * cfg.n_tok
    parts.append(T.reshape(T.embedding(params["backbone.instr.E"], ids), (b, 1, cfg.d_model)))
    tags.append(INSTRUCTION)
    return TokenSequence(T.concat(parts, axis=1), tuple(tags))


def append_summary(seq: TokenSequence, u: Tensor) -> TokenSequence:
    if seq.has_summary:
        raise EncoderError("summarization token already appended")
    b, _, d = seq.tokens.shape
    ub = T.add(Tensor(np.zeros((b, 1, d))), T.reshape(u, (1, 1, d)))
    return TokenSequence(T.concat([seq.tokens, ub], axis=1), seq.view_map + (SUMMARY,))


def _adapter_body(params: dict[str, Tensor], x: Tensor, cfg: ModelConfig) -> Tensor:
    # residual blocks: with Wo, l2.W and l2.b at zero the adapter is the identity
    if cfg.adapter_mixing == "attention":
        q = T.matmul(x, params["adapter.attn.Wq"])
        k = T.matmul(x, params["adapter.attn.Wk"])
        v = T.matmul(x, params["adapter.attn.Wv"])
        att = T.softmax(T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(cfg.d_model)))
        x = T.add(x, T.matmul(T.matmul(att, v), params["adapter.attn.Wo"]))
    hid = T.tanh(T.add(T.matmul(x, params["adapter.l1.W"]), params["adapter.l1.b"]))
    return T.add(x, T.add(T.matmul(hid, params["adapter.l2.W"]), params["adapter.l2.b"]))


def adapter_forward(
    params: dict[str, Tensor], seq: TokenSequence, cfg: ModelConfig
) -> tuple[TokenSequence, Tensor]:
    """Append ``u``, run the adapter, split into conditioning tokens h and summary w.

    Returns h as a TokenSequence (B, N, d) without the summary position, and
    w of shape (B, d).
    """
    full = append_summary(seq, params["adapter.u"])
    out = _adapter_body(params, full.tokens, cfg)
    n = len(seq.view_map)
    h = TokenSequence(T.getitem(out, (slice(None), slice(0, n))), seq.view_map)
    w = T.getitem(out, (slice(None), n))
    return h, w


def project(params: dict[str, Tensor], w: Tensor) -> Tensor:
    """Two-layer projector: tanh hidden, linear output, no normalization."""
    hid = T.tanh(T.add(T.matmul(w, params["projector.l1.W"]), params["projector.l1.b"]))
    return T.add(T.matmul(hid, params["projector.l2.W"]), params["projector.l2.b"])


def pool(h: TokenSequence) -> Tensor:
    """Token-mean of the conditioning sequence, shape (B, d)."""
    return T.mean(h.tokens, axis=1)
