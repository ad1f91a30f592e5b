"""Training configuration and the flat ``key = value`` config file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

from .contrastive import AUGMENTATION_KINDS, REDUCTIONS, SUPERVISION_KINDS, SupervisionTarget
from .encoder import ModelConfig
from .synthenv import EnvConfig


class ConfigError(ValueError):
    pass


# key -> one-line description; every TrainConfig field must appear here
DOCS: dict[str, str] = {
    "dataset": "path of the JSON-lines demonstration file",
    "n_traj": "trajectories generated by gen-data",
    "data_seed": "seed for dataset generation and the frozen view maps",
    "n_views": "camera views per step (exterior + wrist)",
    "view_dim": "raw observation size per view",
    "horizon": "action chunk length H",
    "t_max": "episode step limit",
    "sigma_obs": "observation noise std",
    "n_tok": "tokens per view produced by the backbone",
    "d_model": "token width",
    "d_hidden": "projector hidden width",
    "d_proj": "projection (contrastive embedding) width",
    "dec_hidden": "decoder hidden width",
    "adapter_mixing": "attention | tokenwise",
    "freeze_backbone": "keep backbone weights fixed",
    "rscl_backbone_grad": "let contrastive gradients reach the backbone",
    "batch_size": "samples per step B",
    "max_steps": "optimizer steps",
    "lr": "peak learning rate",
    "warmup_steps": "linear warmup steps before cosine decay",
    "lr_schedule": "cosine | constant",
    "beta1": "Adam first-moment decay",
    "beta2": "Adam second-moment decay",
    "adam_eps": "Adam epsilon",
    "weight_decay": "decoupled weight decay",
    "tau": "similarity temperature",
    "beta": "soft-weight temperature",
    "gamma": "soft-DTW temperature (action_sequence_dtw only)",
    "lambda0": "initial contrastive weight",
    "lambda_schedule": "cosine | off (constant lambda0)",
    "rscl_reduction": "sum | mean over anchors of the contrastive loss",
    "supervision": "proprio_state | next_action | action_sequence_dtw | one_hot | none (FM only)",
    "augmentation": "view_cutoff | token_cutoff | feature_cutoff | none",
    "cutoff_p": "drop probability for token/feature cutoff",
    "cutoff_stage": "tokens (before the adapter) | embedding (on z)",
    "sample_steps": "Euler steps K at inference",
    "train_seed": "seed for init, batches, noise and augmentation",
    "eval_seed": "seed for rollout episodes",
    "eval_every": "steps between eval hooks (0 disables)",
    "eval_episodes": "episodes per eval hook",
    "checkpoint_every": "steps between checkpoints (0 = final only)",
    "out_dir": "directory for checkpoints and metrics",
    "resume_from": "checkpoint to resume from (empty = fresh run)",
    "cknna_k": "neighbours for CKNNA",
    "analysis_window": "timestep stride when dumping embeddings",
    "analysis_per_task": "trajectories per task in the analysis slice",
}


@dataclass(frozen=True)
class TrainConfig:
    dataset: str = "data/demos.jsonl"
    n_traj: int = 200
    data_seed: int = 0
    n_views: int = 2
    view_dim: int = 16
    horizon: int = 8
    t_max: int = 200
    sigma_obs: float = 0.01
    n_tok: int = 4
    d_model: int = 64
    d_hidden: int = 64
    d_proj: int = 16
    dec_hidden: int = 512
    adapter_mixing: str = "attention"
    freeze_backbone: bool = False
    rscl_backbone_grad: bool = True
    batch_size: int = 32
    max_steps: int = 3000
    lr: float = 1e-3
    warmup_steps: int = 100
    lr_schedule: str = "cosine"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    tau: float = 0.2
    beta: float = 1.0
    gamma: float = 10.0
    lambda0: float = 1.0
    lambda_schedule: str = "cosine"
    rscl_reduction: str = "mean"
    supervision: str = "proprio_state"
    augmentation: str = "view_cutoff"
    cutoff_p: float = 0.1
    cutoff_stage: str = "tokens"
    sample_steps: int = 16
    train_seed: int = 0
    eval_seed: int = 0
    eval_every: int = 500
    eval_episodes: int = 100
    checkpoint_every: int = 500
    out_dir: str = "runs/default"
    resume_from: str = ""
    cknna_k: int = 10
    analysis_window: int = 2
    analysis_per_task: int = 10

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positive = (
            "n_traj", "n_views", "view_dim", "horizon", "t_max", "n_tok", "d_model", "d_hidden",
            "d_proj", "dec_hidden", "batch_size", "lr", "tau", "beta", "gamma", "sample_steps",
            "beta1", "beta2", "adam_eps", "cknna_k", "analysis_window", "analysis_per_task",
        )
        for k in positive:
            if not getattr(self, k) > 0:
                raise ConfigError(f"{k} must be positive, got {getattr(self, k)!r}")
        nonneg = ("max_steps", "warmup_steps", "weight_decay", "lambda0", "eval_every",
                  "eval_episodes", "checkpoint_every", "sigma_obs")
        for k in nonneg:
            if getattr(self, k) < 0:
                raise ConfigError(f"{k} must be non-negative, got {getattr(self, k)!r}")
        if not (self.beta1 < 1 and self.beta2 < 1):
            raise ConfigError("Adam betas must be < 1")
        if self.supervision not in SUPERVISION_KINDS + ("none",):
            raise ConfigError(f"unknown supervision {self.supervision!r}")
        if self.augmentation not in AUGMENTATION_KINDS:
            raise ConfigError(f"unknown augmentation {self.augmentation!r}")
        choices = {
            "adapter_mixing": ("attention", "tokenwise"),
            "lr_schedule": ("cosine", "constant"),
            "lambda_schedule": ("cosine", "off"),
            "rscl_reduction": REDUCTIONS,
            "cutoff_stage": ("tokens", "embedding"),
        }
        for k, allowed in choices.items():
            if getattr(self, k) not in allowed:
                raise ConfigError(f"{k} must be one of {allowed}, got {getattr(self, k)!r}")
        if self.augmentation in ("token_cutoff", "feature_cutoff") and not 0 < self.cutoff_p < 1:
            raise ConfigError("cutoff_p must be in (0, 1)")
        if self.cutoff_stage == "embedding" and self.augmentation != "view_cutoff":
            raise ConfigError("cutoff_stage=embedding only applies to view_cutoff")
        if self.n_views < 2 and self.augmentation == "view_cutoff":
            raise ConfigError("view_cutoff requires n_views >= 2")

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(
            n_views=self.n_views, view_dim=self.view_dim, n_tok=self.n_tok, d_model=self.d_model,
            d_hidden=self.d_hidden, d_proj=self.d_proj, adapter_mixing=self.adapter_mixing,
            horizon=self.horizon, dec_hidden=self.dec_hidden,
        )

    @property
    def env(self) -> EnvConfig:
        return EnvConfig(
            n_views=self.n_views, view_dim=self.view_dim, horizon=self.horizon,
            t_max=self.t_max, sigma_obs=self.sigma_obs,
        )

    @property
    def target(self) -> SupervisionTarget | None:
        if self.supervision == "none":
            return None
        gamma = self.gamma if self.supervision == "action_sequence_dtw" else None
        return SupervisionTarget(self.supervision, gamma)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in fields(TrainConfig)}
assert set(_FIELDS) == set(DOCS), "every config key must be documented"


def coerce(key: str, raw: Any) -> Any:
    """Convert a raw string (or value) to the declared type of ``key``."""
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    typ = _FIELDS[key].type
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if typ == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"key {key!r}: cannot parse {raw!r} as {typ}") from None
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            out[key] = coerce(key, value)
        except ConfigError as e:
            raise ConfigError(f"{source}:{lineno}: {e}") from None
    return out


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> TrainConfig:
    """Defaults, then the file, then overrides (CLI wins)."""
    values: dict[str, Any] = {}
    if path:
        values.update(parse_config_text(Path(path).read_text(), str(path)))
    for k, v in (overrides or {}).items():
        values[k] = coerce(k, v)
    return TrainConfig(**values)


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"# {DOCS[k]}\n{k} = {v}")
    return "\n".join(lines) + "\n"
