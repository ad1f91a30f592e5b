"""Joint flow-matching + state-weighted contrastive training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from . import tensor as T
from .analysis import cknna, dump_embeddings
from .config import TrainConfig
from .contrastive import augment, embedding_view_cutoff, lambda_schedule, rscl_loss, supervision_weights
from .encoder import adapter_forward, backbone_forward, init_encoder_params, project
from .flowmatch import decoder_forward, fm_loss, init_decoder_params, interpolate, sample_timestep
from .policy import ModelPolicy, normalize_actions
from .serialize import decode_array, encode_array, write_json_atomic
from .synthenv import Dataset, ViewRenderer, evaluate_policy, read_dataset
from .tensor import AdamState, Tensor, adam_step

log = logging.getLogger(__name__)

GROUPS = ("backbone", "adapter", "projector", "decoder")
CHECKPOINT_FORMAT = "rsclvla-checkpoint-1"
# keys that only say where a run lives; excluded so identical runs give identical checkpoints
_LOCATION_KEYS = ("out_dir", "resume_from", "dataset")


class TrainingError(RuntimeError):
    pass


class NonFiniteLossError(TrainingError):
    def __init__(self, msg: str, step: int, batch_index: list[tuple[int, int]]):
        super().__init__(msg)
        self.step = step
        self.batch_index = batch_index


def group_of(name: str) -> str:
    return name.split(".", 1)[0]


# ---------------------------------------------------------------- batches


@dataclass
class Prepared:
    """Flattened per-step arrays of a dataset, ready for uniform sampling."""

    index: np.ndarray  # (S, 2) trajectory, timestep
    views: np.ndarray  # (S, V, view_dim)
    task_id: np.ndarray  # (S,)
    q: np.ndarray  # (S, 3) normalized
    chunk: np.ndarray  # (S, H, 3) normalized actions

    def __len__(self) -> int:
        return len(self.index)


def prepare(ds: Dataset, horizon: int) -> Prepared:
    if not ds.trajectories:
        raise TrainingError("empty dataset")
    idx, views, task, q, chunk = [], [], [], [], []
    for i, tr in enumerate(ds.trajectories):
        for t in range(len(tr)):
            idx.append((i, t))
            chunk.append(tr.action_chunk(t, horizon))
        views.append(tr.views)
        q.append(tr.proprio)
        task += [tr.task_id] * len(tr)
    return Prepared(
        np.array(idx),
        np.concatenate(views),
        np.array(task),
        ds.normalize_proprio(np.concatenate(q)),
        normalize_actions(np.array(chunk)),
    )


def assemble_batch(data: Prepared, batch_size: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Uniform (trajectory, timestep) samples with every supervision field attached."""
    if len(data) == 0:
        raise TrainingError("empty dataset")
    sel = rng.integers(0, len(data), size=batch_size)
    chunk = data.chunk[sel]
    return {
        "index": data.index[sel],
        "views": data.views[sel],
        "task_id": data.task_id[sel],
        "q": data.q[sel],
        "chunk": chunk,
        "next_action": chunk[:, 0],
    }


@dataclass
class Draws:
    eps: np.ndarray
    s: np.ndarray
    aug_seed: int


def draw(cfg: TrainConfig, batch_size: int, noise_rng, aug_rng) -> Draws:
    eps = noise_rng.standard_normal((batch_size, cfg.horizon, 3))
    s = sample_timestep(noise_rng, size=batch_size)
    return Draws(eps, s, int(aug_rng.integers(0, 2**63 - 1)))


# ---------------------------------------------------------------- losses


def compute_losses(
    params: dict[str, Tensor], batch: dict[str, np.ndarray], draws: Draws, cfg: TrainConfig
) -> tuple[Tensor, Tensor | None]:
    """Flow-matching loss and (unless supervision == 'none') the contrastive loss."""
    mcfg = cfg.model
    seq = backbone_forward(params, batch["views"], batch["task_id"], mcfg)
    h, w = adapter_forward(params, seq, mcfg)
    sample = interpolate(batch["chunk"], draws.eps, draws.s)
    pred = decoder_forward(params, h, sample.a_s, batch["q"], sample.s, mcfg)
    loss_fm = fm_loss(pred, sample)

    target = cfg.target
    if target is None:
        return loss_fm, None
    if not cfg.rscl_backbone_grad:
        seq = seq.with_tokens(seq.tokens.detach())
        _, w = adapter_forward(params, seq, mcfg)
    z = project(params, w)
    aug_rng = np.random.default_rng(draws.aug_seed)
    if cfg.augmentation == "none":
        z_aug = z
    elif cfg.cutoff_stage == "embedding":
        z_aug, _ = embedding_view_cutoff(z, cfg.n_views, aug_rng)
    else:
        seq_aug = augment(seq, cfg.augmentation, aug_rng, cfg.cutoff_p)
        _, w_aug = adapter_forward(params, seq_aug, mcfg)
        z_aug = project(params, w_aug)
    weights = supervision_weights(batch, target, cfg.beta)
    return loss_fm, rscl_loss(z, z_aug, weights, cfg.tau, cfg.rscl_reduction)


def lambda_at(cfg: TrainConfig, step: int) -> float:
    if cfg.lambda_schedule == "off" or cfg.max_steps == 0:
        return cfg.lambda0
    return cfg.lambda0 * lambda_schedule(min(step, cfg.max_steps), cfg.max_steps)


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Linear warmup then cosine decay to zero at max_steps."""
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    if cfg.lr_schedule == "constant":
        return cfg.lr
    span = max(1, cfg.max_steps - cfg.warmup_steps)
    frac = min(1.0, (step - cfg.warmup_steps) / span)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def total_loss(loss_fm: Tensor, loss_rscl: Tensor | None, lam: float) -> Tensor:
    if loss_rscl is None:
        return loss_fm
    return T.add(loss_fm, T.scale(loss_rscl, lam))


# ---------------------------------------------------------------- state


@dataclass
class TrainState:
    step: int
    params: dict[str, Tensor]
    adam: AdamState
    rngs: dict[str, np.random.Generator]

    def trainable(self, cfg: TrainConfig) -> list[str]:
        return [n for n in self.params if not (cfg.freeze_backbone and group_of(n) == "backbone")]


def _mark_trainable(params: dict[str, Tensor], cfg: TrainConfig) -> None:
    for name, p in params.items():
        p.requires_grad = not (cfg.freeze_backbone and group_of(name) == "backbone")


def init_state(cfg: TrainConfig) -> TrainState:
    init_ss, batch_ss, noise_ss, aug_ss = np.random.SeedSequence(cfg.train_seed).spawn(4)
    init_rng = np.random.default_rng(init_ss)
    params = init_encoder_params(cfg.model, init_rng)
    params.update(init_decoder_params(cfg.model, init_rng))
    _mark_trainable(params, cfg)
    adam = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
    rngs = {
        "batch": np.random.default_rng(batch_ss),
        "noise": np.random.default_rng(noise_ss),
        "aug": np.random.default_rng(aug_ss),
    }
    return TrainState(0, params, adam, rngs)


def train_step(state: TrainState, data: Prepared, cfg: TrainConfig) -> dict[str, Any]:
    """One joint update.  Mutates ``state`` and returns the step's metrics."""
    batch = assemble_batch(data, cfg.batch_size, state.rngs["batch"])
    draws = draw(cfg, cfg.batch_size, state.rngs["noise"], state.rngs["aug"])
    lam = lambda_at(cfg, state.step)
    try:
        loss_fm, loss_rscl = compute_losses(state.params, batch, draws, cfg)
        total = total_loss(loss_fm, loss_rscl, lam)
    except T.NonFiniteError as e:
        raise NonFiniteLossError(
            f"non-finite forward at step {state.step}: {e}", state.step, batch["index"].tolist()
        ) from e
    names = state.trainable(cfg)
    for p in state.params.values():
        p.grad = None
    T.backward(total)
    grads = {n: state.params[n].grad if state.params[n].grad is not None else np.zeros_like(state.params[n].data)
             for n in names}
    # sorted: a resumed run loads params in checkpoint (sorted) order, and the sum must not depend on it
    gnorm = math.sqrt(sum(float((grads[n] * grads[n]).sum()) for n in sorted(grads)))
    if not math.isfinite(gnorm):
        raise NonFiniteLossError(f"non-finite gradient at step {state.step}", state.step, batch["index"].tolist())
    new = adam_step(state.adam, {n: state.params[n].data for n in names}, grads, lr=lr_at(cfg, state.step))
    for n, arr in new.items():
        state.params[n].data = arr
        state.params[n].grad = None
    state.step += 1
    return {
        "step": state.step,
        "loss_fm": float(loss_fm.data),
        "loss_rscl": float(loss_rscl.data) if loss_rscl is not None else 0.0,
        "lambda": lam,
        "total": float(total.data),
        "grad_norm": gnorm,
    }


# ---------------------------------------------------------------- checkpoints


def _run_config(cfg: TrainConfig) -> dict[str, Any]:
    return {k: v for k, v in cfg.to_dict().items() if k not in _LOCATION_KEYS}


def save_checkpoint(path, state: TrainState, cfg: TrainConfig, ds_meta: dict[str, Any]) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "step": state.step,
        "config": _run_config(cfg),
        "data": ds_meta,
        "params": {n: encode_array(p.data) for n, p in state.params.items()},
        "adam": {
            "step": state.adam.step,
            "m": {n: encode_array(a) for n, a in state.adam.m.items()},
            "v": {n: encode_array(a) for n, a in state.adam.v.items()},
        },
        "rng": {k: g.bit_generator.state for k, g in state.rngs.items()},
    }
    write_json_atomic(path, payload)


@dataclass
class Checkpoint:
    step: int
    config: dict[str, Any]
    data: dict[str, Any]
    params: dict[str, Tensor]
    raw: dict[str, Any]

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.config)

    def policy(self, k: int | None = None) -> ModelPolicy:
        cfg = self.train_config
        return ModelPolicy(
            self.params, cfg.model, self.data["proprio_mean"], self.data["proprio_std"],
            k=cfg.sample_steps if k is None else k,
        )


def load_checkpoint(path) -> Checkpoint:
    raw = json.loads(Path(path).read_text())
    if raw.get("format") != CHECKPOINT_FORMAT:
        raise TrainingError(f"{path}: not a checkpoint (format {raw.get('format')!r})")
    params = {n: Tensor(decode_array(a), requires_grad=True) for n, a in raw["params"].items()}
    return Checkpoint(raw["step"], raw["config"], raw["data"], params, raw)


def state_from_checkpoint(ck: Checkpoint, cfg: TrainConfig) -> TrainState:
    for k, v in _run_config(cfg).items():
        if k in ("max_steps", "eval_every", "eval_episodes", "checkpoint_every"):
            continue
        if ck.config.get(k) != v:
            raise TrainingError(f"resume config mismatch on {k!r}: checkpoint {ck.config.get(k)!r}, run {v!r}")
    _mark_trainable(ck.params, cfg)
    a = ck.raw["adam"]
    adam = AdamState(
        lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps, weight_decay=cfg.weight_decay,
        step=a["step"],
        m={n: decode_array(x) for n, x in a["m"].items()},
        v={n: decode_array(x) for n, x in a["v"].items()},
    )
    rngs = {}
    for k, st in ck.raw["rng"].items():
        g = np.random.default_rng()
        g.bit_generator.state = st
        rngs[k] = g
    return TrainState(ck.step, ck.params, adam, rngs)


def dataset_meta(ds: Dataset) -> dict[str, Any]:
    return {
        "proprio_mean": ds.proprio_mean.tolist(),
        "proprio_std": ds.proprio_std.tolist(),
        "render_seed": ds.render_seed,
        "env": ds.env.__dict__.copy(),
    }


# ---------------------------------------------------------------- loop


def evaluate_state(state: TrainState, cfg: TrainConfig, ds: Dataset, episodes: int | None = None) -> dict[str, Any]:
    policy = ModelPolicy(state.params, cfg.model, ds.proprio_mean, ds.proprio_std, k=cfg.sample_steps)
    renderer = ViewRenderer(ds.render_seed, ds.env)
    res = evaluate_policy(policy, episodes or cfg.eval_episodes, cfg.eval_seed, renderer)
    dump = dump_embeddings(state.params, cfg.model, ds, cfg.analysis_window, cfg.analysis_per_task)
    return {"step": state.step, "success_rate": res.success_rate, "cknna_proprio": cknna(dump.x, dump.q, cfg.cknna_k)}


@dataclass
class TrainResult:
    checkpoint: Path
    metrics: Path
    state: TrainState


def checkpoint_path(out_dir: Path, step: int) -> Path:
    return out_dir / f"ckpt_{step:06d}.json"


def train(cfg: TrainConfig, ds: Dataset | None = None) -> TrainResult:
    """Run (or resume) training to ``cfg.max_steps``; metrics go to out_dir/metrics.jsonl."""
    ds = read_dataset(cfg.dataset) if ds is None else ds
    data = prepare(ds, cfg.horizon)
    meta = dataset_meta(ds)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"

    if cfg.resume_from:
        state = state_from_checkpoint(load_checkpoint(cfg.resume_from), cfg)
        kept = []
        if metrics_path.exists():
            kept = [ln for ln in metrics_path.read_text().splitlines() if json.loads(ln)["step"] <= state.step]
        metrics_path.write_text("".join(ln + "\n" for ln in kept))
    else:
        state = init_state(cfg)
        metrics_path.write_text("")
        save_checkpoint(checkpoint_path(out, 0), state, cfg, meta)

    last = checkpoint_path(out, state.step)
    with open(metrics_path, "a") as fh:
        while state.step < cfg.max_steps:
            try:
                rec = train_step(state, data, cfg)
            except NonFiniteLossError as e:
                write_json_atomic(out / "nonfinite_dump.json", {"step": e.step, "batch_index": e.batch_index})
                raise
            fh.write(json.dumps(rec) + "\n")
            done = state.step == cfg.max_steps
            if done or (cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0):
                last = checkpoint_path(out, state.step)
                save_checkpoint(last, state, cfg, meta)
            if cfg.eval_every and state.step % cfg.eval_every == 0:
                ev = evaluate_state(state, cfg, ds)
                log.info("step %d success %.3f cknna %.3f", ev["step"], ev["success_rate"], ev["cknna_proprio"])
                fh.write(json.dumps(ev) + "\n")
            fh.flush()
    return TrainResult(last, metrics_path, state)
