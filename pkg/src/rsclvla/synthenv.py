"""Planar pick-and-place world, scripted expert, multi-view rendering, datasets."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

D_ACTION = 3
D_PROPRIO = 3

# raw action = center + scale * normalized action; normalized range is [-1, 1]
ACTION_CENTER = np.array([0.0, 0.0, 0.5])
ACTION_SCALE = np.array([0.1, 0.1, 0.5])


class EnvError(ValueError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    n_views: int = 2
    view_dim: int = 16
    horizon: int = 8
    t_max: int = 200
    pick_radius: float = 0.05
    place_radius: float = 0.05
    sigma_obs: float = 0.01
    max_delta: float = 0.1
    expert_gain: float = 0.5
    n_tasks: int = 2
    min_separation: float = 0.25

    def validate(self) -> None:
        if self.n_views < 2:
            raise EnvError(f"n_views must be >= 2 (view cutoff needs a surviving view), got {self.n_views}")
        if self.n_views > 2:
            raise EnvError("only the exterior and wrist views are modelled (n_views = 2)")
        if self.view_dim < 1 or self.horizon < 1 or self.t_max < 1:
            raise EnvError("view_dim, horizon and t_max must be positive")
        if self.sigma_obs < 0:
            raise EnvError("sigma_obs must be non-negative")


@dataclass(frozen=True)
class SceneState:
    gripper_xy: tuple[float, float]
    gripper_open: float
    object_xy: tuple[float, float]
    regions: tuple[tuple[float, float], ...]
    holding: bool
    task_id: int

    @property
    def target_xy(self) -> tuple[float, float]:
        return self.regions[self.task_id]

    def proprio(self) -> np.ndarray:
        return np.array([*self.gripper_xy, self.gripper_open])


def _dist(a, b) -> float:
    return float(np.hypot(a[0] - b[0], a[1] - b[1]))


def _clip01(xy) -> tuple[float, float]:
    return (float(min(max(xy[0], 0.0), 1.0)), float(min(max(xy[1], 0.0), 1.0)))


def is_success(state: SceneState, cfg: EnvConfig) -> bool:
    return (not state.holding) and _dist(state.object_xy, state.target_xy) < cfg.place_radius


def sample_initial_state(rng: np.random.Generator, cfg: EnvConfig, task_id: int | None = None) -> SceneState:
    """Random start with gripper, object and the target regions mutually separated."""
    if task_id is None:
        task_id = int(rng.integers(cfg.n_tasks))
    while True:
        pts = rng.uniform(0.1, 0.9, size=(2 + cfg.n_tasks, 2))
        d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
        if d[np.triu_indices(len(pts), 1)].min() >= cfg.min_separation:
            break
    return SceneState(
        gripper_xy=tuple(pts[0]),
        gripper_open=1.0,
        object_xy=tuple(pts[1]),
        regions=tuple(tuple(p) for p in pts[2:]),
        holding=False,
        task_id=task_id,
    )


def env_step(state: SceneState, action: Sequence[float], cfg: EnvConfig = EnvConfig()) -> SceneState:
    """Move the gripper by the clipped delta, then apply the grip command."""
    a = np.asarray(action, dtype=np.float64)
    if a.shape != (D_ACTION,) or not np.isfinite(a).all():
        raise EnvError(f"action must be {D_ACTION} finite reals, got {action!r}")
    dx, dy = np.clip(a[:2], -cfg.max_delta, cfg.max_delta)
    grip = float(np.clip(a[2], 0.0, 1.0))

    g = _clip01((state.gripper_xy[0] + dx, state.gripper_xy[1] + dy))
    holding = state.holding
    obj = g if holding else state.object_xy
    if grip < 0.5:
        opened = 0.0
        if not holding and _dist(g, obj) < cfg.pick_radius:
            holding, obj = True, g
    else:
        opened = 1.0
        holding = False
    return replace(state, gripper_xy=g, gripper_open=opened, object_xy=_clip01(obj), holding=holding)


def scripted_expert(state: SceneState, cfg: EnvConfig = EnvConfig()) -> np.ndarray:
    """Proportional controller: reach, close, carry, release."""

    def toward(goal):
        d = np.asarray(goal) - np.asarray(state.gripper_xy)
        return np.clip(cfg.expert_gain * d, -cfg.max_delta, cfg.max_delta)

    if not state.holding:
        if _dist(state.gripper_xy, state.object_xy) < cfg.pick_radius:
            return np.array([*toward(state.object_xy), 0.0])
        return np.array([*toward(state.object_xy), 1.0])
    if _dist(state.object_xy, state.target_xy) < cfg.place_radius:
        return np.array([0.0, 0.0, 1.0])
    return np.array([*toward(state.target_xy), 0.0])


class ViewRenderer:
    """Two fixed random linear "cameras" frozen at ``seed``.

    The exterior view sees absolute positions of gripper, object and every
    target region; the wrist view only sees the object relative to the gripper.
    """

    def __init__(self, seed: int, cfg: EnvConfig = EnvConfig()):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng([seed, 0x5EED])
        n_ext = 4 + 2 * cfg.n_tasks + 2
        self.exterior = rng.normal(size=(cfg.view_dim, n_ext)) / np.sqrt(n_ext)
        self.wrist = rng.normal(size=(cfg.view_dim, 4)) / np.sqrt(4)

    @staticmethod
    def exterior_features(s: SceneState) -> np.ndarray:
        pos = np.array([*s.gripper_xy, *s.object_xy, *np.ravel(s.regions)]) * 2.0 - 1.0
        return np.concatenate([pos, [2 * s.gripper_open - 1, 2 * float(s.holding) - 1]])

    @staticmethod
    def wrist_features(s: SceneState) -> np.ndarray:
        rel = (np.asarray(s.object_xy) - np.asarray(s.gripper_xy)) * 5.0
        return np.array([*rel, 2 * s.gripper_open - 1, 2 * float(s.holding) - 1])

    def render(self, state: SceneState, rng: np.random.Generator | None = None) -> np.ndarray:
        views = np.stack([self.exterior @ self.exterior_features(state), self.wrist @ self.wrist_features(state)])
        if self.cfg.sigma_obs > 0:
            if rng is None:
                raise EnvError("a noise rng is required when sigma_obs > 0")
            views = views + rng.normal(0.0, self.cfg.sigma_obs, size=views.shape)
        return views


def render_views(state: SceneState, renderer: ViewRenderer, rng: np.random.Generator | None = None) -> np.ndarray:
    return renderer.render(state, rng)


# ---------------------------------------------------------------- datasets


@dataclass
class Trajectory:
    seed: int
    task_id: int
    views: np.ndarray  # (T, V, view_dim)
    proprio: np.ndarray  # (T, 3)
    actions: np.ndarray  # (T, 3)
    success: bool = True

    def __len__(self) -> int:
        return len(self.actions)

    def to_json(self) -> str:
        return json.dumps(
            {
                "seed": self.seed,
                "task_id": self.task_id,
                "success": self.success,
                "views": self.views.tolist(),
                "proprio": self.proprio.tolist(),
                "actions": self.actions.tolist(),
            }
        )

    @classmethod
    def from_json(cls, line: str) -> "Trajectory":
        d = json.loads(line)
        return cls(
            seed=int(d["seed"]),
            task_id=int(d["task_id"]),
            views=np.asarray(d["views"], dtype=np.float64),
            proprio=np.asarray(d["proprio"], dtype=np.float64),
            actions=np.asarray(d["actions"], dtype=np.float64),
            success=bool(d.get("success", True)),
        )

    def action_chunk(self, t: int, horizon: int) -> np.ndarray:
        """Actions t..t+H-1, padded by repeating the final action."""
        idx = np.minimum(np.arange(t, t + horizon), len(self) - 1)
        return self.actions[idx]


@dataclass
class Dataset:
    trajectories: list[Trajectory]
    proprio_mean: np.ndarray
    proprio_std: np.ndarray
    render_seed: int
    env: EnvConfig = field(default_factory=EnvConfig)
    discarded: int = 0

    def normalize_proprio(self, q: np.ndarray) -> np.ndarray:
        return (q - self.proprio_mean) / self.proprio_std

    @property
    def n_steps(self) -> int:
        return int(np.sum([len(t) for t in self.trajectories]))


def rollout_expert(rng: np.random.Generator, renderer: ViewRenderer, cfg: EnvConfig, seed: int) -> Trajectory:
    state = sample_initial_state(rng, cfg)
    views, prop, acts = [], [], []
    success = False
    for _ in range(cfg.t_max):
        a = scripted_expert(state, cfg)
        views.append(renderer.render(state, rng))
        prop.append(state.proprio())
        acts.append(a)
        state = env_step(state, a, cfg)
        if is_success(state, cfg):
            success = True
            break
    return Trajectory(seed, state.task_id, np.array(views), np.array(prop), np.array(acts), success)


def proprio_stats(trajs: Sequence[Trajectory]) -> tuple[np.ndarray, np.ndarray]:
    q = np.concatenate([t.proprio for t in trajs])
    std = q.std(axis=0)
    std[std < 1e-8] = 1.0
    return q.mean(axis=0), std


def generate_dataset(n_traj: int, cfg: EnvConfig = EnvConfig(), seed: int = 0, max_attempts: int = 10) -> Dataset:
    """Expert demonstrations; trajectory i uses seed + i, re-drawn on expert failure."""
    if n_traj <= 0:
        raise EnvError("n_traj must be positive")
    cfg.validate()
    renderer = ViewRenderer(seed, cfg)
    trajs, discarded = [], 0
    for i in range(n_traj):
        for attempt in range(max_attempts):
            tseed = seed + i
            rng = np.random.default_rng(tseed if attempt == 0 else [tseed, attempt])
            traj = rollout_expert(rng, renderer, cfg, tseed)
            if traj.success:
                break
            discarded += 1
        else:
            raise EnvError(f"expert failed {max_attempts} times for trajectory {i}")
        trajs.append(traj)
    mean, std = proprio_stats(trajs)
    return Dataset(trajs, mean, std, render_seed=seed, env=cfg, discarded=discarded)


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def stats_path(path: str | os.PathLike) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".stats.json")


def write_dataset(ds: Dataset, path: str | os.PathLike) -> None:
    path = Path(path)
    _atomic_write(path, "".join(t.to_json() + "\n" for t in ds.trajectories))
    side = {
        "proprio_mean": ds.proprio_mean.tolist(),
        "proprio_std": ds.proprio_std.tolist(),
        "render_seed": ds.render_seed,
        "n_traj": len(ds.trajectories),
        "discarded": ds.discarded,
        "env": asdict(ds.env),
    }
    _atomic_write(stats_path(path), json.dumps(side, indent=1) + "\n")


def read_dataset(path: str | os.PathLike) -> Dataset:
    path = Path(path)
    with open(path) as fh:
        trajs = [Trajectory.from_json(line) for line in fh if line.strip()]
    side = json.loads(stats_path(path).read_text())
    return Dataset(
        trajs,
        np.asarray(side["proprio_mean"]),
        np.asarray(side["proprio_std"]),
        render_seed=int(side["render_seed"]),
        env=EnvConfig(**side["env"]),
        discarded=int(side.get("discarded", 0)),
    )


# ---------------------------------------------------------------- evaluation


@dataclass
class Observation:
    """Batched observation handed to policies.

    ``scenes`` is privileged simulator state; learned policies must ignore it.
    """

    views: np.ndarray  # (E, V, view_dim)
    task_id: np.ndarray  # (E,)
    proprio: np.ndarray  # (E, 3), raw
    scenes: list[SceneState]


class ChunkPolicy(Protocol):
    def __call__(self, obs: Observation, rng: np.random.Generator) -> np.ndarray:
        """Return raw action chunks of shape (E, H, 3)."""


class ExpertPolicy:
    """Scripted expert exposed through the chunk interface (plans on a state copy)."""

    def __init__(self, cfg: EnvConfig = EnvConfig()):
        self.cfg = cfg

    def __call__(self, obs: Observation, rng: np.random.Generator) -> np.ndarray:
        out = np.zeros((len(obs.scenes), self.cfg.horizon, D_ACTION))
        for e, s in enumerate(obs.scenes):
            for k in range(self.cfg.horizon):
                a = scripted_expert(s, self.cfg)
                out[e, k] = a
                s = env_step(s, a, self.cfg)
        return out


class RandomPolicy:
    def __init__(self, cfg: EnvConfig = EnvConfig()):
        self.cfg = cfg

    def __call__(self, obs: Observation, rng: np.random.Generator) -> np.ndarray:
        e, h = len(obs.scenes), self.cfg.horizon
        d = rng.uniform(-self.cfg.max_delta, self.cfg.max_delta, size=(e, h, 2))
        g = rng.uniform(0.0, 1.0, size=(e, h, 1))
        return np.concatenate([d, g], axis=-1)


@dataclass
class EvalResult:
    success_rate: float
    episodes: list[dict]


def evaluate_policy(
    policy: ChunkPolicy | Callable,
    n_episodes: int,
    seed: int,
    renderer: ViewRenderer,
    cfg: EnvConfig | None = None,
) -> EvalResult:
    """Closed-loop rollouts that execute every sampled chunk in full before re-planning.

    All episodes advance in lockstep so the policy sees one batch per re-plan.
    """
    if n_episodes <= 0:
        raise EnvError("empty evaluation")
    cfg = renderer.cfg if cfg is None else cfg
    rngs = [np.random.default_rng([seed, e]) for e in range(n_episodes)]
    states = [sample_initial_state(r, cfg) for r in rngs]
    policy_rng = np.random.default_rng([seed, 0xA11])
    done = [False] * n_episodes
    success = [False] * n_episodes
    steps = [0] * n_episodes
    while not all(done):
        active = [e for e in range(n_episodes) if not done[e]]
        obs = Observation(
            views=np.stack([renderer.render(states[e], rngs[e]) for e in active]),
            task_id=np.array([states[e].task_id for e in active]),
            proprio=np.stack([states[e].proprio() for e in active]),
            scenes=[states[e] for e in active],
        )
        chunks = np.asarray(policy(obs, policy_rng), dtype=np.float64)
        for row, e in enumerate(active):
            for a in chunks[row]:
                states[e] = env_step(states[e], a, cfg)
                steps[e] += 1
                if is_success(states[e], cfg):
                    success[e] = done[e] = True
                    break
                if steps[e] >= cfg.t_max:
                    done[e] = True
                    break
    episodes = [
        {"episode": e, "task_id": states[e].task_id, "success": success[e], "steps": steps[e]}
        for e in range(n_episodes)
    ]
    return EvalResult(float(np.mean(success)), episodes)
