"""Trajectory datasets: return-to-go computation, normalization statistics,
window sampling, noise injection, dataset generation against the toy
environments, and a JSON-lines file format with a stats sidecar.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .envs import ToyEnv, expert_action, run_episode

STD_FLOOR = 1e-6
DEFAULT_RTG_SCALE = 1000.0

# medium-policy noise, calibrated so the mean normalized score sits near
# one third of expert (band [20, 45]); see the stats sidecar for anchors
MEDIUM_SIGMA = {"point-mass-2d": 5.0, "damped-chain": 2.5}

BEHAVIORS = ("expert", "medium", "replay-mix")


class DatasetError(ValueError):
    """Base class for trajectory-file problems."""


class MalformedLineError(DatasetError):
    pass


class RaggedArrayError(DatasetError):
    pass


class NonFiniteValueError(DatasetError):
    pass


def compute_rtg(rewards) -> np.ndarray:
    """Suffix sums: rtg[t] = rewards[t] + rtg[t+1], rtg[T] = 0."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size == 0:
        return np.zeros(0)
    return np.cumsum(rewards[::-1])[::-1].copy()


@dataclass
class Trajectory:
    """One episode; rtgs are derived from rewards unless supplied."""

    states: np.ndarray   # (T, state_dim)
    actions: np.ndarray  # (T, action_dim)
    rewards: np.ndarray  # (T,)
    terminal: bool = True
    rtgs: np.ndarray | None = None

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        if self.rtgs is None:
            self.rtgs = compute_rtg(self.rewards)
        t = len(self.rewards)
        if not (len(self.states) == len(self.actions) == len(self.rtgs) == t) or t < 1:
            raise ValueError("trajectory arrays must share length T >= 1")

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def episode_return(self) -> float:
        return float(self.rewards.sum())


@dataclass
class DatasetStats:
    state_mean: np.ndarray
    state_std: np.ndarray        # floored at 1e-6
    rtg_scale: float = DEFAULT_RTG_SCALE
    max_return: float = 0.0
    expert_score: float | None = None
    random_score: float | None = None

    def normalize_state(self, s: np.ndarray) -> np.ndarray:
        return (s - self.state_mean) / self.state_std

    def denormalize_state(self, s: np.ndarray) -> np.ndarray:
        return s * self.state_std + self.state_mean

    def to_dict(self) -> dict:
        return {
            "mean": self.state_mean.tolist(),
            "std": self.state_std.tolist(),
            "rtg_scale": self.rtg_scale,
            "max_return": self.max_return,
            "expert_score": self.expert_score,
            "random_score": self.random_score,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetStats":
        return cls(
            state_mean=np.asarray(d["mean"], dtype=np.float64),
            state_std=np.asarray(d["std"], dtype=np.float64),
            rtg_scale=float(d["rtg_scale"]),
            max_return=float(d.get("max_return", 0.0)),
            expert_score=d.get("expert_score"),
            random_score=d.get("random_score"),
        )


def compute_stats(dataset: list[Trajectory], rtg_scale: float = DEFAULT_RTG_SCALE) -> DatasetStats:
    all_states = np.concatenate([t.states for t in dataset], axis=0)
    std = all_states.std(axis=0)
    return DatasetStats(
        state_mean=all_states.mean(axis=0),
        state_std=np.maximum(std, STD_FLOOR),
        rtg_scale=rtg_scale,
        max_return=max(t.episode_return for t in dataset),
    )


@dataclass
class TrajectoryWindow:
    """A left-padded training window of ``length`` steps ending at step t.

    States are normalized and rtgs divided by the scale divisor; actions
    (including the final-step target) stay in raw action units. Next-step
    targets carry a validity mask that excludes each episode's last step.
    """

    rtgs: np.ndarray         # (l, 1)
    states: np.ndarray       # (l, S)
    actions: np.ndarray      # (l, A)
    timesteps: np.ndarray    # (l,) int
    pad: np.ndarray          # (l,) bool, True at padded slots
    target_action: np.ndarray  # (A,) final-step action, unnormalized
    next_rtgs: np.ndarray    # (l, 1) scaled
    next_states: np.ndarray  # (l, S) normalized
    next_valid: np.ndarray   # (l,) bool


def sample_window(traj: Trajectory, t: int, length: int, stats: DatasetStats) -> TrajectoryWindow:
    if not 0 <= t < len(traj):
        raise IndexError(f"step {t} out of range for length-{len(traj)} episode")
    lo = t + 1 - min(t + 1, length)
    n = t + 1 - lo
    s_dim = traj.states.shape[1]
    a_dim = traj.actions.shape[1]

    rtgs = np.zeros((length, 1))
    states = np.zeros((length, s_dim))
    actions = np.zeros((length, a_dim))
    timesteps = np.zeros(length, dtype=np.int64)
    pad = np.ones(length, dtype=bool)
    next_rtgs = np.zeros((length, 1))
    next_states = np.zeros((length, s_dim))
    next_valid = np.zeros(length, dtype=bool)

    sl = slice(length - n, length)
    rtgs[sl, 0] = traj.rtgs[lo:t + 1] / stats.rtg_scale
    states[sl] = stats.normalize_state(traj.states[lo:t + 1])
    actions[sl] = traj.actions[lo:t + 1]
    timesteps[sl] = np.arange(lo, t + 1)
    pad[sl] = False

    has_next = np.arange(lo, t + 1) + 1 < len(traj)
    next_valid[sl] = has_next
    idx_next = np.arange(lo, t + 1)[has_next] + 1
    rows = np.arange(length - n, length)[has_next]
    next_rtgs[rows, 0] = traj.rtgs[idx_next] / stats.rtg_scale
    next_states[rows] = stats.normalize_state(traj.states[idx_next])

    return TrajectoryWindow(
        rtgs=rtgs, states=states, actions=actions, timesteps=timesteps, pad=pad,
        target_action=traj.actions[t].copy(),
        next_rtgs=next_rtgs, next_states=next_states, next_valid=next_valid,
    )


@dataclass
class NoiseRecord:
    """Which (episode, step) pairs were corrupted, and their clean actions."""

    indices: list[tuple[int, int]]
    clean_actions: np.ndarray  # (k, A)
    fraction: float
    magnitude: float
    seed: int

    def to_dict(self) -> dict:
        return {
            "indices": [list(ix) for ix in self.indices],
            "clean_actions": self.clean_actions.tolist(),
            "fraction": self.fraction,
            "magnitude": self.magnitude,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseRecord":
        return cls(
            indices=[tuple(ix) for ix in d["indices"]],
            clean_actions=np.asarray(d["clean_actions"], dtype=np.float64),
            fraction=float(d["fraction"]),
            magnitude=float(d["magnitude"]),
            seed=int(d["seed"]),
        )


def inject_action_noise(
    dataset: list[Trajectory],
    fraction: float,
    magnitude: float,
    seed: int,
    bounds: tuple[float, float] = (-1.0, 1.0),
) -> tuple[list[Trajectory], NoiseRecord]:
    """Replace exactly round(fraction * total_steps) uniformly chosen actions
    with a + U(-magnitude, magnitude), clipped to bounds. Returns the new
    dataset and the corrupted-index record (for clean-error measurement)."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"noise fraction {fraction} outside [0, 1]")
    lengths = [len(t) for t in dataset]
    total = int(sum(lengths))
    k = int(round(fraction * total))
    rng = np.random.default_rng([seed, 0x5EED])
    flat = rng.choice(total, size=k, replace=False) if k else np.array([], dtype=np.int64)
    flat = np.sort(flat)

    offsets = np.cumsum([0] + lengths)
    out = []
    for traj in dataset:
        out.append(Trajectory(
            states=traj.states.copy(), actions=traj.actions.copy(),
            rewards=traj.rewards.copy(), terminal=traj.terminal,
        ))
    indices: list[tuple[int, int]] = []
    clean = []
    for f in flat:
        ep = int(np.searchsorted(offsets, f, side="right") - 1)
        t = int(f - offsets[ep])
        clean.append(out[ep].actions[t].copy())
        noise = rng.uniform(-magnitude, magnitude, size=out[ep].actions.shape[1])
        out[ep].actions[t] = np.clip(out[ep].actions[t] + noise, bounds[0], bounds[1])
        indices.append((ep, t))
    a_dim = dataset[0].actions.shape[1] if dataset else 0
    record = NoiseRecord(
        indices=indices,
        clean_actions=np.array(clean).reshape(len(indices), a_dim),
        fraction=fraction, magnitude=magnitude, seed=seed,
    )
    return out, record


# -- dataset generation -------------------------------------------------------


def gen_dataset(
    env: ToyEnv,
    behavior: str,
    n_episodes: int,
    seed: int,
    medium_sigma: float | None = None,
    anchor_episodes: int = 100,
) -> tuple[list[Trajectory], DatasetStats]:
    """Simulate a behavior policy and attach normalized-score anchors.

    expert: the proportional controller; medium: expert + Gaussian action
    noise; replay-mix: alternating medium and uniform-random episodes.
    """
    if behavior not in BEHAVIORS:
        raise ValueError(f"behavior must be one of {BEHAVIORS}, got {behavior!r}")
    sigma = MEDIUM_SIGMA[env.kind] if medium_sigma is None else medium_sigma
    rng = np.random.default_rng([seed, 0xDA7A])

    def medium_policy(state, t):
        return expert_action(env, state) + rng.normal(0.0, sigma, env.action_dim)

    def random_policy(state, t):
        return rng.uniform(env.action_low, env.action_high, env.action_dim)

    dataset: list[Trajectory] = []
    for ep in range(n_episodes):
        if behavior == "expert":
            policy = lambda s, t: expert_action(env, s)
        elif behavior == "medium":
            policy = medium_policy
        else:
            policy = medium_policy if ep % 2 == 0 else random_policy
        states, actions, rewards = run_episode(env, policy, rng)
        dataset.append(Trajectory(states=states, actions=actions, rewards=rewards))

    stats = compute_stats(dataset)
    if behavior == "expert":
        stats.expert_score = float(np.mean([t.episode_return for t in dataset]))
    else:
        e_rng = np.random.default_rng([seed, 0xE49E])
        stats.expert_score = float(np.mean([
            run_episode(env, lambda s, t: expert_action(env, s), e_rng)[2].sum()
            for _ in range(anchor_episodes)
        ]))
    r_rng = np.random.default_rng([seed, 0xA4D0])
    stats.random_score = float(np.mean([
        run_episode(
            env,
            lambda s, t: r_rng.uniform(env.action_low, env.action_high, env.action_dim),
            r_rng,
        )[2].sum()
        for _ in range(anchor_episodes)
    ]))
    return dataset, stats


# -- JSONL persistence --------------------------------------------------------


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _fmt_matrix(m: np.ndarray) -> str:
    return "[" + ", ".join("[" + ", ".join(_fmt(v) for v in row) + "]" for row in m) + "]"


def save_trajectories(dataset: list[Trajectory], path) -> None:
    """One episode per line; floats carry 17 significant digits so float64
    values round-trip exactly."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for traj in dataset:
        lines.append(
            '{"states": ' + _fmt_matrix(traj.states)
            + ', "actions": ' + _fmt_matrix(traj.actions)
            + ', "rewards": [' + ", ".join(_fmt(v) for v in traj.rewards) + "]"
            + ', "terminal": ' + ("true" if traj.terminal else "false") + "}"
        )
    path.write_text("\n".join(lines) + ("\n" if lines else ""))


def load_trajectories(path) -> list[Trajectory]:
    """Parse a JSONL trajectory file; malformed JSON, ragged arrays, and
    non-finite values each raise a distinct error naming the line."""
    path = Path(path)
    dataset: list[Trajectory] = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise MalformedLineError(f"{path}:{lineno}: malformed JSON ({e.msg})") from e
            try:
                states = np.array(rec["states"], dtype=np.float64)
                actions = np.array(rec["actions"], dtype=np.float64)
                rewards = np.array(rec["rewards"], dtype=np.float64)
            except (KeyError, TypeError, ValueError) as e:
                raise RaggedArrayError(f"{path}:{lineno}: ragged or missing arrays") from e
            if states.ndim != 2 or actions.ndim != 2 or rewards.ndim != 1:
                raise RaggedArrayError(
                    f"{path}:{lineno}: ragged arrays "
                    f"(states {states.shape}, actions {actions.shape}, rewards {rewards.shape})"
                )
            if not (len(states) == len(actions) == len(rewards)):
                raise RaggedArrayError(f"{path}:{lineno}: arrays disagree on episode length")
            if not (np.all(np.isfinite(states)) and np.all(np.isfinite(actions))
                    and np.all(np.isfinite(rewards))):
                raise NonFiniteValueError(f"{path}:{lineno}: non-finite value")
            dataset.append(Trajectory(
                states=states, actions=actions, rewards=rewards,
                terminal=bool(rec.get("terminal", True)),
            ))
    return dataset


def stats_sidecar_path(data_path) -> Path:
    return Path(data_path).with_suffix(".stats.json")


def noise_sidecar_path(data_path) -> Path:
    return Path(data_path).with_suffix(".noise.json")


def save_stats(stats: DatasetStats, path) -> None:
    Path(path).write_text(json.dumps(stats.to_dict(), indent=2, sort_keys=True) + "\n")


def load_stats(path) -> DatasetStats:
    return DatasetStats.from_dict(json.loads(Path(path).read_text()))
