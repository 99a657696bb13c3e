"""Deterministic synthetic continuous-control environments.

Two variants:
  * point-mass-2d — state (pos_x, pos_y, vel_x, vel_y); velocity integrates
    a damped push toward the action, reward is the negative distance to a
    goal; horizon 60.
  * damped-chain — K coordinates with per-coordinate damping and a weak
    chain coupling; reward is the negative squared state norm.

Dynamics are pure functions of (state, action); reward is a pure function
of (state, action).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

POINT_MASS = "point-mass-2d"
DAMPED_CHAIN = "damped-chain"
ENV_KINDS = (POINT_MASS, DAMPED_CHAIN)


@dataclass(frozen=True)
class ToyEnv:
    kind: str = POINT_MASS
    horizon: int = 60
    goal: tuple[float, float] = (0.0, 0.0)
    chain_dim: int = 4
    action_low: float = -1.0
    action_high: float = 1.0

    def __post_init__(self):
        if self.kind not in ENV_KINDS:
            raise ValueError(f"unknown env kind {self.kind!r}")

    @property
    def state_dim(self) -> int:
        return 4 if self.kind == POINT_MASS else self.chain_dim

    @property
    def action_dim(self) -> int:
        return 2 if self.kind == POINT_MASS else self.chain_dim

    @property
    def action_bound(self) -> float:
        return max(abs(self.action_low), abs(self.action_high))


def env_reset(env: ToyEnv, rng: np.random.Generator) -> np.ndarray:
    if env.kind == POINT_MASS:
        pos = rng.uniform(-1.0, 1.0, size=2)
        return np.concatenate([pos, np.zeros(2)])
    return rng.uniform(-1.0, 1.0, size=env.chain_dim)


def env_step(
    env: ToyEnv, state: np.ndarray, action: np.ndarray, t: int = 0
) -> tuple[np.ndarray, float, bool]:
    """One transition; actions are clipped to bounds, non-finite actions are
    rejected. ``done`` fires when the horizon is reached."""
    action = np.asarray(action, dtype=np.float64)
    if not np.all(np.isfinite(action)):
        raise ValueError("non-finite action")
    action = np.clip(action, env.action_low, env.action_high)

    if env.kind == POINT_MASS:
        pos, vel = state[:2], state[2:]
        reward = -float(np.linalg.norm(pos - np.asarray(env.goal)))
        next_vel = 0.9 * vel + 0.1 * action
        next_pos = pos + 0.1 * vel
        next_state = np.concatenate([next_pos, next_vel])
    else:
        k = env.chain_dim
        damping = np.linspace(0.7, 0.95, k)
        reward = -float(np.dot(state, state))
        coupled = np.concatenate([[0.0], state[:-1]])
        next_state = damping * state + 0.05 * coupled + 0.1 * action

    return next_state, reward, t + 1 >= env.horizon


def expert_action(env: ToyEnv, state: np.ndarray, kp: float = 5.0, kd: float = 2.0) -> np.ndarray:
    """Proportional controller used as the data-collection expert."""
    if env.kind == POINT_MASS:
        pos, vel = state[:2], state[2:]
        raw = kp * (np.asarray(env.goal) - pos) - kd * vel
    else:
        raw = -kp * state
    return np.clip(raw, env.action_low, env.action_high)


def run_episode(env: ToyEnv, policy, rng: np.random.Generator):
    """Roll one episode with ``policy(state, t) -> action``.

    Returns (states (H, S), actions (H, A), rewards (H,)).
    """
    state = env_reset(env, rng)
    states, actions, rewards = [], [], []
    done = False
    t = 0
    while not done:
        a = policy(state, t)
        next_state, r, done = env_step(env, state, a, t)
        states.append(state)
        actions.append(np.clip(np.asarray(a, dtype=np.float64), env.action_low, env.action_high))
        rewards.append(r)
        state = next_state
        t += 1
    return np.array(states), np.array(actions), np.array(rewards)
