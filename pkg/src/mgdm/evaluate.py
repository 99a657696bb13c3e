"""Return-conditioned rollout, normalized scoring, and the three analysis
sweeps (context length, blend-weight ceiling, out-of-distribution targets).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import DatasetStats, NoiseRecord, Trajectory, sample_window
from .envs import ToyEnv, env_reset, env_step
from .model import BCPolicy, DecisionMamba, ModelConfig
from .train import LossWeights, OptimConfig, PserSchedule, train, train_bc


def normalized_score(score: float, random_score: float, expert_score: float) -> float:
    """100 * (score - random) / (expert - random); not clamped, so targets
    beyond the dataset can exceed 100."""
    if not expert_score > random_score:
        raise ValueError(
            f"degenerate anchors: expert {expert_score} must exceed random {random_score}"
        )
    return 100.0 * (score - random_score) / (expert_score - random_score)


def rollout(
    model: DecisionMamba,
    stats: DatasetStats,
    env: ToyEnv,
    target_return: float,
    n_episodes: int,
    seed: int,
) -> np.ndarray:
    """Episode returns under return-conditioned greedy control.

    Each episode starts with the requested return as its conditioning value;
    after every step the conditioning decreases by the observed reward.
    """
    if env.state_dim != model.cfg.state_dim or env.action_dim != model.cfg.action_dim:
        raise ValueError("environment and model disagree on dimensions")
    returns = np.empty(n_episodes)
    for ep in range(n_episodes):
        rng = np.random.default_rng([seed, 4, ep])
        state = env_reset(env, rng)
        rtgs = [target_return]
        states = [state]
        actions: list[np.ndarray] = []
        total = 0.0
        done = False
        t = 0
        while not done:
            action = model.act(np.array(rtgs), np.array(states), np.array(actions).reshape(len(actions), env.action_dim), stats)
            state, reward, done = env_step(env, states[-1], action, t)
            actions.append(action)
            total += reward
            rtgs.append(rtgs[-1] - reward)
            states.append(state)
            t += 1
        returns[ep] = total
    return returns


def rollout_policy_fn(env: ToyEnv, act_fn, n_episodes: int, seed: int) -> np.ndarray:
    """Returns for a plain state-feedback policy (used by the BC baseline)."""
    returns = np.empty(n_episodes)
    for ep in range(n_episodes):
        rng = np.random.default_rng([seed, 4, ep])
        state = env_reset(env, rng)
        total = 0.0
        done = False
        t = 0
        while not done:
            state, reward, done = env_step(env, state, act_fn(state), t)
            total += reward
            t += 1
        returns[ep] = total
    return returns


@dataclass
class EvalCell:
    axis_value: float | str
    seed: int
    mean_return: float
    norm_score: float
    returns: list[float] = field(default_factory=list)
    failed: bool = False
    label: str = ""


@dataclass
class EvalReport:
    axis_name: str
    cells: list[EvalCell] = field(default_factory=list)

    def add(self, cell: EvalCell) -> None:
        self.cells.append(cell)

    def aggregate(self) -> list[dict]:
        """Mean and std of the normalized score per axis value."""
        out = []
        for value in dict.fromkeys((c.label or str(c.axis_value)) for c in self.cells):
            group = [c for c in self.cells if (c.label or str(c.axis_value)) == value]
            scores = [c.norm_score for c in group if not c.failed]
            out.append({
                "axis_value": value,
                "mean": float(np.mean(scores)) if scores else float("nan"),
                "std": float(np.std(scores)) if scores else float("nan"),
                "n": len(scores),
                "failed": sum(c.failed for c in group),
            })
        return out

    def to_csv(self, path) -> None:
        lines = ["axis_value,seed,mean_return,norm_score"]
        for c in self.cells:
            value = c.label or str(c.axis_value)
            if c.failed:
                lines.append(f"{value},{c.seed},nan,nan")
            else:
                lines.append(
                    f"{value},{c.seed},{format(c.mean_return, '.17g')},{format(c.norm_score, '.17g')}"
                )
        Path(path).write_text("\n".join(lines) + "\n")


def clean_action_error(
    model: DecisionMamba,
    dataset: list[Trajectory],
    record: NoiseRecord,
    stats: DatasetStats,
    batch_size: int = 256,
) -> float:
    """MSE of the model's predictions against the recorded clean actions at
    the corrupted steps, with windows built from the corrupted dataset."""
    l = model.cfg.context_len
    preds = []
    for lo in range(0, len(record.indices), batch_size):
        chunk = record.indices[lo:lo + batch_size]
        wins = [sample_window(dataset[ep], t, l, stats) for ep, t in chunk]
        with ad.no_grad():
            seq = model.embed_trajectory(
                np.stack([w.rtgs for w in wins]),
                np.stack([w.states for w in wins]),
                np.stack([w.actions for w in wins]),
                np.stack([w.timesteps for w in wins]),
                np.stack([w.pad for w in wins]),
            )
            a_hat, _, _ = model.forward(seq)
        preds.append(a_hat.data[:, -1, :])
    if not preds:
        return 0.0
    return float(np.mean((np.concatenate(preds) - record.clean_actions) ** 2))


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt((xc * xc).sum() * (yc * yc).sum())
    if denom == 0:
        return 0.0
    return float((xc * yc).sum() / denom)


@dataclass
class SweepSettings:
    """Shared training/eval knobs for sweep cells (desk-scale defaults)."""

    model: dict = field(default_factory=dict)        # ModelConfig overrides
    sched: dict = field(default_factory=dict)        # PserSchedule overrides
    optim: dict = field(default_factory=dict)        # OptimConfig overrides
    weights: dict = field(default_factory=dict)      # LossWeights overrides
    episodes_per_cell: int = 20
    target: str | float = "max"
    bc_hidden: int = 128
    bc_steps: int = 2000
    bc_lr: float = 1e-3


def _resolve_target(target, stats: DatasetStats) -> float:
    if target == "max":
        return stats.max_return
    return float(target)


def _train_cell(dataset, stats, env, settings: SweepSettings, seed: int,
                model_over: dict | None = None, sched_over: dict | None = None) -> DecisionMamba:
    mcfg = ModelConfig(
        state_dim=env.state_dim, action_dim=env.action_dim,
        action_bound=env.action_bound,
        **{**settings.model, **(model_over or {})},
    )
    model = DecisionMamba(mcfg, np.random.default_rng([seed, 0xA11CE]))
    sched = PserSchedule(**{**settings.sched, **(sched_over or {})})
    weights = LossWeights(**settings.weights)
    opt_cfg = OptimConfig(**settings.optim)
    train(model, dataset, stats, sched, weights, opt_cfg, seed=seed)
    return model


def sweep_context(
    dataset: list[Trajectory],
    stats: DatasetStats,
    env: ToyEnv,
    lengths: list[int],
    seeds: list[int],
    settings: SweepSettings | None = None,
) -> EvalReport:
    """Train and evaluate one model per (context length, seed), plus the
    behavior-cloning baseline per seed."""
    settings = settings or SweepSettings()
    report = EvalReport(axis_name="context_len")
    target = _resolve_target(settings.target, stats)
    for seed in seeds:
        bc = BCPolicy(env.state_dim, env.action_dim, settings.bc_hidden,
                      env.action_bound, np.random.default_rng([seed, 0xBC]))
        train_bc(bc, dataset, stats, settings.bc_steps, 64, settings.bc_lr, seed)
        rets = rollout_policy_fn(env, lambda s: bc.act(s, stats),
                                 settings.episodes_per_cell, seed)
        report.add(EvalCell(
            axis_value="bc", seed=seed, mean_return=float(rets.mean()),
            norm_score=normalized_score(rets.mean(), stats.random_score, stats.expert_score),
            returns=rets.tolist(), label="bc",
        ))
        for length in lengths:
            model = _train_cell(dataset, stats, env, settings, seed,
                                model_over={"context_len": int(length)})
            rets = rollout(model, stats, env, target, settings.episodes_per_cell, seed)
            report.add(EvalCell(
                axis_value=float(length), seed=seed, mean_return=float(rets.mean()),
                norm_score=normalized_score(rets.mean(), stats.random_score, stats.expert_score),
                returns=rets.tolist(), label=str(int(length)),
            ))
    return report


def sweep_beta(
    dataset: list[Trajectory],
    stats: DatasetStats,
    env: ToyEnv,
    beta_values: list[float],
    seeds: list[int],
    settings: SweepSettings | None = None,
    full_beta_k: float = 0.85,
    full_beta_min: float = 0.5,
) -> EvalReport:
    """Ceiling ablation: one row per beta ceiling with the floor removed,
    plus the full configuration (ceiling and floor) as its own row."""
    settings = settings or SweepSettings()
    report = EvalReport(axis_name="beta_k")
    target = _resolve_target(settings.target, stats)
    variants = [(f"beta_k={v:g}", {"beta_k_max": float(v), "beta_min": 0.0})
                for v in beta_values]
    variants.append(("full", {"beta_k_max": full_beta_k, "beta_min": full_beta_min}))
    for seed in seeds:
        for label, sched_over in variants:
            model = _train_cell(dataset, stats, env, settings, seed, sched_over=sched_over)
            rets = rollout(model, stats, env, target, settings.episodes_per_cell, seed)
            report.add(EvalCell(
                axis_value=label, seed=seed, mean_return=float(rets.mean()),
                norm_score=normalized_score(rets.mean(), stats.random_score, stats.expert_score),
                returns=rets.tolist(), label=label,
            ))
    return report


def sweep_ood_target(
    model: DecisionMamba,
    stats: DatasetStats,
    env: ToyEnv,
    multipliers: list[float],
    seeds: list[int],
    episodes_per_cell: int = 20,
) -> EvalReport:
    """Single trained checkpoint, rollouts at multiples of the dataset max
    return; reports achieved vs requested."""
    report = EvalReport(axis_name="target_multiplier")
    for seed in seeds:
        for mult in multipliers:
            target = mult * stats.max_return
            rets = rollout(model, stats, env, target, episodes_per_cell, seed)
            report.add(EvalCell(
                axis_value=float(mult), seed=seed, mean_return=float(rets.mean()),
                norm_score=normalized_score(rets.mean(), stats.random_score, stats.expert_score),
                returns=rets.tolist(), label=f"{mult:g}",
            ))
    return report
