"""Training loop: progressively self-evolving action targets, inverse
prediction objectives, teacher snapshot management, and optimization.

The blend weight beta grows linearly over training above a floor; targets
are convex combinations of dataset actions and a frozen earlier policy's
predictions. The teacher refreshes every E steps; before the first refresh
no teacher exists and beta is forced to zero.

All per-step randomness (batch choice, dropout masks) is derived statelessly
from (seed, step), so a resumed run replays an uninterrupted one exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load as load_checkpoint
from .checkpoint import save as save_checkpoint
from .data import DatasetStats, Trajectory, sample_window
from .model import BCPolicy, DecisionMamba, ModelConfig, TokenSequence


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, dump_path: str | None):
        msg = f"non-finite loss at step {step}"
        if dump_path:
            msg += f" (offending batch dumped to {dump_path})"
        super().__init__(msg)
        self.step = step
        self.dump_path = dump_path


@dataclass
class PserSchedule:
    """Linear growth of the self-target blend weight with a floor.

    beta(k) = max(beta_k_max * k / total_steps, beta_min), forced to 0
    while no teacher snapshot exists (k < teacher_refresh_every).

    The teacher is a frozen snapshot refreshed every E steps by default;
    ``ema_teacher`` switches to an exponential moving average updated every
    step once the first window has passed. ``teacher_dropout`` runs the
    teacher forward in stochastic (dropout-on) mode.
    """

    beta_k_max: float = 0.85
    beta_min: float = 0.5
    total_steps: int = 20_000
    teacher_refresh_every: int = 0  # 0: resolved to one epoch at train start
    ema_teacher: bool = False
    ema_decay: float = 0.999
    teacher_dropout: bool = False

    def __post_init__(self):
        if not 0.0 <= self.beta_k_max <= 1.0:
            raise ValueError("beta_k_max must lie in [0, 1]")
        if not 0.0 <= self.beta_min <= max(self.beta_k_max, 0.0):
            raise ValueError("beta_min must lie in [0, beta_k_max]")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")


def beta_at(k: int, sched: PserSchedule) -> float:
    if k < sched.teacher_refresh_every or sched.teacher_refresh_every <= 0:
        return 0.0
    return max(sched.beta_k_max * k / sched.total_steps, sched.beta_min)


@dataclass
class LossWeights:
    """Objective weights (action, next-rtg, next-state); normalized to sum 1."""

    action: float = 0.8
    rtg: float = 0.1
    state: float = 0.1

    def __post_init__(self):
        if min(self.action, self.rtg, self.state) < 0:
            raise ValueError("loss weights must be non-negative")
        total = self.action + self.rtg + self.state
        if total <= 0:
            raise ValueError("loss weights must not all be zero")
        self.action /= total
        self.rtg /= total
        self.state /= total


def refine_target(actions: Tensor, teacher_actions: Tensor, beta: float) -> Tensor:
    """Convex blend (1 - beta) * a + beta * a_teacher; the teacher side must
    carry no gradient."""
    if actions.shape != teacher_actions.shape:
        raise ValueError(f"shape mismatch {actions.shape} vs {teacher_actions.shape}")
    return ad.add(actions * (1.0 - beta), teacher_actions * beta)


def _masked_mean_sq(diff: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of squared entries over rows where mask is True; mask has the
    shape of diff minus the trailing feature axis."""
    count = float(mask.sum()) * diff.shape[-1]
    if count == 0:
        return Tensor(np.asarray(0.0))
    full = np.broadcast_to(mask[..., None], diff.shape).astype(np.float64)
    sq = ad.mul(diff, diff)
    return ad.tsum(ad.mul(sq, Tensor(full.copy()))) * (1.0 / count)


def pser_loss(
    pred: Tensor,
    actions: Tensor,
    teacher_pred: Tensor | None,
    beta: float,
    mask: np.ndarray | None = None,
) -> Tensor:
    """MSE against the refined target; with beta = 0 this is plain MSE
    against the dataset actions."""
    if teacher_pred is None or beta == 0.0:
        target = actions
    else:
        target = refine_target(actions, teacher_pred, beta)
    diff = ad.sub(pred, target)
    if mask is None:
        mask = np.ones(pred.shape[:-1], dtype=bool)
    return _masked_mean_sq(diff, mask)


@dataclass
class Batch:
    rtgs: np.ndarray         # (B, l, 1)
    states: np.ndarray       # (B, l, S)
    actions: np.ndarray      # (B, l, A)
    timesteps: np.ndarray    # (B, l)
    pad: np.ndarray          # (B, l)
    next_rtgs: np.ndarray
    next_states: np.ndarray
    next_valid: np.ndarray   # (B, l)
    episodes: np.ndarray     # (B,) source episode per window
    steps: np.ndarray        # (B,) source step per window

    @property
    def step_mask(self) -> np.ndarray:
        return ~self.pad


def composite_loss(
    outputs: tuple[Tensor, Tensor, Tensor],
    batch: Batch,
    teacher_actions: Tensor | None,
    beta: float,
    weights: LossWeights,
) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of the action objective and the two inverse objectives,
    all mask-aware; next-step terms exclude each episode's last step."""
    a_hat, rtg_hat, s_hat = outputs
    l_action = pser_loss(a_hat, Tensor(batch.actions), teacher_actions, beta,
                         mask=batch.step_mask)
    next_mask = batch.next_valid & batch.step_mask
    l_rtg = _masked_mean_sq(ad.sub(rtg_hat, Tensor(batch.next_rtgs)), next_mask)
    l_state = _masked_mean_sq(ad.sub(s_hat, Tensor(batch.next_states)), next_mask)
    total = ad.add(
        ad.add(l_action * weights.action, l_rtg * weights.rtg),
        l_state * weights.state,
    )
    parts = {
        "loss_action": l_action.item(),
        "loss_rtg": l_rtg.item(),
        "loss_state": l_state.item(),
    }
    return total, parts


class AdamW:
    """Adam with decoupled weight decay over a named-parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-5):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def step(self, lr_scale: float = 1.0) -> None:
        self.t += 1
        lr = self.lr * lr_scale
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data -= lr * update
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


@dataclass
class OptimConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    warmup_steps: int = 1000
    grad_clip: float = 0.25
    batch_size: int = 64
    steps: int = 20_000
    checkpoint_every: int = 5000


def make_batch(
    dataset: list[Trajectory],
    stats: DatasetStats,
    context_len: int,
    batch_size: int,
    rng: np.random.Generator,
) -> Batch:
    """Windows drawn uniformly over (episode, step) pairs, i.e. episodes
    weighted by their length."""
    lengths = np.array([len(t) for t in dataset])
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    total = int(offsets[-1])
    flat = rng.integers(0, total, size=batch_size)
    eps = np.searchsorted(offsets, flat, side="right") - 1
    steps = flat - offsets[eps]

    wins = [sample_window(dataset[e], int(t), context_len, stats)
            for e, t in zip(eps, steps)]
    return Batch(
        rtgs=np.stack([w.rtgs for w in wins]),
        states=np.stack([w.states for w in wins]),
        actions=np.stack([w.actions for w in wins]),
        timesteps=np.stack([w.timesteps for w in wins]),
        pad=np.stack([w.pad for w in wins]),
        next_rtgs=np.stack([w.next_rtgs for w in wins]),
        next_states=np.stack([w.next_states for w in wins]),
        next_valid=np.stack([w.next_valid for w in wins]),
        episodes=eps.astype(np.int64),
        steps=steps.astype(np.int64),
    )


METRIC_COLUMNS = ("step", "beta", "loss_total", "loss_action", "loss_rtg",
                  "loss_state", "grad_norm")


def _metrics_line(row: dict) -> str:
    return ",".join(
        str(row["step"]) if c == "step" else format(row[c], ".17g")
        for c in METRIC_COLUMNS
    )


def _dump_batch(batch: Batch, path: Path) -> None:
    payload = {
        "episodes": batch.episodes.tolist(),
        "steps": batch.steps.tolist(),
        "rtgs": batch.rtgs.tolist(),
        "states": batch.states.tolist(),
        "actions": batch.actions.tolist(),
    }
    path.write_text(json.dumps(payload))


@dataclass
class TrainResult:
    model: DecisionMamba
    metrics: list[dict]
    final_checkpoint: Path | None = None


def _teacher_forward(
    teacher: DecisionMamba,
    seq_args,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Gradient-free action predictions; deterministic unless an rng is
    given (stochastic, dropout-on teacher)."""
    with ad.no_grad():
        seq = teacher.embed_trajectory(*seq_args)
        a_hat, _, _ = teacher.forward(seq, train=rng is not None, rng=rng)
    return Tensor(a_hat.data)


def _checkpoint_payload(model, opt, teacher, step, sched, stats):
    tensors: dict[str, np.ndarray] = {
        name: t.data for name, t in model.named_parameters().items()
    }
    for k in opt.params:
        tensors[f"opt.m.{k}"] = opt.m[k]
        tensors[f"opt.v.{k}"] = opt.v[k]
    if teacher is not None:
        for name, t in teacher.named_parameters().items():
            tensors[f"teacher.{name}"] = t.data
    config = {
        "model": model.cfg.to_dict(),
        "stats": stats.to_dict(),
        "meta": {
            "step": step,
            "opt_t": opt.t,
            "has_teacher": teacher is not None,
            "schedule": {
                "beta_k_max": sched.beta_k_max,
                "beta_min": sched.beta_min,
                "total_steps": sched.total_steps,
                "teacher_refresh_every": sched.teacher_refresh_every,
            },
        },
    }
    return tensors, config


def save_model_checkpoint(path, model: DecisionMamba, stats: DatasetStats) -> None:
    """Inference-only checkpoint: parameters plus config and stats."""
    tensors = {name: t.data for name, t in model.named_parameters().items()}
    save_checkpoint(path, tensors, {"model": model.cfg.to_dict(), "stats": stats.to_dict()})


def load_model_checkpoint(path) -> tuple[DecisionMamba, DatasetStats, dict]:
    tensors, config = load_checkpoint(path)
    cfg = ModelConfig.from_dict(config["model"])
    model = DecisionMamba(cfg, np.random.default_rng(0))
    model.load_state({k: v for k, v in tensors.items()
                      if not k.startswith(("opt.", "teacher."))})
    stats = DatasetStats.from_dict(config["stats"])
    return model, stats, config


def train(
    model: DecisionMamba,
    dataset: list[Trajectory],
    stats: DatasetStats,
    sched: PserSchedule,
    weights: LossWeights,
    opt_cfg: OptimConfig,
    seed: int,
    out_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
    log_every: int = 0,
) -> TrainResult:
    """Run opt_cfg.steps gradient steps of the composite objective.

    When ``out_dir`` is given, writes metrics.csv (one row per step),
    periodic checkpoints, and final.ckpt. ``resume_from`` restores
    parameters, optimizer moments, teacher snapshot, and the step counter;
    the remaining steps replay exactly as the uninterrupted run.
    """
    if not dataset:
        raise ValueError("empty dataset")
    cfg = model.cfg
    if sched.teacher_refresh_every <= 0:
        epoch = max(1, int(np.ceil(sum(len(t) for t in dataset) / opt_cfg.batch_size)))
        sched.teacher_refresh_every = epoch

    params = model.trainable_parameters()
    opt = AdamW(params, lr=opt_cfg.lr, weight_decay=opt_cfg.weight_decay)
    teacher: DecisionMamba | None = None
    start_step = 0

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    if resume_from is not None:
        tensors, config = load_checkpoint(resume_from)
        model.load_state({k: v for k, v in tensors.items()
                          if not k.startswith(("opt.", "teacher."))})
        meta = config["meta"]
        start_step = int(meta["step"])
        opt.t = int(meta["opt_t"])
        for k in opt.params:
            opt.m[k][...] = tensors[f"opt.m.{k}"]
            opt.v[k][...] = tensors[f"opt.v.{k}"]
        if meta["has_teacher"]:
            teacher = model.clone()
            teacher.load_state({
                k[len("teacher."):]: v for k, v in tensors.items()
                if k.startswith("teacher.")
            })

    metrics: list[dict] = []
    csv_file = None
    if out_path is not None:
        mode = "a" if (resume_from is not None and (out_path / "metrics.csv").exists()) else "w"
        csv_file = (out_path / "metrics.csv").open(mode)
        if mode == "w":
            csv_file.write(",".join(METRIC_COLUMNS) + "\n")

    final_path = None
    try:
        for k in range(start_step, opt_cfg.steps):
            if sched.ema_teacher:
                if teacher is None:
                    if k >= sched.teacher_refresh_every:
                        teacher = model.clone()
                else:
                    d = sched.ema_decay
                    student = model.named_parameters()
                    for name, t in teacher.named_parameters().items():
                        t.data *= d
                        t.data += (1.0 - d) * student[name].data
            elif k > 0 and k % sched.teacher_refresh_every == 0:
                teacher = model.clone()
            beta = beta_at(k, sched) if teacher is not None else 0.0

            batch_rng = np.random.default_rng([seed, 1, k])
            batch = make_batch(dataset, stats, cfg.context_len, opt_cfg.batch_size, batch_rng)
            seq_args = (batch.rtgs, batch.states, batch.actions, batch.timesteps, batch.pad)

            teacher_actions = None
            if teacher is not None and beta > 0.0:
                t_rng = np.random.default_rng([seed, 5, k]) if sched.teacher_dropout else None
                teacher_actions = _teacher_forward(teacher, seq_args, rng=t_rng)

            drop_rng = np.random.default_rng([seed, 2, k])
            seq = model.embed_trajectory(*seq_args)
            outputs = model.forward(seq, train=True, rng=drop_rng)
            loss, parts = composite_loss(outputs, batch, teacher_actions, beta, weights)

            loss_val = loss.item()
            if not np.isfinite(loss_val):
                dump = None
                if out_path is not None:
                    dump = out_path / f"diverged_batch_step{k}.json"
                    _dump_batch(batch, dump)
                raise TrainingDiverged(k, str(dump) if dump else None)

            opt.zero_grad()
            ad.backward(loss)
            grad_norm = clip_grad_norm(params, opt_cfg.grad_clip)
            warm = min(1.0, (k + 1) / opt_cfg.warmup_steps) if opt_cfg.warmup_steps else 1.0
            opt.step(lr_scale=warm)

            row = {"step": k, "beta": beta, "loss_total": loss_val,
                   "grad_norm": grad_norm, **parts}
            metrics.append(row)
            if csv_file is not None:
                csv_file.write(_metrics_line(row) + "\n")
            if log_every and (k % log_every == 0 or k == opt_cfg.steps - 1):
                print(f"step {k:>6}  beta {beta:.3f}  loss {loss_val:.5f}  "
                      f"grad {grad_norm:.4f}")

            if out_path is not None and opt_cfg.checkpoint_every > 0 \
                    and (k + 1) % opt_cfg.checkpoint_every == 0 and (k + 1) < opt_cfg.steps:
                tensors, config = _checkpoint_payload(model, opt, teacher, k + 1, sched, stats)
                save_checkpoint(out_path / f"step_{k + 1:07d}.ckpt", tensors, config)
    finally:
        if csv_file is not None:
            csv_file.close()

    if out_path is not None:
        tensors, config = _checkpoint_payload(model, opt, teacher, opt_cfg.steps, sched, stats)
        final_path = out_path / "final.ckpt"
        save_checkpoint(final_path, tensors, config)
    return TrainResult(model=model, metrics=metrics, final_checkpoint=final_path)


def train_bc(
    bc: BCPolicy,
    dataset: list[Trajectory],
    stats: DatasetStats,
    steps: int,
    batch_size: int,
    lr: float,
    seed: int,
) -> list[float]:
    """Plain MSE behavior cloning on (state, action) pairs."""
    states = np.concatenate([t.states for t in dataset])
    actions = np.concatenate([t.actions for t in dataset])
    states = stats.normalize_state(states)
    opt = AdamW(bc.trainable_parameters(), lr=lr, weight_decay=0.0)
    losses = []
    for k in range(steps):
        rng = np.random.default_rng([seed, 3, k])
        idx = rng.integers(0, len(states), size=batch_size)
        pred = bc.forward(Tensor(states[idx]))
        loss = ad.mse(pred, Tensor(actions[idx]))
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
        losses.append(loss.item())
    return losses
