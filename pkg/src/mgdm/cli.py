"""Command-line entry point: dataset generation, training, evaluation, and
the analysis sweeps.

Exit codes: 0 success, 1 runtime failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import data as dsets
from .config import ConfigError, RunConfig, dump_config, load_config
from .envs import ENV_KINDS, ToyEnv
from .evaluate import (
    EvalCell,
    EvalReport,
    SweepSettings,
    normalized_score,
    rollout,
    sweep_beta,
    sweep_context,
    sweep_ood_target,
)
from .model import DecisionMamba, ModelConfig
from .svg import render_bar_chart, render_line_chart
from .train import (
    LossWeights,
    OptimConfig,
    PserSchedule,
    TrainingDiverged,
    load_model_checkpoint,
    train,
)

USAGE_ERROR = 2
RUNTIME_ERROR = 1


class UsageError(ValueError):
    pass


def _env_from_name(name: str) -> ToyEnv:
    if name not in ENV_KINDS:
        raise UsageError(f"--env: unknown environment {name!r} (choose from {ENV_KINDS})")
    return ToyEnv(kind=name)


def _worker_count() -> int:
    raw = os.environ.get("MGDM_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _parse_floats(text: str, flag: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise UsageError(f"{flag}: expected a comma-separated number list, got {text!r}") from e


# -- gen-data ------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if not 0.0 <= args.noise_frac <= 1.0:
        raise UsageError(f"--noise-frac: {args.noise_frac} outside [0, 1]")
    if args.episodes < 1:
        raise UsageError(f"--episodes: must be >= 1, got {args.episodes}")
    env = _env_from_name(args.env)
    dataset, stats = dsets.gen_dataset(
        env, args.behavior, args.episodes, args.seed,
        medium_sigma=args.medium_sigma,
    )
    if args.noise_frac > 0.0:
        # only actions are corrupted, so states/returns and the score
        # anchors are untouched; record the clean actions alongside
        dataset, record = dsets.inject_action_noise(
            dataset, args.noise_frac, args.noise_mag, args.seed,
            bounds=(env.action_low, env.action_high),
        )
        dsets.noise_sidecar_path(args.out).parent.mkdir(parents=True, exist_ok=True)
        dsets.noise_sidecar_path(args.out).write_text(json.dumps(record.to_dict()) + "\n")
    dsets.save_trajectories(dataset, args.out)
    dsets.save_stats(stats, dsets.stats_sidecar_path(args.out))
    print(f"wrote {len(dataset)} episodes to {args.out}")
    return 0


# -- train ----------------------------------------------------------------


def _load_dataset_with_stats(data_path: str, rtg_scale: float):
    dataset = dsets.load_trajectories(data_path)
    if not dataset:
        raise UsageError(f"--data: {data_path} holds no episodes")
    sidecar = dsets.stats_sidecar_path(data_path)
    if sidecar.exists():
        stats = dsets.load_stats(sidecar)
    else:
        stats = dsets.compute_stats(dataset, rtg_scale=rtg_scale)
    return dataset, stats


def _model_config_from(cfg: RunConfig, state_dim: int, action_dim: int,
                       action_bound: float) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(
        state_dim=state_dim, action_dim=action_dim, action_bound=action_bound,
        embed_dim=m["embed_dim"], n_layers=m["n_layers"], ssm_state=m["ssm_state"],
        context_len=m["context_len"], max_timestep=m["max_timestep"],
        dropout=m["dropout"], conv_width=m["conv_width"], share_gate=m["share_gate"],
        fuse_affine=m["fuse_affine"], skip_enabled=m["skip_enabled"],
        discretize_rule=m["discretize_rule"], mg_enabled=m["mg_enabled"],
        proj_init_std=m["proj_init_std"],
    )


def _train_pieces(cfg: RunConfig):
    beta_k = cfg["pser"]["beta_k"]
    sched = PserSchedule(
        beta_k_max=beta_k, beta_min=min(cfg["pser"]["beta_min"], beta_k),
        total_steps=cfg["optim"]["steps"],
        teacher_refresh_every=cfg["pser"]["teacher_refresh"],
        ema_teacher=cfg["pser"]["ema_teacher"],
        ema_decay=cfg["pser"]["ema_decay"],
        teacher_dropout=cfg["pser"]["teacher_dropout"],
    )
    weights = LossWeights(
        action=cfg["loss"]["lambda_action"], rtg=cfg["loss"]["lambda_rtg"],
        state=cfg["loss"]["lambda_state"],
    )
    opt_cfg = OptimConfig(
        lr=cfg["optim"]["lr"], weight_decay=cfg["optim"]["weight_decay"],
        warmup_steps=cfg["optim"]["warmup_steps"], grad_clip=cfg["optim"]["grad_clip"],
        batch_size=cfg["optim"]["batch_size"], steps=cfg["optim"]["steps"],
        checkpoint_every=cfg["optim"]["checkpoint_every"],
    )
    return sched, weights, opt_cfg


def cmd_train(args) -> int:
    if not Path(args.data).exists():
        raise UsageError(f"--data: file not found: {args.data}")
    cfg = load_config(args.config, args.override)
    dataset, stats = _load_dataset_with_stats(args.data, cfg["data"]["rtg_scale"])
    state_dim = dataset[0].states.shape[1]
    action_dim = dataset[0].actions.shape[1]
    bound = float(max(1.0, np.max(np.abs(np.concatenate([t.actions for t in dataset])))))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.toml")
    (out / "run.json").write_text(json.dumps({
        "seed": args.seed, "data": str(args.data), "resume": args.resume,
    }, indent=2) + "\n")

    mcfg = _model_config_from(cfg, state_dim, action_dim, bound)
    model = DecisionMamba(mcfg, np.random.default_rng([args.seed, 0xA11CE]))
    sched, weights, opt_cfg = _train_pieces(cfg)
    result = train(
        model, dataset, stats, sched, weights, opt_cfg,
        seed=args.seed, out_dir=out, resume_from=args.resume,
        log_every=args.log_every,
    )
    print(f"finished {opt_cfg.steps} steps; checkpoint at {result.final_checkpoint}")
    return 0


# -- eval -------------------------------------------------------------------


def _resolve_target_arg(target: str, stats) -> float:
    if target == "max":
        return stats.max_return
    try:
        return float(target)
    except ValueError as e:
        raise UsageError(f"--target: expected 'max' or a number, got {target!r}") from e


def cmd_eval(args) -> int:
    model, stats, _ = load_model_checkpoint(args.ckpt)
    env = _env_from_name(args.env)
    if env.state_dim != model.cfg.state_dim or env.action_dim != model.cfg.action_dim:
        raise UsageError(
            f"--env: {args.env} has dims ({env.state_dim}, {env.action_dim}) but the "
            f"checkpoint was trained for ({model.cfg.state_dim}, {model.cfg.action_dim})"
        )
    if stats.expert_score is None or stats.random_score is None:
        raise UsageError("checkpoint stats carry no score anchors; regenerate the dataset sidecar")
    target = _resolve_target_arg(args.target, stats)
    out = Path(args.out) if args.out else Path(args.ckpt).parent / "eval"
    out.mkdir(parents=True, exist_ok=True)

    report = EvalReport(axis_name="target")
    for seed in range(args.seeds):
        rets = rollout(model, stats, env, target, args.episodes, seed)
        report.add(EvalCell(
            axis_value=target, seed=seed, mean_return=float(rets.mean()),
            norm_score=normalized_score(rets.mean(), stats.random_score, stats.expert_score),
            returns=rets.tolist(), label=f"{target:g}",
        ))
    report.to_csv(out / "report.csv")
    agg = report.aggregate()
    render_bar_chart(
        [(f"seed {c.seed}", c.norm_score, 0.0) for c in report.cells],
        out / "report.svg", title=f"normalized score, target {target:g}",
        xlabel="seed", ylabel="normalized score",
    )
    for row in agg:
        print(f"target {row['axis_value']}: score {row['mean']:.2f} +- {row['std']:.2f} (n={row['n']})")
    return 0


# -- sweep --------------------------------------------------------------------


def _settings_from(cfg: RunConfig, episodes: int) -> SweepSettings:
    return SweepSettings(
        model={k: cfg["model"][k] for k in (
            "embed_dim", "n_layers", "ssm_state", "context_len", "max_timestep",
            "dropout", "conv_width", "share_gate", "fuse_affine", "skip_enabled",
            "discretize_rule", "mg_enabled", "proj_init_std",
        )},
        sched={
            "beta_k_max": cfg["pser"]["beta_k"],
            "beta_min": min(cfg["pser"]["beta_min"], cfg["pser"]["beta_k"]),
            "total_steps": cfg["optim"]["steps"],
            "teacher_refresh_every": cfg["pser"]["teacher_refresh"],
            "ema_teacher": cfg["pser"]["ema_teacher"],
            "ema_decay": cfg["pser"]["ema_decay"],
            "teacher_dropout": cfg["pser"]["teacher_dropout"],
        },
        optim={
            "lr": cfg["optim"]["lr"], "weight_decay": cfg["optim"]["weight_decay"],
            "warmup_steps": cfg["optim"]["warmup_steps"], "grad_clip": cfg["optim"]["grad_clip"],
            "batch_size": cfg["optim"]["batch_size"], "steps": cfg["optim"]["steps"],
            "checkpoint_every": 0,
        },
        weights={
            "action": cfg["loss"]["lambda_action"], "rtg": cfg["loss"]["lambda_rtg"],
            "state": cfg["loss"]["lambda_state"],
        },
        episodes_per_cell=episodes,
        target=cfg["eval"]["target"],
    )


def _chart_for(report: EvalReport, kind: str, out: Path, stats) -> None:
    agg = report.aggregate()
    if kind == "beta":
        bars = [(row["axis_value"],
                 None if row["n"] == 0 else row["mean"],
                 row["std"] if row["n"] else 0.0) for row in agg]
        render_bar_chart(bars, out / "report.svg", title="blend-ceiling ablation",
                         xlabel="schedule variant", ylabel="normalized score")
    elif kind == "context":
        series: dict = {}
        numeric = [r for r in agg if r["axis_value"] != "bc"]
        series["model"] = [
            (float(r["axis_value"]), None if r["n"] == 0 else r["mean"], r["std"])
            for r in numeric
        ]
        bc_rows = [r for r in agg if r["axis_value"] == "bc"]
        if bc_rows and numeric:
            bc = bc_rows[0]
            series["bc baseline"] = [
                (float(r["axis_value"]), None if bc["n"] == 0 else bc["mean"], bc["std"])
                for r in numeric
            ]
        render_line_chart(series, out / "report.svg", title="context-length sweep",
                          xlabel="context length (steps)", ylabel="normalized score")
    else:  # ood
        per_mult: dict = {}
        for c in report.cells:
            per_mult.setdefault(float(c.axis_value), []).append(c.mean_return)
        xs = sorted(per_mult)
        series = {
            "achieved": [(m, float(np.mean(per_mult[m])), float(np.std(per_mult[m]))) for m in xs],
            "requested": [(m, m * stats.max_return, 0.0) for m in xs],
        }
        render_line_chart(series, out / "report.svg", title="target-return sweep",
                          xlabel="target / dataset max", ylabel="episode return")


def cmd_sweep(args) -> int:
    cfg = load_config(args.config, args.override)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.toml")
    seeds = list(range(args.seeds))
    env = _env_from_name(args.env)

    if args.kind == "ood":
        if not args.ckpt:
            raise UsageError("--ckpt: required for the ood sweep")
        model, stats, _ = load_model_checkpoint(args.ckpt)
        mults = _parse_floats(args.multipliers, "--multipliers")
        report = sweep_ood_target(model, stats, env, mults, seeds,
                                  episodes_per_cell=args.episodes)
        report.to_csv(out / "report.csv")
        _chart_for(report, "ood", out, stats)
        print(f"wrote {out / 'report.csv'}")
        return 0

    if not args.data or not Path(args.data).exists():
        raise UsageError(f"--data: file not found: {args.data}")
    dataset, stats = _load_dataset_with_stats(args.data, cfg["data"]["rtg_scale"])
    if stats.expert_score is None or stats.random_score is None:
        raise UsageError("dataset sidecar carries no score anchors; rerun gen-data")
    settings = _settings_from(cfg, args.episodes)

    if args.kind == "context":
        lengths = [int(v) for v in _parse_floats(args.lengths, "--lengths")]
        runner = lambda: sweep_context(dataset, stats, env, lengths, seeds, settings)
    else:
        betas = _parse_floats(args.betas, "--betas")
        runner = lambda: sweep_beta(
            dataset, stats, env, betas, seeds, settings,
            full_beta_k=cfg["pser"]["beta_k"],
            full_beta_min=min(cfg["pser"]["beta_min"], cfg["pser"]["beta_k"]),
        )

    report = _run_cells_parallel(runner, args.kind, dataset, stats, env, seeds, settings,
                                 args, cfg)
    report.to_csv(out / "report.csv")
    _chart_for(report, args.kind, out, stats)
    print(f"wrote {out / 'report.csv'}")
    return 0


def _run_cells_parallel(serial_runner, kind, dataset, stats, env, seeds, settings,
                        args, cfg) -> EvalReport:
    """Cellwise parallel execution capped by MGDM_THREADS; cells are
    self-contained (stateless per-step randomness), so results match the
    serial run. Failed cells are marked rather than aborting the sweep."""
    workers = _worker_count()
    if workers <= 1:
        try:
            return serial_runner()
        except Exception:
            # fall through to cellwise execution so partial results survive
            pass

    from .evaluate import _train_cell, normalized_score as nscore, rollout as roll
    from .evaluate import rollout_policy_fn
    from .model import BCPolicy
    from .train import train_bc

    if kind == "context":
        lengths = [int(v) for v in _parse_floats(args.lengths, "--lengths")]
        cells = [("bc", s) for s in seeds] + [(l, s) for l in lengths for s in seeds]
    else:
        betas = _parse_floats(args.betas, "--betas")
        variants = [(f"beta_k={v:g}", {"beta_k_max": float(v), "beta_min": 0.0}) for v in betas]
        variants.append(("full", {
            "beta_k_max": cfg["pser"]["beta_k"],
            "beta_min": min(cfg["pser"]["beta_min"], cfg["pser"]["beta_k"]),
        }))
        cells = [(lab, s, over) for (lab, over) in variants for s in seeds]

    target = stats.max_return if settings.target == "max" else float(settings.target)

    def run_cell(cell):
        try:
            if kind == "context":
                axis, seed = cell
                if axis == "bc":
                    bc = BCPolicy(env.state_dim, env.action_dim, settings.bc_hidden,
                                  env.action_bound, np.random.default_rng([seed, 0xBC]))
                    train_bc(bc, dataset, stats, settings.bc_steps, 64, settings.bc_lr, seed)
                    rets = rollout_policy_fn(env, lambda s: bc.act(s, stats),
                                             settings.episodes_per_cell, seed)
                    label = "bc"
                else:
                    model = _train_cell(dataset, stats, env, settings, seed,
                                        model_over={"context_len": int(axis)})
                    rets = roll(model, stats, env, target, settings.episodes_per_cell, seed)
                    label = str(int(axis))
                value = axis if axis == "bc" else float(axis)
            else:
                label, seed, over = cell
                model = _train_cell(dataset, stats, env, settings, seed, sched_over=over)
                rets = roll(model, stats, env, target, settings.episodes_per_cell, seed)
                value = label
            return EvalCell(
                axis_value=value, seed=seed, mean_return=float(rets.mean()),
                norm_score=nscore(rets.mean(), stats.random_score, stats.expert_score),
                returns=rets.tolist(), label=str(label),
            )
        except Exception:
            seed = cell[1]
            label = str(cell[0])
            return EvalCell(axis_value=label, seed=seed, mean_return=float("nan"),
                            norm_score=float("nan"), failed=True, label=label)

    report = EvalReport(axis_name="context_len" if kind == "context" else "beta_k")
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for cell_result in pool.map(run_cell, cells):
            report.add(cell_result)
    return report


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mgdm", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="simulate a behavior policy into a JSONL dataset")
    g.add_argument("--env", required=True)
    g.add_argument("--behavior", required=True, choices=dsets.BEHAVIORS)
    g.add_argument("--episodes", type=int, default=500)
    g.add_argument("--noise-frac", type=float, default=0.0)
    g.add_argument("--noise-mag", type=float, default=1.0)
    g.add_argument("--medium-sigma", type=float, default=None)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a policy on a JSONL dataset")
    t.add_argument("--config", default=None)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--override", action="append", default=[],
                   metavar="SECTION.KEY=VALUE")
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--log-every", type=int, default=0)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="roll out a trained checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--env", required=True)
    e.add_argument("--target", default="max")
    e.add_argument("--episodes", type=int, default=20)
    e.add_argument("--seeds", type=int, default=4)
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="context / beta / ood analysis sweeps")
    s.add_argument("--kind", required=True, choices=("context", "beta", "ood"))
    s.add_argument("--data", default=None)
    s.add_argument("--env", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", default=None)
    s.add_argument("--override", action="append", default=[])
    s.add_argument("--seeds", type=int, default=4)
    s.add_argument("--episodes", type=int, default=20)
    s.add_argument("--lengths", default="4,8,16")
    s.add_argument("--betas", default="1,0.75,0.5,0.25,0")
    s.add_argument("--multipliers", default="0.25,0.5,0.75,1.0,1.25,1.5,2.0")
    s.add_argument("--ckpt", default=None)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE_ERROR
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return RUNTIME_ERROR
    except (dsets.DatasetError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
