"""Run configuration: sectioned key-value files (TOML syntax), dotted-path
overrides, per-value provenance, and a resolved snapshot written into every
output directory.

Schema (defaults shown in DEFAULTS): sections model, data, pser, loss,
optim, eval. Unknown keys and type mismatches are collected and reported
together.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

DEFAULTS: dict[str, dict] = {
    "model": {
        "embed_dim": 64,
        "n_layers": 3,
        "ssm_state": 16,
        "context_len": 20,
        "max_timestep": 1024,
        "dropout": 0.1,
        "conv_width": 4,
        "share_gate": False,
        "fuse_affine": True,
        "skip_enabled": True,
        "discretize_rule": "zoh",
        "mg_enabled": True,
        "proj_init_std": 0.02,
    },
    "data": {
        "rtg_scale": 1000.0,
    },
    "pser": {
        "beta_k": 0.85,
        "beta_min": 0.5,
        "teacher_refresh": 0,  # 0: one epoch, resolved at train start
        "ema_teacher": False,
        "ema_decay": 0.999,
        "teacher_dropout": False,
    },
    "loss": {
        "lambda_action": 0.8,
        "lambda_rtg": 0.1,
        "lambda_state": 0.1,
    },
    "optim": {
        "lr": 1e-4,
        "weight_decay": 1e-5,
        "warmup_steps": 1000,
        "grad_clip": 0.25,
        "batch_size": 64,
        "steps": 20000,
        "checkpoint_every": 5000,
    },
    "eval": {
        "episodes": 20,
        "seeds": 4,
        "target": "max",
    },
}


class ConfigError(ValueError):
    """Carries every schema violation found, not just the first."""

    def __init__(self, problems: list[str]):
        super().__init__("config errors:\n  " + "\n  ".join(problems))
        self.problems = problems


@dataclass
class RunConfig:
    """Fully resolved settings plus the provenance of each value."""

    values: dict[str, dict] = field(default_factory=dict)
    provenance: dict[str, str] = field(default_factory=dict)  # "sec.key" -> origin

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def get(self, dotted: str):
        sec, key = dotted.split(".", 1)
        return self.values[sec][key]


def _parse_scalar(text: str):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text.strip("\"'")


def _coerce(value, default, where: str, problems: list[str]):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        problems.append(f"{where}: expected bool, got {value!r}")
        return default
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool):
            problems.append(f"{where}: expected int, got {value!r}")
            return default
        if isinstance(value, int):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
        problems.append(f"{where}: expected int, got {value!r}")
        return default
    if isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        problems.append(f"{where}: expected number, got {value!r}")
        return default
    if isinstance(default, str):
        # eval.target also accepts a number
        if isinstance(value, (str, int, float)):
            return value
        problems.append(f"{where}: expected string, got {value!r}")
        return default
    return value


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Merge defaults <- file <- overrides, validating everything at once.

    Overrides use dotted paths: ``--override pser.beta_k=0``.
    """
    cfg = RunConfig(
        values={sec: dict(keys) for sec, keys in DEFAULTS.items()},
        provenance={f"{sec}.{k}": "default" for sec, keys in DEFAULTS.items() for k in keys},
    )
    problems: list[str] = []

    if path is not None:
        try:
            raw = tomllib.loads(Path(path).read_text())
        except (OSError, tomllib.TOMLDecodeError) as e:
            raise ConfigError([f"{path}: {e}"]) from e
        for sec, keys in raw.items():
            if sec not in DEFAULTS:
                problems.append(f"{path}: unknown section [{sec}]")
                continue
            if not isinstance(keys, dict):
                problems.append(f"{path}: section [{sec}] must hold key-value pairs")
                continue
            for k, v in keys.items():
                if k not in DEFAULTS[sec]:
                    problems.append(f"{path}: unknown key {sec}.{k}")
                    continue
                cfg.values[sec][k] = _coerce(v, DEFAULTS[sec][k], f"{sec}.{k}", problems)
                cfg.provenance[f"{sec}.{k}"] = "file"

    for item in overrides or []:
        if "=" not in item:
            problems.append(f"override {item!r}: expected section.key=value")
            continue
        dotted, _, text = item.partition("=")
        if "." not in dotted:
            problems.append(f"override {item!r}: expected section.key=value")
            continue
        sec, key = dotted.split(".", 1)
        if sec not in DEFAULTS or key not in DEFAULTS.get(sec, {}):
            problems.append(f"override: unknown key {dotted}")
            continue
        cfg.values[sec][key] = _coerce(_parse_scalar(text), DEFAULTS[sec][key], dotted, problems)
        cfg.provenance[dotted] = "flag"

    _validate(cfg, problems)
    if problems:
        raise ConfigError(problems)
    return cfg


def _validate(cfg: RunConfig, problems: list[str]) -> None:
    v = cfg.values
    if v["model"]["context_len"] < 1:
        problems.append("model.context_len: must be >= 1")
    if v["model"]["n_layers"] < 1:
        problems.append("model.n_layers: must be >= 1")
    if not 0.0 <= v["model"]["dropout"] < 1.0:
        problems.append("model.dropout: must lie in [0, 1)")
    if v["model"]["discretize_rule"] not in ("zoh", "simplified"):
        problems.append("model.discretize_rule: must be 'zoh' or 'simplified'")
    if not 0.0 <= v["pser"]["beta_k"] <= 1.0:
        problems.append("pser.beta_k: must lie in [0, 1]")
    if not 0.0 <= v["pser"]["beta_min"] <= 1.0:
        # the effective floor is min(beta_min, beta_k), so overriding
        # beta_k alone stays valid
        problems.append("pser.beta_min: must lie in [0, 1]")
    lam = (v["loss"]["lambda_action"], v["loss"]["lambda_rtg"], v["loss"]["lambda_state"])
    if min(lam) < 0 or sum(lam) <= 0:
        problems.append("loss.lambda_*: must be non-negative with a positive sum")
    if v["optim"]["steps"] < 1:
        problems.append("optim.steps: must be >= 1")
    if v["optim"]["batch_size"] < 1:
        problems.append("optim.batch_size: must be >= 1")
    if v["optim"]["lr"] <= 0:
        problems.append("optim.lr: must be positive")
    if v["eval"]["episodes"] < 1:
        problems.append("eval.episodes: must be >= 1")
    target = v["eval"]["target"]
    if isinstance(target, str) and target != "max":
        problems.append("eval.target: must be 'max' or a number")


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return f'"{v}"'
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    """Write the resolved config; provenance recorded as a trailing comment."""
    lines = []
    for sec, keys in cfg.values.items():
        lines.append(f"[{sec}]")
        for k, v in keys.items():
            origin = cfg.provenance.get(f"{sec}.{k}", "default")
            lines.append(f"{k} = {_fmt_value(v)}  # from: {origin}")
        lines.append("")
    Path(path).write_text("\n".join(lines))
