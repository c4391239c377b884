"""Command-line entry point: train / evaluate / explain / dump-tree / ablate.

Configuration resolves in three layers: dataclass defaults, then a flat
``key=value`` config file, then command-line flags. The resolved config
is echoed into the run directory so any run can be reproduced by feeding
the echo file back through ``--config``.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .agent import InputLayout, agent_param_count
from .envs import make_env
from .errors import ConfigurationError, MixrtsError
from .interpret import (
    IMPORTANCE_METHODS,
    dump_tree,
    dump_tree_json,
    trace_decision,
    write_importance_csv,
    write_layers_json,
    write_weights_csv,
)
from .learner import (
    TrainConfig,
    evaluate_policy,
    load_checkpoint,
    manifest_param_count,
    read_manifest,
    rollout_episode,
    run_training,
)
from .mixer import mixer_param_count

MIXER_FLAG_VALUES = {"mixrts": "mixrts", "vdn": "vdn_sum", "independent": "independent"}
MIXER_FLAG_NAMES = {v: k for k, v in MIXER_FLAG_VALUES.items()}


@dataclass
class RunConfig(TrainConfig):
    """Training hyperparameters plus run-level selections."""

    env: str = "matrix"
    out: str = "runs"
    run_name: str = ""
    checkpoint: str = ""
    method: str = "confidence"
    payoff_csv: str = ""


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
# flags whose names differ from their field
_FLAG_ALIASES = {"mixer_mode": "--mixer", "total_steps": "--steps"}


def _coerce(name: str, value: str):
    ftype = _FIELD_TYPES[name]
    try:
        if ftype in (int, "int"):
            return int(value)
        if ftype in (float, "float"):
            return float(value)
    except ValueError as exc:
        raise ConfigurationError(f"config key {name!r}: {exc}") from exc
    return value


def parse_config_file(path) -> dict:
    values = {}
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigurationError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, value)
    return values


def format_config(cfg: RunConfig) -> str:
    parts = []
    for key in sorted(_FIELD_TYPES):
        value = getattr(cfg, key)
        parts.append(f"{key}={float(value)!r}" if isinstance(value, float) else f"{key}={value}")
    return "\n".join(parts) + "\n"


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="flat key=value config file")
    for f in fields(RunConfig):
        flag = _FLAG_ALIASES.get(f.name, "--" + f.name.replace("_", "-"))
        kwargs = {"default": None, "dest": f.name}
        if f.name == "mixer_mode":
            kwargs["choices"] = sorted(MIXER_FLAG_VALUES)
        elif f.name == "method":
            kwargs["choices"] = list(IMPORTANCE_METHODS)
        elif f.type in (int, "int"):
            kwargs["type"] = int
        elif f.type in (float, "float"):
            kwargs["type"] = float
        parser.add_argument(flag, **kwargs)


def resolve_config(args) -> tuple[RunConfig, set[str]]:
    values = {}
    if args.config:
        values.update(parse_config_file(args.config))
    for f in fields(RunConfig):
        flag_value = getattr(args, f.name, None)
        if flag_value is not None:
            values[f.name] = flag_value
    if values.get("mixer_mode") in MIXER_FLAG_VALUES:
        values["mixer_mode"] = MIXER_FLAG_VALUES[values["mixer_mode"]]
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg, set(values)


def _env_factory(cfg: RunConfig, name: str | None = None):
    env_name = name if name is not None else cfg.env
    payoff = cfg.payoff_csv
    return lambda: make_env(env_name, payoff)


def _auto_run_name(cfg: RunConfig) -> str:
    mixer = MIXER_FLAG_NAMES.get(cfg.mixer_mode, cfg.mixer_mode)
    return f"{cfg.env}-{mixer}-{cfg.agent_trees}-seed{cfg.seed}"


def _semantic_config(cfg: RunConfig) -> dict:
    """Config echo embedded in checkpoints; file-system locations are
    excluded so identical runs produce byte-identical checkpoints."""
    echo = asdict(cfg)
    for key in ("out", "run_name", "checkpoint"):
        echo.pop(key, None)
    return echo


def cmd_train(cfg: RunConfig, args) -> int:
    run_name = cfg.run_name or _auto_run_name(cfg)
    out_dir = Path(cfg.out) / run_name
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.echo").write_text(format_config(cfg))
    result = run_training(cfg, _env_factory(cfg), out_dir,
                          config_echo=_semantic_config(cfg))
    final = result.records[-1]
    print(f"run {run_name}: {result.steps_done} steps, {result.episodes_done} episodes")
    print(f"final test return {final.mean_test_return:.4f}, "
          f"win rate {final.test_win_rate:.3f}, best {result.best_return:.4f}")
    print(f"artifacts in {out_dir}")
    return 0


def _load_for_env(cfg: RunConfig, env_overridden: bool):
    if not cfg.checkpoint:
        raise ConfigurationError("--checkpoint is required")
    ckpt = load_checkpoint(cfg.checkpoint)
    env_name = cfg.env if env_overridden else ckpt.meta["env"]
    env = make_env(env_name, cfg.payoff_csv)
    spec = env.spec
    for key, actual in (("obs_dim", spec.obs_dim), ("n_actions", spec.n_actions),
                        ("n_agents", spec.n_agents), ("state_dim", spec.state_dim)):
        if ckpt.meta[key] != actual:
            raise ConfigurationError(
                f"checkpoint/env shape mismatch: {key} is {ckpt.meta[key]} in the "
                f"checkpoint but {actual} in env {env_name!r}"
            )
    return ckpt, env


def cmd_evaluate(cfg: RunConfig, args) -> int:
    ckpt, env = _load_for_env(cfg, args.env_overridden)
    mean_ret, win_rate, mean_len, returns = evaluate_policy(
        env, ckpt.agent, args.episodes, cfg.seed
    )
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = {
        "checkpoint": str(cfg.checkpoint),
        "env": env.spec.name,
        "episodes": args.episodes,
        "mean_return": mean_ret,
        "success_rate": win_rate,
        "mean_episode_length": mean_len,
        "returns": [float(r) for r in returns],
    }
    (out_dir / "evaluation.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"mean return {mean_ret:.4f} over {args.episodes} greedy episodes")
    print(f"success rate {win_rate:.3f}, mean length {mean_len:.2f}")
    print(f"wrote {out_dir / 'evaluation.json'}")
    return 0


def cmd_explain(cfg: RunConfig, args) -> int:
    if cfg.method not in IMPORTANCE_METHODS:
        raise ConfigurationError(
            f"unknown importance method {cfg.method!r}; valid: {', '.join(IMPORTANCE_METHODS)}"
        )
    ckpt, env = _load_for_env(cfg, args.env_overridden)
    rng = np.random.default_rng(cfg.seed)
    episode = rollout_episode(env, ckpt.agent, lambda _: 0.0, 0, rng, cfg.seed)
    trace = trace_decision(ckpt.agent, ckpt.mixer, episode, cfg.method,
                           obs_names=ckpt.meta.get("obs_feature_names"))
    out_dir = Path(cfg.out) / "traces"
    out_dir.mkdir(parents=True, exist_ok=True)
    write_importance_csv(trace, out_dir / "importance.csv")
    write_weights_csv(trace, out_dir / "weights.csv")
    write_layers_json(trace, out_dir / "layers.json")
    print(f"traced {episode.length} steps with method {cfg.method}")
    for name in ("importance.csv", "weights.csv", "layers.json"):
        print(f"wrote {out_dir / name}")
    return 0


def cmd_dump_tree(cfg: RunConfig, args) -> int:
    if not cfg.checkpoint:
        raise ConfigurationError("--checkpoint is required")
    ckpt = load_checkpoint(cfg.checkpoint)
    doc = dump_tree(ckpt)
    out = Path(cfg.out)
    path = out if out.suffix == ".json" else out / "tree_dump.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_tree_json(doc))
    print(f"wrote {path}")
    return 0


def _expected_param_count(cfg: RunConfig, env) -> int:
    spec = env.spec
    layout = InputLayout(obs_dim=spec.obs_dim, n_actions=spec.n_actions,
                         n_agents=spec.n_agents)
    return (agent_param_count(layout, cfg.depth_agent, cfg.h_agent,
                              cfg.agent_trees == "rtc")
            + mixer_param_count(spec.state_dim, cfg.depth_mix, cfg.h_mix,
                                cfg.mixer_mode))


def _run_ablate_cell(payload) -> dict:
    cfg, depth, h = payload
    cell_cfg = replace(cfg, depth_agent=depth, h_agent=h,
                       run_name=f"ablate-d{depth}-h{h}")
    out_dir = Path(cell_cfg.out) / cell_cfg.run_name
    out_dir.mkdir(parents=True, exist_ok=True)
    result = run_training(cell_cfg, _env_factory(cell_cfg), out_dir,
                          config_echo=_semantic_config(cell_cfg))
    expected = _expected_param_count(cell_cfg, _env_factory(cell_cfg)())
    counted = manifest_param_count(read_manifest(out_dir / "ckpt-latest"))
    if counted != expected:
        raise MixrtsError(
            f"parameter manifest walk ({counted}) disagrees with the closed-form "
            f"count ({expected}) for depth={depth}, h={h}"
        )
    return {"depth": depth, "h_agent": h, "n_params": counted,
            "final_test_return": result.records[-1].mean_test_return}


def cmd_ablate(cfg: RunConfig, args) -> int:
    depths = [int(v) for v in args.depths.split(",") if v]
    h_values = [int(v) for v in args.h_values.split(",") if v]
    grid = [(d, h) for d in depths for h in h_values]
    if not grid:
        raise ConfigurationError("ablation grid is empty")
    if len(grid) > args.max_cells:
        raise ConfigurationError(
            f"ablation grid has {len(grid)} cells ({len(depths)} depths x "
            f"{len(h_values)} ensemble sizes), exceeding the budget of "
            f"{args.max_cells}; raise --max-cells to proceed"
        )
    payloads = [(cfg, d, h) for d, h in grid]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_run_ablate_cell, payloads))
    else:
        rows = [_run_ablate_cell(p) for p in payloads]
    rows.sort(key=lambda r: (r["depth"], r["h_agent"]))
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["depth,h_agent,n_params,final_test_return"]
    for r in rows:
        lines.append(f"{r['depth']},{r['h_agent']},{r['n_params']},"
                     f"{float(r['final_test_return'])!r}")
    (out_dir / "ablation.csv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    print(f"wrote {out_dir / 'ablation.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixrts",
                                     description="interpretable multi-agent Q-learning "
                                                 "with mixed recurrent soft decision trees")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "evaluate", "explain", "dump-tree", "ablate"):
        p = sub.add_parser(name)
        _add_config_flags(p)
        if name == "evaluate":
            p.add_argument("--episodes", type=int, default=32)
        if name == "ablate":
            p.add_argument("--depths", default="1,2,3")
            p.add_argument("--h-values", default="8,16,32,64")
            p.add_argument("--jobs", type=int, default=1)
            p.add_argument("--max-cells", type=int, default=16)
    return parser


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "explain": cmd_explain,
    "dump-tree": cmd_dump_tree,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg, provided = resolve_config(args)
        args.env_overridden = "env" in provided
        return COMMANDS[args.command](cfg, args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (MixrtsError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
