"""Command-line front end.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Relative output paths are resolved under ``$IMPACTQ_OUTPUT_ROOT`` when set.
"""

from __future__ import annotations

import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np
import yaml
from pydantic import ValidationError

from .config import RunConfig
from .env import CartPoleState
from .evaluate import (
    DEFAULT_AVERAGING,
    evaluate,
    random_baseline,
    trajectory,
    trajectory_header,
    value_surface,
    write_table,
)
from .qnet import NafNetwork, NumericalDivergence
from .trainer import train

OUTPUT_ROOT_ENV = "IMPACTQ_OUTPUT_ROOT"

log = logging.getLogger("impactq")


def resolve_output(path: str | Path) -> Path:
    path = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def _format_validation(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"  {loc}: {err['msg']}")
    return "invalid configuration:\n" + "\n".join(lines)


def load_config(source: str | None, overrides: dict) -> RunConfig:
    """``source`` is a YAML path or ``default``; ``overrides`` uses dotted keys."""
    try:
        if source in (None, "default"):
            cfg = RunConfig()
        else:
            path = Path(source)
            if not path.is_file():
                raise click.UsageError(f"config file not found: {path}")
            cfg = RunConfig.load(path)
        return cfg.with_overrides(overrides) if overrides else cfg
    except ValidationError as exc:
        raise click.UsageError(_format_validation(exc)) from None
    except (ValueError, yaml.YAMLError) as exc:
        raise click.UsageError(f"invalid configuration: {exc}") from None


def _parse_set(values: tuple[str, ...]) -> dict:
    out = {}
    for item in values:
        if "=" not in item:
            raise click.UsageError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        out[key.strip()] = yaml.safe_load(raw)
    return out


def _find_checkpoints(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise click.UsageError(f"checkpoint path not found: {path}")
    files = sorted(path.glob("agent_*.ckpt"), key=lambda p: int(p.stem.split("_")[1]))
    if not files:
        raise click.UsageError(f"no agent_*.ckpt files in {path}")
    return files


def _run_config_near(path: Path) -> Path | None:
    for parent in [path, *path.parents][:4]:
        candidate = parent / "config.yaml"
        if candidate.is_file():
            return candidate
    return None


def _load_nets(paths: list[Path], cfg: RunConfig) -> list[NafNetwork]:
    try:
        return [NafNetwork.load(p, cfg.network_params()) for p in paths]
    except (ValueError, OSError) as exc:
        raise click.ClickException(str(exc)) from None


def _eval_config(config: str | None, checkpoint: Path, overrides: dict) -> RunConfig:
    if config is None:
        near = _run_config_near(checkpoint if checkpoint.is_dir() else checkpoint.parent)
        config = str(near) if near else "default"
    return load_config(config, overrides)


class _RuntimeFailure(click.ClickException):
    exit_code = 1


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool) -> None:
    """Decentralized impact Q-learning on two-player cart-pole."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


def _train_one(cfg: RunConfig) -> str:
    out = resolve_output(cfg.output_dir)

    def progress(m):
        log.info("episode %d length %d eps %.3f returns %s", m.episode, m.length, m.epsilon[0],
                 [round(r, 2) for r in m.returns])

    result = train(cfg, out, progress=progress)
    return str(result.output_dir)


@main.command("train")
@click.option("--config", "config", default="default", show_default=True,
              help="YAML config path, or 'default'.")
@click.option("--episodes", type=int, help="train.episodes")
@click.option("--max-steps", type=int, help="train.max_steps")
@click.option("--seed", type=int, help="Run seed.")
@click.option("--seeds", help="Comma-separated seeds; runs are independent and use <output>/seed_<n>.")
@click.option("--eps-min", type=float, help="train.eps_min")
@click.option("--decay", type=float, help="train.decay")
@click.option("--gamma", type=float, help="train.gamma")
@click.option("--target-period", type=int, help="train.target_period")
@click.option("--checkpoint-every", type=int, help="train.checkpoint_every")
@click.option("--per-sample-updates/--bucketed-updates", default=None, help="train.per_sample_updates")
@click.option("--output", "output", help="Output directory (overrides output_dir).")
@click.option("--jobs", type=int, default=1, show_default=True, help="Parallel processes for --seeds.")
@click.option("--set", "sets", multiple=True, metavar="KEY=VALUE", help="Any dotted config override.")
def cmd_train(config, episodes, max_steps, seed, seeds, eps_min, decay, gamma, target_period,
              checkpoint_every, per_sample_updates, output, jobs, sets):
    """Train all agents and write config snapshot, metrics log and checkpoints."""
    overrides = _parse_set(sets)
    flag_map = {
        "train.episodes": episodes, "train.max_steps": max_steps, "seed": seed,
        "train.eps_min": eps_min, "train.decay": decay, "train.gamma": gamma,
        "train.target_period": target_period, "train.checkpoint_every": checkpoint_every,
        "train.per_sample_updates": per_sample_updates, "output_dir": output,
    }
    overrides.update({k: v for k, v in flag_map.items() if v is not None})
    cfg = load_config(config, overrides)
    if seeds:
        try:
            seed_list = [int(s) for s in seeds.split(",") if s.strip()]
        except ValueError:
            raise click.UsageError(f"--seeds expects integers, got {seeds!r}") from None
        configs = [cfg.with_overrides({"seed": s, "output_dir": str(Path(cfg.output_dir) / f"seed_{s}")})
                   for s in seed_list]
    else:
        configs = [cfg]
    try:
        if len(configs) > 1 and jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                outs = list(pool.map(_train_one, configs))
        else:
            outs = [_train_one(c) for c in configs]
    except NumericalDivergence as exc:
        raise _RuntimeFailure(f"training diverged: {exc}") from None
    except OSError as exc:
        raise _RuntimeFailure(f"I/O error: {exc}") from None
    for out in outs:
        click.echo(out)


@main.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(path_type=Path),
              help="Directory with agent_<i>.ckpt files.")
@click.option("--episodes", type=int, default=50, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--config", help="YAML config; defaults to the run's config.yaml when found.")
@click.option("--max-steps", type=int, help="Episode step limit for evaluation.")
@click.option("--output", type=click.Path(path_type=Path), help="Write the JSON summary here too.")
@click.option("--baseline", is_flag=True, help="Also report the uniformly random policy.")
def cmd_eval(checkpoint, episodes, seed, config, max_steps, output, baseline):
    """Greedy rollouts (no exploration, no dropout) of trained agents."""
    cfg = _eval_config(config, checkpoint, {"train.max_steps": max_steps} if max_steps else {})
    paths = _find_checkpoints(checkpoint)
    if len(paths) != len(cfg.agents):
        raise click.UsageError(f"found {len(paths)} checkpoints for {len(cfg.agents)} agents in {checkpoint}")
    summary = evaluate(_load_nets(paths, cfg), cfg, episodes, seed)
    payload = asdict(summary)
    if baseline:
        payload["random_baseline"] = asdict(random_baseline(cfg, episodes, seed))
    text = json.dumps(payload, indent=2) + "\n"
    click.echo(text, nl=False)
    if output is not None:
        resolve_output(output).write_text(text)


def _floats(text: str, name: str, n: int) -> list[float]:
    try:
        values = [float(v) for v in text.split(",")]
    except ValueError:
        raise click.UsageError(f"{name} expects {n} comma-separated numbers") from None
    if len(values) != n:
        raise click.UsageError(f"{name} expects {n} comma-separated numbers")
    return values


def _grid(spec: str, name: str) -> np.ndarray:
    lo, hi, n = _floats(spec, name, 3)
    if n < 1 or n != int(n):
        raise click.UsageError(f"{name}: point count must be a positive integer")
    return np.linspace(lo, hi, int(n))


@main.command("export-value-surface")
@click.option("--checkpoint", required=True, type=click.Path(path_type=Path),
              help="Checkpoint file, or run checkpoint directory with --agent.")
@click.option("--agent", type=int, default=1, show_default=True, help="1-based agent index.")
@click.option("--s-grid", default="-2.4,2.4,49", show_default=True, help="lo,hi,points")
@click.option("--theta-grid", default="-0.21,0.21,43", show_default=True, help="lo,hi,points")
@click.option("--average", default=",".join(str(v) for v in DEFAULT_AVERAGING), show_default=True,
              help="Velocity values averaged over (both s_dot and theta_dot); empty for none.")
@click.option("--output", required=True, type=click.Path(path_type=Path))
def cmd_export_value_surface(checkpoint, agent, s_grid, theta_grid, average, output):
    """Grid of V(x) = max_u Q(x, u) over (s, theta), averaged over velocities."""
    paths = _find_checkpoints(checkpoint)
    path = paths[0] if checkpoint.is_file() else next(
        (p for p in paths if p.stem == f"agent_{agent}"), None)
    if path is None:
        raise click.UsageError(f"no checkpoint for agent {agent} in {checkpoint}")
    try:
        net = NafNetwork.load(path)
    except (ValueError, OSError) as exc:
        raise click.ClickException(str(exc)) from None
    avg = [float(v) for v in average.split(",") if v.strip()] if average.strip() else []
    rows = value_surface(net, _grid(s_grid, "--s-grid"), _grid(theta_grid, "--theta-grid"), avg, avg)
    write_table(resolve_output(output), ["s", "theta", "v_mean"], rows)


@main.command("export-trajectory")
@click.option("--checkpoint", required=True, type=click.Path(path_type=Path),
              help="Directory with agent_<i>.ckpt files.")
@click.option("--initial", required=True, help="s,s_dot,theta,theta_dot")
@click.option("--steps", type=int, default=3000, show_default=True)
@click.option("--config", help="YAML config; defaults to the run's config.yaml when found.")
@click.option("--output", required=True, type=click.Path(path_type=Path))
def cmd_export_trajectory(checkpoint, initial, steps, config, output):
    """Greedy closed-loop trajectory from an explicit initial state."""
    if steps < 0:
        raise click.UsageError("--steps must be nonnegative")
    cfg = _eval_config(config, checkpoint, {})
    paths = _find_checkpoints(checkpoint)
    if len(paths) != len(cfg.agents):
        raise click.UsageError(f"found {len(paths)} checkpoints for {len(cfg.agents)} agents in {checkpoint}")
    nets = _load_nets(paths, cfg)
    x0 = CartPoleState(*_floats(initial, "--initial", 4))
    env = cfg.make_env()
    rows = trajectory(nets, env, x0, steps)
    write_table(resolve_output(output), trajectory_header(env.n_agents), rows)


@main.command("baseline")
@click.option("--config", default="default", show_default=True)
@click.option("--episodes", type=int, default=1000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--max-steps", type=int)
def cmd_baseline(config, episodes, seed, max_steps):
    """Uniformly random joint policy (exploration rate 1)."""
    cfg = load_config(config, {"train.max_steps": max_steps} if max_steps else {})
    click.echo(random_baseline(cfg, episodes, seed).to_json(), nl=False)


@main.command("show-config")
@click.option("--config", default="default", show_default=True)
@click.option("--set", "sets", multiple=True, metavar="KEY=VALUE")
def cmd_show_config(config, sets):
    """Print the effective configuration as YAML."""
    click.echo(load_config(config, _parse_set(sets)).to_yaml(), nl=False)


def run() -> None:  # pragma: no cover
    sys.exit(main())


if __name__ == "__main__":  # pragma: no cover
    main()
