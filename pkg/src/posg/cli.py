"""Command-line entry point: ``posg train|gen-demos|eval|ablate|presets``.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""
from __future__ import annotations

import csv
import functools
import json
import sys

import click
import numpy as np

from . import __version__, harness
from .demos import generate_demos, save_demos
from .envs import ENV_IDS, make_env
from .errors import ConfigError, LayoutError, MalformedInputError, StateOnlyViolation

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
CONFIG_ERRORS = (ConfigError, MalformedInputError, LayoutError, StateOnlyViolation, FileNotFoundError)


def _fail(code: int, msg: str):
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


def _guarded(fn):
    """Map exceptions to exit codes so every command shares one policy."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except CONFIG_ERRORS as exc:
            _fail(EXIT_CONFIG, str(exc))
        except Exception as exc:  # noqa: BLE001 - anything else is a runtime failure
            _fail(EXIT_RUNTIME, f"{type(exc).__name__}: {exc}")
    return wrapper


class _Group(click.Group):
    """Reports command-line usage errors with the config-error exit code."""

    def main(self, args=None, prog_name=None, **kwargs):
        kwargs.pop("standalone_mode", None)
        try:
            rv = super().main(args, prog_name, standalone_mode=False, **kwargs)
        except click.exceptions.UsageError as exc:
            exc.show()
            sys.exit(EXIT_CONFIG)
        except click.exceptions.Abort:
            click.echo("aborted", err=True)
            sys.exit(EXIT_RUNTIME)
        sys.exit(rv if isinstance(rv, int) else EXIT_OK)


@click.group(cls=_Group)
@click.version_option(version=__version__, prog_name="posg")
def main():
    """Train, evaluate and ablate PPO agents guided by state-only demonstrations."""


def _progress(every: int):
    if every <= 0:
        return None

    def report(seed, it, m):
        if it % every == 0:
            click.echo(f"seed {seed} iter {it:4d} success={m['success_rate']:.3f} "
                       f"return={m['mean_return']:.1f} mmd={m['mean_mmd_to_demos']:.4f}", err=True)
    return report


@main.command()
@click.option("--config", "config_path", required=True, help="TOML config file or preset name.")
@click.option("--out", default=None, help="Override the run directory.")
@click.option("--workers", default=1, show_default=True, help="Seeds trained in parallel processes.")
@click.option("--progress-every", default=0, help="Print a progress line every N iterations (0: quiet).")
@_guarded
def train(config_path, out, workers, progress_every):
    """Train every seed of a config and write metrics, checkpoints and a manifest."""
    cfg = harness.load_config(config_path)
    run_dir, statuses = harness.run_experiment(cfg, out, workers, _progress(progress_every))
    for s in statuses:
        extra = f" final success {s['final_success_rate']:.3f}" if "final_success_rate" in s else ""
        click.echo(f"seed {s['seed']}: {s['status']} after {s['iterations_done']} iterations{extra}")
    click.echo(f"run directory: {run_dir}")
    if any(s["status"] != "completed" for s in statuses):
        for s in statuses:
            if s["error"]:
                click.echo(f"seed {s['seed']} failed: {s['error']}", err=True)
        sys.exit(EXIT_RUNTIME)


@main.command("gen-demos")
@click.option("--env", "env_id", type=click.Choice(ENV_IDS), default=None, help="Environment preset.")
@click.option("--quality", type=click.Choice(["expert", "medium"]), default="expert", show_default=True)
@click.option("--count", type=int, required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_path", required=True, help="Output JSONL file.")
@click.option("--noise", type=float, default=0.5, show_default=True, help="Random-action rate of medium KDT demos.")
@click.option("--layout", default=None, help="Custom KDT layout file.")
@click.option("--ckpt", default=None, help="Roll out a trained checkpoint instead of a scripted expert.")
@_guarded
def gen_demos(env_id, quality, count, seed, out_path, noise, layout, ckpt):
    """Write state-only demonstrations and print their mean return."""
    if ckpt is not None:
        records = harness.policy_demos(harness.load_checkpoint(ckpt), count, seed)
    else:
        if env_id is None:
            raise ConfigError("--env is required unless --ckpt is given")
        records = generate_demos(make_env(env_id, layout), quality, count, seed, noise)
    save_demos(out_path, records)
    mean = float(np.mean([r.return_ for r in records]))
    click.echo(f"wrote {len(records)} demonstrations to {out_path}; mean return {mean:.2f}")


@main.command("eval")
@click.option("--ckpt", required=True, help="Checkpoint directory.")
@click.option("--episodes", type=int, default=10, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--env", "env_id", type=click.Choice(ENV_IDS), default=None, help="Defaults to the training env.")
@click.option("--stochastic", is_flag=True, help="Sample actions instead of the greedy policy.")
@_guarded
def eval_cmd(ckpt, episodes, seed, env_id, stochastic):
    """Evaluate a checkpoint; prints a JSON summary."""
    result = harness.evaluate(harness.load_checkpoint(ckpt), episodes, seed, env_id, greedy=not stochastic)
    click.echo(json.dumps(result, indent=2))


@main.command()
@click.option("--config", "config_path", required=True, help="TOML config file or preset name.")
@click.option("--axis", type=click.Choice(harness.ABLATION_AXES), required=True)
@click.option("--values", required=True, help="Comma-separated values, e.g. 1,3,6 or expert,medium.")
@click.option("--out", default=None, help="Override the ablation root directory.")
@click.option("--workers", default=1, show_default=True)
@click.option("--progress-every", default=0)
@_guarded
def ablate(config_path, axis, values, out, workers, progress_every):
    """One training run per value; writes a merged long-format ablation.csv."""
    cfg = harness.load_config(config_path)
    vals = [v.strip() for v in values.split(",") if v.strip()]
    path = harness.run_ablation(cfg, axis, vals, out, workers, _progress(progress_every))
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    for label in dict.fromkeys(r["value"] for r in rows):
        sub = [{"seed": int(r["seed"]), "success_rate": float(r["success_rate"])} for r in rows if r["value"] == label]
        finals = harness.final_success(sub)
        click.echo(f"{axis}={label}: final success {np.mean(list(finals.values())):.3f} over {len(finals)} seeds")
    click.echo(f"ablation table: {path}")


@main.command()
def presets():
    """List shipped config presets."""
    for name in harness.preset_names():
        click.echo(name)


if __name__ == "__main__":
    main()
