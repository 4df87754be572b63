"""Experiment configuration, training runs, evaluation and ablations.

A run directory holds::

    config.toml      copy of the source config
    manifest.json    resolved config, seeds, status and file paths
    metrics.csv      one row per (seed, iteration), deterministic given config
    timings.csv      wall-clock seconds per (seed, iteration)
    seed_<s>/        per-seed metrics/timings and the final checkpoint
"""
from __future__ import annotations

import copy
import csv
import dataclasses
import io
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__
from .demos import DemoFileRecord, generate_demos, load_demos, save_demos, to_demoset
from .envs import ENV_IDS, make_env
from .errors import ConfigError, DivergenceError
from .guidance import DemoSet, GuidanceParams
from .kernels import FeatureMap, KernelSpec, traj_mmd_sq
from .nn import DenseNet
from .policy import CategoricalPolicy, GaussianPolicy, ValueFunction
from .ppo import Agent, PpoConfig, TrainingState, collect_rollouts, posg_iteration, ppo_iteration

METRIC_COLUMNS = (
    "seed", "iteration", "success_rate", "mean_return", "mean_length", "mean_mmd_to_demos",
    "surrogate_loss", "value_loss", "clip_fraction", "approx_kl", "entropy",
    "env_update", "guidance_update", "demo_count", "guidance_raw_mean", "guidance_raw_std",
)
TIMING_COLUMNS = ("seed", "iteration", "wall_time")
ALGORITHMS = ("posg", "ppo")
ABLATION_AXES = ("demo_count", "demo_quality")
PRESET_PACKAGE = "posg.presets"


# ------------------------------------------------------------------------ config

@dataclass
class DemoSource:
    """Where demonstrations come from: a JSONL file, or generated in memory."""

    path: str | None = None
    count: int = 1
    quality: str = "expert"
    generator_seed: int = 0
    noise: float = 0.5
    capacity: int = 10
    update: bool = True

    def resolved_path(self) -> Path | None:
        if self.path is None:
            return None
        return Path(self.path.replace("{quality}", self.quality))


@dataclass
class KernelConfig:
    bandwidth_mode: str = "fixed"
    bandwidth: float = 2.0
    max_points: int = 256
    # observation indices fed to the kernel; None keeps the whole observation
    features: list[int] | None = None

    def spec(self) -> KernelSpec:
        return KernelSpec(bandwidth=self.bandwidth, bandwidth_mode=self.bandwidth_mode)

    def feature_map(self) -> FeatureMap:
        return FeatureMap() if self.features is None else FeatureMap.project(*self.features)


@dataclass
class ExperimentConfig:
    env: str
    algorithm: str = "posg"
    iterations: int = 300
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str = "runs/experiment"
    layout: str | None = None
    env_options: dict = field(default_factory=dict)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    guidance: GuidanceParams = field(default_factory=GuidanceParams)
    guidance_enabled: bool = True
    persist_table: bool = False
    kernel: KernelConfig = field(default_factory=KernelConfig)
    demos: DemoSource = field(default_factory=DemoSource)
    source_text: str = ""

    def __post_init__(self):
        if self.env not in ENV_IDS:
            raise ConfigError(f"unknown env {self.env!r}; expected one of {ENV_IDS}")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.iterations < 1:
            raise ConfigError("iterations must be positive")
        if not self.seeds:
            raise ConfigError("seeds must be a non-empty list")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if self.demos.count < 1:
            raise ConfigError("demos.count must be positive")
        if self.demos.capacity < self.demos.count:
            raise ConfigError("demos.capacity must be at least demos.count")
        if self.layout is not None and not Path(self.layout).is_file():
            raise ConfigError(f"layout file not found: {self.layout}")
        path = self.demos.resolved_path()
        if path is not None and not path.is_file():
            raise ConfigError(f"demo file not found: {path}")

    @property
    def guided(self) -> bool:
        return self.algorithm == "posg" and self.guidance_enabled

    def make_env(self):
        return make_env(self.env, self.layout, **self.env_options)

    def to_dict(self) -> dict:
        """Resolved settings as plain JSON-ready data."""
        out = {
            "env": self.env, "algorithm": self.algorithm, "iterations": self.iterations,
            "seeds": list(self.seeds), "output_dir": self.output_dir, "layout": self.layout,
            "env_options": dict(self.env_options),
            "ppo": dataclasses.asdict(self.ppo),
            "guidance": {**dataclasses.asdict(self.guidance), "enabled": self.guidance_enabled,
                         "persist_table": self.persist_table},
            "kernel": dataclasses.asdict(self.kernel),
            "demos": dataclasses.asdict(self.demos),
        }
        out["ppo"]["hidden"] = list(self.ppo.hidden)
        return out


def _take(table: dict, cls, section: str, **overrides):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(table) - names)
    if unknown:
        raise ConfigError(f"[{section}] has unknown keys {unknown}")
    try:
        return cls(**{**table, **overrides})
    except TypeError as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def parse_config(data: dict, base_dir: Path | None = None, source_text: str = "") -> ExperimentConfig:
    """Build an :class:`ExperimentConfig` from a parsed TOML table.

    Input paths (``layout``, ``demos.path``) are resolved against ``base_dir``.
    """
    data = copy.deepcopy(data)
    base = Path(base_dir) if base_dir is not None else Path.cwd()

    def rel(p):
        if p is None:
            return None
        p = Path(str(p))
        return str(p if p.is_absolute() else base / p)

    top_keys = {"env", "algorithm", "iterations", "seeds", "output_dir", "layout", "env_options",
                "ppo", "guidance", "kernel", "demos"}
    unknown = sorted(set(data) - top_keys)
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}")
    if "env" not in data:
        raise ConfigError("config must name an env")
    env_id = data["env"]
    discrete = env_id in ("kdt", "kdt-small")

    ppo_table = dict(data.get("ppo", {}))
    if "hidden" in ppo_table:
        ppo_table["hidden"] = tuple(ppo_table["hidden"])
    ppo = _take(ppo_table, PpoConfig, "ppo")

    g_table = dict(data.get("guidance", {}))
    enabled = bool(g_table.pop("enabled", True))
    persist = bool(g_table.pop("persist_table", False))
    g_table.setdefault("mode", "discrete_table" if discrete else "continuous_per_trajectory")
    guidance = _take(g_table, GuidanceParams, "guidance")
    if guidance.mode == "discrete_table" and not discrete:
        raise ConfigError(f"discrete_table guidance needs a discrete env, got {env_id!r}")

    kernel = _take(dict(data.get("kernel", {})), KernelConfig, "kernel")
    kernel.spec()  # validates bandwidth settings early
    if kernel.max_points < 1:
        raise ConfigError("kernel.max_points must be positive")

    d_table = dict(data.get("demos", {}))
    if "path" in d_table:
        d_table["path"] = rel(d_table["path"])
    demos = _take(d_table, DemoSource, "demos")

    seeds = data.get("seeds", [0])
    if not isinstance(seeds, list) or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds must be a list of integers")
    return ExperimentConfig(
        env=env_id,
        algorithm=data.get("algorithm", "posg"),
        iterations=int(data.get("iterations", 300)),
        seeds=seeds,
        output_dir=str(data.get("output_dir", f"runs/{env_id}-{data.get('algorithm', 'posg')}")),
        layout=rel(data.get("layout")),
        env_options=dict(data.get("env_options", {})),
        ppo=ppo, guidance=guidance, guidance_enabled=enabled, persist_table=persist,
        kernel=kernel, demos=demos, source_text=source_text,
    )


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files(PRESET_PACKAGE).iterdir() if p.name.endswith(".toml"))


def load_config(path: str | Path) -> ExperimentConfig:
    """Load a TOML config file, or a shipped preset by name (see :func:`preset_names`)."""
    p = Path(path)
    if p.is_file():
        text, base = p.read_text(), p.parent
    elif str(path) in preset_names():
        text, base = resources.files(PRESET_PACKAGE).joinpath(f"{path}.toml").read_text(), Path.cwd()
    else:
        raise ConfigError(f"config not found: {path} (presets: {', '.join(preset_names())})")
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML ({exc})") from exc
    return parse_config(data, base, text)


# ------------------------------------------------------------------------- demos

def demo_records(cfg: ExperimentConfig) -> list[DemoFileRecord]:
    """The first ``demos.count`` records from the file, or freshly generated ones."""
    src = cfg.demos
    path = src.resolved_path()
    if path is not None:
        records = load_demos(path)
        if len(records) < src.count:
            raise ConfigError(f"{path} holds {len(records)} demos, config asks for {src.count}")
        records = records[: src.count]
    else:
        records = generate_demos(cfg.make_env(), src.quality, src.count, src.generator_seed, src.noise)
    obs_dim = cfg.make_env().obs_dim
    for r in records:
        if len(r.observations[0]) != obs_dim:
            raise ConfigError(f"demo observations have dimension {len(r.observations[0])}, env has {obs_dim}")
    return records


# ---------------------------------------------------------------------- training

def build_state(cfg: ExperimentConfig, seed: int, records: list[DemoFileRecord] | None = None) -> TrainingState:
    env = cfg.make_env()
    records = demo_records(cfg) if records is None else records
    return TrainingState(
        env=env,
        agent=Agent.create(env, cfg.ppo, seed),
        ppo=cfg.ppo,
        demos=to_demoset(records, cfg.demos.capacity),
        guidance=cfg.guidance,
        kernel=cfg.kernel.spec(),
        features=cfg.kernel.feature_map(),
        max_points=cfg.kernel.max_points,
        guidance_enabled=cfg.guided,
        update_demos=cfg.demos.update,
        persist_table=cfg.persist_table,
    )


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def metric_row(seed: int, iteration: int, m: dict) -> list[str]:
    values = {"seed": seed, "iteration": iteration, "surrogate_loss": m["surrogate"], **m}
    return [_fmt(values[c]) for c in METRIC_COLUMNS]


def _csv_writer(path: Path, header):
    f = open(path, "w", newline="")
    w = csv.writer(f, lineterminator="\n")
    w.writerow(header)
    return f, w


def train_seed(cfg: ExperimentConfig, seed: int, run_dir: Path, progress=None) -> dict:
    """One seed of a run; writes ``seed_<s>/`` and returns a status record."""
    seed_dir = run_dir / f"seed_{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    state = build_state(cfg, seed)
    step = posg_iteration if cfg.algorithm == "posg" else ppo_iteration
    mf, mw = _csv_writer(seed_dir / "metrics.csv", METRIC_COLUMNS)
    tf, tw = _csv_writer(seed_dir / "timings.csv", TIMING_COLUMNS)
    status = {"seed": seed, "status": "completed", "iterations_done": 0, "error": None}
    last = None
    try:
        for it in range(1, cfg.iterations + 1):
            t0 = time.perf_counter()
            try:
                last = step(state)
            except DivergenceError as exc:
                status.update(status="failed", error=f"iteration {it}: {exc}")
                break
            mw.writerow(metric_row(seed, it, last))
            tw.writerow([seed, it, f"{time.perf_counter() - t0:.6f}"])
            mf.flush()
            tf.flush()
            status["iterations_done"] = it
            if progress is not None:
                progress(seed, it, last)
    finally:
        mf.close()
        tf.close()
    save_checkpoint(seed_dir / "checkpoint", state, cfg, seed)
    if last is not None:
        status["final_success_rate"] = last["success_rate"]
    return status


def _train_seed_worker(args):
    cfg, seed, run_dir = args
    return train_seed(cfg, seed, run_dir)


def _merge(run_dir: Path, seeds: list[int], name: str):
    with open(run_dir / name, "w", newline="") as out:
        for i, s in enumerate(seeds):
            lines = (run_dir / f"seed_{s}" / name).read_text().splitlines(keepends=True)
            out.writelines(lines if i == 0 else lines[1:])


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None, workers: int = 1,
                   progress=None) -> tuple[Path, list[dict]]:
    """Train every seed, then merge per-seed files in seed order.

    ``workers > 1`` runs seeds in separate processes; outputs are identical to
    the sequential path because each seed only touches its own directory.
    """
    run_dir = Path(out_dir if out_dir is not None else cfg.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    demo_records(cfg)  # fail on bad demo input before any seed starts
    if cfg.source_text:
        (run_dir / "config.toml").write_text(cfg.source_text)
    if workers > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            statuses = list(pool.map(_train_seed_worker, [(cfg, s, run_dir) for s in cfg.seeds]))
    else:
        statuses = [train_seed(cfg, s, run_dir, progress) for s in cfg.seeds]
    _merge(run_dir, cfg.seeds, "metrics.csv")
    _merge(run_dir, cfg.seeds, "timings.csv")
    manifest = {
        "package_version": __version__,
        "config": cfg.to_dict(),
        "seeds": list(cfg.seeds),
        "iterations": cfg.iterations,
        "runs": statuses,
        "files": {
            "config": "config.toml" if cfg.source_text else None,
            "metrics": "metrics.csv",
            "timings": "timings.csv",
            "per_seed": {str(s): {"metrics": f"seed_{s}/metrics.csv", "timings": f"seed_{s}/timings.csv",
                                  "checkpoint": f"seed_{s}/checkpoint"} for s in cfg.seeds},
        },
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return run_dir, statuses


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    for r in rows:
        for k, v in r.items():
            if k in ("seed", "iteration", "env_update", "guidance_update", "demo_count"):
                r[k] = int(v)
            elif k not in ("axis", "value"):  # ablation labels stay strings
                r[k] = float(v)
    return rows


# ------------------------------------------------------------------- checkpoints

def save_checkpoint(path: str | Path, state: TrainingState, cfg: ExperimentConfig, seed: int):
    """Networks in the binary network format plus ``meta.json`` and the demo memory."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    agent = state.agent
    agent.policy.net.save(path / "policy.posgnn")
    agent.value_env.net.save(path / "value_env.posgnn")
    agent.value_guidance.net.save(path / "value_guidance.posgnn")
    env = cfg.make_env()
    meta = {
        "format": 1,
        "env": cfg.env,
        "layout": cfg.layout,
        "env_options": cfg.env_options,
        "discrete": bool(env.discrete),
        "obs_dim": int(env.obs_dim),
        "action_dim": int(env.n_actions if env.discrete else env.act_dim),
        "obs_low": [float(v) for v in agent.policy.obs_low],
        "obs_high": [float(v) for v in agent.policy.obs_high],
        "log_std": None if env.discrete else [float(v) for v in agent.policy.log_std],
        "seed": seed,
        "iteration": state.iteration,
        "kernel": dataclasses.asdict(cfg.kernel),
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    if state.demos:
        save_demos(path / "demos.jsonl", [DemoFileRecord(d.observations, d.return_, "memory", cfg.env, seed)
                                          for d in state.demos])


@dataclass
class Checkpoint:
    meta: dict
    policy: CategoricalPolicy | GaussianPolicy
    value_env: ValueFunction
    demos: DemoSet | None


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not (path / "meta.json").is_file():
        raise ConfigError(f"{path} is not a checkpoint directory (no meta.json)")
    meta = json.loads((path / "meta.json").read_text())
    low, high = meta["obs_low"], meta["obs_high"]
    net = DenseNet.load(path / "policy.posgnn")
    if meta["discrete"]:
        policy = CategoricalPolicy(net, low, high)
    else:
        policy = GaussianPolicy(net, np.array(meta["log_std"]), low, high)
    value_env = ValueFunction(DenseNet.load(path / "value_env.posgnn"), low, high)
    demos = None
    if (path / "demos.jsonl").is_file():
        demos = to_demoset(load_demos(path / "demos.jsonl"), capacity=10 ** 6)
    return Checkpoint(meta, policy, value_env, demos)


def evaluate(ckpt: Checkpoint, episodes: int, seed: int = 0, env_id: str | None = None,
             greedy: bool = True) -> dict:
    """Success rate, mean return and mean MMD to the stored demos of a policy."""
    if episodes < 1:
        raise ConfigError("episodes must be positive")
    meta = ckpt.meta
    env_id = env_id or meta["env"]
    layout = meta["layout"] if env_id == meta["env"] else None
    options = meta["env_options"] if env_id == meta["env"] else {}
    env = make_env(env_id, layout, **options)
    action_dim = env.n_actions if env.discrete else env.act_dim
    if env.discrete != meta["discrete"] or env.obs_dim != meta["obs_dim"] or action_dim != meta["action_dim"]:
        raise ConfigError(f"checkpoint was trained on {meta['env']!r}; it does not fit env {env_id!r}")
    trajs = collect_rollouts(env, ckpt.policy, episodes, np.random.default_rng(seed), greedy=greedy)
    out = {
        "env": env_id,
        "episodes": episodes,
        "success_rate": float(np.mean([t.success for t in trajs])),
        "mean_return": float(np.mean([t.return_ for t in trajs])),
        "mean_length": float(np.mean([len(t) for t in trajs])),
        "mean_mmd_to_demos": float("nan"),
    }
    if ckpt.demos:
        kc = KernelConfig(**meta["kernel"])
        g, spec = kc.feature_map(), kc.spec()
        out["mean_mmd_to_demos"] = float(np.mean([
            min(traj_mmd_sq(t, d, g, spec, kc.max_points) for d in ckpt.demos) for t in trajs]))
    return out


def policy_demos(ckpt: Checkpoint, count: int, seed: int = 0, greedy: bool = True) -> list[DemoFileRecord]:
    """State-only records from rolling out a trained policy."""
    meta = ckpt.meta
    env = make_env(meta["env"], meta["layout"], **meta["env_options"])
    trajs = collect_rollouts(env, ckpt.policy, count, np.random.default_rng(seed), greedy=greedy)
    return [DemoFileRecord(t.observations, t.return_, "policy", meta["env"], seed + i) for i, t in enumerate(trajs)]


# ---------------------------------------------------------------------- ablation

def ablation_configs(cfg: ExperimentConfig, axis: str, values: list) -> list[tuple[str, ExperimentConfig]]:
    if axis not in ABLATION_AXES:
        raise ConfigError(f"axis must be one of {ABLATION_AXES}, got {axis!r}")
    if not values:
        raise ConfigError("ablation needs at least one value")
    out = []
    for v in values:
        if axis == "demo_count":
            try:
                n = int(v)
            except (TypeError, ValueError):
                raise ConfigError(f"demo_count values must be integers, got {v!r}") from None
            demos = dataclasses.replace(cfg.demos, count=n, capacity=max(cfg.demos.capacity, n))
            label = str(n)
        else:
            if v not in ("expert", "medium"):
                raise ConfigError(f"demo_quality values must be 'expert' or 'medium', got {v!r}")
            demos = dataclasses.replace(cfg.demos, quality=v)
            label = v
        sub = dataclasses.replace(cfg, demos=demos, output_dir=str(Path(cfg.output_dir) / f"{axis}={label}"))
        out.append((label, sub))
    return out


def run_ablation(cfg: ExperimentConfig, axis: str, values: list, out_dir: str | Path | None = None,
                 workers: int = 1, progress=None) -> Path:
    """One full run per value; writes ``ablation.csv`` with ``axis``/``value`` columns prepended."""
    root = Path(out_dir if out_dir is not None else cfg.output_dir)
    subs = ablation_configs(cfg, axis, values)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("axis", "value") + METRIC_COLUMNS)
    for label, sub in subs:
        run_dir, _ = run_experiment(sub, root / f"{axis}={label}", workers, progress)
        with open(run_dir / "metrics.csv", newline="") as f:
            rows = list(csv.reader(f))[1:]
        for r in rows:
            w.writerow([axis, label] + r)
    root.mkdir(parents=True, exist_ok=True)
    (root / "ablation.csv").write_text(buf.getvalue())
    return root / "ablation.csv"


def final_success(rows: list[dict], last: int = 10) -> dict[int, float]:
    """Per-seed mean success rate over the final ``last`` iterations."""
    by_seed: dict[int, list[float]] = {}
    for r in rows:
        by_seed.setdefault(r["seed"], []).append(r["success_rate"])
    return {s: float(np.mean(v[-last:])) for s, v in by_seed.items()}
