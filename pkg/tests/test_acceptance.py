"""End-to-end acceptance criteria, each checked at its stated tolerance.

Every test records one PASS/FAIL line, printed in the terminal summary. The
training runs are shared through session fixtures.
"""
import itertools
import math
import time
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import ACCEPTANCE_LINES
from posg import harness
from posg.cli import main
from posg.guidance import (
    DemoSet,
    DemoTrajectory,
    GuidanceParams,
    ImportanceTable,
    accumulate_discrete,
    compute_weights,
    discrete_step_rewards,
    trajectory_weights,
)
from posg.kernels import FeatureMap, KernelSpec, mmd_sq
from test_guidance import brute_guidance, chain_rollout
from test_kernels import brute_mmd_sq
from test_nn import fd_check, random_net

pytestmark = pytest.mark.acceptance


def record(n: int, title: str, ok: bool, detail: str):
    ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] {n}: {title} -- {detail}")
    print(ACCEPTANCE_LINES[-1])
    assert ok, detail


def seed_mean_curve(rows, key="success_rate"):
    """Per-iteration mean over seeds."""
    by_it: dict[int, list[float]] = {}
    for r in rows:
        by_it.setdefault(r["iteration"], []).append(r[key])
    return np.array([np.mean(by_it[i]) for i in sorted(by_it)])


def final_mean(rows, last=10):
    return float(np.mean(list(harness.final_success(rows, last).values())))


def train_preset(name: str, out: Path):
    cfg = harness.load_config(name)
    t0 = time.perf_counter()
    run_dir, statuses = harness.run_experiment(cfg, out / name)
    assert all(s["status"] == "completed" for s in statuses), statuses
    return harness.read_metrics(run_dir / "metrics.csv"), time.perf_counter() - t0


@pytest.fixture(scope="session")
def runs_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def kdt_runs(runs_dir):
    posg, t_posg = train_preset("kdt-small-posg", runs_dir)
    ppo, t_ppo = train_preset("kdt-small-ppo", runs_dir)
    return {"posg": posg, "ppo": ppo, "seconds": t_posg + t_ppo}


@pytest.fixture(scope="session")
def pointmass_runs(runs_dir):
    posg, _ = train_preset("pointmass-posg", runs_dir)
    ppo, _ = train_preset("pointmass-ppo", runs_dir)
    return {"posg": posg, "ppo": ppo}


# ---------------------------------------------------------------- 1. kernel oracle

def test_1_mmd_matches_brute_force():
    rng = np.random.default_rng(2024)
    worst = 0.0
    t0 = time.perf_counter()
    for _ in range(200):
        dim = int(rng.integers(1, 4))
        a = rng.normal(size=(int(rng.integers(1, 8)), dim)) * 2
        b = rng.normal(size=(int(rng.integers(1, 8)), dim)) * 2 + rng.normal()
        sigma = float(rng.uniform(0.3, 4.0))
        expected = brute_mmd_sq(a.tolist(), b.tolist(), sigma)
        got = mmd_sq(a, b, KernelSpec(sigma, "fixed"))
        worst = max(worst, abs(got - expected) / max(abs(expected), 1e-300))
    elapsed = time.perf_counter() - t0
    record(1, "kernel oracle", worst <= 1e-12 and elapsed < 5,
           f"max rel err {worst:.2e} (<= 1e-12), {elapsed:.2f}s (< 5s)")


# -------------------------------------------------------------- 2. gradient oracle

def test_2_backprop_matches_finite_differences():
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        net = random_net(rng)
        worst = max(worst, fd_check(net, rng.normal(size=(4, net.input_dim)), rng.normal(size=(4, net.output_dim))))
    elapsed = time.perf_counter() - t0
    record(2, "gradient oracle", worst <= 1e-4 and elapsed < 30,
           f"max rel err {worst:.2e} (<= 1e-4), {elapsed:.2f}s (< 30s)")


# --------------------------------------------------------- 3. weight normalization

def test_3_weights_normalize():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1000):
        d = rng.uniform(0, 2, size=int(rng.integers(1, 64)))
        k = float(rng.uniform(0.1, 50))
        worst = max(worst, abs(math.fsum(trajectory_weights(d, k, 0.0)) - 1.0))
    monotone_violations = []

    @settings(max_examples=300, deadline=None)
    @given(st.lists(st.floats(0, 3), min_size=2, max_size=30), st.floats(0.1, 50))
    def monotone(dists, k):
        w = trajectory_weights(dists, k, 0.0)
        for i, j in itertools.combinations(range(len(dists)), 2):
            if dists[i] < dists[j] and w[i] < w[j]:
                monotone_violations.append((dists, k))

    monotone()
    ok = worst <= 1e-9 and not monotone_violations
    record(3, "weight normalization", ok,
           f"max |sum - 1| {worst:.1e} over 1000 buffers (<= 1e-9), monotonicity violations {len(monotone_violations)}")


# ------------------------------------------------------------------ 4. chain oracle

def test_4_demo_policy_uniquely_maximizes_guidance():
    t0 = time.perf_counter()
    policies = list(itertools.product((0, 1), repeat=3))
    trajs = [chain_rollout(p) for p in policies]
    optimal = policies.index((1, 1, 1))
    demos = DemoSet([DemoTrajectory.from_trajectory(trajs[optimal])])
    params = GuidanceParams(epsilon=0.0)
    wb = compute_weights(trajs, demos, params, KernelSpec(1.0, "fixed"), FeatureMap())
    table = accumulate_discrete(ImportanceTable(), wb)
    oracle = brute_guidance(trajs, [0.0, 1.0, 2.0], 1.0, params.k_temp, params.alpha)
    table_ok = all(abs(table.mean(((s,), a)) - v) <= 1e-12 * abs(v) for (s, a), v in oracle.items())
    totals = [math.fsum(r) for r in discrete_step_rewards(table, wb)]
    winners = [i for i, v in enumerate(totals) if v == max(totals)]
    elapsed = time.perf_counter() - t0
    ok = table_ok and winners == [optimal] and elapsed < 1
    record(4, "chain-MDP guidance oracle", ok,
           f"{len(policies)} policies, unique maximizer {[policies[i] for i in winners]}, "
           f"table matches brute force {table_ok}, {elapsed:.3f}s (< 1s)")


# ------------------------------------------------------- 5. KDT-small success trend

def test_5_kdt_small_success(kdt_runs):
    posg = final_mean(kdt_runs["posg"])
    per_seed = harness.final_success(kdt_runs["posg"])
    ppo_curve = seed_mean_curve(kdt_runs["ppo"])
    iters = max(r["iteration"] for r in kdt_runs["posg"])
    ok = posg >= 0.9 and ppo_curve.max() <= 0.2 and iters <= 300 and kdt_runs["seconds"] < 15 * 60
    record(5, "KDT-small POSG vs PPO", ok,
           f"POSG final-10 success {posg:.3f} (>= 0.9; per seed {[round(v, 3) for v in per_seed.values()]}), "
           f"PPO max seed-mean success {ppo_curve.max():.3f} (<= 0.2), {iters} iterations, "
           f"{kdt_runs['seconds']:.0f}s (< 900s)")


# --------------------------------------------------------------- 6. MMD trend

def test_6_mmd_to_demos_decreases(kdt_runs):
    posg = seed_mean_curve(kdt_runs["posg"], "mean_mmd_to_demos")
    ppo = seed_mean_curve(kdt_runs["ppo"], "mean_mmd_to_demos")
    drop = 1.0 - posg[-1] / posg[0]
    ok = drop >= 0.8 and posg[-1] < ppo[-1]
    record(6, "MMD-to-demos trend", ok,
           f"POSG {posg[0]:.4f} -> {posg[-1]:.4f} (drop {drop:.1%}, >= 80%), final PPO {ppo[-1]:.4f} (> POSG)")


# ------------------------------------------------------------ 7. demo-count ablation

def test_7_demo_count_ablation(kdt_runs, runs_dir):
    cfg = harness.load_config("kdt-small-posg")
    finals = {}
    # demo_count=1 is exactly the criterion-5 run
    assert harness.ablation_configs(cfg, "demo_count", ["1"])[0][1].demos == cfg.demos
    finals["1"] = final_mean(kdt_runs["posg"])
    path = harness.run_ablation(cfg, "demo_count", ["3", "6"], runs_dir / "ablation")
    rows = harness.read_metrics(path)
    for value in ("3", "6"):
        finals[value] = final_mean([r for r in rows if r["value"] == value])
    spread = max(abs(a - b) for a, b in itertools.combinations(finals.values(), 2))
    record(7, "demo-count ablation", spread <= 0.15,
           f"final success {', '.join(f'{k} demos {v:.3f}' for k, v in finals.items())}; "
           f"max pairwise gap {spread:.3f} (<= 0.15)")


# ---------------------------------------------------------------- 8. point-mass

def test_8_pointmass_continuous(pointmass_runs):
    posg = final_mean(pointmass_runs["posg"])
    ppo_curve = seed_mean_curve(pointmass_runs["ppo"])
    ppo_final = final_mean(pointmass_runs["ppo"])
    iters = max(r["iteration"] for r in pointmass_runs["posg"])
    ok = posg >= 0.8 and ppo_curve.max() <= 0.2 and iters <= 400
    record(8, "point-mass POSG vs PPO", ok,
           f"POSG final-10 success {posg:.3f} (>= 0.8) in {iters} iterations; PPO max seed-mean success "
           f"{ppo_curve.max():.3f}, final {ppo_final:.3f} (must stay <= 0.2)")


# ---------------------------------------------------------------- 9. determinism

def _short_config(preset: str, path: Path, iterations: int, seeds: str) -> Path:
    text = harness.load_config(preset).source_text
    lines = []
    for line in text.splitlines():
        if line.startswith("iterations ="):
            line = f"iterations = {iterations}"
        elif line.startswith("seeds ="):
            line = f"seeds = {seeds}"
        lines.append(line)
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.mark.parametrize("preset", ["kdt-small-posg", "pointmass-posg"])
def test_9_train_is_byte_identical(tmp_path, preset):
    cfg = _short_config(preset, tmp_path / "c.toml", 15, "[0, 1]")
    runner = CliRunner()
    codes = [runner.invoke(main, ["train", "--config", str(cfg), "--out", str(tmp_path / d)]).exit_code
             for d in ("a", "b")]
    same = (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    record(9, f"determinism ({preset})", codes == [0, 0] and same,
           f"exit codes {codes}, metrics.csv byte-identical {same}")


# -------------------------------------------------------- 10. baseline equivalence

@pytest.mark.parametrize("env_preset", ["kdt-small", "pointmass"])
def test_10_guidance_off_equals_ppo(tmp_path, env_preset):
    ppo_cfg = harness.load_config(_short_config(f"{env_preset}-ppo", tmp_path / "ppo.toml", 20, "[0, 1, 2, 3, 4]"))
    off_cfg = harness.load_config(_short_config(f"{env_preset}-posg", tmp_path / "off.toml", 20, "[0, 1, 2, 3, 4]"))
    off_cfg.guidance_enabled = False
    a, _ = harness.run_experiment(ppo_cfg, tmp_path / "ppo")
    b, _ = harness.run_experiment(off_cfg, tmp_path / "off")
    seeds_equal = []
    for s in ppo_cfg.seeds:
        same = ((a / f"seed_{s}" / "metrics.csv").read_bytes() == (b / f"seed_{s}" / "metrics.csv").read_bytes()
                and (a / f"seed_{s}" / "checkpoint" / "policy.posgnn").read_bytes()
                == (b / f"seed_{s}" / "checkpoint" / "policy.posgnn").read_bytes())
        seeds_equal.append(same)
    updates = sum(r["env_update"] for r in harness.read_metrics(a / "metrics.csv"))
    record(10, f"baseline equivalence ({env_preset})", all(seeds_equal),
           f"bit-identical metrics and policy per seed {seeds_equal}; env-reward updates exercised {updates}")
