"""Command-line driver: pre-train, transfer, ablate, evaluate, report.

Every run directory ends up holding ``metrics.csv``, ``policy.ckpt``,
``config.json``, ``reward_curve.svg`` and ``summary.json``, or a ``FAILED``
marker explaining why it does not.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import envsim, net, ppo, transfer
from .errors import (
    ConfigError,
    CorruptCheckpointError,
    DivergenceError,
    IncompatibleTransferError,
    InputError,
    InvalidCheckpointError,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_INCOMPATIBLE = 4

METRIC_COLUMNS = (
    ["iteration", "mean_episode_reward"]
    + [f"rew_{name}" for name in envsim.REWARD_TERMS]
    + ["surrogate_loss", "value_loss", "entropy", "approx_kl", "learning_rate", "wall_seconds"]
)
CONDITIONS = ("scratch", "l1", "l2", "both")
CONDITION_COLORS = {"scratch": "black", "both": "red", "l2": "blue", "l1": "green"}
CONDITION_LABELS = {
    "scratch": "no transfer",
    "both": "freeze L1+L2",
    "l2": "freeze L2",
    "l1": "freeze L1",
}
ARTIFACTS = ("metrics.csv", "policy.ckpt", "config.json", "reward_curve.svg", "summary.json")
CHECKPOINT = "policy.ckpt"
FAILED = "FAILED"
TRAILING = 10
THRESHOLD_FRACTION = 0.8


@dataclass
class ExperimentConfig:
    robot: object = "toy-quad"  # preset name, JSON path, or an inline field dict
    ppo: ppo.PpoConfig = field(default_factory=ppo.PpoConfig)
    seed: int = 0
    freeze_mode: str = "none"
    source_checkpoint: Optional[str] = None
    output_dir: Optional[str] = None
    deterministic_schedule: bool = False
    hidden: tuple = (512, 256, 128)
    num_seeds: int = 5
    eval_episodes: int = 1
    eval_command: Optional[list] = None
    workers: Optional[int] = None

    def __post_init__(self):
        if isinstance(self.ppo, dict):
            known = {f.name for f in fields(ppo.PpoConfig)}
            unknown = set(self.ppo) - known
            if unknown:
                raise ConfigError(f"unknown ppo fields: {sorted(unknown)}")
            self.ppo = ppo.PpoConfig(**self.ppo)
        self.hidden = tuple(int(h) for h in self.hidden)
        if len(self.hidden) < 2:
            raise ConfigError("at least two hidden layers are required")
        if self.freeze_mode not in transfer.FREEZE_MODES:
            raise ConfigError(f"unknown freeze mode {self.freeze_mode!r}")
        if self.num_seeds < 1 or self.eval_episodes < 0:
            raise ConfigError("num_seeds must be >= 1 and eval_episodes >= 0")
        if self.eval_command is not None and len(self.eval_command) != 3:
            raise ConfigError("eval_command must be [vx, vy, wz]")

    def robot_config(self) -> envsim.RobotConfig:
        if isinstance(self.robot, envsim.RobotConfig):
            return self.robot
        if isinstance(self.robot, dict):
            return envsim.RobotConfig.from_dict(self.robot)
        return envsim.load_robot(str(self.robot))

    def shapes(self, robot: envsim.RobotConfig) -> tuple[net.MlpShape, net.MlpShape]:
        return (net.MlpShape(robot.obs_dim, self.hidden, robot.action_dim),
                net.MlpShape(robot.obs_dim, self.hidden, 1))

    def snapshot(self, robot: envsim.RobotConfig) -> dict:
        return {
            "robot": robot.to_dict(),
            "ppo": self.ppo.to_dict(),
            "seed": self.seed,
            "freeze_mode": self.freeze_mode,
            "source_checkpoint": self.source_checkpoint,
            "output_dir": self.output_dir,
            "deterministic_schedule": self.deterministic_schedule,
            "hidden": list(self.hidden),
            "num_seeds": self.num_seeds,
            "eval_episodes": self.eval_episodes,
            "eval_command": self.eval_command,
        }


def load_config(path: Optional[str], overrides: dict) -> ExperimentConfig:
    """Merge a JSON config file with CLI overrides (overrides win)."""
    data: dict = {}
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    ppo_over = overrides.pop("ppo", {})
    data.update({k: v for k, v in overrides.items() if v is not None})
    if ppo_over:
        base = data.get("ppo", {})
        base = base.to_dict() if isinstance(base, ppo.PpoConfig) else dict(base)
        base.update(ppo_over)
        data["ppo"] = base
    try:
        return ExperimentConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# artifacts


def metrics_rows(metrics: Sequence[ppo.IterationMetrics], deterministic: bool) -> list[list]:
    rows = []
    for m in metrics:
        row = [m.iteration, repr(m.mean_episode_reward)]
        row += [repr(m.reward_terms[name]) for name in envsim.REWARD_TERMS]
        row += [repr(m.surrogate_loss), repr(m.value_loss), repr(m.entropy), repr(m.approx_kl),
                repr(m.learning_rate)]
        # wall time differs between identical runs; deterministic mode keeps
        # the file byte-stable and moves timings to summary.json
        row.append("" if deterministic else repr(m.wall_seconds))
        rows.append(row)
    return rows


def write_csv(path: Path, header: Sequence[str], rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    path.write_text(buf.getvalue())


def read_metrics(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != METRIC_COLUMNS:
            raise InputError(f"{path} does not have the metrics.csv columns")
        return list(reader)


def trailing_mean(values: Sequence[float], window: int = TRAILING) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    out = np.empty_like(v)
    for i in range(len(v)):
        out[i] = v[max(0, i - window + 1):i + 1].mean()
    return out


def iterations_to_threshold(rewards: Sequence[float], threshold: float) -> Optional[int]:
    """First 1-based iteration whose trailing-10 mean reaches ``threshold``.

    Only full windows count, so a single lucky early iteration is not a hit.
    """
    smooth = trailing_mean(rewards)[TRAILING - 1:]
    hits = np.flatnonzero(smooth >= threshold)
    return int(hits[0]) + TRAILING if len(hits) else None


def final_trailing(rewards: Sequence[float]) -> Optional[float]:
    return float(np.mean(rewards[-TRAILING:])) if len(rewards) else None


def svg_chart(series: list[tuple[str, str, Sequence[float]]], title: str, width: int = 640,
              height: int = 400) -> str:
    """Polyline chart; ``series`` holds (label, color, y-values)."""
    pad_l, pad_r, pad_t, pad_b = 60, 150, 30, 40
    ys = [float(y) for _, _, vals in series for y in vals if np.isfinite(y)]
    n = max((len(vals) for _, _, vals in series), default=0)
    lo, hi = (min(ys), max(ys)) if ys else (0.0, 1.0)
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    pw, ph = width - pad_l - pad_r, height - pad_t - pad_b

    def px(i):
        return pad_l + (pw * i / max(n - 1, 1))

    def py(y):
        return pad_t + ph * (1.0 - (y - lo) / (hi - lo))

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{pad_l}" y="18" font-family="sans-serif" font-size="14">{title}</text>',
        f'<line x1="{pad_l}" y1="{pad_t + ph}" x2="{pad_l + pw}" y2="{pad_t + ph}" stroke="#888"/>',
        f'<line x1="{pad_l}" y1="{pad_t}" x2="{pad_l}" y2="{pad_t + ph}" stroke="#888"/>',
        f'<text x="{pad_l - 5}" y="{pad_t + 4}" font-family="sans-serif" font-size="10" '
        f'text-anchor="end">{hi:.3g}</text>',
        f'<text x="{pad_l - 5}" y="{pad_t + ph}" font-family="sans-serif" font-size="10" '
        f'text-anchor="end">{lo:.3g}</text>',
        f'<text x="{pad_l + pw / 2}" y="{height - 10}" font-family="sans-serif" font-size="11" '
        f'text-anchor="middle">iteration (1..{n})</text>',
    ]
    for k, (label, color, vals) in enumerate(series):
        pts = " ".join(f"{px(i):.1f},{py(float(y)):.1f}" for i, y in enumerate(vals) if np.isfinite(y))
        if pts:
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = pad_t + 16 * k + 8
        out.append(f'<line x1="{pad_l + pw + 10}" y1="{ly}" x2="{pad_l + pw + 30}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{pad_l + pw + 35}" y="{ly + 4}" font-family="sans-serif" '
                   f'font-size="11">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_failure(out: Path, code: int, message: str, partial: bool = False) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / FAILED).write_text(json.dumps({"exit_code": code, "error": message, "partial_metrics": partial},
                                         indent=2) + "\n")


# ---------------------------------------------------------------------------
# single training runs


def _env_factory(robot: envsim.RobotConfig):
    return lambda n, s: envsim.VecEnv(robot, n, s)


def _check_dims(params: net.ActorCriticParams, robot: envsim.RobotConfig, what: str) -> None:
    if params.obs_dim != robot.obs_dim or params.action_dim != robot.action_dim:
        raise IncompatibleTransferError(
            f"{what} expects obs {params.obs_dim}/act {params.action_dim}, robot {robot.name!r} "
            f"has obs {robot.obs_dim}/act {robot.action_dim}"
        )


def load_source(path: Optional[str]) -> tuple[net.ActorCriticParams, transfer.CheckpointMeta]:
    if not path:
        raise ConfigError("a source checkpoint (--source) is required")
    if not Path(path).is_file():
        raise ConfigError(f"source checkpoint not found: {path}")
    return transfer.load_checkpoint(path)


def initial_params(cfg: ExperimentConfig, robot: envsim.RobotConfig, condition: str,
                   source: Optional[net.ActorCriticParams]):
    """Fresh params for ``scratch``; otherwise the transferred source actor."""
    actor_shape, critic_shape = cfg.shapes(robot)
    if condition == "scratch":
        return net.init_params(actor_shape, critic_shape, cfg.seed), None
    if source is None:
        raise ConfigError("transfer runs need a source checkpoint")
    spec = transfer.make_freeze_spec(condition)
    params = transfer.transfer_actor(source, actor_shape, critic_shape, cfg.seed)
    if spec.frozen_blocks and max(spec.frozen_blocks) >= len(params.actor_layers) - 1:
        raise ConfigError(f"freeze mode {condition!r} needs more hidden layers")
    return params, spec


def run_stage(cfg: ExperimentConfig, robot: envsim.RobotConfig, out: Path, condition: str,
              source: Optional[net.ActorCriticParams] = None, stage: str = "train") -> dict:
    """Train one policy and write the five run artifacts into ``out``.

    Raises ``DivergenceError`` after writing partial metrics and a failure
    marker.
    """
    params, spec = initial_params(cfg, robot, condition, source)
    out.mkdir(parents=True, exist_ok=True)
    (out / FAILED).unlink(missing_ok=True)
    snap = cfg.snapshot(robot)
    snap.update(stage=stage, condition=condition, output_dir=str(out))
    (out / "config.json").write_text(json.dumps(snap, indent=2, sort_keys=True) + "\n")

    start = time.perf_counter()
    try:
        final, metrics = ppo.train_stage(_env_factory(robot), params, spec, cfg.ppo, cfg.seed)
    except DivergenceError as exc:
        partial = getattr(exc, "metrics", [])
        write_csv(out / "metrics.csv", METRIC_COLUMNS, metrics_rows(partial, cfg.deterministic_schedule))
        write_failure(out, EXIT_DIVERGED, str(exc), partial=True)
        raise
    wall = time.perf_counter() - start

    write_csv(out / "metrics.csv", METRIC_COLUMNS, metrics_rows(metrics, cfg.deterministic_schedule))
    transfer.save_checkpoint(final, transfer.CheckpointMeta(robot.name, len(metrics), cfg.seed), out / CHECKPOINT)
    rewards = [m.mean_episode_reward for m in metrics]
    (out / "reward_curve.svg").write_text(
        svg_chart([("mean reward", CONDITION_COLORS.get(condition, "black"), rewards)],
                  f"{robot.name} {stage} ({condition}, seed {cfg.seed})")
    )
    total = final.actor_param_count()
    trainable = transfer.trainable_param_count(final, spec)
    tail = final_trailing(rewards)
    summary = {
        "stage": stage,
        "condition": condition,
        "robot": robot.name,
        "seed": cfg.seed,
        "iterations": len(metrics),
        "final_mean_reward": tail,
        "wall_seconds": wall,
        "actor_params_total": total,
        "actor_params_trainable": trainable,
        "actor_params_frozen": total - trainable,
        "critic_params": final.critic_param_count(),
        "frozen_blocks": sorted(spec.frozen_blocks) if spec else [],
        "source_checkpoint": cfg.source_checkpoint if condition != "scratch" else None,
        # relative to this run's own final trailing mean; ablations also
        # report the count against the scratch threshold
        "iterations_to_threshold": (iterations_to_threshold(rewards, THRESHOLD_FRACTION * tail)
                                    if tail is not None else None),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return {"summary": summary, "rewards": rewards}


def default_out(command: str, robot_name: str, seed: int) -> Path:
    root = Path(os.environ.get("PTRL_OUT_ROOT", "runs"))
    return root / f"{command}-{robot_name}-s{seed}"


def cmd_train(cfg: ExperimentConfig) -> dict:
    if cfg.freeze_mode != "none":
        raise ConfigError("train starts from scratch; use transfer for freeze modes")
    robot = cfg.robot_config()
    out = Path(cfg.output_dir) if cfg.output_dir else default_out("train", robot.name, cfg.seed)
    return run_stage(cfg, robot, out, "scratch", stage="train")


def cmd_transfer(cfg: ExperimentConfig) -> dict:
    robot = cfg.robot_config()
    out = Path(cfg.output_dir) if cfg.output_dir else default_out("transfer", robot.name, cfg.seed)
    source, _ = load_source(cfg.source_checkpoint)
    condition = cfg.freeze_mode
    try:
        initial_params(cfg, robot, condition if condition != "none" else "none", source)
    except IncompatibleTransferError as exc:
        write_failure(out, EXIT_INCOMPATIBLE, str(exc))
        raise
    return run_stage(cfg, robot, out, condition, source, stage="transfer")


# ---------------------------------------------------------------------------
# ablation grid


def _ablate_job(args):
    cfg, robot, out, condition, source = args
    try:
        return condition, cfg.seed, run_stage(cfg, robot, Path(out), condition, source, stage="ablate")
    except DivergenceError as exc:
        return condition, cfg.seed, {"error": str(exc)}


def cmd_ablate(cfg: ExperimentConfig) -> dict:
    robot = cfg.robot_config()
    out = Path(cfg.output_dir) if cfg.output_dir else default_out("ablate", robot.name, cfg.seed)
    source, _ = load_source(cfg.source_checkpoint)
    try:
        transfer.transfer_actor(source, *cfg.shapes(robot), seed=0)
    except IncompatibleTransferError as exc:
        write_failure(out, EXIT_INCOMPATIBLE, str(exc))
        raise
    out.mkdir(parents=True, exist_ok=True)
    seeds = [cfg.seed + k for k in range(cfg.num_seeds)]
    jobs = []
    for condition in CONDITIONS:
        for seed in seeds:
            sub = _replace(cfg, seed=seed)
            jobs.append((sub, robot, str(out / condition / f"seed{seed}"), condition,
                         None if condition == "scratch" else source))

    start = time.perf_counter()
    if cfg.deterministic_schedule or (cfg.workers or os.cpu_count() or 1) <= 1:
        results = [_ablate_job(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_ablate_job, jobs))
    wall = time.perf_counter() - start

    runs = {(c, s): r for c, s, r in results}
    failures = [f"{c}/seed{s}: {r['error']}" for (c, s), r in runs.items() if "error" in r]
    rows = []
    for condition in CONDITIONS:
        for seed in seeds:
            for i, r in enumerate(runs[(condition, seed)].get("rewards", []), start=1):
                rows.append([condition, seed, i, repr(r)])
    write_csv(out / "ablation.csv", ["condition", "seed", "iteration", "mean_reward"], rows)

    scratch_finals = [runs[("scratch", s)]["summary"]["final_mean_reward"] for s in seeds
                      if "summary" in runs[("scratch", s)]]
    threshold = THRESHOLD_FRACTION * float(np.median(scratch_finals)) if scratch_finals else None
    table = []
    series = []
    for condition in CONDITIONS:
        done = [runs[(condition, s)] for s in seeds if "summary" in runs[(condition, s)]]
        iters = []
        for r in done:
            hit = iterations_to_threshold(r["rewards"], threshold) if threshold is not None else None
            # never reaching the threshold counts as one past the budget
            iters.append(hit if hit is not None else len(r["rewards"]) + 1)
        finals = [r["summary"]["final_mean_reward"] for r in done]
        walls = [r["summary"]["wall_seconds"] for r in done]
        curves = [r["rewards"] for r in done if r["rewards"]]
        if curves:
            n = min(len(c) for c in curves)
            series.append((CONDITION_LABELS[condition], CONDITION_COLORS[condition],
                           np.mean([c[:n] for c in curves], axis=0)))
        table.append({
            "condition": condition,
            "seeds": len(done),
            "median_iterations_to_threshold": float(np.median(iters)) if iters else None,
            "iterations_to_threshold": iters,
            "median_final_reward": float(np.median(finals)) if finals else None,
            "final_rewards": finals,
            "median_wall_seconds": float(np.median(walls)) if walls else None,
            "actor_params_trainable": done[0]["summary"]["actor_params_trainable"] if done else None,
        })
    (out / "ablation.svg").write_text(svg_chart(series, f"{robot.name}: freeze ablation (seed mean)"))
    write_csv(out / "ablation_summary.csv",
              ["condition", "seeds", "median_iterations_to_threshold", "median_final_reward",
               "median_wall_seconds", "actor_params_trainable"],
              [[t["condition"], t["seeds"], t["median_iterations_to_threshold"], t["median_final_reward"],
                t["median_wall_seconds"], t["actor_params_trainable"]] for t in table])
    report = {"robot": robot.name, "seeds": seeds, "threshold": threshold, "wall_seconds": wall,
              "conditions": table, "errors": failures}
    (out / "ablation_summary.json").write_text(json.dumps(report, indent=2) + "\n")
    if failures and len(failures) == len(jobs):
        raise DivergenceError("every ablation run diverged")
    return report


def _replace(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    data = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    data.update(changes)
    return ExperimentConfig(**data)


def format_table(report: dict) -> str:
    lines = ["condition | seeds | median iters-to-threshold | median final reward | median wall s | trainable",
             "--- | --- | --- | --- | --- | ---"]
    for t in report["conditions"]:
        fmt = lambda v: "-" if v is None else (f"{v:.4g}" if isinstance(v, float) else str(v))
        lines.append(" | ".join(fmt(t[k]) for k in ("condition", "seeds", "median_iterations_to_threshold",
                                                     "median_final_reward", "median_wall_seconds",
                                                     "actor_params_trainable")))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# evaluation


def evaluate(params: net.ActorCriticParams, robot: envsim.RobotConfig, episodes: int, seed: int,
             command=None) -> dict:
    """Roll the mean action for ``episodes`` episodes and record traces."""
    _check_dims(params, robot, "checkpoint")
    trace = []
    per_episode = []
    fixed = None if command is None else np.asarray(command, dtype=np.float64)
    for ep in range(episodes):
        rng = envsim.env_rng(seed, ep)
        state, obs = envsim.reset(rng, robot)
        if fixed is not None:
            state.command[0] = fixed
        ep_cfg = envsim.domain_randomize(robot, rng)
        kp = np.full((1, 1), ep_cfg.kp)
        mass = np.full((1, 1), ep_cfg.joint_mass)
        total = 0.0
        term_sums = {name: 0.0 for name in envsim.REWARD_TERMS}
        errors = []
        reason = ""
        for t in range(robot.episode_length):
            obs = envsim.assemble_observation(state, robot)
            mean, _ = net.actor_forward(params, obs)
            nxt, tau = envsim.advance(state, mean, robot, kp=kp, mass=mass)
            reward, terms = envsim.compute_reward(nxt, state, mean, state.prev_action, tau, robot)
            total += float(reward[0])
            for name in envsim.REWARD_TERMS:
                term_sums[name] += float(terms[name][1][0])
            cmd = nxt.command[0]
            trace.append([ep, t + 1, repr(float(cmd[0])), repr(float(nxt.v[0, 0])), repr(float(cmd[1])),
                          repr(float(nxt.v[0, 1])), repr(float(cmd[2])), repr(float(nxt.omega[0, 2])),
                          repr(float(reward[0]))])
            errors.append(abs(float(nxt.v[0, 0] - cmd[0])))
            state = nxt
            done, why = envsim.is_done(state, robot)
            if done[0]:
                reason = str(why[0])
                break
        steps = len(errors)
        steady = errors[len(errors) // 2:] if errors else []
        per_episode.append({
            "episode": ep,
            "steps": steps,
            "end_reason": reason,
            "total_reward": total,
            "mean_reward": total / steps if steps else None,
            "reward_terms": {k: v / steps for k, v in term_sums.items()} if steps else {},
            "steady_state_abs_vx_error": float(np.mean(steady)) if steady else None,
            "command": [float(c) for c in state.command[0]],
        })
    errs = [e["steady_state_abs_vx_error"] for e in per_episode if e["steady_state_abs_vx_error"] is not None]
    return {
        "robot": robot.name,
        "episodes": per_episode,
        "mean_steady_state_abs_vx_error": float(np.mean(errs)) if errs else None,
        "trace": trace,
    }


TRACE_COLUMNS = ["episode", "step", "cmd_vx", "vx", "cmd_vy", "vy", "cmd_wz", "wz", "reward"]


def cmd_eval(cfg: ExperimentConfig) -> dict:
    robot = cfg.robot_config()
    out = Path(cfg.output_dir) if cfg.output_dir else default_out("eval", robot.name, cfg.seed)
    params, _ = load_source(cfg.source_checkpoint)
    try:
        _check_dims(params, robot, "checkpoint")
    except IncompatibleTransferError as exc:
        write_failure(out, EXIT_INCOMPATIBLE, str(exc))
        raise
    result = evaluate(params, robot, cfg.eval_episodes, cfg.seed, cfg.eval_command)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "tracking.csv", TRACE_COLUMNS, result.pop("trace"))
    result["checkpoint"] = cfg.source_checkpoint
    (out / "eval.json").write_text(json.dumps(result, indent=2) + "\n")
    return result


# ---------------------------------------------------------------------------
# reports


def read_run(path: Path) -> dict:
    if (path / FAILED).exists():
        raise InputError(f"{path} is marked failed")
    for name in ARTIFACTS:
        if not (path / name).is_file():
            raise InputError(f"{path} lacks {name}")
    try:
        summary = json.loads((path / "summary.json").read_text())
        config = json.loads((path / "config.json").read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: {exc}") from None
    metrics = read_metrics(path / "metrics.csv")
    return {"path": str(path), "summary": summary, "config": config,
            "rewards": [float(r["mean_episode_reward"]) for r in metrics]}


def observation_batch(run: dict, steps: int = 64, num_envs: int = 8, seed: int = 0) -> np.ndarray:
    """Robot-agnostic observation features gathered by the run's final policy.

    Only the blocks every robot shares (body rates, projected gravity,
    command) are kept, so robots with different joint counts are comparable.
    """
    robot = envsim.RobotConfig.from_dict(run["config"]["robot"])
    params, _ = transfer.load_checkpoint(Path(run["path"]) / CHECKPOINT)
    env = envsim.VecEnv(robot, num_envs, seed)
    obs = env.observe()
    keep = np.r_[0:6, 6 + 2 * robot.J:9 + 2 * robot.J]
    rows = []
    for _ in range(steps):
        rows.append(obs[:, keep])
        mean, _ = net.actor_forward(params, obs)
        obs, _, _, _ = env.step(mean)
    return np.vstack(rows)


def cmd_report(run_dirs: Sequence[str], out: Path) -> dict:
    seen = []
    for d in run_dirs:
        p = Path(d).resolve()
        if p not in seen:
            seen.append(p)
    runs, errors = [], []
    for p in seen:
        try:
            runs.append(read_run(p))
        except (InputError, OSError, CorruptCheckpointError) as exc:
            errors.append({"path": str(p), "error": str(exc)})
    report = {"runs": [dict(r["summary"], path=r["path"]) for r in runs], "errors": errors}
    if len(runs) == 1:
        report.update(runs[0]["summary"])

    sources = [r for r in runs if r["summary"].get("stage") == "train"]
    targets = [r for r in runs if r["summary"].get("stage") in ("transfer", "ablate")]
    if not (sources and targets) and len(runs) >= 2:
        first = runs[0]
        others = [r for r in runs[1:] if r["summary"].get("robot") != first["summary"].get("robot")]
        sources, targets = [first], others
    if sources and targets:
        try:
            xs = observation_batch(sources[0])
            xt = observation_batch(targets[0])
            pooled = np.vstack([xs, xt])
            mu, sd = pooled.mean(axis=0), pooled.std(axis=0)
            sd[sd == 0.0] = 1.0
            report["mmd_obs"] = transfer.mmd((xs - mu) / sd, (xt - mu) / sd)
            report["mmd_pair"] = [sources[0]["path"], targets[0]["path"]]
        except (InputError, OSError, CorruptCheckpointError, ConfigError) as exc:
            errors.append({"path": targets[0]["path"], "error": f"mmd: {exc}"})

    if runs:
        out.mkdir(parents=True, exist_ok=True)
        palette = ["black", "red", "blue", "green", "orange", "purple", "brown", "gray"]
        series = [(f"{r['summary'].get('robot')}/{r['summary'].get('condition')}/s{r['summary'].get('seed')}",
                   palette[i % len(palette)], r["rewards"]) for i, r in enumerate(runs)]
        (out / "report.svg").write_text(svg_chart(series, "reward curves"))
        (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    return report


# ---------------------------------------------------------------------------
# CLI


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ptrl", description="Pre-train and transfer locomotion policies.")
    sub = parser.add_subparsers(dest="command", required=True)

    def shared(p):
        p.add_argument("--config", help="JSON experiment config; flags override it")
        p.add_argument("--robot", help="preset name (toy-quad, toy-biped) or robot JSON path")
        p.add_argument("--seed", type=int)
        p.add_argument("--iterations", type=int)
        p.add_argument("--freeze", choices=sorted(transfer.FREEZE_MODES))
        p.add_argument("--source", help="source checkpoint")
        p.add_argument("--out", help="output directory (default under $PTRL_OUT_ROOT)")
        p.add_argument("--deterministic", action="store_true", default=None,
                       help="sequential schedule and byte-stable metrics.csv")
        p.add_argument("--num-envs", type=int)

    for name, text in (("train", "pre-train on a robot from scratch"),
                       ("transfer", "transfer a source actor and fine-tune"),
                       ("ablate", "scratch vs three freeze modes over several seeds")):
        p = sub.add_parser(name, help=text)
        shared(p)
        if name == "ablate":
            p.add_argument("--seeds", type=int, help="number of seeds (default 5)")
            p.add_argument("--workers", type=int, help="worker processes when not deterministic")

    p = sub.add_parser("eval", help="roll the mean action and record tracking traces")
    shared(p)
    p.add_argument("--checkpoint", help="alias for --source")
    p.add_argument("--episodes", type=int)
    p.add_argument("--command", dest="eval_command", type=float, nargs=3, metavar=("VX", "VY", "WZ"),
                   help="hold this command for the whole episode")

    p = sub.add_parser("report", help="merge run directories into one report")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", help="report directory (default under $PTRL_OUT_ROOT)")
    return parser


def _overrides(args) -> dict:
    over = {
        "robot": args.robot,
        "seed": args.seed,
        "freeze_mode": args.freeze,
        "source_checkpoint": getattr(args, "checkpoint", None) or args.source,
        "output_dir": args.out,
        "deterministic_schedule": args.deterministic,
        "num_seeds": getattr(args, "seeds", None),
        "workers": getattr(args, "workers", None),
        "eval_episodes": getattr(args, "episodes", None),
        "eval_command": getattr(args, "eval_command", None),
    }
    ppo_over = {}
    if args.iterations is not None:
        ppo_over["iterations"] = args.iterations
    if args.num_envs is not None:
        ppo_over["num_envs"] = args.num_envs
    over["ppo"] = ppo_over
    return over


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            out = Path(args.out) if args.out else Path(os.environ.get("PTRL_OUT_ROOT", "runs")) / "report"
            report = cmd_report(args.runs, out)
            for err in report["errors"]:
                print(f"skipped {err['path']}: {err['error']}", file=sys.stderr)
            if not report["runs"]:
                return EXIT_CONFIG
            print(json.dumps({k: v for k, v in report.items() if k != "runs"}, indent=2))
            return EXIT_OK
        cfg = load_config(args.config, _overrides(args))
        if args.command == "train":
            result = cmd_train(cfg)
            print(json.dumps(result["summary"], indent=2))
        elif args.command == "transfer":
            result = cmd_transfer(cfg)
            print(json.dumps(result["summary"], indent=2))
        elif args.command == "ablate":
            print(format_table(cmd_ablate(cfg)))
        elif args.command == "eval":
            result = cmd_eval(cfg)
            print(json.dumps({k: v for k, v in result.items() if k != "episodes"}, indent=2))
        return EXIT_OK
    except (IncompatibleTransferError, InvalidCheckpointError, CorruptCheckpointError) as exc:
        print(f"error: incompatible checkpoint: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
