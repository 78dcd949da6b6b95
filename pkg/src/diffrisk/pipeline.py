"""Stage functions behind the CLI; each reads and writes files under ``out_dir``."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .config import PipelineConfig
from .diffusion import DiffusionPolicy, train_diffusion, write_loss_curve
from .envs import make_env
from .errors import ConfigurationError, InsufficientDataError
from .evaluation import (
    POLICY_KINDS,
    EvalRow,
    PPOAgent,
    build_report,
    derive_episode_seeds,
    evaluate,
    harvest,
    report_csv,
    report_text,
    run_episodes,
)
from .ppo import load_policy, save_policy, train_ppo, write_curve
from .trajstore import filter_success, load_dataset, save_dataset, warn_if_small

log = logging.getLogger(__name__)

PPO_POLICY = "ppo_policy.json"
PPO_CURVE = "ppo_curve.csv"
PPO_SUCCESSES = "ppo_train_successes.jsonl"
DATASET = "dataset.jsonl"
DATASET_SUCC = "dataset_succ.jsonl"
NORM_STATS = "norm_stats.json"
DIFFUSION_POLICY = "diffusion_policy.json"
DIFFUSION_LOSS = "diffusion_loss.csv"
REPORT_CSV = "report.csv"
REPORT_TXT = "report.txt"
REPORT_META = "report_meta.json"


def eval_filename(kind: str) -> str:
    return f"eval_{kind}.json"


def _out(cfg: PipelineConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise InsufficientDataError(f"{what} not found: {path}")
    return path


def _check_env_match(doc_env: str, cfg: PipelineConfig, path) -> None:
    if doc_env != cfg.env_id:
        raise ConfigurationError(f"{path} was trained on {doc_env}, config says {cfg.env_id}")


def stage_train_ppo(cfg: PipelineConfig, tee: bool | None = None) -> dict:
    out = _out(cfg)
    tee = cfg.harvest.tee if tee is None else tee
    res = train_ppo(cfg.env_id, cfg.ppo, cfg.seed, cfg.env, keep_successes=tee)
    save_policy(res.policy, out / PPO_POLICY, cfg.env_id, cfg.ppo, cfg.env)
    write_curve(res.curve, out / PPO_CURVE)
    info = {"updates": res.updates, "episodes": len(res.episode_successes),
            "checkpoint": str(out / PPO_POLICY)}
    if tee:
        for i, traj in enumerate(res.episodes):
            traj.episode_id = i
        save_dataset(res.episodes, out / PPO_SUCCESSES)
        info["teed_successes"] = len(res.episodes)
    return info


def stage_collect(cfg: PipelineConfig, checkpoint=None, episodes: int | None = None,
                  out_path=None) -> dict:
    """Roll out the stochastic PPO policy. ``episodes`` overrides the configured stopping rules."""
    out = _out(cfg)
    checkpoint = Path(checkpoint) if checkpoint else out / PPO_POLICY
    policy, doc = load_policy(checkpoint)
    env_id = doc.get("env_id", cfg.env_id)
    env = make_env(env_id, cfg.env)
    if (policy.obs_dim, policy.act_dim) != (env.obs_dim, env.act_dim):
        raise ConfigurationError(f"{checkpoint} dims ({policy.obs_dim}, {policy.act_dim}) do not match "
                                 f"{env_id} ({env.obs_dim}, {env.act_dim})")
    if episodes is not None:
        if episodes < 1:
            raise ConfigurationError("--episodes must be >= 1")
        seeds = derive_episode_seeds(cfg.seed, episodes)
        data = run_episodes(env_id, PPOAgent(policy, stochastic=True), seeds, cfg.env)
        for i, traj in enumerate(data):
            traj.episode_id = i
    else:
        h = cfg.harvest
        data = harvest(policy, env_id, cfg.seed, cfg.env, episodes=h.episodes,
                       success_target=h.success_target, max_env_steps=h.max_env_steps)
    path = Path(out_path) if out_path else out / DATASET
    save_dataset(data, path)
    return {"episodes": len(data), "successes": sum(t.success_sum for t in data),
            "steps": sum(len(t) for t in data), "path": str(path)}


def stage_filter(cfg: PipelineConfig, inputs: Sequence | None = None, out_path=None) -> dict:
    out = _out(cfg)
    if not inputs:
        inputs = [out / DATASET]
        if (out / PPO_SUCCESSES).exists():
            inputs.append(out / PPO_SUCCESSES)
    data = []
    for p in inputs:
        data.extend(load_dataset(_require(Path(p), "dataset")))
    succ = filter_success(data)
    for i, traj in enumerate(succ):
        traj.episode_id = i
    path = Path(out_path) if out_path else out / DATASET_SUCC
    save_dataset(succ, path)
    warned = warn_if_small(len(succ), cfg.harvest.min_success_warning)
    return {"episodes": len(data), "successes": len(succ), "warned": warned, "path": str(path)}


def stage_train_diffusion(cfg: PipelineConfig, data=None) -> dict:
    out = _out(cfg)
    data = Path(data) if data else out / DATASET_SUCC
    dataset = load_dataset(_require(data, "successful-episode dataset"))
    # an unfiltered file is accepted, but only its successes are used
    dataset = filter_success(dataset)
    res = train_diffusion(dataset, cfg.diffusion, cfg.seed, cfg.env_id, cfg.harvest.min_success_warning)
    res.policy.save(out / DIFFUSION_POLICY)
    res.policy.stats.save(out / NORM_STATS)
    write_loss_curve(res.epoch_losses, out / DIFFUSION_LOSS)
    return {"episodes": len(dataset), "final_loss": res.epoch_losses[-1] if res.epoch_losses else None,
            "checkpoint": str(out / DIFFUSION_POLICY)}


def load_checkpoint(kind: str, path):
    if kind == "diffusion":
        try:
            policy = DiffusionPolicy.load(path)
        except FileNotFoundError:
            raise ConfigurationError(f"checkpoint not found: {path}") from None
        return policy, policy.env_id
    policy, doc = load_policy(path)
    return policy, doc.get("env_id")


def stage_evaluate(cfg: PipelineConfig, kinds: Sequence[str] | None = None, checkpoint=None,
                   episodes: int | None = None) -> list[EvalRow]:
    out = _out(cfg)
    kinds = list(kinds or cfg.evaluation.policies)
    if checkpoint is not None and len(kinds) != 1:
        raise ConfigurationError("--checkpoint needs exactly one --policy")
    seeds = cfg.evaluation.episode_seeds()
    if episodes is not None:
        seeds = seeds[:episodes] if cfg.evaluation.seeds is not None else \
            [seeds[0] + i for i in range(episodes)]
    rows = []
    for kind in kinds:
        path = Path(checkpoint) if checkpoint else out / (DIFFUSION_POLICY if kind == "diffusion" else PPO_POLICY)
        policy, env_id = load_checkpoint(kind, path)
        _check_env_match(env_id, cfg, path)
        row = evaluate(kind, policy, cfg.env_id, seeds, cfg.env, checkpoint_file=path.name)
        row.save(out / eval_filename(kind))
        log.info("%s on %s: %d/%d", kind, cfg.env_id, row.successes, row.n)
        rows.append(row)
    return rows


def stage_report(cfg: PipelineConfig, rows: Sequence | None = None) -> tuple[str, str]:
    out = _out(cfg)
    paths = [Path(p) for p in rows] if rows else sorted(out.glob("eval_*.json"))
    if not paths:
        raise InsufficientDataError(f"no evaluation rows found in {out}")
    loaded = [EvalRow.load(_require(p, "evaluation row")) for p in paths]
    order = {k: i for i, k in enumerate(POLICY_KINDS)}
    loaded.sort(key=lambda r: (r.env_id, order.get(r.policy, len(order)), r.policy))
    table = build_report(loaded)
    csv_text, txt = report_csv(table), report_text(table)
    (out / REPORT_CSV).write_text(csv_text)
    (out / REPORT_TXT).write_text(txt)
    meta = {"env_ids": sorted({r.env_id for r in loaded}), "seed": cfg.seed,
            "rows": {r.policy: r.metadata for r in loaded}, "sources": [p.name for p in paths]}
    (out / REPORT_META).write_text(json.dumps(meta, indent=1, sort_keys=True))
    return csv_text, txt


@dataclass
class PipelineResult:
    out_dir: Path
    rows: list[EvalRow]
    report: str


def run_pipeline(cfg: PipelineConfig) -> PipelineResult:
    """Every stage in order from a single config."""
    stage_train_ppo(cfg)
    stage_collect(cfg)
    info = stage_filter(cfg)
    if info["successes"] == 0:
        raise InsufficientDataError("harvest produced no successful episodes; nothing to distil")
    stage_train_diffusion(cfg)
    rows = stage_evaluate(cfg)
    _, txt = stage_report(cfg)
    return PipelineResult(Path(cfg.out_dir), rows, txt)
