"""Episode rollouts for evaluation and harvesting, success statistics, reports.

Episodes are run in lock-step batches so that policy networks are
evaluated on many observations at once. Every episode owns its random
streams (environment and action noise both derive from the episode seed),
so batching changes results only through floating-point rounding in the
network's matrix products. For a fixed batch size runs are bit-identical.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .diffusion import DiffusionController, DiffusionPolicy, sample_action_sequence
from .envs import make_env
from .errors import ConfigurationError
from .nn import mlp_forward
from .ppo import EVAL_SEED_BASE, GaussianPolicy
from .trajstore import Trajectory

POLICY_KINDS = ("ppo-stochastic", "ppo-mean", "diffusion")
BASELINE = "ppo-stochastic"


def wilson_interval(successes: int, n: int, z: float = 1.96) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion, clipped to [0, 1]."""
    if n < 1 or not 0 <= successes <= n or z <= 0:
        raise ValueError(f"invalid arguments: successes={successes}, n={n}, z={z}")
    p = successes / n
    z2 = z * z
    denom = 1 + z2 / n
    center = (p + z2 / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z2 / (4 * n * n)) / denom
    low = 0.0 if successes == 0 else max(0.0, center - half)
    high = 1.0 if successes == n else min(1.0, center + half)
    return low, high


def episode_rng(seed: int) -> np.random.Generator:
    """Action-noise stream for one episode, independent of the environment's own stream."""
    return np.random.default_rng([int(seed), 0x5EED])


def derive_episode_seeds(base_seed: int, count: int, start: int = 0) -> list[int]:
    """Seeds for harvesting; the ``i``-th seed depends only on ``(base_seed, i)``."""
    rng = np.random.default_rng([int(base_seed), 0xC011EC7])
    seeds = rng.integers(0, EVAL_SEED_BASE, size=start + count)
    return [int(s) for s in seeds[start:]]


def evaluation_seeds(count: int, offset: int = 0) -> list[int]:
    return [EVAL_SEED_BASE + offset + i for i in range(count)]


# -- agents -------------------------------------------------------------------

class Agent:
    """Batched controller interface used by :func:`run_episodes`."""

    def begin(self, seeds: Sequence[int]) -> None:
        pass

    def act(self, observations: np.ndarray, active: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class PPOAgent(Agent):
    def __init__(self, policy: GaussianPolicy, stochastic: bool = True):
        self.policy = policy
        self.stochastic = stochastic

    def begin(self, seeds):
        self.rngs = [episode_rng(s) for s in seeds]

    def act(self, observations, active):
        mu = mlp_forward(self.policy.mean_net, self.policy.scale(observations[active]))
        if self.stochastic:
            std = np.exp(self.policy.log_std)
            noise = np.stack([self.rngs[i].standard_normal(self.policy.act_dim) for i in np.flatnonzero(active)])
            mu = mu + std * noise
        out = np.zeros((len(observations), self.policy.act_dim))
        out[active] = np.clip(mu, -1.0, 1.0)
        return out


class DiffusionAgent(Agent):
    def __init__(self, policy: DiffusionPolicy):
        self.policy = policy

    def begin(self, seeds):
        self.controllers = [DiffusionController(self.policy, episode_rng(s)) for s in seeds]

    def act(self, observations, active):
        idx = np.flatnonzero(active)
        for i in idx:
            self.controllers[i].observe(observations[i])
        plan = [i for i in idx if self.controllers[i].needs_plan]
        if plan:
            hist = np.stack([self.controllers[i].obs_history() for i in plan])
            seqs = sample_action_sequence(self.policy, hist, [self.controllers[i].rng for i in plan])
            for i, seq in zip(plan, seqs):
                self.controllers[i].enqueue(seq)
        out = np.zeros((len(observations), self.policy.act_dim))
        for i in idx:
            out[i] = self.controllers[i].queue.popleft()
        return out

    @property
    def sampler_calls(self) -> list[int]:
        return [c.sampler_calls for c in self.controllers]


class FunctionAgent(Agent):
    """Wraps a per-observation function, e.g. a scripted controller."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray]):
        self.fn = fn

    def act(self, observations, active):
        out = np.zeros((len(observations), 2))
        for i in np.flatnonzero(active):
            out[i] = self.fn(observations[i])
        return out


def run_episodes(env_id: str, agent: Agent, seeds: Sequence[int], env_config=None,
                 batch_size: int = 256) -> list[Trajectory]:
    """Run one episode per seed and return them in seed order."""
    out: list[Trajectory] = []
    for start in range(0, len(seeds), batch_size):
        out.extend(_run_batch(env_id, agent, list(seeds[start:start + batch_size]), env_config, start))
    return out


def _run_batch(env_id, agent, seeds, env_config, id_offset) -> list[Trajectory]:
    envs = [make_env(env_id, env_config) for _ in seeds]
    obs = np.stack([e.reset(s) for e, s in zip(envs, seeds)])
    agent.begin(seeds)
    active = np.ones(len(envs), dtype=bool)
    bufs = [{k: [] for k in ("obs", "act", "rew", "succ", "term", "trunc")} for _ in envs]
    while active.any():
        actions = agent.act(obs, active)
        for i in np.flatnonzero(active):
            a = np.clip(actions[i], -1.0, 1.0)
            res = envs[i].step(a)
            b = bufs[i]
            b["obs"].append(obs[i].copy()); b["act"].append(a); b["rew"].append(res.reward)
            b["succ"].append(res.success); b["term"].append(res.terminated); b["trunc"].append(res.truncated)
            obs[i] = res.observation
            if res.terminated or res.truncated:
                active[i] = False
    return [Trajectory.from_steps(id_offset + j, env_id, s, b["obs"], b["act"], b["rew"], b["succ"],
                                  b["term"], b["trunc"])
            for j, (s, b) in enumerate(zip(seeds, bufs))]


def harvest(policy: GaussianPolicy, env_id: str, seed: int, env_config=None, episodes: int | None = None,
            success_target: int | None = None, max_env_steps: int | None = None,
            chunk: int = 128) -> list[Trajectory]:
    """Roll out the stochastic policy on fresh seeds until a stopping rule fires.

    Stops after ``episodes`` episodes, once ``success_target`` successes are
    in hand, or when adding the next episode would exceed ``max_env_steps``.
    Episodes come in seed order and match one-by-one rollouts up to rounding.
    """
    if episodes is None and success_target is None and max_env_steps is None:
        raise ConfigurationError("harvest needs at least one stopping rule")
    agent = PPOAgent(policy, stochastic=True)
    out: list[Trajectory] = []
    steps = successes = 0
    drawn = 0
    while True:
        n = chunk if episodes is None else min(chunk, episodes - drawn)
        if n <= 0:
            return out
        seeds = derive_episode_seeds(seed, n, start=drawn)
        batch = run_episodes(env_id, agent, seeds, env_config)
        for traj in batch:
            if max_env_steps is not None and steps + len(traj) > max_env_steps:
                return out
            traj.episode_id = drawn
            drawn += 1
            out.append(traj)
            steps += len(traj)
            successes += traj.success_sum
            if success_target is not None and successes >= success_target:
                return out
        if episodes is not None and drawn >= episodes:
            return out


# -- evaluation & reporting ------------------------------------------------------

@dataclass
class EvalRow:
    policy: str
    env_id: str
    n: int
    successes: int
    rate: float
    ci_low: float
    ci_high: float
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_counts(cls, policy: str, env_id: str, successes: int, n: int, **metadata) -> "EvalRow":
        low, high = wilson_interval(successes, n)
        return cls(policy, env_id, n, successes, successes / n, low, high, metadata)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalRow":
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "EvalRow":
        return cls.from_dict(json.loads(Path(path).read_text()))


def make_agent(policy_kind: str, checkpoint) -> Agent:
    if policy_kind not in POLICY_KINDS:
        raise ConfigurationError(f"unknown policy kind {policy_kind!r}; expected one of {POLICY_KINDS}")
    if policy_kind == "diffusion":
        return DiffusionAgent(checkpoint)
    return PPOAgent(checkpoint, stochastic=policy_kind == "ppo-stochastic")


def evaluate(policy_kind: str, checkpoint, env_id: str, episode_seeds: Sequence[int],
             env_config=None, agent: Agent | None = None, **metadata) -> EvalRow:
    """One episode per seed; counts episodes whose success flags sum to one."""
    if not episode_seeds:
        raise ConfigurationError("evaluation needs at least one episode seed")
    if agent is None:
        agent = make_agent(policy_kind, checkpoint)
        env = make_env(env_id, env_config)
        dims = (checkpoint.obs_dim, checkpoint.act_dim)
        if dims != (env.obs_dim, env.act_dim):
            raise ConfigurationError(f"checkpoint dims {dims} do not match {env_id} "
                                     f"({env.obs_dim}, {env.act_dim})")
    episodes = run_episodes(env_id, agent, episode_seeds, env_config)
    successes = sum(1 for t in episodes if t.success_sum == 1)
    metadata.setdefault("first_seed", int(episode_seeds[0]))
    metadata.setdefault("last_seed", int(episode_seeds[-1]))
    return EvalRow.from_counts(policy_kind, env_id, successes, len(episodes), **metadata)


REPORT_COLUMNS = ("task", "policy", "n", "successes", "rate", "ci_low", "ci_high")


def build_report(rows: Sequence[EvalRow]) -> list[dict]:
    """Flatten evaluation rows; adds ``delta`` (diffusion minus stochastic baseline) per task when both exist."""
    if not rows:
        raise ValueError("report needs at least one evaluation row")
    base = {r.env_id: r.rate for r in rows if r.policy == BASELINE}
    has_delta = any(r.policy == "diffusion" and r.env_id in base for r in rows)
    table = []
    for r in rows:
        rec = {"task": r.env_id, "policy": r.policy, "n": r.n, "successes": r.successes,
               "rate": r.rate, "ci_low": r.ci_low, "ci_high": r.ci_high}
        if has_delta:
            rec["delta"] = r.rate - base[r.env_id] if r.policy == "diffusion" and r.env_id in base else None
        table.append(rec)
    return table


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def report_csv(table: Sequence[dict]) -> str:
    cols = list(table[0].keys())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for rec in table:
        w.writerow([_fmt(rec[c]) for c in cols])
    return buf.getvalue()


def parse_report_csv(text: str) -> list[dict]:
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        out = {"task": rec["task"], "policy": rec["policy"], "n": int(rec["n"]),
               "successes": int(rec["successes"])}
        for c in ("rate", "ci_low", "ci_high"):
            out[c] = float(rec[c])
        if "delta" in rec:
            out["delta"] = float(rec["delta"]) if rec["delta"] else None
        rows.append(out)
    return rows


def report_text(table: Sequence[dict]) -> str:
    cols = list(table[0].keys())

    def cell(rec, c):
        v = rec[c]
        if v is None:
            return ""
        if c == "delta":
            return f"{v:+.2f}"
        if c in ("rate", "ci_low", "ci_high"):
            return f"{v:.2f}" if c != "rate" else f"{100 * v:.0f}%"
        return str(v)

    cells = [[cell(rec, c) for c in cols] for rec in table]
    widths = [max(len(c), *(len(r[i]) for r in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for r in cells:
        lines.append("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip())
    return "\n".join(lines) + "\n"
