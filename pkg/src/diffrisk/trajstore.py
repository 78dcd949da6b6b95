"""Episode storage, success filtering, windowing and normalization.

Dataset files are JSON lines. Each episode starts with a header record
followed by one record per step::

    {"type": "episode", "id": 0, "seed": 17, "env_id": "ReachServe-v0", "length": 2, "success": 1}
    {"type": "step", "t": 0, "obs": [...], "action": [...], "reward": -0.5, "success": 0, "terminated": false, "truncated": false}
    {"type": "step", "t": 1, ...}
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DatasetParseError, InsufficientDataError, IntegrityError

log = logging.getLogger(__name__)

MIN_SUCCESS_EPISODES = 300


@dataclass
class Trajectory:
    episode_id: int
    env_id: str
    seed: int
    observations: np.ndarray  # (L, obs_dim), observation before each action
    actions: np.ndarray       # (L, act_dim), executed (clamped) actions
    rewards: np.ndarray
    success: np.ndarray       # (L,) of 0/1
    terminated: np.ndarray
    truncated: np.ndarray

    def __len__(self) -> int:
        return int(self.actions.shape[0])

    @property
    def success_sum(self) -> int:
        return int(np.sum(self.success))

    @property
    def succeeded(self) -> bool:
        return self.success_sum == 1

    def validate(self) -> None:
        n = len(self)
        if n < 1:
            raise IntegrityError(f"episode {self.episode_id} has no steps")
        for name in ("observations", "rewards", "success", "terminated", "truncated"):
            if len(getattr(self, name)) != n:
                raise IntegrityError(f"episode {self.episode_id}: {name} length differs from actions")
        hits = np.flatnonzero(self.success)
        if len(hits) > 1:
            raise IntegrityError(f"episode {self.episode_id} has {len(hits)} success steps")
        if len(hits) == 1 and (hits[0] != n - 1 or not self.terminated[-1]):
            raise IntegrityError(
                f"episode {self.episode_id}: success at step {hits[0]} is not a terminal final step")

    @classmethod
    def from_steps(cls, episode_id, env_id, seed, observations, actions, rewards, success,
                   terminated, truncated) -> "Trajectory":
        return cls(
            episode_id=int(episode_id), env_id=env_id, seed=int(seed),
            observations=np.asarray(observations, dtype=np.float64),
            actions=np.asarray(actions, dtype=np.float64),
            rewards=np.asarray(rewards, dtype=np.float64),
            success=np.asarray(success, dtype=np.int64),
            terminated=np.asarray(terminated, dtype=bool),
            truncated=np.asarray(truncated, dtype=bool),
        )

    def equals(self, other: "Trajectory") -> bool:
        if (self.episode_id, self.env_id, self.seed) != (other.episode_id, other.env_id, other.seed):
            return False
        return all(np.array_equal(getattr(self, k), getattr(other, k))
                   for k in ("observations", "actions", "rewards", "success", "terminated", "truncated"))


def filter_success(dataset: Sequence[Trajectory]) -> list[Trajectory]:
    """Keep the episodes whose success flags sum to exactly one, in order."""
    out = []
    for traj in dataset:
        traj.validate()
        if traj.success_sum == 1:
            out.append(traj)
    return out


def warn_if_small(n_success: int, threshold: int = MIN_SUCCESS_EPISODES) -> bool:
    """Log a warning when fewer than ``threshold`` successful episodes are available."""
    if n_success < threshold:
        log.warning("only %d successful episodes (< %d); the distilled policy is likely to degrade",
                    n_success, threshold)
        return True
    return False


@dataclass(frozen=True)
class Window:
    obs: np.ndarray      # (T_o, obs_dim)
    actions: np.ndarray  # (T_a, act_dim)
    start: int


def window_count(length: int, horizon: int) -> int:
    return max(0, length - horizon + 1)


def make_windows(traj: Trajectory, obs_horizon: int, action_horizon: int) -> list[Window]:
    """Slice an episode into (observation history, action segment) pairs.

    Observation histories before the first step repeat the first
    observation; action segments are never padded, so episodes shorter than
    ``action_horizon`` contribute nothing.
    """
    if obs_horizon < 1 or action_horizon < 1:
        raise ValueError("horizons must be >= 1")
    n = len(traj)
    if n < action_horizon:
        log.warning("episode %s has %d steps, fewer than the action horizon %d; skipped",
                    traj.episode_id, n, action_horizon)
        return []
    windows = []
    for t in range(n - action_horizon + 1):
        idx = np.clip(np.arange(t - obs_horizon + 1, t + 1), 0, None)
        windows.append(Window(traj.observations[idx], traj.actions[t:t + action_horizon], t))
    return windows


def window_arrays(dataset: Iterable[Trajectory], obs_horizon: int,
                  action_horizon: int) -> tuple[np.ndarray, np.ndarray]:
    """Stacked windows: ``(N, T_o, obs_dim)`` and ``(N, T_a, act_dim)``."""
    obs, acts = [], []
    for traj in dataset:
        for w in make_windows(traj, obs_horizon, action_horizon):
            obs.append(w.obs)
            acts.append(w.actions)
    if not obs:
        raise InsufficientDataError("no training windows: every episode is shorter than the action horizon")
    return np.stack(obs), np.stack(acts)


@dataclass
class NormStats:
    obs_min: np.ndarray
    obs_max: np.ndarray
    act_min: np.ndarray
    act_max: np.ndarray

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("obs_min", "obs_max", "act_min", "act_max")}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(**{k: np.asarray(d[k], dtype=np.float64)
                      for k in ("obs_min", "obs_max", "act_min", "act_max")})

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "NormStats":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def normalize_obs(self, x):
        return normalize(x, self.obs_min, self.obs_max)

    def denormalize_obs(self, x):
        return denormalize(x, self.obs_min, self.obs_max)

    def normalize_actions(self, x):
        return normalize(x, self.act_min, self.act_max)

    def denormalize_actions(self, x):
        return denormalize(x, self.act_min, self.act_max)


def fit_norm_stats(dataset: Sequence[Trajectory]) -> NormStats:
    if not dataset:
        raise InsufficientDataError("cannot fit normalization statistics on an empty dataset")
    obs = np.concatenate([t.observations for t in dataset])
    acts = np.concatenate([t.actions for t in dataset])
    return NormStats(obs.min(axis=0), obs.max(axis=0), acts.min(axis=0), acts.max(axis=0))


def normalize(x, lo, hi) -> np.ndarray:
    """Affine map of ``[lo, hi]`` onto ``[-1, 1]``; constant dimensions map to 0."""
    x = np.asarray(x, dtype=np.float64)
    span = hi - lo
    flat = span == 0
    out = 2.0 * (x - lo) / np.where(flat, 1.0, span) - 1.0
    return np.where(flat, 0.0, out)


def denormalize(x, lo, hi) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    span = hi - lo
    return np.where(span == 0, lo, (x + 1.0) * 0.5 * span + lo)


# -- serialization -----------------------------------------------------------

def _dump(record: dict) -> str:
    return json.dumps(record, separators=(", ", ": "))


def dataset_lines(dataset: Iterable[Trajectory]) -> Iterable[str]:
    for traj in dataset:
        yield _dump({"type": "episode", "id": traj.episode_id, "seed": traj.seed,
                     "env_id": traj.env_id, "length": len(traj), "success": traj.success_sum})
        for t in range(len(traj)):
            yield _dump({
                "type": "step", "t": t,
                "obs": traj.observations[t].tolist(),
                "action": traj.actions[t].tolist(),
                "reward": float(traj.rewards[t]),
                "success": int(traj.success[t]),
                "terminated": bool(traj.terminated[t]),
                "truncated": bool(traj.truncated[t]),
            })


def save_dataset(dataset: Iterable[Trajectory], path) -> None:
    with open(path, "w") as fh:
        for line in dataset_lines(dataset):
            fh.write(line + "\n")


_STEP_FIELDS = ("t", "obs", "action", "reward", "success", "terminated", "truncated")
_HEADER_FIELDS = ("id", "seed", "env_id", "length", "success")


def load_dataset(path) -> list[Trajectory]:
    """Read a dataset file. Malformed input raises :class:`DatasetParseError` with the line number."""
    dataset: list[Trajectory] = []
    header, steps, header_line = None, [], 0

    def close(lineno):
        if header is None:
            return
        if len(steps) != header["length"]:
            raise DatasetParseError(
                f"episode {header['id']} declares {header['length']} steps but has {len(steps)}",
                header_line)
        traj = Trajectory.from_steps(
            header["id"], header["env_id"], header["seed"],
            [s["obs"] for s in steps], [s["action"] for s in steps], [s["reward"] for s in steps],
            [s["success"] for s in steps], [s["terminated"] for s in steps],
            [s["truncated"] for s in steps])
        try:
            traj.validate()
        except IntegrityError as exc:
            raise DatasetParseError(str(exc), header_line) from exc
        if traj.success_sum != header["success"]:
            raise DatasetParseError(f"episode {header['id']} header success flag disagrees with its steps",
                                    header_line)
        dataset.append(traj)

    with open(path) as fh:
        lineno = 0
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise DatasetParseError(f"invalid JSON ({exc.msg})", lineno) from exc
            kind = rec.get("type") if isinstance(rec, dict) else None
            if kind == "episode":
                close(lineno)
                missing = [k for k in _HEADER_FIELDS if k not in rec]
                if missing:
                    raise DatasetParseError(f"episode header missing {missing}", lineno)
                header, steps, header_line = rec, [], lineno
            elif kind == "step":
                if header is None:
                    raise DatasetParseError("step record before any episode header", lineno)
                missing = [k for k in _STEP_FIELDS if k not in rec]
                if missing:
                    raise DatasetParseError(f"step record missing {missing}", lineno)
                if rec["t"] != len(steps):
                    raise DatasetParseError(f"expected step t={len(steps)}, got t={rec['t']}", lineno)
                steps.append(rec)
            else:
                raise DatasetParseError(f"unknown record type {kind!r}", lineno)
        close(lineno)
    return dataset


def scan_counts(path) -> tuple[int, int]:
    """Count (episodes, successful episodes) from header lines alone."""
    episodes = successes = 0
    with open(path) as fh:
        for raw in fh:
            rec = json.loads(raw)
            if rec.get("type") == "episode":
                episodes += 1
                successes += int(rec["success"] == 1)
    return episodes, successes
