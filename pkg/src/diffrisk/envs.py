"""Low-dimensional stand-ins for two assistive manipulation tasks.

ReachServe-v0
    Carry a spoon from the corner of a unit square to a drifting mouth
    without spilling. Harsh actions (``max|a| > 0.8``) spill 5% of the food;
    success needs the effector slow, on target, and at least 75% of the food
    left.

SweepWipe-v0
    Touch at least 6 of 8 randomly placed spots with a sponge.

Both share double-integrator dynamics with clamped velocity and position,
a dense shaping reward for RL, and a separate binary success signal that
terminates the episode.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import ConfigurationError, EpisodeFinishedError

REACH_SERVE = "ReachServe-v0"
SWEEP_WIPE = "SweepWipe-v0"
ENV_IDS = (REACH_SERVE, SWEEP_WIPE)


@dataclass(frozen=True)
class EnvConfig:
    """Tunable constants. ``max_steps=None`` picks the per-task default."""

    accel: float = 0.01
    v_max: float = 0.05
    max_steps: int | None = None
    # ReachServe
    drift_sigma: float = 0.002
    spill_threshold: float = 0.8
    spill_amount: float = 0.05
    food_threshold: float = 0.75
    reach_radius: float = 0.03
    rest_speed: float = 0.02
    start: tuple[float, float] = (0.1, 0.1)
    mouth_low: float = 0.6
    mouth_high: float = 0.9
    # SweepWipe
    n_spots: int = 8
    spots_required: int = 6
    touch_radius: float = 0.03

    @classmethod
    def from_dict(cls, d: dict | None) -> "EnvConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown env config keys: {sorted(unknown)}")
        if "start" in d:
            d["start"] = tuple(d["start"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["start"] = list(self.start)
        return d


@dataclass(frozen=True)
class Space:
    low: np.ndarray
    high: np.ndarray

    @property
    def dim(self) -> int:
        return int(self.low.shape[0])


@dataclass(frozen=True)
class StepResult:
    observation: np.ndarray
    reward: float
    terminated: bool
    truncated: bool
    success: int


@dataclass
class ReachState:
    p: np.ndarray
    v: np.ndarray
    m: np.ndarray
    food: float = 1.0
    t: int = 0


@dataclass
class SweepState:
    p: np.ndarray
    v: np.ndarray
    spots: np.ndarray
    touched: np.ndarray
    t: int = 0


def _integrate(p, v, action, cfg: EnvConfig):
    v2 = np.clip(v + cfg.accel * action, -cfg.v_max, cfg.v_max)
    p2 = np.clip(p + v2, 0.0, 1.0)
    return p2, v2


class Env:
    env_id: str
    obs_dim: int
    act_dim = 2
    default_max_steps: int

    def __init__(self, config: EnvConfig | None = None):
        self.config = config or EnvConfig()
        self.max_steps = self.config.max_steps or self.default_max_steps
        self.action_space = Space(-np.ones(self.act_dim), np.ones(self.act_dim))
        self.observation_space = self._observation_space()
        self.state = None
        self.rng = None
        self.seed = None
        self.done = True

    def reset(self, seed: int) -> np.ndarray:
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)
        self.state = self._initial_state()
        self.done = False
        return self.observe(self.state)

    def step(self, action) -> StepResult:
        if self.done:
            raise EpisodeFinishedError(f"{self.env_id}: step() called on a finished episode; call reset()")
        a = np.clip(np.asarray(action, dtype=np.float64).reshape(self.act_dim), -1.0, 1.0)
        self.state, reward = self._transition(self.state, a)
        success = self.success_predicate(self.state)
        reward += 10.0 * success
        terminated = bool(success)
        truncated = not terminated and self.state.t >= self.max_steps
        self.done = terminated or truncated
        return StepResult(self.observe(self.state), float(reward), terminated, truncated, success)

    def _initial_state(self):
        raise NotImplementedError

    def _observation_space(self) -> Space:
        raise NotImplementedError

    def _transition(self, state, action):
        raise NotImplementedError

    def observe(self, state) -> np.ndarray:
        raise NotImplementedError

    def success_predicate(self, state) -> int:
        raise NotImplementedError


class ReachServe(Env):
    env_id = REACH_SERVE
    obs_dim = 5
    default_max_steps = 200

    def _observation_space(self) -> Space:
        vm = self.config.v_max
        return Space(np.array([-1.0, -1.0, -vm, -vm, 0.0]), np.array([1.0, 1.0, vm, vm, 1.0]))

    def _initial_state(self) -> ReachState:
        c = self.config
        m = self.rng.uniform(c.mouth_low, c.mouth_high, size=2)
        return ReachState(p=np.array(c.start, dtype=np.float64), v=np.zeros(2), m=m)

    def _transition(self, s: ReachState, a: np.ndarray):
        c = self.config
        p, v = _integrate(s.p, s.v, a, c)
        m = s.m
        if c.drift_sigma > 0:
            m = np.clip(m + self.rng.normal(0.0, c.drift_sigma, size=2), 0.0, 1.0)
        food = s.food - c.spill_amount if np.max(np.abs(a)) > c.spill_threshold else s.food
        food = max(food, 0.0)
        new = ReachState(p=p, v=v, m=m, food=food, t=s.t + 1)
        return new, -float(np.linalg.norm(p - m))

    def observe(self, s: ReachState) -> np.ndarray:
        return np.concatenate([s.m - s.p, s.v, [s.food]])

    def success_predicate(self, s: ReachState) -> int:
        c = self.config
        ok = (np.linalg.norm(s.p - s.m) <= c.reach_radius
              and np.linalg.norm(s.v) <= c.rest_speed
              and s.food >= c.food_threshold)
        return int(ok)


class SweepWipe(Env):
    env_id = SWEEP_WIPE
    default_max_steps = 300

    def __init__(self, config: EnvConfig | None = None):
        self.obs_dim = 6 + (config or EnvConfig()).n_spots
        super().__init__(config)

    def _observation_space(self) -> Space:
        vm, n = self.config.v_max, self.config.n_spots
        low = np.concatenate([[0.0, 0.0, -vm, -vm], np.zeros(n), [-1.0, -1.0]])
        high = np.concatenate([[1.0, 1.0, vm, vm], np.ones(n), [1.0, 1.0]])
        return Space(low, high)

    def _initial_state(self) -> SweepState:
        c = self.config
        spots = self.rng.uniform(0.0, 1.0, size=(c.n_spots, 2))
        return SweepState(p=np.array(c.start, dtype=np.float64), v=np.zeros(2), spots=spots,
                          touched=np.zeros(c.n_spots, dtype=bool))

    def _nearest_delta(self, s: SweepState) -> np.ndarray:
        free = ~s.touched
        if not free.any():
            return np.zeros(2)
        d = s.spots[free] - s.p
        return d[np.argmin(np.einsum("ij,ij->i", d, d))]

    def _transition(self, s: SweepState, a: np.ndarray):
        c = self.config
        p, v = _integrate(s.p, s.v, a, c)
        near = np.linalg.norm(s.spots - p, axis=1) <= c.touch_radius
        touched = s.touched | near
        fresh = int(touched.sum() - s.touched.sum())
        new = SweepState(p=p, v=v, spots=s.spots, touched=touched, t=s.t + 1)
        return new, -float(np.linalg.norm(self._nearest_delta(new))) + fresh

    def observe(self, s: SweepState) -> np.ndarray:
        return np.concatenate([s.p, s.v, s.touched.astype(np.float64), self._nearest_delta(s)])

    def success_predicate(self, s: SweepState) -> int:
        return int(s.touched.sum() >= self.config.spots_required)


def make_env(env_id: str, config: EnvConfig | dict | None = None) -> Env:
    if isinstance(config, dict) or config is None:
        config = EnvConfig.from_dict(config)
    if env_id == REACH_SERVE:
        return ReachServe(config)
    if env_id == SWEEP_WIPE:
        return SweepWipe(config)
    raise ConfigurationError(f"unknown env_id {env_id!r}; expected one of {ENV_IDS}")


def env_spec(env_id: str, config: EnvConfig | dict | None = None) -> tuple[int, int]:
    env = make_env(env_id, config)
    return env.obs_dim, env.act_dim


def reach_controller(obs: np.ndarray, gain: float = 4.0, damping: float = 28.0,
                     limit: float = 0.8) -> np.ndarray:
    """Scripted PD controller for ReachServe that never spills."""
    delta, vel = obs[0:2], obs[2:4]
    return np.clip(gain * delta - damping * vel, -limit, limit)


def sweep_controller(obs: np.ndarray, gain: float = 4.0, damping: float = 28.0,
                     limit: float = 1.0) -> np.ndarray:
    """Scripted PD controller for SweepWipe that chases the nearest untouched spot."""
    vel, delta = obs[2:4], obs[-2:]
    return np.clip(gain * delta - damping * vel, -limit, limit)
