"""Clipped-surrogate PPO with GAE for a diagonal Gaussian policy.

The policy mean and the state value come from two separate ReLU MLPs; the
log standard deviation is a free per-dimension parameter. Sampled actions
are clamped to the action box before reaching the environment while
log-probabilities are always computed on the unclamped sample.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .envs import Env, make_env
from .errors import ConfigurationError, ShapeError, TrainingDivergedError
from .nn import AdamState, ModelParams, adam_step, backward, forward_with_cache, mlp_forward, mlp_init
from .trajstore import Trajectory

log = logging.getLogger(__name__)

LOG_2PI = math.log(2 * math.pi)
# episode seeds for training/harvesting live below this bound; evaluation seeds above it
EVAL_SEED_BASE = 2 ** 62


@dataclass
class PPOConfig:
    discount: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    rollout_length: int = 2048
    minibatch_size: int = 64
    update_epochs: int = 10
    learning_rate: float = 5e-4
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    max_grad_norm: float = 0.5
    total_timesteps: int = 50_000
    hidden_sizes: tuple[int, ...] = (64, 64)
    activation: str = "relu"
    log_std_init: float = -1.0

    def __post_init__(self):
        self.hidden_sizes = tuple(self.hidden_sizes)
        self.validate()

    def validate(self) -> None:
        if not 0 < self.discount < 1:
            raise ConfigurationError(f"discount must be in (0, 1), got {self.discount}")
        if not 0 <= self.gae_lambda <= 1:
            raise ConfigurationError(f"gae_lambda must be in [0, 1], got {self.gae_lambda}")
        if not self.clip > 0:
            raise ConfigurationError("clip must be positive")
        for name in ("rollout_length", "minibatch_size", "update_epochs", "total_timesteps"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be a positive integer")
        if self.learning_rate <= 0 or self.value_coef < 0 or self.entropy_coef < 0:
            raise ConfigurationError("learning_rate must be positive and loss coefficients non-negative")

    @classmethod
    def from_dict(cls, d: dict | None) -> "PPOConfig":
        d = dict(d or {})
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown ppo config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d


@dataclass
class GaussianPolicy:
    """Diagonal Gaussian actor plus value critic.

    Both networks see observations rescaled from the environment's declared
    bounds ``[obs_low, obs_high]`` to ``[-1, 1]``; the bounds are fixed at
    construction and are not learned.
    """

    mean_net: ModelParams
    log_std: np.ndarray
    value_net: ModelParams
    obs_low: np.ndarray
    obs_high: np.ndarray

    @classmethod
    def create(cls, obs_dim: int, act_dim: int, config: PPOConfig, seed: int,
               obs_low=None, obs_high=None) -> "GaussianPolicy":
        hidden = list(config.hidden_sizes)
        ss = np.random.SeedSequence(seed).spawn(2)
        mean = mlp_init([obs_dim, *hidden, act_dim], config.activation, ss[0].generate_state(1)[0])
        # small final layer keeps initial actions near zero
        mean.weights[-1] *= 0.01
        value = mlp_init([obs_dim, *hidden, 1], config.activation, ss[1].generate_state(1)[0])
        low = -np.ones(obs_dim) if obs_low is None else np.asarray(obs_low, dtype=np.float64)
        high = np.ones(obs_dim) if obs_high is None else np.asarray(obs_high, dtype=np.float64)
        return cls(mean, np.full(act_dim, float(config.log_std_init)), value, low, high)

    def scale(self, obs) -> np.ndarray:
        return 2.0 * (np.asarray(obs, dtype=np.float64) - self.obs_low) / (self.obs_high - self.obs_low) - 1.0

    @property
    def obs_dim(self) -> int:
        return self.mean_net.input_size

    @property
    def act_dim(self) -> int:
        return self.mean_net.output_size

    def arrays(self) -> list[np.ndarray]:
        return [*self.mean_net.arrays(), self.log_std, *self.value_net.arrays()]

    def with_arrays(self, arrays) -> "GaussianPolicy":
        n = len(self.mean_net.arrays())
        return replace(self, mean_net=self.mean_net.with_arrays(arrays[:n]), log_std=arrays[n],
                       value_net=self.value_net.with_arrays(arrays[n + 1:]))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec: np.ndarray) -> "GaussianPolicy":
        from .nn import unflatten
        return self.with_arrays(unflatten(vec, [a.shape for a in self.arrays()]))

    def mean(self, obs) -> np.ndarray:
        return mlp_forward(self.mean_net, self.scale(obs))

    def value(self, obs) -> np.ndarray:
        out = mlp_forward(self.value_net, self.scale(obs))
        return out[..., 0]

    def log_prob(self, obs, actions) -> np.ndarray:
        return gaussian_log_prob(actions, self.mean(obs), self.log_std)

    def sample(self, obs, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, float]:
        """Returns ``(raw_action, clamped_action, log_prob_of_raw)`` for a single observation."""
        mu = self.mean(obs)
        raw = mu + np.exp(self.log_std) * rng.standard_normal(self.act_dim)
        return raw, np.clip(raw, -1.0, 1.0), float(gaussian_log_prob(raw, mu, self.log_std))

    def to_dict(self) -> dict:
        return {"mean_net": self.mean_net.to_dict(), "log_std": self.log_std.tolist(),
                "value_net": self.value_net.to_dict(),
                "obs_low": self.obs_low.tolist(), "obs_high": self.obs_high.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianPolicy":
        arr = lambda k: np.asarray(d[k], dtype=np.float64)
        return cls(ModelParams.from_dict(d["mean_net"]), arr("log_std"),
                   ModelParams.from_dict(d["value_net"]), arr("obs_low"), arr("obs_high"))


def gaussian_log_prob(actions, mean, log_std) -> np.ndarray:
    """Log density of a diagonal Gaussian, summed over the last axis."""
    z = (np.asarray(actions) - mean) * np.exp(-log_std)
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std) - 0.5 * len(log_std) * LOG_2PI


def gaussian_entropy(log_std) -> float:
    return float(np.sum(log_std) + 0.5 * len(log_std) * (1.0 + LOG_2PI))


@dataclass
class RolloutBatch:
    observations: np.ndarray
    actions: np.ndarray       # raw (pre-clamp) samples
    env_actions: np.ndarray   # clamped actions sent to the environment
    rewards: np.ndarray
    values: np.ndarray
    log_probs: np.ndarray
    terminated: np.ndarray
    truncated: np.ndarray
    success: np.ndarray
    bootstrap_value: float
    # value of the observation reached when an episode was truncated at this step, else 0
    truncation_values: np.ndarray = None

    def __len__(self) -> int:
        return int(self.rewards.shape[0])


class RolloutRunner:
    """Steps one environment with a policy, carrying episodes across rollouts.

    Episode seeds and action noise come from two independent streams
    derived from ``seed``, so a run is reproducible given the seed.
    """

    def __init__(self, env: Env, seed: int, keep_episodes: bool = False):
        self.env = env
        ss = np.random.SeedSequence(seed)
        seed_ss, action_ss = ss.spawn(2)
        self.seed_rng = np.random.default_rng(seed_ss)
        self.action_rng = np.random.default_rng(action_ss)
        self.keep_episodes = keep_episodes
        self.episodes: list[Trajectory] = []
        self.episode_returns: list[float] = []
        self.episode_successes: list[int] = []
        self.total_steps = 0
        self._next_id = 0
        self.obs = None

    def next_episode_seed(self) -> int:
        return int(self.seed_rng.integers(0, EVAL_SEED_BASE))

    def _start_episode(self):
        self._seed = self.next_episode_seed()
        self.obs = self.env.reset(self._seed)
        self._buf = {k: [] for k in ("obs", "act", "rew", "succ", "term", "trunc")}
        self._ret = 0.0

    def _finish_episode(self):
        self.episode_returns.append(self._ret)
        self.episode_successes.append(int(sum(self._buf["succ"])))
        if self.keep_episodes:
            b = self._buf
            self.episodes.append(Trajectory.from_steps(
                self._next_id, self.env.env_id, self._seed, b["obs"], b["act"], b["rew"],
                b["succ"], b["term"], b["trunc"]))
        self._next_id += 1
        self.obs = None

    def collect(self, policy: GaussianPolicy, n_steps: int) -> RolloutBatch:
        if policy.obs_dim != self.env.obs_dim or policy.act_dim != self.env.act_dim:
            raise ConfigurationError(
                f"policy dims ({policy.obs_dim}, {policy.act_dim}) do not match "
                f"{self.env.env_id} ({self.env.obs_dim}, {self.env.act_dim})")
        od, ad = self.env.obs_dim, self.env.act_dim
        obs = np.zeros((n_steps, od))
        raw = np.zeros((n_steps, ad))
        acts = np.zeros((n_steps, ad))
        rews, vals, logps, trunc_vals = (np.zeros(n_steps) for _ in range(4))
        term, trunc = np.zeros(n_steps, bool), np.zeros(n_steps, bool)
        succ = np.zeros(n_steps, np.int64)
        log_std = policy.log_std
        std = np.exp(log_std)
        for i in range(n_steps):
            if self.obs is None:
                self._start_episode()
            o = self.obs
            x = policy.scale(o)
            mu = mlp_forward(policy.mean_net, x)
            a = mu + std * self.action_rng.standard_normal(ad)
            ca = np.clip(a, -1.0, 1.0)
            res = self.env.step(ca)
            obs[i], raw[i], acts[i] = o, a, ca
            vals[i] = mlp_forward(policy.value_net, x)[0]
            logps[i] = gaussian_log_prob(a, mu, log_std)
            rews[i], term[i], trunc[i], succ[i] = res.reward, res.terminated, res.truncated, res.success
            b = self._buf
            b["obs"].append(o); b["act"].append(ca); b["rew"].append(res.reward)
            b["succ"].append(res.success); b["term"].append(res.terminated); b["trunc"].append(res.truncated)
            self._ret += res.reward
            self.total_steps += 1
            if res.truncated and not res.terminated:
                trunc_vals[i] = policy.value(res.observation)
            if res.terminated or res.truncated:
                self._finish_episode()
            else:
                self.obs = res.observation
        bootstrap = 0.0 if self.obs is None else float(policy.value(self.obs))
        return RolloutBatch(obs, raw, acts, rews, vals, logps, term, trunc, succ, bootstrap, trunc_vals)


def collect_rollout(env: Env, policy: GaussianPolicy, n_steps: int, seed: int) -> RolloutBatch:
    """Collect ``n_steps`` transitions from a fresh runner seeded with ``seed``."""
    return RolloutRunner(env, seed).collect(policy, n_steps)


def compute_gae(rewards, values, bootstrap, terminal_flags, discount, gae_lambda):
    """Generalized advantage estimates and the matching value targets.

    ``terminal_flags[t]`` cuts the bootstrap from step ``t`` to ``t + 1``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    done = np.asarray(terminal_flags, dtype=np.float64)
    n = len(rewards)
    if values.shape != (n,) or done.shape != (n,):
        raise ShapeError(f"length mismatch: rewards {n}, values {values.shape}, flags {done.shape}")
    adv = np.zeros(n)
    next_value, next_adv = float(bootstrap), 0.0
    for t in range(n - 1, -1, -1):
        live = 1.0 - done[t]
        delta = rewards[t] + discount * next_value * live - values[t]
        next_adv = delta + discount * gae_lambda * live * next_adv
        adv[t] = next_adv
        next_value = values[t]
    return adv, adv + values


def clipped_surrogate(ratio, advantages, clip):
    """Per-sample ``min(r A, clip(r, 1-eps, 1+eps) A)``."""
    ratio = np.asarray(ratio, dtype=np.float64)
    return np.minimum(ratio * advantages, np.clip(ratio, 1 - clip, 1 + clip) * advantages)


def ppo_loss(policy: GaussianPolicy, obs, actions, old_log_probs, advantages, returns,
             config: PPOConfig, with_grad: bool = True):
    """Total loss (negated surrogate + value MSE - entropy bonus), its gradient, and metrics.

    The gradient is a list congruent with ``policy.arrays()``.
    """
    n = len(obs)
    x = policy.scale(obs)
    mu, mcache = forward_with_cache(policy.mean_net, x)
    log_std = policy.log_std
    inv_std = np.exp(-log_std)
    z = (actions - mu) * inv_std
    logp = -0.5 * np.sum(z * z, axis=1) - np.sum(log_std) - 0.5 * len(log_std) * LOG_2PI
    ratio = np.exp(logp - old_log_probs)
    unclipped = ratio * advantages
    clipped = np.clip(ratio, 1 - config.clip, 1 + config.clip) * advantages
    policy_loss = -np.mean(np.minimum(unclipped, clipped))

    v_out, vcache = forward_with_cache(policy.value_net, x)
    v = v_out[:, 0]
    value_loss = np.mean((v - returns) ** 2)
    entropy = gaussian_entropy(log_std)
    loss = policy_loss + config.value_coef * value_loss - config.entropy_coef * entropy

    metrics = {
        "loss": float(loss), "policy_loss": float(policy_loss), "value_loss": float(value_loss),
        "entropy": entropy, "mean_ratio": float(np.mean(ratio)),
        "clip_fraction": float(np.mean(np.abs(ratio - 1) > config.clip)),
        "approx_kl": float(np.mean((ratio - 1) - np.log(ratio))),
    }
    if not with_grad:
        return float(loss), None, metrics

    # d(policy_loss)/d(logp): only samples where the unclipped term is the minimum carry gradient
    dlogp = -(advantages * ratio * (unclipped <= clipped)) / n
    dmu = (dlogp[:, None] * z * inv_std)
    dlog_std = np.sum(dlogp[:, None] * (z * z - 1.0), axis=0) - config.entropy_coef
    g_mean, _ = backward(policy.mean_net, mcache, dmu)
    dv = (config.value_coef * 2.0 / n) * (v - returns)
    g_value, _ = backward(policy.value_net, vcache, dv[:, None])
    grads = [*g_mean.arrays(), dlog_std, *g_value.arrays()]
    return float(loss), grads, metrics


def ppo_update(policy: GaussianPolicy, batch: RolloutBatch, config: PPOConfig,
               opt: AdamState, rng: np.random.Generator):
    """Minibatched clipped-surrogate updates over ``config.update_epochs`` epochs.

    Returns ``(policy, opt, metrics)`` with metrics averaged over minibatches.
    """
    done = batch.terminated | batch.truncated
    rewards = batch.rewards + config.discount * batch.truncation_values
    adv, returns = compute_gae(rewards, batch.values, batch.bootstrap_value, done,
                               config.discount, config.gae_lambda)
    n = len(batch)
    sums: dict[str, float] = {}
    count = 0
    for _ in range(config.update_epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.minibatch_size):
            idx = order[start:start + config.minibatch_size]
            a = adv[idx]
            a = (a - a.mean()) / (a.std() + 1e-8) if len(idx) > 1 else a - a.mean()
            loss, grads, metrics = ppo_loss(policy, batch.observations[idx], batch.actions[idx],
                                            batch.log_probs[idx], a, returns[idx], config)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingDivergedError("PPO loss became non-finite", metrics)
            arrays, opt = adam_step(policy.arrays(), grads, opt, config.max_grad_norm)
            policy = policy.with_arrays(arrays)
            for k, val in metrics.items():
                sums[k] = sums.get(k, 0.0) + val
            count += 1
    return policy, opt, {k: v / max(count, 1) for k, v in sums.items()}


@dataclass
class PPOResult:
    policy: GaussianPolicy
    curve: list[tuple[int, float, float]]
    episodes: list[Trajectory] = field(default_factory=list)
    episode_successes: list[int] = field(default_factory=list)
    updates: int = 0


def train_ppo(env_id: str, config: PPOConfig, seed: int, env_config=None,
              keep_successes: bool = False, window: int = 100) -> PPOResult:
    """Alternate rollouts and updates until ``total_timesteps`` env steps are consumed.

    The curve has one row per update: (timestep, mean return and success
    rate over the last ``window`` finished episodes). With
    ``keep_successes`` every successful episode seen during training is
    returned too.
    """
    env = make_env(env_id, env_config)
    root = np.random.SeedSequence(seed)
    init_ss, run_ss, update_ss = root.spawn(3)
    policy = GaussianPolicy.create(env.obs_dim, env.act_dim, config, int(init_ss.generate_state(1)[0]),
                                   env.observation_space.low, env.observation_space.high)
    opt = AdamState.zeros_like(policy.arrays(), learning_rate=config.learning_rate)
    runner = RolloutRunner(env, int(run_ss.generate_state(1)[0]), keep_episodes=keep_successes)
    update_rng = np.random.default_rng(update_ss)
    curve = []
    updates = 0
    while runner.total_steps < config.total_timesteps:
        n = min(config.rollout_length, config.total_timesteps - runner.total_steps)
        batch = runner.collect(policy, n)
        try:
            policy, opt, metrics = ppo_update(policy, batch, config, opt, update_rng)
        except TrainingDivergedError as exc:
            exc.last_good = policy
            raise
        updates += 1
        rets = runner.episode_returns[-window:]
        succ = runner.episode_successes[-window:]
        mean_ret = float(np.mean(rets)) if rets else float("nan")
        rate = float(np.mean(succ)) if succ else float("nan")
        curve.append((runner.total_steps, mean_ret, rate))
        log.info("ppo step %d: return %.3f success %.3f ratio %.3f clip %.3f std %s",
                 runner.total_steps, mean_ret, rate, metrics["mean_ratio"], metrics["clip_fraction"],
                 np.round(np.exp(policy.log_std), 3))
        if keep_successes:
            runner.episodes = [t for t in runner.episodes if t.succeeded]
    episodes = runner.episodes if keep_successes else []
    return PPOResult(policy, curve, episodes, list(runner.episode_successes), updates)


def save_policy(policy: GaussianPolicy, path, env_id: str, config: PPOConfig | None = None,
                env_config=None) -> None:
    doc = {"format_version": 1, "kind": "ppo-policy", "env_id": env_id, **policy.to_dict()}
    if config is not None:
        doc["config"] = config.to_dict()
    if env_config is not None:
        doc["env_config"] = env_config.to_dict() if hasattr(env_config, "to_dict") else dict(env_config)
    Path(path).write_text(json.dumps(doc))


def load_policy(path) -> tuple[GaussianPolicy, dict]:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigurationError(f"checkpoint not found: {path}") from None
    if doc.get("kind") != "ppo-policy":
        raise ConfigurationError(f"{path} is not a PPO policy checkpoint")
    return GaussianPolicy.from_dict(doc), doc


def write_curve(curve, path) -> None:
    with open(path, "w") as fh:
        fh.write("timestep,mean_return,success_rate\n")
        for step, ret, rate in curve:
            fh.write(f"{step},{ret!r},{rate!r}\n")
