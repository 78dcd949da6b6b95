"""DDPM over short action sequences, conditioned on recent observations.

The denoiser is an MLP over ``[normalized obs history, noisy actions,
sinusoidal embedding of k/K]`` that predicts the injected noise. At run
time :class:`DiffusionController` samples ``T_a`` actions, executes the
first ``T_exec`` of them and then samples again.
"""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, InsufficientDataError, ShapeError, TrainingDivergedError
from .nn import AdamState, ModelParams, adam_step, backward, forward_with_cache, mlp_forward, mlp_init
from .trajstore import NormStats, Trajectory, fit_norm_stats, warn_if_small, window_arrays

log = logging.getLogger(__name__)

EMBED_DIM = 16
FORMAT_VERSION = 1


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_variance: np.ndarray
    beta_1: float
    beta_K: float

    @property
    def K(self) -> int:
        return int(self.betas.shape[0])

    def check_step(self, k) -> None:
        k = np.asarray(k)
        if np.any(k < 1) or np.any(k > self.K):
            raise IndexError(f"diffusion step {k} outside 1..{self.K}")


def make_schedule(K: int, beta_1: float = 1e-4, beta_K: float = 0.2) -> NoiseSchedule:
    """Linear beta schedule; arrays are indexed by ``k - 1`` for ``k = 1..K``."""
    if int(K) != K or K < 1:
        raise ConfigurationError(f"K must be a positive integer, got {K}")
    if not 0 < beta_1 <= beta_K < 1:
        raise ConfigurationError(f"need 0 < beta_1 <= beta_K < 1, got {beta_1}, {beta_K}")
    betas = np.linspace(beta_1, beta_K, int(K)) if K > 1 else np.array([float(beta_1)])
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    prev = np.concatenate([[1.0], alpha_bars[:-1]])
    posterior = betas * (1.0 - prev) / (1.0 - alpha_bars)
    return NoiseSchedule(betas, alphas, alpha_bars, posterior, float(beta_1), float(beta_K))


def q_sample(x0, k, eps, schedule: NoiseSchedule) -> np.ndarray:
    """Forward-noise ``x0`` to level ``k`` (scalar, or one per row of a batch)."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 {x0.shape} and noise {eps.shape} differ")
    schedule.check_step(k)
    ab = schedule.alpha_bars[np.asarray(k) - 1]
    if np.ndim(ab) == 1:
        ab = ab.reshape(-1, *([1] * (x0.ndim - 1)))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def timestep_embedding(k, K: int, dim: int = EMBED_DIM) -> np.ndarray:
    """Sin/cos features of ``k / K`` at octave-spaced frequencies."""
    u = np.atleast_1d(np.asarray(k, dtype=np.float64)) / K
    freqs = np.pi * 2.0 ** np.arange(dim // 2)
    ang = u[:, None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass
class DiffusionConfig:
    num_steps: int = 50
    beta_1: float = 1e-4
    beta_K: float = 0.2
    obs_horizon: int = 2
    action_horizon: int = 8
    exec_horizon: int = 4
    epochs: int = 200
    batch_size: int = 256
    learning_rate: float = 1e-4
    hidden_sizes: tuple[int, ...] = (256, 256, 256)
    activation: str = "relu"

    def __post_init__(self):
        self.hidden_sizes = tuple(self.hidden_sizes)
        self.validate()

    def validate(self) -> None:
        if self.obs_horizon < 1 or self.action_horizon < 1:
            raise ConfigurationError("horizons must be >= 1")
        if not 1 <= self.exec_horizon <= self.action_horizon:
            raise ConfigurationError(
                f"exec_horizon must be in 1..action_horizon, got {self.exec_horizon}")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigurationError("epochs must be >= 0, batch_size >= 1, learning_rate > 0")
        make_schedule(self.num_steps, self.beta_1, self.beta_K)

    @classmethod
    def from_dict(cls, d: dict | None) -> "DiffusionConfig":
        d = dict(d or {})
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown diffusion config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d


@dataclass
class DiffusionPolicy:
    """Everything needed to sample actions: denoiser, schedule, horizons, normalization."""

    network: ModelParams
    schedule: NoiseSchedule
    obs_horizon: int
    action_horizon: int
    exec_horizon: int
    stats: NormStats | None
    obs_dim: int
    act_dim: int
    env_id: str = ""
    config: DiffusionConfig | None = None

    @classmethod
    def create(cls, obs_dim: int, act_dim: int, config: DiffusionConfig, seed: int,
               stats: NormStats | None = None, env_id: str = "") -> "DiffusionPolicy":
        in_dim = config.obs_horizon * obs_dim + config.action_horizon * act_dim + EMBED_DIM
        out_dim = config.action_horizon * act_dim
        net = mlp_init([in_dim, *config.hidden_sizes, out_dim], config.activation, seed)
        return cls(net, make_schedule(config.num_steps, config.beta_1, config.beta_K),
                   config.obs_horizon, config.action_horizon, config.exec_horizon,
                   stats, obs_dim, act_dim, env_id, config)

    @property
    def action_size(self) -> int:
        return self.action_horizon * self.act_dim

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": "diffusion-policy",
            "env_id": self.env_id,
            "network": self.network.to_dict(),
            "schedule": {"K": self.schedule.K, "beta_1": self.schedule.beta_1, "beta_K": self.schedule.beta_K},
            "T_o": self.obs_horizon, "T_a": self.action_horizon, "T_exec": self.exec_horizon,
            "obs_dim": self.obs_dim, "act_dim": self.act_dim,
            "norm_stats": None if self.stats is None else self.stats.to_dict(),
            "config": None if self.config is None else self.config.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionPolicy":
        if d.get("kind") != "diffusion-policy":
            raise ConfigurationError("not a diffusion policy checkpoint")
        s = d["schedule"]
        return cls(
            ModelParams.from_dict(d["network"]), make_schedule(s["K"], s["beta_1"], s["beta_K"]),
            d["T_o"], d["T_a"], d["T_exec"],
            None if d.get("norm_stats") is None else NormStats.from_dict(d["norm_stats"]),
            d["obs_dim"], d["act_dim"], d.get("env_id", ""),
            None if d.get("config") is None else DiffusionConfig.from_dict(d["config"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "DiffusionPolicy":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except FileNotFoundError:
            raise ConfigurationError(f"checkpoint not found: {path}") from None


def denoiser_input(obs_flat: np.ndarray, noisy: np.ndarray, k, K: int) -> np.ndarray:
    obs_flat = np.atleast_2d(obs_flat)
    noisy = np.atleast_2d(noisy)
    emb = timestep_embedding(np.broadcast_to(k, (noisy.shape[0],)), K)
    return np.concatenate([obs_flat, noisy, emb], axis=1)


def ddpm_loss(network: ModelParams, obs_flat, x0, k, eps, schedule: NoiseSchedule):
    """Mean squared error between injected and predicted noise, plus its gradient."""
    xk = q_sample(x0, k, eps, schedule)
    pred, cache = forward_with_cache(network, denoiser_input(obs_flat, xk, k, schedule.K))
    diff = pred - eps
    loss = float(np.mean(diff * diff))
    grads, _ = backward(network, cache, 2.0 * diff / diff.size)
    return loss, grads


def ddpm_training_step(network: ModelParams, obs_flat, actions_flat, schedule: NoiseSchedule,
                       opt: AdamState, rng: np.random.Generator):
    """Draw ``k`` and noise per sample, then take one Adam step on the noise-prediction loss.

    Returns ``(network, opt, loss)``.
    """
    n = len(actions_flat)
    if n == 0:
        raise InsufficientDataError("empty training batch")
    k = rng.integers(1, schedule.K + 1, size=n)
    eps = rng.standard_normal(actions_flat.shape)
    loss, grads = ddpm_loss(network, obs_flat, actions_flat, k, eps, schedule)
    if not np.isfinite(loss):
        raise TrainingDivergedError("DDPM loss became non-finite", {"step": opt.t})
    network, opt = adam_step(network, grads, opt)
    return network, opt, loss


def p_sample_step(network: ModelParams, x_k, k: int, obs_flat, schedule: NoiseSchedule,
                  rng: np.random.Generator | Sequence[np.random.Generator] | None = None,
                  z=None) -> np.ndarray:
    """One reverse (ancestral) step ``x_k -> x_{k-1}``.

    Noise is added for ``k > 1`` only. ``z`` overrides the noise draw;
    ``rng`` may be one generator or one per row of a batch.
    """
    schedule.check_step(k)
    x_k = np.asarray(x_k, dtype=np.float64)
    single = x_k.ndim == 1
    xb = np.atleast_2d(x_k)
    eps_hat = mlp_forward(network, denoiser_input(obs_flat, xb, k, schedule.K))
    beta, alpha, ab = schedule.betas[k - 1], schedule.alphas[k - 1], schedule.alpha_bars[k - 1]
    mean = (xb - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(alpha)
    if k > 1:
        if z is None:
            z = _normal_rows(rng, xb.shape)
        mean = mean + np.sqrt(schedule.posterior_variance[k - 1]) * np.reshape(z, xb.shape)
    return mean[0] if single else mean


def _normal_rows(rng, shape) -> np.ndarray:
    if isinstance(rng, np.random.Generator):
        return rng.standard_normal(shape)
    return np.stack([g.standard_normal(shape[1]) for g in rng])


def sample_normalized(policy: DiffusionPolicy, obs_norm_flat, rng) -> np.ndarray:
    """Full reverse chain from pure noise; returns unclamped normalized actions, one row per input."""
    obs_norm_flat = np.atleast_2d(obs_norm_flat)
    b = obs_norm_flat.shape[0]
    x = _normal_rows(rng, (b, policy.action_size))
    for k in range(policy.schedule.K, 0, -1):
        x = p_sample_step(policy.network, x, k, obs_norm_flat, policy.schedule, rng)
    return x


def sample_action_sequence(policy: DiffusionPolicy, obs_history, rng) -> np.ndarray:
    """Sample ``T_a`` raw actions for one observation history, or a batch of histories.

    ``obs_history`` is ``(T_o, obs_dim)`` or ``(B, T_o, obs_dim)``; with a
    batch, ``rng`` may be a list of per-row generators.
    """
    if policy.stats is None:
        raise ConfigurationError("diffusion policy has no normalization statistics")
    hist = np.asarray(obs_history, dtype=np.float64)
    single = hist.ndim == 2
    if single:
        hist = hist[None]
    if hist.shape[1:] != (policy.obs_horizon, policy.obs_dim):
        raise ShapeError(f"observation history shape {hist.shape[1:]}, expected "
                         f"({policy.obs_horizon}, {policy.obs_dim})")
    obs_flat = policy.stats.normalize_obs(hist).reshape(len(hist), -1)
    x = sample_normalized(policy, obs_flat, rng)
    x = np.clip(x, -1.0, 1.0).reshape(len(hist), policy.action_horizon, policy.act_dim)
    acts = policy.stats.denormalize_actions(x)
    return acts[0] if single else acts


class DiffusionController:
    """Receding-horizon wrapper: keeps the observation history and a queue of planned actions."""

    def __init__(self, policy: DiffusionPolicy, rng: np.random.Generator):
        self.policy = policy
        self.rng = rng
        self.history: deque = deque(maxlen=policy.obs_horizon)
        self.queue: deque = deque()
        self.sampler_calls = 0

    def reset(self) -> None:
        self.history.clear()
        self.queue.clear()

    def observe(self, observation) -> None:
        obs = np.asarray(observation, dtype=np.float64)
        if not self.history:
            self.history.extend([obs] * self.policy.obs_horizon)
        else:
            self.history.append(obs)

    @property
    def needs_plan(self) -> bool:
        return not self.queue

    def obs_history(self) -> np.ndarray:
        return np.stack(self.history)

    def enqueue(self, actions) -> None:
        self.queue.extend(np.asarray(actions)[: self.policy.exec_horizon])
        self.sampler_calls += 1

    def act(self, observation) -> np.ndarray:
        self.observe(observation)
        if self.needs_plan:
            self.enqueue(sample_action_sequence(self.policy, self.obs_history(), self.rng))
        return self.queue.popleft()


@dataclass
class DiffusionTrainResult:
    policy: DiffusionPolicy
    epoch_losses: list[float] = field(default_factory=list)


def train_diffusion(dataset: Sequence[Trajectory], config: DiffusionConfig, seed: int,
                    env_id: str | None = None, min_episodes: int = 300) -> DiffusionTrainResult:
    """Fit the denoiser on every window of ``dataset`` for ``config.epochs`` epochs."""
    if not dataset:
        raise InsufficientDataError("no successful episodes to train on")
    warn_if_small(len(dataset), min_episodes)
    stats = fit_norm_stats(dataset)
    obs, acts = window_arrays(dataset, config.obs_horizon, config.action_horizon)
    n = len(obs)
    obs_flat = stats.normalize_obs(obs).reshape(n, -1)
    act_flat = stats.normalize_actions(acts).reshape(n, -1)
    init_ss, shuffle_ss = np.random.SeedSequence(seed).spawn(2)
    obs_dim, act_dim = obs.shape[2], acts.shape[2]
    policy = DiffusionPolicy.create(obs_dim, act_dim, config, int(init_ss.generate_state(1)[0]),
                                    stats, env_id or dataset[0].env_id)
    rng = np.random.default_rng(shuffle_ss)
    opt = AdamState.zeros_like(policy.network, learning_rate=config.learning_rate)
    net = policy.network
    losses = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            net, opt, loss = ddpm_training_step(net, obs_flat[idx], act_flat[idx], policy.schedule, opt, rng)
            total += loss * len(idx)
        losses.append(total / n)
        if epoch % 20 == 0 or epoch == config.epochs - 1:
            log.info("diffusion epoch %d: loss %.5f", epoch, losses[-1])
    policy.network = net
    return DiffusionTrainResult(policy, losses)


def write_loss_curve(losses, path) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,loss\n")
        for i, loss in enumerate(losses):
            fh.write(f"{i},{loss!r}\n")
