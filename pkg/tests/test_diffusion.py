import math

import numpy as np
import pytest

from diffrisk.diffusion import (
    DiffusionConfig,
    DiffusionController,
    DiffusionPolicy,
    ddpm_loss,
    ddpm_training_step,
    denoiser_input,
    make_schedule,
    p_sample_step,
    q_sample,
    sample_action_sequence,
    sample_normalized,
    timestep_embedding,
    train_diffusion,
    write_loss_curve,
)
from diffrisk.envs import make_env, reach_controller
from diffrisk.errors import ConfigurationError, InsufficientDataError
from diffrisk.nn import AdamState, grad_check, mlp_init
from diffrisk.trajstore import Trajectory, fit_norm_stats


def test_schedule_single_step():
    s = make_schedule(1, 1e-4, 1e-4)
    assert s.alpha_bars[0] == pytest.approx(1 - 1e-4, abs=1e-15)
    s = make_schedule(50)
    assert s.alphas[0] == s.alpha_bars[0] == pytest.approx(0.9999, abs=1e-15)


def test_default_schedule_invariants():
    s = make_schedule(50)
    ab = [1.0]
    for b in np.linspace(1e-4, s.beta_K, 50):
        ab.append(ab[-1] * (1 - b))
    assert np.allclose(s.alpha_bars, ab[1:], rtol=0, atol=1e-15)
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert s.alpha_bars[-1] < 0.05
    assert np.all((s.betas > 0) & (s.betas < 1))
    assert np.all((s.posterior_variance >= 0) & (s.posterior_variance <= s.betas + 1e-18))
    assert s.posterior_variance[0] == 0.0


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_schedule_rejects_bad_bounds(args):
    with pytest.raises(ConfigurationError):
        make_schedule(*args)


def test_q_sample_closed_form():
    s = make_schedule(50)
    rng = np.random.default_rng(0)
    for _ in range(50):
        x0, eps = rng.normal(size=6), rng.normal(size=6)
        k = int(rng.integers(1, 51))
        prod = math.prod(1 - b for b in s.betas[:k])
        expect = [math.sqrt(prod) * a + math.sqrt(1 - prod) * e for a, e in zip(x0, eps)]
        assert np.allclose(q_sample(x0, k, eps, s), expect, rtol=0, atol=1e-12)


def test_q_sample_edges():
    s = make_schedule(50)
    x0 = np.array([0.5, -1.0])
    assert np.array_equal(q_sample(x0, 7, np.zeros(2), s), np.sqrt(s.alpha_bars[6]) * x0)
    assert np.allclose(q_sample(x0, 1, np.ones(2), s), x0, atol=0.011)
    with pytest.raises(IndexError):
        q_sample(x0, 0, np.zeros(2), s)
    with pytest.raises(IndexError):
        q_sample(x0, 51, np.zeros(2), s)


def test_timestep_embedding_shape_and_values():
    e = timestep_embedding([0, 25], 50)
    assert e.shape == (2, 16)
    assert np.array_equal(e[0], np.r_[np.zeros(8), np.ones(8)])
    assert e[1, 0] == pytest.approx(math.sin(math.pi * 0.5))


def test_posterior_mean_identity():
    """Oracle denoiser (predicts the injected noise) and z = 0 gives the DDPM posterior mean."""
    s = make_schedule(50)
    rng = np.random.default_rng(1)
    for _ in range(30):
        k = int(rng.integers(2, 51))
        x0, eps = rng.normal(size=4), rng.normal(size=4)
        xk = q_sample(x0, k, eps, s)
        ab, ab_prev = s.alpha_bars[k - 1], s.alpha_bars[k - 2]
        beta, alpha = s.betas[k - 1], s.alphas[k - 1]
        posterior_mean = (math.sqrt(ab_prev) * beta / (1 - ab) * x0
                          + math.sqrt(alpha) * (1 - ab_prev) / (1 - ab) * xk)
        # a single-layer linear "network" whose output is the constant eps
        net = mlp_init([2 + 4 + 16, 4], seed=0)
        net = net.with_arrays([np.zeros_like(net.weights[0]), eps.copy()])
        got = p_sample_step(net, xk, k, np.zeros(2), s, z=np.zeros(4))
        assert np.allclose(got, posterior_mean, rtol=0, atol=1e-10)


def test_zero_denoiser_step_and_final_step_is_deterministic():
    s = make_schedule(50)
    net = mlp_init([1 + 3 + 16, 8, 3], seed=0)
    net = net.with_arrays([np.zeros_like(a) for a in net.arrays()])
    x = np.array([0.3, -0.2, 1.5])
    assert np.allclose(p_sample_step(net, x, 9, np.zeros(1), s, z=np.zeros(3)), x / np.sqrt(s.alphas[8]),
                       rtol=0, atol=1e-15)
    a = p_sample_step(net, x, 1, np.zeros(1), s, np.random.default_rng(0))
    b = p_sample_step(net, x, 1, np.zeros(1), s, np.random.default_rng(1))
    assert np.array_equal(a, b)


def test_zero_denoiser_loss_is_about_one():
    s = make_schedule(50)
    net = mlp_init([2 + 8 + 16, 8], seed=0)
    net = net.with_arrays([np.zeros_like(a) for a in net.arrays()])
    rng = np.random.default_rng(2)
    n = 2000
    k = rng.integers(1, 51, n)
    loss, _ = ddpm_loss(net, rng.normal(size=(n, 2)), rng.normal(size=(n, 8)), k,
                        rng.standard_normal((n, 8)), s)
    assert abs(loss - 1.0) < 0.05


def test_perfect_denoiser_loss_is_zero():
    s = make_schedule(10)
    eps = np.random.default_rng(0).normal(size=4)
    net = mlp_init([1 + 4 + 16, 4], seed=0)
    net = net.with_arrays([np.zeros_like(net.weights[0]), eps])
    loss, _ = ddpm_loss(net, np.zeros((1, 1)), np.ones((1, 4)), 3, eps[None], s)
    assert loss == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_ddpm_loss_gradient(seed):
    s = make_schedule(20)
    rng = np.random.default_rng(seed)
    net = mlp_init([3 + 4 + 16, 6, 5, 4], "relu", seed)
    obs, x0 = rng.normal(size=(2, 3)), rng.normal(size=(2, 4))
    k, eps = rng.integers(1, 21, 2), rng.normal(size=(2, 4))

    def loss_fn(vec):
        loss, grads = ddpm_loss(net.with_flat(vec), obs, x0, k, eps, s)
        return loss, grads.flat()

    assert grad_check(loss_fn, net.flat(), 1e-5) < 1e-4


def _bare_policy(act_size, obs_size, hidden=(64, 64), seed=0):
    cfg = DiffusionConfig(obs_horizon=1, action_horizon=1, exec_horizon=1, hidden_sizes=hidden)
    pol = DiffusionPolicy.create(obs_size, act_size, cfg, seed)
    return pol, cfg


def test_constant_action_overfit():
    target = np.array([0.6, -0.4])
    pol, _ = _bare_policy(2, 1)
    s = pol.schedule
    opt = AdamState.zeros_like(pol.network, learning_rate=1e-3)
    rng = np.random.default_rng(0)
    net = pol.network
    obs = np.zeros((128, 1))
    acts = np.tile(target, (128, 1))
    for _ in range(6000):
        net, opt, _ = ddpm_training_step(net, obs, acts, s, opt, rng)
    pol.network = net
    samples = sample_normalized(pol, np.zeros((50, 1)), np.random.default_rng(1))
    assert np.all(np.isfinite(samples))
    assert np.max(np.abs(samples - target)) < 0.05


def scripted_dataset(n, seed=0, noise=0.1):
    env = make_env("ReachServe-v0")
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        obs = env.reset(int(rng.integers(0, 2**62)))
        steps = []
        while not env.done:
            a = np.clip(reach_controller(obs) + rng.normal(0, noise, 2), -1, 1)
            r = env.step(a)
            steps.append((obs, a, r))
            obs = r.observation
        if steps[-1][2].success:
            out.append(Trajectory.from_steps(
                len(out), "ReachServe-v0", 0, [s[0] for s in steps], [s[1] for s in steps],
                [s[2].reward for s in steps], [s[2].success for s in steps],
                [s[2].terminated for s in steps], [s[2].truncated for s in steps]))
    return out


@pytest.fixture(scope="module")
def reach_data():
    return scripted_dataset(40)


def test_train_zero_epochs_returns_initial_network(reach_data):
    cfg = DiffusionConfig(epochs=0, hidden_sizes=(16,))
    res = train_diffusion(reach_data, cfg, seed=4)
    assert res.epoch_losses == []
    init_seed = int(np.random.SeedSequence(4).spawn(2)[0].generate_state(1)[0])
    fresh = DiffusionPolicy.create(5, 2, cfg, init_seed)
    assert all(np.array_equal(a, b) for a, b in zip(res.policy.network.arrays(), fresh.network.arrays()))


def test_training_is_deterministic_and_round_trips(reach_data, tmp_path):
    cfg = DiffusionConfig(epochs=2, hidden_sizes=(32, 32), batch_size=128)
    a = train_diffusion(reach_data, cfg, seed=1)
    b = train_diffusion(reach_data, cfg, seed=1)
    assert a.epoch_losses == b.epoch_losses
    a.policy.save(tmp_path / "a.json")
    b.policy.save(tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    back = DiffusionPolicy.load(tmp_path / "a.json")
    assert all(np.array_equal(x, y) for x, y in zip(back.network.arrays(), a.policy.network.arrays()))
    assert back.schedule.K == 50 and back.exec_horizon == 4
    write_loss_curve(a.epoch_losses, tmp_path / "loss.csv")
    assert (tmp_path / "loss.csv").read_text().splitlines()[0] == "epoch,loss"


def test_train_on_empty_raises():
    with pytest.raises(InsufficientDataError):
        train_diffusion([], DiffusionConfig(), seed=0)


def test_loss_falls_and_first_action_points_at_mouth(reach_data):
    cfg = DiffusionConfig(epochs=40, hidden_sizes=(128, 128), learning_rate=1e-3)
    res = train_diffusion(reach_data, cfg, seed=0)
    assert res.epoch_losses[-1] <= 0.5 * res.epoch_losses[0]
    env = make_env("ReachServe-v0")
    obs = env.reset(12345)
    hist = np.stack([obs, obs])
    rng = np.random.default_rng(0)
    acts = sample_action_sequence(res.policy, np.repeat(hist[None], 100, axis=0), rng)
    assert acts.shape == (100, 8, 2)
    lo, hi = res.policy.stats.act_min, res.policy.stats.act_max
    assert np.all((acts >= lo - 1e-12) & (acts <= hi + 1e-12))
    toward = acts[:, 0, :] @ obs[:2] > 0
    assert toward.mean() >= 0.8


def test_sampling_is_seeded(reach_data):
    res = train_diffusion(reach_data, DiffusionConfig(epochs=1, hidden_sizes=(16,)), seed=0)
    hist = np.stack([reach_data[0].observations[0]] * 2)
    a = sample_action_sequence(res.policy, hist, np.random.default_rng(5))
    b = sample_action_sequence(res.policy, hist, np.random.default_rng(5))
    assert np.array_equal(a, b) and a.shape == (8, 2)


def test_missing_stats_is_configuration_error():
    pol, _ = _bare_policy(2, 5)
    with pytest.raises(ConfigurationError):
        sample_action_sequence(pol, np.zeros((1, 5)), np.random.default_rng(0))


def _controller(exec_horizon):
    cfg = DiffusionConfig(exec_horizon=exec_horizon, hidden_sizes=(8,))
    stats = fit_norm_stats(scripted_dataset(2))
    return DiffusionController(DiffusionPolicy.create(5, 2, cfg, 0, stats), np.random.default_rng(0))


@pytest.mark.parametrize("exec_horizon,steps,calls", [(4, 4, 1), (4, 200, 50), (4, 201, 51), (1, 7, 7)])
def test_controller_call_counts(exec_horizon, steps, calls):
    ctrl = _controller(exec_horizon)
    obs = np.zeros(5)
    for _ in range(steps):
        a = ctrl.act(obs)
        assert a.shape == (2,)
    assert ctrl.sampler_calls == calls


def test_controller_front_pads_history():
    ctrl = _controller(4)
    first = np.arange(5.0)
    ctrl.act(first)
    assert np.array_equal(ctrl.obs_history(), np.stack([first, first]))
    ctrl.act(first + 1)
    assert np.array_equal(ctrl.obs_history(), np.stack([first, first + 1]))


def test_denoiser_input_layout():
    x = denoiser_input(np.ones((3, 2)), np.zeros((3, 4)), 5, 50)
    assert x.shape == (3, 2 + 4 + 16)
    assert np.array_equal(x[:, 6:], timestep_embedding([5, 5, 5], 50))
