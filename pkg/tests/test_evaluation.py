import math

import numpy as np
import pytest
from scipy.stats import norm

from diffrisk.diffusion import DiffusionConfig, DiffusionPolicy
from diffrisk.envs import make_env, reach_controller, sweep_controller
from diffrisk.errors import ConfigurationError
from diffrisk.evaluation import (
    DiffusionAgent,
    EvalRow,
    FunctionAgent,
    PPOAgent,
    build_report,
    derive_episode_seeds,
    evaluate,
    evaluation_seeds,
    harvest,
    parse_report_csv,
    report_csv,
    report_text,
    run_episodes,
    wilson_interval,
)
from diffrisk.ppo import EVAL_SEED_BASE, GaussianPolicy, PPOConfig
from diffrisk.trajstore import fit_norm_stats


def wilson_reference(s, n, z):
    # textbook form: (p + z^2/2n -+ z*sqrt(p(1-p)/n + z^2/4n^2)) / (1 + z^2/n)
    p = s / n
    a = p + z ** 2 / (2 * n)
    b = z * math.sqrt(p * (1 - p) / n + z ** 2 / (4 * n ** 2))
    c = 1 + z ** 2 / n
    return (a - b) / c, (a + b) / c


def test_wilson_matches_reference():
    z = norm.ppf(0.975)
    lo, hi = wilson_interval(86, 100, z)
    ref = wilson_reference(86, 100, z)
    assert lo == pytest.approx(ref[0], abs=1e-9) and hi == pytest.approx(ref[1], abs=1e-9)
    lo, hi = wilson_interval(86, 100)
    assert lo < 0.86 < hi


def test_wilson_boundaries():
    assert wilson_interval(0, 10)[0] == 0.0
    assert wilson_interval(10, 10)[1] == 1.0


@pytest.mark.parametrize("args", [(-1, 10), (11, 10), (0, 0), (3, 10, 0.0)])
def test_wilson_domain(args):
    with pytest.raises(ValueError):
        wilson_interval(*args)


def test_wilson_contains_rate_everywhere():
    for n in range(1, 40):
        for s in range(n + 1):
            lo, hi = wilson_interval(s, n)
            assert 0 <= lo <= s / n <= hi <= 1


def test_row_arithmetic():
    row = EvalRow.from_counts("diffusion", "ReachServe-v0", 86, 100)
    assert row.rate == 0.86


def test_seed_spaces_are_disjoint():
    train = derive_episode_seeds(0, 1000)
    assert max(train) < EVAL_SEED_BASE <= min(evaluation_seeds(200))
    assert derive_episode_seeds(0, 5, start=3) == derive_episode_seeds(0, 8)[3:]


def test_zero_action_policy_never_succeeds():
    row = evaluate("ppo-mean", None, "ReachServe-v0", evaluation_seeds(20),
                   agent=FunctionAgent(lambda o: np.zeros(2)))
    assert row.successes == 0 and row.n == 20 and row.ci_low == 0.0


def test_scripted_controller_rate_one():
    row = evaluate("ppo-mean", None, "ReachServe-v0", evaluation_seeds(50), {"drift_sigma": 0.0},
                   agent=FunctionAgent(reach_controller))
    assert row.rate == 1.0 and row.ci_high == 1.0
    row = evaluate("ppo-mean", None, "SweepWipe-v0", evaluation_seeds(20), agent=FunctionAgent(sweep_controller))
    assert row.rate == 1.0


def noisy_policy():
    env = make_env("ReachServe-v0")
    pol = GaussianPolicy.create(5, 2, PPOConfig(), 0, env.observation_space.low, env.observation_space.high)
    pol.log_std = np.full(2, -0.5)
    return pol


def sequential_episode(env_id, policy, seed):
    """Reference rollout for one seed, no batching."""
    env = make_env(env_id)
    agent = PPOAgent(policy, stochastic=True)
    agent.begin([seed])
    obs = env.reset(seed)
    acts = []
    while not env.done:
        a = agent.act(obs[None], np.array([True]))[0]
        acts.append(a)
        obs = env.step(a).observation
    return np.array(acts)


def test_batched_rollout_matches_sequential():
    pol = noisy_policy()
    seeds = evaluation_seeds(6)
    batched = run_episodes("ReachServe-v0", PPOAgent(pol), seeds, batch_size=4)
    for traj, s in zip(batched, seeds):
        # BLAS rounds differently for one row than for a block; nothing else may differ
        assert np.allclose(traj.actions, sequential_episode("ReachServe-v0", pol, s), rtol=0, atol=1e-9)


def test_evaluate_is_deterministic():
    pol = noisy_policy()
    a = evaluate("ppo-stochastic", pol, "ReachServe-v0", evaluation_seeds(30))
    b = evaluate("ppo-stochastic", pol, "ReachServe-v0", evaluation_seeds(30))
    assert a == b


def test_evaluate_rejects_mismatched_checkpoint():
    with pytest.raises(ConfigurationError):
        evaluate("ppo-mean", noisy_policy(), "SweepWipe-v0", evaluation_seeds(2))
    with pytest.raises(ConfigurationError):
        evaluate("ppo-sampled", noisy_policy(), "ReachServe-v0", evaluation_seeds(2))
    with pytest.raises(ConfigurationError):
        evaluate("ppo-mean", noisy_policy(), "ReachServe-v0", [])


def test_harvest_stopping_rules():
    pol = noisy_policy()
    assert len(harvest(pol, "ReachServe-v0", 1, episodes=7, chunk=3)) == 7
    data = harvest(pol, "ReachServe-v0", 1, max_env_steps=1000, chunk=4)
    assert sum(len(t) for t in data) <= 1000
    assert [t.episode_id for t in data] == list(range(len(data)))
    with pytest.raises(ConfigurationError):
        harvest(pol, "ReachServe-v0", 1)


def test_harvest_is_chunk_independent():
    pol = noisy_policy()
    a = harvest(pol, "ReachServe-v0", 2, episodes=9, chunk=2)
    b = harvest(pol, "ReachServe-v0", 2, episodes=9, chunk=9)
    assert [(len(x), x.seed, x.success_sum) for x in a] == [(len(y), y.seed, y.success_sum) for y in b]
    assert all(np.allclose(x.actions, y.actions, rtol=0, atol=1e-9) for x, y in zip(a, b))
    c = harvest(pol, "ReachServe-v0", 2, episodes=9, chunk=2)
    assert all(x.equals(y) for x, y in zip(a, c))


def test_diffusion_agent_call_counts():
    stats = fit_norm_stats(harvest(noisy_policy(), "ReachServe-v0", 0, episodes=2))
    pol = DiffusionPolicy.create(5, 2, DiffusionConfig(hidden_sizes=(8,)), 0, stats)
    agent = DiffusionAgent(pol)
    trajs = run_episodes("ReachServe-v0", agent, [5, 6])
    assert agent.sampler_calls == [math.ceil(len(t) / 4) for t in trajs]


def sample_rows():
    return [EvalRow.from_counts("ppo-stochastic", "ReachServe-v0", 66, 200),
            EvalRow.from_counts("ppo-mean", "ReachServe-v0", 190, 200),
            EvalRow.from_counts("diffusion", "ReachServe-v0", 172, 200)]


def test_report_delta_feeding_shape():
    rows = [EvalRow("ppo-stochastic", "Feeding", 100, 33, 0.33, 0.25, 0.43),
            EvalRow("diffusion", "Feeding", 100, 86, 0.86, 0.78, 0.91)]
    table = build_report(rows)
    assert table[0]["delta"] is None
    assert table[1]["delta"] == pytest.approx(0.53)
    assert "+0.53" in report_text(table)


def test_single_row_has_no_delta():
    table = build_report(sample_rows()[:1])
    assert "delta" not in table[0]
    assert "delta" not in report_csv(table)


def test_report_csv_round_trip():
    table = build_report(sample_rows())
    assert parse_report_csv(report_csv(table)) == table
    for rec in table:
        assert rec["ci_low"] <= rec["rate"] <= rec["ci_high"]


def test_report_text_is_aligned():
    lines = report_text(build_report(sample_rows())).splitlines()
    assert lines[0].split() == ["task", "policy", "n", "successes", "rate", "ci_low", "ci_high", "delta"]
    col = lines[0].index("policy")
    assert all(line[col - 2:col] == "  " for line in lines[2:])


def test_row_file_round_trip(tmp_path):
    row = EvalRow.from_counts("diffusion", "ReachServe-v0", 3, 9, checkpoint_file="x.json")
    row.save(tmp_path / "r.json")
    assert EvalRow.load(tmp_path / "r.json") == row
