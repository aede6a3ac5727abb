import json

import numpy as np
import pytest

from vcslab import envs, evaluate, nn, policy
from vcslab.errors import ConfigError
from vcslab.evaluate import EvalConfig, EvalReport

REG = {"toy": {"random": -10.0, "expert": 30.0}}


def test_normalized_score_anchors():
    assert evaluate.normalized_score(-10.0, "toy", REG) == 0.0
    assert evaluate.normalized_score(30.0, "toy", REG) == 100.0
    assert evaluate.normalized_score(10.0, "toy", REG) == 50.0
    with pytest.raises(ConfigError):
        evaluate.normalized_score(1.0, "nowhere", REG)
    with pytest.raises(ConfigError):
        evaluate.normalized_score(1.0, "bad", {"bad": {"random": 1.0, "expert": 1.0}})


def test_registry_file():
    reg = evaluate.load_registry()
    assert set(reg) == set(envs.ENV_REGISTRY)
    for ref in reg.values():
        assert ref["expert"] > ref["random"] and ref["provenance"]
    assert reg["stitch-grid"]["expert"] == 7.0


def test_grid_reference_scores():
    ref = evaluate.reference_scores("stitch-grid", episodes=400, seed=1)
    assert ref["expert"] == 7.0
    # exact mean of the uniform policy is 5.25 (one branch is cut by the horizon)
    assert ref["random"] == pytest.approx(5.25, abs=0.15)


def test_running_average():
    np.testing.assert_array_equal(evaluate.running_average([4.0] * 12, 10), [4.0] * 12)
    np.testing.assert_allclose(evaluate.running_average([0, 2, 4, 6], 2), [0, 1, 3, 5])


def test_best_multiplier():
    rep = EvalReport("toy", "rtg", {1.0: 1.0, 2.0: 2.0}, [1], {}, {}, {}, {1.0: 6.0, 2.0: 7.0})
    assert rep.best == 7.0 and rep.best_multiplier == 2.0


class NoStepEnv:
    env_id = "toy"
    horizon = 0
    state_dim = 1
    action_dim = 1

    def reset_vec(self, rng):
        return np.zeros(1)


def _policy(sd, ad, K=1, seed=0):
    spec = policy.PolicySpec(sd, ad, K=K, hidden=(8,), rtg_scale=10.0)
    return policy.Policy(nn.net_init(spec.net, seed), spec)


def test_zero_horizon_rollout():
    ret, visited, _ = evaluate.rollout_policy(_policy(1, 1), NoStepEnv(), "rtg", 3.0, seed=0)
    assert ret == 0.0 and len(visited) == 1


def test_rtg_decrements_by_reward():
    pol = _policy(2, 2, K=3, seed=2)
    ret, visited, conds = evaluate.rollout_policy(pol, envs.Reach2D(), "rtg", -4.0, seed=5)
    rewards = -np.linalg.norm(visited[1:], axis=1)
    # Reach2D never terminates, so the conditioner after the last step is logged too
    assert len(conds) == envs.Reach2D.horizon + 1
    np.testing.assert_allclose(np.diff(conds[:, 0]), -rewards, rtol=0, atol=1e-12)
    assert ret == pytest.approx(rewards.sum())


def test_rollout_checks_dimensions_and_mode():
    with pytest.raises(ConfigError):
        evaluate.rollout_policy(_policy(3, 2), envs.Reach2D(), "rtg", 0.0, 0)
    with pytest.raises(ConfigError):
        evaluate.rollout_policy(_policy(2, 2), envs.Reach2D(), "subgoal", np.zeros(2), 0)


def test_evaluate_run_fixed_policy_and_reproducibility(tmp_path):
    pol = _policy(2, 2, seed=3)
    ckpts = [(100 * (i + 1), pol.params) for i in range(10)]
    cfg = EvalConfig(episodes_per_checkpoint=2, running_window=10, multipliers=(1.0, 0.5), seed=1)
    a = evaluate.evaluate_run(ckpts, pol.spec, envs.Reach2D(), cfg, target_base=-3.0)
    b = evaluate.evaluate_run(ckpts, pol.spec, envs.Reach2D(), cfg, target_base=-3.0)
    assert json.dumps(a.to_json()) == json.dumps(b.to_json())
    for m in (1.0, 0.5):
        # identical checkpoints -> constant curve -> final score equals it
        assert len(set(a.scores[m])) == 1
        assert a.final[m] == pytest.approx(a.scores[m][0], rel=1e-12)
    evaluate.write_visited_csv(tmp_path / "v.csv", a.visited[1.0])
    lines = (tmp_path / "v.csv").read_text().splitlines()
    assert lines[0] == "episode,step,state_0,state_1" and len(lines) == 1 + 2 * 31


def test_evaluate_run_needs_enough_checkpoints():
    pol = _policy(2, 2)
    with pytest.raises(ConfigError):
        evaluate.evaluate_run([(1, pol.params)] * 3, pol.spec, envs.Reach2D(), EvalConfig(), target_base=-3.0)


def test_summary_over_seeds():
    mk = lambda f: EvalReport("toy", "rtg", {}, [], {}, {}, {}, f)
    s = evaluate.summarize([mk({1.0: 10.0, 2.0: 20.0}), mk({1.0: 30.0, 2.0: 0.0})])
    assert s["per_multiplier"] == {"1.0": 20.0, "2.0": 10.0}
    assert s["best_multiplier"] == 1.0 and s["final"] == 20.0
