import numpy as np
import pytest

from vcslab import dataset as D
from vcslab import envs, iql, nn
from vcslab.errors import ConfigError, DivergenceError


def constant_net(spec, c):
    p = np.zeros(spec.n_params)
    p[-1] = c
    return p


def test_expectile_loss_values():
    assert iql.expectile_loss(2.0, 0.7) == pytest.approx(2.8)
    assert iql.expectile_loss(-2.0, 0.7) == pytest.approx(1.2)
    u = np.linspace(-3, 3, 13)
    assert np.array_equal(iql.expectile_loss(u, 0.5), 0.5 * u * u)


@pytest.mark.parametrize("eta", [0.5, 0.7, 0.9])
def test_expectile_of_coin_is_eta(eta):
    # stationarity of E[L(X - m)] for X uniform on {0, 1}
    x = np.array([0.0, 1.0])
    assert np.mean(iql.expectile_grad(x - eta, eta)) == pytest.approx(0.0, abs=1e-15)
    grid = np.linspace(0, 1, 10001)
    risk = [np.mean(iql.expectile_loss(x - m, eta)) for m in grid]
    assert abs(grid[int(np.argmin(risk))] - eta) < 1e-2


def test_config_validation():
    with pytest.raises(ConfigError):
        iql.IqlConfig(expectile=1.0)
    with pytest.raises(ConfigError):
        iql.IqlConfig(gamma=1.5)


def _ens_with_targets(state_dim, action_dim, q_fn_params, spec):
    return iql.QEnsemble(spec, q_fn_params.copy(), q_fn_params.copy(), q_fn_params.copy(), q_fn_params.copy(),
                         state_dim, action_dim)


def _batch(states, actions):
    n = len(states)
    return iql.Batch(states, actions, np.zeros(n), states, np.zeros(n))


def test_v_step_stationary_point():
    qspec = nn.NetSpec((2, 1))
    ens = _ens_with_targets(1, 1, constant_net(qspec, 3.0), qspec)
    vspec = nn.NetSpec((1, 1))
    v = iql.Optim.of(constant_net(vspec, 3.0))
    before = v.params.copy()
    iql.v_step(v, vspec, ens, _batch(np.ones((1, 1)), np.zeros((1, 1))), 0.5, lr=0.1)
    assert np.array_equal(v.params, before)


def test_v_regresses_to_constant_target():
    qspec = nn.NetSpec((2, 1))
    ens = _ens_with_targets(1, 1, constant_net(qspec, 2.5), qspec)
    vspec = nn.NetSpec((1, 1))
    v = iql.Optim.of(np.zeros(vspec.n_params))
    b = _batch(np.ones((8, 1)), np.zeros((8, 1)))
    for _ in range(3000):
        iql.v_step(v, vspec, ens, b, 0.5, lr=1e-2)
    assert nn.predict(v.params, vspec, np.ones((1, 1)))[0, 0] == pytest.approx(2.5, abs=1e-3)


def test_v_fits_upper_expectile():
    # Q(s, a) = a, actions half 0 and half 1 -> V converges to the 0.9-expectile
    qspec = nn.NetSpec((2, 1))
    q = np.array([0.0, 1.0, 0.0])
    ens = _ens_with_targets(1, 1, q, qspec)
    vspec = nn.NetSpec((1, 1))
    v = iql.Optim.of(np.zeros(vspec.n_params))
    b = _batch(np.ones((10, 1)), np.repeat([[0.0], [1.0]], 5, axis=0))
    for _ in range(4000):
        iql.v_step(v, vspec, ens, b, 0.9, lr=5e-3)
    assert nn.predict(v.params, vspec, np.ones((1, 1)))[0, 0] == pytest.approx(0.9, abs=1e-2)


def test_td_targets_terminal_and_zero_discount():
    vspec = nn.NetSpec((1, 1))
    vp = constant_net(vspec, 10.0)
    b = iql.Batch(np.zeros((2, 1)), np.zeros((2, 1)), np.array([4.0, 1.0]), np.zeros((2, 1)), np.array([1.0, 0.0]))
    np.testing.assert_array_equal(iql.td_targets(b, vp, vspec, 1.0), [4.0, 11.0])
    np.testing.assert_array_equal(iql.td_targets(b, vp, vspec, 0.0), [4.0, 1.0])


def test_grid_critic_recovers_stitched_values(grid_critic):
    env = envs.StitchGrid()
    q = lambda s, a: float(grid_critic.min_q(env.encode_state(s), env.encode_action(a))[0])
    assert q("s1", "UP") == pytest.approx(7.0, abs=0.15)
    assert q("s1", "RIGHT") == pytest.approx(6.0, abs=0.15)
    assert q("s1", "UP") > q("s1", "RIGHT")
    assert q("s2", "RIGHT") > q("s2", "DOWNRIGHT")


def test_training_is_deterministic(grid_ds):
    cfg = iql.IqlConfig(steps=50, batch_size=8, hidden=(8,), seed=3, gamma=1.0)
    a, b = iql.train_iql(grid_ds, cfg), iql.train_iql(grid_ds, cfg)
    assert a.ensemble.q1.tobytes() == b.ensemble.q1.tobytes()
    assert a.v_params.tobytes() == b.v_params.tobytes()


def test_divergence_is_reported():
    t = D.Trajectory(np.zeros((3, 1)), np.zeros((2, 1)), np.array([1e200, 1e200]))
    ds = D.Dataset([t], 1, 1)
    with pytest.raises(DivergenceError) as info:
        iql.train_iql(ds, iql.IqlConfig(steps=200, batch_size=2, hidden=(4,), lr=1.0))
    assert info.value.step is not None
