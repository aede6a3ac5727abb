"""Implicit Q-learning value pretraining (expectile V, double-Q critics)."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .dataset import Dataset, Transitions
from .errors import ConfigError, DivergenceError


@dataclass(frozen=True)
class IqlConfig:
    expectile: float = 0.7
    gamma: float = 0.99
    target_rate: float = 5e-3
    lr: float = 3e-4
    batch_size: int = 256
    steps: int = 5000
    hidden: tuple[int, ...] = (64, 64)
    seed: int = 0
    log_every: int = 100
    weight_decay: float = 0.0

    def __post_init__(self):
        if not 0.5 <= self.expectile < 1.0:
            raise ConfigError(f"expectile must lie in [0.5, 1), got {self.expectile}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("discount must lie in [0, 1]")
        if not 0.0 <= self.target_rate <= 1.0:
            raise ConfigError("target update rate must lie in [0, 1]")
        if self.batch_size < 1 or self.steps < 0 or self.log_every < 1:
            raise ConfigError("batch_size and log_every must be positive, steps non-negative")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


def expectile_loss(u, eta: float):
    """``|eta - 1(u < 0)| * u**2``, elementwise."""
    u = np.asarray(u, dtype=np.float64)
    weight = np.where(u < 0.0, 1.0 - eta, eta)
    out = weight * u * u
    return float(out) if out.ndim == 0 else out


def expectile_grad(u, eta: float):
    """Derivative of :func:`expectile_loss` with respect to ``u`` (0 at u = 0)."""
    u = np.asarray(u, dtype=np.float64)
    return 2.0 * np.where(u < 0.0, 1.0 - eta, eta) * u


@dataclass
class QEnsemble:
    spec: nn.NetSpec
    q1: np.ndarray
    q2: np.ndarray
    q1_target: np.ndarray
    q2_target: np.ndarray
    state_dim: int
    action_dim: int

    @classmethod
    def init(cls, state_dim, action_dim, hidden, seed) -> "QEnsemble":
        spec = nn.NetSpec((state_dim + action_dim, *hidden, 1))
        q1 = nn.net_init(spec, seed)
        q2 = nn.net_init(spec, seed + 1)
        return cls(spec, q1, q2, q1.copy(), q2.copy(), state_dim, action_dim)

    def _inputs(self, s, a):
        return np.concatenate([np.atleast_2d(s), np.atleast_2d(a)], axis=1)

    def values(self, s, a, target=False) -> tuple[np.ndarray, np.ndarray]:
        x = self._inputs(s, a)
        p1, p2 = (self.q1_target, self.q2_target) if target else (self.q1, self.q2)
        return nn.predict(p1, self.spec, x)[:, 0], nn.predict(p2, self.spec, x)[:, 0]

    def min_q(self, s, a, target=False) -> np.ndarray:
        return np.minimum(*self.values(s, a, target))

    def min_q_action_grad(self, s, a) -> tuple[np.ndarray, np.ndarray]:
        """min(Q1, Q2) of the online critics and its gradient w.r.t. the action."""
        x = self._inputs(s, a)
        v1, g1 = nn.input_gradient(self.q1, self.spec, x)
        v2, g2 = nn.input_gradient(self.q2, self.spec, x)
        pick = (v2[:, 0] < v1[:, 0])[:, None]
        val = np.where(pick, v2, v1)[:, 0]
        grad = np.where(pick, g2, g1)[:, self.state_dim :]
        return val, grad

    def copy(self) -> "QEnsemble":
        return replace(self, q1=self.q1.copy(), q2=self.q2.copy(),
                       q1_target=self.q1_target.copy(), q2_target=self.q2_target.copy())


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray

    @classmethod
    def take(cls, tr: Transitions, idx) -> "Batch":
        return cls(tr.states[idx], tr.actions[idx], tr.rewards[idx], tr.next_states[idx], tr.dones[idx])


@dataclass
class Optim:
    """Parameters plus their Adam state."""

    params: np.ndarray
    state: nn.AdamState

    @classmethod
    def of(cls, params) -> "Optim":
        return cls(params, nn.AdamState.zeros(params.size))

    def step(self, grad, lr, weight_decay=0.0):
        self.params, self.state = nn.adam_step(self.params, grad, self.state, lr, weight_decay)


def v_step(v: Optim, v_spec: nn.NetSpec, ens: QEnsemble, batch: Batch, eta: float, lr: float,
           weight_decay: float = 0.0) -> float:
    """Expectile regression of V(s) toward min of the target critics."""
    target = ens.min_q(batch.states, batch.actions, target=True)
    pred, cache = nn.forward(v.params, v_spec, batch.states)
    u = target - pred[:, 0]
    with np.errstate(over="ignore", invalid="ignore"):  # reported below as divergence
        loss = float(np.mean(expectile_loss(u, eta)))
    if not np.isfinite(loss):
        raise DivergenceError("non-finite value loss", step=v.state.step_count)
    # d loss / d V = -L'(u) / B
    g = -expectile_grad(u, eta)[:, None] / len(u)
    v.step(nn.backward(v.params, v_spec, cache, g).wrt_params, lr, weight_decay)
    return loss


def td_targets(batch: Batch, v_params, v_spec: nn.NetSpec, gamma: float) -> np.ndarray:
    """``r + gamma * (1 - done) * V(s')``."""
    v_next = nn.predict(v_params, v_spec, batch.next_states)[:, 0]
    return batch.rewards + gamma * (1.0 - batch.dones) * v_next


def q_step(q1: Optim, q2: Optim, ens: QEnsemble, v_params, v_spec, batch: Batch, gamma: float, lr: float,
           weight_decay: float = 0.0) -> float:
    """Squared TD regression of both critics toward r + gamma (1 - done) V(s')."""
    y = td_targets(batch, v_params, v_spec, gamma)
    x = ens._inputs(batch.states, batch.actions)
    total = 0.0
    for opt in (q1, q2):
        pred, cache = nn.forward(opt.params, ens.spec, x)
        err = pred[:, 0] - y
        with np.errstate(over="ignore", invalid="ignore"):  # reported below as divergence
            loss = float(np.mean(err * err))
        if not np.isfinite(loss):
            raise DivergenceError("non-finite critic loss", step=opt.state.step_count)
        total += loss
        grad = nn.backward(opt.params, ens.spec, cache, (2.0 * err / len(err))[:, None]).wrt_params
        opt.step(grad, lr, weight_decay)
    return 0.5 * total


@dataclass
class IqlResult:
    ensemble: QEnsemble
    v_params: np.ndarray
    v_spec: nn.NetSpec
    config: IqlConfig
    history: list[tuple[int, float, float]] = field(default_factory=list)  # (step, v_loss, q_loss)


def train_iql(ds: Dataset, config: IqlConfig) -> IqlResult:
    """M iterations of V step, critic step and Polyak sync of both targets."""
    if not ds.trajectories:
        raise ConfigError("cannot train on an empty dataset")
    tr = ds.transitions()
    rng = np.random.default_rng(config.seed)
    ens = QEnsemble.init(ds.state_dim, ds.action_dim, config.hidden, seed=config.seed * 3 + 11)
    v_spec = nn.NetSpec((ds.state_dim, *config.hidden, 1))
    v = Optim.of(nn.net_init(v_spec, config.seed * 3 + 13))
    q1, q2 = Optim.of(ens.q1), Optim.of(ens.q2)
    history = []
    for step in range(config.steps):
        batch = Batch.take(tr, rng.integers(len(tr), size=config.batch_size))
        try:
            lv = v_step(v, v_spec, ens, batch, config.expectile, config.lr, config.weight_decay)
            lq = q_step(q1, q2, ens, v.params, v_spec, batch, config.gamma, config.lr, config.weight_decay)
        except DivergenceError as exc:
            raise DivergenceError("value pretraining diverged", step=step) from exc
        ens.q1, ens.q2 = q1.params, q2.params
        ens.q1_target = nn.polyak_update(ens.q1_target, ens.q1, config.target_rate)
        ens.q2_target = nn.polyak_update(ens.q2_target, ens.q2, config.target_rate)
        if step % config.log_every == 0 or step == config.steps - 1:
            history.append((step, lv, lq))
    return IqlResult(ens, v.params, v_spec, config, history)
