"""Conditioned action predictor trained with behaviour cloning plus value aid.

The policy is an MLP over a flattened window of ``K`` (conditioner, state)
slots followed by ``K`` validity flags. Slots are right-aligned: the newest
step sits in the last slot and missing history is zero-padded on the left.

Per predicted step the loss is::

    bc * ||a - pi||^2  -  (w(R) / |Q_bar|) * min(Q1, Q2)(s, pi)

averaged over all valid steps in the batch, where ``R`` is the return of the
whole source trajectory and ``Q_bar`` the dataset-mean critic value.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .dataset import Dataset, SubTrajectory, Trajectory, Transitions, compute_rtg
from .errors import ConfigError, DivergenceError
from .envs import ENV_REGISTRY
from .iql import QEnsemble

BASELINES = ("vcs", "rcsl_only", "q_greedy", "constant_w")
HEADS = ("linear", "softmax")
DISCRETE_ENVS = frozenset(k for k, cls in ENV_REGISTRY.items() if getattr(cls, "discrete", False))


def _softmax(z: np.ndarray, mask=None) -> np.ndarray:
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def policy_output(params, spec: "PolicySpec", inputs, action_mask=None):
    """Action vectors and the forward cache of the underlying network.

    With a softmax head, ``action_mask`` (boolean, same shape as the output)
    removes illegal actions before normalisation.
    """
    out, cache = nn.forward(params, spec.net, inputs)
    if spec.head == "softmax":
        out = _softmax(out, action_mask)
    return out, cache


def legal_action_fn(ds: Dataset):
    """The environment's legal-action table for discrete datasets, else None."""
    cls = ENV_REGISTRY.get(ds.meta.get("env", ""))
    if cls is None or not getattr(cls, "discrete", False):
        return None
    return cls().action_mask


@dataclass(frozen=True)
class PolicySpec:
    state_dim: int
    action_dim: int
    K: int = 1
    mode: str = "rtg"
    hidden: tuple[int, ...] = (64, 64)
    rtg_scale: float = 1.0
    head: str = "linear"  # "softmax" keeps discrete outputs on the probability simplex

    def __post_init__(self):
        if self.head not in HEADS:
            raise ConfigError(f"unknown output head {self.head!r}; expected one of {HEADS}")
        if self.K < 1:
            raise ConfigError("context length K must be at least 1")
        if self.mode not in ("rtg", "subgoal"):
            raise ConfigError(f"unknown conditioning mode {self.mode!r}")
        if self.rtg_scale <= 0:
            raise ConfigError("rtg_scale must be positive")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def cond_dim(self) -> int:
        return 1 if self.mode == "rtg" else self.state_dim

    @property
    def slot_dim(self) -> int:
        return self.cond_dim + self.state_dim

    @property
    def input_dim(self) -> int:
        return self.K * self.slot_dim + self.K

    @property
    def net(self) -> nn.NetSpec:
        return nn.NetSpec((self.input_dim, *self.hidden, self.action_dim))

    def encode(self, conds, states) -> np.ndarray:
        """Input vector for the most recent ``len(states) <= K`` steps."""
        conds = np.asarray(conds, dtype=np.float64).reshape(len(states), -1)
        states = np.asarray(states, dtype=np.float64).reshape(len(states), -1)
        n = len(states)
        if n < 1 or n > self.K:
            raise ValueError(f"need between 1 and {self.K} steps, got {n}")
        if self.mode == "rtg":
            conds = conds / self.rtg_scale
        slots = np.zeros((self.K, self.slot_dim))
        slots[self.K - n :, : self.cond_dim] = conds
        slots[self.K - n :, self.cond_dim :] = states
        mask = np.zeros(self.K)
        mask[self.K - n :] = 1.0
        return np.concatenate([slots.ravel(), mask])


@dataclass(frozen=True)
class VcsWeightFn:
    lam: float
    r_star: float
    floor: float = 0.0

    def __post_init__(self):
        if self.lam <= 0:
            raise ConfigError("lambda must be positive")
        if self.floor < 0:
            raise ConfigError("weight floor must be non-negative")

    def __call__(self, R):
        return vcs_weight(R, self)


def vcs_weight(R, fn: VcsWeightFn):
    """``max(lam * (r_star - R), floor)``; never negative."""
    w = np.maximum(fn.lam * (fn.r_star - np.asarray(R, dtype=np.float64)), fn.floor)
    return float(w) if w.ndim == 0 else w


@dataclass(frozen=True)
class VcsConfig:
    K: int = 1
    mode: str = "rtg"
    lam: float = 1.0
    floor: float = 0.0
    r_star: float | None = None  # defaults to the dataset's r_star
    steps: int = 10000
    lr: float = 3e-4
    warmup: int = 1000
    batch_size: int = 256
    weight_decay: float = 1e-4
    hidden: tuple[int, ...] = (64, 64)
    rtg_scale: float = 1.0
    head: str | None = None  # None: softmax for discrete environments, linear otherwise
    multipliers: tuple[float, ...] = (1.0, 2.0)
    checkpoint_every: int = 1000
    log_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.checkpoint_every < 1 or self.log_every < 1:
            raise ConfigError("steps must be non-negative; batch_size and intervals positive")
        if self.lr <= 0 or self.warmup < 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive, warmup and weight_decay non-negative")
        if not self.multipliers:
            raise ConfigError("at least one target-RTG multiplier is required")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "multipliers", tuple(float(m) for m in self.multipliers))
        PolicySpec(1, 1, self.K, self.mode, self.hidden, self.rtg_scale, self.head or "linear")

    def policy_spec(self, ds: Dataset) -> PolicySpec:
        head = self.head
        if head is None:
            head = "softmax" if ds.meta.get("env") in DISCRETE_ENVS else "linear"
        return PolicySpec(ds.state_dim, ds.action_dim, self.K, self.mode, self.hidden, self.rtg_scale, head)


# -- conditioning ------------------------------------------------------------


def make_conditioner(mode: str, traj: Trajectory, t: int, K: int, rng: np.random.Generator) -> np.ndarray:
    """Conditioning vectors for the window starting at ``t`` (left-padded, like the window).

    ``rtg``: return-to-go of each step. ``subgoal``: one future state, drawn
    uniformly from indices ``t+1 .. L`` and repeated over the window.
    """
    L = len(traj)
    if not 0 <= t < L:
        raise IndexError(f"t={t} outside trajectory of length {L}")
    n = min(K, L - t)
    if mode == "rtg":
        out = np.zeros((K, 1))
        out[K - n :, 0] = compute_rtg(traj)[t : t + n]
    elif mode == "subgoal":
        goal = traj.states[int(rng.integers(t + 1, L + 1))]
        out = np.zeros((K, traj.states.shape[1]))
        out[K - n :] = goal
    else:
        raise ConfigError(f"unknown conditioning mode {mode!r}")
    return out


# -- batches -------------------------------------------------------------------


@dataclass
class PolicyBatch:
    """One row per valid predicted step."""

    inputs: np.ndarray  # (n, input_dim)
    targets: np.ndarray  # (n, action_dim)
    states: np.ndarray  # (n, state_dim) state the action is taken in
    source_return: np.ndarray  # (n,)
    traj_index: np.ndarray | None = None
    start: np.ndarray | None = None
    action_mask: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.targets)


def build_batch(windows: list[SubTrajectory], conds: list[np.ndarray], spec: PolicySpec) -> PolicyBatch:
    """Expand windows into per-step prediction rows (prefix inputs)."""
    inputs, targets, states, rets = [], [], [], []
    for win, cond in zip(windows, conds):
        real = np.flatnonzero(win.mask)
        for j in range(len(real)):
            upto = real[: j + 1]
            inputs.append(spec.encode(cond[upto], win.state_window[upto]))
            targets.append(win.action_targets[real[j]])
            states.append(win.state_window[real[j]])
            rets.append(win.source_return)
    return PolicyBatch(np.array(inputs), np.array(targets), np.array(states), np.array(rets))


class WindowSampler:
    """Vectorised equivalent of sample_subtrajectory + make_conditioner + build_batch."""

    def __init__(self, ds: Dataset, spec: PolicySpec, mask_fn=None):
        self.spec = spec
        self.mask_fn = mask_fn
        self.tr: Transitions = ds.transitions()
        self.n_traj = len(ds.trajectories)
        # states with the final state of each trajectory included, for subgoals
        self.all_states = np.concatenate([t.states for t in ds.trajectories])
        self.state_offsets = np.concatenate([[0], np.cumsum(self.tr.lengths + 1)[:-1]])

    def sample(self, batch_size: int, rng: np.random.Generator) -> PolicyBatch:
        spec, tr, K = self.spec, self.tr, self.spec.K
        traj = rng.integers(self.n_traj, size=batch_size)
        L = tr.lengths[traj]
        t = (rng.random(batch_size) * L).astype(np.int64)
        if spec.mode == "subgoal":
            g = t + 1 + (rng.random(batch_size) * (L - t)).astype(np.int64)
            goals = self.all_states[self.state_offsets[traj] + g]
        b_idx, j_idx = np.nonzero(t[:, None] + np.arange(K)[None, :] < L[:, None])
        base = tr.offsets[traj][b_idx] + t[b_idx]  # row of step t in the flat table
        n = len(b_idx)
        slots = np.zeros((n, K, spec.slot_dim))
        mask = np.zeros((n, K))
        for k in range(K):
            shift = j_idx - (K - 1 - k)  # position relative to t
            ok = shift >= 0
            rows = base[ok] + shift[ok]
            if spec.mode == "rtg":
                slots[ok, k, 0] = tr.rtg[rows] / spec.rtg_scale
            else:
                slots[ok, k, : spec.cond_dim] = goals[b_idx[ok]]
            slots[ok, k, spec.cond_dim :] = tr.states[rows]
            mask[ok, k] = 1.0
        cur = base + j_idx
        inputs = np.concatenate([slots.reshape(n, -1), mask], axis=1)
        states = tr.states[cur]
        legal = self.mask_fn(states) if self.mask_fn is not None else None
        return PolicyBatch(inputs, tr.actions[cur], states, tr.source_return[cur],
                           traj_index=traj[b_idx], start=t[b_idx], action_mask=legal)


# -- loss ----------------------------------------------------------------------


def q_normalizer(ds: Dataset, critic: QEnsemble) -> float:
    """Mean of min(Q1, Q2) over every in-sample (s, a)."""
    tr = ds.transitions()
    return float(np.mean(critic.min_q(tr.states, tr.actions)))


def vcs_loss(params, spec: PolicySpec, batch: PolicyBatch, critic: QEnsemble | None,
             weights, q_norm: float, bc: float = 1.0) -> tuple[float, np.ndarray]:
    """Loss and its gradient with respect to the policy parameters.

    ``weights`` holds w(R) per row (or a scalar). The critic only enters
    through its action-input gradient; it is never modified.
    """
    if q_norm == 0 or not np.isfinite(q_norm):
        raise ConfigError("Q normalizer must be finite and non-zero")
    n = len(batch)
    if n == 0:
        raise ValueError("empty policy batch")
    net = spec.net
    pred, cache = policy_output(params, spec, batch.inputs, batch.action_mask)
    w = np.broadcast_to(np.asarray(weights, dtype=np.float64), (n,))
    with np.errstate(over="ignore", invalid="ignore"):  # reported below as divergence
        diff = pred - batch.targets
        per_row = bc * np.sum(diff * diff, axis=1)
        grad_out = (2.0 * bc) * diff
        if critic is not None and np.any(w != 0.0):
            beta = w / abs(q_norm)
            q, dq = critic.min_q_action_grad(batch.states, pred)
            per_row = per_row - beta * q
            grad_out = grad_out - beta[:, None] * dq
        loss = float(per_row.mean())
    if not np.isfinite(loss):
        raise DivergenceError("non-finite policy loss")
    if spec.head == "softmax":
        grad_out = pred * (grad_out - np.sum(grad_out * pred, axis=1, keepdims=True))
    grad = nn.backward(params, net, cache, grad_out / n).wrt_params
    return loss, grad


# -- training ------------------------------------------------------------------


@dataclass
class PolicyResult:
    params: np.ndarray
    spec: PolicySpec
    config: VcsConfig
    baseline: str
    constant: float | None
    q_norm: float
    history: list[tuple[int, float]] = field(default_factory=list)
    checkpoints: list[tuple[int, np.ndarray]] = field(default_factory=list)


def row_weights(baseline: str, weight_fn: VcsWeightFn | None, returns, constant: float | None):
    if baseline == "vcs":
        return weight_fn(returns)
    if baseline == "rcsl_only":
        return 0.0
    if baseline == "q_greedy":
        return 1.0
    if baseline == "constant_w":
        return float(constant)
    raise ConfigError(f"unknown baseline {baseline!r}; expected one of {BASELINES}")


def train_policy(ds: Dataset, critic: QEnsemble | None, config: VcsConfig,
                 baseline: str = "vcs", constant: float | None = None) -> PolicyResult:
    """N Adam steps on the composite loss; the critic stays frozen.

    ``rcsl_only`` sets w = 0, ``q_greedy`` drops the cloning term and
    maximizes Q alone, ``constant_w`` uses w = ``constant``.
    """
    if baseline not in BASELINES:
        raise ConfigError(f"unknown baseline {baseline!r}; expected one of {BASELINES}")
    if baseline == "constant_w" and constant is None:
        raise ConfigError("constant_w needs a constant weight")
    if baseline != "rcsl_only" and critic is None:
        raise ConfigError(f"baseline {baseline} needs a trained critic")
    spec = config.policy_spec(ds)
    r_star = ds.r_star if config.r_star is None else config.r_star
    weight_fn = VcsWeightFn(config.lam, r_star, config.floor)
    q_norm = q_normalizer(ds, critic) if critic is not None else 1.0
    bc = 0.0 if baseline == "q_greedy" else 1.0
    schedule = nn.LrSchedule(config.lr, config.warmup)
    sampler = WindowSampler(ds, spec, legal_action_fn(ds) if spec.head == "softmax" else None)
    rng = np.random.default_rng(config.seed)
    params = nn.net_init(spec.net, config.seed + 101)
    adam = nn.AdamState.zeros(params.size)
    result = PolicyResult(params, spec, config, baseline, constant, q_norm)
    for step in range(config.steps):
        batch = sampler.sample(config.batch_size, rng)
        w = row_weights(baseline, weight_fn, batch.source_return, constant)
        try:
            loss, grad = vcs_loss(params, spec, batch, critic, w, q_norm, bc)
            params, adam = nn.adam_step(params, grad, adam, schedule(step), config.weight_decay)
        except DivergenceError as exc:
            raise DivergenceError("policy training diverged", step=step) from exc
        if step % config.log_every == 0 or step == config.steps - 1:
            result.history.append((step, loss))
        if (step + 1) % config.checkpoint_every == 0:
            result.checkpoints.append((step + 1, params.copy()))
    result.params = params
    return result


@dataclass
class Policy:
    """A trained policy ready for rollouts."""

    params: np.ndarray
    spec: PolicySpec

    def act(self, conds, states, action_mask=None) -> np.ndarray:
        x = self.spec.encode(conds, states)
        return policy_output(self.params, self.spec, x, action_mask)[0]
