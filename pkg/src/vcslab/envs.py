"""Deterministic toy environments and scripted behaviour policies.

Both environments are value-semantic: the caller holds the episode state and
passes it back to ``step``. The time limit is enforced by whoever runs the
episode (see :func:`run_episode`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import Dataset, Trajectory
from .errors import ConfigError, InvalidActionError


class StitchGrid:
    """Five-state stitching MDP with two intersecting trajectories.

    Purple path s1 -> s3 -> s2 -> TERM earns (1, 1, 4); orange path
    s1 -> s2 -> s6 -> TERM earns (3, 1, 1). The best stitched route
    s1 -UP-> s2 -RIGHT-> TERM earns 7.
    """

    env_id = "stitch-grid"
    STATES = ("s1", "s2", "s3", "s6", "TERM")
    ACTIONS = ("UP", "RIGHT", "UPLEFT", "DOWNRIGHT")
    TABLE = {
        ("s1", "UP"): ("s2", 3.0),
        ("s1", "RIGHT"): ("s3", 1.0),
        ("s3", "UPLEFT"): ("s2", 1.0),
        ("s2", "RIGHT"): ("TERM", 4.0),
        ("s2", "DOWNRIGHT"): ("s6", 1.0),
        ("s6", "RIGHT"): ("TERM", 1.0),
    }
    horizon = 3
    gamma = 1.0
    state_dim = len(STATES)
    action_dim = len(ACTIONS)
    discrete = True
    state_range = (0.0, 1.0)

    # -- symbolic interface --
    def reset(self, rng=None) -> str:
        return "s1"

    def step(self, state: str, action: str) -> tuple[str, float, bool]:
        try:
            nxt, reward = self.TABLE[(state, action)]
        except KeyError:
            raise InvalidActionError(f"action {action} is not available at {state}") from None
        return nxt, reward, nxt == "TERM"

    def available(self, state: str) -> list[str]:
        return [a for a in self.ACTIONS if (state, a) in self.TABLE]

    def action_mask(self, state_vecs) -> np.ndarray:
        """Boolean (n, action_dim) table of legal actions for one-hot states.

        The terminal state has no legal action; its row is all True so that
        masked normalisations stay defined.
        """
        legal = np.array([[(s, a) in self.TABLE for a in self.ACTIONS] for s in self.STATES])
        legal[~legal.any(axis=1)] = True
        return legal[np.argmax(np.atleast_2d(state_vecs), axis=1)]

    # -- vector interface --
    def encode_state(self, state: str) -> np.ndarray:
        return np.eye(self.state_dim)[self.STATES.index(state)]

    def encode_action(self, action: str) -> np.ndarray:
        return np.eye(self.action_dim)[self.ACTIONS.index(action)]

    def decode_state(self, vec) -> str:
        return self.STATES[int(np.argmax(vec))]

    def decode_action(self, output, state_vec) -> np.ndarray:
        """Greedy choice among the actions available at the state."""
        state = self.decode_state(state_vec)
        avail = self.available(state)
        if not avail:
            raise InvalidActionError(f"no actions available at {state}")
        out = np.asarray(output, dtype=np.float64)
        best = max(avail, key=lambda a: out[self.ACTIONS.index(a)])
        return self.encode_action(best)

    def reset_vec(self, rng=None) -> np.ndarray:
        return self.encode_state(self.reset(rng))

    def step_vec(self, state_vec, action_vec) -> tuple[np.ndarray, float, bool]:
        nxt, r, done = self.step(self.decode_state(state_vec), self.ACTIONS[int(np.argmax(action_vec))])
        return self.encode_state(nxt), r, done

    def action_grid(self) -> np.ndarray:
        return np.eye(self.action_dim)


def grid_reset() -> str:
    return StitchGrid().reset()


def grid_step(state: str, action: str) -> tuple[str, float, bool]:
    return StitchGrid().step(state, action)


GRID_TRAJECTORIES = {
    "purple": [("s1", "RIGHT"), ("s3", "UPLEFT"), ("s2", "RIGHT")],
    "orange": [("s1", "UP"), ("s2", "DOWNRIGHT"), ("s6", "RIGHT")],
}


def grid_dataset() -> Dataset:
    """The two-trajectory stitching dataset (returns 6 and 5)."""
    env = StitchGrid()
    trajs = []
    for path in GRID_TRAJECTORIES.values():
        states, actions, rewards = [env.encode_state(path[0][0])], [], []
        done = False
        for s, a in path:
            nxt, r, done = env.step(s, a)
            states.append(env.encode_state(nxt))
            actions.append(env.encode_action(a))
            rewards.append(r)
        trajs.append(Trajectory(np.array(states), np.array(actions), np.array(rewards), terminal=done))
    return Dataset(
        trajs,
        env.state_dim,
        env.action_dim,
        r_star=7.0,
        meta={"env": env.env_id, "quality": "fixed", "seed": "0"},
    )


def grid_q_values(env: StitchGrid | None = None) -> dict[tuple[str, str], float]:
    """Finite-horizon dynamic programming over the full transition table."""
    env = env or StitchGrid()
    V = {s: 0.0 for s in env.STATES}
    Q: dict[tuple[str, str], float] = {}
    for _ in range(env.horizon):
        Q = {}
        for (s, a), (nxt, r) in env.TABLE.items():
            Q[(s, a)] = r + (0.0 if nxt == "TERM" else env.gamma * V[nxt])
        V = {s: max((Q[(s, a)] for a in env.available(s)), default=0.0) for s in env.STATES}
    return Q


class Reach2D:
    """Point mass on [-1, 1]^2 pulled toward the origin.

    ``p' = clip(p + 0.1 a)``, reward ``-||p'||``, 30 steps, start on the ring
    0.8 <= ||p|| <= 1.
    """

    env_id = "reach2d"
    horizon = 30
    gamma = 0.99
    state_dim = 2
    action_dim = 2
    discrete = False
    step_size = 0.1
    state_range = (-1.0, 1.0)
    action_range = (-1.0, 1.0)

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        radius = np.sqrt(rng.uniform(0.8**2, 1.0))
        angle = rng.uniform(0.0, 2 * np.pi)
        return np.array([radius * np.cos(angle), radius * np.sin(angle)])

    def step(self, state, action) -> tuple[np.ndarray, float, bool]:
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        nxt = np.clip(np.asarray(state, dtype=np.float64) + self.step_size * a, -1.0, 1.0)
        return nxt, -float(np.linalg.norm(nxt)), False

    reset_vec = reset
    step_vec = step

    def decode_action(self, output, state_vec=None) -> np.ndarray:
        return np.clip(np.asarray(output, dtype=np.float64), -1.0, 1.0)


ENV_REGISTRY = {StitchGrid.env_id: StitchGrid, Reach2D.env_id: Reach2D}


def make_env(env_id: str):
    try:
        return ENV_REGISTRY[env_id]()
    except KeyError:
        raise ConfigError(f"unknown environment {env_id!r}; known: {sorted(ENV_REGISTRY)}") from None


# -- behaviour policies ---------------------------------------------------------

NOISE_SCALES = {"expert": 0.05, "medium": 0.4}


@dataclass(frozen=True)
class BehaviorPolicy:
    quality: str = "expert"
    noise_scale: float | None = None
    mixture_ratio: float = 0.25  # fraction of expert trajectories in a mixture

    def __post_init__(self):
        if self.quality not in ("expert", "medium", "mixture"):
            raise ConfigError(f"unknown behaviour quality {self.quality!r}")
        if not 0.0 <= self.mixture_ratio <= 1.0:
            raise ConfigError("mixture_ratio must lie in [0, 1]")

    def sigma(self, quality: str | None = None) -> float:
        q = quality or self.quality
        if self.noise_scale is not None and q == self.quality:
            return self.noise_scale
        return NOISE_SCALES[q]


def expert_mean_action(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return -p / max(float(np.linalg.norm(p)), 0.1)


def scripted_action(p, sigma: float, rng: np.random.Generator) -> np.ndarray:
    a = expert_mean_action(p)
    if sigma > 0:
        a = a + sigma * rng.standard_normal(a.shape)
    return np.clip(a, -1.0, 1.0)


def _reach_trajectory(env: Reach2D, sigma: float, rng: np.random.Generator, start=None) -> Trajectory:
    p = env.reset(rng) if start is None else np.asarray(start, dtype=np.float64)
    states, actions, rewards = [p], [], []
    for _ in range(env.horizon):
        a = scripted_action(p, sigma, rng)
        p, r, _ = env.step(p, a)
        states.append(p)
        actions.append(a)
        rewards.append(r)
    return Trajectory(np.array(states), np.array(actions), np.array(rewards), terminal=False)


def reach_rollout(policy: BehaviorPolicy, n_traj: int, seed: int) -> Dataset:
    """Generate ``n_traj`` Reach2D episodes with the scripted policy.

    A mixture puts ``round(mixture_ratio * n_traj)`` expert episodes first,
    then medium ones.
    """
    if n_traj < 1:
        raise ConfigError("n_traj must be at least 1")
    env = Reach2D()
    rng = np.random.default_rng(seed)
    if policy.quality == "mixture":
        n_expert = int(round(policy.mixture_ratio * n_traj))
        qualities = ["expert"] * n_expert + ["medium"] * (n_traj - n_expert)
    else:
        qualities = [policy.quality] * n_traj
    trajs = [_reach_trajectory(env, policy.sigma(q), rng) for q in qualities]
    meta = {
        "env": env.env_id,
        "quality": policy.quality,
        "seed": str(seed),
        "sigma": ",".join(f"{q}={policy.sigma(q)}" for q in sorted(set(qualities))),
    }
    if policy.quality == "mixture":
        meta["mixture_ratio"] = str(policy.mixture_ratio)
    return Dataset(trajs, env.state_dim, env.action_dim, meta=meta)


def run_episode(env, act, rng=None, start=None) -> tuple[float, np.ndarray]:
    """Roll ``act(state, t) -> action`` for one episode; returns (return, visited states)."""
    state = env.reset_vec(rng) if start is None else np.asarray(start, dtype=np.float64)
    visited = [state]
    total = 0.0
    for t in range(env.horizon):
        state, r, done = env.step_vec(state, act(state, t))
        visited.append(state)
        total += r
        if done:
            break
    return total, np.array(visited)
