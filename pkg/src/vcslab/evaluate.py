"""Rollout evaluation: RTG-decrementing episodes, normalized scores, running averages."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .envs import Reach2D, StitchGrid, make_env, run_episode, scripted_action
from .errors import ConfigError
from .policy import Policy, PolicySpec


def rollout_policy(policy: Policy, env, mode: str, target, seed: int, start=None):
    """One greedy episode. Returns ``(return, visited_states, conditioners)``.

    In ``rtg`` mode the conditioner starts at ``target`` and drops by every
    observed reward. In ``subgoal`` mode ``target`` is the goal state.
    """
    spec = policy.spec
    if mode != spec.mode:
        raise ConfigError(f"policy was trained with {spec.mode!r} conditioning, not {mode!r}")
    if spec.state_dim != env.state_dim or spec.action_dim != env.action_dim:
        raise ConfigError("policy and environment dimensions differ")
    rng = np.random.default_rng(seed)
    state = env.reset_vec(rng) if start is None else np.asarray(start, dtype=np.float64)
    cond = np.array([float(target)]) if mode == "rtg" else np.asarray(target, dtype=np.float64)
    conds, states, visited, cond_log = [cond], [state], [state], [cond.copy()]
    total = 0.0
    legal = getattr(env, "action_mask", None) if spec.head == "softmax" else None
    for _ in range(env.horizon):
        mask = legal(state)[0] if legal is not None else None
        out = policy.act(np.array(conds[-spec.K :]), np.array(states[-spec.K :]), mask)
        state, r, done = env.step_vec(state, env.decode_action(out, state))
        total += r
        visited.append(state)
        if done:
            break
        if mode == "rtg":
            cond = cond - r
        conds.append(cond)
        states.append(state)
        cond_log.append(cond.copy())
    return total, np.array(visited), np.array(cond_log)


# -- reference scores -------------------------------------------------------------


def _random_action(env, state, rng):
    if isinstance(env, StitchGrid):
        avail = env.available(env.decode_state(state))
        return env.encode_action(avail[int(rng.integers(len(avail)))])
    return rng.uniform(-1.0, 1.0, size=env.action_dim)


def _expert_action(env, state, rng):
    if isinstance(env, StitchGrid):
        best = {"s1": "UP", "s2": "RIGHT", "s3": "UPLEFT", "s6": "RIGHT"}
        return env.encode_action(best[env.decode_state(state)])
    return scripted_action(state, 0.0, rng)


def reference_scores(env_id: str, episodes: int = 1000, seed: int = 0) -> dict:
    """Mean return of a uniform-random policy and of the noiseless scripted expert."""
    env = make_env(env_id)
    out = {}
    for name, chooser in (("random", _random_action), ("expert", _expert_action)):
        rng = np.random.default_rng(seed)
        rets = [run_episode(env, lambda s, t: chooser(env, s, rng), rng)[0] for _ in range(episodes)]
        out[name] = float(np.mean(rets))
    out["provenance"] = f"reference_scores({env_id!r}, episodes={episodes}, seed={seed})"
    return out


def load_registry(path=None) -> dict:
    if path is None:
        text = resources.files("vcslab").joinpath("registry.json").read_text()
    else:
        text = Path(path).read_text()
    return json.loads(text)


def normalized_score(raw, env_id: str, registry: dict | None = None):
    """100 * (raw - random) / (expert - random)."""
    registry = load_registry() if registry is None else registry
    try:
        ref = registry[env_id]
    except KeyError:
        raise ConfigError(f"no reference scores for environment {env_id!r}") from None
    lo, hi = ref["random"], ref["expert"]
    if not hi > lo:
        raise ConfigError(f"expert score must exceed random score for {env_id!r}")
    return 100.0 * (np.asarray(raw, dtype=np.float64) - lo) / (hi - lo)


# -- checkpoint evaluation -----------------------------------------------------------


@dataclass(frozen=True)
class EvalConfig:
    episodes_per_checkpoint: int = 10
    checkpoint_interval: int = 1000
    running_window: int = 10
    multipliers: tuple[float, ...] = (1.0, 2.0)
    seed: int = 0

    def __post_init__(self):
        if self.episodes_per_checkpoint < 1 or self.running_window < 1 or self.checkpoint_interval < 1:
            raise ConfigError("episode count, window and interval must be positive")
        if not self.multipliers:
            raise ConfigError("at least one target-RTG multiplier is required")
        object.__setattr__(self, "multipliers", tuple(float(m) for m in self.multipliers))


def running_average(values, window: int) -> np.ndarray:
    """Trailing mean; entry i averages the last ``min(window, i + 1)`` values."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


@dataclass
class EvalReport:
    env_id: str
    mode: str
    targets: dict[float, object]
    steps: list[int]
    raw: dict[float, list[float]]  # multiplier -> mean raw return per checkpoint
    scores: dict[float, list[float]]  # multiplier -> mean normalized score per checkpoint
    running: dict[float, list[float]]
    final: dict[float, float]
    visited: dict[float, list[np.ndarray]] = field(default_factory=dict, repr=False)

    @property
    def best_multiplier(self) -> float:
        return max(self.final, key=lambda m: (self.final[m], -m))

    @property
    def best(self) -> float:
        return self.final[self.best_multiplier]

    def to_json(self) -> dict:
        key = lambda m: repr(float(m))
        return {
            "env": self.env_id,
            "mode": self.mode,
            "steps": self.steps,
            "targets": {key(m): (t.tolist() if isinstance(t, np.ndarray) else t) for m, t in self.targets.items()},
            "raw": {key(m): v for m, v in self.raw.items()},
            "scores": {key(m): v for m, v in self.scores.items()},
            "running": {key(m): v for m, v in self.running.items()},
            "final": {key(m): v for m, v in self.final.items()},
            "best_multiplier": self.best_multiplier,
            "best": self.best,
        }


def evaluate_run(checkpoints, spec: PolicySpec, env, config: EvalConfig, target_base=None,
                 goal=None, registry: dict | None = None) -> EvalReport:
    """Evaluate every checkpoint for each target multiplier.

    ``checkpoints`` is a list of ``(step, params)``. In rtg mode the target
    return is ``multiplier * target_base``; in subgoal mode ``goal`` is used
    and the multiplier list collapses to ``(1.0,)``.
    """
    if len(checkpoints) < config.running_window:
        raise ConfigError(
            f"need at least {config.running_window} checkpoints for the running average, got {len(checkpoints)}"
        )
    registry = load_registry() if registry is None else registry
    if spec.mode == "rtg":
        if target_base is None:
            raise ConfigError("rtg evaluation needs a base target return")
        targets = {m: m * float(target_base) for m in config.multipliers}
    else:
        targets = {1.0: np.zeros(env.state_dim) if goal is None else np.asarray(goal, dtype=np.float64)}
    steps = [int(s) for s, _ in checkpoints]
    raw, scores, running, final, visited = {}, {}, {}, {}, {}
    for m, target in targets.items():
        per_ckpt = []
        for _, params in checkpoints:
            pol = Policy(params, spec)
            rets, vis = [], []
            for ep in range(config.episodes_per_checkpoint):
                ret, states, _ = rollout_policy(pol, env, spec.mode, target, seed=config.seed * 100003 + ep)
                rets.append(ret)
                vis.append(states)
            per_ckpt.append(float(np.mean(rets)))
            visited[m] = vis
        norm = [float(x) for x in normalized_score(per_ckpt, env.env_id, registry)]
        avg = running_average(norm, config.running_window)
        raw[m], scores[m], running[m], final[m] = per_ckpt, norm, avg.tolist(), float(avg[-1])
    return EvalReport(env.env_id, spec.mode, targets, steps, raw, scores, running, final, visited)


def summarize(reports: list[EvalReport]) -> dict:
    """Mean over seeds of each multiplier's final score, and the best multiplier."""
    mults = sorted(reports[0].final)
    per_mult = {m: float(np.mean([r.final[m] for r in reports])) for m in mults}
    best = max(per_mult, key=lambda m: (per_mult[m], -m))
    return {
        "per_seed": [{repr(m): r.final[m] for m in mults} for r in reports],
        "per_multiplier": {repr(m): v for m, v in per_mult.items()},
        "best_multiplier": best,
        "final": per_mult[best],
    }


def write_visited_csv(path, episodes: list[np.ndarray]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        dims = episodes[0].shape[1] if episodes else 0
        w.writerow(["episode", "step"] + [f"state_{i}" for i in range(dims)])
        for ep, states in enumerate(episodes):
            for t, s in enumerate(states):
                w.writerow([ep, t] + [repr(float(x)) for x in s])
