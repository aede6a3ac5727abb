"""Empirical NTK probes of a trained critic: kernel, MRR, OMRR and profiles.

All probes read a single critic network ``(params, spec)`` whose input is the
concatenation ``[state, action]``. By convention the first online critic of a
:class:`~vcslab.iql.QEnsemble` is probed.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .dataset import Dataset, StateQuantizer, group_by_cell
from .errors import DegenerateReferenceError


def _grad(params, spec, s, a) -> np.ndarray:
    x = np.concatenate([np.ravel(s), np.ravel(a)])
    return nn.per_sample_grads(params, spec, x[None, :])[0]


def _grads(params, spec, s, actions) -> np.ndarray:
    actions = np.atleast_2d(actions)
    x = np.concatenate([np.broadcast_to(np.ravel(s), (len(actions), np.size(s))), actions], axis=1)
    return nn.per_sample_grads(params, spec, x)


def ntk(params, spec, s_bar, a_bar, s, a) -> float:
    """k(s_bar, a_bar, s, a): inner product of the two parameter gradients."""
    return float(_grad(params, spec, s_bar, a_bar) @ _grad(params, spec, s, a))


def normalized_ntk(params, spec, s_bar, a_bar, s, a) -> float:
    """|k(s_bar, a_bar, s, a)| / ||grad Q(s, a)||^2."""
    g = _grad(params, spec, s, a)
    ref = float(g @ g)
    if ref <= 0.0:
        raise DegenerateReferenceError("reference pair has a zero parameter gradient")
    return abs(float(_grad(params, spec, s_bar, a_bar) @ g)) / ref


def gram_matrix(params, spec, states, actions) -> np.ndarray:
    """K[i, j] = k(pair_j, pair_i) over the paired rows of ``states``/``actions``."""
    x = np.concatenate([np.atleast_2d(states), np.atleast_2d(actions)], axis=1)
    G = nn.per_sample_grads(params, spec, x)
    return G @ G.T


@dataclass
class MrrReport:
    value: float
    n_pairs: int
    skipped: int


def mrr(params, spec, state_set, action_set) -> MrrReport:
    """Mean off-diagonal row ratio of the Gram matrix over the full product space."""
    pairs = list(itertools.product(range(len(state_set)), range(len(action_set))))
    S = np.asarray(state_set, dtype=np.float64)
    A = np.asarray(action_set, dtype=np.float64)
    K = gram_matrix(params, spec, S[[i for i, _ in pairs]], A[[j for _, j in pairs]])
    n = len(pairs)
    diag = np.diag(K)
    ok = diag > 0.0
    if n < 2 or not ok.any():
        raise DegenerateReferenceError("no non-degenerate reference pairs")
    off = np.abs(K).sum(axis=1) - np.abs(diag)
    rows = off[ok] / diag[ok] / (n - 1)
    return MrrReport(float(rows.mean()), int(ok.sum()), int((~ok).sum()))


# -- action grids ---------------------------------------------------------------


@dataclass(frozen=True)
class ActionQuantizer:
    """Cartesian grid of bin centres, ``bins`` per action dimension."""

    bins: int
    action_dim: int
    lo: float = -1.0
    hi: float = 1.0

    def centers(self) -> np.ndarray:
        width = (self.hi - self.lo) / self.bins
        return self.lo + (np.arange(self.bins) + 0.5) * width

    def grid(self) -> np.ndarray:
        c = self.centers()
        mesh = np.meshgrid(*([c] * self.action_dim), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def index_of(self, a) -> int:
        a = np.atleast_1d(np.asarray(a, dtype=np.float64))
        idx = np.floor((a - self.lo) / (self.hi - self.lo) * self.bins).astype(int)
        idx = np.clip(idx, 0, self.bins - 1)
        return int(np.ravel_multi_index(tuple(idx), (self.bins,) * self.action_dim))

    def describe(self) -> dict:
        return {"kind": "uniform", "bins": self.bins, "action_dim": self.action_dim, "lo": self.lo, "hi": self.hi}


@dataclass(frozen=True)
class DiscreteActions:
    """The one-hot actions of a discrete environment."""

    n_actions: int

    def grid(self) -> np.ndarray:
        return np.eye(self.n_actions)

    def index_of(self, a) -> int:
        return int(np.argmax(a))

    def describe(self) -> dict:
        return {"kind": "discrete", "bins": self.n_actions}


def quantizer_for(env, bins: int = 25):
    if getattr(env, "discrete", False):
        return DiscreteActions(env.action_dim)
    lo, hi = env.action_range
    return ActionQuantizer(bins, env.action_dim, lo, hi)


# -- OMRR -----------------------------------------------------------------------


@dataclass
class OmrrReport:
    estimate: float
    per_pair_ratios: np.ndarray
    n_pairs: int
    skipped: int
    quantizer: dict
    seed: int
    critic: str = "q1"
    sample_rows: np.ndarray = field(default=None, repr=False)

    def to_json(self) -> dict:
        return {
            "estimate": self.estimate,
            "n_pairs": self.n_pairs,
            "skipped": self.skipped,
            "bins": self.quantizer.get("bins"),
            "seed": self.seed,
            "quantizer": self.quantizer,
            "critic": self.critic,
        }


def row_ratio(params, spec, s, a, quantizer) -> float:
    """Mean normalized NTK of (s, a) against every grid action outside a's bin."""
    grid = quantizer.grid()
    keep = np.ones(len(grid), dtype=bool)
    keep[quantizer.index_of(a)] = False
    g_ref = _grad(params, spec, s, a)
    ref = float(g_ref @ g_ref)
    if ref <= 0.0:
        raise DegenerateReferenceError("reference pair has a zero parameter gradient")
    G = _grads(params, spec, s, grid[keep])
    return float(np.mean(np.abs(G @ g_ref)) / ref)


def omrr(params, spec, ds: Dataset, quantizer, n_pairs: int, seed: int) -> OmrrReport:
    """Sampled offline mean row ratio.

    In-sample pairs are drawn without replacement, so ``n_pairs >= |D|``
    visits every pair exactly once.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be at least 1")
    tr = ds.transitions()
    rng = np.random.default_rng(seed)
    n = min(n_pairs, len(tr))
    rows = rng.permutation(len(tr))[:n]
    ratios, skipped = [], 0
    for i in rows:
        try:
            ratios.append(row_ratio(params, spec, tr.states[i], tr.actions[i], quantizer))
        except DegenerateReferenceError:
            skipped += 1
    ratios = np.array(ratios)
    estimate = float(ratios.mean()) if len(ratios) else float("nan")
    return OmrrReport(estimate, ratios, len(ratios), skipped, quantizer.describe(), seed, sample_rows=rows)


# -- profiles -------------------------------------------------------------------


@dataclass
class Profile:
    actions: np.ndarray
    q_values: np.ndarray
    normalized: np.ndarray

    @property
    def flatness(self) -> float:
        """max - min of the normalized NTK across the grid."""
        return float(self.normalized.max() - self.normalized.min())

    @property
    def q_range(self) -> float:
        return float(self.q_values.max() - self.q_values.min())

    def write_csv(self, path) -> None:
        dims = self.actions.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"action_{i}" for i in range(dims)] + ["q_value", "normalized_ntk"])
            for a, q, k in zip(self.actions, self.q_values, self.normalized):
                w.writerow([repr(float(x)) for x in a] + [repr(float(q)), repr(float(k))])


def ntk_profile(params, spec, s, a_ref, quantizer) -> Profile:
    """Q and normalized NTK against ``a_ref`` for every grid action at state ``s``.

    The grid row in the same bin as ``a_ref`` is evaluated at ``a_ref`` itself.
    """
    grid = quantizer.grid().copy()
    grid[quantizer.index_of(a_ref)] = np.ravel(a_ref)
    G = _grads(params, spec, s, grid)
    g_ref = _grad(params, spec, s, a_ref)
    ref = float(g_ref @ g_ref)
    if ref <= 0.0:
        raise DegenerateReferenceError("reference pair has a zero parameter gradient")
    x = np.concatenate([np.broadcast_to(np.ravel(s), (len(grid), np.size(s))), grid], axis=1)
    q = nn.predict(params, spec, x)[:, 0]
    return Profile(grid, q, np.abs(G @ g_ref) / ref)


def densest_state(ds: Dataset, quantizer: StateQuantizer) -> tuple[np.ndarray, np.ndarray, int]:
    """(mean state, mean action, count) of the state cell with the most samples."""
    tr = ds.transitions()
    groups = group_by_cell(tr.states, quantizer)
    # ties broken by cell index so the choice is deterministic
    cell = max(sorted(groups), key=lambda c: len(groups[c]))
    rows = groups[cell]
    return tr.states[rows].mean(axis=0), tr.actions[rows].mean(axis=0), len(rows)
