"""Trajectory datasets: returns, return-to-go, window sampling, action spread.

The on-disk format ("VCSD" version 1, little-endian) is::

    magic "VCSD" | version u32 | state_dim u32 | action_dim u32 | n_traj u32
    r_star f64 | meta: count u32, then (len u32, utf-8 key, len u32, utf-8 value)*
    per trajectory: length u32 | terminal u8 | states f64[(L+1)*sd]
                    | actions f64[L*ad] | rewards f64[L]
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadMagicError, FormatError, TruncatedFileError, UnsupportedVersionError

DATASET_MAGIC = b"VCSD"
DATASET_VERSION = 1


@dataclass
class Trajectory:
    states: np.ndarray  # (L+1, state_dim)
    actions: np.ndarray  # (L, action_dim)
    rewards: np.ndarray  # (L,)
    terminal: bool = False

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=np.float64))
        self.actions = np.atleast_2d(np.asarray(self.actions, dtype=np.float64))
        self.rewards = np.asarray(self.rewards, dtype=np.float64).reshape(-1)
        L = len(self.rewards)
        if L < 1:
            raise ValueError("a trajectory needs at least one transition")
        if self.states.shape[0] != L + 1 or self.actions.shape[0] != L:
            raise ValueError(
                f"inconsistent lengths: {self.states.shape[0]} states, "
                f"{self.actions.shape[0]} actions, {L} rewards"
            )
        self.terminal = bool(self.terminal)

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def ret(self) -> float:
        """Undiscounted return R(tau)."""
        return float(self.rewards.sum())

    def rtg(self) -> np.ndarray:
        return compute_rtg(self)


def compute_rtg(traj: Trajectory) -> np.ndarray:
    """Undiscounted return-to-go; entry ``t`` sums rewards from ``t`` to the end."""
    return np.cumsum(traj.rewards[::-1])[::-1].copy()


@dataclass
class Dataset:
    trajectories: list[Trajectory]
    state_dim: int
    action_dim: int
    r_star: float | None = None
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for tr in self.trajectories:
            if tr.states.shape[1] != self.state_dim or tr.actions.shape[1] != self.action_dim:
                raise ValueError("trajectory dimensions disagree with the dataset")
        if self.r_star is None:
            self.r_star = self.max_return if self.trajectories else 0.0
        self.meta = {str(k): str(v) for k, v in self.meta.items()}

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def returns(self) -> np.ndarray:
        return np.array([tr.ret for tr in self.trajectories])

    @property
    def max_return(self) -> float:
        return float(self.returns.max())

    @property
    def n_transitions(self) -> int:
        return sum(len(tr) for tr in self.trajectories)

    def transitions(self) -> "Transitions":
        return Transitions.from_dataset(self)


@dataclass
class Transitions:
    """Flat per-step arrays over a whole dataset, for minibatch sampling."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    rtg: np.ndarray
    source_return: np.ndarray
    traj_index: np.ndarray
    step_index: np.ndarray
    offsets: np.ndarray  # start row of each trajectory
    lengths: np.ndarray

    @classmethod
    def from_dataset(cls, ds: Dataset) -> "Transitions":
        if not ds.trajectories:
            raise ValueError("empty dataset")
        cols = {k: [] for k in ("s", "a", "r", "s2", "d", "rtg", "R", "i", "t")}
        for i, tr in enumerate(ds.trajectories):
            L = len(tr)
            cols["s"].append(tr.states[:-1])
            cols["a"].append(tr.actions)
            cols["r"].append(tr.rewards)
            cols["s2"].append(tr.states[1:])
            done = np.zeros(L)
            done[-1] = float(tr.terminal)
            cols["d"].append(done)
            cols["rtg"].append(compute_rtg(tr))
            cols["R"].append(np.full(L, tr.ret))
            cols["i"].append(np.full(L, i))
            cols["t"].append(np.arange(L))
        lengths = np.array([len(tr) for tr in ds.trajectories])
        offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        return cls(
            states=np.concatenate(cols["s"]),
            actions=np.concatenate(cols["a"]),
            rewards=np.concatenate(cols["r"]),
            next_states=np.concatenate(cols["s2"]),
            dones=np.concatenate(cols["d"]),
            rtg=np.concatenate(cols["rtg"]),
            source_return=np.concatenate(cols["R"]),
            traj_index=np.concatenate(cols["i"]),
            step_index=np.concatenate(cols["t"]),
            offsets=offsets,
            lengths=lengths,
        )

    def __len__(self) -> int:
        return len(self.rewards)


# -- sub-trajectories -----------------------------------------------------------


@dataclass
class SubTrajectory:
    """A K-step window, left-padded with zeros where the episode runs out."""

    rtg_window: np.ndarray  # (K,)
    state_window: np.ndarray  # (K, state_dim)
    action_targets: np.ndarray  # (K, action_dim)
    mask: np.ndarray  # (K,) bool, True on real steps
    source_return: float
    traj_index: int
    start: int


def window_at(ds: Dataset, traj_index: int, start: int, K: int) -> SubTrajectory:
    tr = ds.trajectories[traj_index]
    L = len(tr)
    if not 0 <= start < L:
        raise IndexError(f"start {start} outside trajectory of length {L}")
    n = min(K, L - start)
    pad = K - n
    rtg = np.zeros(K)
    states = np.zeros((K, ds.state_dim))
    actions = np.zeros((K, ds.action_dim))
    mask = np.zeros(K, dtype=bool)
    rtg[pad:] = compute_rtg(tr)[start : start + n]
    states[pad:] = tr.states[start : start + n]
    actions[pad:] = tr.actions[start : start + n]
    mask[pad:] = True
    return SubTrajectory(rtg, states, actions, mask, tr.ret, traj_index, start)


def sample_subtrajectory(ds: Dataset, K: int, rng: np.random.Generator) -> SubTrajectory:
    """Uniform trajectory, then uniform start step within it."""
    if K < 1:
        raise ValueError("context length must be at least 1")
    if not ds.trajectories:
        raise ValueError("cannot sample from an empty dataset")
    i = int(rng.integers(len(ds.trajectories)))
    t = int(rng.integers(len(ds.trajectories[i])))
    return window_at(ds, i, t, K)


# -- action spread ------------------------------------------------------------


@dataclass(frozen=True)
class StateQuantizer:
    """Uniform bins per state dimension over ``[lo, hi]``."""

    bins: int
    lo: float
    hi: float

    def cells(self, states: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(states)
        idx = np.floor((states - self.lo) / (self.hi - self.lo) * self.bins).astype(np.int64)
        return np.clip(idx, 0, self.bins - 1)

    def center(self, cell) -> np.ndarray:
        width = (self.hi - self.lo) / self.bins
        return self.lo + (np.asarray(cell, dtype=np.float64) + 0.5) * width


def group_by_cell(states: np.ndarray, quantizer: StateQuantizer) -> dict[tuple, np.ndarray]:
    """Row indices of ``states`` grouped by quantized cell."""
    cells = quantizer.cells(states)
    groups: dict[tuple, list[int]] = {}
    for row, cell in enumerate(map(tuple, cells)):
        groups.setdefault(cell, []).append(row)
    return {k: np.array(v) for k, v in groups.items()}


def mean_pairwise_distance(actions: np.ndarray) -> float:
    """Mean L2 distance over ordered pairs of differing actions (0 if all are equal).

    Pairs with ``a == a_bar`` are left out, which covers self-pairs and keeps
    the value unchanged when every sample is duplicated.
    """
    if len(actions) < 2:
        return 0.0
    diff = actions[:, None, :] - actions[None, :, :]
    dist = np.sqrt((diff**2).sum(-1))
    n_differ = int(np.count_nonzero(dist))
    return float(dist.sum() / n_differ) if n_differ else 0.0


def action_spread(ds: Dataset, quantizer: StateQuantizer) -> float:
    """Average in-cell action spread H(D) over occupied state cells."""
    tr = ds.transitions()
    groups = group_by_cell(tr.states, quantizer)
    if not groups:
        return 0.0
    return float(np.mean([mean_pairwise_distance(tr.actions[rows]) for rows in groups.values()]))


# -- file format --------------------------------------------------------------


def dataset_to_bytes(ds: Dataset) -> bytes:
    out = [DATASET_MAGIC]
    out.append(struct.pack("<IIII", DATASET_VERSION, ds.state_dim, ds.action_dim, len(ds.trajectories)))
    out.append(struct.pack("<d", ds.r_star))
    out.append(struct.pack("<I", len(ds.meta)))
    for k, v in ds.meta.items():
        for s in (k, v):
            raw = s.encode("utf-8")
            out.append(struct.pack("<I", len(raw)) + raw)
    for tr in ds.trajectories:
        out.append(struct.pack("<IB", len(tr), int(tr.terminal)))
        for arr in (tr.states, tr.actions, tr.rewards):
            out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"dataset file truncated at byte {self.pos} (needed {n} more)")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)


def dataset_from_bytes(buf: bytes) -> Dataset:
    rd = _Reader(buf)
    if len(buf) >= 4 and buf[:4] != DATASET_MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {DATASET_MAGIC!r}")
    rd.take(4)
    (version,) = rd.unpack("<I")
    if version != DATASET_VERSION:
        raise UnsupportedVersionError(f"unsupported dataset version {version}")
    sd, ad, n_traj = rd.unpack("<III")
    (r_star,) = rd.unpack("<d")
    (n_meta,) = rd.unpack("<I")
    meta = {}
    for _ in range(n_meta):
        key = rd.take(rd.unpack("<I")[0]).decode("utf-8")
        meta[key] = rd.take(rd.unpack("<I")[0]).decode("utf-8")
    trajs = []
    for _ in range(n_traj):
        L, terminal = rd.unpack("<IB")
        states = rd.floats((L + 1) * sd).reshape(L + 1, sd)
        actions = rd.floats(L * ad).reshape(L, ad)
        rewards = rd.floats(L)
        try:
            trajs.append(Trajectory(states, actions, rewards, bool(terminal)))
        except ValueError as exc:
            raise FormatError(str(exc)) from exc
    if rd.pos != len(buf):
        raise FormatError("trailing bytes after the last trajectory")
    return Dataset(trajs, sd, ad, r_star=r_star, meta=meta)


def save(ds: Dataset, path) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


def load(path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes())


def dataset_hash(ds: Dataset) -> str:
    return hashlib.sha256(dataset_to_bytes(ds)).hexdigest()
