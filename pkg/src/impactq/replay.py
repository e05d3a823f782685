"""Experience memory with Temporal Experience Replay sampling.

Sampling is two-stage: a macro-batch is drawn uniformly from the whole
memory, then a mini-batch is drawn from the macro-batch with probabilities
proportional to an exponentially decaying recency priority. The macro-batch
shrinks towards the mini-batch size while exploration is high, so early
training falls back to plain uniform replay.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

XI_FLOOR = 1e-8

_SNAPSHOT_MAGIC = b"IQRM"
_SNAPSHOT_VERSION = 1


class InsufficientExperiences(Exception):
    """Raised when the memory cannot fill a mini-batch yet."""


@dataclass(frozen=True)
class Experience:
    x: np.ndarray
    u_joint: np.ndarray
    r: float
    x_next: np.ndarray
    k_c: int
    eps_c: float
    terminal: bool


@dataclass(frozen=True)
class TerParams:
    macro_batch: int = 256
    mini_batch: int = 80
    xi_temp: float = 0.0

    def __post_init__(self) -> None:
        if not 0 < self.mini_batch < self.macro_batch:
            raise ValueError("need 0 < mini_batch < macro_batch")
        if self.xi_temp < 0:
            raise ValueError("xi_temp must be nonnegative")


def macro_batch_size(B: int, t: int, eps_k: float) -> int:
    """Exploration-coupled macro-batch size ``(B - t)(1 - eps) + t``."""
    raw = (B - t) * (1.0 - eps_k) + t
    return int(min(max(round(raw), t), B))


def temporal_priority(k_now, k_c, xi: float = 0.0):
    """``exp(-(k_now - k_c)) + max(xi, XI_FLOOR)``; vectorizes over ``k_c``."""
    age = np.abs(np.asarray(k_now, dtype=np.float64) - np.asarray(k_c, dtype=np.float64))
    out = np.exp(-age) + max(xi, XI_FLOOR)
    return float(out) if out.ndim == 0 else out


def sampling_probabilities(priorities: np.ndarray) -> np.ndarray:
    p = np.asarray(priorities, dtype=np.float64)
    total = p.sum()
    if not total > 0 or not math.isfinite(total):
        return np.full(p.shape, 1.0 / p.size)
    return p / total


def weighted_draw(probs: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` distinct indices, successively, each step proportional to ``probs``.

    Uses exponential races: the order statistics of ``E_i / p_i`` with
    ``E_i ~ Exp(1)`` have the law of sequential draws without replacement.
    """
    keys = rng.standard_exponential(probs.size)
    with np.errstate(divide="ignore"):
        keys = keys / probs
    if n >= probs.size:
        return np.argsort(keys, kind="stable")
    part = np.argpartition(keys, n - 1)[:n]
    return part[np.argsort(keys[part], kind="stable")]


class ReplayMemory:
    """Bounded FIFO store; oldest experience is evicted first.

    Storage is columnar (one numpy array per field) in a ring buffer; logical
    index 0 is always the oldest surviving experience.
    """

    def __init__(self, capacity: int, n_agents: int = 2, state_dim: int = 4):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.n_agents = n_agents
        self.state_dim = state_dim
        self.x = np.zeros((capacity, state_dim))
        self.u = np.zeros((capacity, n_agents))
        self.r = np.zeros(capacity)
        self.x_next = np.zeros((capacity, state_dim))
        self.k_c = np.zeros(capacity, dtype=np.int64)
        self.eps_c = np.zeros(capacity)
        self.terminal = np.zeros(capacity, dtype=bool)
        self._head = 0  # next write slot
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def _slot(self, i: int | np.ndarray):
        return (self._head - self._size + np.asarray(i)) % self.capacity

    def push(self, exp: Experience) -> None:
        h = self._head
        self.x[h] = exp.x
        self.u[h] = exp.u_joint
        self.r[h] = exp.r
        self.x_next[h] = exp.x_next
        self.k_c[h] = exp.k_c
        self.eps_c[h] = exp.eps_c
        self.terminal[h] = exp.terminal
        self._head = (h + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def __getitem__(self, i: int) -> Experience:
        if not -self._size <= i < self._size:
            raise IndexError(i)
        j = int(self._slot(i % self._size))
        return Experience(
            self.x[j].copy(), self.u[j].copy(), float(self.r[j]), self.x_next[j].copy(),
            int(self.k_c[j]), float(self.eps_c[j]), bool(self.terminal[j]),
        )

    def __iter__(self):
        return (self[i] for i in range(self._size))

    def batch(self, idx: np.ndarray) -> "Batch":
        j = self._slot(idx)
        return Batch(
            self.x[j], self.u[j], self.r[j], self.x_next[j],
            self.k_c[j], self.eps_c[j], self.terminal[j],
        )

    def sample_indices(
        self, params: TerParams, eps_k: float, k_now: int, rng: np.random.Generator
    ) -> np.ndarray:
        t = params.mini_batch
        if self._size < t:
            raise InsufficientExperiences(f"memory holds {self._size} < {t} experiences")
        b_k = min(macro_batch_size(params.macro_batch, t, eps_k), self._size)
        macro = rng.choice(self._size, size=b_k, replace=False)
        if b_k == t:
            return macro
        prio = temporal_priority(k_now, self.k_c[self._slot(macro)], params.xi_temp)
        return macro[weighted_draw(sampling_probabilities(prio), t, rng)]

    def save(self, path: str | Path) -> None:
        order = self._slot(np.arange(self._size))
        records = np.empty(self._size, dtype=_record_dtype(self.n_agents, self.state_dim))
        records["x"] = self.x[order]
        records["u"] = self.u[order]
        records["r"] = self.r[order]
        records["x_next"] = self.x_next[order]
        records["k_c"] = self.k_c[order]
        records["eps_c"] = self.eps_c[order]
        records["terminal"] = self.terminal[order]
        header = struct.pack(
            "<4sIQIIQ", _SNAPSHOT_MAGIC, _SNAPSHOT_VERSION, self.capacity,
            self.n_agents, self.state_dim, self._size,
        )
        Path(path).write_bytes(header + records.tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "ReplayMemory":
        data = Path(path).read_bytes()
        size_h = struct.calcsize("<4sIQIIQ")
        magic, version, capacity, n_agents, state_dim, size = struct.unpack_from("<4sIQIIQ", data)
        if magic != _SNAPSHOT_MAGIC:
            raise ValueError(f"{path}: not a replay snapshot")
        if version != _SNAPSHOT_VERSION:
            raise ValueError(f"{path}: unsupported snapshot version {version}")
        records = np.frombuffer(data, dtype=_record_dtype(n_agents, state_dim), count=size, offset=size_h)
        mem = cls(capacity, n_agents, state_dim)
        mem.x[:size] = records["x"]
        mem.u[:size] = records["u"]
        mem.r[:size] = records["r"]
        mem.x_next[:size] = records["x_next"]
        mem.k_c[:size] = records["k_c"]
        mem.eps_c[:size] = records["eps_c"]
        mem.terminal[:size] = records["terminal"]
        mem._size = size
        mem._head = size % capacity
        return mem


def _record_dtype(n_agents: int, state_dim: int) -> np.dtype:
    return np.dtype([
        ("x", "<f8", (state_dim,)),
        ("u", "<f8", (n_agents,)),
        ("r", "<f8"),
        ("x_next", "<f8", (state_dim,)),
        ("k_c", "<i8"),
        ("eps_c", "<f8"),
        ("terminal", "?"),
    ])


@dataclass(frozen=True)
class Batch:
    x: np.ndarray
    u: np.ndarray
    r: np.ndarray
    x_next: np.ndarray
    k_c: np.ndarray
    eps_c: np.ndarray
    terminal: np.ndarray

    def __len__(self) -> int:
        return len(self.r)


def sample_ter(
    memory: ReplayMemory, params: TerParams, eps_k: float, k_now: int, rng: np.random.Generator
) -> Batch:
    """Two-stage TER mini-batch, rows in draw order."""
    return memory.batch(memory.sample_indices(params, eps_k, k_now, rng))
