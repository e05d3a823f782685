"""Normalized-advantage Q-network for a scalar control, in plain numpy.

    Q(x, u) = V(x) - 0.5 * p(x) * (u - mu(x))**2,   p(x) = softplus(l(x)) + P_MIN

A LeakyReLU trunk with dropout feeds one linear layer producing the three
heads ``(V, mu, l)``. Gradients are computed by hand; ``Adam`` applies them
with a per-call learning rate so that the impact tiers can share a single
optimizer state.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

P_MIN = 1e-3
HUBER_DELTA = 1.0

_CKPT_MAGIC = b"IQNF"
_CKPT_VERSION = 1


class NumericalDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class NetworkParams:
    hidden: tuple[int, ...] = (64, 64, 64)
    dropout: float = 0.2
    leaky_slope: float = 0.01
    hidden_init_bound: float = 0.5
    head_init_bound: float = 1.0
    u_max: float = 10.0
    state_dim: int = 4


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def init_params(cfg: NetworkParams, rng: np.random.Generator) -> list[np.ndarray]:
    """Layer-ordered ``[W0, b0, W1, b1, ..., W_head, b_head]``."""
    params = []
    fan_in = cfg.state_dim
    for width in cfg.hidden:
        limit = math.sqrt(6.0 / (fan_in + width))
        w = rng.uniform(-limit, limit, size=(fan_in, width))
        params += [np.clip(w, -cfg.hidden_init_bound, cfg.hidden_init_bound), np.zeros(width)]
        fan_in = width
    w_head = rng.uniform(-cfg.head_init_bound, cfg.head_init_bound, size=(fan_in, 3))
    params += [w_head, np.zeros(3)]
    return params


@dataclass
class Forward:
    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    masks: list[np.ndarray | None]
    v: np.ndarray
    mu: np.ndarray
    l: np.ndarray
    p: np.ndarray


def heads(params: Sequence[np.ndarray], x: np.ndarray, cfg: NetworkParams,
          rng: np.random.Generator | None = None) -> Forward:
    """Forward pass over a batch ``x`` of shape ``(n, state_dim)``.

    Dropout is applied iff ``rng`` is given (training mode).
    """
    h = np.atleast_2d(np.asarray(x, dtype=np.float64))
    inputs, pre, masks = [], [], []
    n_hidden = len(params) // 2 - 1
    keep = 1.0 - cfg.dropout
    for j in range(n_hidden):
        inputs.append(h)
        z = h @ params[2 * j] + params[2 * j + 1]
        pre.append(z)
        h = np.where(z > 0, z, cfg.leaky_slope * z)
        if rng is not None and cfg.dropout > 0:
            mask = (rng.random(h.shape) < keep) / keep
            h = h * mask
            masks.append(mask)
        else:
            masks.append(None)
    inputs.append(h)
    out = h @ params[-2] + params[-1]
    v, mu, l = out[:, 0], out[:, 1], out[:, 2]
    return Forward(inputs, pre, masks, v, mu, l, _softplus(l) + P_MIN)


def q_from_heads(fw: Forward, u: np.ndarray) -> np.ndarray:
    return fw.v - 0.5 * fw.p * (np.asarray(u, dtype=np.float64) - fw.mu) ** 2


def backward(params: Sequence[np.ndarray], fw: Forward, u: np.ndarray, dq: np.ndarray,
             cfg: NetworkParams) -> list[np.ndarray]:
    """Gradient of ``sum(dq * Q)`` w.r.t. every parameter array."""
    diff = np.asarray(u, dtype=np.float64) - fw.mu
    d_out = np.empty((dq.size, 3))
    d_out[:, 0] = dq
    d_out[:, 1] = dq * fw.p * diff
    d_out[:, 2] = dq * (-0.5 * diff**2) * _sigmoid(fw.l)
    grads = [None] * len(params)
    grads[-2] = fw.inputs[-1].T @ d_out
    grads[-1] = d_out.sum(axis=0)
    dh = d_out @ params[-2].T
    for j in range(len(fw.pre) - 1, -1, -1):
        if fw.masks[j] is not None:
            dh = dh * fw.masks[j]
        dz = np.where(fw.pre[j] > 0, dh, cfg.leaky_slope * dh)
        grads[2 * j] = fw.inputs[j].T @ dz
        grads[2 * j + 1] = dz.sum(axis=0)
        if j:
            dh = dz @ params[2 * j].T
    return grads


def huber(delta: np.ndarray, k: float = HUBER_DELTA) -> np.ndarray:
    a = np.abs(delta)
    return np.where(a <= k, 0.5 * delta**2, k * (a - 0.5 * k))


def huber_grad(delta: np.ndarray, k: float = HUBER_DELTA) -> np.ndarray:
    return np.clip(delta, -k, k)


@dataclass
class Adam:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def bind(self, params: Sequence[np.ndarray]) -> "Adam":
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.step_count = 0
        return self

    def step(self, params: list[np.ndarray], grads: Sequence[np.ndarray], lr: float) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1**self.step_count
        corr2 = 1.0 - b2**self.step_count
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)


class NafNetwork:
    """Online and target parameter sets plus the optimizer state."""

    def __init__(self, cfg: NetworkParams = NetworkParams(),
                 rng: np.random.Generator | None = None,
                 params: list[np.ndarray] | None = None):
        self.cfg = cfg
        if params is None:
            params = init_params(cfg, rng if rng is not None else np.random.default_rng())
        self.params = params
        self.target = [p.copy() for p in params]
        self.optimizer = Adam().bind(params)

    # -- evaluation -------------------------------------------------------
    def forward(self, x, training: bool = False, rng: np.random.Generator | None = None,
                target: bool = False) -> Forward:
        if training and rng is None:
            raise ValueError("training mode needs an rng for dropout")
        return heads(self.target if target else self.params, x, self.cfg, rng if training else None)

    def q_value(self, x, u, training: bool = False, rng: np.random.Generator | None = None):
        q = q_from_heads(self.forward(x, training, rng), np.atleast_1d(u))
        return float(q[0]) if np.ndim(x) == 1 else q

    def value(self, x, target: bool = False):
        v = self.forward(x, target=target).v
        return float(v[0]) if np.ndim(x) == 1 else v

    def mu(self, x):
        m = self.forward(x).mu
        return float(m[0]) if np.ndim(x) == 1 else m

    def greedy_control(self, x) -> float:
        u_max = self.cfg.u_max
        return float(np.clip(self.forward(x).mu[0], -u_max, u_max))

    def td_target(self, r, x_next, terminal, gamma: float):
        """``r`` for terminal rows, ``r + gamma * V_target(x_next)`` otherwise."""
        r = np.asarray(r, dtype=np.float64)
        v_next = heads(self.target, x_next, self.cfg).v
        y = np.where(np.asarray(terminal, dtype=bool), r, r + gamma * v_next)
        return float(y[0]) if np.ndim(x_next) == 1 else y

    # -- learning ---------------------------------------------------------
    def loss_and_grads(self, x, u, y, rng: np.random.Generator | None):
        fw = heads(self.params, x, self.cfg, rng)
        q = q_from_heads(fw, u)
        delta = q - y
        loss = float(np.mean(huber(delta)))
        dq = huber_grad(delta) / delta.size
        return loss, backward(self.params, fw, u, dq, self.cfg)

    def update(self, x, u, y, lr, rng: np.random.Generator | None = None,
               per_sample: bool = False) -> float:
        """One Adam step per learning-rate bucket (largest rate first).

        ``lr`` is a scalar or one rate per row. Returns the sample-weighted
        mean Huber loss. With ``per_sample`` each row gets its own step.
        """
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        u = np.atleast_1d(np.asarray(u, dtype=np.float64))
        y = np.atleast_1d(np.asarray(y, dtype=np.float64))
        lr = np.broadcast_to(np.asarray(lr, dtype=np.float64), y.shape)
        if y.size == 0:
            raise ValueError("empty batch")
        if per_sample:
            groups = [np.array([i]) for i in range(y.size)]
        else:
            groups = [np.flatnonzero(lr == rate) for rate in np.unique(lr)[::-1]]
        total = 0.0
        for idx in groups:
            loss, grads = self.loss_and_grads(x[idx], u[idx], y[idx], rng)
            if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads):
                raise NumericalDivergence(
                    f"non-finite loss/gradient (loss={loss}, lr={lr[idx[0]]}, "
                    f"|y|max={np.abs(y).max():.3g}, adam step={self.optimizer.step_count})"
                )
            self.optimizer.step(self.params, grads, float(lr[idx[0]]))
            total += loss * idx.size
        return total / y.size

    def sync_target(self) -> None:
        self.target = [p.copy() for p in self.params]

    # -- persistence ------------------------------------------------------
    def save(self, path: str | Path, extra: dict | None = None) -> None:
        header = {
            "hidden": list(self.cfg.hidden),
            "state_dim": self.cfg.state_dim,
            "dropout": self.cfg.dropout,
            "leaky_slope": self.cfg.leaky_slope,
            "hidden_init_bound": self.cfg.hidden_init_bound,
            "head_init_bound": self.cfg.head_init_bound,
            "u_max": self.cfg.u_max,
            "shapes": [list(p.shape) for p in self.params],
            "adam": {
                "beta1": self.optimizer.beta1, "beta2": self.optimizer.beta2,
                "eps": self.optimizer.eps, "step": self.optimizer.step_count,
            },
            "extra": extra or {},
        }
        blob = json.dumps(header, sort_keys=True).encode()
        arrays = self.params + self.target + self.optimizer.m + self.optimizer.v
        body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
        Path(path).write_bytes(struct.pack("<4sII", _CKPT_MAGIC, _CKPT_VERSION, len(blob)) + blob + body)

    @classmethod
    def load(cls, path: str | Path, expect: NetworkParams | None = None) -> "NafNetwork":
        net, _ = cls.load_with_header(path, expect)
        return net

    @classmethod
    def load_with_header(cls, path: str | Path, expect: NetworkParams | None = None):
        data = Path(path).read_bytes()
        if len(data) < 12:
            raise ValueError(f"{path}: truncated checkpoint")
        magic, version, hlen = struct.unpack_from("<4sII", data)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a network checkpoint")
        if version != _CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(data[12:12 + hlen])
        cfg = NetworkParams(
            hidden=tuple(header["hidden"]), dropout=header["dropout"],
            leaky_slope=header["leaky_slope"], hidden_init_bound=header["hidden_init_bound"],
            head_init_bound=header["head_init_bound"], u_max=header["u_max"],
            state_dim=header["state_dim"],
        )
        if expect is not None and (expect.hidden, expect.state_dim) != (cfg.hidden, cfg.state_dim):
            raise ValueError(
                f"{path}: network shape mismatch, checkpoint has hidden={cfg.hidden} "
                f"state_dim={cfg.state_dim}, expected hidden={expect.hidden} state_dim={expect.state_dim}"
            )
        shapes = [tuple(s) for s in header["shapes"]]
        sizes = [int(np.prod(s)) for s in shapes]
        need = 4 * sum(sizes) * 8
        body = data[12 + hlen:]
        if len(body) != need:
            raise ValueError(f"{path}: expected {need} payload bytes, found {len(body)}")
        flat = np.frombuffer(body, dtype="<f8")
        arrays, off = [], 0
        for _ in range(4):
            for shape, size in zip(shapes, sizes):
                arrays.append(flat[off:off + size].reshape(shape).astype(np.float64))
                off += size
        n = len(shapes)
        net = cls(cfg, params=arrays[:n])
        net.target = arrays[n:2 * n]
        net.optimizer.m = arrays[2 * n:3 * n]
        net.optimizer.v = arrays[3 * n:]
        adam = header["adam"]
        net.optimizer.beta1, net.optimizer.beta2 = adam["beta1"], adam["beta2"]
        net.optimizer.eps, net.optimizer.step_count = adam["eps"], adam["step"]
        return net, header
