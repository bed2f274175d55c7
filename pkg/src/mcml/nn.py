"""Dense ReLU Q-network, Adam, and a finite-difference gradient checker.

Everything is float64. Parameters are kept as a flat list
``[W0, b0, W1, b1, ...]`` with ``W_i`` of shape ``(fan_in, fan_out)``.

Checkpoint layout (all little-endian)::

    uint64            number of layer sizes K
    uint64[K]         layer sizes, input first
    float64[...]      W0 (row-major), b0, W1, b1, ...
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .env import Config, SystemState

log = logging.getLogger(__name__)

HIDDEN = (32, 32, 32)


def encode_state(s: SystemState, cfg: Config) -> np.ndarray:
    """``[f1/F1, c1/C1, ..., fN/FN, cN/CN]``."""
    out = np.empty(2 * cfg.num_devices)
    for n, dev in enumerate(s.devices):
        out[2 * n] = dev.cpu_shares / cfg.max_cpu_shares[n]
        out[2 * n + 1] = dev.energy_units / cfg.energy_capacity[n]
    return out


def encode_state_table(cfg: Config, state_cpu: np.ndarray, state_energy: np.ndarray) -> np.ndarray:
    """Vectorised :func:`encode_state` over rows of per-device (cpu, energy)."""
    out = np.empty((state_cpu.shape[0], 2 * cfg.num_devices))
    out[:, 0::2] = state_cpu / np.asarray(cfg.max_cpu_shares)
    out[:, 1::2] = state_energy / np.asarray(cfg.energy_capacity)
    return out


class QNetwork:
    def __init__(self, sizes, params):
        self.sizes = tuple(int(s) for s in sizes)
        if len(self.sizes) < 2:
            raise ValueError("need at least an input and an output layer")
        if len(params) != 2 * (len(self.sizes) - 1):
            raise ValueError("parameter list does not match layer sizes")
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            if params[2 * i].shape != (fan_in, fan_out) or params[2 * i + 1].shape != (fan_out,):
                raise ValueError(f"layer {i} parameter shapes inconsistent with sizes")
        self.params = [np.asarray(p, dtype=np.float64) for p in params]

    @classmethod
    def init(cls, sizes, rng: np.random.Generator, bias_bound: float = 0.0) -> "QNetwork":
        """Uniform(+-sqrt(6 / (fan_in + fan_out))) weights; biases zero unless ``bias_bound``."""
        params = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            if bias_bound:
                params.append(rng.uniform(-bias_bound, bias_bound, size=fan_out))
            else:
                params.append(np.zeros(fan_out))
        return cls(sizes, params)

    @classmethod
    def for_config(cls, cfg: Config, rng: np.random.Generator, hidden=HIDDEN) -> "QNetwork":
        return cls.init((2 * cfg.num_devices, *hidden, cfg.grid_size), rng)

    @property
    def num_layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params)

    def copy(self) -> "QNetwork":
        return QNetwork(self.sizes, [p.copy() for p in self.params])

    def load_from(self, other: "QNetwork"):
        """Overwrite parameters in place with ``other``'s."""
        for dst, src in zip(self.params, other.params):
            dst[...] = src

    def _hidden(self, x):
        acts = [x]
        h = x
        for i in range(self.num_layers - 1):
            h = np.maximum(h @ self.params[2 * i] + self.params[2 * i + 1], 0.0)
            acts.append(h)
        return acts

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.sizes[0]:
            raise ValueError(f"input has {x.shape[-1]} features, network expects {self.sizes[0]}")
        h = self._hidden(x)[-1]
        return h @ self.params[-2] + self.params[-1]

    __call__ = forward

    def all_finite(self) -> bool:
        return all(np.isfinite(p).all() for p in self.params)

    def save(self, path):
        header = np.array([len(self.sizes), *self.sizes], dtype="<u8")
        with open(path, "wb") as fh:
            fh.write(header.tobytes())
            for p in self.params:
                fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "QNetwork":
        raw = open(path, "rb").read()
        k = int(np.frombuffer(raw[:8], dtype="<u8")[0])
        sizes = np.frombuffer(raw[8 : 8 * (k + 1)], dtype="<u8").astype(int)
        flat = np.frombuffer(raw[8 * (k + 1) :], dtype="<f8")
        params, pos = [], 0
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            params.append(flat[pos : pos + fan_in * fan_out].reshape(fan_in, fan_out).copy())
            pos += fan_in * fan_out
            params.append(flat[pos : pos + fan_out].copy())
            pos += fan_out
        if pos != flat.size:
            raise ValueError("checkpoint size does not match its header")
        return cls(sizes, params)


def selected_loss(net: QNetwork, x, actions, targets) -> float:
    q = net.forward(x)[np.arange(len(actions)), actions]
    return float(np.mean((np.asarray(targets) - q) ** 2))


def backward_selected(net: QNetwork, x, actions, targets):
    """Loss and gradients of ``mean_k (y_k - Q(x_k)[a_k])**2``.

    Only the output unit of each sample's action receives gradient.
    Returns ``(loss, grads)`` with ``grads`` aligned to ``net.params``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    actions = np.asarray(actions, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.float64)
    batch = x.shape[0]
    if batch == 0:
        raise ValueError("empty batch")
    n_out = net.sizes[-1]
    if actions.min() < 0 or actions.max() >= n_out:
        raise ValueError("action index out of range")

    acts = net._hidden(x)
    h = acts[-1]
    w_out, b_out = net.params[-2], net.params[-1]
    q_sel = np.einsum("ij,ji->i", h, w_out[:, actions]) + b_out[actions]
    err = q_sel - targets
    loss = float(np.mean(err**2))
    g = 2.0 * err / batch

    grads = [None] * len(net.params)
    gw = np.zeros_like(w_out)
    np.add.at(gw.T, actions, g[:, None] * h)
    gb = np.zeros_like(b_out)
    np.add.at(gb, actions, g)
    grads[-2], grads[-1] = gw, gb

    delta = g[:, None] * w_out[:, actions].T
    for i in range(net.num_layers - 2, -1, -1):
        delta = delta * (acts[i + 1] > 0)
        grads[2 * i] = acts[i].T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        if i:
            delta = delta @ net.params[2 * i].T
    return loss, grads


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_network(cls, net: QNetwork, **hyper) -> "AdamState":
        return cls(
            m=[np.zeros_like(p) for p in net.params],
            v=[np.zeros_like(p) for p in net.params],
            **hyper,
        )


def adam_step(net: QNetwork, grads, opt: AdamState) -> QNetwork:
    """One bias-corrected Adam update, applied to ``net`` in place."""
    if len(grads) != len(net.params):
        raise ValueError("gradient list does not match parameters")
    if not opt.m:
        opt.m = [np.zeros_like(p) for p in net.params]
        opt.v = [np.zeros_like(p) for p in net.params]
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1**opt.step
    c2 = 1.0 - b2**opt.step
    for p, g, m, v in zip(net.params, grads, opt.m, opt.v):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        kernels.adam_update(p, np.ascontiguousarray(g), m, v, opt.lr, b1, b2, c1, c2, opt.eps)
    return net


def grad_check(net: QNetwork, batch, tolerance: float = 1e-4, h: float = 1e-5, gradient=None) -> float:
    """Max relative error of the analytic gradient against central differences.

    ``gradient`` overrides the analytic gradient (used for negative controls).
    Relative error is ``|a - n| / max(|a| + |n|, 1e-8)`` per parameter.
    """
    x, actions, targets = batch
    if gradient is None:
        _, gradient = backward_selected(net, x, actions, targets)
    worst = 0.0
    for p, g in zip(net.params, gradient):
        flat, gflat = p.reshape(-1), np.asarray(g).reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = selected_loss(net, x, actions, targets)
            flat[j] = orig - h
            down = selected_loss(net, x, actions, targets)
            flat[j] = orig
            num = (up - down) / (2 * h)
            err = abs(num - gflat[j]) / max(abs(num) + abs(gflat[j]), 1e-8)
            worst = max(worst, err)
    if worst >= tolerance:
        log.warning("gradient check: max relative error %.3g >= %.3g", worst, tolerance)
    return worst
