"""Parameter containers and the AdamW optimizer used by every trainable model."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .diffarray import Tensor


class ParamSet:
    """Ordered name -> Tensor registry.

    ``frozen`` names never receive updates; ``no_decay`` names skip weight decay.
    Individual rows can be frozen through ``Tensor.frozen_rows``.
    """

    def __init__(self):
        self.tensors: dict[str, Tensor] = {}
        self.frozen: set[str] = set()
        self.no_decay: set[str] = set()

    def add(self, name: str, value: np.ndarray, *, decay: bool = True) -> Tensor:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.tensors[name] = t
        if not decay:
            self.no_decay.add(name)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self):
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    def freeze(self, names=None) -> None:
        names = self.names() if names is None else names
        for n in names:
            self.frozen.add(n)
            self.tensors[n].requires_grad = False

    def unfreeze(self, names=None) -> None:
        names = self.names() if names is None else names
        for n in names:
            self.frozen.discard(n)
            self.tensors[n].requires_grad = True

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.tensors.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.tensors) ^ set(state)
        if missing:
            raise KeyError(f"parameter names differ: {sorted(missing)}")
        for n, t in self.tensors.items():
            if state[n].shape != t.shape:
                raise ValueError(f"shape mismatch for {n}: {state[n].shape} vs {t.shape}")
            t.data = np.array(state[n], dtype=np.float64)

    def num_values(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


def init_linear(params: ParamSet, name: str, n_in: int, n_out: int, rng: np.random.Generator, scale: float = 1.0, bias: bool = True):
    params.add(f"{name}.w", rng.normal(0.0, scale / math.sqrt(n_in), (n_in, n_out)))
    if bias:
        params.add(f"{name}.b", np.zeros(n_out), decay=False)


def init_norm(params: ParamSet, name: str, width: int):
    params.add(f"{name}.g", np.ones(width), decay=False)
    params.add(f"{name}.b", np.zeros(width), decay=False)


@dataclass
class AdamW:
    """Adam with decoupled weight decay.  Moments are kept per parameter name."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: ParamSet, lr: float | None = None, names=None) -> None:
        """Update every parameter that has a gradient and is not frozen.

        ``names`` further restricts the update to a subset (a stage filter).
        """
        lr = self.lr if lr is None else lr
        self.step_count += 1
        b1c = 1.0 - self.beta1**self.step_count
        b2c = 1.0 - self.beta2**self.step_count
        allowed = None if names is None else set(names)
        for name, p in params.items():
            if name in params.frozen or p.grad is None:
                continue
            if allowed is not None and name not in allowed:
                continue
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            if self.weight_decay and name not in params.no_decay:
                decay = lr * self.weight_decay * p.data
                if p.frozen_rows:
                    decay[list(p.frozen_rows)] = 0.0
                update = update + decay
            if p.frozen_rows:
                update[list(p.frozen_rows)] = 0.0
            p.data = p.data - update

    def state(self) -> dict:
        out = {"step_count": np.array(self.step_count, dtype=np.float64)}
        for n in self.m:
            out[f"m/{n}"] = self.m[n].copy()
            out[f"v/{n}"] = self.v[n].copy()
        return out

    def load_state(self, state: dict) -> None:
        self.step_count = int(state["step_count"])
        self.m = {k[2:]: np.array(v) for k, v in state.items() if k.startswith("m/")}
        self.v = {k[2:]: np.array(v) for k, v in state.items() if k.startswith("v/")}


def lr_at(step: int, base_lr: float, total: int, warmup: int = 0, policy: str = "constant") -> float:
    if warmup and step < warmup:
        return base_lr * (step + 1) / warmup
    if policy == "constant":
        return base_lr
    if policy == "cosine":
        span = max(total - warmup, 1)
        frac = min(max(step - warmup, 0) / span, 1.0)
        return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))
    raise ValueError(f"unknown lr policy {policy!r}")
