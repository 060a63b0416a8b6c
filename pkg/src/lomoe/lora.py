"""Low-rank adapters stacked on a frozen dense weight.

Weights follow the ``(out_features, in_features)`` layout, so a layer maps
``x -> x @ W0.T + sum_t (x @ A_t.T) @ B_t.T`` with ``B_t`` of shape
``(out, r)`` and ``A_t`` of shape ``(r, in)``.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError, StateError


class LoraAdapter:
    """Factor pair ``(B, A)`` whose product is the weight delta."""

    def __init__(self, B, A, expert_id, frozen=False):
        if B.shape[1] != A.shape[0]:
            raise ShapeError(f"B {B.shape} and A {A.shape} disagree on rank")
        self.B = B
        self.A = A
        self.expert_id = int(expert_id)
        self.frozen = frozen

    @property
    def rank(self):
        return self.A.shape[0]

    @property
    def frozen(self):
        return self._frozen

    @frozen.setter
    def frozen(self, value):
        self._frozen = bool(value)
        self.B.requires_grad = not self._frozen
        self.A.requires_grad = not self._frozen

    def delta(self):
        """``B @ A`` accumulated in float64."""
        return self.B.data.astype(np.float64) @ self.A.data.astype(np.float64)

    def parameters(self):
        return [self.B, self.A]

    def __repr__(self):
        return f"LoraAdapter(expert={self.expert_id}, r={self.rank}, frozen={self.frozen})"


def check_rank(d, k, r):
    if not 1 <= r <= min(d, k) / 2:
        raise ConfigError(f"rank {r} outside [1, min({d}, {k})/2]")


def init_adapter(d, k, r, rng, expert_id=1):
    """Zero ``B`` (d x r) and Gaussian ``A`` (r x k) with variance 1/r."""
    check_rank(d, k, r)
    B = T.zeros((d, r))
    A = T.randn((r, k), rng, sigma=1.0 / math.sqrt(r))
    return LoraAdapter(B, A, expert_id)


class LoraLinear:
    """Frozen base weight plus an ordered list of adapters."""

    def __init__(self, weight, name=""):
        self.weight = weight if isinstance(weight, T.Tensor) else T.Tensor(weight)
        self.weight.requires_grad = False
        self.name = name
        self.adapters = []

    @property
    def out_features(self):
        return self.weight.shape[0]

    @property
    def in_features(self):
        return self.weight.shape[1]

    def add_adapter(self, rng, rank, expert_id=None):
        expert_id = len(self.adapters) + 1 if expert_id is None else expert_id
        adapter = init_adapter(self.out_features, self.in_features, rank, rng, expert_id)
        self.append(adapter)
        return adapter

    def append(self, adapter):
        if adapter.B.shape[0] != self.out_features or adapter.A.shape[1] != self.in_features:
            raise ShapeError(f"adapter does not fit {self.weight.shape} layer {self.name}")
        if not adapter.frozen and any(not a.frozen for a in self.adapters):
            raise StateError(f"{self.name}: another adapter is still trainable")
        self.adapters.append(adapter)

    def freeze_all(self):
        for a in self.adapters:
            a.frozen = True

    def parameters(self):
        out = [self.weight]
        for a in self.adapters:
            out.extend(a.parameters())
        return out

    def __call__(self, x, active_upto=None):
        return lora_forward(self, x, active_upto)


def lora_forward(layer, x, active_upto=None):
    """Base path plus the deltas of adapters ``1..active_upto``."""
    n = len(layer.adapters)
    upto = n if active_upto is None else int(active_upto)
    if not 0 <= upto <= n:
        raise ContractError(f"active_upto={upto} outside [0, {n}] for {layer.name}")
    x = T._wrap(x)
    if x.shape[-1] != layer.in_features:
        raise ShapeError(f"{layer.name}: input width {x.shape[-1]} != {layer.in_features}")
    h = T.linear(x, layer.weight)
    for a in layer.adapters[:upto]:
        h = h + T.linear(T.linear(x, a.A), a.B)
    return h


def adapter_forward(layer, x, expert):
    """Base path plus the delta of a single expert (no stacking)."""
    x = T._wrap(x)
    h = T.linear(x, layer.weight)
    if expert == 0:
        return h
    a = layer.adapters[expert - 1]
    return h + T.linear(T.linear(x, a.A), a.B)


def merge_to_dense(layer, upto=None):
    """``W0 + sum_{t<=upto} B_t A_t`` as one dense tensor."""
    n = len(layer.adapters)
    upto = n if upto is None else int(upto)
    if not 0 <= upto <= n:
        raise ContractError(f"upto={upto} outside [0, {n}]")
    if upto == 0:
        return T.Tensor(layer.weight.data.copy())
    w = layer.weight.data.astype(np.float64)
    for a in layer.adapters[:upto]:
        w = w + a.delta()
    return T.Tensor(w.astype(layer.weight.data.dtype))


def _iter_params(obj):
    if isinstance(obj, T.Tensor):
        yield obj
    elif hasattr(obj, "parameters"):
        yield from obj.parameters()
    else:
        for item in obj:
            yield from _iter_params(item)


def trainable_param_count(model):
    return sum(p.size for p in _iter_params(model) if p.requires_grad)


def total_param_count(model):
    return sum(p.size for p in _iter_params(model))


def checksum(tensors):
    """64-bit BLAKE2b digest over the raw bytes of ``tensors``, as hex."""
    h = hashlib.blake2b(digest_size=8)
    for t in tensors:
        arr = t.data if isinstance(t, T.Tensor) else np.asarray(t)
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
