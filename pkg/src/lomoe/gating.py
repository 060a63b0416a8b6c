"""Continual-learning control: expert registration, task matching, gating.

Task level: every task owns one expert in the cumulative stack. At test time
an image is matched against per-task support centroids (cosine similarity of
hand-crafted features) and evaluated with that task's stack prefix and head.

Class level: experts are mixed per token by language-guided gate weights;
see :func:`lomoe.model.class_gate_weights` and :func:`lomoe.model.top1_route`.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, StateError
from .model import class_gate_weights, top1_route  # noqa: F401  (re-exported)

SUPPORT_SHOTS = 8


# -------------------------------------------------------------- embeddings


class HashEmbeddingProvider:
    """Deterministic text embedding: SHA-256 of the text seeds a Gaussian draw."""

    kind = "deterministic-hash"

    def __init__(self, dim=32):
        self.dim = int(dim)

    def embed(self, text):
        if not isinstance(text, str) or not text:
            raise ConfigError("text prompt must be a non-empty string")
        seed = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")
        v = T.Rng(seed, stream=self.dim).normal((self.dim,))
        return (v / np.linalg.norm(v)).astype(np.float32)

    def describe(self):
        return {"kind": self.kind, "dim": self.dim}


class FileEmbeddingProvider:
    """Embeddings looked up in a JSON file ``{text: [floats, ...]}``."""

    kind = "file-loaded"

    def __init__(self, path, dim=None):
        self.path = str(path)
        try:
            table = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read embedding file {path}: {exc}") from None
        self.table = {k: np.asarray(v, dtype=np.float64) for k, v in table.items()}
        dims = {v.shape for v in self.table.values()}
        if len(dims) > 1:
            raise ConfigError(f"embedding file {path} mixes dimensions {sorted(dims)}")
        self.dim = int(dim if dim is not None else (dims.pop()[0] if dims else 0))

    def embed(self, text):
        if text not in self.table:
            raise ConfigError(f"no embedding for prompt {text[:40]!r} in {self.path}")
        v = self.table[text]
        if v.shape != (self.dim,):
            raise ConfigError(f"embedding for {text[:40]!r} has shape {v.shape}, expected ({self.dim},)")
        n = np.linalg.norm(v)
        if not np.isfinite(n) or n == 0:
            raise ConfigError(f"embedding for {text[:40]!r} is degenerate")
        return (v / n).astype(np.float32)

    def describe(self):
        return {"kind": self.kind, "dim": self.dim, "path": self.path}


def make_provider(kind="deterministic-hash", dim=32, path=None):
    if kind == "deterministic-hash":
        return HashEmbeddingProvider(dim)
    if kind == "file-loaded":
        if path is None:
            raise ConfigError("file-loaded embedding provider needs a path")
        return FileEmbeddingProvider(path, dim)
    raise ConfigError(f"unknown embedding provider {kind!r}")


# -------------------------------------------------------- task features


def extract_features(image, bins=64):
    """Block-mean pyramid (1x1, 2x2, 4x4) plus an intensity histogram, unit norm."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=0)
    h, w = img.shape
    parts = []
    for g in (1, 2, 4):
        parts.append(img[: h - h % g, : w - w % g].reshape(g, h // g, g, w // g).mean(axis=(1, 3)).ravel())
    hist, _ = np.histogram(np.clip(img, 0.0, 1.0), bins=bins, range=(0.0, 1.0))
    parts.append(hist / img.size)
    f = np.concatenate(parts)
    return f / np.linalg.norm(f)


@dataclass
class TaskEntry:
    task_id: str
    expert: int
    centroid: np.ndarray
    classes: list
    support: list = field(default_factory=list)


class TaskRegistry:
    """Per-task expert index, support centroid and label set."""

    def __init__(self):
        self.entries = []

    @property
    def step(self):
        return len(self.entries)

    def register(self, task_id, expert, support_images, classes, extractor=extract_features, support=()):
        if expert != self.step + 1:
            raise StateError(f"expert {expert} registered out of order (expected {self.step + 1})")
        feats = np.stack([extractor(im) for im in support_images])
        c = feats.mean(axis=0)
        entry = TaskEntry(str(task_id), int(expert), c / np.linalg.norm(c), [int(x) for x in classes],
                          [int(i) for i in support])
        self.entries.append(entry)
        return entry

    def entry(self, expert):
        return self.entries[expert - 1]

    def by_task(self, task_id):
        for e in self.entries:
            if e.task_id == task_id:
                return e
        raise KeyError(task_id)

    def to_dict(self):
        return [{"task_id": e.task_id, "expert": e.expert, "centroid": e.centroid.tolist(),
                 "classes": e.classes, "support": e.support} for e in self.entries]

    @classmethod
    def from_dict(cls, items):
        reg = cls()
        for d in items:
            reg.entries.append(TaskEntry(d["task_id"], int(d["expert"]), np.asarray(d["centroid"], dtype=np.float64),
                                         [int(c) for c in d["classes"]], list(d.get("support", []))))
        return reg


def select_support(n_samples, rng, shots=SUPPORT_SHOTS):
    """Indices of a random ``shots``-image support set."""
    return sorted(int(i) for i in rng.permutation(n_samples)[:shots])


def classify_task(image, registry, extractor=extract_features):
    """Expert index of the task whose centroid is most cosine-similar."""
    if not registry.entries:
        raise StateError("task registry is empty")
    f = extractor(image)
    sims = np.array([float(f @ e.centroid) for e in registry.entries])
    return registry.entries[int(np.argmax(sims))].expert


def add_expert(model, classes, rng, registry=None, tau=None, prompt=None, warm_start=False):
    """Freeze everything, then append a fresh zero-delta expert.

    Returns the new expert id. With ``warm_start`` the new adapters start
    as copies of the previous expert's factors instead of ``B = 0``.
    """
    if getattr(model, "training_step_active", False):
        raise StateError("add_expert called while a training step is running")
    if registry is not None and registry.step != model.num_experts and model.cfg.mode == "task":
        raise StateError(f"registry has {registry.step} tasks but model has {model.num_experts} experts")
    model.freeze_all()
    e = model.attach_expert(classes, rng, tau=tau, prompt=prompt)
    if warm_start and e > 1:
        for lin in model.adapted_linears():
            ads = {a.expert_id: a for a in lin.adapters}
            if e in ads and e - 1 in ads:
                ads[e].B.data = ads[e - 1].B.data.copy()
                ads[e].A.data = ads[e - 1].A.data.copy()
    return e


def route_task_inference(images, registry, model, extractor=extract_features):
    """Classify each image's task, then segment it with that task's expert.

    Returns ``(masks, experts)``; masks carry global class ids of the chosen
    task's label set.
    """
    images = np.asarray(images)
    single = images.ndim == 2
    if single:
        images = images[None]
    experts = np.array([classify_task(im, registry, extractor) for im in images])
    masks = np.zeros(images.shape, dtype=np.int64)
    for e in np.unique(experts):
        idx = np.flatnonzero(experts == e)
        masks[idx] = model.predict(images[idx], upto=int(e))
    return (masks[0], int(experts[0])) if single else (masks, experts)
