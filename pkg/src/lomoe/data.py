"""Synthetic segmentation tasks, label-space bookkeeping and on-disk datasets.

Each task has a modality profile (background intensity law, noise, texture)
and a shape vocabulary mapping its foreground classes to geometry
generators. Generation is a pure function of the :class:`TaskSpec`.

On-disk layout of a dataset directory::

    manifest.json          {"format": "lmoe-dataset", "version": 1,
                            "task": ..., "classes": [...],
                            "samples": [{"image": "...", "mask": "..."}]}
    <name>.img             b"LMOT f32 H W\\n" + little-endian float32 pixels
    <name>.msk             b"LMOT u16 H W\\n" + little-endian uint16 class ids
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, ParseError, StateError, ValidationError
from .tensor import Rng

log = logging.getLogger(__name__)

MAGIC = b"LMOT"
_DTYPES = {"f32": np.dtype("<f4"), "u16": np.dtype("<u2")}


@dataclass
class Sample:
    image: np.ndarray
    mask: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (self.image.shape == other.image.shape
                and np.array_equal(self.image, other.image)
                and np.array_equal(self.mask, other.mask))


@dataclass(frozen=True)
class Modality:
    bg_mean: float
    bg_jitter: float
    noise: str
    noise_level: float
    texture: str
    texture_level: float


MODALITIES = {
    # dark cine-MR-like frame with a ring around a bright cavity
    "cardiac": Modality(0.12, 0.02, "gaussian", 0.03, "none", 0.0),
    # bright dermoscopy-like field with smooth shading and a dark lesion
    "dermoscopy": Modality(0.74, 0.02, "gaussian", 0.02, "smooth", 0.06),
    # mid-grey CT-like slice with speckle and brighter infection patches
    "ct": Modality(0.42, 0.015, "speckle", 0.05, "smooth", 0.03),
    # abdominal CT-like slice holding several organs
    "abdomen": Modality(0.30, 0.015, "gaussian", 0.03, "smooth", 0.02),
}

# shape kind and intensity for each class slot of a profile
VOCABULARIES = {
    "cardiac": [("ring", 0.45), ("cavity", 0.85)],
    "dermoscopy": [("blob", 0.38)],
    "ct": [("patches", 0.62)],
    "abdomen": [("organ_left", 0.72), ("organ_right", 0.55), ("organ_top", 0.92), ("organ_bottom", 0.48)],
    "tumor": [("dark_blobs", 0.06)],
}


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    classes: tuple
    profile: str = "cardiac"
    modality: str | None = None
    shapes: tuple | None = None
    n_train: int = 200
    n_val: int = 0
    n_test: int = 50
    image_size: int = 32
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(int(c) for c in self.classes))
        if 0 in self.classes:
            raise ConfigError(f"task {self.task_id}: class 0 is reserved for background")
        if self.modality_profile is None:
            raise ConfigError(f"task {self.task_id}: unknown modality {self.modality or self.profile!r}")
        shapes = self.shape_vocabulary
        if len(shapes) > len(self.classes):
            raise ConfigError(f"task {self.task_id}: {len(shapes)} shapes for {len(self.classes)} classes")

    @property
    def modality_profile(self):
        key = self.modality or ("abdomen" if self.profile == "tumor" else self.profile)
        return MODALITIES.get(key)

    @property
    def shape_vocabulary(self):
        if self.shapes is not None:
            return tuple(tuple(s) for s in self.shapes)
        vocab = VOCABULARIES.get(self.profile)
        if vocab is None:
            raise ConfigError(f"task {self.task_id}: unknown profile {self.profile!r}")
        return tuple(vocab[: len(self.classes)])

    def split_size(self, split):
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}[split]


# ------------------------------------------------------------ generators


def _grid(n):
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    return yy + 0.5, xx + 0.5


def _smooth_field(rng, n, cells=4):
    coarse = rng.normal((cells + 1, cells + 1))
    t = np.linspace(0, cells, n)
    i0 = np.minimum(np.floor(t).astype(int), cells - 1)
    f = t - i0
    rows = coarse[i0] * (1 - f)[:, None] + coarse[i0 + 1] * f[:, None]
    return rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]


def _blob(yy, xx, cy, cx, r0, rng, wobble=0.25):
    theta = np.arctan2(yy - cy, xx - cx)
    a = rng.uniform(3) * wobble
    ph = rng.uniform(3) * 2 * np.pi
    r = r0 * (1 + a[0] * np.cos(2 * theta + ph[0]) + a[1] * np.cos(3 * theta + ph[1]) * 0.6
              + a[2] * np.cos(theta + ph[2]) * 0.5)
    return np.hypot(yy - cy, xx - cx) <= r


def _ellipse(yy, xx, cy, cx, ay, ax, angle):
    c, s = math.cos(angle), math.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = (c * dx + s * dy) / ax
    v = (-s * dx + c * dy) / ay
    return u * u + v * v <= 1.0


def _draw_shapes(kinds, n, rng):
    """Return one boolean mask per class slot."""
    yy, xx = _grid(n)
    s = n / 32.0
    out = []
    centre = None
    for kind in kinds:
        j = rng.uniform(4)
        if kind in ("ring", "cavity"):
            if centre is None:
                centre = (n / 2 + (j[0] - 0.5) * 8 * s, n / 2 + (j[1] - 0.5) * 8 * s,
                          (4.0 + 2.0 * j[2]) * s, (2.5 + 1.0 * j[3]) * s)
            cy, cx, r_in, width = centre
            d = np.hypot(yy - cy, xx - cx)
            out.append((d > r_in) & (d <= r_in + width) if kind == "ring" else d <= r_in)
        elif kind == "blob":
            cy = n / 2 + (j[0] - 0.5) * 10 * s
            cx = n / 2 + (j[1] - 0.5) * 10 * s
            out.append(_blob(yy, xx, cy, cx, (5.0 + 3.0 * j[2]) * s, rng))
        elif kind == "patches":
            m = np.zeros((n, n), dtype=bool)
            for _ in range(2 + int(j[0] * 2)):
                p = rng.uniform(4)
                m |= _ellipse(yy, xx, 5 * s + p[0] * 22 * s, 5 * s + p[1] * 22 * s,
                              (2.5 + 2.5 * p[2]) * s, (3.0 + 3.0 * p[3]) * s, p[2] * np.pi)
            out.append(m)
        elif kind == "organ_left":
            out.append(_ellipse(yy, xx, (14 + 4 * j[0]) * s, (9 + 2 * j[1]) * s, (6 + 2 * j[2]) * s,
                                (4 + j[3]) * s, 0.3))
        elif kind == "organ_right":
            out.append(_ellipse(yy, xx, (16 + 4 * j[0]) * s, (23 + 2 * j[1]) * s, (4 + 1.5 * j[2]) * s,
                                (3 + j[3]) * s, -0.4))
        elif kind == "organ_top":
            cy, cx, h = (5 + 2 * j[0]) * s, (14 + 4 * j[1]) * s, (2 + j[2]) * s
            out.append((np.abs(yy - cy) <= h) & (np.abs(xx - cx) <= h + 1.5 * s))
        elif kind == "organ_bottom":
            out.append(np.hypot(yy - (26 + 2 * j[0]) * s, xx - (15 + 4 * j[1]) * s) <= (2.5 + 1.0 * j[2]) * s)
        elif kind == "dark_blobs":
            m = np.zeros((n, n), dtype=bool)
            for _ in range(2 + int(j[0] * 2)):
                p = rng.uniform(3)
                m |= _blob(yy, xx, 7 * s + p[0] * 18 * s, 7 * s + p[1] * 18 * s, (3.5 + 2.0 * p[2]) * s, rng)
            out.append(m)
        else:
            raise ConfigError(f"unknown shape kind {kind!r}")
    return out


def make_sample(spec, rng):
    n = spec.image_size
    mod = spec.modality_profile
    kinds = spec.shape_vocabulary
    img = np.full((n, n), mod.bg_mean + mod.bg_jitter * rng.normal(()))
    if mod.texture == "smooth":
        img += mod.texture_level * _smooth_field(rng, n)
    mask = np.zeros((n, n), dtype=np.uint16)
    regions = _draw_shapes([k for k, _ in kinds], n, rng)
    for (kind, level), region, cls in zip(kinds, regions, spec.classes):
        jitter = 0.03 * rng.normal(())
        img[region] = level + jitter
        mask[region] = cls
    if mod.texture == "smooth":
        img += 0.5 * mod.texture_level * _smooth_field(rng, n, cells=8)
    if mod.noise == "gaussian":
        img += mod.noise_level * rng.normal((n, n))
    elif mod.noise == "speckle":
        img *= 1.0 + mod.noise_level * 2 * rng.normal((n, n))
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return Sample(img, mask)


def gen_task_dataset(spec, split="train"):
    """Deterministic list of samples for one split of ``spec``."""
    if split not in ("train", "val", "test"):
        raise ContractError(f"unknown split {split!r}")
    rng = Rng(spec.seed).spawn("task", spec.task_id, split)
    return [make_sample(spec, rng) for _ in range(spec.split_size(split))]


def gen_splits(spec):
    return {s: gen_task_dataset(spec, s) for s in ("train", "val", "test")}


def stack(samples):
    """Batch arrays ``(images[B,H,W], masks[B,H,W])``."""
    if not samples:
        raise ContractError("empty sample list")
    return (np.stack([s.image for s in samples]).astype(np.float32),
            np.stack([s.mask for s in samples]).astype(np.int64))


# -------------------------------------------------------------- label space


def accumulate_labels(prev, new):
    """``Y^t = Y^{t-1} | C^t`` keeping insertion order; background may repeat."""
    prev = [int(c) for c in prev]
    out = list(prev)
    seen = set(prev)
    for c in new:
        c = int(c)
        if c in seen:
            if c == 0:
                continue
            raise ConfigError(f"class id {c} already belongs to an earlier step")
        seen.add(c)
        out.append(c)
    return out


# ------------------------------------------------------------------ disk io


def write_array(path, arr, kind):
    dt = _DTYPES[kind]
    arr = np.ascontiguousarray(arr, dtype=dt)
    header = f"{MAGIC.decode()} {kind} {' '.join(map(str, arr.shape))}\n".encode()
    Path(path).write_bytes(header + arr.tobytes())


def read_array(path):
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0 or not raw.startswith(MAGIC + b" "):
        raise ParseError("missing LMOT header", path=path, offset=0)
    parts = raw[:nl].decode("ascii", "replace").split()
    if len(parts) < 2 or parts[1] not in _DTYPES:
        raise ParseError(f"bad dtype in header {raw[:nl]!r}", path=path, offset=0)
    try:
        shape = tuple(int(p) for p in parts[2:])
    except ValueError:
        raise ParseError(f"bad shape in header {raw[:nl]!r}", path=path, offset=0) from None
    dt = _DTYPES[parts[1]]
    need = int(np.prod(shape)) * dt.itemsize
    body = raw[nl + 1:]
    if len(body) != need:
        raise ParseError(f"expected {need} payload bytes, found {len(body)}", path=path, offset=nl + 1)
    return np.frombuffer(body, dtype=dt).reshape(shape).copy()


def save_folder_dataset(path, samples, classes, task=None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        img_name, msk_name = f"{i:05d}.img", f"{i:05d}.msk"
        write_array(path / img_name, s.image, "f32")
        write_array(path / msk_name, s.mask, "u16")
        entries.append({"image": img_name, "mask": msk_name})
    manifest = {"format": "lmoe-dataset", "version": 1, "task": task,
                "classes": [int(c) for c in classes], "samples": entries}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def read_manifest(path):
    mpath = Path(path) / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"manifest is not valid JSON: {exc.msg}", path=mpath, offset=exc.pos) from None
    if manifest.get("format") != "lmoe-dataset":
        raise ParseError("manifest format is not 'lmoe-dataset'", path=mpath)
    return manifest


def load_folder_dataset(path, classes=None):
    """Read a dataset directory; mask ids must lie in ``{0} | classes``."""
    path = Path(path)
    if not (path / "manifest.json").exists():
        if path.is_dir() and not any(path.iterdir()):
            log.warning("dataset directory %s is empty", path)
            return []
        raise ParseError("missing manifest.json", path=path)
    manifest = read_manifest(path)
    declared = [int(c) for c in manifest.get("classes", [])]
    if classes is not None and sorted(map(int, classes)) != sorted(declared):
        raise ValidationError(f"{path}: dataset declares classes {declared}, expected {sorted(classes)}")
    allowed = set(declared) | {0}
    out = []
    for entry in manifest.get("samples", []):
        img = read_array(path / entry["image"]).astype(np.float32)
        msk = read_array(path / entry["mask"])
        if img.ndim != 2 or img.shape != msk.shape:
            raise ParseError(f"image {img.shape} and mask {msk.shape} disagree", path=path / entry["mask"])
        bad = sorted(set(np.unique(msk).tolist()) - allowed)
        if bad:
            raise ValidationError(f"{path / entry['mask']}: label id {bad[0]} not in declared classes {declared}")
        out.append(Sample(img, msk))
    return out


# -------------------------------------------------------------- data access


class StepLoader:
    """Training-batch iterator over one step's data with an access log."""

    def __init__(self, step, task_id, samples, batch_size, rng, log_sink):
        self.step = step
        self.task_id = task_id
        self.samples = samples
        self.batch_size = batch_size
        self.rng = rng
        self._log = log_sink

    def epoch(self):
        order = self.rng.permutation(len(self.samples))
        for i in range(0, len(order), self.batch_size):
            idx = order[i:i + self.batch_size]
            for j in idx:
                self._log.append((self.step, self.task_id, int(j)))
            yield stack([self.samples[j] for j in idx])


@dataclass
class DataVault:
    """Holds every task's data and hands out training access one step at a time.

    Once a step is closed its training split can no longer be requested, so
    later steps cannot see earlier datasets. Test splits stay readable for
    evaluation.
    """

    train: dict = field(default_factory=dict)
    test: dict = field(default_factory=dict)
    closed: set = field(default_factory=set)
    access_log: list = field(default_factory=list)

    def add(self, task_id, train, test):
        self.train[task_id] = train
        self.test[task_id] = test

    def loader(self, step, task_id, batch_size, rng):
        if task_id in self.closed:
            raise StateError(f"training data of completed task {task_id!r} is no longer accessible")
        return StepLoader(step, task_id, self.train[task_id], batch_size, rng, self.access_log)

    def train_samples(self, task_id):
        if task_id in self.closed:
            raise StateError(f"training data of completed task {task_id!r} is no longer accessible")
        return self.train[task_id]

    def close(self, task_id):
        self.closed.add(task_id)

    def tasks_seen_in_step(self, step):
        return {t for s, t, _ in self.access_log if s == step}
