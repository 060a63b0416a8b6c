"""Self-describing binary checkpoint container.

Layout (all integers little-endian)::

    0   4  magic b"LMOE"
    4   4  uint32 format version
    8   8  uint64 metadata length M
    16  M  metadata, UTF-8 JSON with sorted keys
    ..     tensor section: float32 row-major payloads in metadata order
    ..  4  b"LEND"
    ..  8  BLAKE2b-64 digest of every preceding byte

The metadata holds the architecture, expert list with frozen flags, label
sets, task registry, prompts, RNG state, training step and a table of
``{name, shape, offset, nbytes}`` entries locating each tensor relative to
the start of the tensor section.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ParseError
from .gating import TaskRegistry
from .model import ModelConfig, SegBackbone

MAGIC = b"LMOE"
TRAILER = b"LEND"
VERSION = 1
_HEAD = struct.Struct("<4sIQ")


def _expert_records(model):
    recs = []
    for e, head in enumerate(model.heads, start=1):
        ads = [a for lin in model.adapted_linears() for a in lin.adapters if a.expert_id == e]
        recs.append({
            "id": e,
            "classes": [c for c in head.classes],
            "prompt": model.prompts[e - 1] if e - 1 < len(model.prompts) else None,
            "adapters": bool(ads),
            "attn": any(a.expert_id == e for lin in model.blocks[0].attn.linears() for a in lin.adapters),
            "frozen": bool(head.frozen and all(a.frozen for a in ads)),
        })
    return recs


def named_tensors(model):
    out = list(model.named_tensors())
    for e, tau in enumerate(model.taus, start=1):
        out.append((f"text.tau{e}", T.Tensor(np.asarray(tau, dtype=np.float32))))
    return out


def to_bytes(model, registry=None, extra=None):
    tensors = named_tensors(model)
    table, payload, offset = [], [], 0
    for name, t in tensors:
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        payload.append(arr.tobytes())
        offset += arr.nbytes
    meta = {
        "format": "lmoe-checkpoint",
        "model": model.cfg.to_dict(),
        "experts": _expert_records(model),
        "frozen": {name: not t.requires_grad for name, t in model.named_tensors()},
        "merged_upto": model.merged_upto,
        "registry": registry.to_dict() if registry is not None else [],
        "tensors": table,
    }
    meta.update(extra or {})
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = _HEAD.pack(MAGIC, VERSION, len(blob)) + blob + b"".join(payload) + TRAILER
    return body + hashlib.blake2b(body, digest_size=8).digest()


def save_checkpoint(path, model, registry=None, extra=None):
    data = to_bytes(model, registry, extra)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(data)
    return data


def parse(data, path=None):
    """Validate framing and return ``(metadata, tensor dict)``."""
    if len(data) < _HEAD.size:
        raise ParseError("file shorter than header", path=path, offset=len(data))
    magic, version, mlen = _HEAD.unpack_from(data, 0)
    if magic != MAGIC:
        raise ParseError(f"bad magic {magic!r}", path=path, offset=0)
    if version != VERSION:
        raise ParseError(f"unsupported format version {version}", path=path, offset=4)
    start = _HEAD.size
    if start + mlen > len(data):
        raise ParseError(f"metadata length {mlen} runs past end of file", path=path, offset=8)
    try:
        meta = json.loads(data[start:start + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        pos = getattr(exc, "pos", getattr(exc, "start", 0))
        raise ParseError(f"metadata is not valid JSON: {exc}", path=path, offset=start + pos) from None
    base = start + mlen
    tensors = {}
    end = base
    for entry in meta.get("tensors", []):
        off = base + int(entry["offset"])
        n = int(entry["nbytes"])
        shape = tuple(entry["shape"])
        if n != 4 * int(np.prod(shape)) or off + n > len(data):
            raise ParseError(f"tensor {entry['name']} extends past the tensor section", path=path, offset=off)
        tensors[entry["name"]] = np.frombuffer(data, dtype="<f4", count=n // 4, offset=off).reshape(shape).copy()
        end = max(end, off + n)
    if data[end:end + 4] != TRAILER or len(data) != end + 12:
        raise ParseError("missing or misplaced trailer", path=path, offset=end)
    digest = hashlib.blake2b(data[:end + 4], digest_size=8).digest()
    if digest != data[end + 4:]:
        raise ParseError("digest mismatch, file is corrupt", path=path, offset=end + 4)
    return meta, tensors


def model_from_meta(meta, tensors):
    cfg = ModelConfig.from_dict(meta["model"])
    model = SegBackbone(cfg, T.Rng(cfg.seed))
    dummy = T.Rng(0)
    for rec in meta["experts"]:
        e = rec["id"]
        tau = tensors.get(f"text.tau{e}")
        model.freeze_all()
        model.attach_expert(rec["classes"], dummy, tau=tau, prompt=rec.get("prompt"),
                            attn=rec["attn"], adapters=rec["adapters"])
    model.merged_upto = meta.get("merged_upto")
    frozen = meta["frozen"]
    for name, t in model.named_tensors():
        if name not in tensors:
            raise ParseError(f"tensor {name} missing from checkpoint")
        if tuple(tensors[name].shape) != tuple(t.shape):
            raise ParseError(f"tensor {name} has shape {tensors[name].shape}, model expects {t.shape}")
        t.data = tensors[name].astype(np.float32)
        t.requires_grad = not frozen.get(name, True)
    for lin in model.adapted_linears():
        lin.weight.requires_grad = False
        for a in lin.adapters:
            a.frozen = frozen[f"{lin.name}.expert{a.expert_id}.B"]
    return model


def load_checkpoint(path):
    """Return ``(model, registry, metadata)``."""
    data = Path(path).read_bytes()
    meta, tensors = parse(data, path=path)
    return model_from_meta(meta, tensors), TaskRegistry.from_dict(meta.get("registry", [])), meta
