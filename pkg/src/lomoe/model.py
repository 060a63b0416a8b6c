"""Transformer segmentation backbone with low-rank MoE layers.

Images are cut into ``patch x patch`` tiles, embedded by a frozen random
projection, passed through pre-norm encoder blocks (low-rank multi-head
attention followed by a low-rank MoE feed-forward layer) and decoded by a
per-expert linear head that emits ``patch*patch*n_classes`` logits per
token, which are unfolded back onto the pixel grid.

Two routing regimes share the same blocks:

* ``task`` mode stacks experts cumulatively; evaluating task ``k`` uses the
  prefix ``W0 + sum_{t<=k} B_t A_t`` in every adapted layer and head ``k``.
* ``class`` mode keeps experts independent and mixes them per token with
  language-guided gate weights. Every expert's head scores background plus
  its own classes. Under soft routing the heads are combined through
  per-expert foreground log-odds ``z_c - z_bg``, so a pixel is background
  unless some expert claims it; under top-1 routing each token is decoded
  only by the expert its last block routed it to.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, RoutingError, ShapeError
from .lora import LoraLinear, adapter_forward, check_rank, lora_forward


@dataclass
class ModelConfig:
    image_size: int = 32
    patch: int = 4
    channels: int = 1
    d_model: int = 320
    heads: int = 2
    n_blocks: int = 2
    d_ff: int = 0
    rank: int = 8
    mode: str = "task"
    attn_adapters: bool = True
    d_txt: int = 32
    gate_reading: str = "input"
    seed: int = 0

    def __post_init__(self):
        if not self.d_ff:
            self.d_ff = 4 * self.d_model
        self.validate()

    @property
    def d_k(self):
        return self.d_model // self.heads

    @property
    def tokens(self):
        return (self.image_size // self.patch) ** 2

    def validate(self):
        if self.mode not in ("task", "class"):
            raise ConfigError(f"mode must be 'task' or 'class', got {self.mode!r}")
        if self.gate_reading not in ("input", "embedding"):
            raise ConfigError(f"gate_reading must be 'input' or 'embedding', got {self.gate_reading!r}")
        if self.d_model % self.heads:
            raise ConfigError(f"heads={self.heads} does not divide d_model={self.d_model}")
        if self.image_size % self.patch:
            raise ConfigError(f"image_size={self.image_size} not divisible by patch={self.patch}")
        check_rank(self.d_model, self.d_k, self.rank)
        check_rank(self.d_model, self.d_ff, self.rank)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown model keys: {', '.join(unknown)}")
        return cls(**d)


PROFILES = {
    "desk": dict(d_model=320, heads=2, n_blocks=2, rank=8, patch=4),
    "paper-dims": dict(d_model=512, heads=8, n_blocks=4, rank=8, patch=4),
}


def profile_config(name, **overrides):
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    return ModelConfig(**{**PROFILES[name], **overrides})


# ---------------------------------------------------------------- layers


def _frozen_normal(rng, shape, sigma):
    return T.randn(shape, rng, sigma)


class MoEFFNLayer:
    """Two-layer GeLU feed-forward with per-expert adapters on both projections."""

    def __init__(self, d_model, d_ff, rng, name="ffn"):
        self.name = name
        self.wi = LoraLinear(_frozen_normal(rng, (d_ff, d_model), 1 / math.sqrt(d_model)), f"{name}.wi")
        self.wo = LoraLinear(_frozen_normal(rng, (d_model, d_ff), 1 / math.sqrt(d_ff)), f"{name}.wo")

    @property
    def num_experts(self):
        return len(self.wi.adapters)

    def add_expert(self, rng, rank):
        e = self.num_experts + 1
        self.wi.add_adapter(rng.spawn(self.name, "wi", e), rank, e)
        self.wo.add_adapter(rng.spawn(self.name, "wo", e), rank, e)
        return e

    def linears(self):
        return [self.wi, self.wo]


def ffn_expert_forward(layer, x, e):
    """``(Wo + dWo_e) GeLU((Wi + dWi_e) x)`` using expert ``e``'s deltas only."""
    if not 1 <= e <= layer.num_experts:
        raise RoutingError(f"expert {e} not in 1..{layer.num_experts}")
    return adapter_forward(layer.wo, T.gelu(adapter_forward(layer.wi, x, e)), e)


def ffn_stack_forward(layer, x, upto):
    """FFN whose projections carry the cumulative delta of experts ``1..upto``."""
    return lora_forward(layer.wo, T.gelu(lora_forward(layer.wi, x, upto)), upto)


def moe_combine(layer, x, G):
    """``sum_e G[..., e] * FFN_e(x)``.

    ``G`` is either a length-E sequence applied to every token or a tensor
    whose last axis has length E (per-token weights).
    """
    if isinstance(G, T.Tensor):
        if G.shape[-1] != layer.num_experts:
            raise ShapeError(f"gate width {G.shape[-1]} != {layer.num_experts} experts")
        out = None
        for e in range(1, layer.num_experts + 1):
            g = T.reshape(T.index_last(G, e - 1), (*G.shape[:-1], 1))
            term = g * ffn_expert_forward(layer, x, e)
            out = term if out is None else out + term
        return out
    G = [float(v) for v in G]
    if len(G) != layer.num_experts:
        raise ShapeError(f"gate length {len(G)} != {layer.num_experts} experts")
    out = None
    for e, g in enumerate(G, start=1):
        if g == 0.0:
            continue
        y = ffn_expert_forward(layer, x, e)
        term = y if g == 1.0 else y * g
        out = term if out is None else out + term
    if out is None:
        x = T._wrap(x)
        return T.zeros((*x.shape[:-1], layer.wo.out_features))
    return out


def moe_top1(layer, x, GW, choice):
    """Per-token hard routing: token s only runs expert ``choice[s]``.

    ``x`` is (N, d), ``GW`` (N, E) and ``choice`` holds 1-based expert ids.
    The selected expert's output is scaled by its gate weight.
    """
    n = x.shape[0]
    parts, idxs = [], []
    for e in range(1, layer.num_experts + 1):
        idx = np.flatnonzero(choice == e)
        if idx.size == 0:
            continue
        xe = T.index_rows(x, idx)
        ge = T.reshape(T.index_last(T.index_rows(GW, idx), e - 1), (idx.size, 1))
        parts.append(ge * ffn_expert_forward(layer, xe, e))
        idxs.append(idx)
    return T.scatter_rows(parts, idxs, n)


class LoraAttention:
    """Multi-head self-attention whose four projections are low-rank adapted."""

    def __init__(self, d_model, heads, rng, name="attn"):
        if d_model % heads:
            raise ConfigError(f"heads={heads} does not divide d_model={d_model}")
        self.name = name
        self.heads = heads
        self.d_model = d_model
        self.d_k = d_model // heads
        s = 1 / math.sqrt(d_model)
        self.wq = [LoraLinear(_frozen_normal(rng, (self.d_k, d_model), s), f"{name}.wq.h{i}") for i in range(heads)]
        self.wk = [LoraLinear(_frozen_normal(rng, (self.d_k, d_model), s), f"{name}.wk.h{i}") for i in range(heads)]
        self.wv = [LoraLinear(_frozen_normal(rng, (self.d_k, d_model), s), f"{name}.wv.h{i}") for i in range(heads)]
        self.wo = LoraLinear(_frozen_normal(rng, (d_model, d_model), s), f"{name}.wo_proj")

    def linears(self):
        return [*self.wq, *self.wk, *self.wv, self.wo]

    @property
    def num_experts(self):
        return len(self.wo.adapters)

    def add_expert(self, rng, rank):
        e = self.num_experts + 1
        for lin in self.linears():
            lin.add_adapter(rng.spawn(lin.name, e), rank, e)
        return e


def lora_attention_forward(att, X, active_upto=None):
    """Scaled dot-product attention per head, concatenated and projected."""
    X = T._wrap(X)
    if X.ndim < 2 or X.shape[-1] != att.d_model:
        raise ShapeError(f"attention input {X.shape} needs trailing width {att.d_model}")
    if X.shape[-2] < 1:
        raise ShapeError("attention needs at least one token")
    scale = 1.0 / math.sqrt(att.d_k)
    heads = []
    for i in range(att.heads):
        q = lora_forward(att.wq[i], X, active_upto)
        k = lora_forward(att.wk[i], X, active_upto)
        v = lora_forward(att.wv[i], X, active_upto)
        scores = T.matmul(q, T.swap_last(k)) * scale
        heads.append(T.matmul(T.softmax(scores, axis=-1), v))
    cat = heads[0] if att.heads == 1 else T.concat(heads, axis=-1)
    return lora_forward(att.wo, cat, active_upto)


class ClassGate:
    """Language-guided gate: one projection ``W_g`` per expert.

    ``taus`` is shared with the owning model and holds one unit-norm text
    embedding per expert.
    """

    def __init__(self, d_model, d_txt, taus, reading="input", name="gate"):
        self.d_model = d_model
        self.d_txt = d_txt
        self.taus = taus
        self.reading = reading
        self.name = name
        self.projections = []

    @property
    def num_experts(self):
        return len(self.projections)

    def add_expert(self, rng, sigma=None):
        sigma = 1 / math.sqrt(self.d_model) if sigma is None else sigma
        w = T.randn((self.d_model, self.d_txt), rng, sigma, requires_grad=True)
        self.projections.append(w)
        return len(self.projections)

    def parameters(self):
        return list(self.projections)


def class_gate_weights(x, gate, upto=None):
    """Per-token gate weights in (0, 1), shape ``(..., E)``.

    ``input`` reading: ``sigmoid(<sigmoid(x @ W_g), tau_e>)``.
    ``embedding`` reading: ``sigmoid(<x, sigmoid(W_g @ tau_e)>)``.
    """
    x = T._wrap(x)
    upto = gate.num_experts if upto is None else upto
    if upto < 1 or upto > gate.num_experts or upto > len(gate.taus):
        raise ContractError(f"gate has {gate.num_experts} experts, asked for {upto}")
    if x.shape[-1] != gate.d_model:
        raise ShapeError(f"gate input width {x.shape[-1]} != {gate.d_model}")
    cols = []
    for e in range(upto):
        tau = np.asarray(gate.taus[e], dtype=x.data.dtype)
        if tau.shape != (gate.d_txt,):
            raise ShapeError(f"text embedding shape {tau.shape} != ({gate.d_txt},)")
        w = gate.projections[e]
        if gate.reading == "input":
            s = T.matmul(T.sigmoid(T.matmul(x, w)), T.Tensor(tau.reshape(-1, 1)))
        else:
            v = T.sigmoid(T.matmul(w, T.Tensor(tau.reshape(-1, 1))))
            s = T.matmul(x, v)
        cols.append(s)
    logits = cols[0] if len(cols) == 1 else T.concat(cols, axis=-1)
    return T.sigmoid(logits)


def top1_route(GW):
    """1-based argmax over the last axis; ties go to the lowest index."""
    g = GW.data if isinstance(GW, T.Tensor) else np.asarray(GW)
    if g.size == 0 or g.shape[-1] == 0:
        raise ContractError("top1_route needs at least one expert")
    out = np.argmax(g, axis=-1) + 1
    return int(out) if out.ndim == 0 else out


class Head:
    """Linear decoder from token features to per-pixel logits of one expert."""

    def __init__(self, d_model, patch, classes, rng, name="head"):
        self.classes = [int(c) for c in classes]
        self.name = name
        n_out = patch * patch * len(self.classes)
        self.W = T.randn((n_out, d_model), rng, 0.02 / math.sqrt(d_model), requires_grad=True)
        self.b = T.zeros((n_out,), requires_grad=True)

    def parameters(self):
        return [self.W, self.b]

    def freeze(self):
        self.W.requires_grad = False
        self.b.requires_grad = False

    @property
    def frozen(self):
        return not self.W.requires_grad


class Block:
    def __init__(self, cfg, rng, index, taus):
        self.index = index
        self.attn = LoraAttention(cfg.d_model, cfg.heads, rng.spawn("attn", index), name=f"block{index}.attn")
        self.ffn = MoEFFNLayer(cfg.d_model, cfg.d_ff, rng.spawn("ffn", index), name=f"block{index}.ffn")
        self.gate = ClassGate(cfg.d_model, cfg.d_txt, taus, cfg.gate_reading, name=f"block{index}.gate") \
            if cfg.mode == "class" else None


class SegBackbone:
    """Patch-token transformer producing per-pixel class logits."""

    def __init__(self, cfg, rng=None):
        self.cfg = cfg
        rng = T.Rng(cfg.seed) if rng is None else rng
        p2 = cfg.patch * cfg.patch * cfg.channels
        self.embed = _frozen_normal(rng.spawn("embed"), (cfg.d_model, p2), 1 / math.sqrt(p2))
        self.pos = _frozen_normal(rng.spawn("pos"), (cfg.tokens, cfg.d_model), 0.5)
        self.taus = []
        self.prompts = []
        self.blocks = [Block(cfg, rng.spawn("block"), i, self.taus) for i in range(cfg.n_blocks)]
        self.heads = []
        self.merged_upto = None

    # -- structure ------------------------------------------------------
    @property
    def num_experts(self):
        return len(self.heads)

    @property
    def num_adapters(self):
        return self.blocks[0].ffn.num_experts if self.blocks else 0

    def adapted_linears(self):
        out = []
        for b in self.blocks:
            out.extend(b.attn.linears())
            out.extend(b.ffn.linears())
        return out

    def label_space(self, upto=None):
        """Global class ids in logit order for the first ``upto`` experts."""
        upto = self.num_experts if upto is None else upto
        if self.cfg.mode == "task":
            return list(self.heads[upto - 1].classes)
        out = [0]
        for h in self.heads[:upto]:
            out.extend(h.classes[1:])
        return out

    def named_tensors(self):
        """Every tensor with its stable checkpoint name, in a fixed order."""
        out = [("embed.patch", self.embed), ("embed.pos", self.pos)]
        for b in self.blocks:
            for lin in b.attn.linears() + b.ffn.linears():
                out.append((f"{lin.name}.base", lin.weight))
                for a in lin.adapters:
                    out.append((f"{lin.name}.expert{a.expert_id}.A", a.A))
                    out.append((f"{lin.name}.expert{a.expert_id}.B", a.B))
            if b.gate is not None:
                for e, w in enumerate(b.gate.projections, start=1):
                    out.append((f"{b.gate.name}.expert{e}.W", w))
        for e, h in enumerate(self.heads, start=1):
            out.append((f"head.expert{e}.W", h.W))
            out.append((f"head.expert{e}.b", h.b))
        return out

    def parameters(self):
        return [t for _, t in self.named_tensors()]

    def expert_tensors(self, e):
        """Tensors owned by expert ``e`` (adapters, gate projection, head, text embedding)."""
        out = []
        for b in self.blocks:
            for lin in b.attn.linears() + b.ffn.linears():
                for a in lin.adapters:
                    if a.expert_id == e:
                        out.extend(a.parameters())
            if b.gate is not None and e <= b.gate.num_experts:
                out.append(b.gate.projections[e - 1])
        if e <= len(self.heads):
            out.extend(self.heads[e - 1].parameters())
        if e <= len(self.taus):
            out.append(T.Tensor(self.taus[e - 1]))
        return out

    def freeze_all(self):
        for lin in self.adapted_linears():
            lin.freeze_all()
        for b in self.blocks:
            if b.gate is not None:
                for w in b.gate.projections:
                    w.requires_grad = False
        for h in self.heads:
            h.freeze()

    def attach_expert(self, classes, rng, tau=None, prompt=None, attn=None, adapters=True):
        """Append expert ``E+1``: zero-delta adapters, a head and (class mode) a gate.

        ``adapters=False`` only adds the head; merged checkpoints use it.
        """
        cfg = self.cfg
        if self.merged_upto is not None and adapters:
            raise ConfigError("cannot add experts to a merged model")
        e = self.num_experts + 1
        attn = (cfg.attn_adapters and (cfg.mode == "task" or e == 1)) if attn is None else attn
        for b in self.blocks:
            if not adapters:
                continue
            if attn:
                b.attn.add_expert(rng.spawn("expert", e, b.index), cfg.rank)
            b.ffn.add_expert(rng.spawn("expert", e, b.index), cfg.rank)
            if b.gate is not None:
                b.gate.add_expert(rng.spawn("gate", e, b.index))
        if cfg.mode == "class":
            if tau is None:
                raise ConfigError("class mode needs a text embedding per expert")
            self.taus.append(np.asarray(tau, dtype=np.float32))
        self.prompts.append(prompt)
        classes = [0, *(int(c) for c in classes if int(c) != 0)]
        self.heads.append(Head(cfg.d_model, cfg.patch, classes, rng.spawn("head", e), name=f"head.expert{e}"))
        return e

    def attn_depth(self, upto):
        n = self.blocks[0].attn.num_experts if self.blocks else 0
        return min(upto, n)

    # -- forward --------------------------------------------------------
    def patchify(self, images):
        cfg = self.cfg
        x = np.asarray(images, dtype=T.default_dtype())
        if x.ndim == 2:
            x = x[None]
        if x.ndim == 3:
            x = x[:, None]
        b, c, h, w = x.shape
        p = cfg.patch
        if h % p or w % p:
            raise ConfigError(f"image {h}x{w} not divisible by patch {p}")
        if c != cfg.channels or h * w // (p * p) != cfg.tokens:
            raise ShapeError(f"image batch {x.shape} does not match the configured backbone")
        x = x.reshape(b, c, h // p, p, w // p, p).transpose(0, 2, 4, 3, 5, 1)
        return x.reshape(b, (h // p) * (w // p), p * p * c), (h, w)

    def encode(self, images, upto, routing="soft", expert_mask=None, trace=None):
        """Token features after the final norm, shape (B, S, d_model)."""
        cfg = self.cfg
        patches, hw = self.patchify(images)
        x = T.linear(T.Tensor(patches), self.embed) + self.pos
        attn_upto = self.attn_depth(upto)
        for b in self.blocks:
            x = x + lora_attention_forward(b.attn, T.layer_norm(x), attn_upto)
            h = T.layer_norm(x)
            if cfg.mode == "task":
                x = x + ffn_stack_forward(b.ffn, h, upto)
            else:
                x = x + self._class_ffn(b, h, upto, routing, expert_mask, trace)
        return T.layer_norm(x), hw

    def _class_ffn(self, block, h, upto, routing, expert_mask, trace):
        GW = class_gate_weights(h, block.gate, upto)
        if expert_mask is not None:
            mask = np.zeros(upto, dtype=GW.data.dtype)
            mask[[e - 1 for e in expert_mask if e <= upto]] = 1
            GW = GW * mask
        if trace is not None:
            trace.append(GW)
        if routing not in ("soft", "top1"):
            raise ConfigError(f"unknown routing {routing!r}")
        if upto == 1:
            # one expert: soft and top-1 coincide; keep a single code path
            return ffn_expert_forward(block.ffn, h, 1) * GW
        if routing == "soft":
            return moe_combine(block.ffn, h, GW)
        shape = h.shape
        flat = T.reshape(h, (-1, shape[-1]))
        gw = T.reshape(GW, (-1, upto))
        choice = _route_choice(gw.data, upto, expert_mask)
        y = moe_top1(block.ffn, flat, gw, choice)
        return T.reshape(y, (*shape[:-1], block.ffn.wo.out_features))

    def logits(self, images, upto=None, routing="soft", expert_mask=None, trace=None, head=None):
        """Per-pixel logits ``(B, H, W, n_classes)``.

        Task mode: ``upto`` is the task's expert index; it selects the stack
        depth and that expert's head. Class mode: ``upto`` bounds the experts
        consulted and combined. ``head=e`` returns expert ``e``'s own
        background-plus-classes logits instead of the combination.
        """
        cfg = self.cfg
        upto = self.num_experts if upto is None else int(upto)
        if not 1 <= upto <= self.num_experts:
            raise RoutingError(f"expert {upto} not in 1..{self.num_experts}")
        depth = upto
        if self.merged_upto is not None:
            if cfg.mode != "task" or upto != self.merged_upto:
                raise RoutingError(f"merged model only serves expert {self.merged_upto}")
            depth = 0
        routed = cfg.mode == "class" and routing == "top1" and head is None and upto > 1
        if routed and trace is None:
            trace = []
        feats, (H, W) = self.encode(images, depth, routing, expert_mask, trace)
        if routed:
            heads = self.heads[:upto]
            out = [_unpatchify(T.linear(feats, h.W) + h.b, H, W, cfg.patch) for h in heads]
            choice = _route_choice(trace[-1].data, upto, expert_mask)
            return _combine_routed(out, choice, cfg.patch)
        if head is not None:
            if not 1 <= head <= upto:
                raise RoutingError(f"head {head} not in 1..{upto}")
            heads = [self.heads[head - 1]]
        elif cfg.mode == "task":
            heads = [self.heads[upto - 1]]
        else:
            heads = self.heads[:upto]
        out = [_unpatchify(T.linear(feats, h.W) + h.b, H, W, cfg.patch) for h in heads]
        return out[0] if len(out) == 1 else _combine_log_odds(out)

    def head_labels(self, upto=None, head=None):
        """Global class ids matching the last axis of :meth:`logits`."""
        if head is not None:
            return list(self.heads[head - 1].classes)
        return self.label_space(upto)

    def probs(self, images, **kw):
        return T.softmax(self.logits(images, **kw), axis=-1)

    def predict(self, images, **kw):
        """Predicted masks in global class ids."""
        with T.no_grad():
            z = self.logits(images, **kw).data
        upto = kw.get("upto") or self.num_experts
        labels = np.asarray(self.head_labels(upto, kw.get("head")))
        return labels[np.argmax(z, axis=-1)]


def _route_choice(gw, upto, expert_mask=None):
    """Top-1 expert per token, restricted to ``expert_mask`` when given."""
    if expert_mask is None:
        return top1_route(gw)
    allowed = np.isin(np.arange(1, upto + 1), list(expert_mask))
    return np.argmax(np.where(allowed, gw, -np.inf), axis=-1) + 1


# log-odds given to classes of experts a token was not routed to
_UNROUTED = -1.0e4


def _combine_routed(outs, choice, patch):
    """Like :func:`_combine_log_odds`, but each token only hears its routed expert."""
    b, h, w, _ = outs[0].shape
    pix = choice.reshape(b, h // patch, w // patch).repeat(patch, axis=1).repeat(patch, axis=2)
    parts = [T.Tensor(np.zeros((b, h, w, 1), dtype=outs[0].data.dtype))]
    for e, o in enumerate(outs, start=1):
        n = o.shape[-1]
        lo = T.index_last(o, np.arange(1, n)) - T.index_last(o, [0])
        off = np.where(pix == e, 0.0, _UNROUTED).astype(o.data.dtype)[..., None]
        parts.append(lo + off)
    return T.concat(parts, axis=-1)


def _combine_log_odds(outs):
    """``[0, z_1 - z_1bg, z_2 - z_2bg, ...]`` along the class axis.

    Softmax of the result equals the single head's softmax when only one
    expert is present, since logits are shift invariant.
    """
    parts = [T.Tensor(np.zeros((*outs[0].shape[:-1], 1), dtype=outs[0].data.dtype))]
    for o in outs:
        n = o.shape[-1]
        bg = T.index_last(o, [0])
        parts.append(T.index_last(o, np.arange(1, n)) - bg)
    return T.concat(parts, axis=-1)


def _unpatchify(z, H, W, p):
    b, s, _ = z.shape
    n = z.shape[-1] // (p * p)
    gh, gw = H // p, W // p
    z = T.reshape(z, (b, gh, gw, p, p, n))
    z = T.transpose(z, (0, 1, 3, 2, 4, 5))
    return T.reshape(z, (b, H, W, n))


def backbone_forward(model, images, **kw):
    """Per-pixel class probabilities over the model's label space."""
    return model.probs(images, **kw)


def merge_model(model, upto):
    """Dense copy of a task-mode model serving expert ``upto``.

    Every adapted weight becomes ``W0 + sum_{t<=upto} B_t A_t`` and no
    adapters remain. ``upto=0`` yields the bare backbone with no heads.
    """
    from .lora import merge_to_dense

    if model.cfg.mode != "task":
        raise ConfigError("merging applies to task-mode stacks only")
    if not 0 <= upto <= model.num_experts:
        raise ContractError(f"merge upto={upto} outside 0..{model.num_experts}")
    out = SegBackbone(model.cfg, T.Rng(model.cfg.seed))
    out.merged_upto = upto
    out.embed.data = model.embed.data.copy()
    out.pos.data = model.pos.data.copy()
    for src, dst in zip(model.adapted_linears(), out.adapted_linears()):
        dst.weight.data = merge_to_dense(src, upto).data.copy()
    for e in range(1, upto + 1):
        h = model.heads[e - 1]
        out.attach_expert(h.classes, T.Rng(0), prompt=model.prompts[e - 1], adapters=False)
        out.heads[-1].W.data = h.W.data.copy()
        out.heads[-1].b.data = h.b.data.copy()
        out.heads[-1].freeze()
    return out
