"""Optimiser, schedule, losses, metrics and the continual-learning loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, FreezeViolation, NumericalError, StateError
from .lora import checksum
from .model import top1_route

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- optimiser


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, state, grads=None):
    """One AdamW update with decoupled weight decay.

    ``p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p``. Frozen
    tensors (``requires_grad`` false) are skipped and never get moment
    buffers. ``grads`` defaults to each tensor's ``.grad``.
    """
    live = [p for p in params if p.requires_grad]
    if grads is None:
        grads = [p.grad for p in live]
    else:
        grads = [g for p, g in zip(params, grads) if p.requires_grad]
    for p, g in zip(live, grads):
        if g is not None and not np.all(np.isfinite(g)):
            bad = int(np.sum(~np.isfinite(g)))
            raise NumericalError(f"non-finite gradient for {p.name or tuple(p.shape)}: {bad} entries")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p, g in zip(live, grads):
        key = id(p)
        if g is None:
            g = np.zeros_like(p.data)
        g = g.astype(np.float64)
        m = state.m.get(key)
        if m is None:
            m = np.zeros(p.shape)
            v = np.zeros(p.shape)
        else:
            v = state.v[key]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[key], state.v[key] = m, v
        w = p.data.astype(np.float64)
        upd = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps) + state.lr * state.weight_decay * w
        p.data = (w - upd).astype(p.data.dtype)


# ----------------------------------------------------------------- schedule


@dataclass
class Schedule:
    base_lr: float = 1e-3
    min_lr: float = 0.0
    warmup_epochs: int = 10
    total_epochs: int = 100


def lr_at(schedule, epoch):
    """Linear warm-up to ``base_lr`` then cosine decay to ``min_lr``."""
    s = schedule
    if not 0 <= epoch < s.total_epochs:
        raise ContractError(f"epoch {epoch} outside [0, {s.total_epochs})")
    if epoch < s.warmup_epochs:
        return s.base_lr * (epoch + 1) / s.warmup_epochs
    span = s.total_epochs - s.warmup_epochs
    return s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1.0 + math.cos(math.pi * (epoch - s.warmup_epochs) / span))


# --------------------------------------------------------- losses, metrics


def dice_score(pred, true, c):
    """``2|P & T| / (|P| + |T|)`` for class ``c``; 1.0 when both are empty."""
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape:
        raise ContractError(f"mask shapes differ: {pred.shape} vs {true.shape}")
    p = pred == c
    t = true == c
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, t).sum()) / denom


def mean_dice(pred, true, classes):
    return float(np.mean([dice_score(pred, true, c) for c in classes]))


def one_hot(mask, labels):
    """``(..., len(labels))`` indicator of ``mask`` over ``labels`` order."""
    labels = np.asarray(labels)
    return (np.asarray(mask)[..., None] == labels).astype(T.default_dtype())


def seg_loss(probs, mask, labels, log_probs=None, smooth=1.0):
    """Pixel cross-entropy plus ``1 - mean soft Dice`` over ``labels``.

    ``probs`` has the class axis last, ordered as ``labels``. When
    ``log_probs`` is given the cross-entropy uses it directly, which avoids
    ``log(0)`` for saturated probabilities.
    """
    probs = T._wrap(probs)
    target = one_hot(mask, labels)
    if target.shape != probs.shape:
        raise ContractError(f"mask {np.shape(mask)} does not match probabilities {probs.shape}")
    lp = T.log(probs) if log_probs is None else log_probs
    n_pix = int(np.prod(probs.shape[:-1]))
    ce = T.tsum(lp * T.Tensor(-target)) * (1.0 / n_pix)
    axes = tuple(range(probs.ndim - 1))
    inter = T.tsum(probs * T.Tensor(target), axis=axes)
    denom = T.tsum(probs, axis=axes) + target.sum(axis=axes)
    dice = (inter * 2.0 + smooth) / (denom + smooth)
    return ce + (1.0 - T.mean(dice))


# ----------------------------------------------------------- freeze audits


class FreezeAudit:
    """Checksums of frozen tensors, re-verified on demand."""

    def __init__(self, named):
        self.sums = {name: checksum([t]) for name, t in named if not t.requires_grad}

    def verify(self, named):
        current = dict(named)
        for name, ref in self.sums.items():
            if name not in current:
                raise FreezeViolation(f"frozen tensor {name} disappeared")
            if checksum([current[name]]) != ref:
                raise FreezeViolation(f"frozen tensor {name} changed")


# ------------------------------------------------------------------ plans


@dataclass
class StepPlan:
    """One continual step: a dataset, its new classes and a training budget."""

    spec: object
    epochs: int = 10
    batch_size: int = 8
    prompt: str | None = None

    @property
    def task_id(self):
        return self.spec.task_id

    @property
    def classes(self):
        return list(self.spec.classes)


@dataclass
class RunPlan:
    steps: list
    mode: str = "task"
    base_lr: float = 3e-3
    min_lr: float = 0.0
    warmup_epochs: int = 2
    weight_decay: float = 1e-6
    seed: int = 0
    gate_supervision: float = 1.0
    gate_margin_scale: float = 10.0
    train_routing: str = "top1"
    warm_start: bool = False
    support_shots: int = 8
    cache_inputs: int = 20
    checkpoint_every: int = 1

    def __post_init__(self):
        if self.mode not in ("task", "class"):
            raise ConfigError(f"mode must be 'task' or 'class', got {self.mode!r}")
        if not self.steps:
            raise ConfigError("a run needs at least one step")
        self.label_sets()

    def label_sets(self, prev=()):
        """``[Y^1, Y^2, ...]``; raises on class collisions."""
        from .data import accumulate_labels

        out, y = [], list(prev)
        for s in self.steps:
            y = accumulate_labels(y, s.classes)
            out.append(list(y))
        return out


# ----------------------------------------------------------- step training


def token_targets(mask, classes, patch):
    """1.0 for tokens whose patch holds any pixel of ``classes``; (B, S, 1)."""
    b, h, w = mask.shape
    t = mask.reshape(b, h // patch, patch, w // patch, patch).transpose(0, 1, 3, 2, 4)
    t = t.reshape(b, (h // patch) * (w // patch), patch * patch)
    return np.isin(t, classes).any(-1).astype(T.default_dtype())[..., None]


def gate_supervision_loss(trace, target, expert, margin_scale):
    """Binary cross-entropy pushing expert ``expert`` to own its class tokens.

    For the first expert the target applies to its gate weight directly; for
    later experts it applies to ``sigmoid(k * (GW_e - GW_1))`` so the new
    expert wins top-1 routing exactly where its classes are.
    """
    tgt = T.Tensor(target)
    total = None
    for g in trace:
        ge = T.reshape(T.index_last(g, expert - 1), target.shape)
        if expert > 1:
            g1 = T.reshape(T.index_last(g, 0), target.shape)
            ge = T.sigmoid((ge - g1) * margin_scale)
        bce = T.mean(T.log(ge) * tgt + T.log(1.0 - ge) * (1.0 - tgt)) * -1.0
        total = bce if total is None else total + bce
    return total * (1.0 / len(trace))


def step_loss(model, x, y, expert, plan, classes):
    """Training loss of ``expert`` on one batch."""
    if model.cfg.mode == "task":
        z = model.logits(x, upto=expert)
        labels = model.head_labels(expert)
        return seg_loss(T.softmax(z), y, labels, log_probs=T.log_softmax(z))
    trace = []
    routing = plan.train_routing if expert > 1 else "soft"
    z = model.logits(x, upto=expert, routing=routing, trace=trace, head=expert)
    labels = model.head_labels(head=expert)
    y = np.where(np.isin(y, labels), y, 0)
    loss = seg_loss(T.softmax(z), y, labels, log_probs=T.log_softmax(z))
    if plan.gate_supervision > 0:
        tgt = token_targets(y, classes, model.cfg.patch)
        loss = loss + gate_supervision_loss(trace, tgt, expert, plan.gate_margin_scale) * plan.gate_supervision
    return loss


def train_expert(model, expert, step_plan, plan, vault, step, events):
    """Train the unfrozen tensors on one step's data only."""
    rng = T.Rng(plan.seed).spawn("train", step_plan.task_id)
    loader = vault.loader(step, step_plan.task_id, step_plan.batch_size, rng)
    params = [p for p in model.parameters() if p.requires_grad]
    audit = FreezeAudit(model.named_tensors())
    sched = Schedule(plan.base_lr, plan.min_lr, min(plan.warmup_epochs, step_plan.epochs), step_plan.epochs)
    state = OptimState(weight_decay=plan.weight_decay)
    model.training_step_active = True
    try:
        for epoch in range(step_plan.epochs):
            state.lr = lr_at(sched, epoch)
            total, n = 0.0, 0
            for x, y in loader.epoch():
                loss = step_loss(model, x, y, expert, plan, step_plan.classes)
                T.backward(loss)
                adamw_step(params, state)
                for p in params:
                    p.grad = None
                total += loss.item()
                n += 1
            audit.verify(model.named_tensors())
            events.append({"event": "epoch", "step": step, "task": step_plan.task_id, "epoch": epoch,
                           "lr": state.lr, "loss": total / max(n, 1)})
            log.info("step %d task %s epoch %d loss %.4f", step, step_plan.task_id, epoch, total / max(n, 1))
    finally:
        model.training_step_active = False
    seen = vault.tasks_seen_in_step(step)
    if seen - {step_plan.task_id}:
        raise StateError(f"step {step} touched data of other tasks: {sorted(seen - {step_plan.task_id})}")
    return state


# -------------------------------------------------------------- evaluation


def predict_batched(model, images, batch=50, **kw):
    return np.concatenate([model.predict(images[i:i + batch], **kw) for i in range(0, len(images), batch)])


def logits_batched(model, images, batch=50, **kw):
    with T.no_grad():
        return np.concatenate([model.logits(images[i:i + batch], **kw).data for i in range(0, len(images), batch)])


def new_class_routing(model, images, masks, classes, expert, batch=50):
    """Per block: share of tokens holding ``classes`` that top-1 routing sends to ``expert``."""
    hits = np.zeros(model.cfg.n_blocks)
    n = 0
    for i in range(0, len(images), batch):
        trace = []
        with T.no_grad():
            model.logits(images[i:i + batch], upto=expert, routing="top1", trace=trace)
        tok = token_targets(masks[i:i + batch], classes, model.cfg.patch)[..., 0] > 0
        for b, g in enumerate(trace):
            hits[b] += np.sum(top1_route(g.data)[tok] == expert)
        n += int(tok.sum())
    return [float(h / n) if n else None for h in hits]


def per_class_dice(pred, true, classes):
    return {int(c): dice_score(pred, true, c) for c in classes}


# ------------------------------------------------------------ orchestration


@dataclass
class RunResult:
    """In-memory outcome of :func:`run_continual`; ``report`` is JSON-ready."""

    model: object
    registry: object
    report: dict
    events: list
    cached_logits: dict
    checkpoints: list


def _eval_step(model, registry, plan, specs, vault, step, cache, label_sets):
    """Evaluate every task seen so far after ``step`` (1-based)."""
    from .data import stack
    from .gating import classify_task

    row, per_class, combined = {}, {}, {}
    routing = None
    retention = {}
    correct = total = 0
    for k, spec in enumerate(specs[:step], start=1):
        x, y = stack(vault.test[spec.task_id])
        if plan.mode == "task":
            kw = {"upto": k}
        else:
            kw = {"upto": k, "routing": "top1"}
        pred = predict_batched(model, x, **kw)
        pc = per_class_dice(pred, y, spec.classes)
        row[spec.task_id] = float(np.mean(list(pc.values())))
        per_class[spec.task_id] = {str(c): v for c, v in pc.items()}
        held = logits_batched(model, x[:plan.cache_inputs], **kw)
        if spec.task_id in cache:
            retention[spec.task_id] = bool(np.array_equal(cache[spec.task_id], held))
        else:
            cache[spec.task_id] = held
        if plan.mode == "task":
            guess = np.array([classify_task(im, registry) for im in x])
            correct += int(np.sum(guess == k))
            total += len(x)
        else:
            full = predict_batched(model, x, upto=step, routing="top1")
            combined[spec.task_id] = {str(c): v for c, v in per_class_dice(full, y, spec.classes).items()}
            if k == step and step > 1:
                routing = new_class_routing(model, x, y, spec.classes, step)
    out = {"step": step, "dice": row, "per_class": per_class, "retention_bitwise": retention,
           "label_set": label_sets[step - 1]}
    if plan.mode == "task":
        out["classifier_accuracy"] = correct / total if total else None
    else:
        out["combined_top1_per_class"] = combined
        if step > 1:
            out["new_class_routing"] = routing
    return out


def continual_step(model, registry, step_plan, plan, vault, step, events, provider=None):
    """Freeze, append expert ``step``, train it, audit old experts, register the task."""
    from .gating import add_expert, select_support

    sp = step_plan
    rng = T.Rng(plan.seed).spawn("expert", sp.task_id)
    prompt = sp.prompt or f"{sp.task_id}: " + ", ".join(str(c) for c in sp.classes)
    tau = provider.embed(prompt) if plan.mode == "class" else None
    before = {e: checksum(model.expert_tensors(e)) for e in range(1, step)}
    e = add_expert(model, sp.classes, rng, registry=registry, tau=tau, prompt=prompt, warm_start=plan.warm_start)
    train_expert(model, e, sp, plan, vault, step, events)
    for old, ref in before.items():
        if checksum(model.expert_tensors(old)) != ref:
            raise FreezeViolation(f"expert {old} changed while training expert {e}")
    support = select_support(len(vault.train[sp.task_id]), T.Rng(plan.seed).spawn("support", sp.task_id),
                             plan.support_shots)
    registry.register(sp.task_id, e, [vault.train[sp.task_id][j].image for j in support], sp.classes,
                      support=support)
    return e


def class_continual_step(model, registry, step_plan, plan, vault, step, events, provider):
    """Class-level step: a new expert, gate projection and head for ``step_plan``'s classes."""
    if plan.mode != "class" or model.cfg.mode != "class":
        raise ConfigError("class_continual_step needs a class-mode plan and model")
    return continual_step(model, registry, step_plan, plan, vault, step, events, provider)


def load_split(spec, split, data_dirs=None):
    """A task's samples: from its folder dataset if one is mapped, else synthesised."""
    from .data import gen_task_dataset, load_folder_dataset

    dirs = (data_dirs or {}).get(spec.task_id)
    if dirs and split in dirs:
        return load_folder_dataset(dirs[split], classes=spec.classes)
    return gen_task_dataset(spec, split)


def run_continual(plan, model=None, registry=None, out_dir=None, provider=None, prior_specs=(),
                  prior_labels=(), cache=None, events=None, data_dirs=None):
    """Train and evaluate ``plan`` step by step.

    Each step adds a fresh expert (freezing all earlier ones), trains it on
    that step's data alone, checkpoints, and evaluates every task seen so
    far. Passing an existing ``model``/``registry`` resumes a run; the prior
    task specs are then needed to re-evaluate old tasks.
    """
    from pathlib import Path

    from .checkpoint import save_checkpoint
    from .data import DataVault
    from .gating import HashEmbeddingProvider, TaskRegistry
    from .model import ModelConfig, SegBackbone

    if model is None:
        model = SegBackbone(ModelConfig(mode=plan.mode, seed=plan.seed))
    if model.cfg.mode != plan.mode:
        raise ConfigError(f"plan mode {plan.mode!r} does not match model mode {model.cfg.mode!r}")
    registry = TaskRegistry() if registry is None else registry
    provider = HashEmbeddingProvider(model.cfg.d_txt) if provider is None else provider
    events = [] if events is None else events
    cache = {} if cache is None else cache
    base_labels = list(prior_labels[-1]) if prior_labels else []
    label_sets = list(prior_labels) + plan.label_sets(base_labels)
    specs = list(prior_specs) + [s.spec for s in plan.steps]
    ids = [s.task_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"task ids repeat across steps: {ids}")
    vault = DataVault()
    new = {p.task_id for p in plan.steps}
    for s in specs:
        vault.add(s.task_id, load_split(s, "train", data_dirs) if s.task_id in new else [],
                  load_split(s, "test", data_dirs))
    for s in prior_specs:
        vault.close(s.task_id)
    rows, checkpoints = [], []
    first = len(prior_specs) + 1
    for i, sp in enumerate(plan.steps):
        step = first + i
        if model.num_experts != step - 1:
            raise StateError(f"model holds {model.num_experts} experts before step {step}")
        continual_step(model, registry, sp, plan, vault, step, events, provider)
        vault.close(sp.task_id)
        row = _eval_step(model, registry, plan, specs, vault, step, cache, label_sets)
        rows.append(row)
        events.append({"event": "eval", **row})
        if out_dir is not None and (step % plan.checkpoint_every == 0 or i == len(plan.steps) - 1):
            path = Path(out_dir) / f"step{step}.lmoe"
            extra = checkpoint_extra(plan, specs[:step], label_sets[:step], step, data_dirs, provider)
            save_checkpoint(path, model, registry, extra=extra)
            checkpoints.append(str(path))
    report = build_report(plan, model, specs, rows)
    if out_dir is not None:
        write_report(out_dir, report, events)
    return RunResult(model, registry, report, events, cache, checkpoints)


def checkpoint_extra(plan, specs, label_sets, step, data_dirs=None, provider=None):
    from dataclasses import asdict

    dirs = {s.task_id: (data_dirs or {})[s.task_id] for s in specs if s.task_id in (data_dirs or {})}
    return {
        "step": step,
        "label_sets": label_sets,
        "tasks": [asdict(s) for s in specs],
        "data_dirs": dirs,
        "embedding_provider": provider.describe() if provider is not None else None,
        "rng": {"algorithm": T.Rng.algorithm, "seed": plan.seed},
        "plan": {k: v for k, v in asdict(plan).items() if k != "steps"},
    }


def build_report(plan, model, specs, rows):
    from .lora import total_param_count, trainable_param_count

    cols = [s.task_id for s in specs]
    matrix = [[row["dice"].get(c) for c in cols] for row in rows]
    return {
        "mode": plan.mode,
        "tasks": cols,
        "dice_matrix": matrix,
        "steps": rows,
        "trainable_params": trainable_param_count(model.parameters()),
        "total_params": total_param_count(model.parameters()),
    }


def format_matrix(report):
    """Plain-text Dice table: one row per step, one column per task."""
    cols = report["tasks"]
    width = max(8, *(len(c) for c in cols))
    lines = ["step  " + "  ".join(c.rjust(width) for c in cols)]
    for i, row in zip((r["step"] for r in report["steps"]), report["dice_matrix"]):
        cells = ["-".rjust(width) if v is None else f"{v:.4f}".rjust(width) for v in row]
        lines.append(f"{i:<4}  " + "  ".join(cells))
    return "\n".join(lines)


def write_report(out_dir, report, events):
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "events.jsonl", "w") as fh:
        for ev in events:
            fh.write(json.dumps(ev, sort_keys=True) + "\n")
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    (out / "summary.txt").write_text(format_matrix(report) + "\n")
