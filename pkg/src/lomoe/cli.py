"""Batch command-line interface: train, continue, eval, inspect, merge, classify.

Every command is non-interactive, reads its inputs without modifying them
and exits with status 1 on any library error (2 for usage errors).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_config, parse_steps, plan_kwargs, read_yaml, _check_keys
from .data import TaskSpec, load_folder_dataset, stack
from .errors import LomoeError, ValidationError
from .gating import classify_task, make_provider
from .lora import total_param_count, trainable_param_count
from .model import SegBackbone, merge_model
from .training import (RunPlan, format_matrix, load_split, per_class_dice, predict_batched, run_continual)

log = logging.getLogger("lomoe")


def _specs_from_meta(meta):
    out = []
    for d in meta.get("tasks", []):
        d = dict(d)
        d["classes"] = tuple(d["classes"])
        if d.get("shapes") is not None:
            d["shapes"] = tuple(tuple(s) for s in d["shapes"])
        out.append(TaskSpec(**d))
    return out


def _provider(desc, dim):
    desc = desc or {"kind": "deterministic-hash"}
    return make_provider(desc.get("kind", "deterministic-hash"), desc.get("dim", dim), desc.get("path"))


def _emit(report, out):
    print(format_matrix(report))
    print(f"trainable parameters {report['trainable_params']} / {report['total_params']}")
    print(f"artifacts in {out}")


# ------------------------------------------------------------------ commands


def cmd_train(args):
    cfg = load_config(args.config, seed=args.seed, profile=args.profile, out=args.out)
    model = SegBackbone(cfg.model)
    provider = _provider(cfg.provider, cfg.model.d_txt)
    res = run_continual(cfg.plan, model=model, out_dir=cfg.out, provider=provider, data_dirs=cfg.data_dirs)
    _emit(res.report, cfg.out)
    return 0


def cmd_continue(args):
    model, registry, meta = load_checkpoint(args.checkpoint)
    raw = read_yaml(args.config)
    _check_keys(raw, {"steps", "optim", "gating", "out", "seed", "warm_start", "support_shots",
                      "cache_inputs", "checkpoint_every"}, "config-delta")
    prev = dict(meta.get("plan", {}))
    kw, _ = plan_kwargs(raw, int(raw.get("seed", prev.get("seed", 0)) if args.seed is None else args.seed))
    prev.update(kw)
    steps, dirs = parse_steps(raw.get("steps"), model.cfg.image_size, prev["seed"])
    plan = RunPlan(steps, **prev)
    out = args.out or raw.get("out") or str(Path(args.checkpoint).parent)
    data_dirs = {**meta.get("data_dirs", {}), **dirs}
    res = run_continual(plan, model=model, registry=registry, out_dir=out,
                        provider=_provider(meta.get("embedding_provider"), model.cfg.d_txt),
                        prior_specs=_specs_from_meta(meta), prior_labels=meta.get("label_sets", []),
                        data_dirs=data_dirs)
    _emit(res.report, out)
    return 0


def _eval_sets(meta, args):
    """``[(task spec or None, images, masks)]`` to evaluate."""
    specs = _specs_from_meta(meta)
    if args.data:
        samples = load_folder_dataset(args.data)
        if not samples:
            raise ValidationError(f"dataset {args.data} is empty")
        x, y = stack(samples)
        labels = set(meta["label_sets"][-1]) | {0} if meta.get("label_sets") else {0}
        bad = sorted(set(np.unique(y).tolist()) - labels)
        if bad:
            raise ValidationError(f"dataset {args.data} holds label id {bad[0]} unknown to the checkpoint")
        spec = next((s for s in specs if s.task_id == args.task), None)
        return [(spec, x, y)]
    if args.task is not None:
        specs = [s for s in specs if s.task_id == args.task]
        if not specs:
            raise ValidationError(f"task {args.task!r} is not in the checkpoint")
    out = []
    for s in specs:
        x, y = stack(load_split(s, "test", meta.get("data_dirs")))
        out.append((s, x, y))
    return out


def cmd_eval(args):
    model, registry, meta = load_checkpoint(args.checkpoint)
    ids = [e.task_id for e in registry.entries]
    report = {"checkpoint": str(args.checkpoint), "tasks": {}}
    confusion = {}
    correct = total = 0
    for spec, x, y in _eval_sets(meta, args):
        classes = list(spec.classes) if spec else sorted(set(np.unique(y).tolist()) - {0})
        name = spec.task_id if spec else "data"
        if model.cfg.mode == "class":
            upto = model.merged_upto or model.num_experts
            pred = predict_batched(model, x, upto=upto, routing="top1")
        elif args.task is not None or model.merged_upto is not None:
            upto = model.merged_upto or registry.by_task(args.task).expert
            pred = predict_batched(model, x, upto=upto)
        else:
            experts = np.array([classify_task(im, registry) for im in x])
            pred = np.zeros_like(y)
            for e in np.unique(experts):
                idx = np.flatnonzero(experts == e)
                pred[idx] = predict_batched(model, x[idx], upto=int(e))
            if spec is not None and spec.task_id in ids:
                truth = ids.index(spec.task_id) + 1
                correct += int(np.sum(experts == truth))
                total += len(x)
            confusion[name] = {ids[int(e) - 1]: int(np.sum(experts == e)) for e in np.unique(experts)}
        pc = per_class_dice(pred, y, classes)
        report["tasks"][name] = {"per_class": {str(c): v for c, v in pc.items()},
                                 "mean": float(np.mean(list(pc.values())))}
        print(f"task {name}: mean dice {report['tasks'][name]['mean']:.4f}  "
              + "  ".join(f"class {c}: {v:.4f}" for c, v in pc.items()))
    if confusion:
        report["task_confusion"] = confusion
        for name, row in confusion.items():
            print(f"routed {name}: " + ", ".join(f"{k}={v}" for k, v in row.items()))
    if total:
        report["classifier_accuracy"] = correct / total
        print(f"classifier accuracy {correct}/{total} = {correct / total:.4f}")
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=1, sort_keys=True))
    return 0


def inspect_summary(model, registry, meta):
    experts = meta["experts"]
    adapters = [r for r in experts if r["adapters"]]
    return {
        "mode": model.cfg.mode,
        "step": meta.get("step"),
        "experts": len(adapters),
        "frozen_experts": sum(1 for r in adapters if r["frozen"]),
        "heads": len(experts),
        "expert_records": experts,
        "trainable_params": trainable_param_count(model.parameters()),
        "total_params": total_param_count(model.parameters()),
        "label_sets": meta.get("label_sets", []),
        "prompts": [r.get("prompt") for r in experts],
        "tasks": [e.task_id for e in registry.entries],
        "merged_upto": meta.get("merged_upto"),
        "model": meta["model"],
    }


def cmd_inspect(args):
    model, registry, meta = load_checkpoint(args.checkpoint)
    s = inspect_summary(model, registry, meta)
    if args.json:
        print(json.dumps(s, indent=1, sort_keys=True))
        return 0
    print(f"mode {s['mode']}  step {s['step']}  merged_upto {s['merged_upto']}")
    print(f"experts {s['experts']}  frozen {s['frozen_experts']}  heads {s['heads']}")
    for r in s["expert_records"]:
        print(f"  expert {r['id']}: classes {r['classes']} frozen={r['frozen']} adapters={r['adapters']}"
              f" prompt={r['prompt']!r}")
    frac = s["trainable_params"] / s["total_params"]
    print(f"parameters trainable {s['trainable_params']} total {s['total_params']} ({100 * frac:.2f}%)")
    for i, y in enumerate(s["label_sets"], start=1):
        print(f"label set Y^{i}: {y}")
    return 0


def cmd_merge(args):
    model, registry, meta = load_checkpoint(args.checkpoint)
    if args.upto is not None:
        upto = args.upto
    elif args.task is not None:
        upto = registry.by_task(args.task).expert
    else:
        upto = model.num_experts
    merged = merge_model(model, upto)
    extra = {k: v for k, v in meta.items()
             if k not in {"format", "model", "experts", "frozen", "merged_upto", "registry", "tensors"}}
    out = args.out or str(Path(args.checkpoint).with_suffix(f".merged{upto}.lmoe"))
    save_checkpoint(out, merged, registry, extra=extra)
    print(f"merged experts 1..{upto} into {out}")
    return 0


def cmd_classify(args):
    model, registry, meta = load_checkpoint(args.checkpoint)
    ids = [e.task_id for e in registry.entries]
    correct = total = 0
    for spec, x, _ in _eval_sets(meta, args):
        guess = np.array([classify_task(im, registry) for im in x])
        counts = {ids[int(e) - 1]: int(np.sum(guess == e)) for e in np.unique(guess)}
        name = spec.task_id if spec else "data"
        print(f"{name}: " + ", ".join(f"{k}={v}" for k, v in counts.items()))
        if spec is not None and spec.task_id in ids:
            correct += int(np.sum(guess == ids.index(spec.task_id) + 1))
            total += len(x)
    if total:
        print(f"classifier accuracy {correct}/{total} = {correct / total:.4f}")
    return 0


# -------------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="lomoe", description="Low-rank expert continual segmentation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(fn=fn)
        return sp

    sp = add("train", cmd_train, "run every step of a config from scratch")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--profile", choices=["desk", "paper-dims"])

    sp = add("continue", cmd_continue, "append and train experts for new steps")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--config", required=True, help="YAML delta holding the new steps")
    sp.add_argument("--out")
    sp.add_argument("--seed", type=int)

    for name, fn, help_ in (("eval", cmd_eval, "per-class Dice on test data"),
                            ("classify", cmd_classify, "task classification of test images")):
        sp = add(name, fn, help_)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--task", help="task id; skips automatic task routing")
        sp.add_argument("--data", help="folder dataset to evaluate instead of the stored test splits")
        sp.add_argument("--out", help="write a JSON report here")

    sp = add("inspect", cmd_inspect, "summarise a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--json", action="store_true")

    sp = add("merge", cmd_merge, "fold a task's expert stack into dense weights")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--upto", type=int)
    sp.add_argument("--task")
    sp.add_argument("--out")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except LomoeError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except KeyError as exc:
        print(f"error: unknown key {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
