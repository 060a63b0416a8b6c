"""Acceptance gate: one PASS/FAIL line per criterion, at full desk scale.

The heavy runs go through the real CLI with the desk profile and are shared
between criteria via module fixtures. Expect roughly 6-8 minutes on one core.
"""

import json
import time

import numpy as np
import pytest
import yaml

from lomoe import tensor as T
from lomoe.checkpoint import load_checkpoint, parse
from lomoe.cli import inspect_summary, main
from lomoe.data import TaskSpec, gen_task_dataset, stack
from lomoe.gating import add_expert, classify_task
from lomoe.model import ModelConfig, SegBackbone
from lomoe.training import logits_batched, per_class_dice, predict_batched, seg_loss

from conftest import record_verdict, rel_err
from test_tensor import BINARY, UNARY, _trial

pytestmark = pytest.mark.slow

TASKS = [
    {"task": "A", "classes": [1, 2], "profile": "cardiac"},
    {"task": "B", "classes": [3], "profile": "dermoscopy"},
    {"task": "C", "classes": [4], "profile": "ct"},
]
CLASS_STEPS = [
    {"task": "abd", "classes": [1, 2, 3, 4], "profile": "abdomen"},
    {"task": "tum", "classes": [5], "profile": "tumor"},
]
EPOCHS = 10


def _config(out, steps, mode="task"):
    return {"profile": "desk", "mode": mode, "seed": 0, "out": str(out),
            "optim": {"base_lr": 0.003, "warmup_epochs": 2},
            "steps": [{**s, "epochs": EPOCHS} for s in steps]}


def _train(tmp, name, steps, mode="task"):
    path = tmp / f"{name}.yaml"
    path.write_text(yaml.safe_dump(_config(tmp / name, steps, mode)))
    t0 = time.perf_counter()
    assert main(["train", "--config", str(path)]) == 0
    return tmp / name, time.perf_counter() - t0


def _report(run):
    return json.loads((run / "report.json").read_text())


def _spec(step):
    return TaskSpec(step["task"], tuple(step["classes"]), profile=step["profile"], seed=0)


@pytest.fixture(scope="module")
def tmp(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module")
def task_run(tmp):
    return _train(tmp, "task", TASKS)


@pytest.fixture(scope="module")
def class_run(tmp):
    return _train(tmp, "class", CLASS_STEPS, mode="class")


# ------------------------------------------------------------------ criteria


def test_1_forgetting_free(task_run):
    run, seconds = task_run
    rep = _report(run)
    col = [row[0] for row in rep["dice_matrix"]]
    x, _ = stack(gen_task_dataset(_spec(TASKS[0]), "test")[:20])
    held = []
    for step in (1, 2, 3):
        model, _, _ = load_checkpoint(run / f"step{step}.lmoe")
        held.append(logits_batched(model, x, upto=1).tobytes())
    ok_dice = col[0] == col[1] == col[2]
    ok_logits = held[0] == held[1] == held[2]
    ok = ok_dice and ok_logits and seconds < 900
    record_verdict(1, "forgetting-freeness", ok,
                   f"task A dice per step {col}, logits bit-identical {ok_logits}, {seconds:.0f}s")
    assert ok


def test_2_zero_init_neutral():
    rng = T.Rng(2)
    x = rng.uniform((100, 32, 32))
    worst = 0.0
    for mode in ("task", "class"):
        model = SegBackbone(ModelConfig(mode=mode))
        tau = lambda k: (lambda v: v / np.linalg.norm(v))(rng.spawn("tau", k).normal((32,)))  # noqa: E731
        add_expert(model, [1], rng.spawn(mode, 1), tau=tau(1) if mode == "class" else None)
        for t in model.parameters():
            if t.requires_grad:
                t.data = (t.data + 0.05 * rng.normal(t.shape)).astype(np.float32)
        before = logits_batched(model, x, upto=1)
        add_expert(model, [2], rng.spawn(mode, 2), tau=tau(2) if mode == "class" else None)
        after = logits_batched(model, x, upto=2, head=1) if mode == "task" else \
            logits_batched(model, x, upto=2, routing="soft", expert_mask=[1], head=1)
        worst = max(worst, float(np.max(np.abs(after - before))),
                    float(np.max(np.abs(logits_batched(model, x, upto=1) - before))))
    record_verdict(2, "zero-init neutrality", worst == 0.0, f"max abs diff {worst}")
    assert worst == 0.0


def test_3_trainable_share(task_run, capsys):
    run, _ = task_run
    shares = []
    for step in (1, 2, 3):
        ck = run / f"step{step}.lmoe"
        capsys.readouterr()
        assert main(["inspect", "--checkpoint", str(ck), "--json"]) == 0
        s = json.loads(capsys.readouterr().out)
        meta, tensors = parse(ck.read_bytes())
        # recount from the raw tensor table: only the newest expert's tensors train
        trainable = sum(a.size for n, a in tensors.items() if f"expert{step}." in n)
        total = sum(a.size for n, a in tensors.items() if not n.startswith("text."))
        assert s["trainable_params"] == trainable and s["total_params"] == total
        shares.append(trainable / total)
    ok = max(shares) < 0.05
    record_verdict(3, "trainable-parameter share", ok, "per step " + ", ".join(f"{100 * v:.2f}%" for v in shares))
    assert ok


def test_4_dice_and_single_step(task_run, tmp):
    run, _ = task_run
    rep = _report(run)
    diag = [rep["dice_matrix"][k][k] for k in range(3)]
    frozen_cols = all(rep["dice_matrix"][r][k] == diag[k] for k in range(3) for r in range(k, 3))
    single, _ = _train(tmp, "single", TASKS[:1])
    single_dice = _report(single)["dice_matrix"][0][0]
    ok = min(diag) >= 0.85 and frozen_cols and single_dice == diag[0]
    record_verdict(4, "synthetic dice and single-step equality", ok,
                   f"own-step dice {[round(v, 4) for v in diag]}, columns constant {frozen_cols}, "
                   f"single-step A {single_dice} vs continual {diag[0]}")
    assert ok


def test_5_task_classifier(task_run):
    run, _ = task_run
    _, registry, _ = load_checkpoint(run / "step3.lmoe")
    queries, truth = [], []
    for e, step in enumerate(TASKS, start=1):
        spec = TaskSpec(step["task"], tuple(step["classes"]), profile=step["profile"], seed=0, n_test=100)
        queries += [s.image for s in gen_task_dataset(spec, "test")]
        truth += [e] * 100
    first = np.array([classify_task(im, registry) for im in queries])
    _, again_reg, _ = load_checkpoint(run / "step3.lmoe")
    second = np.array([classify_task(im, again_reg) for im in queries])
    acc = float(np.mean(first == np.array(truth)))
    shots = [len(e.support) for e in registry.entries]
    ok = acc >= 0.95 and np.array_equal(first, second) and shots == [8, 8, 8]
    record_verdict(5, "task classifier", ok, f"accuracy {acc:.4f} on {len(queries)} queries, shots {shots}")
    assert ok


def test_6_gradients():
    t0 = time.perf_counter()
    with T.precision(np.float64):
        per_op = max(_trial(op, 1 if op in UNARY else 2, s) for op in sorted({**UNARY, **BINARY}) for s in range(5))
        cfg = ModelConfig(image_size=8, patch=4, d_model=16, heads=2, n_blocks=2, rank=2, d_txt=8)
        model = SegBackbone(cfg)
        rng = T.Rng(6)
        for e in (1, 2):
            add_expert(model, [e], rng.spawn(e))
            for t in model.parameters():
                if t.requires_grad:
                    t.data = t.data + 0.1 * rng.normal(t.shape)
        x = rng.uniform((2, 8, 8))
        y = (x > 0.5).astype(np.int64) * 2

        def loss():
            z = model.logits(x, upto=2)
            return seg_loss(T.softmax(z), y, [0, 2], log_probs=T.log_softmax(z))

        params = [p for p in model.parameters() if p.requires_grad]
        T.backward(loss())
        auto, num = [], []
        for k in range(20):
            p = params[int(rng.integers(0, len(params), size=1)[0])]
            j = tuple(int(rng.integers(0, n, size=1)[0]) for n in p.shape)
            auto.append(p.grad[j])
            old = p.data[j]
            p.data[j] = old + 1e-5
            up = loss().item()
            p.data[j] = old - 1e-5
            down = loss().item()
            p.data[j] = old
            num.append((up - down) / 2e-5)
        e2e = rel_err(np.array(auto), np.array(num))
    seconds = time.perf_counter() - t0
    ok = per_op <= 1e-4 and e2e <= 1e-3 and seconds < 60
    record_verdict(6, "gradient correctness", ok, f"per-op {per_op:.2e}, end-to-end {e2e:.2e}, {seconds:.1f}s")
    assert ok


def test_7_merge_equivalence(task_run, tmp, capsys):
    run, _ = task_run
    model, _, meta = load_checkpoint(run / "step3.lmoe")
    worst, dice_same = 0.0, True
    for k, step in enumerate(TASKS, start=1):
        out = tmp / f"merged{k}.lmoe"
        assert main(["merge", "--checkpoint", str(run / "step3.lmoe"), "--upto", str(k), "--out", str(out)]) == 0
        dense, _, _ = load_checkpoint(out)
        x, y = stack(gen_task_dataset(_spec(step), "test"))
        a = logits_batched(dense, x, upto=k).astype(np.float64)
        b = logits_batched(model, x, upto=k).astype(np.float64)
        worst = max(worst, float(np.mean(np.abs(a - b))))
        da = per_class_dice(predict_batched(dense, x, upto=k), y, step["classes"])
        db = per_class_dice(predict_batched(model, x, upto=k), y, step["classes"])
        dice_same &= all(round(da[c], 4) == round(db[c], 4) for c in da)
    capsys.readouterr()
    ok = worst <= 1e-6 and dice_same
    record_verdict(7, "merge equivalence", ok, f"worst mean abs logit diff {worst:.2e}, dice equal {dice_same}")
    assert ok


def test_8_class_retention(class_run):
    run, seconds = class_run
    rep = _report(run)
    m1, _, _ = load_checkpoint(run / "step1.lmoe")
    m2, _, _ = load_checkpoint(run / "step2.lmoe")
    frozen = all(a.data.tobytes() == b.data.tobytes()
                 for a, b in zip(m1.expert_tensors(1), m2.expert_tensors(1)))
    step1, step2 = rep["steps"]
    same_dice = step1["per_class"]["abd"] == step2["per_class"]["abd"]
    bitwise = step2["retention_bitwise"]["abd"]
    new = step2["dice"]["tum"]
    ok = frozen and same_dice and bitwise and new >= 0.70 and seconds < 600
    combined = {c: round(v, 3) for c, v in step2["combined_top1_per_class"]["abd"].items()}
    record_verdict(8, "class-level retention", ok,
                   f"step-1 tensors unchanged {frozen}, per-class dice unchanged {same_dice}, "
                   f"new-class dice {new:.3f}, combined top-1 old classes {combined}, {seconds:.0f}s")
    assert ok


def test_9_determinism(task_run, tmp):
    run, _ = task_run
    rerun, _ = _train(tmp, "task_rerun", TASKS)
    ck_same = all((run / f"step{k}.lmoe").read_bytes() == (rerun / f"step{k}.lmoe").read_bytes() for k in (1, 2, 3))
    a, b = _report(run), _report(rerun)
    rep_same = a == b
    ok = ck_same and rep_same
    record_verdict(9, "determinism", ok, f"checkpoints byte-identical {ck_same}, reports identical {rep_same}")
    assert ok
