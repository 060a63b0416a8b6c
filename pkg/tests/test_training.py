import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lomoe import tensor as T
from lomoe.data import TaskSpec
from lomoe.errors import ConfigError, ContractError, FreezeViolation, NumericalError
from lomoe.training import (FreezeAudit, OptimState, RunPlan, Schedule, StepPlan, adamw_step, dice_score,
                            format_matrix, lr_at, mean_dice, seg_loss, token_targets)


# ------------------------------------------------------------- optimiser

def test_adamw_zero_grad_decay():
    p = T.Tensor([2.0, -4.0], requires_grad=True)
    p.grad = np.zeros(2)
    adamw_step([p], OptimState(lr=0.1, weight_decay=0.5))
    assert np.allclose(p.data, [2.0 * 0.95, -4.0 * 0.95])


def test_adamw_first_step_arithmetic():
    with T.precision(np.float64):
        p = T.Tensor([1.0], requires_grad=True)
    p.grad = np.array([0.1])
    adamw_step([p], OptimState(lr=0.001))
    assert abs((p.data[0] - 1.0) - (-0.001 * 0.1 / (0.1 + 1e-8))) < 1e-15


def test_adamw_frozen_untouched():
    p = T.Tensor([1.0, 2.0])
    p.grad = np.array([5.0, 5.0])
    st_ = OptimState(lr=0.1)
    adamw_step([p], st_)
    assert np.array_equal(p.data, [1.0, 2.0]) and not st_.m


def test_adamw_nan_gradient():
    p = T.Tensor([1.0], requires_grad=True)
    p.grad = np.array([np.nan])
    with pytest.raises(NumericalError, match="non-finite"):
        adamw_step([p], OptimState())


# ---------------------------------------------------------------- schedule

def test_schedule_examples():
    s = Schedule(1e-3, 0.0, 10, 100)
    assert lr_at(s, 10) == 1e-3
    assert abs(lr_at(s, 55) - 0.5e-3) < 1e-15
    assert lr_at(s, 0) == 1e-4
    with pytest.raises(ContractError):
        lr_at(s, 100)
    with pytest.raises(ContractError):
        lr_at(s, -1)


def test_schedule_end_reaches_min():
    # the cosine argument reaches pi one step past the last epoch
    s = Schedule(1e-3, 1e-5, 10, 100)
    span = s.total_epochs - s.warmup_epochs
    end = s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1 + math.cos(math.pi * span / span))
    assert end == pytest.approx(1e-5)
    assert lr_at(s, 99) > s.min_lr


@given(st.floats(1e-5, 1.0), st.integers(1, 30), st.integers(1, 100))
def test_schedule_properties(base, warm, extra):
    s = Schedule(base, 0.0, warm, warm + extra)
    assert abs(lr_at(s, warm - 1) - lr_at(s, warm)) <= 1e-12
    lrs = [lr_at(s, e) for e in range(s.total_epochs)]
    assert all(v >= 0 for v in lrs)
    assert all(a >= b for a, b in zip(lrs[warm:], lrs[warm + 1:]))


# ------------------------------------------------------------------ metrics

def test_dice_examples():
    a = np.zeros((10, 20), dtype=int)
    a[:5] = 1
    assert dice_score(a, a, 1) == 1.0
    assert dice_score(a, 1 - a, 1) == 0.0
    b = np.zeros_like(a)
    b[:, :10] = 1
    assert dice_score(a, b, 1) == 0.5
    assert dice_score(np.zeros((2, 2)), np.zeros((2, 2)), 3) == 1.0
    with pytest.raises(ContractError):
        dice_score(a, a[:2], 1)


@given(st.integers(0, 2**31), st.integers(1, 3))
def test_dice_symmetry_relabel(seed, c):
    rng = T.Rng(seed)
    p = rng.integers(0, 4, (6, 6))
    t = rng.integers(0, 4, (6, 6))
    assert dice_score(p, t, c) == dice_score(t, p, c)
    perm = np.array([3, 0, 2, 1])
    assert dice_score(perm[p], perm[t], perm[c]) == dice_score(p, t, c)


def test_mean_dice():
    a = np.array([[1, 2], [0, 0]])
    assert mean_dice(a, a, [1, 2]) == 1.0


# -------------------------------------------------------------------- loss

def test_loss_one_hot_correct_is_zero():
    mask = np.array([[0, 1], [2, 1]])
    probs = (mask[..., None] == np.arange(3)).astype(np.float64)
    with T.precision(np.float64):
        log_p = T.Tensor(np.where(probs > 0, 0.0, -1e30))
        loss = seg_loss(T.Tensor(probs), mask, [0, 1, 2], log_probs=log_p)
    assert abs(loss.item()) < 1e-12


def test_loss_uniform_ce_is_log_c():
    mask = np.array([[0, 1], [2, 1]])
    with T.precision(np.float64):
        z = T.Tensor(np.zeros((2, 2, 3)))
        ce_only = -T.tsum(T.log_softmax(z) * T.Tensor((mask[..., None] == np.arange(3)) * 1.0)).item() / 4
        loss = seg_loss(T.softmax(z), mask, [0, 1, 2])
    assert abs(ce_only - math.log(3)) < 1e-12
    assert loss.item() > math.log(3) - 1e-9


def test_loss_nonnegative_and_mismatch():
    rng = T.Rng(0)
    z = T.Tensor(rng.normal((3, 4, 4, 2)))
    m = rng.integers(0, 2, (3, 4, 4))
    assert seg_loss(T.softmax(z), m, [0, 1]).item() >= 0
    with pytest.raises(ContractError):
        seg_loss(T.softmax(z), m, [0, 1, 2])


def test_loss_decreases_on_fixed_sample():
    rng = T.Rng(1)
    w = T.Tensor(rng.normal((3, 5)) * 0.1, requires_grad=True)
    x = T.Tensor(rng.normal((4, 4, 5)))
    m = rng.integers(0, 3, (4, 4))
    st_ = OptimState(lr=0.05)
    losses = []
    for _ in range(50):
        z = T.linear(x, w)
        loss = seg_loss(T.softmax(z), m, [0, 1, 2], log_probs=T.log_softmax(z))
        losses.append(loss.item())
        T.backward(loss)
        adamw_step([w], st_)
        w.grad = None
    assert losses[-1] < losses[0]


# ------------------------------------------------------------------- misc

def test_freeze_audit():
    a = T.Tensor([1.0, 2.0])
    b = T.Tensor([3.0], requires_grad=True)
    audit = FreezeAudit([("a", a), ("b", b)])
    b.data[0] = 9
    audit.verify([("a", a), ("b", b)])
    a.data[0] = 1.5
    with pytest.raises(FreezeViolation):
        audit.verify([("a", a), ("b", b)])


def test_token_targets():
    m = np.zeros((1, 8, 8), dtype=int)
    m[0, 5, 1] = 3
    t = token_targets(m, [3], 4)
    assert t.shape == (1, 4, 1)
    assert t[0, :, 0].tolist() == [0, 0, 1, 0]


def test_run_plan_label_sets():
    steps = [StepPlan(TaskSpec("a", (1, 2))), StepPlan(TaskSpec("b", (3,)))]
    assert RunPlan(steps).label_sets() == [[1, 2], [1, 2, 3]]
    with pytest.raises(ConfigError):
        RunPlan([StepPlan(TaskSpec("a", (1,))), StepPlan(TaskSpec("b", (1,)))])
    with pytest.raises(ConfigError):
        RunPlan(steps, mode="pixel")


def test_format_matrix():
    rep = {"tasks": ["A", "B"], "dice_matrix": [[0.5, None], [0.5, 0.25]],
           "steps": [{"step": 1}, {"step": 2}]}
    lines = format_matrix(rep).splitlines()
    assert lines[1].split() == ["1", "0.5000", "-"]
    assert lines[2].split() == ["2", "0.5000", "0.2500"]
