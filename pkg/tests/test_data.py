import itertools
import logging

import numpy as np
import pytest

from lomoe.data import (DataVault, TaskSpec, accumulate_labels, gen_task_dataset, load_folder_dataset, read_array,
                        save_folder_dataset, stack, write_array)
from lomoe.errors import ConfigError, ContractError, ParseError, StateError, ValidationError

PROFILES = {"cardiac": (1, 2), "dermoscopy": (3,), "ct": (4,), "abdomen": (1, 2, 3, 4), "tumor": (5,)}


def test_determinism():
    spec = TaskSpec("a", (1, 2), profile="cardiac", n_train=20)
    assert gen_task_dataset(spec) == gen_task_dataset(spec)
    other = TaskSpec("a", (1, 2), profile="cardiac", n_train=20, seed=1)
    assert gen_task_dataset(spec) != gen_task_dataset(other)


def test_splits_differ():
    spec = TaskSpec("a", (1,), profile="ct", n_train=5, n_test=5)
    assert gen_task_dataset(spec, "train") != gen_task_dataset(spec, "test")
    with pytest.raises(ContractError):
        gen_task_dataset(spec, "holdout")


def test_empty_vocabulary_all_background():
    spec = TaskSpec("a", (1,), profile="ct", shapes=(), n_train=5)
    assert all(not s.mask.any() for s in gen_task_dataset(spec))


@pytest.mark.parametrize("profile", sorted(PROFILES))
def test_sample_invariants(profile):
    data = gen_task_dataset(TaskSpec("t", PROFILES[profile], profile=profile))
    fg = np.array([(s.mask > 0).mean() for s in data])
    assert 0.05 <= fg.min() and fg.max() <= 0.40
    for s in data:
        assert s.image.dtype == np.float32 and 0 <= s.image.min() and s.image.max() <= 1
        assert set(np.unique(s.mask)) <= {0, *PROFILES[profile]}


@pytest.mark.parametrize("a,b", list(itertools.combinations(["cardiac", "dermoscopy", "ct"], 2))
                         + [("abdomen", "tumor")])
def test_profiles_separable(a, b):
    stats = []
    for p in (a, b):
        v = np.array([s.image.mean() for s in gen_task_dataset(TaskSpec("t", PROFILES[p], profile=p))],
                     dtype=np.float64)
        stats.append((v.mean(), v.std()))
    (ma, sa), (mb, sb) = stats
    assert (ma - mb) ** 2 / (sa ** 2 + sb ** 2) >= 3
    assert abs(ma - mb) >= 3 * max(sa, sb)


def test_spec_validation():
    with pytest.raises(ConfigError):
        TaskSpec("a", (0, 1))
    with pytest.raises(ConfigError):
        TaskSpec("a", (1,), profile="mri")
    with pytest.raises(ConfigError):
        TaskSpec("a", (1,), profile="ct", shapes=(("blob", 0.3), ("patches", 0.6)))
    # a profile with fewer classes than shapes draws only the first shapes
    assert len(TaskSpec("a", (1,), profile="cardiac").shape_vocabulary) == 1


def test_accumulate_labels():
    y = accumulate_labels([], [0, *range(1, 14)])
    assert len(accumulate_labels(y, [14])) == 15
    assert accumulate_labels([], [3, 1]) == [3, 1]
    assert accumulate_labels([1, 2], []) == [1, 2]
    assert accumulate_labels([0, 1], [0, 2]) == [0, 1, 2]
    with pytest.raises(ConfigError):
        accumulate_labels([1, 2], [2])


def test_folder_roundtrip(tmp_path):
    spec = TaskSpec("a", (1, 2), profile="cardiac", n_train=6)
    data = gen_task_dataset(spec)
    save_folder_dataset(tmp_path / "ds", data, spec.classes, task="a")
    assert load_folder_dataset(tmp_path / "ds", classes=spec.classes) == data


def test_folder_bad_label(tmp_path):
    spec = TaskSpec("a", (1,), profile="ct", n_train=3)
    data = gen_task_dataset(spec)
    data[1].mask[0, 0] = 7
    save_folder_dataset(tmp_path / "ds", data, spec.classes)
    with pytest.raises(ValidationError, match="label id 7"):
        load_folder_dataset(tmp_path / "ds")


def test_folder_empty_dir(tmp_path, caplog):
    (tmp_path / "empty").mkdir()
    with caplog.at_level(logging.WARNING):
        assert load_folder_dataset(tmp_path / "empty") == []
    assert "empty" in caplog.text


def test_folder_malformed(tmp_path):
    spec = TaskSpec("a", (1,), profile="ct", n_train=2)
    save_folder_dataset(tmp_path / "ds", gen_task_dataset(spec), spec.classes)
    bad = tmp_path / "ds" / "00001.img"
    bad.write_bytes(bad.read_bytes()[:-3])
    with pytest.raises(ParseError, match="00001.img"):
        load_folder_dataset(tmp_path / "ds")
    (tmp_path / "ds" / "manifest.json").write_text("{oops")
    with pytest.raises(ParseError):
        load_folder_dataset(tmp_path / "ds")


def test_array_header(tmp_path):
    arr = np.arange(6, dtype=np.uint16).reshape(2, 3)
    write_array(tmp_path / "m", arr, "u16")
    raw = (tmp_path / "m").read_bytes()
    assert raw.startswith(b"LMOT u16 2 3\n")
    assert np.array_equal(read_array(tmp_path / "m"), arr)
    (tmp_path / "x").write_bytes(b"nope")
    with pytest.raises(ParseError) as exc:
        read_array(tmp_path / "x")
    assert exc.value.offset == 0


def test_vault_blocks_closed_tasks():
    spec = TaskSpec("a", (1,), profile="ct", n_train=10)
    vault = DataVault()
    vault.add("a", gen_task_dataset(spec), [])
    vault.add("b", gen_task_dataset(spec), [])
    loader = vault.loader(1, "a", 4, __import__("lomoe").tensor.Rng(0))
    batches = list(loader.epoch())
    assert sum(len(x) for x, _ in batches) == 10
    vault.close("a")
    with pytest.raises(StateError):
        vault.loader(2, "a", 4, None)
    assert vault.tasks_seen_in_step(1) == {"a"}
    assert vault.tasks_seen_in_step(2) == set()


def test_stack_empty():
    with pytest.raises(ContractError):
        stack([])
