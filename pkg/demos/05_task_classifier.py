"""
Picking the task of an unseen image
===================================

Eight support images per task define a centroid in a fixed histogram
feature space. A query goes to the task with the closest centroid.
"""

import numpy as np

from lomoe import tensor as T
from lomoe.data import TaskSpec, gen_task_dataset
from lomoe.gating import TaskRegistry, classify_task, select_support

specs = [TaskSpec("A", (1, 2), profile="cardiac"), TaskSpec("B", (3,), profile="dermoscopy"),
         TaskSpec("C", (4,), profile="ct")]
registry = TaskRegistry()
for e, spec in enumerate(specs, start=1):
    train = gen_task_dataset(spec, "train")
    idx = select_support(len(train), T.Rng(0).spawn("support", spec.task_id))
    registry.register(spec.task_id, e, [train[i].image for i in idx], spec.classes, support=idx)

confusion = np.zeros((3, 3), dtype=int)
for e, spec in enumerate(specs, start=1):
    for s in gen_task_dataset(spec, "test"):
        confusion[e - 1, classify_task(s.image, registry) - 1] += 1
print("rows = true task, columns = predicted")
print(confusion)
print(f"accuracy {np.trace(confusion) / confusion.sum():.3f}")
