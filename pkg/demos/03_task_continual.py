"""
Task-level continual segmentation
=================================

Three synthetic "modalities" arrive one after another. Each step appends an
expert, trains only that expert, and re-evaluates every task seen so far.
Old columns of the Dice table never move.
"""

from lomoe.data import TaskSpec
from lomoe.model import ModelConfig, SegBackbone
from lomoe.training import RunPlan, StepPlan, format_matrix, run_continual

# A small backbone keeps this under a minute; the desk profile is the default otherwise.
cfg = ModelConfig(image_size=16, d_model=64, heads=2, n_blocks=2, rank=4, d_txt=8)

steps = [
    StepPlan(TaskSpec("A", (1, 2), profile="cardiac", n_train=120, n_test=20, image_size=16), epochs=12),
    StepPlan(TaskSpec("B", (3,), profile="dermoscopy", n_train=120, n_test=20, image_size=16), epochs=12),
    StepPlan(TaskSpec("C", (4,), profile="ct", n_train=120, n_test=20, image_size=16), epochs=12),
]
res = run_continual(RunPlan(steps, base_lr=0.01, warmup_epochs=1), model=SegBackbone(cfg))

print(format_matrix(res.report))
for row in res.report["steps"]:
    print(f"step {row['step']}: classifier accuracy {row['classifier_accuracy']:.3f}, "
          f"bitwise retention {row['retention_bitwise']}")
print(f"trainable {res.report['trainable_params']} of {res.report['total_params']} parameters")
