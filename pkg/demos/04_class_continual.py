"""
Class-level continual segmentation
==================================

Step 1 learns four organs. Step 2 adds a tumour class with a new expert,
a new gate projection and a new head. At test time every token goes to the
single expert whose gate weight is highest.
"""

import numpy as np

from lomoe.data import TaskSpec, gen_task_dataset, stack
from lomoe.model import ModelConfig, SegBackbone, top1_route
from lomoe.training import RunPlan, StepPlan, run_continual, token_targets

cfg = ModelConfig(mode="class", image_size=16, d_model=64, heads=2, n_blocks=2, rank=4, d_txt=16)
organs = TaskSpec("organs", (1, 2, 3, 4), profile="abdomen", n_train=80, n_test=20, image_size=16)
tumour = TaskSpec("tumour", (5,), profile="tumor", n_train=80, n_test=20, image_size=16)

plan = RunPlan([StepPlan(organs, epochs=8), StepPlan(tumour, epochs=8)], mode="class", base_lr=0.01,
               warmup_epochs=1)
res = run_continual(plan, model=SegBackbone(cfg))

for row in res.report["steps"]:
    print(f"step {row['step']} label set {row['label_set']}")
    for task, per in row["per_class"].items():
        print(f"  {task}: " + ", ".join(f"class {c} {v:.3f}" for c, v in per.items()))
print("organ view unchanged after step 2:", res.report["steps"][1]["retention_bitwise"])

# Where do tumour tokens go in the last block?
x, y = stack(gen_task_dataset(tumour, "test"))
trace = []
res.model.logits(x, upto=2, routing="top1", trace=trace)
inside = token_targets(y, [5], cfg.patch)[..., 0] > 0
share = float(np.mean(top1_route(trace[-1].data)[inside] == 2))
print(f"tumour tokens routed to expert 2: {share:.2f}")
