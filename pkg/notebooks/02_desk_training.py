"""
Desk-scale training and weight tracking
=======================================

Train conv, SA and LESA backbones on the synthetic texture/layout dataset,
then measure how much softmax weight the SA layers keep on the query's own
location and what happens to accuracy when that term is removed.

The defaults here are shrunk (16x16 images, a few epochs) so the script
finishes in a couple of minutes. Set ``FULL = True`` for the 32x32,
20-epoch setting used by the acceptance suite (about 45 minutes on one core).
"""

# %%
import time

import numpy as np
from threadpoolctl import threadpool_limits

from lesa.data import generate_splits
from lesa.instrument import run_unary_ablation, run_weight_tracking
from lesa.model import BackboneSpec, build_backbone
from lesa.trainer import OptimConfig, train

FULL = False
if FULL:
    size, n_train, n_eval, epochs, blocks = 32, 5000, 1000, 20, [2, 2, 2, 2]
else:
    size, n_train, n_eval, epochs, blocks = 16, 1000, 300, 4, [1, 1, 2, 1]

train_set, eval_set = generate_splits(10, n_train, n_eval, size, seed=0)
print(train_set.images.shape, np.bincount(train_set.labels))

# %% [markdown]
# The three backbones differ only in the spatial operator of stages 3 and 4.

# %%
models = {}
with threadpool_limits(limits=1):
    for op in ("conv", "sa", "lesa"):
        spec = BackboneSpec.with_ops(op, input_size=size, stage_blocks=blocks)
        model = build_backbone(spec, seed=0)
        t0 = time.perf_counter()
        state = train(model, train_set.as_tuple(), eval_set.as_tuple(),
                      OptimConfig(total_epochs=epochs, warmup_epochs=1 if not FULL else 5), seed=0)
        models[op] = model
        print(f"{op:5s} params {model.num_parameters():7d}  eval acc {state.history[-1]['eval_acc']:.3f}"
              f"  ({time.perf_counter() - t0:.0f}s)")

# %% [markdown]
# Per-layer unary share of the trained SA model, then the ablation.

# %%
report = run_weight_tracking(models["sa"], eval_set.as_tuple())
print(report.to_csv())
print(f"overall unary {report.overall_unary_pct:.2f}%")

for renorm in (False, True):
    res = run_unary_ablation(models["sa"], eval_set.as_tuple(), renormalize=renorm)
    print(f"renormalize={renorm}: baseline {res.baseline_accuracy:.3f} -> ablated {res.ablated_accuracy:.3f}")

# %%
lesa_report = run_weight_tracking(models["lesa"], eval_set.as_tuple())
print(f"LESA overall unary {lesa_report.overall_unary_pct:.2f}%  binary {lesa_report.overall_binary_pct:.2f}%")
