"""Build a nested U-Net, look at its wiring, and prune it.

Node X^{i,j} lives at resolution level i. Pruning to level d keeps only
the nodes with i + j <= d and reads the mask from head d, so the small
model gives exactly the output the big one produces at that head.
"""
import numpy as np

from nseg import network as N

cfg = N.GraphConfig(depth=4, base_channels=8)
print("nodes in evaluation order:")
for node in N.evaluation_order(cfg):
    sources = ", ".join(str(s) for s in N.node_inputs(node, cfg))
    print(f"  {node}  <-  {sources}")

print("\nparameter budget per prune level (closed form):")
for d, count, pct in N.reduction_table(cfg):
    print(f"  d={d}: {count:7d} parameters ({pct:5.1f}% fewer than the full model)")

model = N.build_graph(cfg, seed=0)
rng = np.random.default_rng(0)
# heads start at zero; give them random weights so the outputs differ
model = model.with_state({k: rng.standard_normal(v.shape).astype(v.dtype) if k.startswith("head") else v
                          for k, v in model.params.items()})
x = rng.random((1, 1, 64, 64)).astype(np.float32)
full = N.forward(model, x, "infer")
small = N.prune(model, 1)
print(f"\npruned to d=1: {small.n_parameters()} of {model.n_parameters()} parameters kept")
same = N.forward(small, x, "infer").final.tobytes() == full.outputs[0].tobytes()
print("pruned output bitwise equal to head 1 of the full model:", same)
