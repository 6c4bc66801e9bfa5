"""Run the dual-channel model and inspect its attention maps.

Each layer runs atom self-attention, bond self-attention, then the two cross
steps: atoms attend over their incident bonds and bonds attend over their two
endpoint atoms. Every weight row is a masked softmax, so rows sum to one (or
to zero when a query has no permitted keys).
"""

import numpy as np

from demol.fixtures import water
from demol.model import Model, ModelConfig

np.set_printoptions(precision=3, suppress=True)

model = Model(
    ModelConfig(d_a=16, d_b=16, d_h=8, n_heads=2, n_layers=2, ffn_multiplier=2,
                kernels=8, max_spd=5, n_length_buckets=4, elements=("H", "O")),
    seed=42,
)
mol = water()
fwd = model.forward(mol, collect_attention=True)

print(f"prediction for {mol.name}: {fwd.prediction.item():+.6f} eV")
print(f"atom embeddings {fwd.embeddings.h_atom.value.shape}, "
      f"bond embeddings {fwd.embeddings.h_bond.value.shape}")
print()

for rec in fwd.attention:
    if rec.layer != 0 or rec.head != 0:
        continue
    print(f"layer 0 head 0 {rec.kind} ({rec.weights.shape[0]}x{rec.weights.shape[1]}):")
    print(rec.weights)
    print("row sums:", rec.weights.sum(axis=1))
    print()

# the oxygen atom (row 0) splits its cross attention between its two bonds;
# each bond splits its attention between oxygen and one hydrogen
a2b = [r for r in fwd.attention if r.kind == "atom_from_bond" and r.layer == 1][0]
print("layer 1 atom-from-bond weights (O row attends both bonds):")
print(a2b.weights)
