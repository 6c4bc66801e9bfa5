"""Perceive bonds from covalent radii.

A pair of atoms bonds when its distance is at most alpha * (r_i + r_j),
with alpha = 1.15 and single-bond covalent radii from the shipped table.
"""

import numpy as np

from demol import default_radii_table, distance, parse_xyz, predict_bonds

ETHANOL = """9
ethanol
C -0.8877 0.1737 0.0096
C  0.4662 -0.5174 -0.0059
O  1.5083 0.4442 -0.0059
H -1.7257 -0.5221 0.0372
H -0.9700 0.8568 0.8567
H -0.9523 0.7558 -0.9095
H  0.5713 -1.1514 0.8800
H  0.5777 -1.1335 -0.9023
H  2.3528 -0.0219 0.0068
"""

mol = parse_xyz(ETHANOL)
table = default_radii_table()
print(f"{mol.name}: {mol.n_atoms} atoms")
print()

print("pairwise distances vs bonding thresholds (alpha = 1.15):")
for i in range(mol.n_atoms):
    for j in range(i + 1, mol.n_atoms):
        d = distance(mol.atoms[i], mol.atoms[j])
        si = mol.atoms[i].element.symbol
        sj = mol.atoms[j].element.symbol
        threshold = 1.15 * (table.radius(si) + table.radius(sj))
        if d < 2.0:  # keep the table readable
            tag = "BOND" if d <= threshold else "    "
            print(f"  {si}{i}-{sj}{j}:  d = {d:.3f}  threshold = {threshold:.3f}  {tag}")

bonds = predict_bonds(mol, 1.15)
print()
print(f"perceived {len(bonds)} bonds: {list(bonds.keys())}")
lengths = np.array([b.length for b in bonds])
print(f"bond lengths: min {lengths.min():.3f}  max {lengths.max():.3f} Angstrom")

# the threshold factor is monotone: shrinking alpha can only drop bonds
for alpha in (0.9, 1.0, 1.15, 1.3):
    print(f"alpha = {alpha:>4}: {len(predict_bonds(mol, alpha))} bonds")
