"""Structure-aware attention masks.

Atom pairs may attend when closer than the cutoff (strict inequality,
default 5 Angstrom). Bond pairs may attend when identical, adjacent in the
line graph, or at line-graph distance exactly two, the orders-free stand-in
for conjugacy. Masked entries are excluded from softmax normalization
entirely, not merely down-weighted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graphs import BondGraph
from .molecule import Molecule

DEFAULT_CUTOFF = 5.0  # Angstrom


@dataclass(frozen=True)
class MaskMatrices:
    atom: np.ndarray  # (N, N) bool, True = attention allowed
    bond: np.ndarray  # (M, M) bool

    def __post_init__(self):
        for name in ("atom", "bond"):
            m = getattr(self, name)
            if m.size and (not (m == m.T).all() or not m.diagonal().all()):
                raise ValueError(f"{name} mask must be symmetric with a true diagonal")


def atom_mask(m: Molecule, cutoff: float = DEFAULT_CUTOFF) -> np.ndarray:
    if cutoff <= 0:
        raise ValueError(f"cutoff must be positive, got {cutoff}")
    pos = m.positions
    diff = pos[:, None, :] - pos[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    allowed = dist < cutoff
    np.fill_diagonal(allowed, True)
    return allowed


def bond_mask(bg: BondGraph) -> np.ndarray:
    m = bg.n_bonds
    if m == 0:
        return np.zeros((0, 0), dtype=bool)
    adj = bg.adjacency.astype(np.int64)
    within_two = (np.eye(m, dtype=np.int64) + adj + adj @ adj) > 0
    return within_two


def build_masks(m: Molecule, bg: BondGraph, cutoff: float = DEFAULT_CUTOFF) -> MaskMatrices:
    return MaskMatrices(atom_mask(m, cutoff), bond_mask(bg))


def all_true_masks(n_atoms: int, n_bonds: int) -> MaskMatrices:
    return MaskMatrices(
        np.ones((n_atoms, n_atoms), dtype=bool), np.ones((n_bonds, n_bonds), dtype=bool)
    )
