"""Atom-centric graph and its bond-centric line graph.

Bond nodes carry geometry: the midpoint of the two endpoint positions, the
unit direction from the lower-index atom to the higher-index one, and the
bond length.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bonds import BondSet
from .errors import GeometryError
from .molecule import Molecule

MIN_BOND_LENGTH = 1e-6  # Angstrom


@dataclass(frozen=True)
class AtomGraph:
    n_atoms: int
    adjacency: np.ndarray  # (N, N) bool, symmetric, zero diagonal
    neighbor_lists: tuple[tuple[int, ...], ...]

    def degree(self, i: int) -> int:
        return len(self.neighbor_lists[i])


@dataclass(frozen=True)
class BondNode:
    atom_i: int
    atom_j: int  # atom_i < atom_j
    midpoint: np.ndarray  # (3,)
    direction: np.ndarray  # (3,), unit, atom_i -> atom_j
    length: float


@dataclass(frozen=True)
class BondGraph:
    n_bonds: int
    bond_nodes: tuple[BondNode, ...]
    adjacency: np.ndarray  # (M, M) bool, symmetric, zero diagonal
    shared_atom: dict  # (p, q) with p < q -> common atom index

    def neighbor_lists(self) -> tuple[tuple[int, ...], ...]:
        return tuple(
            tuple(np.flatnonzero(self.adjacency[p]).tolist()) for p in range(self.n_bonds)
        )


def build_atom_graph(m: Molecule, b: BondSet) -> AtomGraph:
    n = m.n_atoms
    adjacency = np.zeros((n, n), dtype=bool)
    for bond in b:
        if bond.j >= n:
            raise IndexError(f"bond {bond.key} out of range for {n} atoms")
        adjacency[bond.i, bond.j] = True
        adjacency[bond.j, bond.i] = True
    adjacency.flags.writeable = False
    neighbors = tuple(tuple(np.flatnonzero(adjacency[i]).tolist()) for i in range(n))
    return AtomGraph(n, adjacency, neighbors)


def bond_geometry(m: Molecule, b: BondSet) -> tuple[BondNode, ...]:
    nodes = []
    for bond in b:
        ri = m.atoms[bond.i].position
        rj = m.atoms[bond.j].position
        delta = rj - ri
        length = float(np.linalg.norm(delta))
        if length <= MIN_BOND_LENGTH:
            raise GeometryError(f"bond {bond.key} has zero length")
        midpoint = (ri + rj) / 2.0
        direction = delta / length
        midpoint.flags.writeable = False
        direction.flags.writeable = False
        nodes.append(BondNode(bond.i, bond.j, midpoint, direction, length))
    return tuple(nodes)


def build_line_graph(g: AtomGraph, b: BondSet) -> BondGraph:
    """Bond nodes in BondSet order; edges between bonds sharing one atom."""
    keys = b.keys()
    for i, j in keys:
        if j >= g.n_atoms or not g.adjacency[i, j]:
            raise ValueError(f"bond {(i, j)} is not an edge of the atom graph")
    m_bonds = len(keys)
    adjacency = np.zeros((m_bonds, m_bonds), dtype=bool)
    shared: dict[tuple[int, int], int] = {}
    for p in range(m_bonds):
        sp = set(keys[p])
        for q in range(p + 1, m_bonds):
            common = sp.intersection(keys[q])
            if len(common) == 1:
                adjacency[p, q] = adjacency[q, p] = True
                shared[(p, q)] = common.pop()
    adjacency.flags.writeable = False
    # geometry is attached by the caller; keep a placeholder-free constructor
    return BondGraph(m_bonds, (), adjacency, shared)


def build_bond_graph(m: Molecule, g: AtomGraph, b: BondSet) -> BondGraph:
    """Line graph with bond-node geometry attached."""
    bare = build_line_graph(g, b)
    return BondGraph(bare.n_bonds, bond_geometry(m, b), bare.adjacency, bare.shared_atom)
