"""Built-in reference geometries used by the self-test and the test suite."""

from __future__ import annotations

import math

import numpy as np

from .molecule import Molecule, molecule_from_symbols

WATER_XYZ = """3
water
O 0.0 0.0 0.0
H 0.9572 0.0 0.0
H -0.2399 0.9266 0.0
"""


def water(target: float | None = None) -> Molecule:
    """Equilibrium water: O-H 0.9572 Angstrom, H-O-H 104.52 degrees."""
    return molecule_from_symbols(
        ["O", "H", "H"],
        [[0.0, 0.0, 0.0], [0.9572, 0.0, 0.0], [-0.2399, 0.9266, 0.0]],
        target=target,
        name="water",
    )


def benzene_skeleton(bond_length: float = 1.39) -> Molecule:
    """Six carbons on a regular hexagon (the ring bonds only)."""
    radius = bond_length  # hexagon side equals its circumradius
    positions = [
        [radius * math.cos(k * math.pi / 3.0), radius * math.sin(k * math.pi / 3.0), 0.0]
        for k in range(6)
    ]
    return molecule_from_symbols(["C"] * 6, positions, name="benzene-skeleton")


def chain(n: int, spacing: float = 1.5, symbol: str = "C", target: float | None = None) -> Molecule:
    """n atoms on a line; adjacent pairs bond, next-nearest do not."""
    positions = [[i * spacing, 0.0, 0.0] for i in range(n)]
    return molecule_from_symbols([symbol] * n, positions, target=target, name=f"chain{n}")


def star_ch3() -> Molecule:
    """A carbon with three hydrogens: the K_{1,3} bond pattern."""
    d = 1.09
    return molecule_from_symbols(
        ["C", "H", "H", "H"],
        [[0.0, 0.0, 0.0], [d, 0.0, 0.0], [0.0, d, 0.0], [0.0, 0.0, d]],
        name="ch3-star",
    )


def jittered_chain(n: int, rng, spacing: float = 1.5, jitter: float = 0.12) -> np.ndarray:
    """Chain positions with deterministic jitter; returns an (n, 3) array."""
    pos = np.array([[i * spacing, 0.0, 0.0] for i in range(n)], dtype=np.float64)
    for i in range(n):
        for axis in range(3):
            pos[i, axis] += rng.normal(jitter)
    return pos
