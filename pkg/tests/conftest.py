import numpy as np
import pytest

from demol.fixtures import water
from demol.model import Model, ModelConfig


def micro_config(**overrides) -> ModelConfig:
    base = dict(
        d_a=8,
        d_b=8,
        d_h=4,
        n_heads=2,
        n_layers=2,
        ffn_multiplier=2,
        kernels=4,
        max_spd=5,
        n_length_buckets=4,
        elements=("H", "C", "N", "O"),
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def water_mol():
    return water(target=1.5)


@pytest.fixture
def micro_model():
    return Model(micro_config(), seed=11)


def random_molecule(rs: np.random.RandomState, n_min=4, n_max=8):
    """Random small organic-ish geometry inside a 4 Angstrom box."""
    from demol.molecule import molecule_from_symbols

    n = rs.randint(n_min, n_max + 1)
    symbols = [rs.choice(["H", "C", "N", "O"]) for _ in range(n)]
    while True:
        pos = rs.uniform(-2.0, 2.0, size=(n, 3))
        d2 = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1)
        np.fill_diagonal(d2, np.inf)
        if d2.min() > 0.5**2:  # keep atoms apart so bonds stay unambiguous
            break
    return molecule_from_symbols(symbols, pos, target=float(rs.uniform(-1, 1)))
