import numpy as np
import pytest

from flowsteer.velocity import TrainConfig, TrainingPair, train_flow_matching


def random_pairs(dim: int, n: int, seed: int = 0) -> list[TrainingPair]:
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        x = rng.random(dim)
        out.append(TrainingPair(x, np.clip(x + 0.2 * rng.standard_normal(dim), 0, 1), 1))
        out.append(TrainingPair(x, x, 0))
    return out


@pytest.fixture(scope="session")
def small_model():
    """A briefly trained MLP field on 16-dim data; cheap enough for unit tests."""
    cfg = TrainConfig(steps=60, batch_size=16, lr=3e-3, seed=3, hidden=(24, 24), prompt_dim=4, time_dim=6)
    return train_flow_matching(random_pairs(16, 12), cfg).model
