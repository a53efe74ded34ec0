import numpy as np
import pytest

from qrl.models import build_critic


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def small_critic():
    """Tiny critic used by unit tests: 3-d observations, 3 actions."""
    return build_critic(
        obs_width=3,
        n_actions=3,
        encoder_widths=[16, 8],
        projector_widths=[16],
        transition_widths=[16],
        components=2,
        component_size=4,
        seed=0,
    )


def finite_difference_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function of an array."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g
