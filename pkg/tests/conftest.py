import numpy as np
import pytest

from lobstefan.model import GridSpec, InitialConditionSpec, ModelParams, ScalingSpec
from lobstefan.simulator import BookState


def make_params(alpha=0.5, q_ask=(2.0,), q_bid=(2.0,), gamma=1.0, rho=1.0, p=(0.0, 1.0), alpha_bid=None):
    return ModelParams(
        alpha_ask=alpha,
        alpha_bid=alpha if alpha_bid is None else alpha_bid,
        sigma_ask=ScalingSpec(coeffs=p),
        sigma_bid=ScalingSpec(coeffs=p),
        u0_ask=InitialConditionSpec(coeffs=q_ask, gamma=gamma),
        u0_bid=InitialConditionSpec(coeffs=q_bid, gamma=gamma),
        rho=rho,
    )


def book_from_density(density, mid=0.0, time=0.0):
    density = np.asarray(density, dtype=float)
    return BookState(ask_rel=density, bid_rel=density.copy(), mid=mid, time=time)


@pytest.fixture
def small_grid():
    return GridSpec(dt=0.008, dx=0.1, n_time=40, n_price=30)


@pytest.fixture
def symmetric_params():
    return make_params()


@pytest.fixture
def unit_book_grid():
    return GridSpec(dt=0.001, dx=0.01, n_time=2, n_price=400)


@pytest.fixture
def unit_book(unit_book_grid):
    """Constant ask density 1 out to offset 4, mid-price 0."""
    return book_from_density(np.ones(unit_book_grid.n_price))


@pytest.fixture
def isolated_config_home(tmp_path, monkeypatch):
    home = tmp_path / 'config-home'
    home.mkdir()
    monkeypatch.setenv('XDG_CONFIG_HOME', str(home))
    return home
