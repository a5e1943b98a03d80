import math

import numpy as np
import pytest
from pydantic import ValidationError

from lobstefan.exceptions import (CFLViolationError, DomainError, NegativeVolumeError, ShapeMismatchError)
from lobstefan.model import (GridSpec, InitialConditionSpec, OrderBookDataset, ScalingSpec, check_sigma_on_grid,
                             eval_sigma, eval_u0, nabla, nabla2)


@pytest.mark.parametrize("x,expected", [
    (0.0, 0.0),
    (1.0, 0.5),
    (100.0, 100 ** 1.6 / 10001),
])
def test_sigma_linear_p(x, expected):
    spec = ScalingSpec(coeffs=(0.0, 1.0))
    assert eval_sigma(spec, x) == pytest.approx(expected, rel=1e-12, abs=0)


def test_sigma_decays_far_out():
    spec = ScalingSpec(coeffs=(0.0, 1.0))
    values = eval_sigma(spec, 10.0 ** np.arange(2, 7))
    assert np.all(np.diff(values) < 0)


def test_sigma_rejects_vanishing_denominator():
    spec = ScalingSpec(coeffs=(-1.0, 0.0))
    # 1 - x = 0 at x = 1
    with pytest.raises(DomainError):
        eval_sigma(spec, np.array([0.5, 1.0, 1.5]))
    with pytest.raises(DomainError):
        check_sigma_on_grid(spec, GridSpec(dt=0.01, dx=0.5, n_time=2, n_price=4))


def test_sigma_rejects_negative_x():
    with pytest.raises(DomainError):
        eval_sigma(ScalingSpec(coeffs=(0.0, 1.0)), -0.1)


def test_scaling_needs_degree_one():
    with pytest.raises(ValidationError):
        ScalingSpec(coeffs=(1.0,))
    with pytest.raises(ValidationError):
        ScalingSpec(coeffs=(0.0, math.inf))


@pytest.mark.parametrize("coeffs,gamma,x,expected", [
    ((1.0,), 1.0, 0.0, 0.0),
    ((1.0,), 1.0, 1.0, math.exp(-1)),
    ((0.0, 2.0), 0.5, 2.0, 8 * math.exp(-1)),
])
def test_u0_values(coeffs, gamma, x, expected):
    spec = InitialConditionSpec(coeffs=coeffs, gamma=gamma)
    assert eval_u0(spec, x) == pytest.approx(expected, rel=1e-12, abs=0)


def test_u0_needs_positive_gamma():
    with pytest.raises(ValidationError):
        InitialConditionSpec(coeffs=(1.0,), gamma=0.0)


@pytest.mark.parametrize("v,expected", [
    ([1, 3, 6], [2, 3]),
    ([5, 5, 5, 5], [0, 0, 0]),
    ([0, 1, 0], [1, -1]),
])
def test_nabla(v, expected):
    np.testing.assert_array_equal(nabla(v), expected)


@pytest.mark.parametrize("v,expected", [
    ([0, 1, 0], [-2]),
    ([0, 1, 2, 3], [0, 0]),
    ([1, 0, 2], [3]),
])
def test_nabla2(v, expected):
    np.testing.assert_array_equal(nabla2(v), expected)


def test_difference_operators_need_length():
    with pytest.raises(ShapeMismatchError):
        nabla([1.0])
    with pytest.raises(ShapeMismatchError):
        nabla2([1.0, 2.0])


def test_grid_cfl():
    grid = GridSpec(dt=0.004, dx=0.1, n_time=10, n_price=5)
    assert grid.cfl_ratio(1.0) == pytest.approx(0.4)
    grid.check_cfl(1.0, 1.25)
    with pytest.raises(CFLViolationError):
        grid.check_cfl(1.0, 1.3)


def test_grid_nodes():
    grid = GridSpec(dt=0.1, dx=0.25, n_time=1, n_price=4)
    np.testing.assert_allclose(grid.x_nodes, [0.25, 0.5, 0.75, 1.0])
    assert grid.with_n_time(7).n_time == 7


def _dataset(ask, bid, mid, dt=0.1, dx=0.1):
    ask = np.asarray(ask, dtype=float)
    return OrderBookDataset(ask=ask, bid=bid, mid=mid,
                            grid=GridSpec(dt=dt, dx=dx, n_time=ask.shape[0], n_price=ask.shape[1]))


def test_dataset_is_read_only():
    data = _dataset(np.ones((2, 3)), np.ones((2, 3)), [0.0, 0.1])
    assert data.n_time == 2 and data.n_price == 3
    with pytest.raises(ValueError):
        data.ask[0, 0] = 5.0


def test_dataset_rejects_negative_volume():
    ask = np.ones((2, 3))
    ask[1, 2] = -1e-3
    with pytest.raises(NegativeVolumeError, match='row 2, column 3'):
        _dataset(ask, np.ones((2, 3)), [0.0, 0.0])


def test_dataset_rejects_mid_length():
    with pytest.raises(ShapeMismatchError, match='2 rows but mid has 3'):
        _dataset(np.ones((2, 3)), np.ones((2, 3)), [0.0, 0.0, 0.0])


def test_dataset_rejects_side_shapes():
    grid = GridSpec(dt=0.1, dx=0.1, n_time=2, n_price=3)
    with pytest.raises(ShapeMismatchError):
        OrderBookDataset(ask=np.ones((2, 3)), bid=np.ones((2, 4)), mid=[0.0, 0.0], grid=grid)


def test_checksum_tracks_content():
    a = _dataset(np.ones((2, 3)), np.ones((2, 3)), [0.0, 0.0])
    b = _dataset(np.ones((2, 3)), np.ones((2, 3)), [0.0, 0.0])
    c = _dataset(np.ones((2, 3)), np.ones((2, 3)), [0.0, 1e-12])
    assert a.checksum() == b.checksum()
    assert a.checksum() != c.checksum()
