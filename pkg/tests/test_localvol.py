import numpy as np
import pytest
from hypothesis import given, strategies as st

from comsmile.localvol import LocalVolSurface


def surface(interp="flat"):
    return LocalVolSurface((0.5, 1.0), ([0.8, 1.0, 1.2], [0.7, 1.0, 1.3]),
                           ([0.30, 0.25, 0.27], [0.28, 0.22, 0.26]), interp)


def test_nodes_are_reproduced():
    s = surface()
    np.testing.assert_allclose(s(0.5, [0.8, 1.0, 1.2]), [0.30, 0.25, 0.27])
    np.testing.assert_allclose(s(1.0, [0.7, 1.0, 1.3]), [0.28, 0.22, 0.26])


def test_constant_extrapolation_in_strike_and_time():
    s = surface()
    assert float(s(0.5, 0.1)) == pytest.approx(0.30)
    assert float(s(0.5, 5.0)) == pytest.approx(0.27)
    assert float(s(0.01, 1.0)) == pytest.approx(0.25)
    assert float(s(3.0, 1.0)) == pytest.approx(0.22)


def test_flat_backward_time_interpolation():
    s = surface("flat")
    assert float(s(0.75, 1.0)) == pytest.approx(0.22)
    assert float(s(0.5, 1.0)) == pytest.approx(0.25)


def test_linear_variance_time_interpolation():
    s = surface("linear_variance")
    assert float(s(0.75, 1.0)) == pytest.approx(np.sqrt(0.5 * 0.25 ** 2 + 0.5 * 0.22 ** 2))


@given(k=st.floats(0.0, 3.0), t=st.floats(0.0, 2.0))
def test_pchip_stays_within_node_range(k, t):
    s = surface()
    v = float(s(t, k))
    assert 0.22 - 1e-12 <= v <= 0.30 + 1e-12


def test_validation():
    with pytest.raises(ValueError):
        LocalVolSurface((1.0, 0.5), ([1.0], [1.0]), ([0.2], [0.2]))
    with pytest.raises(ValueError):
        LocalVolSurface((1.0,), ([1.0, 0.9],), ([0.2, 0.2],))
    with pytest.raises(ValueError):
        LocalVolSurface((1.0,), ([1.0],), ([-0.2],))
    with pytest.raises(ValueError):
        LocalVolSurface((1.0,), ([1.0],), ([0.2],), "cubic")


def test_clipping_to_bounds():
    s = LocalVolSurface((1.0,), ([1.0],), ([9.0],), eta_max=2.0)
    assert float(s(1.0, 1.0)) == 2.0


def test_node_vector_round_trip_and_serialization():
    s = surface()
    v = s.node_vector()
    assert v.size == 6
    assert s.with_nodes(v * 1.1).node_vector() == pytest.approx(v * 1.1)
    with pytest.raises(ValueError):
        s.with_nodes(v[:-1])
    back = LocalVolSurface.from_dict(s.to_dict())
    np.testing.assert_array_equal(back.node_vector(), v)
    assert back.time_interp == s.time_interp


def test_max_slope():
    s = surface()
    assert s.max_slope() == pytest.approx(max(0.05 / 0.2, 0.06 / 0.3, 0.04 / 0.3))
