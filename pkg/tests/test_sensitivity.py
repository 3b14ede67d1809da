from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from kvq.sensitivity import LayerSensitivity, assign_mixed_precision, fisher_diag, layer_sensitivity


def test_fisher_examples():
    np.testing.assert_array_equal(fisher_diag([np.array([1, 2]), np.array([3, -1])]), [10, 5])
    np.testing.assert_array_equal(fisher_diag([np.zeros(3)]), [0, 0, 0])
    np.testing.assert_array_equal(fisher_diag([np.array([2.0])]), [4])


def test_fisher_errors():
    with pytest.raises(ValueError):
        fisher_diag([])
    with pytest.raises(ValueError):
        fisher_diag([np.zeros(2), np.zeros(3)])


def test_sensitivity_examples():
    assert layer_sensitivity([1, 2], [1, 1.5], [10, 5]) == pytest.approx(1.25)
    assert layer_sensitivity([1, 2], [1, 2], [10, 5]) == 0
    assert layer_sensitivity([1, 2], [7, -3], [0, 0]) == 0
    with pytest.raises(ValueError):
        layer_sensitivity([1, 2], [1], [1, 1])


def test_assignment_examples():
    sens = [LayerSensitivity(i, o) for i, o in enumerate([5, 1, 3])]
    assert assign_mixed_precision(sens, 1) == {1}
    assert assign_mixed_precision(sens, 0) == set()
    ties = [LayerSensitivity(i, 2.0) for i in range(3)]
    assert assign_mixed_precision(ties, 2) == {0, 1}
    with pytest.raises(ValueError):
        assign_mixed_precision(sens, 4)
    with pytest.raises(ValueError):
        LayerSensitivity(0, -1.0)


@given(st.lists(hnp.arrays(np.float64, 6, elements=st.floats(-1e3, 1e3)), min_size=1, max_size=5))
def test_fisher_is_nonnegative_and_shaped(grads):
    f = fisher_diag(grads)
    assert f.shape == (6,)
    assert np.all(f >= 0)


@given(st.lists(st.floats(0, 1e6), min_size=1, max_size=12), st.data())
def test_demoted_layers_are_least_sensitive(omegas, data):
    sens = [LayerSensitivity(i, o) for i, o in enumerate(omegas)]
    k = data.draw(st.integers(0, len(omegas)))
    chosen = assign_mixed_precision(sens, k)
    assert len(chosen) == k
    rest = set(range(len(omegas))) - chosen
    if chosen and rest:
        assert max(omegas[i] for i in chosen) <= min(omegas[i] for i in rest)
