import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from shortcutlab.core import ImageRecord, compute_phi, phi_from_cells


def _records_from_cells(n11, n10, n01, n00, task="chf", attr="age"):
    recs = []
    i = 0
    for count, (y, b) in [(n11, (1, 1)), (n10, (1, 0)), (n01, (0, 1)), (n00, (0, 0))]:
        for _ in range(count):
            recs.append(
                ImageRecord(f"im{i}", f"p{i}", f"s{i}", np.zeros((4, 4)), {task: y}, {attr: b})
            )
            i += 1
    return recs


def test_independence_is_zero():
    recs = _records_from_cells(25, 25, 25, 25)
    assert compute_phi(recs, "chf", "age") == 0.0


def test_perfect_association_is_one():
    recs = _records_from_cells(50, 0, 0, 50)
    assert compute_phi(recs, "chf", "age") == 1.0


def test_formula_oracle():
    # direct evaluation of the phi formula on the 2x2 table
    n11, n10, n01, n00 = 40, 10, 10, 40
    expected = (n11 * n00 - n10 * n01) / math.sqrt(
        (n11 + n10) * (n01 + n00) * (n11 + n01) * (n10 + n00)
    )
    assert expected == 0.6
    recs = _records_from_cells(n11, n10, n01, n00)
    assert compute_phi(recs, "chf", "age") == pytest.approx(expected, abs=0)


def test_degenerate_marginal_errors():
    recs = _records_from_cells(10, 0, 5, 0)  # attribute all-positive
    with pytest.raises(ValueError, match="undefined correlation"):
        compute_phi(recs, "chf", "age")


def test_missing_values_excluded_pairwise():
    recs = _records_from_cells(10, 10, 10, 10)
    recs.append(ImageRecord("x1", "px1", "sx1", np.zeros((4, 4)), {"chf": None}, {"age": 1}))
    recs.append(ImageRecord("x2", "px2", "sx2", np.zeros((4, 4)), {"chf": 1}, {"age": None}))
    assert compute_phi(recs, "chf", "age") == 0.0


cells = st.tuples(
    st.integers(0, 40), st.integers(0, 40), st.integers(0, 40), st.integers(0, 40)
).filter(lambda c: (c[0] + c[1]) > 0 and (c[2] + c[3]) > 0 and (c[0] + c[2]) > 0 and (c[1] + c[3]) > 0)


@given(cells)
def test_symmetry(table):
    n11, n10, n01, n00 = table
    recs = _records_from_cells(n11, n10, n01, n00)
    swapped = _records_from_cells(n11, n01, n10, n00)  # task and attribute exchanged
    assert compute_phi(recs, "chf", "age") == pytest.approx(
        compute_phi(swapped, "chf", "age"), abs=1e-12
    )


@given(cells)
def test_range_and_extremes(table):
    n11, n10, n01, n00 = table
    phi = phi_from_cells(n11, n10, n01, n00)
    assert -1.0 - 1e-12 <= phi <= 1.0 + 1e-12
    if phi == 1.0:
        assert n10 == 0 and n01 == 0
    if phi == -1.0:
        assert n11 == 0 and n00 == 0
    if n10 == 0 and n01 == 0:
        assert phi == 1.0
    if n11 == 0 and n00 == 0:
        assert phi == -1.0
