import numpy as np
import pytest

from microgrid_decomp.qp import QPModel, solve_qp


def test_linear_program():
    # min -x - y  s.t.  x + y <= 1, x, y in [0, 1]
    sol = solve_qp([-1.0, -1.0], [0.0, 0.0], [[1.0, 1.0]], [-np.inf], [1.0], [0, 0], [1, 1])
    assert sol.optimal and sol.objective == pytest.approx(-1.0)
    # dual of the binding row: objective falls by 1 per unit of the bound
    assert sol.row_dual[0] == pytest.approx(-1.0)


def test_quadratic_program_is_polished_to_kkt():
    # min 0.5 (x^2 + y^2) - 2x  s.t.  x + y = 1
    sol = solve_qp([-2.0, 0.0], [1.0, 1.0], [[1.0, 1.0]], [1.0], [1.0], [-10, -10], [10, 10])
    assert sol.optimal and sol.polished
    assert sol.x == pytest.approx([1.5, -0.5], abs=1e-12)
    # stationarity c + Hx - A^T y = 0
    assert -2.0 + 1.5 - sol.row_dual[0] == pytest.approx(0.0, abs=1e-12)


def test_active_bound_kkt():
    sol = solve_qp([-4.0], [2.0], np.zeros((0, 1)), [], [], [0.0], [1.0])
    assert sol.x == pytest.approx([1.0], abs=1e-12)
    assert sol.col_dual[0] == pytest.approx(-2.0, abs=1e-9)


def test_infeasible_status():
    sol = solve_qp([1.0], [1.0], [[1.0]], [5.0], [5.0], [0.0], [1.0])
    assert not sol.optimal


def test_model_updates_keep_rows():
    m = QPModel()
    m.add_vars([0.0], [10.0], [1.0])
    row = m.add_rows([2.0], [np.inf], [([0], [1.0])])
    assert m.solve().x == pytest.approx([2.0])
    m.set_row_bounds(row, [3.0], [np.inf])
    assert m.solve().objective == pytest.approx(3.0)
    with pytest.raises(ValueError):
        m.set_hessian_diag([-1.0])
