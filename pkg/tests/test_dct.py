import math

import numpy as np
import pytest

from fadct import engine as E
from fadct.dct import DctPlan, dct2, idct2, plan_for
from fadct.engine import ShapeError, Tensor
from fadct.gradcheck import check_gradients


def naive_dct2(f: np.ndarray) -> np.ndarray:
    """Direct double-sum evaluation of the orthonormal 2-D DCT-II."""
    m, n = f.shape
    out = np.zeros((m, n))
    for u in range(m):
        for v in range(n):
            alpha_u = math.sqrt(1.0 / m) if u == 0 else math.sqrt(2.0 / m)
            alpha_v = math.sqrt(1.0 / n) if v == 0 else math.sqrt(2.0 / n)
            acc = 0.0
            for i in range(m):
                for j in range(n):
                    acc += (f[i, j]
                            * math.cos((2 * i + 1) * u * math.pi / (2 * m))
                            * math.cos((2 * j + 1) * v * math.pi / (2 * n)))
            out[u, v] = alpha_u * alpha_v * acc
    return out


def test_constant_image_has_only_dc():
    plan = DctPlan(2, 2)
    coeffs = dct2(Tensor(np.ones((1, 2, 2))), plan).data[0]
    assert abs(coeffs[0, 0] - 2.0) < 1e-12
    coeffs[0, 0] = 0.0
    assert np.abs(coeffs).max() < 1e-12


def test_1x1_identity():
    plan = DctPlan(1, 1)
    assert dct2(Tensor([[5.0]]), plan).data[0, 0] == pytest.approx(5.0, abs=1e-15)


def test_separable_matches_naive_oracle_4x4():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 4))
    got = dct2(Tensor(x), DctPlan(4, 4)).data
    assert np.abs(got - naive_dct2(x)).max() < 1e-10


@pytest.mark.parametrize("m", [1, 2, 3, 4, 5, 8])
@pytest.mark.parametrize("n", [1, 2, 3, 4, 5, 8])
def test_oracle_equivalence_all_small_sizes(m, n):
    rng = np.random.default_rng(m * 100 + n)
    x = rng.normal(size=(m, n))
    got = dct2(Tensor(x), plan_for(m, n)).data
    assert np.abs(got - naive_dct2(x)).max() < 1e-10


def test_basis_orthonormality():
    for m in (1, 2, 3, 7, 16, 64):
        b = DctPlan(m, m).basis_h
        assert np.abs(b @ b.T - np.eye(m)).max() < 1e-12


def test_round_trip_multichannel():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 8, 8))
    plan = DctPlan(8, 8)
    back = idct2(dct2(Tensor(x), plan), plan).data
    assert np.abs(back - x).max() < 1e-9


def test_round_trip_up_to_64():
    rng = np.random.default_rng(2)
    for size in (16, 33, 64):
        x = rng.normal(size=(size, size))
        plan = plan_for(size, size)
        back = plan.idct2_array(plan.dct2_array(x))
        assert np.abs(back - x).max() < 1e-9


def test_dc_only_coefficients_invert_to_constant():
    plan = DctPlan(2, 2)
    coeffs = np.zeros((2, 2))
    coeffs[0, 0] = 2.0
    img = idct2(Tensor(coeffs), plan).data
    assert np.abs(img - 1.0).max() < 1e-12


def test_parseval():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(3, 16, 16))
    coeffs = dct2(Tensor(x), plan_for(16, 16)).data
    assert abs(np.linalg.norm(coeffs) - np.linalg.norm(x)) < 1e-9


def test_linearity():
    rng = np.random.default_rng(4)
    x, y = rng.normal(size=(2, 8, 8))
    plan = plan_for(8, 8)
    lhs = plan.dct2_array(2.5 * x - 1.5 * y)
    rhs = 2.5 * plan.dct2_array(x) - 1.5 * plan.dct2_array(y)
    assert np.abs(lhs - rhs).max() < 1e-9


def test_round_trip_gradient_is_identity():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(3, 4, 4)), requires_grad=True)
    plan = plan_for(4, 4)
    E.tsum(idct2(dct2(x, plan), plan)).backward()
    assert np.abs(x.grad - 1.0).max() < 1e-8


def test_dct_gradcheck():
    rng = np.random.default_rng(6)
    x = Tensor(rng.normal(size=(2, 3, 3)), requires_grad=True)
    plan = plan_for(3, 3)
    w = Tensor(rng.normal(size=(2, 3, 3)))
    worst = check_gradients(lambda: E.tsum(E.mul(dct2(x, plan), w)), [x])
    assert worst < 1e-6


def test_plan_dimension_mismatch():
    with pytest.raises(ShapeError) as err:
        dct2(Tensor(np.zeros((3, 4, 5))), DctPlan(4, 4))
    assert "4x4" in str(err.value)


def test_plan_cache_returns_same_instance():
    assert plan_for(12, 7) is plan_for(12, 7)
