import numpy as np
import pytest

from storyweave import tensor as T
from storyweave.gradcheck import TOLERANCE, check_gradients, kernel_suite, rel_error
from storyweave.tensor import Tensor


def test_rel_error_floor():
    assert rel_error(0.0, 0.0) == 0.0
    assert rel_error(1e-10, 0.0) < 1e-3
    assert rel_error(1.0, 1.1) == pytest.approx(0.1 / 2.1)


def test_no_parameters_passes_vacuously():
    report = check_gradients(lambda: Tensor(np.array(1.0)), {}, name="empty")
    assert report.ok and report.errors == {}


def test_correct_gradient_passes(rng):
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    report = check_gradients(lambda: T.tsum(T.sigmoid(x) * x), {"x": x})
    assert report.ok and report.max_error < TOLERANCE


def test_wrong_gradient_is_detected(rng):
    def bad_square(t):
        # backward is missing the factor 2
        return T._make(t.data**2, (t,), lambda g: (g * t.data,), "bad_square")

    x = Tensor(rng.standard_normal(5), requires_grad=True)
    report = check_gradients(lambda: T.tsum(bad_square(x)), {"x": x})
    assert not report.ok
    assert report.errors["x"] > 0.1


def test_kernel_suite_without_model():
    reports = kernel_suite(seed=1, include_model=False)
    assert len(reports) >= 15
    bad = [(r.name, r.max_error) for r in reports if not r.ok]
    assert not bad
