import logging

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ceampc.cost import CostWeights
from ceampc.model import (AffineMatrix, ConstraintSpec, LinearForm, ParameterSet, linear_model)

settings.register_profile("ceampc", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ceampc")


@pytest.fixture(autouse=True)
def _quiet(caplog):
    caplog.set_level(logging.ERROR)


def scalar_model(b=1.0):
    """``x+ = theta x + b u + w``, ``y = x``."""
    form = LinearForm(AffineMatrix(np.zeros((1, 1)), np.ones((1, 1, 1))),
                      AffineMatrix(np.array([[b]])), np.eye(1), AffineMatrix(np.zeros(1)),
                      AffineMatrix(np.eye(1)), AffineMatrix(np.zeros((1, 1))),
                      AffineMatrix(np.zeros(1)))
    return linear_model(form, 1, name="scalar")


def diagonal_model(a):
    """``x+ = (diag(a) + theta I) x + u``; the parameter shifts every pole."""
    n = len(a)
    form = LinearForm(AffineMatrix(np.diag(a), np.eye(n)[None]), AffineMatrix(np.eye(n)),
                      np.eye(n), AffineMatrix(np.zeros(n)), AffineMatrix(np.eye(n)),
                      AffineMatrix(np.zeros((n, n))), AffineMatrix(np.zeros(n)))
    return linear_model(form, 1, name="diagonal")


def box_constraints(lo=-1.0, hi=1.0, D=None, d=None, q=None, n_x=1, margin=0.0):
    if D is None:
        D, d, q = np.zeros((0, n_x)), np.zeros(0), np.zeros(0)
    return ConstraintSpec(np.atleast_1d(lo), np.atleast_1d(hi), D, d, q, margin)


def weights(n_x=1, n_u=1, n_y=1, omega=1.0, N=1, M=0, q=1.0, r=1.0, t=1.0):
    return CostWeights(q * np.eye(n_x), r * np.eye(n_u), t * np.eye(n_y), omega, N, M)


@pytest.fixture
def scalar():
    return scalar_model()


@pytest.fixture
def unit_box():
    return ParameterSet.box([0.0], [1.0])


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import REPORT
    except ImportError:
        return
    if REPORT:
        terminalreporter.section("acceptance criteria")
        for key in sorted(REPORT):
            terminalreporter.write_line(REPORT[key])
