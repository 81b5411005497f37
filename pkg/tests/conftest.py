import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def qubit_family(h0=None, **ops):
    """Small helper used across test modules."""
    from nmunravel.core import HermitianOperator, OperatorFamily, SIGMA_X

    if h0 is None:
        h0 = np.zeros((2, 2))
    if not ops:
        ops = {"x": SIGMA_X}
    return OperatorFamily(
        HermitianOperator(h0), {k: HermitianOperator(v) for k, v in ops.items()}
    )
