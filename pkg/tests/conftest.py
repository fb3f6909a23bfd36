from __future__ import annotations

import pytest

from fldkit.tensor import set_finite_checks


@pytest.fixture(autouse=True, scope="session")
def _finite_checks():
    set_finite_checks(True)
    yield
    set_finite_checks(False)
