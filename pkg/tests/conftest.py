import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from polysed import tensor


@pytest.fixture(autouse=True)
def finite_checks():
    """Catch NaN/Inf escaping any op while the test suite runs."""
    tensor.set_finite_checks(True)
    yield
    tensor.set_finite_checks(False)
