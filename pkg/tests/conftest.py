import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cmpdak import estimators  # noqa: E402


@pytest.fixture(autouse=True)
def _fresh_kernel_cache():
    estimators.kernel_cache.clear()
    yield
