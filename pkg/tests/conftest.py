import os
import sys
from pathlib import Path

# single-threaded BLAS keeps reductions in a fixed order (only effective before numpy loads)
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(scope="session")
def standin_dir(tmp_path_factory):
    """IDX files of the small digits stand-in (see standin.py)."""
    import standin

    return standin.build(tmp_path_factory.mktemp("standin"))


def mnist_dir() -> Path:
    """Where the real MNIST IDX files are expected (``TABOOTRAP_MNIST_DIR`` or data/mnist)."""
    return Path(os.environ.get("TABOOTRAP_MNIST_DIR", Path(__file__).parent.parent / "data" / "mnist"))


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(lines, key=lambda l: int(l.split("criterion")[1].split(":")[0])):
        terminalreporter.write_line(line)
