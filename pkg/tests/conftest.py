import numpy as np
import pytest

from hers import fv
from hers.ring import make_rng, testing_params


def negacyclic_oracle(a, b, t):
    """Exact negacyclic product mod t via int64 convolution (t < 2**21, n <= 4096)."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    n = a.size
    full = np.convolve(a, b)
    out = full[:n].copy()
    out[: n - 1] -= full[n:]
    return (out % t).astype(np.uint64)


@pytest.fixture(scope="session")
def params():
    return testing_params(1024)


@pytest.fixture(scope="session")
def keys(params):
    sk, pk, ev = fv.keygen(params, make_rng(2024), debug=True)
    return sk, pk, ev


@pytest.fixture(scope="session")
def rot_keys(keys):
    return fv.rotation_keygen(keys[0], rng=make_rng(77))


@pytest.fixture
def rng():
    return make_rng(12345)


# ---------------------------------------------------------------------------
# acceptance reporting
# ---------------------------------------------------------------------------

_ACCEPTANCE = {}


@pytest.fixture
def report(request):
    """Attach a one-line measurement summary to the running acceptance test."""

    def _report(text):
        request.node.user_properties.append(("measured", text))

    return _report


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("acceptance")
        if mark is not None:
            item.user_properties.append(("criterion", tuple(mark.args)))


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    entry = _ACCEPTANCE.setdefault(props["criterion"], {"outcome": "passed", "measured": ""})
    if report.failed:
        entry["outcome"] = "failed"
    elif report.skipped:
        entry["outcome"] = "skipped"
    if "measured" in props:
        entry["measured"] = props["measured"]


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), entry in sorted(_ACCEPTANCE.items()):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[entry["outcome"]]
        line = f"ACCEPTANCE {number:2d} {status}  {title}"
        if entry["measured"]:
            line += f": {entry['measured']}"
        terminalreporter.write_line(line)
