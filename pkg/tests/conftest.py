import numpy as np
import pytest

from fedef.param_space import ParamVector


def pv(values, groups=None):
    return ParamVector.of(values, groups)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def central_difference(fn, v: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Coordinate-wise central differences of a scalar function of a flat vector."""
    out = np.empty_like(v)
    for j in range(v.size):
        up, dn = v.copy(), v.copy()
        up[j] += h
        dn[j] -= h
        out[j] = (fn(up) - fn(dn)) / (2 * h)
    return out


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


# acceptance reporting: one line per criterion in the terminal summary
_ACCEPTANCE_LINES: list[tuple[int, str]] = []


@pytest.fixture
def report(request):
    """Collects free-form detail lines for the criterion under test."""
    lines: list[str] = []
    request.node._acceptance_detail = lines
    return lines.append


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or rep.when != "call":
        return
    number, title = marker.args
    status = "PASS" if rep.passed else "FAIL"
    detail = "; ".join(getattr(item, "_acceptance_detail", []))
    line = f"criterion {number:>2} [{status}] {title}"
    if detail:
        line += f" | {detail}"
    _ACCEPTANCE_LINES.append((number, line))


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
