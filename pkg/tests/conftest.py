import pytest

from cohsync.cluster import Cluster, ClusterOptions
from cohsync.sim import named_profile


@pytest.fixture
def eth():
    return named_profile("ethernet-disagg")


@pytest.fixture
def make_cluster(eth):
    """Cluster with message tracing and local markers on."""
    def make(blades=3, profile=None, **opts):
        opts.setdefault("trace", True)
        opts.setdefault("local_markers", True)
        return Cluster(blades, profile or eth, options=ClusterOptions(**opts))
    return make


# -- acceptance gate reporting ------------------------------------------------

_GATE: dict[int, tuple[str, str, float, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is None or rep.when != "call":
        return
    n, title = m.args
    detail = "; ".join(v for k, v in item.user_properties if k == "detail")
    _GATE[n] = (title, "PASS" if rep.passed else "FAIL", rep.duration, detail)


def pytest_terminal_summary(terminalreporter):
    if not _GATE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_GATE):
        title, verdict, secs, detail = _GATE[n]
        terminalreporter.write_line(f"criterion {n} {verdict}: {title} ({secs:.1f} s) {detail}".rstrip())
