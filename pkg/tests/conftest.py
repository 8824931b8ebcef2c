import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tofcal import anacal, detsim, prep
from tofcal.detsim import CampaignPlan, SimConfig

settings.register_profile("tofcal", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("tofcal")


@pytest.fixture(scope="session")
def small_sets():
    """A few hundred coincidences per z position, raw simulator output."""
    plan = CampaignPlan(z_positions_mm=(-60.0, -30.0, 0.0, 30.0, 60.0), xy_grid_mm=((0.0, 0.0), (6.0, -6.0)),
                        events_per_point=300, performance_events=3000, rng_seed=5)
    return detsim.simulate_campaign(plan, SimConfig())


@pytest.fixture(scope="session")
def small_prepared(small_sets):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        models = prep.fit_prep_models(small_sets["train"], min_events=20)
        out = {k: prep.preprocess(v, models) for k, v in small_sets.items()}
    return models, out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --------------------------------------------------------------------------
# acceptance summary: one line per criterion at the end of the run

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): numbered acceptance criterion")


def pytest_runtest_logreport(report):
    num = dict(report.user_properties).get("criterion")
    if num is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        props = dict(report.user_properties)
        _ACCEPTANCE[num] = (props["title"], report.outcome, props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_ACCEPTANCE):
        title, outcome, detail = _ACCEPTANCE[num]
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {num:2d} {verdict}  {title}" + (f"  [{detail}]" if detail else ""))


@pytest.fixture
def criterion(request):
    """Registers the test as acceptance criterion ``n``; returns a detail recorder."""
    marker = request.node.get_closest_marker("criterion")
    num, title = marker.args
    request.node.user_properties.append(("criterion", num))
    request.node.user_properties.append(("title", title))

    def detail(text):
        request.node.user_properties.append(("detail", text))
        print(f"criterion {num}: {text}")

    return detail
