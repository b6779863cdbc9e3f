from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sectionsdf.encoding import HashGridConfig
from sectionsdf.field import FieldConfig
from sectionsdf.geometry import Contour2D

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def square(h: float, center=(0.0, 0.0)) -> Contour2D:
    cx, cy = center
    return Contour2D([[cx - h, cy - h], [cx + h, cy - h], [cx + h, cy + h], [cx - h, cy + h]])


@pytest.fixture
def unit_square():
    return square(0.5)


@pytest.fixture
def nested_squares():
    return [square(0.5), square(0.25)]


def tiny_field_config(**kw) -> FieldConfig:
    base = dict(
        hash=HashGridConfig(levels=2, n_min=2, n_max=4, features=2, table_size=2**6),
        rff_dim=8,
        hidden_enc=8,
        out_enc=8,
        hidden_sdf=8,
        beta_act=10.0,
    )
    base.update(kw)
    return FieldConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance report --------------------------------------------------------------

_VERDICTS: dict[str, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or rep.when != "call" and not rep.failed:
        return
    detail = dict(item.user_properties).get("measured", "")
    status = "PASS" if rep.passed else "FAIL"
    if rep.when != "call":
        detail = f"error during {rep.when}"
    _VERDICTS[mark.args[0]] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, (status, detail) in _VERDICTS.items():
        terminalreporter.write_line(f"{status}  {name}: {detail}")
