import matplotlib

matplotlib.use("Agg")

import pytest
from PIL import Image


def make_rgb(path, color=(128, 128, 128), size=(4, 4)):
    Image.new("RGB", size, color).save(path)
    return path


@pytest.fixture
def rgb_factory():
    return make_rgb


def pytest_runtest_logreport(report):
    # One visible pass/fail line per acceptance criterion.
    if report.when == "call" and "test_acceptance" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        print(f"\n[acceptance] {name}: {report.outcome.upper()}")
