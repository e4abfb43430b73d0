import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from depthstab.stabilizer import StabilizerConfig, StabilizerModel
from depthstab.synthdata import generate_scene, sample_scene_spec

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_acceptance = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def scene():
    """One moving-object scene at benchmark resolution."""
    return generate_scene(sample_scene_spec(7))


@pytest.fixture(scope="session")
def tiny_config():
    return StabilizerConfig(embed_dim=16, encoder_channels=[8, 8, 16], seed=3)


@pytest.fixture
def tiny_model(tiny_config):
    torch.manual_seed(0)
    return StabilizerModel(tiny_config).eval()


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    if "test_acceptance.py" not in report.nodeid:
        return
    props = dict(report.user_properties)
    crit = props.get("criterion")
    if crit is None:
        return
    _acceptance[crit] = (report.outcome, props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(_acceptance, key=lambda c: int(c[1:])):
        outcome, detail = _acceptance[crit]
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{crit} {status}  {detail}")
