import dataclasses

import pytest

from ipakit.nanomodel import pretrain_host
from ipakit.nanomodel.transformer import TinyTransformer


@pytest.fixture(scope="session")
def host():
    """Default pretrained host (qkv_mlp targets)."""
    return pretrain_host()


@pytest.fixture(scope="session")
def host_qv(host):
    return TinyTransformer(dataclasses.replace(host.config, target_set="qv"), host.params())


# -- acceptance summary: one PASS/FAIL line per criterion ---------------------------------

_CRITERIA = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        n = report.nodeid.split("test_criterion_")[1].split("_")[0]
        detail = dict(report.user_properties).get("detail", report.longreprtext[-200:].strip())
        _CRITERIA[int(n)] = ("PASS" if report.outcome == "passed" else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {status} - {detail}")
