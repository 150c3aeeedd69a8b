import pytest


def pytest_addoption(parser) -> None:
    parser.addoption("--runslow", action="store_true", default=False, help="Run desk-scale reproductions")


def pytest_configure(config) -> None:
    config.addinivalue_line("markers", "slow: long-running desk-scale reproductions")


def pytest_collection_modifyitems(config, items) -> None:
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)
