import pytest

from helpers import tiny_config
from sassrec.pipeline import build_model, prepare_data


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_data(tiny_cfg):
    return prepare_data(tiny_cfg)


@pytest.fixture
def tiny_model(tiny_cfg, tiny_data):
    return build_model(tiny_cfg, tiny_data.dataset)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_RESULTS

    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n, title, passed, detail in sorted(ACCEPTANCE_RESULTS):
        line = f"criterion {n:2d} {'PASS' if passed else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
