import pytest

from mdgsr.config import parse_config

TINY_INI = """
[run]
seed = 3
[data]
grid = 16
factor = 2
n_subregions = 2
n_snapshots = 8
ring_center = 2.0
[model]
channels = 4
n_layers = 3
[stage1]
epochs = 2
batch_size = 4
[stage3]
epochs = 2
batch_size = 4
[sweep]
kappas = 10:1:1
epochs = 1
[evaluate]
n_samples = 8
"""

# criterion number -> (description, passed)
ACCEPTANCE = {}


@pytest.fixture
def tiny_ini(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY_INI, encoding="utf-8")
    return path


@pytest.fixture
def tiny_cfg():
    return parse_config(TINY_INI)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        desc, passed = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {desc}")
