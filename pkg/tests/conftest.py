import textwrap

import pytest


def write_config(path, body: str):
    path.write_text(textwrap.dedent(body))
    return path


TINY_KDT = """\
env = "kdt-small"
algorithm = "{algorithm}"
iterations = {iterations}
seeds = [0, 1]

[ppo]
hidden = [16]
epochs = 2
episodes_per_iteration = 4

[guidance]
enabled = {enabled}
k_temp = 50.0

[kernel]
bandwidth = 2.0
features = [0, 1]
max_points = 64
"""


@pytest.fixture
def tiny_config(tmp_path):
    def make(algorithm="posg", iterations=3, enabled="true", name="cfg.toml", extra=""):
        return write_config(tmp_path / name, TINY_KDT.format(algorithm=algorithm, iterations=iterations,
                                                            enabled=enabled) + extra)
    return make


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
