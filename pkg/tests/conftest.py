import pytest

from motionscope.rendering import DatasetSpec, gen_dataset

# verdict lines collected by the acceptance tests, echoed after the test summary
_criterion_lines: list[str] = []


def record_criterion(line: str) -> None:
    _criterion_lines.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _criterion_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_criterion_lines):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    spec = DatasetSpec(
        colors=("red", "green", "blue"),
        shapes=("square", "circle"),
        directions=("E", "N"),
        speeds=(1, 2),
        seeds_per_combo=2,
        val_seeds=1,
        seed=0,
    )
    return gen_dataset(spec, tmp_path_factory.mktemp("data") / "small")
