import pytest

from trustbench.experiment import ExperimentConfig, execute


def small_config(**overrides) -> ExperimentConfig:
    base = dict(n_workers=16, sims_per_worker=4, n_policies=40, n_batches=3, output_dir="runs/test")
    base.update(overrides)
    return ExperimentConfig(**base)


@pytest.fixture(scope="session")
def small_run():
    return execute(small_config(c=10.0))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in RESULTS:
        terminalreporter.write_line(line)
