import pytest
import torch

from distillfss import ModelConfig, TeacherModel, synth_shapes

CRITERION_RESULTS: list[tuple[str, bool, str]] = []


def record_criterion(name: str, passed: bool, detail: str) -> None:
    CRITERION_RESULTS.append((name, passed, detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not CRITERION_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in CRITERION_RESULTS:
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] {name}: {detail}")


@pytest.fixture(scope="session")
def small_config():
    return ModelConfig(num_classes=2, seed=0)


@pytest.fixture(scope="session")
def teacher(small_config):
    return TeacherModel(small_config)


@pytest.fixture(scope="session")
def tiny_dataset():
    return synth_shapes(num_items=6, image_size=64, num_classes=2, seed=11)


@pytest.fixture(autouse=True)
def _single_thread():
    old = torch.get_num_threads()
    torch.set_num_threads(1)
    yield
    torch.set_num_threads(old)
