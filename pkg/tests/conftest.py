import numpy as np
import pytest
import torch

from siamcam.config import ExperimentConfig
from siamcam.data import PreparedImage, generate_synthetic_dataset
from siamcam.model import build_model

SMALL = ExperimentConfig(image_size=(32, 32), embedding_dim=32, epochs=2, batch_size=16, seed=0)

_acceptance_lines: list[str] = []


@pytest.fixture
def record_criterion():
    """Collect one PASS/FAIL line per acceptance criterion for the summary."""
    def _record(number, name, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {name}" + (f" ({detail})" if detail else "")
        _acceptance_lines.append(line)
        print(line)
        return ok
    return _record


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)


@pytest.fixture
def small_config():
    return SMALL


@pytest.fixture
def small_model():
    model = build_model(SMALL, seed=0)
    model.eval()
    return model


def random_image(rng: np.random.Generator, size=(32, 32), source_id="rand") -> PreparedImage:
    return PreparedImage(rng.normal(size=(3, *size)).astype(np.float32), source_id)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """3 classes x 20 images of 32x32 (2 val images per class)."""
    root = tmp_path_factory.mktemp("tiny") / "data"
    return generate_synthetic_dataset(root, classes=3, per_class=20, image_size=(32, 32), seed=7)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
