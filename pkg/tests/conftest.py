import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from detptq.container import load_model, save_model  # noqa: E402
from detptq.synthdata import SceneSpec, generate_dataset  # noqa: E402
from detptq.toydet import ToyDetector  # noqa: E402
from detptq.train import train_toy  # noqa: E402

# Shared toy-scale setup: the trained detector is cached across pytest runs.
TRAIN = {"n_images": 2000, "data_seed": 1, "epochs": 20, "seed": 0}
VAL = {"n_images": 300, "seed": 2}
CALIB_POOL = {"n_images": 512, "seed": 3}


ACCEPTANCE: list[str] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance experiment")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def trained_model(pytestconfig) -> ToyDetector:
    key = "detptq-model-" + "-".join(str(v) for v in TRAIN.values())
    path = Path(pytestconfig.cache.mkdir(key)) / "model.bin"
    if path.exists():
        return load_model(path).model
    train = generate_dataset(SceneSpec(), TRAIN["n_images"], seed=TRAIN["data_seed"])
    model = train_toy(ToyDetector(seed=TRAIN["seed"]), train, TRAIN["epochs"], seed=TRAIN["seed"])
    save_model(model, path, meta={"train": json.dumps(TRAIN)})
    return model


@pytest.fixture(scope="session")
def val_set():
    return generate_dataset(SceneSpec(), VAL["n_images"], seed=VAL["seed"])


@pytest.fixture(scope="session")
def calib_pool():
    return generate_dataset(SceneSpec(), CALIB_POOL["n_images"], seed=CALIB_POOL["seed"])
