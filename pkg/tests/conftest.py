import time
from dataclasses import dataclass

import pytest

from rangexplain import data, nn
from rangexplain.experts import fit_bank

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@dataclass
class Trained:
    train: data.Dataset
    test: data.Dataset
    model: nn.MlpModel
    bank: object
    r2: float
    seconds: float


def train_range_strategy(standardized: bool) -> Trained:
    """Three-range controlled dataset and a (64, 64) relu net fitted to it."""
    start = time.perf_counter()
    ds, _ = data.gen_range_strategy(5000, 3, seed=1)
    if standardized:
        ds = data.standardize(ds)
    tr, te = ds.split(0.2, seed=1)
    cfg = nn.TrainConfig(learning_rate=0.05, epochs=200, batch_size=32, seed=2)
    model = nn.train(nn.init_mlp(ds.d, (64, 64), seed=2), tr, cfg)
    bank = fit_bank(nn.predict(model, tr.features), 3)
    return Trained(tr, te, model, bank, nn.r2_score(model, te.features, te.targets), time.perf_counter() - start)


@pytest.fixture(scope="session")
def range_strategy_model():
    return train_range_strategy(standardized=True)


@pytest.fixture(scope="session")
def range_strategy_raw_model():
    return train_range_strategy(standardized=False)
