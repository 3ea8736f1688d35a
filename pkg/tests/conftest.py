import pytest

from gridcarbon.geogrid import SynthSpec, synth_region
from gridcarbon.model import ModelConfig
from gridcarbon.train import TrainConfig

TINY_MODEL = dict(n_categories=3, image_size=8, poi_size=8, embed_dim=6, image_channels=4, image_blocks=1,
                  poi_channels=4, poi_layers=1, nbhd_layers=1, attn_dim=5, head_hidden=5, neighborhood=3)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(**TINY_MODEL)


@pytest.fixture(scope="session")
def tiny_dataset():
    return synth_region(SynthSpec(grid_rows=4, grid_cols=4, n_categories=3, image_size=8, poi_size=8, seed=3))


@pytest.fixture(scope="session")
def small_dataset():
    """6x6 grid: enough cells for quick training runs."""
    return synth_region(SynthSpec(grid_rows=6, grid_cols=6, n_categories=3, image_size=8, poi_size=8, seed=5))


@pytest.fixture
def quick_train():
    return TrainConfig(learning_rate=3e-3, batch_size=8, max_epochs=6, patience=100, alpha=0.05, gate_epoch=3)


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance")
    if module is None or not module.REPORT:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(module.REPORT):
        terminalreporter.write_line(module.REPORT[number])
