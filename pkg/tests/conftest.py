import pytest

from epd.config import Config
from epd.synthetic import benchmark

TINY = {
    "data.synthetic_train_episodes": 5,
    "data.synthetic_test_episodes": 3,
    "model.td_hidden": 8,
    "model.td_head_hidden": 16,
    "model.gg_hidden": 8,
    "model.gg_feature_dim": 8,
    "model.energy_hidden": 16,
    "model.encoder_hidden": 16,
    "model.buffer_capacity": 50,
    "langevin.steps": 5,
    "diffusion.d_model": 8,
    "diffusion.heads": 2,
    "diffusion.layers": 1,
    "diffusion.ffn": 16,
    "diffusion.time_dim": 8,
    "train.epochs_td": 30,
    "train.epochs_sc": 30,
    "train.epochs_pd": 30,
    "train.epochs_ft": 10,
    "train.lr_td": 1e-2,
    "train.lr_sc": 1e-2,
    "train.lr_pd": 1e-2,
    "train.lr_ft": 1e-3,
}


@pytest.fixture(scope="session")
def tiny_config() -> Config:
    return Config().updated(TINY)


@pytest.fixture(scope="session")
def tiny_windows(tiny_config):
    d = tiny_config.data
    train, test = benchmark(d.synthetic_train_episodes, d.synthetic_test_episodes, seed=0)
    return train.windows(), test.windows()


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.RESULTS, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
