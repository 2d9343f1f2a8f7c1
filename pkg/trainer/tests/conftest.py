import pytest

from upsampler_trainer import TrainRunConfig, make_fixture_set, train_upsampler

TOY_CONFIG = dict(d_hidden=8, d_down=8, batch_size=4, epochs=50, seed=0)


@pytest.fixture(scope="session")
def toy_pairs(tmp_path_factory):
    root = tmp_path_factory.mktemp("pairs")
    return make_fixture_set(root, n_pairs=8, k=8, size=56, seed=0)


@pytest.fixture(scope="session")
def toy_run(toy_pairs, tmp_path_factory):
    """One real training run shared by the loss, export, and parity tests."""
    out = tmp_path_factory.mktemp("run") / "toy.war"
    model, history = train_upsampler(toy_pairs, TrainRunConfig(**TOY_CONFIG), out)
    return model, history, out
