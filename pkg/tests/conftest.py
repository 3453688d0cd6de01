import pytest

from partstudio import world
from partstudio.training import TrainConfig, run_training


@pytest.fixture(scope="session")
def micro_corpus(tmp_path_factory):
    """Tiny corpus for unit tests: 3 species x 4 instances x 4 views."""
    root = tmp_path_factory.mktemp("micro_corpus")
    catalog = world.generate_species_catalog(3, seed=5)
    return world.build_dataset(catalog, root, instances_per_species=4, seed=9)


def micro_config(corpus, run_dir, **overrides):
    """A deliberately small model and short run for fast unit tests."""
    base = dict(
        data_root=str(corpus.root),
        run_dir=str(run_dir),
        epochs=1,
        batch_size=4,
        species_dim=32,
        part_dim=4,
        token_dim=16,
        channels=(8, 16, 24),
        time_dim=32,
        log_every=5,
        seed=13,
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def micro_stage1(micro_corpus, tmp_path_factory):
    run_dir = tmp_path_factory.mktemp("micro_stage1")
    config = micro_config(micro_corpus, run_dir, epochs=2)
    return run_training(config, stage=1)


@pytest.fixture(scope="session")
def micro_stage2(micro_corpus, micro_stage1, tmp_path_factory):
    run_dir = tmp_path_factory.mktemp("micro_stage2")
    config = micro_config(
        micro_corpus, run_dir, epochs=2, init_checkpoint=str(micro_stage1)
    )
    return run_training(config, stage=2)
