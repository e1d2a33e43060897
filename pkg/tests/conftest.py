import dataclasses
import sys

import pytest

from silt.config import toy_config
from silt.data import ToySceneSpec, generate_toy_dataset
from silt.networks import DecompositionConfig, DiscriminatorConfig, GeneratorConfig


def tiny_config(**train):
    """Fast variant of the toy preset for plumbing tests."""
    cfg = toy_config()
    cfg = dataclasses.replace(
        cfg,
        image_size=(32, 32),
        batch_size=2,
        max_iterations=4,
        log_interval=2,
        checkpoint_interval=2,
        generator=dataclasses.replace(cfg.generator, base_channels=4, n_resblocks=2),
        decomposition=dataclasses.replace(cfg.decomposition, base_channels=4),
        discriminator=dataclasses.replace(cfg.discriminator, base_channels=4),
    )
    return dataclasses.replace(cfg, **train)


@pytest.fixture(scope="session")
def tiny_toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_toy")
    train, test = generate_toy_dataset(root, ToySceneSpec(seed=0, size=(32, 32)), n_train=3, n_test=2, n_dirs=3)
    return root, train, test


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(module.RESULTS):
        terminalreporter.write_line(module.RESULTS[n])
