import sys

import pytest
import torch

from unimos.config import RunConfig, parse_config
from unimos.datasets import (
    DEFAULT_CLASSES,
    ClassRegistry,
    PartialLabelSpec,
    default_phantom_spec,
    generate_phantom,
    restrict_labels,
    write_dataset,
    write_registry,
)

REG = ClassRegistry(DEFAULT_CLASSES)

TINY_CONFIG = """
[data]
registry = registry.txt
labeled = liver/manifest.txt, kidney/manifest.txt, spleen/manifest.txt
unlabeled = unlabeled/manifest.txt
eval = eval/manifest.txt

[model]
size = 32
width = 4

[train]
epochs = 4
batch_labeled = 2
batch_unlabeled = 2
steps_per_epoch = 3
seed = 5
checkpoint_every = 2

[semi]
tau = 0.5
"""


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_data_dir(tmp_path_factory):
    """Three single-organ datasets, an unlabeled pool and a full eval set at 32 px."""
    root = tmp_path_factory.mktemp("tiny")
    pairs = generate_phantom(default_phantom_spec(32, count=16, seed=3), REG)
    write_registry(root / "registry.txt", REG)
    for k, name in enumerate(REG.names, start=1):
        spec = PartialLabelSpec(frozenset({k}))
        chunk = pairs[(k - 1) * 3 : k * 3]
        write_dataset(root / name, name, [p[0] for p in chunk], [restrict_labels(p[1], spec) for p in chunk], REG, spec)
    write_dataset(root / "unlabeled", "unlabeled", [p[0] for p in pairs[9:13]], None, REG)
    write_dataset(root / "eval", "eval", [p[0] for p in pairs[13:]], [p[1] for p in pairs[13:]], REG)
    (root / "config.ini").write_text(TINY_CONFIG)
    return root


@pytest.fixture
def tiny_cfg(tiny_data_dir) -> RunConfig:
    return parse_config(TINY_CONFIG, tiny_data_dir)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
