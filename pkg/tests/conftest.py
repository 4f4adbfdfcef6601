import dataclasses
from fractions import Fraction

import pytest
import torch

from ctt.config import TrainConfig
from ctt.data import SceneSpec, SplitSpec, generate_dataset, split_labeled
from ctt.losses import ContrastConfig
from ctt.model import BackboneConfig
from ctt.trainer import TrainData

TINY_BACKBONE = BackboneConfig(feature_dim=8, stride=4, widths=(4, 8), num_classes=3, norm_groups=2)
TINY_SCENE = SceneSpec(image_size=(32, 32), num_classes=3, seed=3)


def tiny_config(**overrides) -> TrainConfig:
    base = dict(
        backbone=TINY_BACKBONE,
        bank_capacity=4,
        max_iters=6,
        batch_labeled=2,
        batch_unlabeled=2,
        crop=32,
        base_lr=0.05,
        contrast=ContrastConfig(threshold=0.4),
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_samples():
    return generate_dataset(TINY_SCENE, 24)


@pytest.fixture(scope="session")
def tiny_data(tiny_samples):
    split = split_labeled(tiny_samples, SplitSpec(Fraction(1, 4), 0))
    val = generate_dataset(dataclasses.replace(TINY_SCENE, seed=99), 4)
    return TrainData(
        labeled=[tiny_samples[i] for i in split.labeled],
        unlabeled=[tiny_samples[i] for i in split.unlabeled],
        val=val,
    )


@pytest.fixture(autouse=True)
def _torch_defaults():
    torch.set_default_dtype(torch.float32)
    yield
    torch.set_default_dtype(torch.float32)


# --------------------------------------------------------------------------
# acceptance summary: one line per criterion

ACCEPTANCE = {}
CRITERIA = range(1, 11)


def record_criterion(number: int, passed: bool, detail: str):
    ACCEPTANCE[number] = (passed, detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in CRITERIA:
        passed, detail = ACCEPTANCE.get(n, (False, "not run or errored"))
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
