"""Shared fixtures: random probability maps and a tiny synthetic dataset."""

import numpy as np
import pytest

from pseudolabel_lab.mapcore import ProbMap
from pseudolabel_lab.model import TrainConfig
from pseudolabel_lab.synth import Dataset, DomainShiftSpec, SceneSpec, gen_domain_pair


def random_probmap(rng: np.random.Generator, height: int, width: int, num_classes: int, sharpness: float = 3.0):
    logits = rng.normal(scale=sharpness, size=(height, width, num_classes))
    exp = np.exp(logits - logits.max(axis=2, keepdims=True))
    return ProbMap(exp / exp.sum(axis=2, keepdims=True))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_spec():
    return SceneSpec(
        height=12,
        width=12,
        num_classes=3,
        num_regions=5,
        feature_dim=2,
        seed=5,
        class_palette=[[2.0, 0.0], [-2.0, 0.0], [0.0, 2.0]],
        noise_sigma=0.6,
        boundary_blur=1.5,
    )


@pytest.fixture
def small_shift():
    return DomainShiftSpec(mean_shift=[[0.3, 0.0], [0.0, 0.3], [-0.3, 0.0]], sigma_scale=1.2)


@pytest.fixture
def small_dataset(small_spec, small_shift):
    return Dataset.from_pair(gen_domain_pair(small_spec, small_shift, 3, 3, 2, jobs=1), synth_seed=small_spec.seed)


@pytest.fixture
def quick_config():
    return TrainConfig(lr_f=2e-3, epochs=4, batch=2, seed=3)
