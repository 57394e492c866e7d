import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pipeguard.datasets import DatasetSpec, generate_dataset
from pipeguard.protocol import Mode, PipelineConfig, Seeds, build_pipeline, uniform_stage_specs

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", parent=settings.get_profile("default"), max_examples=200)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def small_config(K=6, mode=Mode.BASELINE, seed=0, iterations=0, batch_size=4, micro_batch=1, width=8, input_dim=4, classes=4):
    specs = uniform_stage_specs(K, input_dim, width, classes)
    return PipelineConfig(
        specs,
        batch_size=batch_size,
        micro_batch=micro_batch,
        lr=0.05,
        iterations=iterations,
        mode=mode,
        seeds=Seeds.from_seed(seed),
    )


@pytest.fixture(scope="session")
def gauss_data():
    return generate_dataset(DatasetSpec(seed=1))


@pytest.fixture
def make_state():
    def make(**kw):
        trace = kw.pop("trace", False)
        return build_pipeline(small_config(**kw), trace=trace)

    return make


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
