import numpy as np
import pytest

import synthfam
from graspwarp.pipeline import TrainConfig, TrainingInstance, TrainingSet, train


@pytest.fixture(scope="session")
def small_family():
    """Compact family (M around 240) for fast unit tests."""
    canonical = synthfam.canonical_cloud(n_body=170, n_handle=70, seed=7)
    rng = np.random.default_rng(5)
    draws = synthfam.balanced_param_draws(rng, 7)
    instances = []
    for index in range(8):
        if index == 0:
            params = np.ones(3)
            cloud = canonical
        else:
            params = draws[index - 1]
            cloud = synthfam.make_instance(params, canonical, rng)
        instances.append(
            {"params": params, "cloud": cloud, "grasp": synthfam.ground_truth_grasp(params)}
        )
    return canonical, instances


@pytest.fixture(scope="session")
def small_training_set(small_family):
    _, instances = small_family
    return TrainingSet(
        tuple(
            TrainingInstance(f"inst{i:02d}", inst["cloud"], inst["grasp"])
            for i, inst in enumerate(instances)
        )
    )


@pytest.fixture(scope="session")
def small_model(small_training_set):
    config = TrainConfig(cpd=synthfam.family_cpd_params(), variance_fraction=0.99)
    return train(small_training_set, 0, config)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
