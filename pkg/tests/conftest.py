import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from obsimpact.config import (  # noqa: E402
    CovarianceSection,
    ExperimentConfig,
    ExperimentSection,
    GridSection,
    LowRankSection,
    ObservationSection,
    OptimizerSection,
    TimeSection,
)
from obsimpact.experiments import assimilate, build_twin  # noqa: E402
from obsimpact.obs_impact import Provenance  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end experiment runs and full-scale timing checks")


def make_config(
    *,
    q=10,
    num_steps=20,
    dt=1e-3,
    max_iters=50,
    rank=None,
    modes=10,
    noise_frac=0.01,
    faults=((5, 5), (2, 2)),
    output_dir=Path("results"),
    algorithm="iterative",
):
    return ExperimentConfig(
        grid=GridSection(q=q, domain_min=-3.0, domain_max=3.0),
        time=TimeSection(dt=dt, num_steps=num_steps),
        covariance=CovarianceSection(corr_dist_cells=1.0),
        observations=ObservationSection(noise_frac=noise_frac),
        optimizer=OptimizerSection(max_iters=max_iters),
        lowrank=LowRankSection(algorithm=Provenance(algorithm), rank=rank or 3 * q * q, modes=modes),
        experiment=ExperimentSection(output_dir=Path(output_dir), fault_locations=tuple(faults)),
    )


@pytest.fixture
def config_factory():
    return make_config


@pytest.fixture(scope="session")
def desk_setup():
    """q=10 circular dam, 20 steps, full coverage at the final time."""
    return build_twin(make_config())


@pytest.fixture(scope="session")
def tiny_setup():
    """q=6 scenario small enough for dense oracles."""
    return build_twin(make_config(q=6, num_steps=10, faults=((3, 3),)))


@pytest.fixture(scope="session")
def tiny_analysis(tiny_setup):
    x_a, _ = assimilate(tiny_setup)
    return x_a
