"""Shared fixtures: a small rendered OLAT dataset reused across test modules."""

import pytest

from src.lighting import standard_rig
from src.synth import generate_dataset


def pytest_addoption(parser):
    parser.addoption(
        "--run-acceptance",
        action="store_true",
        default=False,
        help="Run the full-scale relative-quality checks (trains on 16 scenes at 128 x 128)",
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-acceptance"):
        return
    skip_acceptance = pytest.mark.skip(reason="needs --run-acceptance")
    for item in items:
        if "acceptance" in item.keywords:
            item.add_marker(skip_acceptance)


@pytest.fixture(scope="session")
def oracle_manifest(tmp_path_factory):
    """Three scenes under eight rig lights at 32 x 32."""
    out_dir = tmp_path_factory.mktemp("oracle")
    return generate_dataset(3, standard_rig(8), out_dir, seed=0, resolution=32)


@pytest.fixture(scope="session")
def wide_manifest(tmp_path_factory):
    """Four scenes under eight rig lights at 48 x 48, large enough for SSIM crops."""
    out_dir = tmp_path_factory.mktemp("oracle_wide")
    return generate_dataset(4, standard_rig(8), out_dir, seed=10, resolution=48)
