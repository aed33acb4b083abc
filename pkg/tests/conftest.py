import warnings

import numpy as np
import pytest
import torch
from hypothesis import settings

warnings.filterwarnings("ignore", message=".*TBB.*")
settings.register_profile("n2s", max_examples=60, deadline=None)
settings.load_profile("n2s")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_field_config():
    from n2s.field import FieldConfig, HashGridConfig

    return FieldConfig(
        hash=HashGridConfig(levels=3, table_size=2**10, base_resolution=4, finest_resolution=16),
        mlp_width=8,
        viewdir_width=8,
        view_frequencies=2,
        proposal_hash=HashGridConfig(levels=2, table_size=2**8, base_resolution=4, finest_resolution=8),
        proposal_width=8,
    )


@pytest.fixture
def tiny_field(tiny_field_config):
    from n2s.field import RadianceField

    torch.manual_seed(0)
    return RadianceField(tiny_field_config, seed=3).double()


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains fields; minutes on a single core")


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    if module is not None and module.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(module.RESULTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
