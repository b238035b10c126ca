import pytest

from bdbscm import builtin_dataset


@pytest.fixture(scope="session")
def historical():
    return builtin_dataset()


@pytest.fixture(scope="session")
def map_fit(historical):
    from bdbscm import MAPPrior

    return MAPPrior(random_state=42).fit(historical)


@pytest.fixture(scope="session")
def robust_map(map_fit):
    from bdbscm import robustify

    return robustify(map_fit.mixture_, 0.5)
