import pytest

from billiards.geometry import TableSpec, build_table
from billiards.induced import default_rule


@pytest.fixture(scope="session")
def sinai():
    return build_table(TableSpec(family="semi-dispersing-square", a=1.0, rho=0.25))


@pytest.fixture(scope="session")
def stadium():
    return build_table(TableSpec(family="stadium", radius=1.0, length=2.0))


@pytest.fixture(scope="session")
def cusp():
    return build_table(TableSpec(family="cusp", radii=(1.0, 1.0, 1.0)))


@pytest.fixture(scope="session")
def flat():
    return build_table(TableSpec(family="flat-point", beta=4.0, halfwidth=0.5,
                                 gap=1.0))


@pytest.fixture(scope="session")
def sinai_rule(sinai):
    return default_rule(sinai)


@pytest.fixture(scope="session")
def stadium_rule(stadium):
    return default_rule(stadium)
