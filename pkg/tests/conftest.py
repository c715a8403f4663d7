import numpy as np
import pytest

from qedks.hamiltonian import build_hamiltonians
from qedks.model import ExternalDrive, ModelSpec, Series, build_model

REF_DRIVE = ExternalDrive(a_ext={
    (0, 1): Series(trig=((0.5, 1.3, 0.0),)),
    (1, 1): Series(trig=((-0.3, 0.7, 0.4),)),
})


@pytest.fixture(scope="session")
def ref_model():
    return build_model(ModelSpec())


@pytest.fixture(scope="session")
def ref_hs(ref_model):
    return build_hamiltonians(ref_model)


@pytest.fixture(scope="session")
def ref_hs0(ref_model, ref_hs):
    return build_hamiltonians(ref_model, interacting=False, ops=ref_hs.ops)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
