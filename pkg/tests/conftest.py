import numpy as np
import pytest

from dkgqa import kgstore

import helpers


@pytest.fixture
def toy():
    return helpers.toy_store()


@pytest.fixture
def toy_inv():
    return helpers.toy_store(inverse=True)


@pytest.fixture
def toy_kg():
    return kgstore.KnowledgeGraph.build(helpers.toy_store(inverse=True, extra=True))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
