import numpy as np
import pytest

from dipa.embedders import EmbedderRegistry, EmbedderSpec, default_registry
from dipa.synthetic import synthetic_face

# small embedders keep unit tests fast; the builtin tiny-* ids stay at 112
FAST_SPECS = (
    EmbedderSpec(id="fast-a", input_side=32, embedding_dim=16, kind="synthetic-tiny", weights_ref="101"),
    EmbedderSpec(id="fast-b", input_side=32, embedding_dim=16, kind="synthetic-tiny", weights_ref="202"),
    EmbedderSpec(id="fast-c", input_side=32, embedding_dim=16, kind="synthetic-tiny", weights_ref="303"),
    EmbedderSpec(id="fast-d", input_side=32, embedding_dim=16, kind="synthetic-tiny", weights_ref="404"),
)


@pytest.fixture(scope="session")
def registry():
    reg = default_registry()
    for spec in FAST_SPECS:
        reg.register(spec)
    return reg


@pytest.fixture(scope="session")
def face64():
    return synthetic_face(1000, size=64)


@pytest.fixture(scope="session")
def face112():
    return synthetic_face(1000, size=112)


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
