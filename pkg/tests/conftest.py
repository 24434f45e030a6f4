import pytest

from mprf.synthetic import generate_world


@pytest.fixture(scope="session")
def shared_world(tmp_path_factory):
    """Small synthetic dataset reused by service and CLI tests.

    Four scenes keep same-scene revisits 40 s apart, outside the 30 s
    self-match exclusion window.
    """
    root = tmp_path_factory.mktemp("shared_world")
    manifest_path = generate_world(root, n_scenes=4, n_rounds=3, seed=5)
    return root, manifest_path
