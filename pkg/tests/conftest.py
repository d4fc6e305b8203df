import pytest

from _synthetic import make_shapes_dataset


@pytest.fixture(scope="session")
def shapes_dataset_dir(tmp_path_factory):
    """Shared 8-frame color-keyed dataset (one sequence)."""
    root = tmp_path_factory.mktemp("shapes")
    return make_shapes_dataset(root)


@pytest.fixture(scope="session")
def two_sequence_dataset_dir(tmp_path_factory):
    """8 frames split over two sequences, for split/report structure tests."""
    root = tmp_path_factory.mktemp("shapes2")
    return make_shapes_dataset(root, n_frames=8, sequences=("seq_a", "seq_b"))
