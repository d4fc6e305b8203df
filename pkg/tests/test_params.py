"""Parameter directory round-trip and corruption handling."""

import json

import numpy as np
import pytest

from toolseg.errors import CorruptCheckpointError
from toolseg.params import load_parameters, save_parameters


@pytest.fixture
def sample_params():
    rng = np.random.default_rng(0)
    return {
        "conv1.weight": rng.normal(size=(7, 7, 3, 8)),
        "conv1.bn.gamma": np.ones(8, dtype=np.float32),
        "fc.bias": rng.normal(size=5),
    }


def test_round_trip_identity(tmp_path, sample_params):
    save_parameters(sample_params, tmp_path / "w")
    loaded = load_parameters(tmp_path / "w")
    assert set(loaded) == set(sample_params)
    for name, arr in sample_params.items():
        np.testing.assert_array_equal(loaded[name], arr)
        assert loaded[name].dtype == arr.dtype


def test_save_load_save_identical_bytes(tmp_path, sample_params):
    save_parameters(sample_params, tmp_path / "a")
    save_parameters(load_parameters(tmp_path / "a"), tmp_path / "b")
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_missing_manifest(tmp_path):
    (tmp_path / "w").mkdir()
    with pytest.raises(CorruptCheckpointError):
        load_parameters(tmp_path / "w")


def test_truncated_tensor_file(tmp_path, sample_params):
    save_parameters(sample_params, tmp_path / "w")
    target = tmp_path / "w" / "fc.bias.bin"
    target.write_bytes(target.read_bytes()[:-8])
    with pytest.raises(CorruptCheckpointError, match="fc.bias"):
        load_parameters(tmp_path / "w")


def test_manifest_records_shapes_and_dtypes(tmp_path, sample_params):
    save_parameters(sample_params, tmp_path / "w")
    manifest = json.loads((tmp_path / "w" / "manifest.json").read_text())
    entries = {e["name"]: e for e in manifest["tensors"]}
    assert entries["conv1.weight"]["shape"] == [7, 7, 3, 8]
    assert entries["conv1.bn.gamma"]["dtype"] == "float32"
