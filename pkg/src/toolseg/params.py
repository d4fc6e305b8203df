"""Parameter directory format.

A parameter source is a directory holding one raw binary file per
tensor plus ``manifest.json``::

    manifest.json   {"format": "toolseg-params", "version": 1,
                     "tensors": [{"name", "shape", "dtype", "file"}, ...]}
    <name>.bin      tensor values, little-endian, row-major (C order)

``dtype`` is a numpy name such as ``float64``. Loading preserves dtype;
save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import CorruptCheckpointError

PARAMS_FORMAT = "toolseg-params"
PARAMS_VERSION = 1

__all__ = ["save_parameters", "load_parameters"]


def save_parameters(params: dict[str, np.ndarray], directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        filename = f"{name}.bin"
        (directory / filename).write_bytes(arr.tobytes())
        entries.append({"name": name, "shape": list(arr.shape),
                        "dtype": arr.dtype.name, "file": filename})
    manifest = {"format": PARAMS_FORMAT, "version": PARAMS_VERSION,
                "tensors": entries}
    (directory / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_parameters(directory) -> dict[str, np.ndarray]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise CorruptCheckpointError(f"no manifest.json in {directory}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptCheckpointError(f"unreadable manifest: {exc}") from exc
    if manifest.get("format") != PARAMS_FORMAT:
        raise CorruptCheckpointError(f"not a parameter directory: {directory}")
    params = {}
    for entry in manifest["tensors"]:
        path = directory / entry["file"]
        shape = tuple(entry["shape"])
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if not path.is_file():
            raise CorruptCheckpointError(f"missing tensor file {path.name}")
        raw = path.read_bytes()
        if len(raw) != expected:
            raise CorruptCheckpointError(
                f"tensor file {path.name} holds {len(raw)} bytes, "
                f"expected {expected}")
        params[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return params
