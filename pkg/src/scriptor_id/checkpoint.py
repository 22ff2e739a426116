"""Model checkpoint container.

Byte layout (all integers little-endian)::

    offset  size  field
    0       8     magic b"SCRIPTID"
    8       4     uint32 format version (currently 1)
    12      4     uint32 header length H in bytes
    16      H     UTF-8 JSON header (keys sorted, compact separators)
    16+H    ...   parameter arrays, float64 little-endian, C order,
                  concatenated in header["arrays"] order

The header holds ``spec`` (the NetworkSpec fields), ``aggregation``, ``k``,
``writers`` (row order of the classifier head) and ``arrays``, a list of
``{"name", "shape"}`` records: the network parameters in declaration order
followed by ``head.weight`` and ``head.bias``. The character-level FC weight
expects its input flattened in (row, col, channel) order.

Writing the same model twice yields identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .models import ClassifierHead, Network, NetworkSpec, param_shapes
from .train import Model

MAGIC = b"SCRIPTID"
FORMAT_VERSION = 1


def save_checkpoint(model: Model, path) -> None:
    names = [name for name, _ in param_shapes(model.net.spec)] + ["head.weight", "head.bias"]
    arrays = model.params
    header = {
        "format_version": FORMAT_VERSION,
        "spec": model.net.spec.to_dict(),
        "aggregation": model.aggregation,
        "k": model.k,
        "writers": list(model.writers),
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in zip(names, arrays)],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def _read_header(fh, path) -> dict:
    if fh.read(8) != MAGIC:
        raise DataError(f"{path} is not a scriptor-id checkpoint")
    version, length = struct.unpack("<II", fh.read(8))
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint format version {version}")
    return json.loads(fh.read(length).decode("utf-8"))


def load_checkpoint(path) -> Model:
    path = Path(path)
    with open(path, "rb") as fh:
        header = _read_header(fh, path)
        arrays = []
        for rec in header["arrays"]:
            shape = tuple(rec["shape"])
            count = int(np.prod(shape))
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise DataError(f"{path}: truncated array {rec['name']}")
            arrays.append(np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape))
    spec = NetworkSpec.from_dict(header["spec"])
    expected = [tuple(s) for _, s in param_shapes(spec)]
    if [a.shape for a in arrays[:-2]] != expected:
        raise DataError(f"{path}: parameter shapes do not match the stored spec")
    net = Network(spec, arrays[:-2])
    head = ClassifierHead(arrays[-2], arrays[-1])
    return Model(net, head, list(header["writers"]), header["aggregation"], header["k"])
