"""Single-file checkpoint container.

Layout (all integers little-endian)::

    magic        8 bytes   b"MTPCKPT\\x00"
    version      uint32    currently 1
    header_len   uint64    byte length of the JSON header
    header       UTF-8 JSON {"config": {...}, "meta": {...},
                             "tensors": [{"name", "shape", "offset"}, ...]}
    payload      float64 little-endian values, tensors back to back

``offset`` is the element offset of a tensor inside the payload; each tensor
is stored row-major.  Readers must ignore unknown header keys.
"""

import json
import os
import struct

import numpy as np

from .errors import ConfigError

MAGIC = b"MTPCKPT\x00"
VERSION = 1


def save_tensors(path, tensors, config=None, meta=None):
    """Write ``{name: ndarray}`` plus JSON-serializable config/meta to ``path``."""
    entries = []
    offset = 0
    arrays = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        arrays.append(arr)
    header = json.dumps({"config": config or {}, "meta": meta or {}, "tensors": entries},
                        sort_keys=True).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for arr in arrays:
            fh.write(arr.tobytes(order="C"))
    os.replace(tmp, path)


def load_tensors(path):
    """Return ``(tensors, config, meta)`` from a checkpoint written by :func:`save_tensors`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise ConfigError(f"{path} is not a checkpoint file")
    version, header_len = struct.unpack_from("<IQ", blob, 8)
    if version > VERSION:
        raise ConfigError(f"checkpoint version {version} is newer than supported ({VERSION})")
    start = 8 + struct.calcsize("<IQ")
    header = json.loads(blob[start:start + header_len].decode("utf-8"))
    payload = np.frombuffer(blob, dtype="<f8", offset=start + header_len)
    tensors = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        lo = entry["offset"]
        tensors[entry["name"]] = payload[lo:lo + count].astype(np.float64).reshape(entry["shape"])
    return tensors, header["config"], header["meta"]
