"""Checkpoint container: one JSON manifest line, then raw float64 payloads.

Layout: the first line of the file is UTF-8 JSON holding the format version,
an ordered parameter table (name, shape, byte offset into the payload region)
and a free-form ``extra`` dict.  The payload region that follows is the
little-endian float64 bytes of each parameter, contiguous, in manifest order.
"""

from __future__ import annotations

import json

import numpy as np

FORMAT_VERSION = 1


def save_checkpoint(path, arrays, extra=None):
    """Write named float64 arrays plus metadata to ``path``.

    ``arrays`` is an ordered mapping name -> ndarray; insertion order defines
    payload order.
    """
    entries = []
    offset = 0
    payloads = []
    for name, arr in arrays.items():
        shape = list(np.asarray(arr).shape)
        a = np.ascontiguousarray(arr, dtype="<f8")  # promotes 0-d to 1-d
        entries.append({"name": name, "shape": shape, "offset": offset})
        payloads.append(a.tobytes())
        offset += a.nbytes
    manifest = {
        "format": FORMAT_VERSION,
        "params": entries,
        "extra": extra or {},
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for blob in payloads:
            fh.write(blob)


def load_checkpoint(path):
    """Read back (arrays, extra); inverse of :func:`save_checkpoint`."""
    with open(path, "rb") as fh:
        header = fh.readline()
        manifest = json.loads(header.decode("utf-8"))
        if manifest.get("format") != FORMAT_VERSION:
            raise ValueError(
                f"unsupported checkpoint format {manifest.get('format')!r} in {path}")
        payload = fh.read()
    arrays = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
        arrays[entry["name"]] = arr.reshape(shape).astype(np.float64)
    return arrays, manifest.get("extra", {})
