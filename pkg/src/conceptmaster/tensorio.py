"""Raw tensor files: one JSON header line, then little-endian float32 payload."""

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import ParseError

DTYPE = "f32le"


def write_tensor(path, array, **meta):
    """Write ``array`` as a header line plus row-major f32le bytes.

    Extra keyword arguments (e.g. ``fps``) go into the header.
    """
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    header = {"shape": list(arr.shape), "dtype": DTYPE, **meta}
    data = json.dumps(header, sort_keys=True).encode() + b"\n" + arr.tobytes()
    atomic_write_bytes(path, data)
    return Path(path)


def read_tensor(path):
    """Return ``(array, header)``; the array is float32."""
    with open(path, "rb") as fh:
        line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: bad tensor header") from exc
    if header.get("dtype") != DTYPE:
        raise ParseError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    shape = tuple(header["shape"])
    arr = np.frombuffer(payload, dtype="<f4")
    if arr.size != int(np.prod(shape)):
        raise ParseError(f"{path}: payload has {arr.size} values, header says {shape}")
    return arr.reshape(shape).astype(np.float32), header


def atomic_write_bytes(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(path, obj):
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
