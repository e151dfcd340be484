"""CGDM v1 tensor container.

Layout: a single UTF-8 JSON header line

    {"magic":"CGDM","version":1,"tensors":[{"name":...,"shape":[...]}, ...]}

terminated by ``'\\n'``, followed by the concatenated little-endian float64
payloads in header order.  Saving the result of a load reproduces the input
file byte for byte.
"""

import json

import numpy as np

from .errors import FormatError

MAGIC = "CGDM"
VERSION = 1


def save_tensors(path, tensors):
    """Write an ordered mapping ``name -> ndarray`` to ``path``.

    The iteration order of ``tensors`` defines the payload order and is
    preserved exactly on load.
    """
    names = list(tensors.keys())
    header = {
        "magic": MAGIC,
        "version": VERSION,
        "tensors": [
            {"name": n, "shape": list(np.asarray(tensors[n]).shape)} for n in names
        ],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        for n in names:
            arr = np.ascontiguousarray(np.asarray(tensors[n], dtype=np.float64))
            fh.write(arr.astype("<f8", copy=False).tobytes())


def load_tensors(path):
    """Read a CGDM v1 file and return ``dict[name, ndarray]`` in header order.

    The whole payload is validated before anything is returned: a truncated
    or oversized file raises :class:`FormatError` and yields no tensors.
    """
    with open(path, "rb") as fh:
        header_line = fh.readline()
        if not header_line.endswith(b"\n"):
            raise FormatError(f"{path}: missing header line terminator")
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: unreadable header: {exc}") from exc
        if not isinstance(header, dict) or header.get("magic") != MAGIC:
            raise FormatError(f"{path}: bad magic, expected {MAGIC!r}")
        if header.get("version") != VERSION:
            raise FormatError(f"{path}: unsupported version {header.get('version')!r}")
        entries = header.get("tensors")
        if not isinstance(entries, list):
            raise FormatError(f"{path}: header lacks a tensor table")
        shapes = []
        for e in entries:
            if not isinstance(e, dict) or "name" not in e or "shape" not in e:
                raise FormatError(f"{path}: malformed tensor entry {e!r}")
            shape = tuple(int(s) for s in e["shape"])
            if any(s < 0 for s in shape):
                raise FormatError(f"{path}: negative dimension in {e['name']!r}")
            shapes.append((str(e["name"]), shape))
        payload = fh.read()
    expected = sum(int(np.prod(s, dtype=np.int64)) for _, s in shapes) * 8
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, header promises {expected}"
        )
    out = {}
    offset = 0
    for name, shape in shapes:
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
        out[name] = arr.reshape(shape).astype(np.float64, copy=True)
        offset += count * 8
    return out


def parameter_count(path):
    """Total scalar count promised by the header (cross-check utility)."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
    header = json.loads(header_line.decode("utf-8"))
    return sum(
        int(np.prod(tuple(int(s) for s in e["shape"]), dtype=np.int64))
        for e in header["tensors"]
    )
