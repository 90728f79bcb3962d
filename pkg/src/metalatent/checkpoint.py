"""Checkpoint files: a text manifest followed by a raw little-endian blob.

Layout (bytes):

    MLAT1\\n
    name=<name> shape=<d0,d1,...> dtype=<float32|float64> offset=<n>\\n
    ...
    END\\n
    <raw scalar blob, little endian, arrays concatenated at their offsets>

Array names are sorted so identical contents always serialize to identical
bytes. Only float arrays are stored; callers encode scalars as 0-d arrays.
"""

from __future__ import annotations

import numpy as np

__all__ = ["MAGIC", "CheckpointError", "save_checkpoint", "load_checkpoint"]

MAGIC = "MLAT1"

_DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(RuntimeError):
    """Corrupt, truncated, or mismatched checkpoint file."""


def save_checkpoint(path, arrays):
    """Write name -> float array mappings to `path` in the MLAT1 format."""
    entries = []
    blob = bytearray()
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        if arr.dtype.name not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {arr.dtype.name!r} for {name!r}")
        if any(ch.isspace() for ch in name) or "=" in name:
            raise CheckpointError(f"invalid array name {name!r}")
        offset = len(blob)
        blob.extend(np.ascontiguousarray(arr, dtype=_DTYPES[arr.dtype.name]).tobytes())
        shape = ",".join(str(d) for d in arr.shape)
        entries.append(f"name={name} shape={shape} dtype={arr.dtype.name} offset={offset}\n")
    with open(path, "wb") as fh:
        fh.write((MAGIC + "\n").encode("ascii"))
        for line in entries:
            fh.write(line.encode("ascii"))
        fh.write(b"END\n")
        fh.write(bytes(blob))


def load_checkpoint(path):
    """Read an MLAT1 checkpoint back into a name -> array dict."""
    with open(path, "rb") as fh:
        raw = fh.read()
    head, sep, blob = raw.partition(b"END\n")
    if not sep:
        raise CheckpointError(f"{path}: no manifest terminator")
    lines = head.decode("ascii", errors="replace").splitlines()
    if not lines or lines[0] != MAGIC:
        raise CheckpointError(f"{path}: bad magic header {lines[:1]!r}, expected {MAGIC!r}")
    arrays = {}
    for line in lines[1:]:
        fields = dict(part.split("=", 1) for part in line.split())
        try:
            name = fields["name"]
            shape = tuple(int(d) for d in fields["shape"].split(",") if d)
            dtype = fields["dtype"]
            offset = int(fields["offset"])
        except (KeyError, ValueError) as err:
            raise CheckpointError(f"{path}: malformed manifest line {line!r}") from err
        if dtype not in _DTYPES:
            raise CheckpointError(f"{path}: unsupported dtype {dtype!r} for {name!r}")
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * np.dtype(_DTYPES[dtype]).itemsize
        if offset + nbytes > len(blob):
            raise CheckpointError(f"{path}: blob truncated for array {name!r}")
        arr = np.frombuffer(blob, dtype=_DTYPES[dtype], count=count, offset=offset)
        arrays[name] = arr.reshape(shape).astype(dtype)
    return arrays
