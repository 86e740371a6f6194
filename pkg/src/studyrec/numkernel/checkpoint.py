"""Checkpoint files: a plain-text header followed by little-endian float32 buffers.

Layout::

    studyrec-checkpoint
    format_version=1
    param=<name> shape=<d0,d1,...> offset=<bytes> nbytes=<bytes>
    ...
    end_header
    <raw data>

Offsets are relative to the first byte after ``end_header\\n``.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

MAGIC = "studyrec-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(path: str | os.PathLike, arrays: dict[str, np.ndarray]) -> None:
    lines = [MAGIC, f"format_version={FORMAT_VERSION}"]
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        if any(ch.isspace() for ch in name) or "=" in name:
            raise CheckpointError(f"invalid parameter name {name!r}")
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        shape = ",".join(str(d) for d in np.shape(arr))
        lines.append(f"param={name} shape={shape} offset={offset} nbytes={len(blob)}")
        blobs.append(blob)
        offset += len(blob)
    lines.append("end_header")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    marker = b"\nend_header\n"
    cut = raw.find(marker)
    if cut < 0:
        raise CheckpointError(f"{path}: missing end_header")
    header = raw[:cut].decode("utf-8").split("\n")
    body = raw[cut + len(marker):]
    if not header or header[0] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if len(header) < 2 or header[1] != f"format_version={FORMAT_VERSION}":
        raise CheckpointError(f"{path}: unsupported format version line {header[1:2]}")
    arrays: dict[str, np.ndarray] = {}
    for line in header[2:]:
        fields = dict(part.split("=", 1) for part in line.split(" "))
        shape = tuple(int(d) for d in fields["shape"].split(",")) if fields["shape"] else ()
        offset, nbytes = int(fields["offset"]), int(fields["nbytes"])
        if offset + nbytes > len(body):
            raise CheckpointError(f"{path}: truncated buffer for {fields['param']}")
        arr = np.frombuffer(body, dtype="<f4", count=nbytes // 4, offset=offset)
        arrays[fields["param"]] = arr.reshape(shape).astype(np.float32)
    return arrays
