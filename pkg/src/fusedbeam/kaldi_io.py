"""Readers and writers for Kaldi SCP index files and binary ARK float matrices.

SCP lines look like ``utt_id path/to/feats.ark:1234`` where the offset points at
the binary record inside the archive. A binary record is:

    \\x00 'B'            binary marker
    'F' 'M' ' '          float-matrix token (3 bytes)
    \\x04 <int32 rows>   little-endian
    \\x04 <int32 cols>   little-endian
    rows*cols float32    little-endian, row-major

Only float32 matrices are supported; double/compressed records are rejected.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import List

import numpy as np

from .errors import FormatError

BINARY_MARKER = b"\x00B"
FLOAT_MATRIX_TOKEN = b"FM "
_REJECTED_TOKENS = {b"DM ": "double matrix", b"CM ": "compressed matrix",
                    b"CM2": "compressed matrix", b"CM3": "compressed matrix",
                    b"FV ": "float vector", b"DV ": "double vector"}
_INT_SIZE = b"\x04"


@dataclass(frozen=True)
class ScpEntry:
    utt_id: str
    ark_path: str
    offset: int


@dataclass
class FeatureMatrix:
    utt_id: str
    data: np.ndarray  # [T, D] float32, T >= 1, D >= 1, all finite


def read_scp(path: str) -> List[ScpEntry]:
    """Parses an SCP file into entries, preserving line order."""
    entries: List[ScpEntry] = []
    seen = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line:
                continue
            fields = line.split(None, 1)
            if len(fields) != 2:
                raise FormatError(f"{path}:{lineno}: expected 'utt_id path:offset'")
            utt_id, rest = fields
            ark_path, sep, offset_text = rest.rpartition(":")
            if not sep or not ark_path:
                raise FormatError(f"{path}:{lineno}: missing ':offset' suffix")
            try:
                offset = int(offset_text)
            except ValueError:
                raise FormatError(
                    f"{path}:{lineno}: offset {offset_text!r} is not an integer"
                ) from None
            if offset < 0:
                raise FormatError(f"{path}:{lineno}: negative offset {offset}")
            if utt_id in seen:
                raise FormatError(
                    f"{path}:{lineno}: duplicate utterance id {utt_id!r}"
                    f" (first seen on line {seen[utt_id]})"
                )
            seen[utt_id] = lineno
            entries.append(ScpEntry(utt_id, ark_path, offset))
    return entries


def read_ark_matrix(ark_path: str, offset: int) -> np.ndarray:
    """Reads the float32 matrix stored at ``offset`` inside an ARK archive."""
    with open(ark_path, "rb") as f:
        f.seek(offset)
        marker = f.read(2)
        if marker != BINARY_MARKER:
            raise FormatError(
                f"{ark_path}@{offset}: bad binary marker {marker!r}"
            )
        token = f.read(3)
        if token != FLOAT_MATRIX_TOKEN:
            kind = _REJECTED_TOKENS.get(token)
            if kind is not None:
                raise FormatError(
                    f"{ark_path}@{offset}: unsupported record type {kind}"
                    f" ({token!r}); only float32 matrices are supported"
                )
            raise FormatError(f"{ark_path}@{offset}: bad header token {token!r}")
        dims = []
        for name in ("rows", "cols"):
            size = f.read(1)
            if size != _INT_SIZE:
                raise FormatError(
                    f"{ark_path}@{offset}: bad {name} size byte {size!r}"
                )
            payload = f.read(4)
            if len(payload) != 4:
                raise IOError(f"{ark_path}@{offset}: truncated {name} field")
            dims.append(struct.unpack("<i", payload)[0])
        rows, cols = dims
        if rows <= 0 or cols <= 0:
            raise FormatError(f"{ark_path}@{offset}: bad shape {rows}x{cols}")
        nbytes = rows * cols * 4
        payload = f.read(nbytes)
        if len(payload) != nbytes:
            raise IOError(
                f"{ark_path}@{offset}: truncated payload"
                f" ({len(payload)} of {nbytes} bytes)"
            )
        data = np.frombuffer(payload, dtype="<f4").reshape(rows, cols)
        if not np.isfinite(data).all():
            raise FormatError(f"{ark_path}@{offset}: non-finite values in matrix")
        return np.ascontiguousarray(data)


def read_feature(entry: ScpEntry) -> FeatureMatrix:
    return FeatureMatrix(entry.utt_id, read_ark_matrix(entry.ark_path, entry.offset))


def write_ark_matrix(utt_id: str, matrix: np.ndarray, ark_path: str,
                     scp_path: str) -> int:
    """Appends one record to an ARK archive plus its SCP line; returns the offset."""
    if not utt_id or any(c.isspace() for c in utt_id):
        raise ValueError(f"bad utterance id {utt_id!r}")
    data = np.asarray(matrix, dtype=np.float32)
    if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
        raise ValueError(f"matrix must be 2-D and non-empty, got shape {data.shape}")
    if not np.isfinite(data).all():
        raise ValueError("matrix contains non-finite values")
    rows, cols = data.shape
    with open(ark_path, "ab") as ark:
        ark.write(utt_id.encode("utf-8") + b" ")
        offset = ark.tell()
        ark.write(BINARY_MARKER)
        ark.write(FLOAT_MATRIX_TOKEN)
        ark.write(_INT_SIZE + struct.pack("<i", rows))
        ark.write(_INT_SIZE + struct.pack("<i", cols))
        ark.write(np.ascontiguousarray(data, dtype="<f4").tobytes())
    with open(scp_path, "a", encoding="utf-8") as scp:
        scp.write(f"{utt_id} {ark_path}:{offset}\n")
    return offset
