"""File formats: binary control fields, atomic writes and CSV number formatting.

A control-field file is a 20-byte little-endian header followed by the
coefficients::

    magic   4s   b"MLOC"
    version u16  FORMAT_VERSION
    dim     u8
    level   u8
    base    u32  1 / h_base
    n_dofs  u64
    values  n_dofs x f64, interior-dof order
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError
from .fem import NodalField, build_mesh

MAGIC = b"MLOC"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sHBBIQ")


def atomic_write_bytes(path, data):
    """Write ``data`` to a temporary file next to ``path``, then rename it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def encode_field(field):
    mesh = field.mesh
    header = HEADER.pack(MAGIC, FORMAT_VERSION, mesh.dim, mesh.level, mesh.base_cells,
                         mesh.n_dofs)
    return header + np.ascontiguousarray(field.values, dtype="<f8").tobytes()


def decode_field(data):
    if len(data) < HEADER.size:
        raise FormatError(f"control file too short ({len(data)} bytes)")
    magic, version, dim, level, base, n = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    if len(data) != HEADER.size + 8 * n:
        raise FormatError(f"expected {n} coefficients, file holds "
                          f"{(len(data) - HEADER.size) / 8:g}")
    mesh = build_mesh(dim, level, 1.0 / base)
    if mesh.n_dofs != n:
        raise FormatError(f"header dof count {n} does not match the mesh ({mesh.n_dofs})")
    values = np.frombuffer(data, dtype="<f8", offset=HEADER.size).astype(float)
    if not np.all(np.isfinite(values)):
        raise FormatError("non-finite coefficients")
    return NodalField(mesh, values)


def write_field(path, field):
    atomic_write_bytes(path, encode_field(field))


def read_field(path):
    return decode_field(Path(path).read_bytes())


def format_float(x):
    """Shortest decimal string that round-trips the binary64 value."""
    return repr(float(x))
