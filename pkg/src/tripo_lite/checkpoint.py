"""Binary checkpoint container (all integers and floats little-endian).

Layout::

    magic       8 bytes   b"TRIPLANE"
    version     uint32    1
    R           uint32    plane resolution
    C           uint32    channels per plane
    extent      float32   half-width of the covered cube
    dtype       uint32    0 = float32 (the only code written)
    planes      3*R*R*C float32, planes XY, XZ, YZ, each row-major [a][b][c]
    n_sections  uint32
    n_sections times:
        name_len  uint16, name  utf-8 bytes
        ndim      uint32, dims  ndim * uint32
        data      prod(dims) float32, row-major

Field parameters use section names ``field.trunk.<i>.weight`` / ``.bias``,
``field.density.weight`` / ``.bias``, ``field.color.weight`` / ``.bias`` and
the scalar ``field.density_bias``; backbone parameters use ``backbone.*``.
Any other name (``meta.seed`` and so on) is preserved verbatim.
"""

from __future__ import annotations

import re
import struct
from pathlib import Path

import numpy as np

from .field import FieldParams
from .triplane import Triplane

MAGIC = b"TRIPLANE"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tp: Triplane, params: FieldParams | None = None, extra=None) -> None:
    """Write the triplane plus named float32 sections."""
    R, C = tp.resolution, tp.channels
    sections = []
    if params is not None:
        sections += params.named_arrays()
        sections.append(("field.density_bias", np.array([params.density_bias])))
    if extra:
        sections += list(extra.items()) if isinstance(extra, dict) else list(extra)
    out = bytearray()
    out += MAGIC
    out += struct.pack("<IIIfI", VERSION, R, C, tp.extent, 0)
    out += np.ascontiguousarray(tp.planes, dtype="<f4").tobytes()
    out += struct.pack("<I", len(sections))
    for name, arr in sections:
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr).tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path, dtype=np.float32):
    """Returns ``(triplane, field params or None, {name: array} of all sections)``."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a triplane checkpoint")
    off = 8
    try:
        version, R, C, extent, code = struct.unpack_from("<IIIfI", data, off)
        off += 20
        if version != VERSION or code != 0:
            raise CheckpointError(f"{path}: unsupported version {version} / dtype code {code}")
        n = 3 * R * R * C
        planes = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(3, R, R, C)
        off += 4 * n
        (n_sec,) = struct.unpack_from("<I", data, off)
        off += 4
        sections = {}
        for _ in range(n_sec):
            (ln,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + ln].decode("utf-8")
            off += ln
            (ndim,) = struct.unpack_from("<I", data, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            sections[name] = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape).astype(dtype)
            off += 4 * count
    except (struct.error, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: truncated or corrupt at byte {off}: {exc}") from None
    tp = Triplane(planes.astype(dtype), float(extent))
    return tp, _field_from_sections(sections, dtype), sections


def _field_from_sections(sections: dict, dtype):
    layer_ids = sorted(int(m.group(1)) for k in sections
                       if (m := re.fullmatch(r"field\.trunk\.(\d+)\.weight", k)))
    if not layer_ids:
        return None
    try:
        ws = [sections[f"field.trunk.{i}.weight"] for i in layer_ids]
        bs = [sections[f"field.trunk.{i}.bias"] for i in layer_ids]
        bias = float(sections.get("field.density_bias", np.array([-1.0]))[0])
        return FieldParams(ws, bs, sections["field.density.weight"], sections["field.density.bias"],
                           sections["field.color.weight"], sections["field.color.bias"],
                           density_bias=bias).astype(dtype)
    except KeyError as exc:
        raise CheckpointError(f"missing field section {exc}") from None
