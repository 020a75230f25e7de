"""Binary containers and trace files.

All integers are little-endian, all text UTF-8. Writes go to a temporary file
in the destination directory and are renamed into place.

Weight file (``WF32``)::

    magic "WF32" | version u32 | tensor_count u32
    per tensor: name_len u32, name, rows u32, cols u32, rows*cols f32 row-major

Packed model file (``SHRY``)::

    magic "SHRY" | version u32 | tensor_count u32
    per tensor: name_len u32, name, rows u32, cols u32, logical_d_in u32,
                scheme u8, granularity u8, group_size u32,
                scale_count u32, scale_count f32,
                index_len u64, index bytes, sign_len u64, sign bytes,
                payload_len u64, payload bytes
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile

import numpy as np

from .bitpack import SCHEMES, PackedTensor, plane_sizes
from .errors import ConstraintError, FormatError
from .quant import Granularity

WEIGHT_MAGIC = b"WF32"
MODEL_MAGIC = b"SHRY"
VERSION = 1

_GRAN_CODES = {"per_tensor": 0, "per_channel": 1, "per_group": 2}
_GRAN_KINDS = {v: k for k, v in _GRAN_CODES.items()}


def atomic_write(path, emit, text: bool = False) -> None:
    """Call ``emit(fh)`` on a temp file next to ``path``, then rename it over ``path``."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        mode = "w" if text else "wb"
        kw = {"encoding": "utf-8", "newline": ""} if text else {}
        with os.fdopen(fd, mode, **kw) as fh:
            emit(fh)
        # mkstemp creates 0600; give the file the usual umask-derived mode
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data: bytes):
        self.buf = io.BytesIO(data)
        self.size = len(data)

    def take(self, n: int) -> bytes:
        b = self.buf.read(n)
        if len(b) != n:
            raise FormatError(f"truncated file: wanted {n} bytes, got {len(b)}")
        return b

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def u32(self) -> int:
        return self.unpack("I")[0]

    def name(self) -> str:
        n = self.u32()
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"tensor name is not UTF-8: {e}") from None

    def done(self) -> None:
        if self.buf.tell() != self.size:
            raise FormatError(f"{self.size - self.buf.tell()} trailing bytes")


def _header(r: _Reader, magic: bytes) -> int:
    got = r.take(4)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    return r.u32()


def _name_bytes(name: str) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


# -- weight file -------------------------------------------------------------


def encode_weights(tensors: dict[str, np.ndarray]) -> bytes:
    out = [WEIGHT_MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, W in tensors.items():
        W = np.asarray(W)
        if W.ndim != 2:
            raise ConstraintError(f"tensor {name!r} is not 2-D")
        out.append(_name_bytes(name))
        out.append(struct.pack("<II", *W.shape))
        out.append(np.ascontiguousarray(W, dtype="<f4").tobytes())
    return b"".join(out)


def decode_weights(data: bytes) -> dict[str, np.ndarray]:
    r = _Reader(data)
    tensors = {}
    for _ in range(_header(r, WEIGHT_MAGIC)):
        name = r.name()
        rows, cols = r.unpack("II")
        raw = r.take(4 * rows * cols)
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(rows, cols).astype(np.float32)
    r.done()
    return tensors


def write_weights(path, tensors: dict[str, np.ndarray]) -> None:
    data = encode_weights(tensors)
    atomic_write(path, lambda fh: fh.write(data))


def read_weights(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode_weights(fh.read())


# -- packed model file -------------------------------------------------------


def encode_model(tensors: dict[str, PackedTensor]) -> bytes:
    out = [MODEL_MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, p in tensors.items():
        g = p.granularity
        out.append(_name_bytes(name))
        out.append(struct.pack(
            "<IIIBBII", p.rows, p.cols, p.rows,
            SCHEMES.index(p.scheme), _GRAN_CODES[g.kind], g.group_size or 0, p.scales.size,
        ))
        out.append(np.ascontiguousarray(p.scales, dtype="<f4").tobytes())
        for plane in (p.index_plane, p.sign_plane, p.payload):
            out.append(struct.pack("<Q", len(plane)))
            out.append(bytes(plane))
    return b"".join(out)


def decode_model(data: bytes) -> dict[str, PackedTensor]:
    r = _Reader(data)
    tensors = {}
    for _ in range(_header(r, MODEL_MAGIC)):
        name = r.name()
        rows, cols, logical, scheme_code, gran_code, group_size, n_scales = r.unpack("IIIBBII")
        if scheme_code >= len(SCHEMES):
            raise FormatError(f"tensor {name!r}: unknown scheme code {scheme_code}")
        if gran_code not in _GRAN_KINDS:
            raise FormatError(f"tensor {name!r}: unknown granularity code {gran_code}")
        if logical != rows:
            raise FormatError(f"tensor {name!r}: logical d_in {logical} != rows {rows}")
        kind = _GRAN_KINDS[gran_code]
        try:
            g = Granularity(kind, group_size if kind == "per_group" else None)
            grid = g.grid_shape(rows, cols)
            g.check(rows, cols)
            expect = plane_sizes(SCHEMES[scheme_code], rows, cols)
        except ConstraintError as e:
            raise FormatError(f"tensor {name!r}: {e}") from None
        if n_scales != grid[0] * grid[1]:
            raise FormatError(f"tensor {name!r}: {n_scales} scales, layout needs {grid[0] * grid[1]}")
        scales = np.frombuffer(r.take(4 * n_scales), dtype="<f4").reshape(grid).astype(np.float32)
        planes = []
        for key in ("index_plane", "sign_plane", "payload"):
            (n,) = r.unpack("Q")
            if n != expect[key]:
                raise FormatError(f"tensor {name!r}: {key} is {n} bytes, layout needs {expect[key]}")
            planes.append(r.take(n))
        tensors[name] = PackedTensor(rows, cols, SCHEMES[scheme_code], scales, g, *planes)
    r.done()
    return tensors


def write_model(path, tensors: dict[str, PackedTensor]) -> None:
    data = encode_model(tensors)
    atomic_write(path, lambda fh: fh.write(data))


def read_model(path) -> dict[str, PackedTensor]:
    with open(path, "rb") as fh:
        return decode_model(fh.read())


# -- trace -------------------------------------------------------------------


def write_trace(path, records: list[dict]) -> None:
    def emit(fh):
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")

    atomic_write(path, emit, text=True)


def read_trace(path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"trace line {lineno}: {e}") from None
            missing = {"step", "loss", "lambda", "er_per_layer", "hist_per_layer"} - set(rec)
            if missing:
                raise FormatError(f"trace line {lineno}: missing fields {sorted(missing)}")
            records.append(rec)
    return records
