"""Binary volume files and the JSON-lines corpus.

Volume file layout (all little-endian)::

    offset  size  content
    0       8     magic  b"CEVOL\\x00\\x00\\x00"
    8       4     u32 format version (1)
    12      4     u32 payload kind: 0 = f32 intensity volume, 1 = u8 mask
    16      12    u32 x3 dims (H, W, S)
    28      12    f32 x3 spacing in mm
    40      ...   payload, C order (row-major), H*W*S elements
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .grammar import CaseFields
from .synth import MaskTensor, SyntheticCase, VolumeTensor

MAGIC = b"CEVOL\x00\x00\x00"
VERSION = 1
KIND_VOLUME, KIND_MASK = 0, 1
_HEADER = struct.Struct("<8sII")
_GEOM = struct.Struct("<3I3f")


def encode_volume(vol) -> bytes:
    if isinstance(vol, MaskTensor):
        kind, payload = KIND_MASK, np.ascontiguousarray(vol.data, dtype="<u1")
    elif isinstance(vol, VolumeTensor):
        kind, payload = KIND_VOLUME, np.ascontiguousarray(vol.data, dtype="<f4")
    else:
        raise InvalidInputError(f"cannot encode {type(vol).__name__}")
    if payload.ndim != 3:
        raise InvalidInputError(f"expected a 3D array, got shape {payload.shape}")
    return (_HEADER.pack(MAGIC, VERSION, kind)
            + _GEOM.pack(*payload.shape, *vol.spacing_mm)
            + payload.tobytes(order="C"))


def decode_volume(buf: bytes):
    if len(buf) < _HEADER.size + _GEOM.size:
        raise InvalidInputError("truncated volume header")
    magic, version, kind = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise InvalidInputError(f"bad magic {magic!r}")
    if version != VERSION:
        raise InvalidInputError(f"unsupported volume format version {version}")
    *dims, sx, sy, sz = _GEOM.unpack_from(buf, _HEADER.size)
    dtype = {KIND_VOLUME: "<f4", KIND_MASK: "<u1"}.get(kind)
    if dtype is None:
        raise InvalidInputError(f"unknown payload kind {kind}")
    count = int(np.prod(dims))
    offset = _HEADER.size + _GEOM.size
    expected = offset + count * np.dtype(dtype).itemsize
    if len(buf) != expected:
        raise InvalidInputError(f"payload size mismatch: {len(buf)} != {expected}")
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(dims).copy()
    spacing = (float(sx), float(sy), float(sz))
    if kind == KIND_MASK:
        return MaskTensor(data.astype(np.uint8), spacing)
    return VolumeTensor(data.astype(np.float32), spacing)


def write_volume(path, vol):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_volume(vol))


def read_volume(path):
    return decode_volume(Path(path).read_bytes())


def write_corpus(cases, out_dir, name="corpus.jsonl") -> Path:
    out_dir = Path(out_dir)
    (out_dir / "volumes").mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    with open(path, "w") as fh:
        for case in cases:
            vrel = f"volumes/{case.id}.vol"
            mrel = f"volumes/{case.id}.mask"
            write_volume(out_dir / vrel, case.volume)
            write_volume(out_dir / mrel, case.mask)
            rec = {"id": case.id, "report": case.report, "summary": case.summary,
                   "plan": case.plan, "fields": case.fields.to_dict(),
                   "volume": vrel, "mask": mrel}
            if case.meta:
                rec["meta"] = case.meta
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def read_corpus(path) -> list[SyntheticCase]:
    path = Path(path)
    if path.is_dir():
        path = path / "corpus.jsonl"
    root = path.parent
    cases = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            cases.append(SyntheticCase(
                id=rec["id"], report=rec["report"], summary=rec["summary"], plan=rec["plan"],
                fields=CaseFields.from_dict(rec["fields"]),
                volume=read_volume(root / rec["volume"]), mask=read_volume(root / rec["mask"]),
                meta=rec.get("meta", {})))
    return cases
