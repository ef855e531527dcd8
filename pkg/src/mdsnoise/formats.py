"""MDS1 (one spectrogram) and MDP1 (patch archive) binary containers.

Both files share one layout::

    magic (4 bytes) | header length (uint32 LE) | UTF-8 JSON header | float32 LE payload

The payload is row-major.  Headers are written with sorted keys so that equal
inputs give byte-identical files.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .spectrogram import PATCH_SHAPE, NoisePatch, Spectrogram

MDS_MAGIC = b"MDS1"
MDP_MAGIC = b"MDP1"
FORMAT_VERSION = 1
_LE_F32 = np.dtype("<f4")


def _dump_header(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def _write(path, magic: bytes, header: dict, payload: np.ndarray) -> None:
    raw = _dump_header(header)
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(np.ascontiguousarray(payload, dtype=_LE_F32).tobytes(order="C"))


def _read(path, magic: bytes) -> tuple[dict, bytes]:
    blob = Path(path).read_bytes()
    if blob[:4] != magic:
        raise FormatError(f"{path}: expected magic {magic!r}, got {blob[:4]!r}")
    (n,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8 : 8 + n].decode("utf-8"))
    if header.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {header.get('version')}")
    return header, blob[8 + n :]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_mds(path, spec: Spectrogram) -> None:
    header = {
        "version": FORMAT_VERSION,
        "shape": list(spec.shape),
        "doppler_axis": spec.doppler_axis.tolist(),
        "time_axis": spec.time_axis.tolist(),
        "scale_meta": _jsonable(spec.scale_meta),
        "label": _jsonable(spec.meta.get("label")),
        "intervals": _jsonable(spec.meta.get("intervals")),
        "seed": _jsonable(spec.meta.get("seed")),
        "extra": _jsonable({k: v for k, v in spec.meta.items() if k not in ("label", "intervals", "seed")}),
    }
    _write(path, MDS_MAGIC, header, spec.data)


def read_mds(path) -> Spectrogram:
    header, payload = _read(path, MDS_MAGIC)
    shape = tuple(header["shape"])
    data = np.frombuffer(payload, dtype=_LE_F32)
    if data.size != shape[0] * shape[1]:
        raise FormatError(f"{path}: payload holds {data.size} values, header says {shape}")
    meta = dict(header.get("extra") or {})
    for key in ("label", "intervals", "seed"):
        if header.get(key) is not None:
            meta[key] = header[key]
    return Spectrogram(
        data.reshape(shape).astype(np.float32),
        np.asarray(header["doppler_axis"]),
        np.asarray(header["time_axis"]),
        header["scale_meta"],
        meta,
    )


def _origin_out(origin):
    return list(origin) if isinstance(origin, (tuple, list)) else origin


def _origin_in(origin):
    return tuple(origin) if isinstance(origin, list) else origin


def write_mdp(path, patches: list[NoisePatch], meta: dict | None = None) -> None:
    kinds = {p.kind for p in patches}
    if len(kinds) > 1:
        raise FormatError(f"an archive holds one patch kind, got {sorted(kinds)}")
    header = {
        "version": FORMAT_VERSION,
        "count": len(patches),
        "shape": list(PATCH_SHAPE),
        "kind": kinds.pop() if kinds else None,
        "origins": [_jsonable(_origin_out(p.origin)) for p in patches],
        "meta": _jsonable(meta or {}),
    }
    payload = np.stack([p.data for p in patches]) if patches else np.zeros((0,) + PATCH_SHAPE)
    _write(path, MDP_MAGIC, header, payload)


def read_mdp(path) -> tuple[list[NoisePatch], dict]:
    """Return the patches and the manifest header."""
    header, payload = _read(path, MDP_MAGIC)
    shape = tuple(header["shape"])
    count = header["count"]
    data = np.frombuffer(payload, dtype=_LE_F32)
    if data.size != count * shape[0] * shape[1]:
        raise FormatError(f"{path}: payload does not match {count} x {shape}")
    blocks = data.reshape((count,) + shape).copy()
    patches = [
        NoisePatch(blocks[i], kind=header["kind"], origin=_origin_in(header["origins"][i]))
        for i in range(count)
    ]
    return patches, header
