"""Single-file model and dataset containers.

Layout (all integers little-endian)::

    magic (8 bytes) | version u8 | manifest_len u32 | manifest JSON (utf-8)
    | blob | crc32 u32 over every preceding byte

Dense weights are stored as ``<f4``; packed weights as mixed-precision
sections (see :meth:`actsvd.packing.PackedWeight.to_bytes`). The manifest
records each layer's offset and length inside the blob. ``docs/format.md``
is the byte-level reference.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .models import Dataset, LayerSpec, ToyModel
from .packing import PackedWeight, PackError, unpack
from .ranks import RankAllocation

MODEL_MAGIC = b"ACTSVDM\x00"
DATA_MAGIC = b"ACTSVDD\x00"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sBI")


class ContainerError(ValueError):
    """Base class for every load failure; no partial object is returned."""


class FormatError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class TruncatedFileError(ContainerError):
    pass


class ChecksumError(ContainerError):
    pass


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _encode(magic: bytes, manifest: dict, blob: bytes) -> bytes:
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = _PREFIX.pack(magic, FORMAT_VERSION, len(head)) + head + blob
    return body + struct.pack("<I", zlib.crc32(body))


def _decode(buf: bytes, magic: bytes) -> tuple[dict, memoryview]:
    if len(buf) < _PREFIX.size + 4:
        raise TruncatedFileError(f"file is {len(buf)} bytes, shorter than the fixed header")
    got_magic, version, head_len = _PREFIX.unpack_from(buf, 0)
    if got_magic != magic:
        raise FormatError(f"bad magic bytes {got_magic!r}")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported container version {version} (expected {FORMAT_VERSION})")
    body_end = len(buf) - 4
    if _PREFIX.size + head_len > body_end:
        raise TruncatedFileError("manifest extends past the end of the file")
    (crc,) = struct.unpack_from("<I", buf, body_end)
    crc_ok = zlib.crc32(buf[:body_end]) == crc
    try:
        manifest = json.loads(buf[_PREFIX.size:_PREFIX.size + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        if not crc_ok:
            raise ChecksumError("CRC32 mismatch") from exc
        raise FormatError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get("format_version") != FORMAT_VERSION:
        if not crc_ok:
            raise ChecksumError("CRC32 mismatch")
        raise VersionError(f"manifest format_version {manifest.get('format_version') if isinstance(manifest, dict) else None!r}")
    declared = manifest.get("blob_bytes")
    if isinstance(declared, int) and _PREFIX.size + head_len + declared + 4 > len(buf):
        raise TruncatedFileError(f"file is {len(buf)} bytes, manifest declares {_PREFIX.size + head_len + declared + 4}")
    if not crc_ok:
        raise ChecksumError("CRC32 mismatch")
    blob = memoryview(buf)[_PREFIX.size + head_len:body_end]
    if len(blob) != declared:
        raise FormatError(f"blob holds {len(blob)} bytes, manifest declares {declared}")
    return manifest, blob


# ---------------------------------------------------------------- models


@dataclass
class LoadedModel:
    model: ToyModel
    alloc: RankAllocation | None
    manifest: dict


def model_bytes(model: ToyModel, alloc: RankAllocation | None = None, meta: dict | None = None) -> bytes:
    entries, parts, offset = [], [], 0
    for layer in model.layers:
        m, n = layer.shape
        entry = {"name": layer.name, "m": m, "n": n, "activation": layer.activation, "compressible": layer.compressible}
        if layer.packed is not None:
            chunk = layer.packed.to_bytes(layer.name)
            entry.update(storage="packed", dtype="mixed16", k=layer.packed.k)
        else:
            w = np.asarray(layer.weight)
            if not np.all(np.isfinite(w)):
                raise ValueError(f"layer {layer.name} has non-finite weights")
            chunk = w.astype("<f4").tobytes()
            entry.update(storage="dense", dtype="<f4")
        entry.update(offset=offset, length=len(chunk))
        offset += len(chunk)
        parts.append(chunk)
        entries.append(entry)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": model.kind,
        "layers": entries,
        "alloc": alloc.to_json() if alloc is not None else None,
        "meta": meta or {},
        "blob_bytes": offset,
    }
    return _encode(MODEL_MAGIC, manifest, b"".join(parts))


def save_model(model: ToyModel, path, alloc: RankAllocation | None = None, meta: dict | None = None) -> None:
    _atomic_write(path, model_bytes(model, alloc, meta))


def parse_model(buf: bytes) -> LoadedModel:
    manifest, blob = _decode(buf, MODEL_MAGIC)
    layers = []
    try:
        for e in manifest["layers"]:
            start, length = int(e["offset"]), int(e["length"])
            if start < 0 or start + length > len(blob):
                raise TruncatedFileError(f"layer {e['name']} lies outside the blob")
            chunk = blob[start:start + length]
            m, n = int(e["m"]), int(e["n"])
            if e["storage"] == "dense":
                if e["dtype"] != "<f4" or length != 4 * m * n:
                    raise FormatError(f"layer {e['name']}: dense payload does not match {m}x{n} <f4")
                w = np.frombuffer(chunk, "<f4").reshape(m, n).astype(np.float64)
                layers.append(LayerSpec(e["name"], w, e["activation"], bool(e["compressible"])))
            elif e["storage"] == "packed":
                name, packed, end = PackedWeight.from_bytes(chunk)
                if name != e["name"] or end != length or (packed.m, packed.n) != (m, n):
                    raise FormatError(f"layer {e['name']}: packed section disagrees with the manifest")
                w1, w2 = unpack(packed)
                layers.append(LayerSpec(e["name"], w1 @ w2, e["activation"], bool(e["compressible"]), packed))
            else:
                raise FormatError(f"unknown storage {e['storage']!r}")
        model = ToyModel(layers, manifest["kind"])
        alloc = RankAllocation.from_json(manifest["alloc"]) if manifest.get("alloc") else None
    except ContainerError:
        raise
    except PackError as exc:
        raise FormatError(str(exc)) from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed manifest: {exc}") from exc
    return LoadedModel(model, alloc, manifest)


def load_container(path) -> LoadedModel:
    try:
        buf = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"no model file at {path}") from exc
    return parse_model(buf)


def load_model(path) -> ToyModel:
    return load_container(path).model


# -------------------------------------------------------------- datasets


def dataset_bytes(data: Dataset) -> bytes:
    x = np.ascontiguousarray(data.inputs, dtype="<f8")
    y = np.ascontiguousarray(data.targets)
    y = y.astype("<i8") if y.dtype.kind in "iu" else y.astype("<f8")
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": data.kind,
        "seed": int(data.seed),
        "split": data.split,
        "inputs": {"dtype": "<f8", "shape": list(x.shape)},
        "targets": {"dtype": y.dtype.str, "shape": list(y.shape)},
        "blob_bytes": x.nbytes + y.nbytes,
    }
    return _encode(DATA_MAGIC, manifest, x.tobytes() + y.tobytes())


def save_dataset(data: Dataset, path) -> None:
    _atomic_write(path, dataset_bytes(data))


def load_dataset(path) -> Dataset:
    manifest, blob = _decode(Path(path).read_bytes(), DATA_MAGIC)
    try:
        xs, ys = manifest["inputs"], manifest["targets"]
        if xs["dtype"] != "<f8" or ys["dtype"] not in ("<f8", "<i8"):
            raise FormatError("unsupported dataset dtypes")
        nx = int(np.prod(xs["shape"])) * 8
        x = np.frombuffer(blob[:nx], "<f8").reshape(xs["shape"]).astype(np.float64)
        y = np.frombuffer(blob[nx:], ys["dtype"]).reshape(ys["shape"])
        y = y.astype(np.int64 if ys["dtype"] == "<i8" else np.float64)
        return Dataset(manifest["kind"], int(manifest["seed"]), x, y, manifest["split"])
    except ContainerError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed dataset manifest: {exc}") from exc
