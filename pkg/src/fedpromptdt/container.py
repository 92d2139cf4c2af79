"""Checksummed array container used for dataset shards and checkpoints.

A container is an uncompressed ``.npz`` archive. Entry ``__meta__`` holds
UTF-8 JSON (``format``, ``format_version``, free-form metadata and
``checksum``); every other entry is a named array. The checksum is the
SHA-256 over, for each array name in sorted order: the name, its dtype
string, its shape and its C-order bytes, followed by the canonical JSON of
the metadata (without the checksum field). Zip member timestamps are fixed,
so equal contents produce byte-identical files.
"""
from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np

META_KEY = "__meta__"


class IntegrityError(RuntimeError):
    """Container failed its checksum, version or structure check."""


def content_digest(arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(a.dtype.str.encode())
        h.update(repr(a.shape).encode())
        h.update(a.tobytes())
    h.update(json.dumps(meta, sort_keys=True, separators=(",", ":")).encode())
    return h.hexdigest()


def save_container(path: str | Path, fmt: str, version: int, meta: Mapping[str, Any],
                   arrays: Mapping[str, np.ndarray]) -> str:
    if META_KEY in arrays:
        raise ValueError(f"array name {META_KEY!r} is reserved")
    body = {"format": fmt, "format_version": version, **meta}
    digest = content_digest(arrays, body)
    header = json.dumps({**body, "checksum": digest}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo(META_KEY + ".json", date_time=(1980, 1, 1, 0, 0, 0)), header)
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())
    tmp.replace(path)
    return digest


def load_container(path: str | Path, fmt: str, version: int) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            names = zf.namelist()
            if META_KEY + ".json" not in names:
                raise IntegrityError(f"{path}: missing metadata entry")
            meta = json.loads(zf.read(META_KEY + ".json").decode())
            arrays = {}
            for n in names:
                if n == META_KEY + ".json":
                    continue
                arrays[n[: -len(".npy")]] = np.load(io.BytesIO(zf.read(n)), allow_pickle=False)
    except FileNotFoundError:
        raise
    except IntegrityError:
        raise
    except Exception as exc:  # zip CRC errors, truncated files, bad JSON, bad npy headers
        raise IntegrityError(f"{path}: unreadable container ({exc})") from exc
    if meta.get("format") != fmt:
        raise IntegrityError(f"{path}: expected format {fmt!r}, found {meta.get('format')!r}")
    if meta.get("format_version") != version:
        raise IntegrityError(f"{path}: format version {meta.get('format_version')} != {version}")
    stored = meta.pop("checksum", None)
    if stored != content_digest(arrays, meta):
        raise IntegrityError(f"{path}: checksum mismatch")
    meta["checksum"] = stored
    return meta, arrays
