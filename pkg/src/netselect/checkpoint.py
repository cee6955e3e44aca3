"""Checksummed npz containers for checkpoints and chain traces.

Layout (version 1): a single ``.npz`` archive holding named float/int arrays
plus two reserved entries - ``__meta__`` (JSON string: version, kind, and
any scalar metadata such as RNG state or config echo) and ``__checksum__``
(SHA-256 over all other entries in sorted-name order). Corrupt or truncated
files fail loudly at load.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import tempfile
import zipfile

import numpy as np
from numpy.lib import format as npformat

ARCHIVE_VERSION = 1

__all__ = ["ArchiveError", "write_archive", "read_archive", "ARCHIVE_VERSION"]


class ArchiveError(RuntimeError):
    """Bad magic, version mismatch, or checksum failure."""


def _digest(arrays: dict, meta_json: str) -> str:
    h = hashlib.sha256()
    h.update(meta_json.encode())
    for name in sorted(arrays):
        h.update(name.encode())
        arr = np.ascontiguousarray(arrays[name])
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def write_archive(path: str, kind: str, arrays: dict, meta: dict) -> None:
    """Atomically write arrays + metadata with an integrity checksum.

    The zip members are written by hand with a fixed timestamp and no
    compression, so identical content produces byte-identical files - plain
    ``np.savez`` would stamp the current time into every entry.
    """
    meta_full = {"version": ARCHIVE_VERSION, "kind": kind, **meta}
    meta_json = json.dumps(meta_full, sort_keys=True)
    payload = {k: np.asarray(v) for k, v in arrays.items()}
    checksum = _digest(payload, meta_json)

    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        entries = [("__meta__", np.array(meta_json)),
                   ("__checksum__", np.array(checksum))]
        entries += [(k, payload[k]) for k in sorted(payload)]
        for name, arr in entries:
            body = io.BytesIO()
            npformat.write_array(body, np.asanyarray(arr), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_STORED
            zf.writestr(info, body.getvalue())

    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_archive(path: str, kind: str | None = None) -> tuple[dict, dict]:
    """Load and verify an archive; returns (arrays, meta)."""
    try:
        with np.load(path, allow_pickle=False) as zf:
            names = set(zf.files)
            if "__meta__" not in names or "__checksum__" not in names:
                raise ArchiveError(f"{path}: not a netselect archive")
            meta_json = str(zf["__meta__"])
            stored = str(zf["__checksum__"])
            arrays = {k: zf[k] for k in names - {"__meta__", "__checksum__"}}
    except ArchiveError:
        raise
    except Exception as exc:  # zip/IO-level damage surfaces as corruption too
        raise ArchiveError(f"{path}: unreadable archive ({exc})") from exc
    if _digest(arrays, meta_json) != stored:
        raise ArchiveError(f"{path}: checksum mismatch (corrupt or tampered)")
    meta = json.loads(meta_json)
    if meta.get("version") != ARCHIVE_VERSION:
        raise ArchiveError(f"{path}: unsupported archive version {meta.get('version')}")
    if kind is not None and meta.get("kind") != kind:
        raise ArchiveError(f"{path}: expected a {kind!r} archive, found {meta.get('kind')!r}")
    return arrays, meta
