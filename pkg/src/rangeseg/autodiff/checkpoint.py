"""Binary container for named arrays (checkpoints, image dumps).

Layout, all little-endian:

    bytes 0..3    magic  b"RSTC"
    bytes 4..7    u32    manifest length M in bytes
    bytes 8..8+M  JSON manifest, UTF-8
    after         raw array payloads, concatenated in manifest order

The manifest is human-readable text of the form

    {"format_version": 1,
     "arrays": [{"name": ..., "dtype": "<f4", "shape": [...], "nbytes": ...},
                ...],
     "extra": {...}}

"extra" carries small JSON metadata (model configuration, iteration
counters). Arrays are stored in C order with explicit little-endian
dtypes, so a container written on one machine loads bit-identically on
any other.
"""

from __future__ import annotations

import json

import numpy as np

from ..errors import FormatError

MAGIC = b"RSTC"
FORMAT_VERSION = 1

_ALLOWED_DTYPES = {"<f4", "<f8", "<i4", "<i8", "<u4", "|b1", "<u1"}


def _canonical_dtype(arr: np.ndarray) -> str:
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    s = dt.str
    if s == "|i1":
        s = "<u1"
    if s not in _ALLOWED_DTYPES:
        raise FormatError(f"dtype {arr.dtype} not supported by the container")
    return s


def write_container(path, arrays: dict[str, np.ndarray], extra: dict | None = None) -> None:
    """Write named arrays plus JSON metadata to `path`."""
    entries = []
    payloads = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dtype = _canonical_dtype(arr)
        data = arr.astype(dtype, copy=False).tobytes()
        entries.append(
            {
                "name": name,
                "dtype": dtype,
                "shape": list(arr.shape),
                "nbytes": len(data),
            }
        )
        payloads.append(data)
    manifest = {
        "format_version": FORMAT_VERSION,
        "arrays": entries,
        "extra": extra or {},
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint32(len(blob)).tobytes())
        fh.write(blob)
        for p in payloads:
            fh.write(p)


def read_container(path) -> tuple[dict[str, np.ndarray], dict]:
    """Load a container; returns (arrays, extra metadata)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise FormatError(f"{path}: not a container file (magic {magic!r})")
        raw_len = fh.read(4)
        if len(raw_len) != 4:
            raise FormatError(f"{path}: truncated header")
        mlen = int(np.frombuffer(raw_len, dtype="<u4")[0])
        blob = fh.read(mlen)
        if len(blob) != mlen:
            raise FormatError(f"{path}: truncated manifest")
        try:
            manifest = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: unreadable manifest: {exc}") from exc
        version = manifest.get("format_version")
        if version != FORMAT_VERSION:
            raise FormatError(
                f"{path}: unsupported container version {version!r}"
            )
        arrays: dict[str, np.ndarray] = {}
        offset = 4 + 4 + mlen
        for entry in manifest["arrays"]:
            data = fh.read(entry["nbytes"])
            if len(data) != entry["nbytes"]:
                raise FormatError(
                    f"{path}: array {entry['name']!r} truncated at byte "
                    f"offset {offset + len(data)}"
                )
            arr = np.frombuffer(data, dtype=np.dtype(entry["dtype"]))
            arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
            offset += entry["nbytes"]
    return arrays, manifest.get("extra", {})
