"""Shared on-disk archive format: text manifest + float32 blobs.

Every binary artifact (corpus archives, core-set archives, distillate
archives, model checkpoints) uses the same container:

    fedsynth-archive 1 <kind>
    <key> <value>          # header: one "key value" pair per line
    ...
    #items
    <item line>            # archive-specific per-record rows (may be empty)
    ...
    #blobs
    <raw payload>          # concatenated 32-bit little-endian IEEE-754 floats

The payload holds only numeric data; everything needed to slice it lives in
the header/items. Readers locate the payload by the ``#blobs`` marker, so the
text part must never contain that line, which holds because keys and item
fields are generated, not user-supplied.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

MAGIC = "fedsynth-archive 1"
_BLOB_MARKER = b"\n#blobs\n"


class ArchiveError(RuntimeError):
    """Raised for malformed or mismatched archive files."""


def write_archive(
    path: str | Path,
    kind: str,
    header: dict[str, object],
    items: list[str] | None = None,
    arrays: list[np.ndarray] | None = None,
) -> int:
    """Write an archive; returns the payload size in bytes.

    Arrays are flattened in C order and concatenated as float32 little-endian.
    """
    lines = [f"{MAGIC} {kind}"]
    for key, value in header.items():
        if " " in str(key):
            raise ArchiveError(f"header key may not contain spaces: {key!r}")
        lines.append(f"{key} {value}")
    lines.append("#items")
    for item in items or []:
        if "\n" in item:
            raise ArchiveError("item lines may not contain newlines")
        lines.append(item)
    text = "\n".join(lines).encode("utf-8")

    blobs = []
    for arr in arrays or []:
        blobs.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    payload = b"".join(blobs)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(text)
        fh.write(_BLOB_MARKER)
        fh.write(payload)
    return len(payload)


def read_archive(path: str | Path) -> tuple[str, dict[str, str], list[str], bytes]:
    """Read an archive; returns (kind, header, item lines, raw payload bytes)."""
    data = Path(path).read_bytes()
    idx = data.find(_BLOB_MARKER)
    if idx < 0:
        raise ArchiveError(f"not a fedsynth archive (missing blob marker): {path}")
    text = data[:idx].decode("utf-8")
    payload = data[idx + len(_BLOB_MARKER):]

    lines = text.split("\n")
    first = lines[0]
    if not first.startswith(MAGIC + " "):
        raise ArchiveError(f"bad magic line in {path}: {first!r}")
    kind = first[len(MAGIC) + 1:]

    header: dict[str, str] = {}
    items: list[str] = []
    in_items = False
    for line in lines[1:]:
        if line == "#items":
            in_items = True
            continue
        if in_items:
            items.append(line)
        else:
            key, _, value = line.partition(" ")
            header[key] = value
    return kind, header, items, payload


def floats_from_payload(payload: bytes, offset: int, count: int) -> np.ndarray:
    """Decode `count` float32 values starting at byte `offset` of the payload."""
    end = offset + 4 * count
    if end > len(payload):
        raise ArchiveError(
            f"payload truncated: need {end} bytes, have {len(payload)}"
        )
    return np.frombuffer(payload, dtype="<f4", count=count, offset=offset).copy()
