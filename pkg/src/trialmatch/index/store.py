"""On-disk index format: a JSON manifest plus one binary segment per index.

Segment layout::

    b"TMIX" | uint32 format version | uint32 array count
    then per array: uint32 name length | utf-8 name | .npy payload
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Union

import numpy as np

from ..errors import IndexFormatError
from .hnsw import HNSWIndex
from .lexical import IndexLevel, LexicalIndex

MAGIC = b"TMIX"
FORMAT_VERSION = 1
MANIFEST = "manifest.json"

AnyIndex = Union[LexicalIndex, HNSWIndex]


def write_segment(path: Path, arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(arrays)))
        for name, arr in arrays.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            np.lib.format.write_array(fh, np.ascontiguousarray(arr), allow_pickle=False)


def read_segment(path: Path) -> dict[str, np.ndarray]:
    try:
        with open(path, "rb") as fh:
            if fh.read(4) != MAGIC:
                raise IndexFormatError(f"{path}: bad magic")
            version, count = struct.unpack("<II", fh.read(8))
            if version != FORMAT_VERSION:
                raise IndexFormatError(f"{path}: unsupported format version {version}")
            arrays = {}
            for _ in range(count):
                (size,) = struct.unpack("<I", fh.read(4))
                name = fh.read(size).decode("utf-8")
                arrays[name] = np.lib.format.read_array(fh, allow_pickle=False)
            return arrays
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise IndexFormatError(f"{path}: {exc}") from exc


def _str_array(values: list[str]) -> np.ndarray:
    return np.array(values, dtype=str) if values else np.zeros(0, dtype="<U1")


def _lexical_arrays(index: LexicalIndex) -> dict[str, np.ndarray]:
    doc_ids = list(index.doc_lengths)
    slot = {d: i for i, d in enumerate(doc_ids)}
    offsets, docs, tfs = [0], [], []
    for posting in index.postings.values():
        for doc_id, tf in posting.items():
            docs.append(slot[doc_id])
            tfs.append(tf)
        offsets.append(len(docs))
    return {
        "doc_ids": _str_array(doc_ids),
        "doc_lengths": np.array(list(index.doc_lengths.values()), dtype=np.int64),
        "terms": _str_array(list(index.postings)),
        "offsets": np.array(offsets, dtype=np.int64),
        "docs": np.array(docs, dtype=np.int64),
        "tfs": np.array(tfs, dtype=np.int64),
    }


def _lexical_from_arrays(arrays: dict[str, np.ndarray], meta: dict) -> LexicalIndex:
    doc_ids = arrays["doc_ids"].tolist()
    index = LexicalIndex(IndexLevel(meta["level"]), k1=meta["k1"], b=meta["b"])
    index.doc_lengths = dict(zip(doc_ids, arrays["doc_lengths"].tolist()))
    offsets = arrays["offsets"].tolist()
    docs = arrays["docs"].tolist()
    tfs = arrays["tfs"].tolist()
    for i, term in enumerate(arrays["terms"].tolist()):
        lo, hi = offsets[i], offsets[i + 1]
        index.postings[term] = {doc_ids[docs[j]]: tfs[j] for j in range(lo, hi)}
    return index


def save_indices(directory: Union[str, Path], indices: dict[str, AnyIndex], meta: dict | None = None) -> None:
    """Write every index as ``<name>.seg`` and describe them in the manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, index in indices.items():
        seg = f"{name}.seg"
        if isinstance(index, LexicalIndex):
            write_segment(directory / seg, _lexical_arrays(index))
            entries[name] = {"kind": "lexical", "segment": seg, "level": index.level.value, "k1": index.k1, "b": index.b}
        elif isinstance(index, HNSWIndex):
            arrays = {"doc_ids": _str_array(index.doc_ids), **index.state()}
            write_segment(directory / seg, arrays)
            entries[name] = {
                "kind": "hnsw",
                "segment": seg,
                "dimension": index.dimension,
                "m": index.m,
                "ef_construction": index.ef_construction,
                "ef_search": index.ef_search,
                "seed": index.seed,
            }
        else:
            raise TypeError(f"cannot persist {type(index).__name__}")
    manifest = {"format_version": FORMAT_VERSION, "indices": entries, "meta": meta or {}}
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def read_manifest(directory: Union[str, Path]) -> dict:
    path = Path(directory) / MANIFEST
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise IndexFormatError(f"no manifest in {directory}") from exc
    except ValueError as exc:
        raise IndexFormatError(f"{path}: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise IndexFormatError(f"{path}: unsupported format version {manifest.get('format_version')}")
    return manifest


def load_indices(directory: Union[str, Path]) -> dict[str, AnyIndex]:
    directory = Path(directory)
    manifest = read_manifest(directory)
    out: dict[str, AnyIndex] = {}
    for name, entry in manifest["indices"].items():
        arrays = read_segment(directory / entry["segment"])
        if entry["kind"] == "lexical":
            out[name] = _lexical_from_arrays(arrays, entry)
        elif entry["kind"] == "hnsw":
            doc_ids = arrays.pop("doc_ids").tolist()
            out[name] = HNSWIndex.from_state(
                doc_ids, arrays, entry["dimension"], entry["m"],
                entry["ef_construction"], entry["ef_search"], entry["seed"],
            )
        else:
            raise IndexFormatError(f"unknown index kind {entry['kind']!r}")
    return out
