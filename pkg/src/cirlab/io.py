"""Line-structured artifact files, config hashing and seed fan-out.

Every artifact written by the toolkit is a JSONL file whose first line is a
header record::

    {"__header__": true, "kind": "pairs", "format_version": 1, "config_hash": "..."}

Raw inputs (image embeddings, query records) may omit the header.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from pathlib import Path
from typing import Any, Iterable, Iterator

import numpy as np

from cirlab.errors import FormatVersionMismatch, InvalidRecord, MissingInput

FORMAT_VERSION = 1


def canonical_json(obj: Any) -> str:
    return json.dumps(_plain(obj), sort_keys=True, separators=(",", ":"))


def _plain(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def config_hash(obj: Any) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


def stage_seed(master_seed: int, stage: str) -> int:
    """Per-stage seed: first 8 hex digits of sha256("<master>:<stage>")."""
    digest = hashlib.sha256(f"{master_seed}:{stage}".encode()).hexdigest()
    return int(digest[:8], 16)


def make_header(kind: str, cfg_hash: str) -> dict:
    return {"__header__": True, "kind": kind, "format_version": FORMAT_VERSION,
            "config_hash": cfg_hash}


def write_records(path, records: Iterable[dict], kind: str, cfg_hash: str) -> int:
    """Write a header plus one JSON object per line, atomically. Returns the record count."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    n = 0
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(make_header(kind, cfg_hash), sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(_plain(rec), sort_keys=True) + "\n")
            n += 1
    os.replace(tmp, path)
    return n


def iter_lines(path) -> Iterator[dict]:
    path = Path(path)
    if not path.exists():
        raise MissingInput(path)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise InvalidRecord(f"{path}:{lineno}: {exc}") from exc


def read_records(path, kind: str | None = None, require_header: bool = True):
    """Return ``(header, records)``; header is ``None`` for headerless raw inputs."""
    lines = iter_lines(path)
    header = None
    records = []
    for i, rec in enumerate(lines):
        if i == 0 and rec.get("__header__"):
            header = rec
            continue
        records.append(rec)
    if header is None:
        # a completely empty file is an empty dataset, not a format error
        if require_header and records:
            raise FormatVersionMismatch(f"{path}: missing header record")
        return None, records
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatVersionMismatch(
            f"{path}: format_version {header.get('format_version')!r}, expected {FORMAT_VERSION}")
    if kind is not None and header.get("kind") != kind:
        raise FormatVersionMismatch(f"{path}: kind {header.get('kind')!r}, expected {kind!r}")
    return header, records


def read_embeddings(path) -> dict[str, np.ndarray]:
    """Load ``{image_id, embedding}`` records into an id -> vector map (insertion order kept)."""
    _, records = read_records(path, require_header=False)
    out: dict[str, np.ndarray] = {}
    dim = None
    for rec in records:
        try:
            image_id = str(rec["image_id"])
            vec = np.asarray(rec["embedding"], dtype=np.float64)
        except KeyError as exc:
            raise InvalidRecord(f"{path}: embedding record missing {exc}") from exc
        if vec.ndim != 1 or not np.all(np.isfinite(vec)):
            raise InvalidRecord(f"{path}: bad embedding for {image_id}")
        if dim is None:
            dim = vec.size
        elif vec.size != dim:
            raise InvalidRecord(f"{path}: {image_id} has dim {vec.size}, expected {dim}")
        if image_id in out:
            raise InvalidRecord(f"{path}: duplicate image id {image_id}")
        out[image_id] = vec
    return out


def write_embeddings(path, embeddings: dict, kind: str = "embeddings", cfg_hash: str = "") -> int:
    return write_records(
        path,
        ({"image_id": k, "embedding": [float(x) for x in v]} for k, v in embeddings.items()),
        kind, cfg_hash)


def write_json(path, obj: Any) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(_plain(obj), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def read_json(path) -> Any:
    path = Path(path)
    if not path.exists():
        raise MissingInput(path)
    return json.loads(path.read_text(encoding="utf-8"))
