"""JSONL / JSON helpers and the run manifest written next to every artifact."""

from __future__ import annotations

import hashlib
import json
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import BadRecord, DimensionMismatch
from .synthworld import DatasetRecord

MANIFEST_NAME = "manifest.json"


def atomic_write_bytes(path: str | Path, data: bytes) -> str:
    """Write via a temp file + rename; returns the SHA-256 of ``data``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return hashlib.sha256(data).hexdigest()


def atomic_write_text(path: str | Path, text: str) -> str:
    return atomic_write_bytes(path, text.encode("utf-8"))


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_jsonl(path: str | Path, rows: Iterable[dict]) -> str:
    return atomic_write_text(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))


def iter_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise BadRecord(f"{path}:{lineno}: invalid JSON ({e.msg})") from None
            if not isinstance(obj, dict):
                raise BadRecord(f"{path}:{lineno}: expected a JSON object")
            yield obj


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_records(path: str | Path) -> list[DatasetRecord]:
    """Dataset records; every feature vector must have the same length."""
    out = []
    for i, obj in enumerate(iter_jsonl(path)):
        try:
            rec = DatasetRecord.from_json(obj)
        except (KeyError, TypeError, ValueError) as e:
            raise BadRecord(f"{path}: record {i} is malformed ({e!r})") from None
        if not rec.caption.strip():
            raise BadRecord(f"{path}: record {rec.id} has an empty caption")
        out.append(rec)
    if out:
        dims = {len(r.feature) for r in out}
        if len(dims) > 1:
            raise DimensionMismatch(f"{path}: feature lengths differ: {sorted(dims)}")
        if not all(np.all(np.isfinite(r.feature)) for r in out):
            raise BadRecord(f"{path}: non-finite feature values")
    return out


def merge_hard_negatives(records: list[DatasetRecord], rows: Iterable[dict]) -> list[DatasetRecord]:
    """Attach ``hn_*`` fields from augmentation rows, matched by record id."""
    by_id = {}
    for row in rows:
        try:
            by_id[str(row["id"])] = {k: row[k] for k in ("hn_rel", "hn_att", "hn_act", "hn_obj")}
        except KeyError as e:
            raise BadRecord(f"augmentation row {row.get('id')!r} lacks field {e}") from None
    out = []
    for r in records:
        if r.id not in by_id:
            raise BadRecord(f"no hard negatives for record {r.id}")
        out.append(DatasetRecord(r.id, r.feature, r.caption, r.scene, r.alt_captions, by_id[r.id]))
    return out


@dataclass
class RunManifest:
    """Everything needed to rerun a command and check its outputs.

    ``argv`` is the full command line; rerunning it with the same inputs
    regenerates every file in ``outputs`` byte for byte.
    """

    command: str
    argv: list[str]
    version: str
    config: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)  # non-config CLI options
    seed: int | None = None
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    started: float = field(default_factory=time.time)
    wall_clock_s: float = 0.0
    python: str = field(default_factory=platform.python_version)
    numpy: str = np.__version__
    platform: str = field(default_factory=lambda: sys.platform)

    def add_input(self, path: str | Path) -> None:
        self.inputs[str(path)] = sha256_file(path)

    def add_output(self, path: str | Path, digest: str | None = None) -> None:
        self.outputs[str(path)] = digest if digest is not None else sha256_file(path)

    def write(self, path: str | Path) -> str:
        self.wall_clock_s = time.time() - self.started
        return atomic_write_text(path, dump_json(asdict(self)))

    @classmethod
    def read(cls, path: str | Path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))
