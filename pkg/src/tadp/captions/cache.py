"""Caption records and their JSON-Lines cache."""
from __future__ import annotations

import json
import os
import tempfile
import threading
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator


@dataclass(frozen=True)
class CaptionRecord:
    image_id: str
    caption: str
    builder: str = "Caption"
    min_tokens: int = 0
    model_id: str = ""
    modifier_id: str | None = None
    cleaned: str | None = None
    provenance: str = "live"

    def __post_init__(self):
        if not self.caption.strip():
            raise ValueError(f"empty caption for {self.image_id!r}")
        if self.provenance not in ("live", "fixture"):
            raise ValueError(f"provenance must be 'live' or 'fixture', got {self.provenance!r}")

    @property
    def key(self) -> tuple[str, str, int, str]:
        return (self.image_id, self.builder, self.min_tokens, self.model_id)

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "CaptionRecord":
        data = json.loads(line)
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown caption record fields: {sorted(unknown)}")
        return cls(**data)


def cache_filename(dataset: str, builder: str, min_tokens: int) -> str:
    return f"captions_{dataset}_{builder}_{min_tokens}.jsonl"


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class CaptionCache:
    """Records keyed by (image_id, builder, min_tokens, model_id).

    ``put`` appends a line so partial progress survives crashes; ``finalize``
    rewrites the file sorted by key through an atomic rename. A single lock
    serialises writers.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._records: dict[tuple, CaptionRecord] = {}
        self._lock = threading.Lock()
        if self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    rec = CaptionRecord.from_json(line)
                    self._records[rec.key] = rec

    def get(self, image_id: str, builder: str, min_tokens: int, model_id: str) -> CaptionRecord | None:
        return self._records.get((image_id, builder, min_tokens, model_id))

    def find(self, image_id: str) -> CaptionRecord | None:
        """Any record for ``image_id`` (caches normally hold one builder setting)."""
        for key in sorted(self._records):
            if key[0] == image_id:
                return self._records[key]
        return None

    def put(self, record: CaptionRecord) -> None:
        with self._lock:
            self._records[record.key] = record
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
                fh.write(record.to_json() + "\n")

    def finalize(self) -> Path:
        with self._lock:
            text = "".join(self._records[k].to_json() + "\n" for k in sorted(self._records))
            _atomic_write(self.path, text)
        return self.path

    def __iter__(self) -> Iterator[CaptionRecord]:
        return iter([self._records[k] for k in sorted(self._records)])

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, image_id: str) -> bool:
        return any(k[0] == image_id for k in self._records)


class CleanCache:
    """(caption, domain, model_id) -> cleaned caption, persisted as JSON Lines."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self._table: dict[tuple[str, str, str], str] = {}
        self._lock = threading.Lock()
        if self.path and self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    d = json.loads(line)
                    self._table[(d["caption"], d["domain"], d["model_id"])] = d["cleaned"]

    def get(self, caption: str, domain: str, model_id: str) -> str | None:
        return self._table.get((caption, domain, model_id))

    def put(self, caption: str, domain: str, model_id: str, cleaned: str) -> None:
        with self._lock:
            self._table[(caption, domain, model_id)] = cleaned
            if self.path:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
                    row = {"caption": caption, "domain": domain, "model_id": model_id, "cleaned": cleaned}
                    fh.write(json.dumps(row, ensure_ascii=False) + "\n")

    def finalize(self) -> None:
        if not self.path:
            return
        with self._lock:
            rows = [
                json.dumps({"caption": c, "domain": d, "model_id": m, "cleaned": v}, ensure_ascii=False) + "\n"
                for (c, d, m), v in sorted(self._table.items())
            ]
            _atomic_write(self.path, "".join(rows))
