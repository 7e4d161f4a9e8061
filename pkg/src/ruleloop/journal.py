"""Append-only JSONL journal with periodic snapshots.

Every mutation is written and flushed before the caller proceeds, so a
crash-restart replays to the exact acknowledged state. Records carry a
monotone sequence number; an optional clock adds wall time (deterministic
runs pass clock=None so replays are byte-identical).
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Callable, Iterator, Optional


class Journal:
    def __init__(self, path: str | Path, clock: Optional[Callable[[], str]] = None):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.clock = clock
        self._seq = self._last_seq()
        self._handle = self.path.open("a", encoding="utf-8")

    def _last_seq(self) -> int:
        if not self.path.exists():
            return 0
        last = 0
        with self.path.open("r", encoding="utf-8") as handle:
            for line in handle:
                if line.strip():
                    last = json.loads(line).get("seq", last)
        return last

    def append(self, record: dict) -> int:
        self._seq += 1
        payload = {"seq": self._seq, **record}
        if self.clock is not None:
            payload["ts"] = self.clock()
        self._handle.write(json.dumps(payload, sort_keys=True) + "\n")
        self._handle.flush()
        os.fsync(self._handle.fileno())
        return self._seq

    def replay(self, after_seq: int = 0) -> Iterator[dict]:
        if not self.path.exists():
            return
        with self.path.open("r", encoding="utf-8") as handle:
            for line in handle:
                if not line.strip():
                    continue
                record = json.loads(line)
                if record.get("seq", 0) > after_seq:
                    yield record

    def close(self) -> None:
        self._handle.close()


class SnapshotStore:
    """Point-in-time state snapshots named by journal sequence number."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def write(self, seq: int, state: dict) -> Path:
        path = self.directory / f"snapshot_{seq:09d}.json"
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps({"seq": seq, "state": state}, sort_keys=True), encoding="utf-8")
        os.replace(tmp, path)
        return path

    def latest(self) -> Optional[tuple[int, dict]]:
        candidates = sorted(self.directory.glob("snapshot_*.json"))
        if not candidates:
            return None
        payload = json.loads(candidates[-1].read_text(encoding="utf-8"))
        return payload["seq"], payload["state"]


def recover(journal: Journal, snapshots: SnapshotStore, apply: Callable[[dict, dict], dict], initial: dict) -> dict:
    """Rebuild state: latest snapshot plus replay of newer journal records."""
    state = initial
    after = 0
    snap = snapshots.latest()
    if snap is not None:
        after, state = snap
    for record in journal.replay(after_seq=after):
        state = apply(state, record)
    return state
