"""Prediction records and the append-only result table."""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass

PREDICTED = "predicted"
REJECTED = "rejected"
FAILED = "failed"

# field order of one JSON line in a persisted table
FIELDS = ("sample_id", "table", "verdict", "topn", "ood_score", "timestamp",
          "replica", "message_id", "delivery")


@dataclass(frozen=True)
class PredictionRecord:
    sample_id: str
    table: str
    verdict: str
    topn: tuple = ()
    ood_score: float = None
    timestamp: float = 0
    replica: str = ""
    message_id: str = ""
    delivery: int = 0

    def __post_init__(self):
        if self.verdict == PREDICTED:
            probs = [p for _, p in self.topn]
            if not probs or any(a < b for a, b in zip(probs, probs[1:])):
                raise ValueError("predicted records need a nonempty, descending top-n list")
        elif self.topn:
            raise ValueError(f"{self.verdict} records carry no predictions")

    def labels(self):
        return [lbl for lbl, _ in self.topn]

    def to_json(self):
        row = {
            "sample_id": self.sample_id,
            "table": self.table,
            "verdict": self.verdict,
            "topn": [[lbl, p] for lbl, p in self.topn],
            "ood_score": self.ood_score,
            "timestamp": self.timestamp,
            "replica": self.replica,
            "message_id": self.message_id,
            "delivery": self.delivery,
        }
        return json.dumps({k: row[k] for k in FIELDS}, separators=(",", ":"))

    @classmethod
    def from_json(cls, line):
        row = json.loads(line)
        row["topn"] = tuple((lbl, p) for lbl, p in row["topn"])
        return cls(**row)


class ResultTable:
    """Append-only; appends are atomic so several consumers may share one table."""

    def __init__(self, name):
        self.name = name
        self._rows = []
        self._lock = threading.Lock()

    def append(self, record):
        with self._lock:
            self._rows.append(record)

    def __len__(self):
        return len(self._rows)

    def __iter__(self):
        with self._lock:
            return iter(list(self._rows))

    def records(self):
        with self._lock:
            return list(self._rows)

    def query(self, sample_id):
        """Every record for ``sample_id``, newest first; unknown ids give []."""
        with self._lock:
            hits = [(r.timestamp, i, r) for i, r in enumerate(self._rows) if r.sample_id == sample_id]
        hits.sort(key=lambda t: (t[0], t[1]), reverse=True)
        return [r for _, _, r in hits]

    def sorted_records(self):
        """Records in a run-independent order (timestamp, then message id)."""
        return sorted(self.records(), key=lambda r: (r.timestamp, r.message_id, r.delivery))

    def write(self, path, comments=(), stable=True):
        rows = self.sorted_records() if stable else self.records()
        with open(path, "w") as fh:
            for c in comments:
                fh.write(f"# {c}\n")
            for r in rows:
                fh.write(r.to_json() + "\n")

    @classmethod
    def read(cls, path, name=None):
        table = None
        with open(path) as fh:
            for ln in fh:
                if not ln.strip() or ln.startswith("#"):
                    continue
                rec = PredictionRecord.from_json(ln)
                if table is None:
                    table = cls(name or rec.table)
                table.append(rec)
        return table or cls(name or "")


def query_results(table, sample_id):
    return table.query(sample_id)


def query_tables(tables, sample_id):
    """Query each table in turn (task-centric end users need one lookup per table)."""
    out = []
    for t in tables:
        out.extend(t.query(sample_id))
    return out
