"""On-disk layout of a run: scenario copy, raw records and counters, meta.json."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Any, Iterable

from .analysis import COUNTERS_HEADER, RECORDS_HEADER
from .runtime import TransactionRecord


class RunDirectory:
    """Raw records are appended as batches arrive, so analysis can always be redone offline."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def prepare(self, scenario_source: str | Path | None, scenario_doc: dict[str, Any] | None = None) -> None:
        self.path.mkdir(parents=True, exist_ok=True)
        if scenario_source is not None:
            text = Path(scenario_source).read_text(encoding="utf-8")
        else:
            text = json.dumps(scenario_doc or {}, indent=2) + "\n"
        (self.path / "scenario.json").write_text(text, encoding="utf-8")
        (self.path / "records.csv").write_text(RECORDS_HEADER + "\n", encoding="utf-8")
        (self.path / "counters.csv").write_text(COUNTERS_HEADER + "\n", encoding="utf-8")

    def write_meta(self, meta: dict[str, Any]) -> None:
        (self.path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def append_records(self, records: Iterable[TransactionRecord]) -> None:
        with open(self.path / "records.csv", "a", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            for r in records:
                writer.writerow([r.run_id, r.group, r.vuser_id, r.transaction, r.start_ns, r.end_ns,
                                 r.wall_start_ms, r.status, repr(r.connect_ms)])
