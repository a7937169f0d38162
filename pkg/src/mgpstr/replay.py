"""Fixed-score fusion replays: feed recorded branch scores, check the selected branch."""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .cfs import select_by_scores
from .errors import FormatError
from .lfs import select_by_similarity

DEFAULT_TABLE = "fusion_tables.json"


@dataclass
class ReplayResult:
    table: str
    word: str
    expected: str
    chosen: str
    text: str

    @property
    def ok(self) -> bool:
        return self.expected == self.chosen


def load_table(path: str | Path | None = None) -> dict:
    try:
        if path is None:
            raw = resources.files("mgpstr").joinpath("data", DEFAULT_TABLE).read_text(encoding="utf-8")
        else:
            raw = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise FormatError(f"cannot read replay table: {e}") from None
    try:
        return json.loads(raw)
    except json.JSONDecodeError as e:
        raise FormatError(f"replay table is not valid JSON: {e}") from None


def replay(table: dict) -> list[ReplayResult]:
    """Run every row; keys starting with ``cfs`` use score argmax, ``lfs`` similarity argmax."""
    out = []
    for name, rows in table.items():
        if name.startswith("cfs"):
            select = select_by_scores
        elif name.startswith("lfs"):
            select = select_by_similarity
        else:
            raise FormatError(f"unknown replay table {name!r}")
        for row in rows:
            try:
                d = select(row["scores"], row["texts"])
                out.append(ReplayResult(name, row["word"], row["expected"], d.branch, d.text))
            except (KeyError, TypeError) as e:
                raise FormatError(f"malformed replay row in {name!r}: {e}") from None
    return out
