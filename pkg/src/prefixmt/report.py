"""Deterministic, line-oriented experiment reports."""
from __future__ import annotations

import json
import statistics
from dataclasses import dataclass, field
from typing import Sequence


def _dump(v) -> str:
    return json.dumps(v, sort_keys=True, separators=(",", ":"))


def aggregate(values: Sequence[float]) -> dict:
    """Median with min/max across seeds."""
    vals = [float(v) for v in values]
    if not vals:
        raise ValueError("nothing to aggregate")
    return {"median": statistics.median(vals), "min": min(vals), "max": max(vals), "n": len(vals)}


@dataclass
class EvalReport:
    """Per-condition results plus an echo of the config and seeds.

    ``timing`` holds wall-clock numbers; it is written in its own block and left
    out of :meth:`deterministic_text` so reruns can be compared byte for byte.
    """

    name: str
    config: dict
    seeds: list[int]
    rows: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    def _lines(self) -> list[str]:
        lines = [f"report={self.name}", f"seeds={_dump(self.seeds)}"]
        lines += [f"config.{k}={_dump(self.config[k])}" for k in sorted(self.config)]
        lines += [f"row={_dump(r)}" for r in self.rows]
        lines += ["[summary]", _dump(self.summary)]
        return lines

    def deterministic_text(self) -> str:
        return "\n".join(self._lines()) + "\n"

    def to_text(self) -> str:
        return "\n".join(self._lines() + ["[timing]", _dump(self.timing)]) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        lines = text.splitlines()
        name, seeds, config, rows, summary, timing = None, [], {}, [], {}, {}
        i = 0
        while i < len(lines):
            line = lines[i]
            if line == "[summary]":
                summary = json.loads(lines[i + 1])
                i += 2
                continue
            if line == "[timing]":
                timing = json.loads(lines[i + 1])
                i += 2
                continue
            key, _, value = line.partition("=")
            if key == "report":
                name = value
            elif key == "seeds":
                seeds = json.loads(value)
            elif key.startswith("config."):
                config[key[len("config."):]] = json.loads(value)
            elif key == "row":
                rows.append(json.loads(value))
            else:
                raise ValueError(f"unrecognised report line {i + 1}: {line!r}")
            i += 1
        if name is None:
            raise ValueError("report has no name line")
        return cls(name, config, seeds, rows, summary, timing)
