"""JSONL slate records: one slate per line.

    {"user_id": "u000001", "t_c": 1700003600,
     "history": [{"sport": "cricket", "format": "t20", "t": 1700000000, "kind": "contest_join",
                  "num_contests": 2, "entry_fee": 98.0, "ttrl_at_action": 5400,
                  "lineups_out": false, "max_prize": 150000.0}],
     "candidates": [{"sport": "cricket", "format": "t20", "ttrl": 1800,
                     "time_since_lineups": 600, "max_prize": 150000.0}, ...],
     "label": 0}
"""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Iterable, Iterator

from .features import CANDIDATE_WINDOW, KINDS, CandidateFeatures, ContestJoin, HistoricalAction, Slate

_HIST_KEYS = {"sport", "format", "t", "kind", "num_contests", "entry_fee", "ttrl_at_action", "lineups_out", "max_prize"}
_CAND_KEYS = {"sport", "format", "ttrl", "time_since_lineups", "max_prize"}
_SLATE_KEYS = {"user_id", "t_c", "history", "candidates", "label"}


class RecordError(ValueError):
    """Malformed or invariant-violating record; ``line`` is 1-based when known."""

    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


def _num(x) -> int | float:
    # integral seconds are written as ints
    return int(x) if float(x).is_integer() else x


def slate_to_record(s: Slate) -> dict:
    hist = []
    for a in s.history:
        h = {"sport": a.sport, "format": a.format, "t": int(a.t), "kind": a.kind}
        if a.join is not None:
            h["num_contests"] = a.join.num_contests
            h["entry_fee"] = a.join.total_entry_fee
        h.update(ttrl_at_action=_num(a.ttrl_at_action), lineups_out=bool(a.lineups_out), max_prize=a.max_prize)
        hist.append(h)
    cands = [{"sport": c.sport, "format": c.format, "ttrl": _num(c.ttrl),
              "time_since_lineups": None if c.time_since_lineups is None else _num(c.time_since_lineups),
              "max_prize": c.max_prize} for c in s.candidates]
    return {"user_id": s.user_id, "t_c": int(s.t_c), "history": hist, "candidates": cands, "label": s.label}


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise RecordError(msg)


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _is_num(x) -> bool:
    return (isinstance(x, (int, float)) and not isinstance(x, bool)) and math.isfinite(x)


def record_to_slate(rec: dict) -> Slate:
    """Parse and validate one record; raises :class:`RecordError` on any violation."""
    _require(isinstance(rec, dict), "record must be a JSON object")
    _require(set(rec) == _SLATE_KEYS, f"slate keys must be {sorted(_SLATE_KEYS)}, got {sorted(rec)}")
    _require(isinstance(rec["user_id"], str), "user_id must be a string")
    _require(_is_int(rec["t_c"]), "t_c must be an integer")
    t_c = rec["t_c"]
    _require(isinstance(rec["history"], list), "history must be a list")
    _require(isinstance(rec["candidates"], list), "candidates must be a list")
    history = []
    prev = None
    for j, h in enumerate(rec["history"]):
        _require(isinstance(h, dict) and set(h) <= _HIST_KEYS, f"history[{j}] has unknown keys")
        _require(h.get("kind") in KINDS, f"history[{j}].kind must be one of {KINDS}")
        _require(_is_int(h.get("t")), f"history[{j}].t must be an integer")
        _require(h["t"] < t_c, f"history[{j}].t={h['t']} is not before t_c={t_c}")
        _require(prev is None or h["t"] >= prev, f"history[{j}] is out of time order")
        prev = h["t"]
        _require(_is_num(h.get("ttrl_at_action")) and h["ttrl_at_action"] >= 0, f"history[{j}].ttrl_at_action invalid")
        _require(isinstance(h.get("lineups_out"), bool), f"history[{j}].lineups_out must be boolean")
        _require(_is_num(h.get("max_prize")) and h["max_prize"] >= 0, f"history[{j}].max_prize invalid")
        join = None
        if h["kind"] == "contest_join":
            _require(_is_int(h.get("num_contests")) and h["num_contests"] >= 1, f"history[{j}].num_contests invalid")
            _require(_is_num(h.get("entry_fee")) and h["entry_fee"] >= 0, f"history[{j}].entry_fee invalid")
            join = ContestJoin(h["num_contests"], float(h["entry_fee"]))
        else:
            _require("num_contests" not in h and "entry_fee" not in h, f"history[{j}] carries join fields")
        history.append(HistoricalAction(str(h["sport"]), str(h["format"]), h["t"], h["kind"],
                                        float(h["ttrl_at_action"]), h["lineups_out"], float(h["max_prize"]), join))
    cands = []
    for i, c in enumerate(rec["candidates"]):
        _require(isinstance(c, dict) and set(c) == _CAND_KEYS, f"candidates[{i}] keys must be {sorted(_CAND_KEYS)}")
        _require(_is_num(c["ttrl"]) and 0 < c["ttrl"] <= CANDIDATE_WINDOW,
                 f"candidates[{i}].ttrl={c['ttrl']} outside (0, {CANDIDATE_WINDOW}]")
        tsl = c["time_since_lineups"]
        _require(tsl is None or (_is_num(tsl) and tsl >= 0), f"candidates[{i}].time_since_lineups invalid")
        _require(_is_num(c["max_prize"]) and c["max_prize"] >= 0, f"candidates[{i}].max_prize invalid")
        cands.append(CandidateFeatures(str(c["sport"]), str(c["format"]), float(c["ttrl"]),
                                       None if tsl is None else float(tsl), float(c["max_prize"])))
    _require(len(cands) >= 2, "a slate needs at least 2 candidates")
    label = rec["label"]
    _require(_is_int(label) and 0 <= label < len(cands), f"label {label!r} out of range [0, {len(cands)})")
    labels = tuple(int(i == label) for i in range(len(cands)))
    return Slate(rec["user_id"], t_c, tuple(history), tuple(cands), labels)


def dumps(s: Slate) -> str:
    return json.dumps(slate_to_record(s), separators=(",", ":"))


def write_jsonl(path, slates: Iterable[Slate]) -> int:
    n = 0
    with open(path, "w") as fh:
        for s in slates:
            fh.write(dumps(s) + "\n")
            n += 1
    return n


def iter_jsonl(path) -> Iterator[tuple[int, Slate]]:
    """Stream ``(line_number, slate)``; blank lines are skipped."""
    with open(path) as fh:
        for no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise RecordError(f"invalid JSON: {e.msg}", no) from None
            try:
                yield no, record_to_slate(rec)
            except RecordError as e:
                raise RecordError(str(e), no) from None


def read_jsonl(path) -> list[Slate]:
    return [s for _, s in iter_jsonl(path)]


def validate_file(path) -> tuple[int, list[tuple[int, str]]]:
    """Check every line; returns ``(n_valid, [(line, message), ...])``."""
    ok, errors = 0, []
    with open(path) as fh:
        for no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record_to_slate(json.loads(line))
                ok += 1
            except json.JSONDecodeError as e:
                errors.append((no, f"invalid JSON: {e.msg}"))
            except RecordError as e:
                errors.append((no, str(e)))
    return ok, errors


def count_lines(path) -> int:
    return sum(1 for line in Path(path).open() if line.strip())
