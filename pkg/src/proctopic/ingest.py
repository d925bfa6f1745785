"""Raw log parsing, cleaning profiles, the event codebook and corpus files.

Raw logs follow the layout of the PISA Climate Control export: one row per
logged action with ``event.number``, ``event``, ``time`` and ``event.type``
columns plus slider settings. Event ids in files are 1-based; the
EventSequences handed to the rest of the package are 0-based.
"""

from __future__ import annotations

import csv
import io
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterable

import numpy as np

from .model import EventSequence, ProcTopicError

NULL_MARKERS = frozenset({"", "null", "na", "nan", "none"})
REQUIRED_COLUMNS = ("event.number", "event", "time", "event.type")
SETTING_COLUMNS = ("top.setting", "central.setting", "bottom.setting")
SINGLE_EXAMINEE = "1"


class MalformedRow(ProcTopicError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line


class MissingColumn(ProcTopicError):
    def __init__(self, name: str):
        super().__init__(f"missing column {name!r}")
        self.column = name


class NonMonotoneTime(ProcTopicError):
    def __init__(self, examinee):
        super().__init__(f"examinee {examinee}: rows share time and event number; order cannot be repaired")
        self.examinee = examinee


class EmptySequence(ProcTopicError):
    def __init__(self, examinee):
        super().__init__(f"examinee {examinee}: no events survive cleaning")
        self.examinee = examinee


class UnknownLabel(ProcTopicError):
    pass


def is_null(value) -> bool:
    return value is None or str(value).strip().lower() in NULL_MARKERS


@dataclass(frozen=True)
class RawLogRow:
    examinee_id: str
    event_number: int
    event: str
    time: float
    event_type: str | None
    settings: tuple | None = None
    extra: dict = field(default_factory=dict, compare=False)


@dataclass(frozen=True)
class LabeledSequence:
    """A cleaned examinee stream with string labels, before codebook encoding."""

    examinee_id: Hashable
    labels: tuple
    times: tuple

    def __len__(self):
        return len(self.labels)

    @property
    def tau(self) -> float:
        return self.times[-1]

    def to_rows(self) -> list[RawLogRow]:
        """Rows that clean back to this sequence under the Climate profile."""
        rows = []
        for j, (lab, t) in enumerate(zip(self.labels, self.times), start=1):
            if lab == "RESET":
                rows.append(RawLogRow(str(self.examinee_id), j, "ACER_EVENT", t, "reset"))
            else:
                rows.append(RawLogRow(str(self.examinee_id), j, "ACER_EVENT", t, "apply",
                                      tuple(lab.strip("()").split(","))))
        return rows


# --- parsing ---------------------------------------------------------------------


def _sniff_delimiter(header: str) -> str:
    return "\t" if header.count("\t") > header.count(",") else ","


def _open_text(source):
    if isinstance(source, (str, Path)):
        return open(source, encoding="utf-8", newline="")
    if isinstance(source, io.TextIOBase) or hasattr(source, "read"):
        return source
    raise TypeError(f"cannot read log from {type(source).__name__}")


def parse_log(source, id_column: str = "examinee_id", delimiter: str | None = None) -> "OrderedDict[str, list[RawLogRow]]":
    """Read a delimited log file into per-examinee row groups.

    The delimiter (comma or tab) is detected from the header unless given.
    A file without ``id_column`` is treated as a single examinee with id "1".
    Groups keep first-appearance order; rows inside a group are sorted by
    (time, event.number).
    """
    fh = _open_text(source)
    try:
        text = fh.read()
    finally:
        if isinstance(source, (str, Path)):
            fh.close()
    if text.startswith("﻿"):
        text = text[1:]
    lines = text.splitlines()
    while lines and not lines[0].strip():
        lines.pop(0)
    if not lines:
        return OrderedDict()
    delim = delimiter or _sniff_delimiter(lines[0])
    reader = csv.reader(lines, delimiter=delim)
    header = [h.strip() for h in next(reader)]
    col = {name: j for j, name in enumerate(header)}
    for name in REQUIRED_COLUMNS:
        if name not in col:
            raise MissingColumn(name)
    has_id = id_column in col
    has_settings = all(c in col for c in SETTING_COLUMNS)
    known = set(REQUIRED_COLUMNS) | set(SETTING_COLUMNS) | {id_column}
    groups: OrderedDict[str, list[RawLogRow]] = OrderedDict()
    for lineno, rec in enumerate(reader, start=2):
        if not rec or all(not x.strip() for x in rec):
            continue
        if len(rec) != len(header):
            raise MalformedRow(lineno, f"expected {len(header)} fields, got {len(rec)}")
        rec = [x.strip() for x in rec]
        try:
            number = int(rec[col["event.number"]])
            time = float(rec[col["time"]])
        except ValueError as exc:
            raise MalformedRow(lineno, str(exc)) from None
        if number < 1:
            raise MalformedRow(lineno, f"event.number must be positive, got {number}")
        if not (time >= 0 and math.isfinite(time)):
            raise MalformedRow(lineno, f"time must be finite and non-negative, got {time}")
        settings = None
        if has_settings:
            vals = tuple(rec[col[c]] for c in SETTING_COLUMNS)
            settings = None if all(is_null(v) for v in vals) else vals
        etype = rec[col["event.type"]]
        ex = rec[col[id_column]] if has_id else SINGLE_EXAMINEE
        extra = {h: rec[j] for h, j in col.items() if h not in known}
        row = RawLogRow(ex, number, rec[col["event"]], time, None if is_null(etype) else etype, settings, extra)
        groups.setdefault(ex, []).append(row)
    for ex, rows in groups.items():
        rows.sort(key=lambda r: (r.time, r.event_number))
        for r0, r1 in zip(rows, rows[1:]):
            if (r0.time, r0.event_number) == (r1.time, r1.event_number):
                raise NonMonotoneTime(ex)
    return groups


# --- cleaning ----------------------------------------------------------------------


def settings_label(row: RawLogRow) -> str:
    """Slider triple label such as "(2,0,-1)"; each value must lie in -2..2."""
    if row.settings is None or len(row.settings) != 3:
        raise MalformedRow(row.event_number, "apply row without three slider settings")
    vals = []
    for s in row.settings:
        try:
            f = float(s)
        except (TypeError, ValueError):
            raise MalformedRow(row.event_number, f"slider setting {s!r} is not a number") from None
        if f != int(f) or not -2 <= f <= 2:
            raise MalformedRow(row.event_number, f"slider setting {s!r} outside -2..2")
        vals.append(int(f))
    return "(" + ",".join(str(v) for v in vals) + ")"


@dataclass(frozen=True)
class CleaningProfile:
    """Which rows to keep and how to label them.

    ``keep`` maps a lower-cased event.type to either the string "settings"
    (label from the slider triple) or a fixed label. Rows whose ``event``
    is in ``drop_events`` or whose type is not in ``keep`` are removed.
    """

    keep: dict
    drop_events: frozenset = frozenset({"START_ITEM", "END_ITEM"})

    def label(self, row: RawLogRow) -> str | None:
        if row.event.upper() in self.drop_events or row.event_type is None:
            return None
        rule = self.keep.get(row.event_type.strip().lower())
        if rule is None:
            return None
        return settings_label(row) if rule == "settings" else rule


CLIMATE = CleaningProfile(keep={"apply": "settings", "reset": "RESET"})


def clean_climate(rows: Iterable[RawLogRow], profile: CleaningProfile = CLIMATE, examinee_id=None) -> LabeledSequence:
    """Apply a cleaning profile to one examinee's rows.

    Kept rows are labelled by the profile; a row whose timestamp equals the
    previous kept one is dropped (first one wins).
    """
    rows = sorted(rows, key=lambda r: (r.time, r.event_number))
    ex = examinee_id if examinee_id is not None else (rows[0].examinee_id if rows else None)
    labels, times = [], []
    for r in rows:
        lab = profile.label(r)
        if lab is None:
            continue
        if times and r.time <= times[-1]:
            continue
        labels.append(lab)
        times.append(r.time)
    if not labels:
        raise EmptySequence(ex)
    return LabeledSequence(ex, tuple(labels), tuple(times))


def clean_all(groups, profile: CleaningProfile = CLIMATE):
    """Clean every group; returns (kept sequences, excluded examinee ids)."""
    kept, excluded = [], []
    for ex, rows in groups.items():
        try:
            kept.append(clean_climate(rows, profile, ex))
        except EmptySequence:
            excluded.append(ex)
    return kept, excluded


# --- codebook ----------------------------------------------------------------------


class Codebook:
    """Bijection between event labels and dense 1-based ids."""

    def __init__(self, labels: Iterable[str] = ()):
        self._labels: list[str] = []
        self._ids: dict[str, int] = {}
        for lab in labels:
            self.add(lab)

    def add(self, label: str) -> int:
        if label not in self._ids:
            self._labels.append(label)
            self._ids[label] = len(self._labels)
        return self._ids[label]

    @property
    def V(self) -> int:
        return len(self._labels)

    @property
    def labels(self) -> tuple:
        return tuple(self._labels)

    def id_of(self, label: str) -> int:
        try:
            return self._ids[label]
        except KeyError:
            raise UnknownLabel(label) from None

    def label_of(self, event_id: int) -> str:
        if not 1 <= event_id <= self.V:
            raise UnknownLabel(f"event id {event_id} outside 1..{self.V}")
        return self._labels[event_id - 1]

    def encode(self, labels) -> list[int]:
        return [self.id_of(x) for x in labels]

    def decode(self, ids) -> list[str]:
        return [self.label_of(int(i)) for i in ids]

    def __eq__(self, other):
        return isinstance(other, Codebook) and self._labels == other._labels

    def __len__(self):
        return self.V

    @classmethod
    def numeric(cls, V: int) -> "Codebook":
        """Codebook whose labels are the ids themselves ("1".."V")."""
        return cls(str(v) for v in range(1, V + 1))


def build_codebook(sequences: Iterable[LabeledSequence]):
    """Assign ids by first appearance; returns (Codebook, EventSequences with 0-based ids)."""
    sequences = list(sequences)
    book = Codebook()
    for s in sequences:
        for lab in s.labels:
            book.add(lab)
    out = [EventSequence(s.examinee_id, np.array(book.encode(s.labels)) - 1, np.array(s.times, dtype=np.float64))
           for s in sequences]
    return book, out


# --- canonical files ---------------------------------------------------------------


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_corpus(path, sequences, codebook: Codebook | None = None) -> None:
    """One line per event: examinee_id, event_id (1-based), label, time."""
    if codebook is None:
        V = max(int(s.events.max()) for s in sequences) + 1
        codebook = Codebook.numeric(V)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["examinee_id", "event_id", "label", "time"])
        for s in sequences:
            for e, t in zip(s.events, s.times):
                w.writerow([s.examinee_id, int(e) + 1, codebook.label_of(int(e) + 1), _fmt(t)])


def read_corpus(path):
    """Inverse of :func:`write_corpus`; returns (EventSequences, Codebook).

    Examinees keep first-appearance order; the codebook is rebuilt from the
    (event_id, label) pairs and must be consistent.
    """
    groups: OrderedDict[str, tuple[list, list]] = OrderedDict()
    labels: dict[int, str] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MissingColumn("examinee_id") from None
        col = {h.strip(): j for j, h in enumerate(header)}
        for name in ("examinee_id", "event_id", "time"):
            if name not in col:
                raise MissingColumn(name)
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise MalformedRow(lineno, f"expected {len(header)} fields, got {len(rec)}")
            try:
                eid = int(rec[col["event_id"]])
                t = float(rec[col["time"]])
            except ValueError as exc:
                raise MalformedRow(lineno, str(exc)) from None
            if eid < 1:
                raise MalformedRow(lineno, f"event_id must be >= 1, got {eid}")
            lab = rec[col["label"]] if "label" in col else str(eid)
            if labels.setdefault(eid, lab) != lab:
                raise MalformedRow(lineno, f"event_id {eid} has labels {labels[eid]!r} and {lab!r}")
            ev, tm = groups.setdefault(rec[col["examinee_id"]], ([], []))
            ev.append(eid - 1)
            tm.append(t)
    if not groups:
        return [], Codebook()
    V = max(labels)
    names = [labels.get(v, f"#{v}") for v in range(1, V + 1)]
    if len(set(names)) != V:
        raise MalformedRow(0, "codebook labels are not unique")
    book = Codebook(names)
    seqs = [EventSequence(ex, np.array(ev), np.array(tm)) for ex, (ev, tm) in groups.items()]
    return seqs, book


def write_codebook(path, codebook: Codebook) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label"])
        for v, lab in enumerate(codebook.labels, start=1):
            w.writerow([v, lab])


def read_codebook(path) -> Codebook:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    rows = [r for r in rows if r]
    ids = [int(r[0]) for r in rows]
    if ids != list(range(1, len(ids) + 1)):
        raise MalformedRow(0, "codebook ids must be dense 1..V in order")
    return Codebook(r[1] for r in rows)


def table1_path() -> Path:
    """Path of the bundled single-examinee transcript."""
    from importlib import resources

    return Path(str(resources.files("proctopic.data").joinpath("table1.csv")))
