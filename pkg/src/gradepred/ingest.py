"""Reading grade files, retake de-duplication and the active/inactive split."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Iterable, TextIO

from .core import GradeError, GradeRecord, letter_to_points

log = logging.getLogger(__name__)

COLUMNS = ("student", "course", "term", "grade")


class HeaderError(ValueError):
    """The input has no usable ``student,course,term,grade`` header."""


@dataclass
class IngestReport:
    kept: int = 0
    dropped: int = 0
    duplicates: int = 0
    filtered: int = 0
    problems: list[str] = field(default_factory=list)

    def lines(self) -> list[str]:
        out = [f"kept\t{self.kept}", f"dropped\t{self.dropped}",
               f"duplicates\t{self.duplicates}", f"filtered\t{self.filtered}"]
        out.extend(f"problem\t{p}" for p in self.problems)
        return out


@dataclass(frozen=True)
class Cohort:
    records: tuple[GradeRecord, ...]
    last_term: int

    @classmethod
    def of(cls, records: Iterable[GradeRecord]) -> "Cohort":
        records = tuple(records)
        last = max((r.term for r in records), default=-1)
        return cls(records, last)

    @property
    def students(self) -> set[str]:
        return {r.student_id for r in self.records}


def parse_grade(text: str) -> float:
    """A grade cell holds either a letter or a number of grade points."""
    text = text.strip()
    try:
        value = float(text)
    except ValueError:
        return letter_to_points(text)
    if not (0.0 <= value <= 4.0):
        raise GradeError(f"grade {value} outside [0, 4]")
    return value


def _sniff_delimiter(header: str) -> str:
    return "\t" if header.count("\t") > header.count(",") else ","


def parse_records(source: TextIO | str, report: IngestReport | None = None) -> list[GradeRecord]:
    """Parse delimiter-separated grade records.

    The header must name the columns ``student, course, term, grade`` (any
    order, comma or tab separated). Lines with bad grades, pass/fail marks
    or malformed fields are skipped and counted in ``report``.
    """
    if isinstance(source, str):
        source = io.StringIO(source)
    report = report if report is not None else IngestReport()
    header = source.readline()
    if not header.strip():
        raise HeaderError("empty input: missing header row")
    delim = _sniff_delimiter(header)
    names = [h.strip().lower() for h in next(csv.reader([header], delimiter=delim))]
    if not set(COLUMNS) <= set(names):
        raise HeaderError(f"header must name {', '.join(COLUMNS)}; got {names}")
    pos = {c: names.index(c) for c in COLUMNS}

    records = []
    for lineno, row in enumerate(csv.reader(source, delimiter=delim), start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        try:
            rec = GradeRecord(
                row[pos["student"]].strip(), row[pos["course"]].strip(),
                int(row[pos["term"]]), parse_grade(row[pos["grade"]]))
            if not rec.student_id or not rec.course_id:
                raise ValueError("empty id")
        except (IndexError, ValueError) as exc:
            report.dropped += 1
            report.problems.append(f"line {lineno}: {exc}")
            log.warning("line %d rejected: %s", lineno, exc)
            continue
        records.append(rec)
    report.kept += len(records)
    return records


def format_records(records: Iterable[GradeRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in records:
        w.writerow((r.student_id, r.course_id, r.term, repr(float(r.grade))))
    return buf.getvalue()


def dedupe_retakes(records: Iterable[GradeRecord],
                   report: IngestReport | None = None) -> list[GradeRecord]:
    """Keep one record per (student, course): the one from the latest term."""
    best: dict[tuple[str, str], GradeRecord] = {}
    dups = 0
    for r in records:
        key = (r.student_id, r.course_id)
        prev = best.get(key)
        if prev is not None:
            dups += 1
            if r.term < prev.term:
                continue
        best[key] = r
    if dups:
        log.warning("%d retake record(s) collapsed to the latest term", dups)
        if report is not None:
            report.duplicates += dups
            report.kept -= dups
    return sorted(best.values(), key=lambda r: (r.term, r.student_id, r.course_id))


def read_allow_list(source: TextIO | str) -> set[str]:
    if isinstance(source, str):
        source = io.StringIO(source)
    return {line.strip() for line in source if line.strip() and not line.startswith("#")}


def apply_allow_list(records: Iterable[GradeRecord], allowed: set[str],
                     report: IngestReport | None = None) -> list[GradeRecord]:
    records = list(records)
    out = [r for r in records if r.course_id in allowed]
    if report is not None:
        report.filtered += len(records) - len(out)
        report.kept -= len(records) - len(out)
    return out


def split_active(records: Iterable[GradeRecord], target_term: int) -> tuple[Cohort, Cohort]:
    """Partition students by whether they have a record in ``target_term``.

    Returns ``(active, inactive)`` cohorts holding all records of the
    respective students.
    """
    records = list(records)
    active_ids = {r.student_id for r in records if r.term == target_term}
    if not active_ids:
        raise ValueError(f"no records in target term {target_term}")
    active = [r for r in records if r.student_id in active_ids]
    inactive = [r for r in records if r.student_id not in active_ids]
    return Cohort.of(active), Cohort.of(inactive)
