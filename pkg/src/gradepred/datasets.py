"""Construction of the per-course, per-student and factorization matrices.

"Prior" always means a strictly smaller term index: a course taken in the
same term as the target course is not part of the design row.
"""

from __future__ import annotations

import io
from collections import defaultdict
from typing import Iterable, Sequence, TextIO

import numpy as np

from .core import CourseDataset, EmptyRowError, GradeRecord, SparseGradeMatrix, TargetInstance, row_gpas
from .ingest import Cohort

MIN_STUDENTS = 20


class LeakageError(RuntimeError):
    """A held-out (student, course) cell was found in training data."""


def histories(records: Iterable[GradeRecord]) -> dict[str, list[GradeRecord]]:
    """Records grouped by student, each list sorted by term."""
    out: dict[str, list[GradeRecord]] = defaultdict(list)
    for r in records:
        out[r.student_id].append(r)
    for recs in out.values():
        recs.sort(key=lambda r: (r.term, r.course_id))
    return dict(out)


def prior_grades(history: Sequence[GradeRecord], cutoff: int) -> dict[str, float]:
    """Grades earned strictly before ``cutoff``; a repeated course keeps its latest grade."""
    prior: dict[str, float] = {}
    for r in history:
        if r.term < cutoff:
            prior[r.course_id] = r.grade
    return prior


def _first_taking(history: Sequence[GradeRecord], course: str) -> GradeRecord | None:
    return next((r for r in history if r.course_id == course), None)


def dataset_from_rows(course: str, rows: Sequence[tuple[str, dict[str, float], float]],
                      col_ids: Sequence[str] | None = None) -> CourseDataset:
    """Assemble a dataset from ``(student_id, prior, target_grade)`` triples."""
    rows = sorted(rows, key=lambda t: t[0])
    if col_ids is None:
        col_ids = sorted({c for _, prior, _ in rows for c in prior})
    entries = {(sid, c): v for sid, prior, _ in rows for c, v in prior.items()}
    design = SparseGradeMatrix.from_entries([sid for sid, _, _ in rows], col_ids, entries)
    return CourseDataset(design, [y for _, _, y in rows], course)


def build_course_dataset(course: str, cohort: Cohort, k: int) -> CourseDataset:
    """Training design for ``course``: its takers with at least ``k`` prior courses.

    A student who took the course more than once is cut off at the first
    taking, whose grade becomes the target.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    rows = []
    for sid, hist in histories(cohort.records).items():
        first = _first_taking(hist, course)
        if first is None:
            continue
        prior = prior_grades(hist, first.term)
        prior.pop(course, None)
        if len(prior) >= k:
            rows.append((sid, prior, first.grade))
    return dataset_from_rows(course, rows)


def build_targets(course: str, cohort: Cohort, term: int, k: int) -> list[TargetInstance]:
    """Students of ``cohort`` taking ``course`` in ``term`` with at least ``k`` prior courses."""
    out = []
    for sid, hist in sorted(histories(cohort.records).items()):
        hit = next((r for r in hist if r.course_id == course and r.term == term), None)
        if hit is None:
            continue
        prior = prior_grades(hist, term)
        prior.pop(course, None)
        if len(prior) >= k:
            out.append(TargetInstance(sid, course, term, prior, hit.grade))
    return out


def dataset_instances(ds: CourseDataset) -> list[TargetInstance]:
    """Rows of an (uncentered) dataset as target instances, truth attached."""
    if ds.centering is not None:
        raise ValueError("expected an uncentered dataset")
    return [TargetInstance(sid, ds.target_course, -1, ds.design.row(i), float(ds.targets[i]))
            for i, sid in enumerate(ds.students)]


def center_dataset(ds: CourseDataset) -> CourseDataset:
    """Subtract each row's GPA from its design entries and its target."""
    gpa = row_gpas(ds.design)
    design = ds.design.with_values(ds.design.vals - gpa[ds.design.rows])
    total = gpa if ds.centering is None else ds.centering + gpa
    return CourseDataset(design, ds.targets - gpa, ds.target_course, total)


def overlap_ratio(target_courses: set[str], other_courses: set[str]) -> float:
    """Fraction of ``target_courses`` that also appear in ``other_courses``."""
    if not target_courses:
        raise ValueError("target course set is empty")
    return len(target_courses & other_courses) / len(target_courses)


def build_ssr_dataset(target: TargetInstance, base: CourseDataset, t: float) -> CourseDataset:
    """Student-specific design: rows with overlap >= ``t``, columns taken by the target.

    Overlap is measured on each row's full prior-course set, before the
    columns are restricted. Columns left without any entry are dropped.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"overlap threshold {t} outside [0, 1]")
    mine = set(target.prior)
    if not mine:
        raise EmptyRowError(f"student {target.student_id!r} has no prior courses")
    design = base.design
    col_sets = [set() for _ in range(design.n_rows)]
    for r, c in zip(design.rows, design.cols):
        col_sets[r].add(design.col_ids[c])
    keep_rows = [i for i, cs in enumerate(col_sets) if overlap_ratio(mine, cs) >= t]
    sub = base.select_rows(keep_rows)
    keep_cols = [j for j, c in enumerate(design.col_ids) if c in mine]
    return CourseDataset(sub.design.select_cols(keep_cols).drop_empty_cols(),
                         sub.targets, base.target_course, sub.centering)


def build_csmf_matrix(course: str, base: CourseDataset,
                      targets: Sequence[TargetInstance]) -> SparseGradeMatrix:
    """Course-specific completion matrix.

    Rows are the training students followed by the target students. The
    columns are every course with a grade in either group, then ``course``
    itself as the last column, observed only for the training rows.
    """
    if base.centering is not None:
        raise ValueError("expected an uncentered dataset")
    base_ids = set(base.students)
    for t in targets:
        if t.course_id != course:
            raise ValueError(f"target for {t.course_id!r} passed to the {course!r} matrix")
        if t.student_id in base_ids:
            raise ValueError(f"student {t.student_id!r} is both training row and target")
    extra = sorted({c for t in targets for c in t.prior} - set(base.design.col_ids) - {course})
    prior_cols = [c for c in base.design.col_ids if c != course] + extra
    col_ids = prior_cols + [course]
    row_ids = list(base.students) + [t.student_id for t in targets]
    entries = {}
    for (sid, c), v in base.design.entries().items():
        entries[sid, c] = v
    for sid, y in zip(base.students, base.targets):
        entries[sid, course] = float(y)
    for t in targets:
        for c, v in t.prior.items():
            entries[t.student_id, c] = v
    return SparseGradeMatrix.from_entries(row_ids, col_ids, entries)


def build_mf_matrix(per_course: Iterable[tuple[CourseDataset, Sequence[TargetInstance]]]
                    ) -> SparseGradeMatrix:
    """Global matrix: all training grades plus every target student's prior grades.

    Rows and columns are the sorted union of students and courses. The
    cells being predicted are never included.
    """
    entries: dict[tuple[str, str], float] = {}
    held = set()
    for ds, targets in per_course:
        if ds.centering is not None:
            raise ValueError("expected uncentered datasets")
        for key, v in ds.design.entries().items():
            entries.setdefault(key, v)
        for sid, y in zip(ds.students, ds.targets):
            entries.setdefault((sid, ds.target_course), float(y))
        for t in targets:
            held.add((t.student_id, t.course_id))
            for c, v in t.prior.items():
                entries.setdefault((t.student_id, c), v)
    for key in held:
        entries.pop(key, None)
    rows = sorted({s for s, _ in entries} | {s for s, _ in held})
    cols = sorted({c for _, c in entries} | {c for _, c in held})
    matrix = SparseGradeMatrix.from_entries(rows, cols, entries)
    assert_no_leakage(matrix, held)
    return matrix


def assert_no_leakage(matrix: SparseGradeMatrix, heldout: Iterable) -> None:
    """Raise :class:`LeakageError` if any held-out cell is observed in ``matrix``."""
    observed = set(matrix.entries())
    for item in heldout:
        key = (item.student_id, item.course_id) if isinstance(item, TargetInstance) else tuple(item)
        if key in observed:
            raise LeakageError(f"held-out cell {key} present in training matrix")


def min_students_gate(ds: CourseDataset, floor: int = MIN_STUDENTS) -> bool:
    return ds.n_rows >= floor


# --- triplet text format -------------------------------------------------

def write_dataset(ds: CourseDataset, out: TextIO) -> None:
    """Serialize as ``#``-prefixed header lines followed by ``row_id,col_id,value``.

    Header keys: ``target_course``, ``rows`` and ``cols`` (tab-joined ids),
    ``targets`` and optionally ``centering`` (tab-joined floats).
    """
    out.write(f"# target_course\t{ds.target_course}\n")
    out.write("# rows\t" + "\t".join(ds.students) + "\n")
    out.write("# cols\t" + "\t".join(ds.design.col_ids) + "\n")
    out.write("# targets\t" + "\t".join(repr(float(v)) for v in ds.targets) + "\n")
    if ds.centering is not None:
        out.write("# centering\t" + "\t".join(repr(float(v)) for v in ds.centering) + "\n")
    d = ds.design
    for r, c, v in zip(d.rows, d.cols, d.vals):
        out.write(f"{d.row_ids[r]},{d.col_ids[c]},{float(v)!r}\n")


def read_dataset(src: TextIO | str) -> CourseDataset:
    if isinstance(src, str):
        src = io.StringIO(src)
    header: dict[str, list[str]] = {}
    entries = {}
    for line in src:
        line = line.rstrip("\n")
        if not line:
            continue
        if line.startswith("# "):
            key, _, rest = line[2:].partition("\t")
            header[key] = rest.split("\t") if rest else []
            continue
        sid, cid, val = line.rsplit(",", 2)
        entries[sid, cid] = float(val)
    design = SparseGradeMatrix.from_entries(header["rows"], header["cols"], entries)
    centering = header.get("centering")
    return CourseDataset(
        design, [float(v) for v in header["targets"]], header["target_course"][0],
        None if centering is None else [float(v) for v in centering])


def dataset_to_text(ds: CourseDataset) -> str:
    buf = io.StringIO()
    write_dataset(ds, buf)
    return buf.getvalue()


def empty_like(ds: CourseDataset) -> CourseDataset:
    return CourseDataset(SparseGradeMatrix.empty(), np.zeros(0), ds.target_course)
