"""Shared data model: grade records, sparse grade matrices, fitted models."""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable, Mapping

import numpy as np

GRADE_MIN = 0.0
GRADE_MAX = 4.0

# Thirds convention of the 4-point scale.
LETTER_POINTS: Mapping[str, float] = MappingProxyType({
    "A": 4.0,
    "A-": 3.667,
    "B+": 3.333,
    "B": 3.0,
    "B-": 2.667,
    "C+": 2.333,
    "C": 2.0,
    "C-": 1.667,
    "D+": 1.333,
    "D": 1.0,
    "F": 0.0,
})


class GradeError(ValueError):
    """Raised for grades that cannot be represented on the 0-4 scale."""


class EmptyRowError(ValueError):
    """Raised when a student row has no observed grades."""


def letter_to_points(letter: str) -> float:
    """Convert a letter grade to grade points.

    Pass/fail marks (S, N, P, ...) and anything else outside the letter
    table raise :class:`GradeError`; such records are meant to be dropped.
    """
    key = letter.strip().upper()
    try:
        return LETTER_POINTS[key]
    except KeyError:
        raise GradeError(f"not a letter grade: {letter!r}") from None


@dataclass(frozen=True)
class GradeRecord:
    student_id: str
    course_id: str
    term: int
    grade: float

    def __post_init__(self):
        if not (GRADE_MIN <= self.grade <= GRADE_MAX) or not np.isfinite(self.grade):
            raise GradeError(f"grade {self.grade!r} outside [0, 4]")
        if self.term < 0:
            raise ValueError(f"term must be >= 0, got {self.term}")


def _readonly(a, dtype):
    a = np.array(a, dtype=dtype, copy=True).reshape(-1)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SparseGradeMatrix:
    """Partially observed students x courses matrix.

    Observed entries are stored as COO triplets; a missing entry is simply
    absent. Row and column labels map student and course ids to positions.
    """

    row_ids: tuple[str, ...]
    col_ids: tuple[str, ...]
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    row_index: Mapping[str, int] = field(init=False, repr=False)
    col_index: Mapping[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "row_ids", tuple(self.row_ids))
        set_(self, "col_ids", tuple(self.col_ids))
        set_(self, "rows", _readonly(self.rows, np.int64))
        set_(self, "cols", _readonly(self.cols, np.int64))
        set_(self, "vals", _readonly(self.vals, np.float64))
        row_index = {r: i for i, r in enumerate(self.row_ids)}
        col_index = {c: j for j, c in enumerate(self.col_ids)}
        if len(row_index) != len(self.row_ids) or len(col_index) != len(self.col_ids):
            raise ValueError("row and column ids must be unique")
        set_(self, "row_index", MappingProxyType(row_index))
        set_(self, "col_index", MappingProxyType(col_index))
        if not (len(self.rows) == len(self.cols) == len(self.vals)):
            raise ValueError("triplet arrays differ in length")
        if len(self.rows):
            if self.rows.min() < 0 or self.rows.max() >= self.n_rows:
                raise ValueError("row position out of range")
            if self.cols.min() < 0 or self.cols.max() >= self.n_cols:
                raise ValueError("column position out of range")
            flat = self.rows * max(self.n_cols, 1) + self.cols
            if len(np.unique(flat)) != len(flat):
                raise ValueError("duplicate (row, col) entry")

    def __reduce__(self):
        return (SparseGradeMatrix, (self.row_ids, self.col_ids, np.array(self.rows),
                                    np.array(self.cols), np.array(self.vals)))

    @classmethod
    def from_entries(cls, row_ids: Iterable[str], col_ids: Iterable[str],
                     entries: Mapping[tuple[str, str], float]) -> "SparseGradeMatrix":
        """Build from a ``{(student_id, course_id): value}`` mapping."""
        row_ids = tuple(row_ids)
        col_ids = tuple(col_ids)
        ri = {r: i for i, r in enumerate(row_ids)}
        ci = {c: j for j, c in enumerate(col_ids)}
        trip = sorted((ri[r], ci[c], float(v)) for (r, c), v in entries.items())
        if trip:
            rows, cols, vals = zip(*trip)
        else:
            rows, cols, vals = (), (), ()
        return cls(row_ids, col_ids, rows, cols, vals)

    @classmethod
    def empty(cls, col_ids: Iterable[str] = ()) -> "SparseGradeMatrix":
        return cls((), tuple(col_ids), (), (), ())

    @property
    def n_rows(self) -> int:
        return len(self.row_ids)

    @property
    def n_cols(self) -> int:
        return len(self.col_ids)

    @property
    def shape(self) -> tuple[int, int]:
        return self.n_rows, self.n_cols

    @property
    def nnz(self) -> int:
        return len(self.vals)

    def entries(self) -> dict[tuple[str, str], float]:
        return {(self.row_ids[r], self.col_ids[c]): float(v)
                for r, c, v in zip(self.rows, self.cols, self.vals)}

    def row(self, r: int) -> dict[str, float]:
        """Observed entries of row position ``r`` as ``{course_id: value}``."""
        sel = self.rows == r
        return {self.col_ids[c]: float(v) for c, v in zip(self.cols[sel], self.vals[sel])}

    def row_counts(self) -> np.ndarray:
        return np.bincount(self.rows, minlength=self.n_rows)

    def col_counts(self) -> np.ndarray:
        return np.bincount(self.cols, minlength=self.n_cols)

    def get(self, student_id: str, course_id: str, default=None):
        r = self.row_index.get(student_id)
        c = self.col_index.get(course_id)
        if r is None or c is None:
            return default
        hit = np.flatnonzero((self.rows == r) & (self.cols == c))
        return float(self.vals[hit[0]]) if len(hit) else default

    def to_dense(self, fill: float = 0.0) -> np.ndarray:
        out = np.full(self.shape, fill, dtype=np.float64)
        out[self.rows, self.cols] = self.vals
        return out

    def mask(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=bool)
        out[self.rows, self.cols] = True
        return out

    def check_grade_range(self):
        if self.nnz and (self.vals.min() < GRADE_MIN or self.vals.max() > GRADE_MAX):
            raise GradeError("matrix holds values outside [0, 4]")

    def with_values(self, vals) -> "SparseGradeMatrix":
        return SparseGradeMatrix(self.row_ids, self.col_ids, self.rows, self.cols, vals)

    def select_rows(self, positions) -> "SparseGradeMatrix":
        """Keep the given row positions (in the given order); columns unchanged."""
        positions = list(positions)
        remap = np.full(self.n_rows, -1, dtype=np.int64)
        remap[positions] = np.arange(len(positions))
        keep = remap[self.rows] >= 0 if self.nnz else np.zeros(0, dtype=bool)
        return SparseGradeMatrix(
            tuple(self.row_ids[p] for p in positions), self.col_ids,
            remap[self.rows[keep]], self.cols[keep], self.vals[keep])

    def select_cols(self, positions) -> "SparseGradeMatrix":
        positions = list(positions)
        remap = np.full(self.n_cols, -1, dtype=np.int64)
        remap[positions] = np.arange(len(positions))
        keep = remap[self.cols] >= 0 if self.nnz else np.zeros(0, dtype=bool)
        return SparseGradeMatrix(
            self.row_ids, tuple(self.col_ids[p] for p in positions),
            self.rows[keep], remap[self.cols[keep]], self.vals[keep])

    def drop_empty_cols(self) -> "SparseGradeMatrix":
        return self.select_cols(np.flatnonzero(self.col_counts() > 0))

    def __eq__(self, other):
        if not isinstance(other, SparseGradeMatrix):
            return NotImplemented
        return (self.row_ids == other.row_ids and self.col_ids == other.col_ids
                and self.entries() == other.entries())

    __hash__ = None


def row_gpa(matrix: SparseGradeMatrix, row: int) -> float:
    """Unweighted mean of a row's observed grades."""
    vals = matrix.vals[matrix.rows == row]
    if len(vals) == 0:
        raise EmptyRowError(f"row {row} ({matrix.row_ids[row]!r}) has no observed grades")
    return float(vals.mean())


def row_gpas(matrix: SparseGradeMatrix) -> np.ndarray:
    counts = matrix.row_counts()
    if np.any(counts == 0):
        bad = int(np.flatnonzero(counts == 0)[0])
        raise EmptyRowError(f"row {bad} ({matrix.row_ids[bad]!r}) has no observed grades")
    sums = np.bincount(matrix.rows, weights=matrix.vals, minlength=matrix.n_rows)
    return sums / counts


@dataclass(frozen=True, eq=False)
class CourseDataset:
    """Training design for one target course.

    ``design`` rows are the students who took the course, columns the
    courses they took strictly before it. ``targets`` holds their grades
    in the target course. When ``centering`` is set, both have had the
    per-row GPA subtracted.
    """

    design: SparseGradeMatrix
    targets: np.ndarray
    target_course: str
    centering: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "targets", _readonly(self.targets, np.float64))
        if len(self.targets) != self.design.n_rows:
            raise ValueError(
                f"{len(self.targets)} targets for {self.design.n_rows} design rows")
        if self.centering is not None:
            object.__setattr__(self, "centering", _readonly(self.centering, np.float64))
            if len(self.centering) != self.design.n_rows:
                raise ValueError("centering vector length differs from row count")

    @property
    def n_rows(self) -> int:
        return self.design.n_rows

    @property
    def students(self) -> tuple[str, ...]:
        return self.design.row_ids

    def select_rows(self, positions) -> "CourseDataset":
        positions = list(positions)
        return CourseDataset(
            self.design.select_rows(positions), self.targets[positions], self.target_course,
            None if self.centering is None else self.centering[positions])


@dataclass(frozen=True)
class TargetInstance:
    """A (student, course) cell to predict, with the student's prior grades.

    ``true_grade`` is only for scoring; predictors receive a copy with it
    stripped (see :meth:`stripped`).
    """

    student_id: str
    course_id: str
    term: int
    prior: Mapping[str, float]
    true_grade: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "prior", MappingProxyType(dict(self.prior)))

    def stripped(self) -> "TargetInstance":
        if self.true_grade is None:
            return self
        return TargetInstance(self.student_id, self.course_id, self.term, self.prior)

    def gpa(self) -> float:
        if not self.prior:
            raise EmptyRowError(f"student {self.student_id!r} has no prior grades")
        return float(np.mean(list(self.prior.values())))

    def __reduce__(self):
        return (TargetInstance, (self.student_id, self.course_id, self.term,
                                 dict(self.prior), self.true_grade))


@dataclass(frozen=True)
class LinearModel:
    bias: float
    weights: Mapping[str, float]
    nonneg: bool
    lambda1: float
    lambda2: float
    centered: bool = False
    converged: bool = True
    sweeps: int = 0

    def __post_init__(self):
        w = {c: float(v) for c, v in dict(self.weights).items() if v != 0.0}
        if self.nonneg and any(v < 0 for v in w.values()):
            raise ValueError("negative weight in a non-negative model")
        object.__setattr__(self, "weights", MappingProxyType(w))

    def __reduce__(self):
        return (LinearModel, (self.bias, dict(self.weights), self.nonneg, self.lambda1,
                              self.lambda2, self.centered, self.converged, self.sweeps))


@dataclass(frozen=True, eq=False)
class MfModel:
    """Biased matrix-factorization model: ``mu + sb[i] + cb[j] + P[i] @ Q[j]``."""

    mu: float
    sb: np.ndarray
    cb: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    lam: float
    use_global_bias: bool = True
    row_ids: tuple[str, ...] = ()
    col_ids: tuple[str, ...] = ()
    objective: float = float("nan")
    epochs: int = 0

    def __post_init__(self):
        for name in ("sb", "cb", "P", "Q"):
            a = np.array(getattr(self, name), dtype=np.float64, copy=True)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if self.P.ndim != 2 or self.Q.ndim != 2 or self.P.shape[1] != self.Q.shape[1]:
            raise ValueError("P and Q must be 2-D with the same number of columns")
        if self.P.shape[0] != len(self.sb) or self.Q.shape[0] != len(self.cb):
            raise ValueError("factor and bias dimensions disagree")
        if not self.use_global_bias and self.mu != 0.0:
            raise ValueError("mu must be exactly 0 without a global bias")
        object.__setattr__(self, "_ri", {r: i for i, r in enumerate(self.row_ids)})
        object.__setattr__(self, "_ci", {c: j for j, c in enumerate(self.col_ids)})

    @property
    def rank(self) -> int:
        return self.P.shape[1]

    def predict_cell(self, student_id: str, course_id: str) -> float:
        """Predicted grade; unseen students/courses contribute zero bias and factors."""
        value = self.mu
        i = self._ri.get(student_id)
        j = self._ci.get(course_id)
        if i is not None:
            value += self.sb[i]
        if j is not None:
            value += self.cb[j]
        if i is not None and j is not None:
            value += float(self.P[i] @ self.Q[j])
        return float(value)

    def same_parameters(self, other: "MfModel") -> bool:
        return (self.mu == other.mu and np.array_equal(self.sb, other.sb)
                and np.array_equal(self.cb, other.cb) and np.array_equal(self.P, other.P)
                and np.array_equal(self.Q, other.Q))
