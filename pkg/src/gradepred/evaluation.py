"""Metrics, hyperparameter grids, model selection and dataset statistics.

An experiment is described by a :class:`View`: for one target term and
prior-course floor ``k``, the gated per-course training datasets and the
target instances to predict. Selection policies differ only in which view
the grid is scored on.
"""

from __future__ import annotations

import itertools
import logging
import math
from collections import defaultdict
from concurrent.futures import Executor
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .core import CourseDataset, GradeRecord, TargetInstance
from .datasets import (MIN_STUDENTS, LeakageError, build_course_dataset, build_mf_matrix,
                       build_targets, dataset_instances, min_students_gate)
from .ingest import Cohort, split_active
from .predictors import (METHODS, Prediction, csmf_star_select, csmf_train_predict, csr_value,
                         fit_csr, holdout_split, make_prediction, mf_train_predict, sbcf_predict,
                         ssr_train_predict)

log = logging.getLogger(__name__)

POLICIES = ("test-best", "prior-semester", "holdout")
DEFAULT_POLICY = {
    "csr": "test-best", "csr-rc": "test-best", "ssr": "test-best", "sbcf": "test-best",
    "biasonly": "prior-semester", "mf": "prior-semester", "mf-gb": "prior-semester",
    "csmf": "prior-semester", "csmf-star": "holdout",
}
MF_RANKS = (2, 5, 8)
SBCF_R = (1, 5, 10, 20, 50)


class PolicyError(ValueError):
    """The selection policy cannot be applied to the available data."""


# --- metrics -----------------------------------------------------------------

@dataclass(frozen=True)
class MetricReport:
    rmse: float
    avg_rmse: float
    per_course: Mapping[str, tuple[float, int]]
    n_courses: int
    n_grades: int


def compute_metrics(preds: Iterable[Prediction]) -> MetricReport:
    """Pooled RMSE over all grades and AvgRMSE, the mean of per-course RMSEs."""
    sq: dict[str, list[float]] = defaultdict(list)
    for p in preds:
        if p.actual is None:
            raise ValueError(f"prediction for ({p.student_id}, {p.course_id}) has no actual grade")
        sq[p.course_id].append((p.value - p.actual) ** 2)
    if not sq:
        raise ValueError("no predictions to score")
    # sorted summation keeps the result independent of input order
    per_course = {c: (math.sqrt(math.fsum(v) / len(v)), len(v)) for c, v in sorted(sq.items())}
    n = sum(len(v) for v in sq.values())
    rmse = math.sqrt(math.fsum(x for v in sq.values() for x in v) / n)
    avg = math.fsum(r for r, _ in per_course.values()) / len(per_course)
    return MetricReport(rmse, avg, per_course, len(per_course), n)


# --- grids -------------------------------------------------------------------

def _steps(start: float, stop: float, step: float) -> tuple[float, ...]:
    n = int(round((stop - start) / step))
    return tuple(round(start + i * step, 10) for i in range(n + 1))


@dataclass(frozen=True)
class GridSpec:
    params: Mapping[str, tuple]
    policy: str

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"unknown selection policy {self.policy!r}")
        params = {k: tuple(v) for k, v in dict(self.params).items()}
        for name, values in params.items():
            if not values:
                raise ValueError(f"grid for {name!r} is empty")
        object.__setattr__(self, "params", params)

    def cells(self) -> list[dict]:
        names = list(self.params)
        return [dict(zip(names, combo)) for combo in itertools.product(*self.params.values())]

    def __len__(self) -> int:
        return math.prod(len(v) for v in self.params.values())


def default_grids(method: str, policy: str | None = None) -> GridSpec:
    policy = policy or DEFAULT_POLICY.get(method)
    mf_lam = _steps(0.0, 6.0, 0.05)
    if method in ("csr", "csr-rc"):
        params = {"lambda1": _steps(0.0, 40.0, 2.5), "lambda2": _steps(0.0, 50.0, 2.5)}
    elif method == "ssr":
        params = {"lambda1": _steps(0.0, 10.0, 1.0), "lambda2": _steps(0.0, 14.0, 2.0),
                  "t": _steps(0.3, 0.98, 0.04) + (1.0,)}
    elif method in ("mf", "mf-gb", "csmf"):
        params = {"lam": mf_lam, "rank": MF_RANKS}
    elif method == "csmf-star":
        params = {"lam": mf_lam, "rank_grid": (MF_RANKS,)}
    elif method == "biasonly":
        params = {"lam": mf_lam}
    elif method == "sbcf":
        params = {"r": SBCF_R}
    else:
        raise ValueError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")
    return GridSpec(params, policy)


# --- experiment views ------------------------------------------------------------

@dataclass(frozen=True)
class CourseTask:
    course: str
    base: CourseDataset
    targets: tuple[TargetInstance, ...]


@dataclass(frozen=True)
class View:
    term: int
    k: int
    tasks: tuple[CourseTask, ...]
    skipped: tuple[tuple[str, str], ...] = ()

    @property
    def n_targets(self) -> int:
        return sum(len(t.targets) for t in self.tasks)


DatasetSource = Callable[[str, Cohort, int], CourseDataset]


def build_view(records: Sequence[GradeRecord], term: int, k: int, floor: int = MIN_STUDENTS,
               dataset_source: DatasetSource = build_course_dataset) -> View:
    """Per-course train/test data for predicting ``term``.

    Training rows come from students without a record in ``term``; targets
    are the students taking each course in ``term``. Courses whose training
    set has fewer than ``floor`` students, or with no qualifying target, are
    listed in ``skipped``.
    """
    active, inactive = split_active(records, term)
    courses = sorted({r.course_id for r in active.records if r.term == term})
    tasks, skipped = [], []
    for course in courses:
        targets = build_targets(course, active, term, k)
        if not targets:
            skipped.append((course, "no-targets"))
            continue
        base = dataset_source(course, inactive, k)
        if not min_students_gate(base, floor):
            skipped.append((course, f"too-few-students:{base.n_rows}"))
            continue
        tasks.append(CourseTask(course, base, tuple(targets)))
    return View(term, k, tuple(tasks), tuple(skipped))


def prior_semester_view(records: Sequence[GradeRecord], term: int, k: int,
                        floor: int = MIN_STUDENTS) -> View:
    """The same construction shifted one term back, using only records before ``term``."""
    earlier = [r for r in records if r.term < term]
    terms = {r.term for r in earlier}
    if term - 1 not in terms or not any(t < term - 1 for t in terms):
        raise PolicyError(f"prior-semester selection needs terms {term - 1} and earlier")
    return build_view(earlier, term - 1, k, floor)


def holdout_view(view: View, seed: int, fraction: float = 0.1,
                 floor: int = MIN_STUDENTS) -> View:
    """Validation view: a seeded share of each course's training rows becomes the targets."""
    tasks, skipped = [], list(view.skipped)
    for task in view.tasks:
        train, val = holdout_split(task.base.n_rows, seed, fraction)
        base = task.base.select_rows(train)
        if not val or not min_students_gate(base, floor):
            skipped.append((task.course, "holdout-too-small"))
            continue
        tasks.append(CourseTask(task.course, base,
                                tuple(dataset_instances(task.base.select_rows(val)))))
    return View(view.term, view.k, tuple(tasks), tuple(skipped))


# --- running a method on a view ----------------------------------------------------

@dataclass
class MethodRun:
    method: str
    params: dict
    predictions: list[Prediction]
    skipped: list[tuple[str, str, str]] = field(default_factory=list)

    def report(self) -> MetricReport:
        return compute_metrics(self.predictions)


def _with_truth(preds: Iterable[Prediction], targets: Iterable[TargetInstance]) -> list[Prediction]:
    truth = {(t.student_id, t.course_id): t.true_grade for t in targets}
    return [p.with_actual(truth[p.student_id, p.course_id]) for p in preds]


def _course_job(method: str, params: dict, seed: int, clamp: bool, floor: int,
                task: CourseTask) -> tuple[list[Prediction], list[tuple[str, str, str]]]:
    """Predictions for one course; pure, so it may run in a worker process."""
    preds: list[Prediction] = []
    skipped: list[tuple[str, str, str]] = []
    targets = list(task.targets)
    usable = [t for t in targets if t.prior]
    skipped += [(t.student_id, t.course_id, "no-prior-grades") for t in targets if not t.prior]
    if method in ("csr", "csr-rc"):
        model = fit_csr(task.base, params["lambda1"], params["lambda2"], method == "csr-rc", floor)
        if model is None:
            skipped += [(t.student_id, t.course_id, "too-few-students") for t in usable]
        else:
            preds = [make_prediction(t, csr_value(model, t.prior), method, clamp) for t in usable]
    elif method == "ssr":
        for t in usable:
            p = ssr_train_predict(t, task.base, params["t"], params["lambda1"], params["lambda2"],
                                  clamp=clamp, floor=floor)
            if p is None:
                skipped.append((t.student_id, t.course_id, "overlap-too-few-students"))
            else:
                preds.append(p)
    elif method == "sbcf":
        preds = [sbcf_predict(t, task.base, params["r"], clamp) for t in usable]
    elif method == "csmf":
        out = csmf_train_predict(task.course, task.base, targets, params["rank"], params["lam"],
                                 clamp, floor, seed=seed)
        preds = out or []
    elif method == "csmf-star":
        sel = csmf_star_select(task.course, task.base, targets, params["rank_grid"],
                               params["lam"], seed, clamp, floor)
        preds = sel.predictions or []
        if sel.fallback:
            log.warning("%s: validation split too small, using rank %d", task.course,
                        sel.best_rank)
    else:
        raise ValueError(f"{method!r} is not a per-course method")
    return _with_truth(preds, targets), skipped


def _pool_map(fn, items: list, pool: Executor | None) -> list:
    if pool is None or len(items) <= 1:
        return [fn(x) for x in items]
    return list(pool.map(fn, items))


def run_method(method: str, view: View, params: Mapping, seed: int = 0, clamp: bool = False,
               pool: Executor | None = None, floor: int = MIN_STUDENTS) -> MethodRun:
    """Train ``method`` with fixed ``params`` and predict every target of ``view``.

    Per-course work is spread over ``pool`` when given. Output order follows
    the view (course, then student) either way.
    """
    params = dict(params)
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if method in ("biasonly", "mf", "mf-gb"):
        targets = [t for task in view.tasks for t in task.targets]
        if not targets:
            return MethodRun(method, params, [])
        matrix = build_mf_matrix((task.base, task.targets) for task in view.tasks)
        rank = 0 if method == "biasonly" else params["rank"]
        preds = mf_train_predict(matrix, targets, rank, params["lam"],
                                 use_global_bias=method != "mf-gb", clamp=clamp, seed=seed)
        return MethodRun(method, params, _with_truth(preds, targets))
    results = _pool_map(partial(_course_job, method, params, seed, clamp, floor),
                        list(view.tasks), pool)
    run = MethodRun(method, params, [])
    for preds, skipped in results:
        run.predictions.extend(preds)
        run.skipped.extend(skipped)
    return run


# --- grid search ------------------------------------------------------------------

@dataclass
class CellResult:
    params: dict
    report: MetricReport | None


@dataclass
class GridResult:
    method: str
    policy: str
    best: dict
    cells: list[CellResult]
    final: MethodRun

    @property
    def report(self) -> MetricReport:
        return self.final.report()


def _score_cells(method, view, cells, seed, clamp, pool, floor) -> list[CellResult]:
    out = []
    for params in cells:
        run = run_method(method, view, params, seed, clamp, pool, floor)
        out.append(CellResult(params, run.report() if run.predictions else None))
    return out


def grid_search(method: str, test_view: View, grid: GridSpec, *,
                records: Sequence[GradeRecord] | None = None, seed: int = 0,
                clamp: bool = False, pool: Executor | None = None,
                floor: int = MIN_STUDENTS) -> GridResult:
    """Score every grid cell on the policy's selection view and refit the winner.

    ``test-best`` scores on the test view itself, ``prior-semester`` on the
    view for the preceding term (``records`` required), ``holdout`` on a
    seeded 10% split of each course's training rows. The winner is the
    cell with the lowest pooled RMSE, earliest cell on ties.
    """
    if grid.policy == "test-best":
        log.warning("%s: selecting hyperparameters on the test set (optimistic)", method)
        select_view = test_view
    elif grid.policy == "prior-semester":
        if records is None:
            raise PolicyError("prior-semester selection needs the full record list")
        select_view = prior_semester_view(records, test_view.term, test_view.k, floor)
    else:
        select_view = holdout_view(test_view, seed, floor=floor)
    cells = _score_cells(method, select_view, grid.cells(), seed, clamp, pool, floor)
    viable = [c for c in cells if c.report is not None]
    if not viable:
        raise PolicyError(f"{method}: no grid cell produced any prediction")
    best = min(viable, key=lambda c: c.report.rmse)
    final = run_method(method, test_view, best.params, seed, clamp, pool, floor)
    return GridResult(method, grid.policy, dict(best.params), cells, final)


# --- statistics ------------------------------------------------------------

STAT_ROWS = (
    ("train_students", "Average number of students in training set"),
    ("test_students", "Average number of students in test set"),
    ("prior_courses", "Average number of prior courses"),
    ("grades", "Average number of grades"),
    ("courses", "Courses predicted"),
    ("predicted", "Grades predicted"),
)


def dataset_statistics(view: View) -> dict[str, float]:
    """Per-course dataset statistics for one ``k``, keyed as in :data:`STAT_ROWS`."""
    tasks = view.tasks
    if not tasks:
        return {key: 0.0 for key, _ in STAT_ROWS}
    return {
        "train_students": float(np.mean([t.base.n_rows for t in tasks])),
        "test_students": float(np.mean([len(t.targets) for t in tasks])),
        "prior_courses": float(np.mean([t.base.design.n_cols for t in tasks])),
        "grades": float(np.mean([t.base.design.nnz for t in tasks])),
        "courses": float(len(tasks)),
        "predicted": float(view.n_targets),
    }


def common_subset(runs: Mapping[object, Sequence[Prediction]]) -> dict[object, list[Prediction]]:
    """Restrict each prediction list to the (student, course) pairs predicted by all of them."""
    keys = None
    for preds in runs.values():
        pairs = {(p.student_id, p.course_id) for p in preds}
        keys = pairs if keys is None else keys & pairs
    keys = keys or set()
    return {name: [p for p in preds if (p.student_id, p.course_id) in keys]
            for name, preds in runs.items()}


def training_pairs(view: View) -> set[tuple[str, str]]:
    """Every (student, course) cell any predictor of ``view`` may train on."""
    pairs: set[tuple[str, str]] = set()
    for task in view.tasks:
        pairs.update(task.base.design.entries())
        pairs.update((s, task.course) for s in task.base.students)
        for t in task.targets:
            pairs.update((t.student_id, c) for c in t.prior)
    return pairs


def audit_leakage(view: View, preds: Iterable[Prediction]) -> None:
    """Raise :class:`LeakageError` if a predicted cell was visible during training."""
    seen = training_pairs(view)
    bad = sorted({(p.student_id, p.course_id) for p in preds} & seen)
    if bad:
        raise LeakageError(f"{len(bad)} predicted cell(s) present in training data, e.g. {bad[0]}")
