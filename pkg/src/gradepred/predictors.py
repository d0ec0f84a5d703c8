"""The grade predictors: CSR, CSR-RC, SSR, BiasOnly, SBCF, MF, MF-GB, CSMF, CSMF*.

Training functions return ``None`` when the data falls below the minimum
student count; callers record such cells as unpredictable. Predictors only
ever see target instances with the true grade stripped.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .core import (GRADE_MAX, GRADE_MIN, CourseDataset, LinearModel, MfModel, SparseGradeMatrix,
                   TargetInstance, row_gpas)
from .datasets import (MIN_STUDENTS, assert_no_leakage, build_course_dataset, build_csmf_matrix,
                       build_ssr_dataset, center_dataset, dataset_instances, min_students_gate)
from .ingest import Cohort
from .solvers import CompletionProblem, ElasticNetProblem, solve_completion, solve_elastic_net

METHODS = ("csr", "csr-rc", "ssr", "biasonly", "sbcf", "mf", "mf-gb", "csmf", "csmf-star")


@dataclass(frozen=True)
class Prediction:
    student_id: str
    course_id: str
    value: float
    method: str
    clamped: bool = False
    actual: float | None = None
    note: str = ""

    def with_actual(self, actual: float | None) -> "Prediction":
        return replace(self, actual=actual)


def make_prediction(target: TargetInstance, value: float, method: str, clamp: bool = False,
                    note: str = "") -> Prediction:
    value = float(value)
    if clamp:
        value = min(max(value, GRADE_MIN), GRADE_MAX)
    return Prediction(target.student_id, target.course_id, value, method, clamp, note=note)


# --- course-specific regression ----------------------------------------------

def fit_csr(ds: CourseDataset, lam1: float, lam2: float, centered: bool,
            floor: int = MIN_STUDENTS) -> LinearModel | None:
    """Fit CSR (non-negative, raw grades) or CSR-RC (GPA-centered, unconstrained)."""
    if ds.centering is not None:
        raise ValueError("pass the uncentered dataset; centering is applied here")
    if centered:
        # a row without prior grades has no GPA to center on
        keep = np.flatnonzero(ds.design.row_counts() > 0)
        if len(keep) < ds.n_rows:
            ds = ds.select_rows(keep)
    if not min_students_gate(ds, floor):
        return None
    if centered:
        ds = center_dataset(ds)
    model = solve_elastic_net(ElasticNetProblem(
        ds.design, ds.targets, lam1, lam2, nonneg=not centered, fit_bias=True))
    return replace(model, centered=centered)


def csr_train(course: str, cohort: Cohort, k: int, lam1: float, lam2: float,
              centered: bool) -> LinearModel | None:
    return fit_csr(build_course_dataset(course, cohort, k), lam1, lam2, centered)


def csr_value(model: LinearModel, prior) -> float:
    if model.centered:
        if not prior:
            raise ValueError("centered prediction needs at least one prior grade")
        gpa = float(np.mean(list(prior.values())))
        return gpa + model.bias + sum(w * (prior[c] - gpa)
                                      for c, w in model.weights.items() if c in prior)
    return model.bias + sum(w * prior[c] for c, w in model.weights.items() if c in prior)


def csr_predict(model: LinearModel, target: TargetInstance, clamp: bool = False) -> Prediction:
    """Apply a CSR model to a student's prior grades.

    Courses the student has not taken contribute nothing. For a centered
    model the student's grades are centered on their own GPA first and the
    GPA is added back to the result.
    """
    target = target.stripped()
    method = "csr-rc" if model.centered else "csr"
    return make_prediction(target, csr_value(model, target.prior), method, clamp)


def ssr_train_predict(target: TargetInstance, base: CourseDataset, t: float, lam1: float,
                      lam2: float, centered: bool = False, clamp: bool = False,
                      floor: int = MIN_STUDENTS) -> Prediction | None:
    """Student-specific regression for one target; ``None`` if too few peers qualify.

    ``base`` is the uncentered training dataset of the target course.
    """
    target = target.stripped()
    ds = build_ssr_dataset(target, base, t)
    model = fit_csr(ds, lam1, lam2, centered, floor)
    if model is None:
        return None
    return make_prediction(target, csr_value(model, target.prior), "ssr", clamp)


# --- neighborhood baseline ---------------------------------------------------

# Variance below this (per common course) counts as zero: the vector is constant.
FLAT_TOL = 1e-12


def peer_similarities(prior, peers: CourseDataset) -> np.ndarray:
    """Pearson similarity of ``prior`` with each design row; NaN where undefined.

    Computed over commonly taken courses only; undefined with fewer than two
    common courses or when either side is constant on them.
    """
    design = peers.design
    mine = np.zeros(design.n_cols)
    have = np.zeros(design.n_cols, dtype=bool)
    for c, v in prior.items():
        j = design.col_index.get(c)
        if j is not None:
            mine[j] = v
            have[j] = True
    dense = design.to_dense()
    common = design.mask() & have[None, :]
    cnt = common.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        mx = (common @ mine) / cnt
        my = np.where(common, dense, 0.0).sum(axis=1) / cnt
        dx = np.where(common, mine[None, :] - mx[:, None], 0.0)
        dy = np.where(common, dense - my[:, None], 0.0)
        sxx = (dx * dx).sum(axis=1)
        syy = (dy * dy).sum(axis=1)
        sim = (dx * dy).sum(axis=1) / np.sqrt(sxx * syy)
    flat = (sxx <= FLAT_TOL * cnt) | (syy <= FLAT_TOL * cnt)
    return np.where((cnt >= 2) & ~flat, sim, np.nan)


def sbcf_predict(target: TargetInstance, peers: CourseDataset, r: int,
                 clamp: bool = False) -> Prediction:
    """Student-based collaborative filtering with significance weighting.

    Similarity is Pearson correlation over commonly taken prior courses
    (at least two needed). All peers with positive similarity vote; their
    deviation from their own prior mean is averaged with similarity
    weights and shrunk by ``min(r, nbr) / r``.
    """
    if r < 1:
        raise ValueError("r must be >= 1")
    target = target.stripped()
    g_s = target.gpa()
    my_vals = np.array(list(target.prior.values()))
    if np.all(my_vals == my_vals[0]):
        return make_prediction(target, g_s, "sbcf", clamp, note="constant-prior")
    sim = peer_similarities(target.prior, peers)
    keep = np.flatnonzero(sim > 0.0)
    if len(keep) == 0:
        return make_prediction(target, g_s, "sbcf", clamp, note="no-neighbors")
    g_i = row_gpas(peers.design)[keep]
    s = sim[keep]
    dev = peers.targets[keep] - g_i
    nbr = len(keep)
    value = g_s + min(r, nbr) / r * float(dev @ s) / float(s.sum())
    return make_prediction(target, value, "sbcf", clamp)


# --- matrix factorization ----------------------------------------------------

def _fit_mf(matrix: SparseGradeMatrix, rank: int, lam: float, use_global_bias: bool,
            **sgd) -> MfModel:
    return solve_completion(CompletionProblem(matrix, rank, lam, use_global_bias, **sgd))


def bias_only_train(matrix: SparseGradeMatrix, lam: float, **sgd) -> MfModel:
    """Rank-0 factorization: the mean plus row and column biases."""
    return _fit_mf(matrix, 0, lam, True, **sgd)


def mf_predict(model: MfModel, targets: Sequence[TargetInstance], method: str,
               clamp: bool = False) -> list[Prediction]:
    return [make_prediction(t, model.predict_cell(t.student_id, t.course_id), method, clamp)
            for t in targets]


def mf_train_predict(matrix: SparseGradeMatrix, heldout: Sequence[TargetInstance], rank: int,
                     lam: float, use_global_bias: bool = True, clamp: bool = False,
                     **sgd) -> list[Prediction]:
    """Fit on ``matrix`` and predict every held-out cell.

    Raises :class:`~gradepred.datasets.LeakageError` if a held-out cell is
    observed in ``matrix``.
    """
    heldout = [t.stripped() for t in heldout]
    assert_no_leakage(matrix, heldout)
    model = _fit_mf(matrix, rank, lam, use_global_bias, **sgd)
    if rank == 0:
        method = "biasonly"
    else:
        method = "mf" if use_global_bias else "mf-gb"
    return mf_predict(model, heldout, method, clamp)


def csmf_train_predict(course: str, base: CourseDataset, targets: Sequence[TargetInstance],
                       rank: int, lam: float, clamp: bool = False, floor: int = MIN_STUDENTS,
                       method: str = "csmf", **sgd) -> list[Prediction] | None:
    """Course-specific factorization; predicts the last column for the target rows."""
    if not min_students_gate(base, floor):
        return None
    targets = [t.stripped() for t in targets]
    X = build_csmf_matrix(course, base, targets)
    m_c = len(set(base.design.col_ids) | {c for t in targets for c in t.prior} - {course})
    if X.shape != (base.n_rows + len(targets), m_c + 1):
        raise AssertionError(f"X^c has shape {X.shape}")
    model = _fit_mf(X, rank, lam, True, **sgd)
    return mf_predict(model, targets, method, clamp)


@dataclass(frozen=True)
class CsmfSelection:
    best_rank: int
    predictions: list[Prediction] | None
    validation_rmse: dict[int, float]
    fallback: bool = False


def holdout_split(n: int, seed: int, fraction: float = 0.1) -> tuple[list[int], list[int]]:
    """Seeded ``(train, validation)`` row positions; validation gets ``round(fraction * n)`` rows."""
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(fraction * n))
    return sorted(perm[n_val:].tolist()), sorted(perm[:n_val].tolist())


def csmf_star_select(course: str, base: CourseDataset, targets: Sequence[TargetInstance],
                     rank_grid: Sequence[int], lam: float, seed: int = 0, clamp: bool = False,
                     floor: int = MIN_STUDENTS, **sgd) -> CsmfSelection:
    """Pick the latent dimension on a seeded 10% row hold-out, then refit on all rows.

    Ties go to the smaller dimension. With fewer than two validation rows
    the smallest dimension is used and ``fallback`` is set. ``seed`` drives
    both the split and the SGD runs.
    """
    sgd["seed"] = seed
    grid = sorted(set(rank_grid))
    if not grid:
        raise ValueError("rank grid is empty")
    if not min_students_gate(base, floor):
        return CsmfSelection(grid[0], None, {})
    train_rows, val_rows = holdout_split(base.n_rows, seed)
    scores: dict[int, float] = {}
    fallback = len(val_rows) < 2 or len(grid) == 1
    if not fallback:
        train = base.select_rows(train_rows)
        val = dataset_instances(base.select_rows(val_rows))
        stripped = [t.stripped() for t in targets]
        for rank in grid:
            preds = csmf_train_predict(course, train, val + stripped, rank, lam, floor=0, **sgd)
            err = [p.value - v.true_grade for p, v in zip(preds, val)]
            scores[rank] = float(np.sqrt(np.mean(np.square(err))))
        best = min(grid, key=lambda r: (scores[r], r))
    else:
        best = grid[0]
    preds = csmf_train_predict(course, base, targets, best, lam, clamp, floor,
                               method="csmf-star", **sgd)
    return CsmfSelection(best, preds, scores, fallback=len(val_rows) < 2)
