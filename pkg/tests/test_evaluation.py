import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gradepred.core import TargetInstance
from gradepred.datasets import LeakageError, dataset_from_rows
from gradepred.evaluation import (DEFAULT_POLICY, MF_RANKS, CourseTask, GridSpec, PolicyError,
                                  View, audit_leakage, build_view, common_subset,
                                  compute_metrics, dataset_statistics, default_grids,
                                  grid_search, holdout_view, prior_semester_view, run_method)
from gradepred.predictors import METHODS, Prediction
from gradepred.synth import SynthConfig, generate


def pred(s, c, value, actual, method="m"):
    return Prediction(s, c, value, method, actual=actual)


# --- metrics -------------------------------------------------------------------

def test_perfect_predictions():
    rep = compute_metrics([pred("a", "x", 3.0, 3.0), pred("b", "y", 1.0, 1.0)])
    assert rep.rmse == 0.0 and rep.avg_rmse == 0.0


def test_pooled_and_average_rmse_diverge():
    preds = [pred(f"s{i}", "A", 3.0, 2.0) for i in range(100)] + [pred("t", "B", 2.0, 2.0)]
    rep = compute_metrics(preds)
    assert rep.rmse == pytest.approx(math.sqrt(100 / 101), abs=1e-9)
    assert rep.avg_rmse == pytest.approx(0.5, abs=1e-9)
    assert rep.per_course == {"A": (1.0, 100), "B": (0.0, 1)}
    assert rep.n_grades == 101 and rep.n_courses == 2


def test_single_course_metrics_agree():
    rep = compute_metrics([pred("a", "x", 3.0, 2.0), pred("b", "x", 1.0, 1.5)])
    assert rep.rmse == rep.avg_rmse


def test_metrics_errors():
    with pytest.raises(ValueError):
        compute_metrics([])
    with pytest.raises(ValueError):
        compute_metrics([pred("a", "x", 3.0, None)])


pairs = st.lists(st.tuples(st.sampled_from("ABCD"), st.floats(0, 4), st.floats(0, 4)),
                 min_size=1, max_size=40)


@given(pairs, st.randoms(use_true_random=False))
def test_metrics_permutation_invariant(rows, rnd):
    preds = [pred(f"s{i}", c, v, a) for i, (c, v, a) in enumerate(rows)]
    shuffled = list(preds)
    rnd.shuffle(shuffled)
    a, b = compute_metrics(preds), compute_metrics(shuffled)
    assert (a.rmse, a.avg_rmse, a.per_course) == (b.rmse, b.avg_rmse, b.per_course)
    assert a.rmse >= 0 and a.avg_rmse >= 0
    assert a.n_grades == sum(n for _, n in a.per_course.values())


@given(st.integers(1, 5), st.integers(1, 6), st.floats(0.01, 2))
def test_equal_courses_give_equal_metrics(n_courses, per, err):
    preds = [pred(f"s{i}", f"C{c}", 2.0 + err, 2.0) for c in range(n_courses) for i in range(per)]
    rep = compute_metrics(preds)
    assert rep.rmse == pytest.approx(rep.avg_rmse, rel=1e-12)


# --- grids ---------------------------------------------------------------------

def test_csr_grid_literal():
    g = default_grids("csr")
    assert g.params["lambda1"] == tuple(2.5 * i for i in range(17))
    assert g.params["lambda2"] == tuple(2.5 * i for i in range(21))
    assert len(g) == 17 * 21 and g.policy == "test-best"
    assert default_grids("csr-rc").params == g.params


def test_mf_grid_literal():
    g = default_grids("mf")
    assert g.params["lam"] == tuple(round(0.05 * i, 10) for i in range(121))
    assert g.params["lam"][-1] == 6.0 and g.params["rank"] == (2, 5, 8)
    assert len(g) == 363 and g.policy == "prior-semester"
    assert default_grids("csmf").params == g.params == default_grids("mf-gb").params
    assert default_grids("csmf-star").params["rank_grid"] == (MF_RANKS,)


def test_ssr_grid_literal():
    g = default_grids("ssr")
    assert g.params["lambda1"] == tuple(float(i) for i in range(11))
    assert g.params["lambda2"] == tuple(float(2 * i) for i in range(8))
    assert g.params["t"] == (0.3, 0.34, 0.38, 0.42, 0.46, 0.5, 0.54, 0.58, 0.62, 0.66, 0.7,
                             0.74, 0.78, 0.82, 0.86, 0.9, 0.94, 0.98, 1.0)


def test_every_method_has_a_grid_and_policy():
    for m in METHODS:
        assert default_grids(m).policy == DEFAULT_POLICY[m]
    assert default_grids("mf", "holdout").policy == "holdout"
    with pytest.raises(ValueError):
        default_grids("svd")


def test_gridspec_validation():
    with pytest.raises(ValueError):
        GridSpec({"lam": ()}, "test-best")
    with pytest.raises(ValueError):
        GridSpec({"lam": (1,)}, "oracle")
    assert GridSpec({"a": (1, 2), "b": (3,)}, "holdout").cells() == [{"a": 1, "b": 3},
                                                                      {"a": 2, "b": 3}]


# --- views ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def linear_noisy():
    return generate(SynthConfig(n_students=300, kind="planted-linear", noise_sigma=0.3, seed=4))[0]


def test_view_separates_targets_from_training(linear_small):
    records, _ = linear_small
    view = build_view(records, 13, 5)
    active = {r.student_id for r in records if r.term == 13}
    for task in view.tasks:
        assert not set(task.base.students) & active
        assert task.base.n_rows >= 20
        assert all(t.student_id in active and len(t.prior) >= 5 for t in task.targets)
    assert any(reason.startswith("too-few-students") for _, reason in view.skipped)


def test_prior_semester_view_needs_history(linear_small):
    records, _ = linear_small
    view = prior_semester_view(records, 13, 5)
    assert view.term == 12 and view.n_targets > 0
    with pytest.raises(PolicyError):
        prior_semester_view(records, 1, 5)


def test_holdout_view_uses_training_rows_only(linear_small):
    records, _ = linear_small
    test = build_view(records, 13, 5)
    val = holdout_view(test, seed=0)
    by_course = {t.course: t for t in test.tasks}
    for task in val.tasks:
        full = by_course[task.course].base
        held = {t.student_id for t in task.targets}
        assert held <= set(full.students) and not held & set(task.base.students)
        assert task.base.n_rows + len(held) == full.n_rows
        assert len(held) == round(0.1 * full.n_rows)
    again = holdout_view(test, seed=0)
    assert [[t.student_id for t in task.targets] for task in again.tasks] == \
        [[t.student_id for t in task.targets] for task in val.tasks]


# --- grid search ------------------------------------------------------------------

def test_one_cell_grid(linear_small):
    records, _ = linear_small
    view = build_view(records, 13, 5)
    res = grid_search("csr", view, GridSpec({"lambda1": (2.5,), "lambda2": (5.0,)}, "test-best"))
    assert res.best == {"lambda1": 2.5, "lambda2": 5.0} and len(res.cells) == 1
    assert res.report.rmse == res.cells[0].report.rmse


def test_test_best_picks_zero_penalty_on_noiseless_data(linear_small, caplog):
    records, _ = linear_small
    view = build_view(records, 13, 5)
    grid = GridSpec({"lambda1": (0.0, 2.5, 5.0), "lambda2": (0.0, 2.5, 5.0)}, "test-best")
    res = grid_search("csr", view, grid)
    assert res.best == {"lambda1": 0.0, "lambda2": 0.0}
    assert all(res.report.rmse <= c.report.rmse for c in res.cells)
    assert "test set" in caplog.text


def test_prior_semester_choice_is_near_best(linear_noisy):
    view = build_view(linear_noisy, 13, 5)
    grid = GridSpec({"lam": (0.0, 0.5, 2.0, 6.0, 30.0)}, "prior-semester")
    res = grid_search("biasonly", view, grid, records=linear_noisy)
    on_test = [run_method("biasonly", view, c).report().rmse for c in grid.cells()]
    assert res.report.rmse <= min(on_test) + 0.05
    with pytest.raises(PolicyError):
        grid_search("biasonly", view, grid)


def test_holdout_policy_runs(linear_noisy):
    view = build_view(linear_noisy, 13, 5)
    res = grid_search("csr-rc", view, GridSpec({"lambda1": (0.0, 5.0), "lambda2": (1.0,)},
                                               "holdout"))
    assert res.policy == "holdout" and res.final.predictions


def test_run_method_is_pool_independent(linear_noisy):
    from concurrent.futures import ProcessPoolExecutor
    view = build_view(linear_noisy, 13, 5)
    params = {"lambda1": 2.5, "lambda2": 2.5}
    serial = run_method("csr", view, params)
    with ProcessPoolExecutor(2) as pool:
        parallel = run_method("csr", view, params, pool=pool)
    assert serial.predictions == parallel.predictions


def test_run_method_rejects_unknown():
    with pytest.raises(ValueError):
        run_method("svd", View(13, 5, ()), {})


def test_no_viable_cell_is_an_error():
    with pytest.raises(PolicyError):
        grid_search("csr", View(13, 5, ()), GridSpec({"lambda1": (0.0,), "lambda2": (0.0,)},
                                                     "test-best"))


# --- statistics and reporting ---------------------------------------------------

def synthetic_task(course, n_train, n_test):
    rows = [(f"s{i}", {"a": 2.0, "b": 3.0}, 3.0) for i in range(n_train)]
    targets = tuple(TargetInstance(f"t{i}", course, 9, {"a": 1.0}, 2.0) for i in range(n_test))
    return CourseTask(course, dataset_from_rows(course, rows), targets)


def test_statistics_trivial():
    s = dataset_statistics(View(9, 5, (synthetic_task("x", 30, 5),)))
    assert s["train_students"] == 30 and s["test_students"] == 5 and s["courses"] == 1
    assert s["prior_courses"] == 2 and s["grades"] == 60 and s["predicted"] == 5
    s = dataset_statistics(View(9, 5, (synthetic_task("x", 20, 1), synthetic_task("y", 40, 3))))
    assert s["train_students"] == 30 and s["test_students"] == 2


def test_statistics_match_recount(linear_small):
    records, _ = linear_small
    view = build_view(records, 13, 5)
    stats = dataset_statistics(view)
    # recount directly from records
    active = {r.student_id for r in records if r.term == 13}
    first = {}
    for r in sorted(records, key=lambda r: r.term):
        first.setdefault((r.student_id, r.course_id), r)
    history = {}
    for r in records:
        history.setdefault(r.student_id, []).append(r)
    train_sizes, grades, cols, n_tests = [], [], [], []
    for task in view.tasks:
        c = task.course
        n, g, used = 0, 0, set()
        for sid, hist in history.items():
            if sid in active or (sid, c) not in first:
                continue
            t0 = first[sid, c].term
            prior = {r.course_id for r in hist if r.term < t0 and r.course_id != c}
            if len(prior) >= 5:
                n += 1
                g += len(prior)
                used |= prior
        train_sizes.append(n)
        grades.append(g)
        cols.append(len(used))
        n_tests.append(sum(1 for r in records if r.term == 13 and r.course_id == c
                           and len({q.course_id for q in history[r.student_id]
                                    if q.term < 13}) >= 5))
    assert stats["train_students"] == pytest.approx(np.mean(train_sizes))
    assert stats["grades"] == pytest.approx(np.mean(grades))
    assert stats["prior_courses"] == pytest.approx(np.mean(cols))
    assert stats["test_students"] == pytest.approx(np.mean(n_tests))
    assert stats["predicted"] == sum(n_tests) and stats["courses"] == len(view.tasks)


def test_empty_view_statistics():
    assert set(dataset_statistics(View(1, 5, ())).values()) == {0.0}


def test_common_subset():
    a = [pred("s1", "x", 1, 1), pred("s2", "x", 1, 1), pred("s3", "y", 1, 1)]
    b = [pred("s2", "x", 2, 1), pred("s3", "y", 2, 1)]
    out = common_subset({5: a, 9: b})
    assert [(p.student_id, p.course_id) for p in out[5]] == [("s2", "x"), ("s3", "y")]
    assert len(out[9]) == 2


def test_leakage_audit(linear_small):
    records, _ = linear_small
    view = build_view(records, 13, 5)
    run = run_method("csr", view, {"lambda1": 0.0, "lambda2": 0.0})
    audit_leakage(view, run.predictions)
    task = view.tasks[0]
    leaked = Prediction(task.base.students[0], task.course, 3.0, "csr")
    with pytest.raises(LeakageError):
        audit_leakage(view, run.predictions + [leaked])
