import io

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gradepred.core import LinearModel, MfModel
from gradepred.evaluation import CellResult, compute_metrics
from gradepred.formats import (FormatError, format_params, read_model, read_predictions,
                               statistics_table, write_grid, write_model, write_predictions,
                               write_statistics_csv)
from gradepred.predictors import Prediction

floats = st.floats(-10, 10, allow_nan=False)


@given(floats, st.dictionaries(st.text("ABCDEF0123456789", min_size=1, max_size=4), floats),
       st.booleans(), st.booleans())
def test_linear_model_round_trip(bias, weights, nonneg, centered):
    if nonneg:
        weights = {c: abs(w) for c, w in weights.items()}
    model = LinearModel(bias, weights, nonneg, 2.5, 7.5, centered, True, 12)
    buf = io.StringIO()
    write_model(model, buf, seed=4)
    back, seed = read_model(buf.getvalue())
    assert back == model and seed == 4


@given(st.integers(0, 4), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31))
def test_mf_model_round_trip(rank, n, m, s):
    rng = np.random.default_rng(s)
    gb = rank != 1
    model = MfModel(float(rng.normal()) if gb else 0.0, rng.normal(size=n).tolist(), rng.normal(size=m).tolist(),
                    rng.normal(size=(n, rank)), rng.normal(size=(m, rank)), 0.35, gb,
                    tuple(f"s{i}" for i in range(n)), tuple(f"c{j}" for j in range(m)),
                    float(rng.random()), 17)
    buf = io.StringIO()
    write_model(model, buf)
    back, seed = read_model(buf.getvalue())
    assert seed is None and back.same_parameters(model)
    assert back.row_ids == model.row_ids and back.epochs == 17


def test_model_file_errors():
    with pytest.raises(FormatError):
        read_model("# kind\tforest\n")
    with pytest.raises(FormatError):
        read_model("# kind\tlinear\n[bias]\n1.0\n")
    with pytest.raises(FormatError):
        read_model("0.5\n")


def test_predictions_round_trip():
    preds = [Prediction("s1", "c1", 3.1, "csr", actual=3.0),
             Prediction("s2", "c1", 0.1 + 0.2, "mf", actual=None)]
    buf = io.StringIO()
    write_predictions(preds, buf)
    text = buf.getvalue()
    assert text.splitlines()[0] == "student,course,method,predicted,actual"
    back = read_predictions(text)
    assert [(p.student_id, p.value, p.actual) for p in back] == \
        [("s1", 3.1, 3.0), ("s2", 0.1 + 0.2, None)]
    buf = io.StringIO()
    write_predictions(preds, buf, with_actual=False)
    assert buf.getvalue().splitlines()[0] == "student,course,method,predicted"


def test_grid_dump():
    preds = [Prediction("a", "x", 3.0, "m", actual=2.0), Prediction("b", "y", 2.0, "m", actual=2.0)]
    cells = [CellResult({"lam": 0.5, "rank": 2}, compute_metrics(preds)),
             CellResult({"lam": 1.0, "rank": 2}, None)]
    buf = io.StringIO()
    write_grid(cells, "mf", buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "method,course,lam,rank,rmse,avg_rmse,n"
    assert lines[1].startswith("mf,*,0.5,2,") and lines[1].endswith(",2")
    assert lines[2] == "mf,x,0.5,2,1.0,1.0,1"
    assert lines[-1] == "mf,*,1.0,2,,,0"


def test_params_and_statistics_text():
    assert format_params({"lam": 0.5, "rank_grid": (2, 5, 8)}) == "lam=0.5;rank_grid=2/5/8"
    stats = {5: {"train_students": 270.0, "test_students": 12.5, "prior_courses": 30.0,
                 "grades": 2500.0, "courses": 10.0, "predicted": 125.0}}
    table = statistics_table(stats)
    assert "Average number of students in training set" in table and "12.50" in table
    buf = io.StringIO()
    write_statistics_csv(stats, buf)
    assert buf.getvalue().splitlines()[:2] == ["statistic,k=5", "train_students,270.0"]
