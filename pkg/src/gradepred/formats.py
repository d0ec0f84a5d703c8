"""Text formats for models and experiment outputs.

Floats are written with ``repr``, the shortest string that reads back to
the same double, so every file here round-trips exactly.

Model files start with ``# key<TAB>value`` header lines (``kind``, the
hyperparameters and ``seed``) followed by ``[block]`` sections of
tab-separated rows::

    # kind	linear
    # lambda1	2.5
    ...
    [bias]
    0.41
    [weights]
    C03	0.25

An ``mf`` file has a ``[mu]`` block and ``[rows]`` / ``[cols]`` blocks whose
lines are ``id, bias, factor_1 ... factor_l``.
"""

from __future__ import annotations

import csv
import io
from typing import Iterable, Mapping, Sequence, TextIO

import numpy as np

from .core import LinearModel, MfModel
from .evaluation import STAT_ROWS, GridResult, MetricReport
from .predictors import Prediction


class FormatError(ValueError):
    pass


def _f(x: float) -> str:
    return repr(float(x))


def _bool(text: str) -> bool:
    if text not in ("True", "False"):
        raise FormatError(f"expected True or False, got {text!r}")
    return text == "True"


# --- models -------------------------------------------------------------------

def write_model(model: LinearModel | MfModel, out: TextIO, seed: int | None = None) -> None:
    if isinstance(model, LinearModel):
        header = {"kind": "linear", "lambda1": _f(model.lambda1), "lambda2": _f(model.lambda2),
                  "nonneg": str(model.nonneg), "centered": str(model.centered),
                  "converged": str(model.converged), "sweeps": str(model.sweeps)}
    else:
        header = {"kind": "mf", "rank": str(model.rank), "lam": _f(model.lam),
                  "use_global_bias": str(model.use_global_bias),
                  "objective": _f(model.objective), "epochs": str(model.epochs)}
    header["seed"] = "" if seed is None else str(seed)
    for key, value in header.items():
        out.write(f"# {key}\t{value}\n")
    if isinstance(model, LinearModel):
        out.write(f"[bias]\n{_f(model.bias)}\n[weights]\n")
        for c, w in sorted(model.weights.items()):
            out.write(f"{c}\t{_f(w)}\n")
        return
    out.write(f"[mu]\n{_f(model.mu)}\n[rows]\n")
    for i, sid in enumerate(model.row_ids):
        out.write("\t".join([sid, _f(model.sb[i]), *map(_f, model.P[i])]) + "\n")
    out.write("[cols]\n")
    for j, cid in enumerate(model.col_ids):
        out.write("\t".join([cid, _f(model.cb[j]), *map(_f, model.Q[j])]) + "\n")


def read_model(src: TextIO | str) -> tuple[LinearModel | MfModel, int | None]:
    """Inverse of :func:`write_model`; returns ``(model, seed)``."""
    if isinstance(src, str):
        src = io.StringIO(src)
    header: dict[str, str] = {}
    blocks: dict[str, list[list[str]]] = {}
    current = None
    for line in src:
        line = line.rstrip("\n")
        if not line:
            continue
        if line.startswith("# "):
            key, _, value = line[2:].partition("\t")
            header[key] = value
        elif line.startswith("[") and line.endswith("]"):
            current = blocks.setdefault(line[1:-1], [])
        elif current is None:
            raise FormatError(f"data line before any block: {line!r}")
        else:
            current.append(line.split("\t"))
    seed = int(header["seed"]) if header.get("seed") else None
    try:
        kind = header["kind"]
        if kind == "linear":
            model = LinearModel(
                float(blocks["bias"][0][0]), {c: float(w) for c, w in blocks["weights"]},
                _bool(header["nonneg"]), float(header["lambda1"]), float(header["lambda2"]),
                _bool(header["centered"]), _bool(header["converged"]), int(header["sweeps"]))
        elif kind == "mf":
            rank = int(header["rank"])
            rows = blocks.get("rows", [])
            cols = blocks.get("cols", [])
            model = MfModel(
                float(blocks["mu"][0][0]),
                [float(r[1]) for r in rows], [float(c[1]) for c in cols],
                np.array([[float(v) for v in r[2:]] for r in rows]).reshape(len(rows), rank),
                np.array([[float(v) for v in c[2:]] for c in cols]).reshape(len(cols), rank),
                float(header["lam"]), _bool(header["use_global_bias"]),
                tuple(r[0] for r in rows), tuple(c[0] for c in cols),
                float(header["objective"]), int(header["epochs"]))
        else:
            raise FormatError(f"unknown model kind {kind!r}")
    except (KeyError, IndexError) as exc:
        raise FormatError(f"incomplete model file: missing {exc}") from exc
    return model, seed


# --- experiment outputs -----------------------------------------------------------

def write_predictions(preds: Iterable[Prediction], out: TextIO, with_actual: bool = True) -> None:
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["student", "course", "method", "predicted"] + (["actual"] if with_actual else []))
    for p in preds:
        row = [p.student_id, p.course_id, p.method, _f(p.value)]
        if with_actual:
            row.append("" if p.actual is None else _f(p.actual))
        w.writerow(row)


def read_predictions(src: TextIO | str) -> list[Prediction]:
    if isinstance(src, str):
        src = io.StringIO(src)
    out = []
    for row in csv.DictReader(src):
        actual = row.get("actual")
        out.append(Prediction(row["student"], row["course"], float(row["predicted"]),
                              row["method"], actual=float(actual) if actual else None))
    return out


def _param_str(v) -> str:
    if isinstance(v, (tuple, list)):
        return "/".join(map(str, v))
    return str(v)


def format_params(params: Mapping) -> str:
    return ";".join(f"{k}={_param_str(v)}" for k, v in params.items())


METRIC_FIELDS = ("method", "k", "policy", "params", "rmse", "avg_rmse", "n_courses", "n_grades")


def metric_row(method: str, k, policy: str, params: Mapping, rep: MetricReport) -> list[str]:
    return [method, str(k), policy, format_params(params), _f(rep.rmse), _f(rep.avg_rmse),
            str(rep.n_courses), str(rep.n_grades)]


def write_metrics(rows: Iterable[Sequence[str]], out: TextIO) -> None:
    w = csv.writer(out, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    w.writerows(rows)


def write_grid(result_cells, method: str, out: TextIO) -> None:
    """Per-cell dump: one pooled row (course ``*``) and one row per course for each cell."""
    cells = list(result_cells)
    names = list(cells[0].params) if cells else []
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["method", "course", *names, "rmse", "avg_rmse", "n"])
    for cell in cells:
        values = [_param_str(v) for v in cell.params.values()]
        rep = cell.report
        if rep is None:
            w.writerow([method, "*", *values, "", "", "0"])
            continue
        w.writerow([method, "*", *values, _f(rep.rmse), _f(rep.avg_rmse), str(rep.n_grades)])
        for course, (rmse, n) in rep.per_course.items():
            w.writerow([method, course, *values, _f(rmse), _f(rmse), str(n)])


def write_grid_result(result: GridResult, out: TextIO) -> None:
    write_grid(result.cells, result.method, out)


COUNT_STATS = ("courses", "predicted")


def statistics_table(stats: Mapping[int, Mapping[str, float]]) -> str:
    """Aligned text table, one column per ``k``."""
    ks = sorted(stats)
    label_w = max(len(label) for _, label in STAT_ROWS)
    lines = ["Prior courses".ljust(label_w) + "".join(f"{k:>12}" for k in ks)]
    for key, label in STAT_ROWS:
        fmt = ">12.0f" if key in COUNT_STATS else ">12.2f"
        cells = [format(stats[k][key], fmt) for k in ks]
        lines.append(label.ljust(label_w) + "".join(cells))
    return "\n".join(lines) + "\n"


def write_statistics_csv(stats: Mapping[int, Mapping[str, float]], out: TextIO) -> None:
    ks = sorted(stats)
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["statistic", *(f"k={k}" for k in ks)])
    for key, _ in STAT_ROWS:
        w.writerow([key, *(_f(stats[k][key]) for k in ks)])
