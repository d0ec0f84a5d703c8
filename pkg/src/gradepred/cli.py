"""Command-line interface: ``gradepred {ingest,simulate,run,stats,grid}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 no predictable courses.

``run`` and ``grid`` accept ``--config FILE`` with ``key = value`` lines
(keys as the long flag names, with ``_`` for ``-``). Grid overrides are
written ``grid.<method>.<param> = v1, v2, ...``. Command-line flags win
over the file.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from contextlib import ExitStack
from dataclasses import dataclass, field
from pathlib import Path

from .core import GradeError
from .datasets import LeakageError, build_course_dataset, read_dataset, write_dataset
from .evaluation import (DEFAULT_POLICY, POLICIES, GridSpec, PolicyError, View, audit_leakage,
                         build_view, common_subset, compute_metrics, dataset_statistics,
                         default_grids, grid_search)
from .formats import (metric_row, statistics_table, write_grid_result, write_metrics,
                      write_predictions, write_statistics_csv)
from .ingest import (HeaderError, IngestReport, apply_allow_list, dedupe_retakes, format_records,
                     parse_records, read_allow_list)
from .predictors import METHODS
from .synth import SynthConfig, SynthConfigError, generate

log = logging.getLogger("gradepred")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NOTHING = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- run configuration ------------------------------------------------------------

@dataclass
class RunConfig:
    input: Path
    out: Path
    target_term: int | None = None
    ks: tuple[int, ...] = (5,)
    methods: tuple[str, ...] = ("csr-rc",)
    policy: str | None = None
    seed: int = 0
    jobs: int = 1
    clamp: bool = False
    min_students: int = 20
    cache: Path | None = None
    common_subset: bool = False
    grids: dict[str, dict[str, tuple]] = field(default_factory=dict)

    def __post_init__(self):
        if any(k < 0 for k in self.ks):
            raise UsageError("k must be >= 0")
        if self.jobs < 1:
            raise UsageError("jobs must be >= 1")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise UsageError(f"unknown method(s) {', '.join(unknown)}; "
                             f"choose from {', '.join(METHODS)}")
        if self.policy is not None and self.policy not in POLICIES:
            raise UsageError(f"unknown policy {self.policy!r}")

    def grid_for(self, method: str) -> GridSpec:
        base = default_grids(method, self.policy or DEFAULT_POLICY[method])
        params = dict(base.params)
        for name, values in self.grids.get(method, {}).items():
            if name not in params:
                raise UsageError(f"{method} has no grid parameter {name!r}; "
                                 f"expected one of {', '.join(params)}")
            params[name] = values
        return GridSpec(params, base.policy)


def _number(text: str):
    text = text.strip()
    if "/" in text:
        return tuple(_number(t) for t in text.split("/"))
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        raise UsageError(f"not a number: {text!r}") from None


def parse_grid_override(text: str) -> tuple[str, str, tuple]:
    """``method.param=v1,v2`` -> ``(method, param, values)``."""
    key, sep, values = text.partition("=")
    method, dot, param = key.strip().partition(".")
    if not sep or not dot or not values.strip():
        raise UsageError(f"grid override must look like method.param=v1,v2; got {text!r}")
    return method, param, tuple(_number(v) for v in values.split(","))


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in str(text).split(","))
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def _truthy(text: str) -> bool:
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"expected a boolean, got {text!r}")


def read_config_file(path: Path) -> dict[str, str]:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + path.read_text(encoding="utf-8"), source=str(path))
    except (OSError, configparser.Error) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    return dict(parser["run"])


def build_run_config(args: argparse.Namespace) -> RunConfig:
    settings = read_config_file(Path(args.config)) if args.config else {}
    grids: dict[str, dict[str, tuple]] = {}
    overrides = [f"{k[5:]}={v}" for k, v in settings.items() if k.startswith("grid.")]
    overrides += args.grid or []
    for item in overrides:
        method, param, values = parse_grid_override(item)
        grids.setdefault(method, {})[param] = values
    for key in ("input", "out", "target_term", "k", "methods", "policy", "seed", "jobs",
                "clamp", "min_students", "cache", "common_subset"):
        flag = getattr(args, key, None)
        if flag is not None and flag is not False:
            settings[key] = flag
    known = {"input", "out", "target_term", "k", "methods", "policy", "seed", "jobs", "clamp",
             "min_students", "cache", "common_subset"}
    unknown = sorted(k for k in settings if k not in known and not k.startswith("grid."))
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    if "input" not in settings:
        raise UsageError("no input file given (--input or 'input =' in the config)")
    try:
        cfg = RunConfig(
            input=Path(settings["input"]),
            out=Path(settings.get("out", "gradepred-out")),
            target_term=int(settings["target_term"]) if "target_term" in settings else None,
            ks=_ints(settings.get("k", "5")),
            methods=tuple(m.strip() for m in str(settings.get("methods", "csr-rc")).split(",")
                          if m.strip()),
            policy=settings.get("policy"),
            seed=int(settings.get("seed", 0)),
            jobs=int(settings.get("jobs", 1)),
            clamp=_truthy(settings.get("clamp", False)),
            min_students=int(settings.get("min_students", 20)),
            cache=Path(settings["cache"]) if settings.get("cache") else None,
            common_subset=_truthy(settings.get("common_subset", False)),
            grids=grids,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    # reject bad overrides before any output is written
    for method in sorted(set(cfg.methods) | set(grids)):
        if method not in METHODS:
            raise UsageError(f"grid override for unknown method {method!r}")
        cfg.grid_for(method)
    return cfg


# --- shared helpers -------------------------------------------------------------

def load_records(path: Path, report: IngestReport | None = None):
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            records = parse_records(fh, report)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except HeaderError as exc:
        raise DataError(f"{path}: {exc}") from exc
    records = dedupe_retakes(records, report)
    if not records:
        raise DataError(f"{path}: no valid grade records")
    return records


def _dataset_source(cache: Path, key: str):
    """Course datasets cached as triplet files keyed by input, term, course and ``k``."""
    cache.mkdir(parents=True, exist_ok=True)

    def source(course, cohort, k):
        name = hashlib.sha256(f"{key}\0{course}\0{k}".encode()).hexdigest()[:32]
        path = cache / f"{name}.txt"
        if path.exists():
            ds = read_dataset(path.read_text(encoding="utf-8"))
            if ds.target_course == course:
                return ds
        ds = build_course_dataset(course, cohort, k)
        tmp = path.with_suffix(f".{os.getpid()}.tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            write_dataset(ds, fh)
        tmp.replace(path)
        return ds

    return source


def build_views(cfg: RunConfig, records) -> dict[int, View]:
    term = cfg.target_term if cfg.target_term is not None else max(r.term for r in records)
    source = build_course_dataset
    if cfg.cache is not None:
        digest = hashlib.sha256(cfg.input.read_bytes()).hexdigest()
        source = _dataset_source(cfg.cache, f"{digest}\0{term}\0{cfg.min_students}")
    try:
        return {k: build_view(records, term, k, cfg.min_students, source) for k in cfg.ks}
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def _write(path: Path, writer, *args) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer(*args, fh)


def _metrics_table(rows: list[list[str]]) -> str:
    head = ["method", "k", "policy", "RMSE", "AvgRMSE", "courses", "grades"]
    body = [[r[0], r[1], r[2], f"{float(r[4]):.4f}", f"{float(r[5]):.4f}", r[6], r[7]]
            for r in rows]
    widths = [max(len(x) for x in col) for col in zip(head, *body)]
    return "\n".join("  ".join(x.ljust(w) for x, w in zip(line, widths))
                     for line in [head, *body]) + "\n"


# --- subcommands ----------------------------------------------------------------

def cmd_ingest(args) -> int:
    report = IngestReport()
    records = load_records(Path(args.input), report)
    if args.allow_list:
        try:
            allowed = read_allow_list(Path(args.allow_list).read_text(encoding="utf-8"))
        except OSError as exc:
            raise DataError(f"cannot read allow-list: {exc}") from exc
        records = apply_allow_list(records, allowed, report)
    text = format_records(records)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    report_text = "\n".join(report.lines()) + "\n"
    if args.report:
        Path(args.report).write_text(report_text, encoding="utf-8")
    else:
        sys.stderr.write(report_text)
    return EXIT_OK


def cmd_simulate(args) -> int:
    settings = read_config_file(Path(args.config)) if args.config else {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        settings[key.strip()] = value.strip()
    if args.seed is not None:
        settings["seed"] = str(args.seed)
    try:
        cfg = SynthConfig.from_mapping(settings)
    except SynthConfigError as exc:
        raise DataError(f"invalid synthetic config: {exc}") from exc
    records, truth = generate(cfg)
    out = Path(args.output)
    out.write_text(format_records(records), encoding="utf-8")
    truth_path = out.with_name(out.stem + ".truth.json")
    truth_path.write_text(truth.to_json(), encoding="utf-8")
    sys.stderr.write(f"{len(records)} records, {len({r.student_id for r in records})} students, "
                     f"clipped {truth.n_clipped} ({truth.clip_rate:.2%})\n")
    return EXIT_OK


def cmd_stats(args) -> int:
    records = load_records(Path(args.input))
    cfg = RunConfig(Path(args.input), Path("."), args.target_term, _ints(args.k),
                    min_students=args.min_students)
    stats = {k: dataset_statistics(v) for k, v in build_views(cfg, records).items()}
    sys.stdout.write(statistics_table(stats))
    if args.output:
        _write(Path(args.output), write_statistics_csv, stats)
    return EXIT_OK


def _search_all(cfg: RunConfig, records, views: dict[int, View], grids_only: bool) -> int:
    cfg.out.mkdir(parents=True, exist_ok=True)
    if not any(v.tasks for v in views.values()):
        sys.stderr.write("no predictable courses: every course was skipped\n")
        for k, v in views.items():
            for course, reason in v.skipped:
                sys.stderr.write(f"  k={k} {course}: {reason}\n")
        return EXIT_NOTHING
    metric_rows: list[list[str]] = []
    finals: dict[str, dict[int, list]] = {}
    skipped_rows = []
    with ExitStack() as stack:
        pool = stack.enter_context(ProcessPoolExecutor(cfg.jobs)) if cfg.jobs > 1 else None
        for k, view in sorted(views.items()):
            skipped_rows += [(k, "*", course, "*", reason) for course, reason in view.skipped]
            if not view.tasks:
                continue
            for method in cfg.methods:
                grid = cfg.grid_for(method)
                try:
                    result = grid_search(method, view, grid, records=records, seed=cfg.seed,
                                         clamp=cfg.clamp, pool=pool, floor=cfg.min_students)
                except PolicyError as exc:
                    raise DataError(f"{method} (k={k}): {exc}") from exc
                audit_leakage(view, result.final.predictions)
                _write(cfg.out / f"grid_{method}_k{k}.csv", write_grid_result, result)
                skipped_rows += [(k, method, c, s, why) for s, c, why in result.final.skipped]
                preds = result.final.predictions
                finals.setdefault(method, {})[k] = preds
                if preds:
                    metric_rows.append(metric_row(method, k, grid.policy, result.best,
                                                  compute_metrics(preds)))
                log.info("%s k=%d best %s", method, k, result.best)
    if grids_only:
        for row in metric_rows:
            sys.stdout.write(f"{row[0]}\tk={row[1]}\t{row[3]}\trmse={float(row[4]):.4f}\n")
        return EXIT_OK
    if cfg.common_subset and len(views) > 1:
        for method, by_k in finals.items():
            shared = common_subset(by_k)
            for k, preds in shared.items():
                if preds:
                    metric_rows.append(metric_row(method, f"{k}-common", cfg.grid_for(method).policy,
                                                  {}, compute_metrics(preds)))
    for k in sorted(views):
        preds = [p for method in cfg.methods for p in finals.get(method, {}).get(k, [])]
        _write(cfg.out / f"predictions_k{k}.csv", write_predictions, preds)
    _write(cfg.out / "metrics.csv", write_metrics, metric_rows)
    (cfg.out / "metrics.txt").write_text(_metrics_table(metric_rows), encoding="utf-8")
    stats = {k: dataset_statistics(v) for k, v in views.items()}
    _write(cfg.out / "statistics.csv", write_statistics_csv, stats)
    (cfg.out / "statistics.txt").write_text(statistics_table(stats), encoding="utf-8")
    with open(cfg.out / "skipped.csv", "w", encoding="utf-8") as fh:
        fh.write("k,method,course,student,reason\n")
        for row in skipped_rows:
            fh.write(",".join(map(str, row)) + "\n")
    sys.stdout.write(_metrics_table(metric_rows))
    return EXIT_OK


def cmd_run(args, grids_only: bool = False) -> int:
    cfg = build_run_config(args)
    records = load_records(cfg.input)
    return _search_all(cfg, records, build_views(cfg, records), grids_only)


def cmd_grid(args) -> int:
    return cmd_run(args, grids_only=True)


# --- argument parsing ------------------------------------------------------------

def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value run manifest")
    p.add_argument("--input", help="grade records CSV/TSV")
    p.add_argument("--out", help="output directory")
    p.add_argument("--cache", help="dataset cache directory")
    p.add_argument("--target-term", dest="target_term", type=int,
                   help="term to predict (default: last term in the data)")
    p.add_argument("--k", help="minimum prior courses; comma list for several (e.g. 5,7,9)")
    p.add_argument("--methods", help=f"comma list from {','.join(METHODS)}")
    p.add_argument("--policy", choices=POLICIES, help="selection policy for every method")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, help="worker processes")
    p.add_argument("--clamp", action="store_true", default=None, help="clamp predictions to [0, 4]")
    p.add_argument("--min-students", dest="min_students", type=int)
    p.add_argument("--common-subset", dest="common_subset", action="store_true", default=None,
                   help="also score every method on pairs predicted for all k")
    p.add_argument("--grid", action="append", metavar="METHOD.PARAM=V1,V2",
                   help="override one grid axis (repeatable)")


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gradepred", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="validate and canonicalize a grade file")
    p.add_argument("input")
    p.add_argument("--allow-list", dest="allow_list", help="file with one course id per line")
    p.add_argument("-o", "--output", help="canonical CSV (default: stdout)")
    p.add_argument("--report", help="write the ingest report here (default: stderr)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("simulate", help="generate synthetic grades with planted structure")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--config", help="key = value generator settings")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("run", help="full experiment: select, predict, evaluate")
    _add_run_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("grid", help="grid search only; writes per-cell CSVs")
    _add_run_flags(p)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("stats", help="per-course dataset statistics")
    p.add_argument("input")
    p.add_argument("--target-term", dest="target_term", type=int)
    p.add_argument("--k", default="5,7,9")
    p.add_argument("--min-students", dest="min_students", type=int, default=20)
    p.add_argument("-o", "--output", help="also write the table as CSV")
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        sys.stderr.write(f"gradepred: error: {exc}\n")
        return EXIT_USAGE
    except (DataError, GradeError, LeakageError, SynthConfigError) as exc:
        sys.stderr.write(f"gradepred: data error: {exc}\n")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
