"""Synthetic grade histories with planted structure.

Students enter at staggered terms and take a few courses per term. Courses
sit on levels of a prerequisite DAG: level-0 courses are only taken in a
student's first term, later courses have at least two prerequisites of
which at least one must be done beforehand, and a course is never taken
after a course that lists it as a prerequisite. The resulting observation pattern depends
on the curriculum, not on chance.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .core import GRADE_MAX, GRADE_MIN, GradeRecord

KINDS = ("planted-linear", "planted-lowrank", "planted-bias", "two-cluster")


class SynthConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class SynthConfig:
    n_students: int = 1000
    n_courses: int = 40
    n_terms: int = 14
    kind: str = "planted-linear"
    noise_sigma: float = 0.3
    courses_per_term: tuple[int, int] = (3, 5)
    prereq_density: float = 0.3
    seed: int = 0
    n_levels: int = 4
    study_terms: int = 8
    n_roots: int = 6
    rank: int = 2
    ability_sigma: float = 0.35
    aptitude_sigma: float = 0.3
    grade_center: float = 2.9
    core_fraction: float = 0.4
    cluster_loyalty: float = 0.9

    def __post_init__(self):
        object.__setattr__(self, "courses_per_term", tuple(int(v) for v in self.courses_per_term))
        for name in ("n_students", "n_courses", "n_terms", "n_levels", "study_terms", "n_roots"):
            if getattr(self, name) < 1:
                raise SynthConfigError(name, "must be >= 1")
        if self.kind not in KINDS:
            raise SynthConfigError("kind", f"must be one of {', '.join(KINDS)}")
        if self.noise_sigma < 0:
            raise SynthConfigError("noise_sigma", "must be >= 0")
        lo, hi = self.courses_per_term
        if not 1 <= lo <= hi:
            raise SynthConfigError("courses_per_term", "need 1 <= low <= high")
        if not 0.0 <= self.prereq_density <= 1.0:
            raise SynthConfigError("prereq_density", "must be in [0, 1]")
        if self.rank < 0:
            raise SynthConfigError("rank", "must be >= 0")
        if self.n_roots >= self.n_courses:
            raise SynthConfigError("n_roots", "must be below n_courses")
        if self.n_roots < lo:
            raise SynthConfigError(
                "courses_per_term", "first-term load exceeds the number of level-0 courses")
        if not 0.0 <= self.cluster_loyalty <= 1.0:
            raise SynthConfigError("cluster_loyalty", "must be in [0, 1]")

    @classmethod
    def from_mapping(cls, data: dict) -> "SynthConfig":
        known = {f.name: f for f in fields(cls)}
        kw = {}
        for key, value in data.items():
            if key not in known:
                raise SynthConfigError(key, "unknown setting")
            default = known[key].default
            try:
                if isinstance(default, tuple):
                    if isinstance(value, str):
                        value = [v for v in value.replace("-", ",").split(",") if v.strip()]
                    value = tuple(int(v) for v in value)
                elif isinstance(default, bool):
                    value = str(value).lower() in ("1", "true", "yes")
                elif isinstance(default, int):
                    value = int(value)
                elif isinstance(default, float):
                    value = float(value)
            except (TypeError, ValueError):
                raise SynthConfigError(key, f"cannot parse {value!r}") from None
            kw[key] = value
        return cls(**kw)


@dataclass
class Truth:
    """Planted parameters behind a generated data set.

    ``linear`` maps cluster -> course -> ``{"bias": w0, "weights": {course: w}}``;
    level-0 courses have no weights and get ``bias + ability + aptitude``,
    where ``aptitude`` is drawn per (student, level-0 course).
    """

    kind: str
    levels: dict[str, int]
    prereqs: dict[str, list[str]]
    cluster: dict[str, int] = field(default_factory=dict)
    ability: dict[str, float] = field(default_factory=dict)
    aptitude: dict[str, dict[str, float]] = field(default_factory=dict)
    linear: dict[str, dict[str, dict]] = field(default_factory=dict)
    mu: float = 0.0
    student_bias: dict[str, float] = field(default_factory=dict)
    course_bias: dict[str, float] = field(default_factory=dict)
    student_factors: dict[str, list[float]] = field(default_factory=dict)
    course_factors: dict[str, list[float]] = field(default_factory=dict)
    noise_sigma: float = 0.0
    n_clipped: int = 0
    n_grades: int = 0

    @property
    def clip_rate(self) -> float:
        return self.n_clipped / self.n_grades if self.n_grades else 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Truth":
        return cls(**json.loads(text))

    def noiseless_grade(self, student: str, course: str, prior: dict[str, float]) -> float:
        """Grade the planted model assigns before noise and clipping."""
        if self.kind in ("planted-linear", "two-cluster"):
            model = self.linear[str(self.cluster.get(student, 0))][course]
            if self.levels[course] == 0:
                return model["bias"] + self.ability[student] + self.aptitude[student][course]
            return model["bias"] + sum(w * prior[c] for c, w in model["weights"].items()
                                       if c in prior)
        value = self.mu + self.student_bias[student] + self.course_bias[course]
        if self.student_factors:
            value += float(np.dot(self.student_factors[student], self.course_factors[course]))
        return value


def _course_ids(n):
    width = len(str(n - 1))
    return [f"C{j:0{width}d}" for j in range(n)]


def _student_ids(n):
    width = len(str(n - 1))
    return [f"S{i:0{width}d}" for i in range(n)]


def _curriculum(cfg: SynthConfig, rng):
    courses = _course_ids(cfg.n_courses)
    levels = {c: 0 for c in courses[:cfg.n_roots]}
    rest = courses[cfg.n_roots:]
    for k, c in enumerate(rest):
        levels[c] = 1 + (k * (cfg.n_levels - 1)) // max(len(rest), 1) if cfg.n_levels > 1 else 1
    prereqs: dict[str, list[str]] = {}
    for c in courses:
        lower = [d for d in courses if levels[d] < levels[c]]
        if not lower:
            prereqs[c] = []
            continue
        chosen = [d for d in lower if rng.random() < cfg.prereq_density]
        if len(chosen) > 4:
            chosen = list(rng.choice(chosen, size=4, replace=False))
        if len(chosen) < 2:
            # a single prerequisite would be taken by every student of the course
            rest = sorted(d for d in lower if d not in chosen)
            chosen += list(rng.choice(rest, size=min(2 - len(chosen), len(rest)), replace=False))
        prereqs[c] = sorted(chosen)
    return courses, levels, prereqs


def _clusters(cfg, courses, levels, rng):
    """Course -> owning cluster (-1 = shared core)."""
    owner = {c: -1 for c in courses}
    if cfg.kind != "two-cluster":
        return owner
    upper = [c for c in courses if levels[c] > 0]
    n_core = int(round(cfg.core_fraction * len(upper)))
    core = set(rng.choice(upper, size=n_core, replace=False).tolist()) if n_core else set()
    electives = [c for c in upper if c not in core]
    for k, c in enumerate(rng.permutation(electives).tolist()):
        owner[c] = k % 2
    return owner


def _plant_linear(cfg, courses, levels, prereqs, rng):
    models = {}
    for c in courses:
        if levels[c] == 0:
            models[c] = {"bias": cfg.grade_center + float(rng.normal(0, 0.2)), "weights": {}}
            continue
        raw = rng.uniform(0.2, 1.0, size=len(prereqs[c]))
        total = float(rng.uniform(0.5, 0.9))
        w = raw / raw.sum() * total
        center = cfg.grade_center + float(rng.normal(0, 0.15))
        models[c] = {"bias": center * (1.0 - total),
                     "weights": {d: float(v) for d, v in zip(prereqs[c], w)}}
    return models


def _enroll(cfg, courses, levels, prereqs, owner, clusters, rng):
    """Term-by-term course choices; returns per-student ``[(term, course), ...]``."""
    popularity = dict(zip(courses, rng.lognormal(0.0, 0.8, size=len(courses))))
    blocked_by = {c: set(prereqs[c]) for c in courses}
    roots = [c for c in courses if levels[c] == 0]
    upper = [c for c in courses if levels[c] > 0]
    lo, hi = cfg.courses_per_term
    last_start = max(cfg.n_terms - 2, 0)
    plans = []
    for s in range(cfg.n_students):
        start = int(rng.integers(0, last_start + 1))
        length = int(rng.integers(max(cfg.study_terms - 2, 2), cfg.study_terms + 3))
        end = min(start + length, cfg.n_terms)
        taken: dict[str, int] = {}
        blocked: set[str] = set()
        plan = []
        for term in range(start, end):
            load = int(rng.integers(lo, hi + 1))
            if term == start:
                pool = roots
            else:
                pool = [c for c in upper if c not in taken and c not in blocked
                        and any(p in taken for p in prereqs[c])]
            pool = [c for c in pool if c not in taken]
            if not pool:
                continue
            progress = 1 + (term - start) * (cfg.n_levels - 1) / max(length, 1)
            wts = np.array([popularity[c] * np.exp(-abs(levels[c] - progress))
                            * _affinity(owner[c], clusters[s], cfg.cluster_loyalty)
                            for c in pool])
            k = min(load, len(pool))
            pick = rng.choice(len(pool), size=k, replace=False, p=wts / wts.sum())
            chosen = [pool[i] for i in sorted(pick)]
            chosen = [c for c in chosen if not blocked_by[c] & set(chosen)]
            for c in chosen:
                taken[c] = term
                blocked |= blocked_by[c]
                plan.append((term, c))
        plans.append(plan)
    return plans


def _affinity(course_owner, student_cluster, loyalty):
    if course_owner < 0:
        return 1.0
    return loyalty if course_owner == student_cluster else 1.0 - loyalty


def generate(cfg: SynthConfig) -> tuple[list[GradeRecord], Truth]:
    """Draw records and their planted truth; a pure function of ``cfg``."""
    rng = np.random.default_rng(cfg.seed)
    courses, levels, prereqs = _curriculum(cfg, rng)
    owner = _clusters(cfg, courses, levels, rng)
    students = _student_ids(cfg.n_students)
    n_clusters = 2 if cfg.kind == "two-cluster" else 1
    clusters = rng.integers(0, n_clusters, size=cfg.n_students)
    truth = Truth(cfg.kind, levels, prereqs, noise_sigma=cfg.noise_sigma)
    truth.cluster = {s: int(k) for s, k in zip(students, clusters)}

    if cfg.kind in ("planted-linear", "two-cluster"):
        truth.linear = {str(k): _plant_linear(cfg, courses, levels, prereqs, rng)
                        for k in range(n_clusters)}
        truth.ability = {s: float(a) for s, a in
                         zip(students, rng.normal(0, cfg.ability_sigma, cfg.n_students))}
        roots = [c for c in courses if levels[c] == 0]
        apt = rng.normal(0, cfg.aptitude_sigma, (cfg.n_students, len(roots)))
        truth.aptitude = {s: dict(zip(roots, apt[i].tolist())) for i, s in enumerate(students)}
    else:
        truth.mu = cfg.grade_center
        truth.student_bias = {s: float(v) for s, v in
                              zip(students, rng.normal(0, 0.75 * cfg.ability_sigma, cfg.n_students))}
        truth.course_bias = {c: float(v) for c, v in
                             zip(courses, rng.normal(0, 0.25, len(courses)))}
        if cfg.kind == "planted-lowrank" and cfg.rank > 0:
            # interaction term has standard deviation ~0.3
            scale = (0.09 / cfg.rank) ** 0.25
            P = rng.normal(0, scale, (cfg.n_students, cfg.rank))
            Q = rng.normal(0, scale, (len(courses), cfg.rank))
            truth.student_factors = {s: P[i].tolist() for i, s in enumerate(students)}
            truth.course_factors = {c: Q[j].tolist() for j, c in enumerate(courses)}

    plans = _enroll(cfg, courses, levels, prereqs, owner, clusters, rng)
    records = []
    clipped = 0
    for s, plan in zip(students, plans):
        grades: dict[str, tuple[int, float]] = {}
        for term, c in plan:
            prior = {d: g for d, (t, g) in grades.items() if d in prereqs[c] and t < term}
            value = truth.noiseless_grade(s, c, prior)
            if cfg.noise_sigma > 0:
                value += float(rng.normal(0, cfg.noise_sigma))
            if not GRADE_MIN <= value <= GRADE_MAX:
                clipped += 1
                value = min(max(value, GRADE_MIN), GRADE_MAX)
            grades[c] = (term, value)
            records.append(GradeRecord(s, c, term, value))
    truth.n_clipped = clipped
    truth.n_grades = len(records)
    records.sort(key=lambda r: (r.term, r.student_id, r.course_id))
    return records, truth


def lowrank_matrix(n_rows: int, n_cols: int, rank: int, seed: int = 0,
                   noise_sigma: float = 0.0, center: float = 2.8) -> tuple[np.ndarray, dict]:
    """Dense ``mu + sb + cb + P Q'`` matrix (plus optional noise) and its parts."""
    rng = np.random.default_rng(seed)
    sb = rng.normal(0, 0.3, n_rows)
    cb = rng.normal(0, 0.3, n_cols)
    P = rng.normal(0, 0.6, (n_rows, rank))
    Q = rng.normal(0, 0.6, (n_cols, rank))
    clean = center + sb[:, None] + cb[None, :] + P @ Q.T
    noisy = clean + (rng.normal(0, noise_sigma, clean.shape) if noise_sigma > 0 else 0.0)
    return noisy, {"mu": center, "sb": sb, "cb": cb, "P": P, "Q": Q, "clean": clean}
