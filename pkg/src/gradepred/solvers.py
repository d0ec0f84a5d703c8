"""Elastic-net coordinate descent and biased matrix-completion SGD."""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .core import LinearModel, MfModel, SparseGradeMatrix

CD_TOL = 1e-7
CD_MAX_SWEEPS = 10_000

SGD_LEARNING_RATE = 0.005
SGD_EPOCHS = 1000
SGD_REL_TOL = 1e-6
INIT_SCALE = 0.005
# Bound on the summed step a parameter takes per epoch (count * rate). Keeps
# parameters touched by many entries (mu, large courses) from turning into
# noisy moving averages.
STEP_CAP = 0.25
# Relative change of |P|^2 + |Q|^2 below which the factors count as settled.
# Guards against stopping on the plateau while factors escape the small init.
FACTOR_TOL = 1e-3


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True, eq=False)
class ElasticNetProblem:
    """``min ||y - b - X w||^2 + lambda1 ||w||^2 + lambda2 ||w||_1``.

    Missing design entries count as zero. ``b`` is fitted only when
    ``fit_bias`` and is never penalized.
    """

    design: SparseGradeMatrix
    targets: np.ndarray
    lambda1: float = 0.0
    lambda2: float = 0.0
    nonneg: bool = False
    fit_bias: bool = True

    def __post_init__(self):
        y = np.asarray(self.targets, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "targets", y)
        if len(y) != self.design.n_rows:
            raise ValueError(f"{len(y)} targets for {self.design.n_rows} rows")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("regularization weights must be >= 0")

    @classmethod
    def from_dense(cls, X, y, **kw) -> "ElasticNetProblem":
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        r, c = np.nonzero(np.ones_like(X, dtype=bool))
        design = SparseGradeMatrix([f"r{i}" for i in range(X.shape[0])],
                                   [f"x{j}" for j in range(X.shape[1])], r, c, X[r, c])
        return cls(design, y, **kw)


@dataclass(frozen=True, eq=False)
class CompletionProblem:
    """``min sum_obs (g - mu - sb_i - cb_j - p_i q_j)^2 + lam (|P|^2 + |Q|^2 + |sb|^2 + |cb|^2)``."""

    matrix: SparseGradeMatrix
    rank: int
    lam: float = 0.0
    use_global_bias: bool = True
    learning_rate: float = SGD_LEARNING_RATE
    epochs: int = SGD_EPOCHS
    seed: int = 0
    rel_tol: float = SGD_REL_TOL

    def __post_init__(self):
        if self.rank < 0 or self.lam < 0:
            raise ValueError("rank and lam must be >= 0")


# --- elastic net -----------------------------------------------------------

@numba.njit(cache=True)
def _enet_objective(r, w, lam1, lam2):
    return np.sum(r * r) + lam1 * np.sum(w * w) + lam2 * np.sum(np.abs(w))


@numba.njit(cache=True)
def _enet_cd(X, y, lam1, lam2, nonneg, fit_bias, tol, max_sweeps, trace):
    n, m = X.shape
    w = np.zeros(m)
    b = 0.0
    r = y.copy()
    col_sq = np.zeros(m)
    for j in range(m):
        col_sq[j] = np.sum(X[:, j] * X[:, j])
    half = 0.5 * lam2
    converged = False
    sweeps = 0
    while sweeps < max_sweeps:
        sweeps += 1
        max_delta = 0.0
        if fit_bias:
            shift = np.mean(r)
            b += shift
            r -= shift
            max_delta = abs(shift)
        for j in range(m):
            if col_sq[j] == 0.0:
                continue
            old = w[j]
            rho = col_sq[j] * old
            for i in range(n):
                rho += X[i, j] * r[i]
            if nonneg:
                new = max(rho - half, 0.0) / (col_sq[j] + lam1)
            elif rho > half:
                new = (rho - half) / (col_sq[j] + lam1)
            elif rho < -half:
                new = (rho + half) / (col_sq[j] + lam1)
            else:
                new = 0.0
            delta = new - old
            if delta != 0.0:
                for i in range(n):
                    r[i] -= X[i, j] * delta
                w[j] = new
                if abs(delta) > max_delta:
                    max_delta = abs(delta)
        if len(trace):
            trace[sweeps - 1] = _enet_objective(r, w, lam1, lam2)
        if max_delta < tol:
            converged = True
            break
    return w, b, converged, sweeps


def solve_elastic_net(p: ElasticNetProblem, tol: float = CD_TOL,
                      max_sweeps: int = CD_MAX_SWEEPS, history: list | None = None) -> LinearModel:
    """Cyclic coordinate descent with soft-thresholding.

    Each coordinate step is the exact 1-D minimizer
    ``S(rho, lambda2/2) / (x_j'x_j + lambda1)``, projected onto ``w >= 0``
    when ``nonneg``; the bias is reset to the residual mean once per sweep.
    Stops when no coordinate moved more than ``tol`` in a sweep. If the
    sweep cap is hit the last (lowest-objective) iterate is returned with
    ``converged=False``. ``history``, if given, receives the objective after
    every sweep.
    """
    X = p.design.to_dense()
    y = p.targets
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite value in regression inputs")
    if X.shape[0] == 0:
        raise ValueError("regression problem has no rows")
    if X.shape[1] == 0:
        X = np.zeros((X.shape[0], 0))
    trace = np.zeros(max_sweeps if history is not None else 0)
    w, b, converged, sweeps = _enet_cd(
        np.ascontiguousarray(X), y, float(p.lambda1), float(p.lambda2), bool(p.nonneg),
        bool(p.fit_bias), float(tol), int(max_sweeps), trace)
    if history is not None:
        history.extend(trace[:sweeps].tolist())
    if p.nonneg:
        w = np.maximum(w, 0.0)
    return LinearModel(float(b), dict(zip(p.design.col_ids, w.tolist())), bool(p.nonneg),
                       float(p.lambda1), float(p.lambda2), converged=bool(converged),
                       sweeps=int(sweeps))


def objective_elastic_net(p: ElasticNetProblem, m: LinearModel) -> float:
    unknown = set(m.weights) - set(p.design.col_ids)
    if unknown:
        raise ValueError(f"model weights for columns not in the design: {sorted(unknown)[:5]}")
    w = np.array([m.weights.get(c, 0.0) for c in p.design.col_ids])
    r = p.targets - m.bias - p.design.to_dense() @ w
    return float(r @ r + p.lambda1 * (w @ w) + p.lambda2 * np.abs(w).sum())


# --- matrix completion -------------------------------------------------------

@numba.njit(cache=True)
def _sgd_epoch(rows, cols, vals, order, mu, sb, cb, P, Q, row_reg, col_reg, row_lr, col_lr,
               mu_lr):
    rank = P.shape[1]
    for t in range(len(order)):
        k = order[t]
        i = rows[k]
        j = cols[k]
        pred = mu + sb[i] + cb[j]
        for f in range(rank):
            pred += P[i, f] * Q[j, f]
        e = vals[k] - pred
        a = row_lr[i]
        b = col_lr[j]
        mu += mu_lr * e
        sb[i] += a * (e - row_reg[i] * sb[i])
        cb[j] += b * (e - col_reg[j] * cb[j])
        for f in range(rank):
            pif = P[i, f]
            P[i, f] += a * (e * Q[j, f] - row_reg[i] * pif)
            Q[j, f] += b * (e * pif - col_reg[j] * Q[j, f])
    return mu


@numba.njit(cache=True)
def _completion_objective(rows, cols, vals, mu, sb, cb, P, Q, lam):
    total = 0.0
    rank = P.shape[1]
    for k in range(len(vals)):
        i = rows[k]
        j = cols[k]
        pred = mu + sb[i] + cb[j]
        for f in range(rank):
            pred += P[i, f] * Q[j, f]
        e = vals[k] - pred
        total += e * e
    return total + lam * (np.sum(P * P) + np.sum(Q * Q) + np.sum(sb * sb) + np.sum(cb * cb))


def solve_completion(p: CompletionProblem, history: list | None = None) -> MfModel:
    """Seeded SGD over the observed entries, reshuffled every epoch.

    The penalty of each row (column) is spread evenly over that row's
    (column's) observed entries, so every stochastic step is an unbiased
    piece of the full objective. A parameter touched by ``n`` entries uses
    step ``min(learning_rate, STEP_CAP / n)``. Starts from ``mu`` = observed
    mean (or 0 without a global bias), zero biases and factors drawn from
    ``U(-0.005, 0.005)``. Stops after ``p.epochs`` epochs, or once the
    relative objective change is below ``p.rel_tol`` while the factor norm
    has settled. ``history`` receives the objective after every epoch.
    """
    M = p.matrix
    if M.nnz == 0:
        raise ValueError("completion problem has no observed entries")
    n, m = M.shape
    rng = np.random.default_rng(p.seed)
    mu = float(M.vals.mean()) if p.use_global_bias else 0.0
    sb = np.zeros(n)
    cb = np.zeros(m)
    P = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(n, p.rank))
    Q = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(m, p.rank))
    rc = M.row_counts()
    cc = M.col_counts()
    row_reg = np.where(rc > 0, p.lam / np.maximum(rc, 1), 0.0)
    col_reg = np.where(cc > 0, p.lam / np.maximum(cc, 1), 0.0)
    P[rc == 0] = 0.0
    Q[cc == 0] = 0.0
    lr = p.learning_rate
    row_lr = np.minimum(lr, STEP_CAP / np.maximum(rc, 1))
    col_lr = np.minimum(lr, STEP_CAP / np.maximum(cc, 1))
    mu_lr = min(lr, STEP_CAP / M.nnz) if p.use_global_bias else 0.0
    rows = np.ascontiguousarray(M.rows)
    cols = np.ascontiguousarray(M.cols)
    vals = np.ascontiguousarray(M.vals)

    prev = _completion_objective(rows, cols, vals, mu, sb, cb, P, Q, p.lam)
    fnorm = float(np.sum(P * P) + np.sum(Q * Q))
    epoch = 0
    obj = prev
    while epoch < p.epochs:
        epoch += 1
        order = rng.permutation(len(vals))
        mu = _sgd_epoch(rows, cols, vals, order, mu, sb, cb, P, Q, row_reg, col_reg,
                        row_lr, col_lr, mu_lr)
        obj = _completion_objective(rows, cols, vals, mu, sb, cb, P, Q, p.lam)
        if not np.isfinite(obj):
            raise DivergenceError(
                f"SGD diverged at epoch {epoch} with learning rate {p.learning_rate}; "
                "lower the learning rate")
        if history is not None:
            history.append(float(obj))
        new_fnorm = float(np.sum(P * P) + np.sum(Q * Q))
        settled = abs(new_fnorm - fnorm) <= FACTOR_TOL * max(new_fnorm, 1e-300)
        fnorm = new_fnorm
        if settled and abs(prev - obj) <= p.rel_tol * max(abs(prev), 1e-300):
            break
        prev = obj
    return MfModel(float(mu) if p.use_global_bias else 0.0, sb, cb, P, Q, p.lam,
                   p.use_global_bias, M.row_ids, M.col_ids, float(obj), epoch)


def objective_completion(p: CompletionProblem, m: MfModel) -> float:
    M = p.matrix
    if m.P.shape[0] != M.n_rows or m.Q.shape[0] != M.n_cols:
        raise ValueError(
            f"model is {m.P.shape[0]}x{m.Q.shape[0]} but matrix is {M.n_rows}x{M.n_cols}")
    return float(_completion_objective(
        np.ascontiguousarray(M.rows), np.ascontiguousarray(M.cols),
        np.ascontiguousarray(M.vals), m.mu, np.asarray(m.sb), np.asarray(m.cb),
        np.ascontiguousarray(m.P), np.ascontiguousarray(m.Q), p.lam))
