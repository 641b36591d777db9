"""OLS, ridge, and lasso with cross-validated penalty selection.

Conventions shared by all three solvers: the intercept is never
penalized, features are assumed pre-standardized by the caller, and
rank-deficient systems resolve to the minimum-norm solution (the
standard-method setting is p >> n, so underdetermined fits are the
normal case, not an error).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import ConvergenceError, InvalidInputError


@dataclass(frozen=True)
class LinearModel:
    intercept: float
    coefficients: np.ndarray
    penalty_kind: str  # "none" | "l2" | "l1"
    penalty_value: float = 0.0


@dataclass(frozen=True)
class CvPlan:
    n_splits: int
    penalty_grid: np.ndarray

    def __post_init__(self):
        if self.n_splits < 2:
            raise InvalidInputError("need at least 2 CV splits")
        g = np.asarray(self.penalty_grid, dtype=float)
        if len(g) == 0 or np.any(g < 0):
            raise InvalidInputError("penalty grid must be non-negative and non-empty")
        if len(g) > 1 and np.any(np.diff(g) >= 0):
            raise InvalidInputError("penalty grid must be strictly decreasing")
        object.__setattr__(self, "penalty_grid", g)


def _check_xy(X, y):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != len(y):
        raise InvalidInputError("X must be 2-d and aligned with 1-d y")
    if X.shape[0] < 1 or X.shape[1] < 1:
        raise InvalidInputError("X needs at least one row and one column")
    return X, y


def _centered(X, y):
    xm = X.mean(axis=0)
    ym = y.mean()
    return X - xm, y - ym, xm, ym


def fit_ols(X, y) -> LinearModel:
    """Least squares; rank-deficient designs get the minimum-norm solution."""
    X, y = _check_xy(X, y)
    Xc, yc, xm, ym = _centered(X, y)
    beta, *_ = np.linalg.lstsq(Xc, yc, rcond=None)
    return LinearModel(
        intercept=float(ym - xm @ beta), coefficients=beta, penalty_kind="none"
    )


def fit_ridge(X, y, lam: float) -> LinearModel:
    """Minimize ||y - Xb - b0||^2 + lam * ||b||^2 (intercept unpenalized)."""
    X, y = _check_xy(X, y)
    if lam < 0:
        raise InvalidInputError("ridge penalty must be non-negative")
    Xc, yc, xm, ym = _centered(X, y)
    U, s, Vt = np.linalg.svd(Xc, full_matrices=False)
    # at lam=0 this is the pseudo-inverse, i.e. the min-norm OLS solution
    shrink = np.where(s > 0, s / (s**2 + lam), 0.0)
    beta = Vt.T @ (shrink * (U.T @ yc))
    return LinearModel(
        intercept=float(ym - xm @ beta),
        coefficients=beta,
        penalty_kind="l2",
        penalty_value=float(lam),
    )


@njit(cache=True)
def _lasso_cd(X, y, beta, lam, tol, max_sweeps):  # pragma: no cover - jit kernel
    n, p = X.shape
    r = y.copy()
    for j in range(p):
        if beta[j] != 0.0:
            for i in range(n):
                r[i] -= X[i, j] * beta[j]
    colnorm = np.empty(p)
    for j in range(p):
        s = 0.0
        for i in range(n):
            s += X[i, j] * X[i, j]
        colnorm[j] = s / n
    for sweep in range(max_sweeps):
        max_delta = 0.0
        for j in range(p):
            if colnorm[j] <= 0.0:
                continue
            rho = 0.0
            for i in range(n):
                rho += X[i, j] * r[i]
            rho = rho / n + colnorm[j] * beta[j]
            if rho > lam:
                bnew = (rho - lam) / colnorm[j]
            elif rho < -lam:
                bnew = (rho + lam) / colnorm[j]
            else:
                bnew = 0.0
            d = bnew - beta[j]
            if d != 0.0:
                for i in range(n):
                    r[i] -= X[i, j] * d
                beta[j] = bnew
                ad = abs(d)
                if ad > max_delta:
                    max_delta = ad
        if max_delta <= tol:
            return sweep + 1, True
    return max_sweeps, False


def fit_lasso(X, y, lam: float, *, tol=1e-7, max_sweeps=10_000, beta0=None) -> LinearModel:
    """Minimize (1/2n)||y - Xb - b0||^2 + lam * ||b||_1 by cyclic CD.

    Converges when the largest per-sweep coefficient change drops below
    `tol`; exhausting `max_sweeps` raises ConvergenceError carrying the
    last iterate.
    """
    X, y = _check_xy(X, y)
    if lam < 0:
        raise InvalidInputError("lasso penalty must be non-negative")
    Xc, yc, xm, ym = _centered(X, y)
    beta = np.zeros(X.shape[1]) if beta0 is None else np.array(beta0, dtype=float)
    Xf = np.asfortranarray(Xc)
    _, converged = _lasso_cd(Xf, yc, beta, float(lam), float(tol), int(max_sweeps))
    model = LinearModel(
        intercept=float(ym - xm @ beta),
        coefficients=beta,
        penalty_kind="l1",
        penalty_value=float(lam),
    )
    if not converged:
        raise ConvergenceError(
            f"lasso did not converge in {max_sweeps} sweeps (lam={lam})",
            last_iterate=model,
        )
    return model


def lasso_lambda_max(X, y) -> float:
    """Smallest penalty at which every lasso coefficient is exactly zero."""
    X, y = _check_xy(X, y)
    Xc, yc, _, _ = _centered(X, y)
    return float(np.max(np.abs(Xc.T @ yc)) / len(y))


def default_penalty_grid(X, y, n_values=50, ratio=1e-4) -> np.ndarray:
    """Log-spaced decreasing grid from lambda_max down to ratio * lambda_max."""
    lmax = lasso_lambda_max(X, y)
    if lmax <= 0:
        lmax = 1.0
    return np.geomspace(lmax, ratio * lmax, n_values)


def _fit(kind, X, y, lam, beta0=None, max_sweeps=10_000):
    if kind == "ridge":
        return fit_ridge(X, y, lam)
    if kind == "lasso":
        return fit_lasso(X, y, lam, beta0=beta0, max_sweeps=max_sweeps)
    raise InvalidInputError(f"unknown solver kind {kind!r}")


# warm-started path solves get a larger sweep budget than a cold fit:
# near-duplicate columns (p >> n) make small-penalty solves slow to settle
_PATH_MAX_SWEEPS = 200_000


def select_penalty_cv(X, y, kind: str, plan: CvPlan):
    """Pick the penalty minimizing mean validation MSE over contiguous blocks.

    Splits are contiguous in time (no shuffling); the winning penalty is
    refit on all rows (warm-started down the same path for lasso). Ties
    resolve to the largest (first) penalty.
    """
    X, y = _check_xy(X, y)
    n = len(y)
    if plan.n_splits > n:
        raise InvalidInputError("more CV splits than rows")
    blocks = np.array_split(np.arange(n), plan.n_splits)
    mean_mse = np.zeros(len(plan.penalty_grid))
    for b, val_idx in enumerate(blocks):
        tr_idx = np.setdiff1d(np.arange(n), val_idx)
        beta0 = None
        for k, lam in enumerate(plan.penalty_grid):
            model = _fit(kind, X[tr_idx], y[tr_idx], lam, beta0=beta0,
                         max_sweeps=_PATH_MAX_SWEEPS)
            if kind == "lasso":
                beta0 = model.coefficients  # warm start down the path
            resid = y[val_idx] - predict(model, X[val_idx])
            mean_mse[k] += np.mean(resid**2) / plan.n_splits
    best = int(np.argmin(mean_mse))
    lam = float(plan.penalty_grid[best])
    beta0 = None
    for k in range(best + 1):
        model = _fit(kind, X, y, plan.penalty_grid[k], beta0=beta0,
                     max_sweeps=_PATH_MAX_SWEEPS)
        if kind == "lasso":
            beta0 = model.coefficients
        if k == best:
            return lam, model
    return lam, model


def predict(model: LinearModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.shape[1] != len(model.coefficients):
        raise InvalidInputError("feature count mismatch in predict")
    return model.intercept + X @ model.coefficients


def mae(pred, actual) -> float:
    pred = np.asarray(pred, dtype=float)
    actual = np.asarray(actual, dtype=float)
    if pred.shape != actual.shape:
        raise InvalidInputError("prediction/actual length mismatch")
    return float(np.mean(np.abs(pred - actual)))
