"""Hill-climbing construction of circle features around ridge/lasso refits.

Each iteration mutates one circle, refits the linear model on a random
half of the training days, and keeps the change only if MAE on the
complementary half is strictly lower than the unmutated state's MAE on
the same split. Comparing both states on one shared split keeps the
accept decision paired; comparing against a running best instead would
ratchet on split luck and freeze the search.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GevrError, InvalidInputError
from .linear import CvPlan, LinearModel, default_penalty_grid, fit_lasso, fit_ridge, mae, predict, select_penalty_cv
from .spatial import Circle, mutate_circle, random_circle


@dataclass(frozen=True)
class WrapperConfig:
    iterations: int = 1000
    restarts: int = 30
    subset_fraction: float = 0.5  # share of training days used for each refit
    radius_max: float = 1000.0
    cv_splits: int = 5
    cv_grid_size: int = 50


@dataclass
class HillClimbResult:
    circles: list  # (variable, Circle), variable-major, R^2 circles per variable
    model: LinearModel
    train_mae: float
    trace: list = field(default_factory=list)  # (iteration, accepted, holdout_mae)


def _fit(kind, X, y, lam):
    return fit_ridge(X, y, lam) if kind == "ridge" else fit_lasso(X, y, lam)


def _standardized_columns(raw, train_days):
    """Standardize each aggregate column with training-day params."""
    tr = raw[train_days]
    mean = tr.mean(axis=0)
    std = tr.std(axis=0)
    safe = np.where(std > 0, std, 1.0)
    return np.where(std > 0, (raw - mean) / safe, 0.0)


def hill_climb(kind, R, fold_ctx, y, seed, config: WrapperConfig = WrapperConfig()) -> HillClimbResult:
    """Tune 3R^2 circles (R^2 per variable) by stochastic local search.

    The penalty is selected once by CV on the initial features and held
    fixed across iterations; the returned model is refit on the full
    training set at the final circles.
    """
    if kind not in ("ridge", "lasso"):
        raise InvalidInputError(f"unknown wrapper kind {kind!r}")
    if R < 1:
        raise InvalidInputError("R must be >= 1")
    rng = np.random.default_rng(seed)
    grid = fold_ctx.grid
    n_vars = fold_ctx.n_vars
    train_days = fold_ctx.train_days
    y_train = np.asarray(y, dtype=float)[train_days]

    circles = [
        (v, random_circle(rng, grid, config.radius_max))
        for v in range(n_vars)
        for _ in range(R * R)
    ]
    raw = np.column_stack([fold_ctx.agg_series(c, v) for v, c in circles])

    X_full = _standardized_columns(raw, train_days)[train_days]
    plan = CvPlan(config.cv_splits, default_penalty_grid(X_full, y_train, config.cv_grid_size))
    lam, _ = select_penalty_cv(X_full, y_train, kind, plan)

    def split():
        perm = rng.permutation(len(train_days))
        half = len(train_days) // 2
        return perm[:half], perm[half:]

    def holdout_mae(raw_cols, fit_idx, hold_idx):
        X = _standardized_columns(raw_cols, train_days)[train_days]
        model = _fit(kind, X[fit_idx], y_train[fit_idx], lam)
        return mae(predict(model, X[hold_idx]), y_train[hold_idx])

    trace = []
    for it in range(config.iterations):
        j = int(rng.integers(len(circles)))
        var, old_circle = circles[j]
        new_circle = mutate_circle(old_circle, rng, grid)
        fit_idx, hold_idx = split()
        err_old = holdout_mae(raw, fit_idx, hold_idx)
        old_col = raw[:, j].copy()
        raw[:, j] = fold_ctx.agg_series(new_circle, var)
        err_new = holdout_mae(raw, fit_idx, hold_idx)
        if err_new < err_old:
            circles[j] = (var, new_circle)
            trace.append((it, True, err_new))
        else:
            raw[:, j] = old_col
            trace.append((it, False, err_new))

    X = _standardized_columns(raw, train_days)[train_days]
    final = _fit(kind, X, y_train, lam)
    return HillClimbResult(
        circles=circles,
        model=final,
        train_mae=mae(predict(final, X), y_train),
        trace=trace,
    )


def multi_restart(kind, R, fold_ctx, y, seeds, config: WrapperConfig = WrapperConfig()) -> HillClimbResult:
    """Best-of-restarts by full-training-set MAE; seed order breaks ties."""
    seeds = list(seeds)
    if not seeds:
        raise InvalidInputError("need at least one restart seed")
    best = None
    for s in seeds:
        result = hill_climb(kind, R, fold_ctx, y, s, config)
        if best is None or result.train_mae < best.train_mae:
            best = result
    return best
