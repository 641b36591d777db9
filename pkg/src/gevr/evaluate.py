"""Experiment orchestration, statistics, and spatial importance maps.

A "cell" is one (method, fold, seed) pipeline execution: fit
standardization on training days, construct features per family, fit or
evolve, predict the held-out year, and score MAE. Wilcoxon/Bonferroni
statistics and importance heatmaps are computed from collected cells.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .errors import InvalidInputError, MissingCellError, UndefinedTestError
from .gp import (
    AggTerminal,
    ConstTerminal,
    FeatureRef,
    FeatureTerminalSet,
    GpConfig,
    MatrixContext,
    SpatialTerminalSet,
    eval_tree,
    iter_nodes,
    random_tree,
    run_evolution,
    to_sexpr,
)
from .linear import CvPlan, LinearModel, default_penalty_grid, mae, predict, select_penalty_cv
from .raster import FoldSpec, RasterSeries, ResponseSeries, day_provenance
from .spatial import (
    Circle,
    MembershipIndex,
    MembershipMask,
    build_filter_grid,
    circle_members,
    haversine_km,
)
from .wrapper import WrapperConfig, multi_restart

FAMILIES = ("SR", "SL", "SGP", "FR", "FL", "FGP", "WR", "WL", "GPESA")
_NEEDS_R = ("FR", "FL", "FGP", "WR", "WL")
EARTH_RADIUS_KM = 6371.0


# ---------------------------------------------------------------------------
# per-fold data context

class FoldContext:
    """Per-fold standardized view of the raster.

    Per-cell standardization is fit on the fold's training days only and
    reapplied everywhere; the standardized cube backs both per-cell
    features and circle aggregations (scale over time, then average over
    space). Aggregated series are cached per (circle, variable).
    """

    def __init__(self, raster: RasterSeries, fold: FoldSpec, index=None, cache=True,
                 naive_membership=False):
        self.raster = raster
        self.grid = raster.grid
        self.fold = fold
        self.train_days = np.asarray(fold.train_days)
        self.test_days = np.asarray(fold.test_days)
        self.n_vars = raster.n_vars
        tr = raster.values[self.train_days]
        self.cell_mean = tr.mean(axis=0)
        self.cell_std = tr.std(axis=0)
        safe = np.where(self.cell_std > 0, self.cell_std, 1.0)
        self.z = np.where(self.cell_std > 0, (raster.values - self.cell_mean) / safe, 0.0)
        self.provenance = day_provenance(self.train_days)
        self.index = index if index is not None else MembershipIndex(self.grid)
        self.naive_membership = naive_membership
        self._cache = {} if cache else None

    @cached_property
    def X_cells(self) -> np.ndarray:
        """All per-cell standardized features, ordered (row, col, var)."""
        return self.z.reshape(self.raster.n_days, -1)

    def cell_feature_coords(self, idx: int):
        """Inverse of the X_cells column ordering."""
        var = idx % self.n_vars
        col = (idx // self.n_vars) % self.grid.cols
        row = idx // (self.n_vars * self.grid.cols)
        return row, col, var

    def members(self, circle: Circle) -> MembershipMask:
        if self.naive_membership:
            return self._members_naive(circle)
        return self.index.members(circle)

    def _members_naive(self, circle: Circle) -> MembershipMask:
        # deliberate cell-by-cell scan; kept as the baseline for the
        # overhead benchmark
        inside = []
        best, best_d = 0, float("inf")
        g = self.grid
        for rr in range(g.rows):
            for cc in range(g.cols):
                d = haversine_km(g.lat0 + rr * g.dlat, g.lon0 + cc * g.dlon,
                                 circle.lat, circle.lon)
                if d <= circle.radius_km:
                    inside.append(rr * g.cols + cc)
                if d < best_d:
                    best, best_d = rr * g.cols + cc, d
        if not inside:
            inside = [best]
        flat = np.array(sorted(inside), dtype=np.int64)
        return MembershipMask(np.column_stack([flat // g.cols, flat % g.cols]))

    def agg_series(self, circle: Circle, variable: int) -> np.ndarray:
        key = (variable, round(circle.lat, 9), round(circle.lon, 9), round(circle.radius_km, 9))
        if self._cache is not None and key in self._cache:
            return self._cache[key]
        mask = self.members(circle)
        series = self.z[:, mask.rows, mask.cols, variable].mean(axis=1)
        if self._cache is not None:
            self._cache[key] = series
        return series

    def series(self, terminal):
        """Terminal resolver for GP evaluation (GPESA mode)."""
        if isinstance(terminal, FeatureRef):
            return self.X_cells[:, terminal.index]
        if isinstance(terminal, AggTerminal):
            return self.agg_series(terminal.circle, terminal.variable)
        raise InvalidInputError(f"cannot resolve terminal {terminal!r}")


def standardize_columns(raw: np.ndarray, train_days) -> np.ndarray:
    """Standardize each column with training-day mean/std (constant -> 0)."""
    tr = raw[np.asarray(train_days)]
    mean = tr.mean(axis=0)
    std = tr.std(axis=0)
    safe = np.where(std > 0, std, 1.0)
    return np.where(std > 0, (raw - mean) / safe, 0.0)


# ---------------------------------------------------------------------------
# method specification and experiment cells

@dataclass(frozen=True)
class MethodSpec:
    """One experiment arm. Desk-scale GP/wrapper budgets by default."""

    family: str
    R: int | None = None
    cv_splits: int = 5
    cv_grid_size: int = 50
    gp: GpConfig = field(
        default_factory=lambda: GpConfig(population_size=100, generations=30, n_runs=3)
    )
    wrapper: WrapperConfig = field(
        default_factory=lambda: WrapperConfig(iterations=200, restarts=5)
    )

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidInputError(f"unknown method family {self.family!r}")
        if self.family in _NEEDS_R:
            if self.R is None or self.R < 1:
                raise InvalidInputError(f"{self.family} requires R >= 1")
        elif self.R is not None:
            raise InvalidInputError(f"{self.family} does not take an R parameter")

    @property
    def label(self) -> str:
        return self.family if self.R is None else f"{self.family}{self.R}"


@dataclass
class CellResult:
    method: str
    family: str
    R: int | None
    fold_year: int
    seed: int
    train_err: float | None = None
    test_mae: float | None = None
    seconds: float = 0.0
    predictions: np.ndarray | None = None  # per test day
    actuals: np.ndarray | None = None
    artifact: dict | None = None
    error: str | None = None


def _circle_doc(var, circle):
    return {"type": "circle", "var": int(var), "lat": circle.lat, "lon": circle.lon,
            "radius_km": circle.radius_km}


def _cell_doc(row, col, var):
    return {"type": "cell", "row": int(row), "col": int(col), "var": int(var)}


def _linear_artifact(family, model, feature_docs):
    return {
        "kind": "linear",
        "family": family,
        "intercept": model.intercept,
        "penalty_kind": model.penalty_kind,
        "lambda": model.penalty_value,
        "coefficients": [float(c) for c in model.coefficients],
        "features": feature_docs,
    }


def _gp_terms(tree, describe):
    docs = []
    for n, _, _ in iter_nodes(tree):
        if n.is_leaf and not isinstance(n.terminal, ConstTerminal):
            docs.append(describe(n.terminal))
    return docs


def _gp_artifact(family, result, describe):
    return {
        "kind": "gp",
        "family": family,
        "sexpr": to_sexpr(result.model.tree),
        "a": result.model.a,
        "b": result.model.b,
        "best_error": result.best_error,
        "front": [
            {"error": ind.error, "terms": _gp_terms(ind.tree, describe)}
            for ind in result.front
        ],
    }


def _seed_for(seed: int, salt: int) -> int:
    return int(np.random.SeedSequence([seed, salt]).generate_state(1)[0])


def run_cell(spec: MethodSpec, raster: RasterSeries, response: ResponseSeries,
             fold: FoldSpec, seed: int, ctx: FoldContext | None = None) -> CellResult:
    """Execute one (method, fold, seed) pipeline cell."""
    out = CellResult(method=spec.label, family=spec.family, R=spec.R,
                     fold_year=fold.test_year, seed=seed)
    t0 = time.perf_counter()
    try:
        if ctx is None:
            ctx = FoldContext(raster, fold)
        # leakage guard: scaling applied to test days must be a training fit
        assert ctx.provenance == day_provenance(fold.train_days)
        y = np.asarray(response.values, dtype=float)
        tr, te = ctx.train_days, ctx.test_days
        y_tr, y_te = y[tr], y[te]
        fam = spec.family

        if fam in ("SR", "SL"):
            kind = "ridge" if fam == "SR" else "lasso"
            X = ctx.X_cells
            plan = CvPlan(spec.cv_splits, default_penalty_grid(X[tr], y_tr, spec.cv_grid_size))
            _, model = select_penalty_cv(X[tr], y_tr, kind, plan)
            pred_tr, pred_te = predict(model, X[tr]), predict(model, X[te])
            docs = [_cell_doc(*ctx.cell_feature_coords(j)) for j in range(X.shape[1])]
            out.artifact = _linear_artifact(fam, model, docs)

        elif fam in ("FR", "FL"):
            kind = "ridge" if fam == "FR" else "lasso"
            fg = build_filter_grid(spec.R, ctx.grid, ctx.n_vars)
            raw = np.column_stack(
                [ctx.agg_series(f.circle, f.variable) for f in fg.features]
            )
            X = standardize_columns(raw, tr)
            plan = CvPlan(spec.cv_splits, default_penalty_grid(X[tr], y_tr, spec.cv_grid_size))
            _, model = select_penalty_cv(X[tr], y_tr, kind, plan)
            pred_tr, pred_te = predict(model, X[tr]), predict(model, X[te])
            docs = [_circle_doc(f.variable, f.circle) for f in fg.features]
            out.artifact = _linear_artifact(fam, model, docs)

        elif fam in ("WR", "WL"):
            kind = "ridge" if fam == "WR" else "lasso"
            restarts = [_seed_for(seed, r) for r in range(spec.wrapper.restarts)]
            res = multi_restart(kind, spec.R, ctx, y, restarts, spec.wrapper)
            raw = np.column_stack([ctx.agg_series(c, v) for v, c in res.circles])
            X = standardize_columns(raw, tr)
            model = res.model
            pred_tr, pred_te = predict(model, X[tr]), predict(model, X[te])
            docs = [_circle_doc(v, c) for v, c in res.circles]
            out.artifact = _linear_artifact(fam, model, docs)

        elif fam in ("SGP", "FGP", "GPESA"):
            if fam == "SGP":
                gctx = MatrixContext(ctx.X_cells)
                tset = FeatureTerminalSet(gctx.n_features)
                describe = lambda t: _cell_doc(*ctx.cell_feature_coords(t.index))
            elif fam == "FGP":
                fg = build_filter_grid(spec.R, ctx.grid, ctx.n_vars)
                raw = np.column_stack(
                    [ctx.agg_series(f.circle, f.variable) for f in fg.features]
                )
                gctx = MatrixContext(standardize_columns(raw, tr))
                tset = FeatureTerminalSet(len(fg.features))
                describe = lambda t: _circle_doc(
                    fg.features[t.index].variable, fg.features[t.index].circle
                )
            else:
                gctx = ctx
                tset = SpatialTerminalSet(ctx.grid, ctx.n_vars,
                                          const_prob=spec.gp.spatial_const_prob)
                describe = lambda t: _circle_doc(t.variable, t.circle)
            res = run_evolution(gctx, tr, y_tr, tset, spec.gp, seed)
            pred_tr = res.model.predict(gctx, tr)
            pred_te = res.model.predict(gctx, te)
            out.artifact = _gp_artifact(fam, res, describe)
        else:  # pragma: no cover - guarded by MethodSpec
            raise InvalidInputError(f"unknown family {fam!r}")

        out.train_err = mae(pred_tr, y_tr)
        out.test_mae = mae(pred_te, y_te)
        out.predictions = np.asarray(pred_te)
        out.actuals = y_te
    except Exception as exc:  # recorded per cell, never swallowed silently
        out.error = f"{type(exc).__name__}: {exc}"
    out.seconds = time.perf_counter() - t0
    return out


def _run_cell_star(args):
    spec, raster, response, fold, seed = args
    return run_cell(spec, raster, response, fold, seed)


def run_experiment(specs, raster: RasterSeries, response: ResponseSeries,
                   folds, seeds, jobs: int = 1) -> list[CellResult]:
    """Run every (method, fold, seed) cell; results in deterministic order."""
    tasks = [(spec, fold, seed) for spec in specs for fold in folds for seed in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(
                pool.map(_run_cell_star,
                         [(s, raster, response, f, sd) for s, f, sd in tasks])
            )
    else:
        results = []
        for fold in folds:
            ctx = FoldContext(raster, fold)
            for spec in specs:
                for seed in seeds:
                    results.append(run_cell(spec, raster, response, fold, seed, ctx=ctx))
        order = {(s.label, f.test_year, sd): i
                 for i, (s, f, sd) in enumerate(tasks)}
        results.sort(key=lambda c: order[(c.method, c.fold_year, c.seed)])
    return results


# ---------------------------------------------------------------------------
# statistics

def _midranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=float)
    sx = x[order]
    i = 0
    while i < len(sx):
        j = i
        while j + 1 < len(sx) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def wilcoxon_signed_rank(a, b, exact_threshold: int = 25) -> float:
    """Two-sided Wilcoxon signed rank p-value for paired samples.

    Zero differences are dropped; tied absolute differences take
    midranks. The exact null distribution (all sign assignments of the
    observed ranks) is used for n <= exact_threshold, else a normal
    approximation with tie correction.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise InvalidInputError("paired samples must have equal length")
    d = a - b
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise UndefinedTestError("all paired differences are zero")
    ranks = _midranks(np.abs(d))
    w_pos = float(ranks[d > 0].sum())
    if n <= exact_threshold:
        # dynamic program over doubled ranks (midranks are multiples of 1/2)
        r2 = np.rint(2.0 * ranks).astype(np.int64)
        total = int(r2.sum())
        counts = np.zeros(total + 1)
        counts[0] = 1.0
        for r in r2:
            upd = counts.copy()
            upd[r:] += counts[: total + 1 - r]
            counts = upd
        denom = 2.0**n
        w2 = int(round(2.0 * w_pos))
        p_le = counts[: w2 + 1].sum() / denom
        p_ge = counts[w2:].sum() / denom
        return float(min(1.0, 2.0 * min(p_le, p_ge)))
    mu = n * (n + 1) / 4.0
    ties = np.unique(np.abs(d), return_counts=True)[1]
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(ties**3 - ties)) / 48.0
    z = (w_pos - mu) / math.sqrt(var)
    return float(min(1.0, math.erfc(abs(z) / math.sqrt(2.0))))


def bonferroni(p_values, m: int) -> np.ndarray:
    """Multiply each p-value by m, capped at 1."""
    p = np.asarray(p_values, dtype=float)
    if m < len(p):
        raise InvalidInputError("correction factor m must cover all tests")
    return np.minimum(1.0, p * m)


def yearly_comparison(cells: list[CellResult], method_a: str, method_b: str):
    """Per-year Wilcoxon tests of per-day absolute errors, a vs b.

    Within each year the paired unit is the per-day absolute error,
    taken as the median across seeds for each method. Returns rows
    (year, p_raw, p_bonferroni, winner) with Bonferroni m = #years.
    """
    years = sorted({c.fold_year for c in cells if c.error is None})
    by_key: dict = {}
    for c in cells:
        if c.error is None and c.method in (method_a, method_b):
            by_key.setdefault((c.method, c.fold_year), []).append(c)
    missing = [
        (m, y) for m in (method_a, method_b) for y in years if (m, y) not in by_key
    ]
    if missing or not years:
        raise MissingCellError(f"missing (method, year) cells: {missing or 'all'}")

    rows = []
    raw_ps = []
    med_err = {}
    for y in years:
        for m in (method_a, method_b):
            errs = np.median(
                np.stack([np.abs(c.predictions - c.actuals) for c in by_key[(m, y)]]),
                axis=0,
            )
            med_err[(m, y)] = errs
        raw_ps.append(wilcoxon_signed_rank(med_err[(method_a, y)], med_err[(method_b, y)]))
    adj = bonferroni(raw_ps, len(years))
    for y, p_raw, p_adj in zip(years, raw_ps, adj):
        if p_adj < 0.05:
            a_med = float(np.median(med_err[(method_a, y)]))
            b_med = float(np.median(med_err[(method_b, y)]))
            winner = method_a if a_med < b_med else method_b
        else:
            winner = "none"
        rows.append({"year": y, "p_raw": float(p_raw), "p_bonferroni": float(p_adj),
                     "winner": winner})
    return rows


# ---------------------------------------------------------------------------
# importance maps

@dataclass(frozen=True)
class ImportanceMap:
    """Per-cell importance, one layer per variable; `used` flags coverage."""

    values: np.ndarray  # (n_vars, rows, cols)
    used: np.ndarray  # bool, same shape


def importance_linear(models, features, grid) -> ImportanceMap:
    """Mean |coefficient| over (model, feature) pairs covering each cell.

    `features` are fit AggFeatures (with masks) shared by all models;
    model coefficients are aligned with the feature list.
    """
    n_vars = max(f.variable for f in features) + 1 if features else 1
    total = np.zeros((n_vars, grid.rows, grid.cols))
    count = np.zeros((n_vars, grid.rows, grid.cols))
    for model in models:
        if len(model.coefficients) != len(features):
            raise InvalidInputError("model coefficients not aligned with features")
        for coef, feat in zip(model.coefficients, features):
            mask = feat.mask if feat.mask is not None else circle_members(feat.circle, grid)
            total[feat.variable, mask.rows, mask.cols] += abs(float(coef))
            count[feat.variable, mask.rows, mask.cols] += 1.0
    used = count > 0
    values = np.where(used, total / np.where(used, count, 1.0), 0.0)
    return ImportanceMap(values=values, used=used)


def importance_gp(front_entries, grid, n_vars: int) -> ImportanceMap:
    """Mean (1 - f_COR) over nondominated trees covering each cell.

    `front_entries` is a list of (error, masks) pairs where masks is a
    list of (variable, MembershipMask) for the tree's terminals.
    """
    total = np.zeros((n_vars, grid.rows, grid.cols))
    count = np.zeros((n_vars, grid.rows, grid.cols))
    for error, masks in front_entries:
        weight = 1.0 - float(error)
        covered = np.zeros((n_vars, grid.rows, grid.cols), dtype=bool)
        for var, mask in masks:
            covered[var, mask.rows, mask.cols] = True
        total[covered] += weight
        count[covered] += 1.0
    used = count > 0
    values = np.where(used, total / np.where(used, count, 1.0), 0.0)
    return ImportanceMap(values=values, used=used)


def masks_from_artifact_terms(terms, grid, index: MembershipIndex | None = None):
    """Materialize membership masks for serialized feature descriptors."""
    out = []
    for doc in terms:
        if doc["type"] == "cell":
            mask = MembershipMask(np.array([[doc["row"], doc["col"]]], dtype=np.int64))
            out.append((doc["var"], mask))
        elif doc["type"] == "circle":
            circle = Circle(doc["lat"], doc["lon"], doc["radius_km"])
            mask = index.members(circle) if index else circle_members(circle, grid)
            out.append((doc["var"], mask))
        else:
            raise InvalidInputError(f"unknown feature descriptor {doc['type']!r}")
    return out


def importance_from_artifacts(artifacts, grid, n_vars: int) -> ImportanceMap:
    """Importance map from stored model artifacts of a single method."""
    if not artifacts:
        raise InvalidInputError("no artifacts to summarize")
    kinds = {a["kind"] for a in artifacts}
    if len(kinds) != 1:
        raise InvalidInputError("mixed artifact kinds")
    index = MembershipIndex(grid)
    if kinds == {"linear"}:
        maps = []
        for art in artifacts:
            feats = masks_from_artifact_terms(art["features"], grid, index)
            total = np.zeros((n_vars, grid.rows, grid.cols))
            count = np.zeros((n_vars, grid.rows, grid.cols))
            for coef, (var, mask) in zip(art["coefficients"], feats):
                total[var, mask.rows, mask.cols] += abs(float(coef))
                count[var, mask.rows, mask.cols] += 1.0
            maps.append((total, count))
        total = sum(m[0] for m in maps)
        count = sum(m[1] for m in maps)
        used = count > 0
        values = np.where(used, total / np.where(used, count, 1.0), 0.0)
        return ImportanceMap(values=values, used=used)
    entries = []
    for art in artifacts:
        for ind in art["front"]:
            entries.append(
                (ind["error"], masks_from_artifact_terms(ind["terms"], grid, index))
            )
    return importance_gp(entries, grid, n_vars)


# ---------------------------------------------------------------------------
# evaluation-cost benchmark

def benchmark_overhead(raster: RasterSeries, fold: FoldSpec, n_trees: int = 40,
                       seed: int = 0, tree_height: int = 4) -> dict:
    """Per-evaluation wall-clock of GPESA vs plain feature-terminal GP.

    Measures mean tree-evaluation time for random trees under three
    regimes: feature-matrix terminals (the plain-GP baseline), circle
    terminals resolved through the spatial index, and circle terminals
    resolved by a naive cell-by-cell scan. Caching is disabled so each
    evaluation pays its aggregation cost.
    """
    ctx = FoldContext(raster, fold, cache=False)
    naive_ctx = FoldContext(raster, fold, cache=False, naive_membership=True)
    rng = np.random.default_rng(seed)
    feat_tset = FeatureTerminalSet(ctx.X_cells.shape[1])
    spat_tset = SpatialTerminalSet(ctx.grid, ctx.n_vars)
    cfg = GpConfig()
    feat_trees = [random_tree(rng, feat_tset, tree_height, "full") for _ in range(n_trees)]
    spat_trees = [random_tree(rng, spat_tset, tree_height, "full") for _ in range(n_trees)]
    days = fold.train_days

    def clock(trees, context):
        t0 = time.perf_counter()
        for t in trees:
            eval_tree(t, context, days)
        return (time.perf_counter() - t0) / len(trees)

    mctx = MatrixContext(ctx.X_cells)
    sgp = clock(feat_trees, mctx)
    indexed = clock(spat_trees, ctx)
    naive = clock(spat_trees, naive_ctx)
    return {
        "sgp_per_eval": sgp,
        "gpesa_indexed_per_eval": indexed,
        "gpesa_naive_per_eval": naive,
        "ratio_indexed": indexed / sgp,
        "ratio_naive": naive / sgp,
    }
