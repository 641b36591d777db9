import math
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest

from gevr.errors import InvalidInputError
from gevr.gp import (
    BINARY_OPS,
    UNARY_OPS,
    AggTerminal,
    ConstTerminal,
    FeatureRef,
    FeatureTerminalSet,
    GpConfig,
    GpIndividual,
    MatrixContext,
    Node,
    SpatialTerminalSet,
    afpo_step,
    copy_tree,
    crossover,
    eval_tree,
    evaluate_error,
    f_cor,
    gpesa_greedy_tune,
    init_population,
    iter_agg_leaves,
    iter_nodes,
    leaf,
    node_count,
    ols_rescale,
    pareto_front,
    parse_sexpr,
    random_tree,
    run_evolution,
    subtree_mutate,
    to_sexpr,
    tree_height,
)
from gevr.raster import GeoGrid
from gevr.spatial import Circle

GRID = GeoGrid(16, 16, 30.0, 70.0, 0.3, 0.35)

SMALL_CFG = GpConfig(population_size=20, generations=3, n_runs=1)


def oracle_eval(node, row):
    """Independent scalar interpreter with the same protection rules."""
    if node.is_leaf:
        t = node.terminal
        if isinstance(t, ConstTerminal):
            return t.value
        return row[t.index]
    if node.op in UNARY_OPS:
        x = oracle_eval(node.children[0], row)
        if node.op == "sin":
            return math.sin(x)
        if node.op == "cos":
            return math.cos(x)
        if node.op == "log":
            return 0.0 if abs(x) < 1e-12 else math.log(abs(x))
        return math.exp(min(x, 32.0))
    a = oracle_eval(node.children[0], row)
    b = oracle_eval(node.children[1], row)
    if node.op == "add":
        out = a + b
    elif node.op == "sub":
        out = a - b
    elif node.op == "mul":
        out = a * b
    else:
        out = 1.0 if abs(b) < 1e-12 else a / b
    return min(max(out, -1e300), 1e300)


class TestEvaluation:
    def test_sum_of_features(self):
        tree = Node(op="add", children=[leaf(FeatureRef(0)), leaf(FeatureRef(1))])
        ctx = MatrixContext(np.array([[1.0, 2.0]]))
        assert eval_tree(tree, ctx, [0])[0] == 3.0

    def test_protected_division(self):
        tree = Node(op="div", children=[leaf(FeatureRef(0)), leaf(FeatureRef(1))])
        ctx = MatrixContext(np.array([[5.0, 0.0]]))
        assert eval_tree(tree, ctx, [0])[0] == 1.0

    def test_protected_log_near_zero(self):
        tree = Node(op="log", children=[leaf(ConstTerminal(1e-15))])
        ctx = MatrixContext(np.zeros((1, 1)))
        assert eval_tree(tree, ctx, [0])[0] == 0.0

    def test_exp_capped(self):
        tree = Node(op="exp", children=[leaf(ConstTerminal(1000.0))])
        ctx = MatrixContext(np.zeros((1, 1)))
        assert eval_tree(tree, ctx, [0])[0] == math.exp(32.0)

    def test_random_trees_match_oracle(self, rng):
        X = rng.standard_normal((20, 4))
        ctx = MatrixContext(X)
        tset = FeatureTerminalSet(4)
        for _ in range(30):
            tree = random_tree(rng, tset, 5, "grow")
            got = eval_tree(tree, ctx, np.arange(20))
            want = np.array([oracle_eval(tree, X[d]) for d in range(20)])
            np.testing.assert_allclose(got, want, atol=1e-12, rtol=1e-12)

    def test_always_finite(self, rng):
        # long chains of exp/mul stress the magnitude caps
        X = rng.standard_normal((10, 3)) * 50
        ctx = MatrixContext(X)
        tset = FeatureTerminalSet(3, const_range=(-100.0, 100.0))
        for _ in range(200):
            tree = random_tree(rng, tset, 8, "grow")
            assert np.all(np.isfinite(eval_tree(tree, ctx, np.arange(10))))


class TestSexpr:
    def test_round_trip(self, rng):
        tset = SpatialTerminalSet(GRID, 3)
        X = rng.standard_normal((5, 1))
        for _ in range(30):
            tree = random_tree(rng, tset, 4, "grow")
            again = parse_sexpr(to_sexpr(tree))
            assert to_sexpr(again) == to_sexpr(tree)

    def test_agg_terminal_exact(self):
        tree = leaf(AggTerminal(Circle(31.5, 72.25, 140.0), 2))
        again = parse_sexpr(to_sexpr(tree))
        assert again.terminal == tree.terminal

    def test_malformed(self):
        with pytest.raises(InvalidInputError):
            parse_sexpr("(+ x0)")
        with pytest.raises(InvalidInputError):
            parse_sexpr("(frobnicate x0 x1)")
        with pytest.raises(InvalidInputError):
            parse_sexpr("x0 x1")


class TestFCor:
    def test_affine_invariance(self, rng):
        y = rng.standard_normal(50)
        assert f_cor(2.0 * y + 7.0, y) == pytest.approx(0.0, abs=1e-12)

    def test_sign_invariance(self, rng):
        y = rng.standard_normal(50)
        assert f_cor(-y, y) == pytest.approx(0.0, abs=1e-12)

    def test_hand_value(self):
        assert f_cor([1.0, 2.0, 2.0], [1.0, 1.0, 2.0]) == pytest.approx(0.5)

    def test_constant_prediction_scores_worst(self):
        assert f_cor([3.0, 3.0, 3.0], [1.0, 2.0, 3.0]) == 1.0

    def test_range(self, rng):
        for _ in range(100):
            a, b = rng.standard_normal(20), rng.standard_normal(20)
            assert 0.0 <= f_cor(a, b) <= 1.0


class TestInitPopulation:
    def test_ramped_buckets(self, rng):
        cfg = GpConfig(population_size=1000)
        pop = init_population(1000, rng, FeatureTerminalSet(5), cfg)
        assert len(pop) == 1000
        counts = Counter()
        for ind in pop:
            assert ind.age == 1
            assert ind.height <= 6
            counts[ind.height] += 1
        # 10 (method, height) buckets of 100; height h holds the full-method
        # trees of height h plus grow trees of height <= h
        assert sum(counts.values()) == 1000

    def test_full_method_all_leaves_at_depth(self, rng):
        tset = FeatureTerminalSet(3)
        for h in (2, 4, 6):
            tree = random_tree(rng, tset, h, "full")

            def leaf_depths(node, d=0):
                if node.is_leaf:
                    yield d
                for c in node.children:
                    yield from leaf_depths(c, d + 1)

            assert set(leaf_depths(tree)) == {h}

    def test_bucket_sizes_differ_by_at_most_one(self, rng):
        # 17 does not divide evenly into 10 buckets
        cfg = GpConfig(population_size=17)
        pop = init_population(17, rng, FeatureTerminalSet(2), cfg)
        assert len(pop) == 17


class TestVariation:
    def _pop(self, rng, n=10):
        tset = FeatureTerminalSet(4)
        pop = init_population(n, rng, tset, SMALL_CFG)
        return pop, tset

    def test_crossover_respects_limits(self, rng):
        # parents within limits -> offspring within limits (violators are
        # replaced by a first-parent copy)
        cfg = replace(SMALL_CFG, init_height_min=2, init_height_max=3,
                      max_height=3, max_size=15)
        tset = FeatureTerminalSet(4)
        pop = init_population(10, rng, tset, cfg)
        for _ in range(200):
            a, b = pop[rng.integers(len(pop))], pop[rng.integers(len(pop))]
            child = crossover(a, b, rng, cfg)
            assert child.height <= 3 and child.size <= 15

    def test_crossover_age_is_max(self, rng):
        pop, tset = self._pop(rng)
        a, b = pop[0], pop[1]
        a.age, b.age = 3, 7
        for _ in range(20):
            assert crossover(a, b, rng, SMALL_CFG).age == 7

    def test_mutation_respects_limits(self, rng):
        cfg = replace(SMALL_CFG, init_height_min=2, init_height_max=3,
                      max_height=3, max_size=15, mutation_subtree_height=3)
        tset = FeatureTerminalSet(4)
        pop = init_population(10, rng, tset, cfg)
        for ind in pop * 20:
            child = subtree_mutate(ind, rng, tset, cfg)
            assert child.height <= 3 and child.size <= 15

    def test_offspring_material_comes_from_parents_or_fresh(self, rng):
        # crossover-only offspring contain no terminals outside the parents
        pop, tset = self._pop(rng)
        def terminals(t):
            return Counter(
                n.terminal for n, _, _ in iter_nodes(t) if n.is_leaf
            )
        for _ in range(100):
            a, b = pop[rng.integers(len(pop))], pop[rng.integers(len(pop))]
            child = crossover(a, b, rng, SMALL_CFG)
            allowed = terminals(a.tree) + terminals(b.tree)
            for term, cnt in terminals(child.tree).items():
                assert cnt <= allowed[term]


def _ind(age, error, size):
    ind = GpIndividual(tree=leaf(ConstTerminal(0.0)), age=age, error=error, size=size)
    return ind


class TestParetoFront:
    def test_simple_domination(self):
        front = pareto_front([_ind(1, 0.2, 5), _ind(3, 0.4, 9)])
        assert len(front) == 1
        assert front[0].age == 1

    def test_ties_both_survive(self):
        front = pareto_front([_ind(2, 0.3, 7), _ind(2, 0.3, 7)])
        assert len(front) == 2

    def test_matches_pairwise_oracle(self, rng):
        pop = [
            _ind(int(rng.integers(1, 10)), float(rng.random()), int(rng.integers(1, 50)))
            for _ in range(50)
        ]

        def dominated(i):
            oi = (pop[i].age, pop[i].error, pop[i].size)
            for j in range(len(pop)):
                if j == i:
                    continue
                oj = (pop[j].age, pop[j].error, pop[j].size)
                if all(a <= b for a, b in zip(oj, oi)) and any(
                    a < b for a, b in zip(oj, oi)
                ):
                    return True
            return False

        expect = [pop[i] for i in range(len(pop)) if not dominated(i)]
        assert pareto_front(pop) == expect


class TestAfpoStep:
    def _setup(self, rng, n=20):
        X = rng.standard_normal((30, 3))
        y = rng.standard_normal(30)
        ctx = MatrixContext(X)
        tset = FeatureTerminalSet(3)
        cfg = replace(SMALL_CFG, population_size=n)
        pop = init_population(n, rng, tset, cfg)
        for ind in pop:
            evaluate_error(ind, ctx, np.arange(30), y)
        return pop, cfg, tset, ctx, y

    def test_population_size_constant(self, rng):
        pop, cfg, tset, ctx, y = self._setup(rng)
        for _ in range(5):
            pop = afpo_step(pop, rng, cfg, tset, ctx, np.arange(30), y)
            assert len(pop) == cfg.population_size

    def test_identical_population_rookie_survives(self, rng):
        pop, cfg, tset, ctx, y = self._setup(rng)
        clone = pop[0]
        pop = [
            GpIndividual.wrap(copy_tree(clone.tree), age=clone.age)
            for _ in range(cfg.population_size)
        ]
        for ind in pop:
            evaluate_error(ind, ctx, np.arange(30), y)
        cfg2 = replace(cfg, p_crossover=0.0, p_mutation=0.0)
        out = afpo_step(pop, rng, cfg2, tset, ctx, np.arange(30), y)
        assert min(ind.age for ind in out) == 1  # the injected rookie

    def test_closed_system_without_variation(self, rng):
        # without crossover/mutation every survivor is an aged parent, a
        # copy of one, or the single injected rookie
        pop, cfg, tset, ctx, y = self._setup(rng)
        cfg2 = replace(cfg, p_crossover=0.0, p_mutation=0.0)
        parent_trees = {to_sexpr(i.tree) for i in pop}
        out = afpo_step(pop, rng, cfg2, tset, ctx, np.arange(30), y)
        rookies = [i for i in out if to_sexpr(i.tree) not in parent_trees]
        assert len(rookies) <= 1
        for r in rookies:
            assert r.age == 1


class TestGpesaTune:
    def _spatial_setup(self, seed=0):
        rng = np.random.default_rng(seed)

        class _Ctx:
            def __init__(self, series_map):
                self.series_map = series_map

            def series(self, terminal):
                key = (
                    terminal.variable,
                    round(terminal.circle.lat, 6),
                    round(terminal.circle.lon, 6),
                )
                if key in self.series_map:
                    return self.series_map[key]
                return self.series_map["default"]

        return rng, _Ctx

    def test_no_agg_terminals_unchanged(self, rng):
        X = np.random.default_rng(0).standard_normal((20, 2))
        ctx = MatrixContext(X)
        tree = Node(op="add", children=[leaf(FeatureRef(0)), leaf(FeatureRef(1))])
        ind = GpIndividual.wrap(tree, age=1)
        before = to_sexpr(ind.tree)
        out = gpesa_greedy_tune(ind, ctx, np.arange(20), X[:, 0], rng, SMALL_CFG, GRID)
        assert to_sexpr(out.tree) == before

    def test_forced_rejections_leave_terminal_bit_identical(self, small_dataset):
        # the initial terminal matches the response perfectly, so every
        # bootstrap score is already 0 and no mutation can be accepted
        from gevr.evaluate import FoldContext
        from gevr.raster import make_folds

        raster, _, _ = small_dataset
        fold = make_folds(raster.day_year)[0]
        ctx = FoldContext(raster, fold)
        circle = Circle(float(GRID.lat_of(8)), float(GRID.lon_of(8)), 120.0)
        y = ctx.agg_series(circle, 0)[ctx.train_days]
        tree = leaf(AggTerminal(circle, 0))
        ind = GpIndividual.wrap(tree, age=1)
        cfg = replace(SMALL_CFG, tune_iterations=1000)
        rng = np.random.default_rng(5)
        out = gpesa_greedy_tune(ind, ctx, ctx.train_days, y, rng, cfg, raster.grid)
        term = next(iter_agg_leaves(out.tree)).terminal
        assert term.circle == circle and term.variable == 0
        assert out.error == pytest.approx(0.0, abs=1e-12)

    def test_accepted_deltas_negative(self, small_dataset):
        from gevr.evaluate import FoldContext
        from gevr.raster import make_folds

        raster, resp, _ = small_dataset
        fold = make_folds(raster.day_year)[0]
        ctx = FoldContext(raster, fold)
        y = np.asarray(resp.values)[ctx.train_days]
        deltas = []
        rng = np.random.default_rng(3)
        for s in range(5):
            tree = leaf(AggTerminal(Circle(32.0, 72.0, 300.0), s % 3))
            ind = GpIndividual.wrap(tree, age=1)
            cfg = replace(SMALL_CFG, tune_iterations=50)
            gpesa_greedy_tune(ind, ctx, ctx.train_days, y, rng, cfg, raster.grid,
                              accepted_deltas=deltas)
        assert deltas, "expected at least one accepted tuning step"
        assert all(d < 0 for d in deltas)

    def test_planted_circle_recovery(self, small_dataset):
        """Greedy tuning pulls a nearby circle onto the planted center."""
        from gevr.evaluate import FoldContext
        from gevr.raster import make_folds
        from gevr.spatial import haversine_km

        raster, _, truth = small_dataset
        fold = make_folds(raster.day_year)[0]
        ctx = FoldContext(raster, fold)
        target = truth.circles[0]
        y = ctx.agg_series(target, 0)[ctx.train_days]
        cell_km = max(
            haversine_km(30.0, 70.0, 30.3, 70.0), haversine_km(30.0, 70.0, 30.0, 70.35)
        )
        hits = 0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            start = Circle(target.lat + 3 * 0.3, target.lon - 3 * 0.35, target.radius_km)
            ind = GpIndividual.wrap(leaf(AggTerminal(start, 0)), age=1)
            cfg = replace(SMALL_CFG, tune_iterations=600)
            out = gpesa_greedy_tune(ind, ctx, ctx.train_days, y, rng, cfg, raster.grid)
            got = next(iter_agg_leaves(out.tree)).terminal.circle
            if haversine_km(got.lat, got.lon, target.lat, target.lon) <= 2 * cell_km:
                hits += 1
        assert hits >= 16


class TestOlsRescale:
    def test_half_scale(self, rng):
        y = rng.standard_normal(40)
        ctx = MatrixContext((y / 2.0)[:, None])
        model = ols_rescale(leaf(FeatureRef(0)), ctx, np.arange(40), y)
        assert model.a == pytest.approx(0.0, abs=1e-12)
        assert model.b == pytest.approx(2.0, abs=1e-12)
        np.testing.assert_allclose(model.predict(ctx, np.arange(40)), y, atol=1e-12)

    def test_constant_output(self, rng):
        y = rng.standard_normal(20)
        ctx = MatrixContext(np.ones((20, 1)))
        model = ols_rescale(leaf(ConstTerminal(5.0)), ctx, np.arange(20), y)
        np.testing.assert_allclose(model.predict(ctx, np.arange(20)), y.mean())

    def test_grid_search_lower_bound(self, rng):
        X = rng.standard_normal((50, 2))
        y = rng.standard_normal(50)
        ctx = MatrixContext(X)
        tree = Node(op="mul", children=[leaf(FeatureRef(0)), leaf(FeatureRef(1))])
        model = ols_rescale(tree, ctx, np.arange(50), y)
        out = eval_tree(tree, ctx, np.arange(50))
        best_mse = np.mean((model.a + model.b * out - y) ** 2)
        for a in np.linspace(-2, 2, 10):
            for b in np.linspace(-2, 2, 10):
                assert best_mse <= np.mean((a + b * out - y) ** 2) + 1e-12


class TestRunEvolution:
    def test_smoke(self, rng):
        X = np.random.default_rng(1).standard_normal((30, 3))
        y = X[:, 0] * X[:, 1]
        ctx = MatrixContext(X)
        cfg = GpConfig(population_size=10, generations=1, n_runs=1)
        res = run_evolution(ctx, np.arange(30), y, FeatureTerminalSet(3), cfg, seed=0)
        assert np.isfinite(res.model.a) and np.isfinite(res.model.b)
        assert 0.0 <= res.best_error <= 1.0
        assert len(res.front) >= 1

    def test_paper_shape_defaults(self):
        cfg = GpConfig()
        assert cfg.population_size == 1000
        assert cfg.generations == 1000
        assert cfg.n_runs == 30
        assert cfg.p_crossover == 0.75
        assert cfg.max_height == 17
        assert cfg.max_size == 300

    def test_determinism(self):
        X = np.random.default_rng(2).standard_normal((30, 3))
        y = X[:, 0] + 0.5 * X[:, 2]
        ctx = MatrixContext(X)
        cfg = GpConfig(population_size=15, generations=5, n_runs=2)
        a = run_evolution(ctx, np.arange(30), y, FeatureTerminalSet(3), cfg, seed=42)
        b = run_evolution(ctx, np.arange(30), y, FeatureTerminalSet(3), cfg, seed=42)
        assert to_sexpr(a.model.tree) == to_sexpr(b.model.tree)
        assert (a.model.a, a.model.b) == (b.model.a, b.model.b)
