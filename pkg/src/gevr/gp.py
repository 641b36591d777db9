"""Expression-tree GP with three-objective (age, error, size) Pareto search.

Trees combine unary {sin, cos, log, exp} and binary {*, +, -, /}
operators over terminals that are either indices into a fixed feature
matrix, embedded circle aggregations (lat, lon, radius, variable), or
ephemeral constants. Fitness is 1 - |Pearson correlation| on training
days, minimized; a post-hoc affine rescale maps the selected tree onto
the response scale.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidInputError
from .raster import GeoGrid
from .spatial import Circle, mutate_circle, random_circle

UNARY_OPS = ("sin", "cos", "log", "exp")
BINARY_OPS = ("mul", "add", "sub", "div")
_OP_SYMBOL = {"mul": "*", "add": "+", "sub": "-", "div": "/"}
_SYMBOL_OP = {v: k for k, v in _OP_SYMBOL.items()}

_EPS = 1e-12
_EXP_CAP = 32.0
_VAL_CAP = 1e300


# ---------------------------------------------------------------------------
# terminals and nodes

@dataclass(frozen=True)
class FeatureRef:
    index: int


@dataclass(frozen=True)
class ConstTerminal:
    value: float


@dataclass(frozen=True)
class AggTerminal:
    circle: Circle
    variable: int


class Node:
    __slots__ = ("op", "children", "terminal")

    def __init__(self, op=None, children=None, terminal=None):
        self.op = op
        self.children = children or []
        self.terminal = terminal

    @property
    def is_leaf(self):
        return self.terminal is not None


def leaf(terminal) -> Node:
    return Node(terminal=terminal)


def copy_tree(node: Node) -> Node:
    if node.is_leaf:
        return Node(terminal=node.terminal)
    return Node(op=node.op, children=[copy_tree(c) for c in node.children])


def node_count(node: Node) -> int:
    total = 1
    stack = list(node.children)
    while stack:
        n = stack.pop()
        total += 1
        stack.extend(n.children)
    return total


def tree_height(node: Node) -> int:
    """Longest root-to-leaf path in edges (a single leaf has height 0)."""
    if node.is_leaf:
        return 0
    return 1 + max(tree_height(c) for c in node.children)


def iter_nodes(node: Node):
    """Yield (node, parent, child_index); root has parent None."""
    stack = [(node, None, 0)]
    while stack:
        n, parent, idx = stack.pop()
        yield n, parent, idx
        for i, c in enumerate(n.children):
            stack.append((c, n, i))


def iter_agg_leaves(node: Node):
    for n, _, _ in iter_nodes(node):
        if n.is_leaf and isinstance(n.terminal, AggTerminal):
            yield n


# ---------------------------------------------------------------------------
# s-expression serialization

def to_sexpr(node: Node) -> str:
    if node.is_leaf:
        t = node.terminal
        if isinstance(t, FeatureRef):
            return f"x{t.index}"
        if isinstance(t, ConstTerminal):
            return repr(t.value)
        return f"(agg {t.variable} {t.circle.lat!r} {t.circle.lon!r} {t.circle.radius_km!r})"
    sym = _OP_SYMBOL.get(node.op, node.op)
    return "(" + " ".join([sym] + [to_sexpr(c) for c in node.children]) + ")"


def parse_sexpr(text: str) -> Node:
    tokens = text.replace("(", " ( ").replace(")", " ) ").split()
    pos = 0

    def parse():
        nonlocal pos
        tok = tokens[pos]
        pos += 1
        if tok == "(":
            head = tokens[pos]
            pos += 1
            if head == "agg":
                var, lat, lon, r = tokens[pos : pos + 4]
                pos += 4
                if tokens[pos] != ")":
                    raise InvalidInputError("malformed agg terminal")
                pos += 1
                return leaf(AggTerminal(Circle(float(lat), float(lon), float(r)), int(var)))
            op = _SYMBOL_OP.get(head, head)
            if op not in UNARY_OPS and op not in BINARY_OPS:
                raise InvalidInputError(f"unknown operator {head!r}")
            children = []
            while tokens[pos] != ")":
                children.append(parse())
            pos += 1
            expected = 1 if op in UNARY_OPS else 2
            if len(children) != expected:
                raise InvalidInputError(f"operator {head!r} expects {expected} arguments")
            return Node(op=op, children=children)
        if tok.startswith("x") and tok[1:].isdigit():
            return leaf(FeatureRef(int(tok[1:])))
        return leaf(ConstTerminal(float(tok)))

    root = parse()
    if pos != len(tokens):
        raise InvalidInputError("trailing tokens in s-expression")
    return root


# ---------------------------------------------------------------------------
# protected evaluation

def _apply_unary(op, x):
    if op == "sin":
        return np.sin(x)
    if op == "cos":
        return np.cos(x)
    if op == "log":
        # log(|x|); near-zero arguments map to 0
        ax = np.abs(x)
        return np.where(ax < _EPS, 0.0, np.log(np.where(ax < _EPS, 1.0, ax)))
    if op == "exp":
        return np.exp(np.minimum(x, _EXP_CAP))
    raise InvalidInputError(f"unknown unary op {op!r}")


def _apply_binary(op, x, y):
    if op == "add":
        out = x + y
    elif op == "sub":
        out = x - y
    elif op == "mul":
        out = x * y
    elif op == "div":
        ay = np.abs(y)
        out = np.where(ay < _EPS, 1.0, x / np.where(ay < _EPS, 1.0, y))
    else:
        raise InvalidInputError(f"unknown binary op {op!r}")
    # cap magnitudes so long operator chains stay finite
    return np.clip(out, -_VAL_CAP, _VAL_CAP)


class MatrixContext:
    """Resolves FeatureRef terminals against a fixed (n_days, p) matrix."""

    def __init__(self, X: np.ndarray):
        self.X = X
        self.n_features = X.shape[1]

    def series(self, terminal):
        if isinstance(terminal, FeatureRef):
            if terminal.index >= self.n_features:
                raise InvalidInputError(f"feature index {terminal.index} out of range")
            return self.X[:, terminal.index]
        raise InvalidInputError(f"cannot resolve terminal {terminal!r}")


def _eval_node(node: Node, ctx, days):
    if node.is_leaf:
        t = node.terminal
        if isinstance(t, ConstTerminal):
            return t.value
        return ctx.series(t)[days]
    if node.op in UNARY_OPS:
        return _apply_unary(node.op, _eval_node(node.children[0], ctx, days))
    a = _eval_node(node.children[0], ctx, days)
    b = _eval_node(node.children[1], ctx, days)
    return _apply_binary(node.op, a, b)


def eval_tree(tree: Node, ctx, days) -> np.ndarray:
    """Evaluate over the given day indices; output is always finite."""
    days = np.asarray(days)
    out = _eval_node(tree, ctx, days)
    if np.ndim(out) == 0:
        out = np.full(len(days), float(out))
    return np.asarray(out, dtype=float)


def f_cor(pred, actual) -> float:
    """1 - |Pearson correlation|; constant series score worst (1.0)."""
    pred = np.asarray(pred, dtype=float)
    actual = np.asarray(actual, dtype=float)
    if len(pred) != len(actual) or len(pred) < 2:
        raise InvalidInputError("f_cor needs two equal-length series of length >= 2")
    sp, sa = pred.std(), actual.std()
    if sp == 0.0 or sa == 0.0 or not np.isfinite(sp):
        return 1.0
    phi = float(np.mean((pred - pred.mean()) * (actual - actual.mean())) / (sp * sa))
    return float(min(1.0, max(0.0, 1.0 - abs(phi))))


# ---------------------------------------------------------------------------
# individuals, configuration

@dataclass
class GpIndividual:
    tree: Node
    age: int
    error: float | None = None
    size: int = 0
    height: int = 0

    @staticmethod
    def wrap(tree: Node, age: int) -> "GpIndividual":
        return GpIndividual(tree=tree, age=age, size=node_count(tree), height=tree_height(tree))


@dataclass(frozen=True)
class GpConfig:
    """Evolution parameters. Defaults follow the full experiment shape
    (population 1000, 1000 generations, 30 runs); desk-scale callers
    pass smaller values."""

    population_size: int = 1000
    generations: int = 1000
    n_runs: int = 30
    p_crossover: float = 0.75
    p_mutation: float = 0.01
    init_height_min: int = 2
    init_height_max: int = 6
    max_height: int = 17
    max_size: int = 300
    mutation_subtree_height: int = 4
    gpesa_trigger_prob: float = 0.2
    gpesa_trigger_scope: str = "population"  # or "individual"
    tune_iterations: int = 25
    bootstrap_resamples: int = 5
    spatial_const_prob: float = 0.1
    const_low: float = -1.0
    const_high: float = 1.0


class FeatureTerminalSet:
    """Terminals index a fixed feature matrix; constants weigh as one feature."""

    spatial = False

    def __init__(self, n_features: int, const_range=(-1.0, 1.0)):
        if n_features < 1:
            raise InvalidInputError("terminal set must be non-empty")
        self.n_features = n_features
        self.const_range = const_range
        self.const_prob = 1.0 / (n_features + 1)

    def sample(self, rng: np.random.Generator):
        if rng.random() < self.const_prob:
            return ConstTerminal(float(rng.uniform(*self.const_range)))
        return FeatureRef(int(rng.integers(self.n_features)))


class SpatialTerminalSet:
    """Embedded-aggregation terminals: random circle plus variable index."""

    spatial = True

    def __init__(self, grid: GeoGrid, n_vars: int, const_prob=0.1, const_range=(-1.0, 1.0)):
        self.grid = grid
        self.n_vars = n_vars
        self.const_prob = const_prob
        self.const_range = const_range

    def sample(self, rng: np.random.Generator):
        if rng.random() < self.const_prob:
            return ConstTerminal(float(rng.uniform(*self.const_range)))
        return AggTerminal(random_circle(rng, self.grid), int(rng.integers(self.n_vars)))


# ---------------------------------------------------------------------------
# initialization and variation

def random_tree(rng, tset, height: int, method: str) -> Node:
    """`full`: operators down to exactly `height`; `grow`: height <= `height`."""

    def build(depth):
        at_bottom = depth >= height
        if at_bottom or (method == "grow" and depth > 0 and rng.random() < 0.5):
            return leaf(tset.sample(rng))
        ops = UNARY_OPS + BINARY_OPS
        op = ops[int(rng.integers(len(ops)))]
        arity = 1 if op in UNARY_OPS else 2
        return Node(op=op, children=[build(depth + 1) for _ in range(arity)])

    return build(0)


def init_population(size: int, rng, tset, config: GpConfig) -> list[GpIndividual]:
    """Ramped half-and-half over heights init_height_min..init_height_max."""
    heights = list(range(config.init_height_min, config.init_height_max + 1))
    buckets = [(m, h) for h in heights for m in ("full", "grow")]
    base, extra = divmod(size, len(buckets))
    pop = []
    for i, (method, h) in enumerate(buckets):
        count = base + (1 if i < extra else 0)
        for _ in range(count):
            pop.append(GpIndividual.wrap(random_tree(rng, tset, h, method), age=1))
    return pop


def _within_limits(ind: GpIndividual, config: GpConfig) -> bool:
    return ind.height <= config.max_height and ind.size <= config.max_size


def crossover(a: GpIndividual, b: GpIndividual, rng, config: GpConfig) -> GpIndividual:
    """Swap a uniform subtree of `a` for a uniform subtree of `b`.

    Offspring violating the height/size limits are replaced by a copy of
    the first parent; age is the max of the parent ages.
    """
    child_tree = copy_tree(a.tree)
    nodes = list(iter_nodes(child_tree))
    target, parent, idx = nodes[int(rng.integers(len(nodes)))]
    donors = list(iter_nodes(b.tree))
    donor = copy_tree(donors[int(rng.integers(len(donors)))][0])
    if parent is None:
        child_tree = donor
    else:
        parent.children[idx] = donor
    age = max(a.age, b.age)
    child = GpIndividual.wrap(child_tree, age=age)
    if not _within_limits(child, config):
        return GpIndividual.wrap(copy_tree(a.tree), age=age)
    return child


def subtree_mutate(a: GpIndividual, rng, tset, config: GpConfig) -> GpIndividual:
    """Replace a uniform node by a fresh grow subtree."""
    child_tree = copy_tree(a.tree)
    nodes = list(iter_nodes(child_tree))
    target, parent, idx = nodes[int(rng.integers(len(nodes)))]
    sub = random_tree(rng, tset, int(rng.integers(config.mutation_subtree_height + 1)), "grow")
    if parent is None:
        child_tree = sub
    else:
        parent.children[idx] = sub
    child = GpIndividual.wrap(child_tree, age=a.age)
    if not _within_limits(child, config):
        return GpIndividual.wrap(copy_tree(a.tree), age=a.age)
    return child


# ---------------------------------------------------------------------------
# selection

def _objectives(pop) -> np.ndarray:
    return np.array([[ind.age, ind.error, ind.size] for ind in pop], dtype=float)


def _nondominated_mask(obj: np.ndarray) -> np.ndarray:
    # dominated[i] iff some j is <= on all objectives and < on at least one
    le = np.all(obj[:, None, :] >= obj[None, :, :], axis=2)
    lt = np.any(obj[:, None, :] > obj[None, :, :], axis=2)
    return ~np.any(le & lt, axis=1)


def pareto_front(pop: list[GpIndividual]) -> list[GpIndividual]:
    """Individuals not strictly dominated on (age, error, size); ties survive."""
    if not pop:
        raise InvalidInputError("population must be non-empty")
    mask = _nondominated_mask(_objectives(pop))
    return [ind for ind, keep in zip(pop, mask) if keep]


def _select_survivors(pool, size, rng):
    """Iterative nondominated-layer peeling down to `size` survivors.

    The final partial layer is truncated uniformly at random, except
    that the pool's best-error individual (elitism: best training error
    never regresses) and its youngest individual (the freshly injected
    rookie, whose job is diversity) are always retained.
    """
    best_idx = min(range(len(pool)), key=lambda i: (pool[i].error, i))
    young_idx = min(range(len(pool)), key=lambda i: (pool[i].age, i))
    protected = [best_idx] + ([young_idx] if young_idx != best_idx else [])
    remaining = list(range(len(pool)))
    survivors = []
    while len(survivors) < size:
        obj = _objectives([pool[i] for i in remaining])
        layer = [remaining[k] for k in np.flatnonzero(_nondominated_mask(obj))]
        room = size - len(survivors)
        if len(layer) <= room:
            survivors.extend(layer)
        else:
            chosen = list(rng.choice(len(layer), size=room, replace=False))
            picked = [layer[c] for c in chosen]
            must_keep = [i for i in protected if i in layer and i not in picked]
            free_slots = [k for k, i in enumerate(picked) if i not in protected]
            for keep, slot in zip(must_keep, free_slots):
                picked[slot] = keep
            survivors.extend(picked)
        remaining = [i for i in remaining if i not in set(layer)]
    return [pool[i] for i in survivors]


def evaluate_error(ind: GpIndividual, ctx, train_days, y_train) -> None:
    pred = eval_tree(ind.tree, ctx, train_days)
    if not np.all(np.isfinite(pred)):
        raise AssertionError("protected evaluation produced non-finite output")
    ind.error = f_cor(pred, y_train)


def afpo_step(pop, rng, config: GpConfig, tset, ctx, train_days, y_train) -> list[GpIndividual]:
    """One generation: age, vary, inject a rookie, truncate by Pareto layers."""
    if len(pop) != config.population_size:
        raise InvalidInputError("population size does not match configuration")
    for ind in pop:
        ind.age += 1
    offspring = []
    for _ in range(len(pop) - 1):
        if rng.random() < config.p_crossover:
            a = pop[int(rng.integers(len(pop)))]
            b = pop[int(rng.integers(len(pop)))]
            child = crossover(a, b, rng, config)
        else:
            a = pop[int(rng.integers(len(pop)))]
            child = GpIndividual.wrap(copy_tree(a.tree), age=a.age)
        if rng.random() < config.p_mutation:
            child = subtree_mutate(child, rng, tset, config)
        offspring.append(child)
    rookie_height = int(rng.integers(config.init_height_min, config.init_height_max + 1))
    rookie = GpIndividual.wrap(random_tree(rng, tset, rookie_height, "grow"), age=1)
    for child in offspring + [rookie]:
        evaluate_error(child, ctx, train_days, y_train)
    pool = pop + offspring + [rookie]
    return _select_survivors(pool, config.population_size, rng)


# ---------------------------------------------------------------------------
# embedded-aggregation greedy tuning

def gpesa_greedy_tune(
    ind: GpIndividual, ctx, train_days, y_train, rng, config: GpConfig, grid: GeoGrid,
    accepted_deltas=None,
):
    """Greedy bootstrap-gated mutation of the tree's circle terminals.

    Runs exactly `tune_iterations` accept/reject steps. Each step
    mutates one uniformly chosen aggregation terminal; the change is
    accepted iff the mean fitness over `bootstrap_resamples` resamples
    (size n, drawn with replacement) strictly decreases. The tree
    structure itself is never refit.
    """
    agg_nodes = [n for n in iter_agg_leaves(ind.tree)]
    if not agg_nodes:
        return ind
    n = len(train_days)
    pred = eval_tree(ind.tree, ctx, train_days)
    for _ in range(config.tune_iterations):
        resamples = [rng.integers(n, size=n) for _ in range(config.bootstrap_resamples)]
        node = agg_nodes[int(rng.integers(len(agg_nodes)))]
        old_terminal = node.terminal
        new_circle = mutate_circle(old_terminal.circle, rng, grid)
        node.terminal = AggTerminal(new_circle, old_terminal.variable)
        new_pred = eval_tree(ind.tree, ctx, train_days)
        old_score = np.mean([f_cor(pred[idx], y_train[idx]) for idx in resamples])
        new_score = np.mean([f_cor(new_pred[idx], y_train[idx]) for idx in resamples])
        if new_score < old_score:
            pred = new_pred
            if accepted_deltas is not None:
                accepted_deltas.append(float(new_score - old_score))
        else:
            node.terminal = old_terminal
    evaluate_error(ind, ctx, train_days, y_train)
    return ind


# ---------------------------------------------------------------------------
# affine rescale and full evolution

@dataclass(frozen=True)
class ScaledModel:
    """Tree plus the post-hoc affine map: prediction = a + b * eval(tree)."""

    tree: Node
    a: float
    b: float

    def predict(self, ctx, days) -> np.ndarray:
        return self.a + self.b * eval_tree(self.tree, ctx, days)


def ols_rescale(tree: Node, ctx, train_days, y_train) -> ScaledModel:
    """Fit (a, b) by OLS of the response on the tree output."""
    out = eval_tree(tree, ctx, train_days)
    var = out.var()
    if var == 0.0:
        return ScaledModel(tree=tree, a=float(np.mean(y_train)), b=0.0)
    b = float(np.mean((out - out.mean()) * (y_train - np.mean(y_train))) / var)
    a = float(np.mean(y_train) - b * out.mean())
    return ScaledModel(tree=tree, a=a, b=b)


@dataclass
class GenerationStats:
    generation: int
    pop_size: int
    best_error: float
    max_height: int
    max_size: int
    nonfinite_errors: int


@dataclass
class EvolutionLog:
    generations: list = field(default_factory=list)
    accepted_deltas: list = field(default_factory=list)


@dataclass(frozen=True)
class EvolutionResult:
    model: ScaledModel
    best_error: float
    front: tuple  # Pareto front of the winning run's final population
    log: EvolutionLog | None


def _record(log, gen, pop):
    errors = np.array([ind.error for ind in pop], dtype=float)
    log.generations.append(
        GenerationStats(
            generation=gen,
            pop_size=len(pop),
            best_error=float(errors.min()),
            max_height=max(ind.height for ind in pop),
            max_size=max(ind.size for ind in pop),
            nonfinite_errors=int(np.sum(~np.isfinite(errors))),
        )
    )


def run_evolution(
    ctx, train_days, y_train, tset, config: GpConfig, seed: int, log: EvolutionLog | None = None
) -> EvolutionResult:
    """Multi-run AFPO evolution returning the rescaled best-training model.

    With a spatial terminal set, greedy circle tuning triggers per
    generation with probability `gpesa_trigger_prob` (scope
    `population`: one uniformly chosen circle-bearing individual; scope
    `individual`: each circle-bearing individual independently).
    """
    train_days = np.asarray(train_days)
    y_train = np.asarray(y_train, dtype=float)
    grid = getattr(tset, "grid", None)
    best = None
    best_front = None
    for run_seq in np.random.SeedSequence(seed).spawn(config.n_runs):
        rng = np.random.default_rng(run_seq)
        pop = init_population(config.population_size, rng, tset, config)
        for ind in pop:
            evaluate_error(ind, ctx, train_days, y_train)
        for gen in range(config.generations):
            pop = afpo_step(pop, rng, config, tset, ctx, train_days, y_train)
            if tset.spatial and config.gpesa_trigger_prob > 0:
                deltas = log.accepted_deltas if log is not None else None

                def tune(ind):
                    # bootstrap-gated acceptance can still worsen the
                    # full-training-set error; keep the pre-tune tree in
                    # that case so the population best never regresses
                    old_tree, old_error = copy_tree(ind.tree), ind.error
                    gpesa_greedy_tune(
                        ind, ctx, train_days, y_train, rng, config, grid,
                        accepted_deltas=deltas,
                    )
                    if ind.error > old_error:
                        ind.tree, ind.error = old_tree, old_error

                if config.gpesa_trigger_scope == "population":
                    if rng.random() < config.gpesa_trigger_prob:
                        cands = [i for i in pop if any(True for _ in iter_agg_leaves(i.tree))]
                        if cands:
                            tune(cands[int(rng.integers(len(cands)))])
                else:
                    for ind in pop:
                        if rng.random() < config.gpesa_trigger_prob and any(
                            True for _ in iter_agg_leaves(ind.tree)
                        ):
                            tune(ind)
            if log is not None:
                _record(log, gen, pop)
        run_best = min(pop, key=lambda ind: ind.error)
        if best is None or run_best.error < best.error:
            best = GpIndividual.wrap(copy_tree(run_best.tree), age=run_best.age)
            best.error = run_best.error
            front = []
            for orig in pareto_front(pop):
                kept = GpIndividual.wrap(copy_tree(orig.tree), age=orig.age)
                kept.error = orig.error
                front.append(kept)
            best_front = tuple(front)
    model = ols_rescale(best.tree, ctx, train_days, y_train)
    return EvolutionResult(model=model, best_error=best.error, front=best_front, log=log)
