"""
The multidimensional GP loop.

Individuals are ordered lists of expression trees; each tree is one axis of
the hyper-feature space in which a Mahalanobis nearest-centroid classifier is
fitted. Fitness is that classifier's training accuracy, ties broken by
smaller total size.

All random draws happen on the single generator handed to the loop, in a fixed
order. Fitness evaluation never draws, so batches may run on a thread pool
without changing results.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .base_service import BaseService
from .dataset import Dataset
from .exceptions import DataError, UsageError
from .expr import Expression, format_expression, grow_random, simplify
from .mdclass import MDModel, fit_dataset

logger = logging.getLogger(__name__)

CROSSOVER_SUBTREE = "crossover_subtree"
CROSSOVER_SWAP = "crossover_swap"
MUTATION_SUBTREE = "mutation_subtree"
MUTATION_ADD = "mutation_add"
MUTATION_REMOVE = "mutation_remove"

OPERATOR_NAMES = (CROSSOVER_SUBTREE, CROSSOVER_SWAP, MUTATION_SUBTREE, MUTATION_ADD, MUTATION_REMOVE)
CROSSOVERS = (CROSSOVER_SUBTREE, CROSSOVER_SWAP)
MUTATIONS = (MUTATION_SUBTREE, MUTATION_ADD, MUTATION_REMOVE)


def default_operator_probabilities() -> Dict[str, float]:
    return {
        CROSSOVER_SUBTREE: 0.25,
        CROSSOVER_SWAP: 0.25,
        MUTATION_SUBTREE: 1 / 6,
        MUTATION_ADD: 1 / 6,
        MUTATION_REMOVE: 1 / 6,
    }


@dataclass
class RunConfig:
    """Parameters of one evolutionary run (and the run count of a cell)."""

    generations: int = 50
    population_size: int = 200
    tournament_size: int = 5
    init_max_depth: int = 6
    operator_probabilities: Dict[str, float] = field(default_factory=default_operator_probabilities)
    elitism: int = 1
    seed: int = 0
    max_depth: int = 17
    runs: int = 30
    workers: int = 1

    def validate(self) -> "RunConfig":
        for name in ("generations", "population_size", "tournament_size", "init_max_depth",
                     "elitism", "max_depth", "runs", "workers"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise UsageError(f"{name} must be a positive integer, got {value!r}")
        if self.elitism >= self.population_size:
            raise UsageError(f"elitism ({self.elitism}) must be below the population size ({self.population_size})")
        if self.init_max_depth > self.max_depth:
            raise UsageError(f"initial depth {self.init_max_depth} exceeds the depth cap {self.max_depth}")
        unknown = set(self.operator_probabilities) - set(OPERATOR_NAMES)
        if unknown:
            raise UsageError(f"unknown operators: {sorted(unknown)}")
        probabilities = self.probability_vector()
        if np.any(probabilities < 0) or abs(probabilities.sum() - 1.0) > 1e-9:
            raise UsageError(f"operator probabilities must be non-negative and sum to 1, got {probabilities.tolist()}")
        return self

    def probability_vector(self) -> np.ndarray:
        return np.array([float(self.operator_probabilities.get(name, 0.0)) for name in OPERATOR_NAMES])


@dataclass
class Individual:
    """An ordered, non-empty list of dimensions plus a cached training fitness."""

    dimensions: Tuple[Expression, ...]
    fitness: Optional[float] = None

    def __post_init__(self):
        self.dimensions = tuple(self.dimensions)
        if not self.dimensions:
            raise ValueError("an individual needs at least one dimension")

    @property
    def size(self) -> int:
        return sum(d.size for d in self.dimensions)

    @property
    def n_dimensions(self) -> int:
        return len(self.dimensions)

    def with_dimensions(self, dimensions: Sequence[Expression]) -> "Individual":
        return Individual(tuple(dimensions))

    def formulas(self) -> List[str]:
        return [format_expression(d) for d in self.dimensions]


@dataclass
class GenerationStats:
    generation: int
    best_fitness: float
    median_fitness: float
    best_size: int
    best_dimensions: int


@dataclass
class EvolutionResult:
    """Champion of a run with its per-generation trace."""

    champion: Individual
    unpruned: Individual
    trace: List[GenerationStats]
    seed: Optional[int] = None

    @property
    def fitness_trace(self) -> List[float]:
        return [g.best_fitness for g in self.trace]


# ---------------------------------------------------------------------------
# Fitness
# ---------------------------------------------------------------------------

def _training_accuracy(dimensions: Sequence[Expression], train: Dataset) -> float:
    return fit_dataset(train, dimensions).score(train)


class FitnessEvaluator(BaseService):
    """Scores individuals; a failed MD fit counts as fitness 0."""

    def __init__(self, workers: int = 1):
        super().__init__("FitnessEvaluator")
        self.workers = max(1, int(workers))

    def _handle_fallback(self, error: Exception) -> float:
        self.logger.debug(f"Fitness evaluation failed, scoring 0: {error}")
        return 0.0

    def evaluate(self, ind: Individual, train: Dataset) -> float:
        if ind.fitness is None:
            ind.fitness = float(self._guarded(_training_accuracy, ind.dimensions, train))
        return ind.fitness

    def evaluate_batch(self, individuals: Sequence[Individual], train: Dataset):
        pending = [ind for ind in individuals if ind.fitness is None]
        if self.workers == 1 or len(pending) < 2:
            for ind in pending:
                self.evaluate(ind, train)
            return
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            list(pool.map(lambda ind: self.evaluate(ind, train), pending))


_default_evaluator = FitnessEvaluator()


def fitness(ind: Individual, train: Dataset, evaluator: Optional[FitnessEvaluator] = None) -> float:
    """Training accuracy of the MD classifier fitted on ind's projection (cached)."""
    return (evaluator or _default_evaluator).evaluate(ind, train)


# ---------------------------------------------------------------------------
# Selection
# ---------------------------------------------------------------------------

def compare(a: Individual, b: Individual) -> int:
    """1 if a beats b, -1 if b beats a, 0 on a full tie."""
    if a.fitness is None or b.fitness is None:
        raise DataError("compare needs individuals with cached fitness")
    if a.fitness != b.fitness:
        return 1 if a.fitness > b.fitness else -1
    if a.size != b.size:
        return 1 if a.size < b.size else -1
    return 0


def best_of(population: Sequence[Individual]) -> Individual:
    best = population[0]
    for candidate in population[1:]:
        if compare(candidate, best) > 0:
            best = candidate
    return best


def ranked(population: Sequence[Individual]) -> List[Individual]:
    """Population sorted best first; equal individuals keep their order."""
    return sorted(population, key=lambda ind: (-ind.fitness, ind.size))


def tournament(population: Sequence[Individual], size: int, rng: np.random.Generator) -> Individual:
    if not population:
        raise DataError("tournament on an empty population")
    picks = rng.integers(len(population), size=size)
    return best_of([population[i] for i in picks])


def choose_operator(rng: np.random.Generator, config: RunConfig) -> str:
    return OPERATOR_NAMES[int(rng.choice(len(OPERATOR_NAMES), p=config.probability_vector()))]


def _choose_mutation(rng: np.random.Generator, config: RunConfig) -> str:
    weights = np.array([config.operator_probabilities.get(name, 0.0) for name in MUTATIONS], dtype=float)
    if weights.sum() <= 0:
        weights = np.ones(len(MUTATIONS))
    return MUTATIONS[int(rng.choice(len(MUTATIONS), p=weights / weights.sum()))]


# ---------------------------------------------------------------------------
# Genetic operators
# ---------------------------------------------------------------------------

def init_population(config: RunConfig, arity: int, rng: np.random.Generator) -> List[Individual]:
    """One-dimension individuals grown to the initial depth."""
    if arity < 1:
        raise DataError("cannot grow trees over zero features")
    return [Individual((grow_random(config.init_max_depth, arity, rng),)) for _ in range(config.population_size)]


def _replace_dimension(ind: Individual, index: int, tree: Expression) -> Tuple[Expression, ...]:
    dims = list(ind.dimensions)
    dims[index] = tree
    return tuple(dims)


def crossover_subtree(a: Individual, b: Individual, rng: np.random.Generator,
                      max_depth: int = 17) -> Tuple[Individual, Individual]:
    """Swap random subtrees between one random dimension of each parent."""
    da = int(rng.integers(a.n_dimensions))
    db = int(rng.integers(b.n_dimensions))
    tree_a, tree_b = a.dimensions[da], b.dimensions[db]
    pa = int(rng.integers(tree_a.size))
    pb = int(rng.integers(tree_b.size))
    new_a = tree_a.replace_at(pa, tree_b.subtree_at(pb))
    new_b = tree_b.replace_at(pb, tree_a.subtree_at(pa))
    child_a = a.with_dimensions(_replace_dimension(a, da, new_a)) if new_a.depth <= max_depth else a
    child_b = b.with_dimensions(_replace_dimension(b, db, new_b)) if new_b.depth <= max_depth else b
    return child_a, child_b


def crossover_swap_dimensions(a: Individual, b: Individual,
                              rng: np.random.Generator) -> Tuple[Individual, Individual]:
    """Exchange one whole dimension between the parents."""
    da = int(rng.integers(a.n_dimensions))
    db = int(rng.integers(b.n_dimensions))
    child_a = a.with_dimensions(_replace_dimension(a, da, b.dimensions[db]))
    child_b = b.with_dimensions(_replace_dimension(b, db, a.dimensions[da]))
    return child_a, child_b


def mutate_subtree(a: Individual, rng: np.random.Generator, arity: int,
                   init_max_depth: int = 6, max_depth: int = 17) -> Individual:
    d = int(rng.integers(a.n_dimensions))
    tree = a.dimensions[d]
    position = int(rng.integers(tree.size))
    mutated = tree.replace_at(position, grow_random(init_max_depth, arity, rng))
    if mutated.depth > max_depth:
        return a
    return a.with_dimensions(_replace_dimension(a, d, mutated))


def mutate_add_dimension(a: Individual, rng: np.random.Generator, arity: int,
                         init_max_depth: int = 6) -> Individual:
    return a.with_dimensions(a.dimensions + (grow_random(init_max_depth, arity, rng),))


def mutate_remove_dimension(a: Individual, rng: np.random.Generator) -> Individual:
    """Drop one random dimension; a single-dimension individual is returned as is."""
    if a.n_dimensions == 1:
        return a
    d = int(rng.integers(a.n_dimensions))
    return a.with_dimensions(a.dimensions[:d] + a.dimensions[d + 1:])


def mutate(a: Individual, rng: np.random.Generator, variant: str, arity: int,
           init_max_depth: int = 6, max_depth: int = 17) -> Individual:
    if variant == MUTATION_SUBTREE:
        return mutate_subtree(a, rng, arity, init_max_depth, max_depth)
    if variant == MUTATION_ADD:
        return mutate_add_dimension(a, rng, arity, init_max_depth)
    if variant == MUTATION_REMOVE:
        return mutate_remove_dimension(a, rng)
    raise ValueError(f"unknown mutation {variant!r}")


# ---------------------------------------------------------------------------
# Pruning and the run loop
# ---------------------------------------------------------------------------

def prune_dimensions(ind: Individual, train: Dataset,
                     evaluator: Optional[FitnessEvaluator] = None) -> Individual:
    """
    Remove, first to last, every dimension whose removal does not lower fitness.

    The last remaining dimension is never removed.
    """
    current = ind
    current_fitness = fitness(current, train, evaluator)
    i = 0
    while i < current.n_dimensions and current.n_dimensions > 1:
        candidate = current.with_dimensions(current.dimensions[:i] + current.dimensions[i + 1:])
        if fitness(candidate, train, evaluator) >= current_fitness:
            current, current_fitness = candidate, candidate.fitness
        else:
            i += 1
    return current


def _generation_stats(generation: int, population: Sequence[Individual]) -> GenerationStats:
    best = best_of(population)
    return GenerationStats(
        generation=generation,
        best_fitness=float(best.fitness),
        median_fitness=float(np.median([ind.fitness for ind in population])),
        best_size=best.size,
        best_dimensions=best.n_dimensions,
    )


class Evolver(BaseService):
    """Runs the generational loop for one configuration."""

    def __init__(self, config: RunConfig, evaluator: Optional[FitnessEvaluator] = None):
        super().__init__("Evolver")
        self.config = config.validate()
        self.evaluator = evaluator or FitnessEvaluator(config.workers)

    def _offspring(self, population: List[Individual], arity: int, slots: int,
                   rng: np.random.Generator) -> List[Individual]:
        cfg = self.config
        operator = choose_operator(rng, cfg)
        if operator in CROSSOVERS and slots == 1:
            operator = _choose_mutation(rng, cfg)
        if operator in CROSSOVERS:
            a = tournament(population, cfg.tournament_size, rng)
            b = tournament(population, cfg.tournament_size, rng)
            if operator == CROSSOVER_SUBTREE:
                return list(crossover_subtree(a, b, rng, cfg.max_depth))
            return list(crossover_swap_dimensions(a, b, rng))
        parent = tournament(population, cfg.tournament_size, rng)
        return [mutate(parent, rng, operator, arity, cfg.init_max_depth, cfg.max_depth)]

    def run(self, train: Dataset, rng: np.random.Generator) -> EvolutionResult:
        cfg = self.config
        arity = train.arity
        self.logger.debug(
            f"Evolving {cfg.population_size} individuals for {cfg.generations} generations "
            f"on {train.n_rows} rows"
        )

        population = init_population(cfg, arity, rng)
        self.evaluator.evaluate_batch(population, train)
        trace = [_generation_stats(0, population)]

        for generation in range(1, cfg.generations + 1):
            elite = ranked(population)[:cfg.elitism]
            target = cfg.population_size - cfg.elitism
            offspring: List[Individual] = []
            while len(offspring) < target:
                offspring.extend(self._offspring(population, arity, target - len(offspring), rng))
            self.evaluator.evaluate_batch(offspring, train)
            population = list(elite) + offspring
            stats = _generation_stats(generation, population)
            trace.append(stats)
            self.logger.debug(
                f"Generation {generation}: best {stats.best_fitness:.4f} "
                f"(size {stats.best_size}, {stats.best_dimensions} dims), median {stats.median_fitness:.4f}"
            )

        best = best_of(population)
        pruned = prune_dimensions(best, train, self.evaluator)
        champion = Individual(tuple(simplify(d) for d in pruned.dimensions))
        self.evaluator.evaluate(champion, train)
        status = self.evaluator.get_status()
        self.logger.info(
            f"Run finished: fitness {champion.fitness:.4f} with {champion.n_dimensions} dimensions "
            f"(pruned from {best.n_dimensions}); {status['calls']} fitness evaluations, "
            f"{status['failures']} scored 0 after a failed fit"
        )
        if status["failure_rate"] > 0.5:
            self.logger.warning(
                f"{status['failure_rate']:.0%} of fitness evaluations failed on {train.n_rows} rows"
            )
        return EvolutionResult(champion=champion, unpruned=best, trace=trace, seed=cfg.seed)


def evolve(train: Dataset, config: RunConfig, rng: np.random.Generator) -> Individual:
    """Run one evolution and return the pruned, simplified champion."""
    return Evolver(config).run(train, rng).champion


def run_evolution(train: Dataset, config: RunConfig, rng: Optional[np.random.Generator] = None,
                  evaluator: Optional[FitnessEvaluator] = None) -> EvolutionResult:
    if rng is None:
        rng = np.random.default_rng(config.seed)
    return Evolver(config, evaluator).run(train, rng)


def champion_model(result: EvolutionResult, train: Dataset) -> MDModel:
    """MD model of the champion, carrying the run metadata for serialization."""
    model = fit_dataset(train, result.champion.dimensions)
    return model.with_metadata(
        seed=result.seed,
        generations=len(result.trace) - 1,
        fitness=result.champion.fitness,
        fitness_trace=result.fitness_trace,
    )


# ---------------------------------------------------------------------------
# Dimension impact
# ---------------------------------------------------------------------------

@dataclass
class DimensionImpact:
    model_index: int
    dimension_index: int
    impact: float
    expression: Expression

    def to_dict(self) -> Dict[str, Any]:
        return {
            "model": self.model_index,
            "dimension": self.dimension_index,
            "impact": self.impact,
            "formula": format_expression(self.expression),
        }


def _majority_accuracy(train: Dataset) -> float:
    counts = train.class_counts()
    return max(counts.values()) / train.n_rows


def score_dimension_impacts(models: Sequence[Individual], train: Union[Dataset, Sequence[Dataset]],
                            evaluator: Optional[FitnessEvaluator] = None) -> List[DimensionImpact]:
    """
    Impact of every dimension of every model: full accuracy minus the accuracy
    without that dimension. A single-dimension model is measured against the
    majority-class accuracy instead.

    Args:
        models: Fitted individuals
        train: One training set for all models, or one per model

    Returns:
        Unsorted list of DimensionImpact
    """
    if isinstance(train, Dataset):
        trains = [train] * len(models)
    else:
        trains = list(train)
        if len(trains) != len(models):
            raise DataError(f"{len(models)} models but {len(trains)} training sets")

    impacts = []
    for m, (model, data) in enumerate(zip(models, trains)):
        full = fitness(Individual(model.dimensions), data, evaluator)
        for d, dimension in enumerate(model.dimensions):
            if model.n_dimensions == 1:
                without = _majority_accuracy(data)
            else:
                reduced = Individual(model.dimensions[:d] + model.dimensions[d + 1:])
                without = fitness(reduced, data, evaluator)
            impacts.append(DimensionImpact(m, d, full - without, dimension))
    return impacts


def rank_dimension_impact(models: Sequence[Individual], train: Union[Dataset, Sequence[Dataset]],
                          top_k: int = 10, evaluator: Optional[FitnessEvaluator] = None) -> List[Expression]:
    """
    The top_k most impactful dimensions across models, strongest first.

    Each expression is simplified before it is kept, and an expression whose
    simplified text was already harvested from an earlier (stronger) dimension
    is skipped, so the result never holds two equal expressions and may be
    shorter than top_k.
    """
    if top_k < 1:
        raise DataError(f"top_k must be at least 1, got {top_k}")
    impacts = score_dimension_impacts(models, train, evaluator)
    impacts.sort(key=lambda item: (-item.impact, item.model_index, item.dimension_index))

    chosen: List[Expression] = []
    seen = set()
    for item in impacts:
        expression = simplify(item.expression)
        key = format_expression(expression)
        if key in seen:
            continue
        seen.add(key)
        chosen.append(expression)
        logger.debug(f"Harvested {key} (model {item.model_index}, impact {item.impact:+.4f})")
        if len(chosen) == top_k:
            break
    return chosen
