"""Meta-path search baselines: random search and a small genetic algorithm.

An individual is a set of 6 meta-paths (genes). Fitness is whatever callable
the caller supplies; in the pipeline it is the validation R² of a single-task
model trained on the individual's paths.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .kg import Schema, default_schema
from .metapath import MetaPathSchema, format_metapath, validate_metapath

logger = logging.getLogger(__name__)

N_GENES = 6
MAX_ATTEMPTS = 100


class SearchError(RuntimeError):
    def __init__(self, message: str, history: "list[EvaluationRecord] | None" = None):
        super().__init__(message)
        self.history = history or []


@dataclass(frozen=True)
class Individual:
    genes: tuple[MetaPathSchema, ...]

    def __post_init__(self):
        if len(self.genes) != N_GENES:
            raise ValueError(f"an individual has exactly {N_GENES} genes, got {len(self.genes)}")

    def dsl(self) -> list[str]:
        return [format_metapath(g, with_label=False) for g in self.genes]


@dataclass
class GAConfig:
    population: int = 5
    parents: int = 2
    mutation_rate: float = 0.10
    generations: int = 6
    seed: int = 0
    min_len: int = 2
    max_len: int = 4

    def __post_init__(self):
        if not self.population >= self.parents >= 2:
            raise ValueError("need population >= parents >= 2")
        if not 0.0 <= self.mutation_rate <= 1.0:
            raise ValueError("mutation_rate must lie in [0, 1]")
        if self.generations < 1:
            raise ValueError("generations must be >= 1")


@dataclass
class EvaluationRecord:
    generation: int
    index: int
    genes: list[str]
    fitness: float
    seconds: float

    def to_dict(self) -> dict:
        return {"generation": self.generation, "index": self.index, "genes": self.genes,
                "fitness": self.fitness, "seconds": self.seconds}


@dataclass
class SearchResult:
    best: Individual
    best_fitness: float
    history: list[EvaluationRecord] = field(default_factory=list)


def random_metapath(
    rng: np.random.Generator,
    schema: Schema | None = None,
    min_len: int = 2,
    max_len: int = 4,
    start_type: str = "Region",
) -> MetaPathSchema:
    """Random walk over the schema from ``start_type``; the length is drawn uniformly first."""
    schema = schema or default_schema()
    if not schema.outgoing(start_type):
        raise ValueError(f"schema has no relation with head {start_type}")
    for _ in range(MAX_ATTEMPTS):
        length = int(rng.integers(min_len, max_len + 1))
        current, hops = start_type, []
        for _ in range(length):
            options = schema.outgoing(current)
            if not options:
                break
            rel = options[int(rng.integers(len(options)))]
            hops.append((rel.name, rel.tail_type))
            current = rel.tail_type
        if len(hops) == length:
            return validate_metapath(MetaPathSchema(start_type, tuple(hops)), schema)
    raise SearchError(f"could not sample a meta-path of length {min_len}-{max_len} in {MAX_ATTEMPTS} attempts")


def random_individual(rng: np.random.Generator, schema: Schema | None = None, min_len: int = 2, max_len: int = 4) -> Individual:
    return Individual(tuple(random_metapath(rng, schema, min_len, max_len) for _ in range(N_GENES)))


def crossover(a: Individual, b: Individual, rng: np.random.Generator) -> tuple[Individual, Individual]:
    """Swap the gene at one uniformly chosen position."""
    k = int(rng.integers(N_GENES))
    ga, gb = list(a.genes), list(b.genes)
    ga[k], gb[k] = gb[k], ga[k]
    return Individual(tuple(ga)), Individual(tuple(gb))


def mutate(
    ind: Individual,
    rng: np.random.Generator,
    rate: float = 0.10,
    schema: Schema | None = None,
    min_len: int = 2,
    max_len: int = 4,
) -> Individual:
    """Replace each gene with a fresh random meta-path with probability ``rate``."""
    genes = []
    for g in ind.genes:
        if rng.random() < rate:
            genes.append(random_metapath(rng, schema, min_len, max_len))
        else:
            genes.append(g)
    return Individual(tuple(genes))


def _evaluate(fitness, ind: Individual, generation: int, index: int, history: list) -> float:
    t0 = time.perf_counter()
    try:
        value = float(fitness(ind))
    except Exception as exc:
        raise SearchError(f"fitness failed at generation {generation}, index {index}: {exc}", history) from exc
    history.append(EvaluationRecord(generation, index, ind.dsl(), value, time.perf_counter() - t0))
    logger.info("gen %d #%d fitness %.4f", generation, index, value)
    return value


def _best(evaluated: Sequence[tuple[Individual, float]]) -> tuple[Individual, float]:
    # max picks the first maximum, i.e. ties go to the earlier evaluation
    k = max(range(len(evaluated)), key=lambda i: (evaluated[i][1], -i))
    return evaluated[k]


def genetic_search(
    ga: GAConfig,
    fitness: Callable[[Individual], float],
    schema: Schema | None = None,
) -> SearchResult:
    """Evolve ``ga.population`` individuals for ``ga.generations`` generations.

    Each generation keeps the best parent, then fills the remaining slots
    with crossover children of the top two, each mutated gene-wise.
    """
    schema = schema or default_schema()
    rng = np.random.default_rng(ga.seed)
    population = [random_individual(rng, schema, ga.min_len, ga.max_len) for _ in range(ga.population)]
    history: list[EvaluationRecord] = []
    evaluated_all: list[tuple[Individual, float]] = []
    for gen in range(ga.generations):
        scored = [(ind, _evaluate(fitness, ind, gen, i, history)) for i, ind in enumerate(population)]
        evaluated_all += scored
        order = sorted(range(len(scored)), key=lambda i: (-scored[i][1], i))
        parents = [scored[i][0] for i in order[: ga.parents]]
        if gen + 1 == ga.generations:
            break
        nxt = [parents[0]]
        while len(nxt) < ga.population:
            pa, pb = (parents[int(j)] for j in rng.choice(len(parents), size=2, replace=False))
            for child in crossover(pa, pb, rng):
                if len(nxt) < ga.population:
                    nxt.append(mutate(child, rng, ga.mutation_rate, schema, ga.min_len, ga.max_len))
        population = nxt
    best, value = _best(evaluated_all)
    return SearchResult(best, value, history)


def random_search(
    fitness: Callable[[Individual], float],
    iterations: int = 6,
    per_iter: int = 5,
    seed: int = 0,
    schema: Schema | None = None,
    min_len: int = 2,
    max_len: int = 4,
) -> SearchResult:
    schema = schema or default_schema()
    rng = np.random.default_rng(seed)
    history: list[EvaluationRecord] = []
    evaluated: list[tuple[Individual, float]] = []
    for it in range(iterations):
        for i in range(per_iter):
            ind = random_individual(rng, schema, min_len, max_len)
            evaluated.append((ind, _evaluate(fitness, ind, it, i, history)))
    best, value = _best(evaluated)
    return SearchResult(best, value, history)
