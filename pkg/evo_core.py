import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Union

import numpy as np
from loguru import logger

from geo_env import Route, route_points
from penalty import PenaltyParams, RawEvaluation, RouteProblem
from route_errors import InvalidInputError

DEFAULT_CROSSOVER_RATE = 0.9
DEFAULT_TOURNAMENT = 2
DEFAULT_GA_FRACTION = 0.5 # share of each generation's offspring bred by crossover/mutation
DEFAULT_ELITE_FRACTION = 0.3 # truncation selection feeding the EDA model


def cell_area(d: float, M: int, n: int) -> float:
    """ Search-space cell area d^2 / (M 2^(n-1)) for M ordinates of n bits. """
    if not d > 0 or M < 1 or n < 1:
        raise InvalidInputError(f"cell_area needs d > 0, M >= 1, n >= 1; got d={d}, M={M}, n={n}")
    return d * d / (M * 2.0 ** (n - 1))


@dataclass(frozen=True)
class Encoding:
    """ n-bit MSB-first code per free ordinate, mapped onto [-span, span]. """
    n_free: int
    resolution: int
    span: float
    gray: bool = False

    def __post_init__(self):
        if self.n_free < 1:
            raise InvalidInputError(f"need at least one free waypoint, got {self.n_free}", param='n_free')
        if not 1 <= self.resolution <= 52:
            raise InvalidInputError(f"resolution must lie in 1..52 bits, got {self.resolution}", param='resolution')
        if not self.span > 0:
            raise InvalidInputError(f"span must be positive, got {self.span}", param='span')

    @property
    def length(self) -> int:
        return self.n_free * self.resolution

    @property
    def levels(self) -> int:
        return 2 ** self.resolution - 1

    @property
    def cell_height(self) -> float:
        return 2.0 * self.span / self.levels

    def with_resolution(self, resolution: int) -> 'Encoding':
        return replace(self, resolution=resolution)

    def codes(self, bits) -> np.ndarray:
        bits = np.asarray(bits, dtype=np.uint8)
        b = bits.reshape(bits.shape[:-1] + (self.n_free, self.resolution))
        if self.gray:
            b = np.bitwise_xor.accumulate(b, axis=-1)
        weights = 2 ** np.arange(self.resolution - 1, -1, -1, dtype=np.int64)
        return b.astype(np.int64) @ weights

    def ordinates(self, bits) -> np.ndarray:
        return -self.span + self.codes(bits) * self.cell_height

    def bits_for(self, codes) -> np.ndarray:
        codes = np.asarray(codes, dtype=np.int64)
        if self.gray:
            codes = codes ^ (codes >> 1)
        shifts = np.arange(self.resolution - 1, -1, -1, dtype=np.int64)
        b = (codes[..., None] >> shifts) & 1
        return b.reshape(codes.shape[:-1] + (self.length,)).astype(bool)

    def encode(self, ordinates) -> np.ndarray:
        """ Bits of the nearest representable ordinates. """
        k = np.rint((np.asarray(ordinates, dtype=float) + self.span) / self.cell_height)
        return self.bits_for(np.clip(k, 0, self.levels).astype(np.int64))

    def decode(self, bits) -> Route:
        return Route(route_points(self.span, self.ordinates(bits)))


@dataclass(frozen=True, eq=False)
class Chromosome:
    bits: np.ndarray
    resolution: int

    def __post_init__(self):
        bits = np.array(self.bits, dtype=bool).reshape(-1)
        if self.resolution < 1 or len(bits) == 0 or len(bits) % self.resolution:
            raise InvalidInputError(f"chromosome of {len(bits)} bits does not split into {self.resolution}-bit ordinates")
        bits.setflags(write=False)
        object.__setattr__(self, 'bits', bits)

    @property
    def n_free(self) -> int:
        return len(self.bits) // self.resolution


def decode(c: Chromosome, d: float, M: int) -> Route:
    if c.n_free != M:
        raise InvalidInputError(f"chromosome encodes {c.n_free} ordinates, expected {M}")
    return Encoding(M, c.resolution, d).decode(c.bits)


@dataclass(frozen=True, eq=False)
class DistributionModel:
    """ Independent per-bit probabilities of a one (univariate marginals). """
    marginals: np.ndarray
    resolution: int
    sample_count: int = 0

    def __post_init__(self):
        m = np.array(self.marginals, dtype=float).reshape(-1)
        if len(m) == 0 or len(m) % self.resolution:
            raise InvalidInputError(f"{len(m)} marginals do not split into {self.resolution}-bit ordinates")
        if np.any(m < 0) or np.any(m > 1) or not np.all(np.isfinite(m)):
            raise InvalidInputError("marginals must lie in [0, 1]")
        m.setflags(write=False)
        object.__setattr__(self, 'marginals', m)

    @property
    def n_free(self) -> int:
        return len(self.marginals) // self.resolution


def eda_fit(selected: Union[Sequence[Chromosome], np.ndarray], resolution: Optional[int] = None) -> DistributionModel:
    if len(selected) and isinstance(selected[0], Chromosome):
        resolutions = {c.resolution for c in selected}
        lengths = {len(c.bits) for c in selected}
        if len(resolutions) > 1 or len(lengths) > 1:
            raise InvalidInputError(f"selection mixes resolutions {sorted(resolutions)} / lengths {sorted(lengths)}")
        resolution = resolutions.pop()
        bits = np.stack([c.bits for c in selected])
    else:
        bits = np.asarray(selected, dtype=bool)
        if resolution is None:
            raise InvalidInputError("resolution is required for a raw bit matrix")
    if bits.ndim != 2 or len(bits) == 0:
        raise InvalidInputError("eda_fit needs a nonempty selection")

    n = len(bits)
    floor = 1.0 / (2 * n)
    return DistributionModel(np.clip(bits.mean(axis=0), floor, 1.0 - floor), resolution, sample_count=n)


def eda_sample(model: DistributionModel, count: int, rng: np.random.Generator) -> np.ndarray:
    return rng.random((max(count, 0), len(model.marginals))) < model.marginals


def single_point_crossover(a: np.ndarray, b: np.ndarray, cut: int):
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    return np.concatenate([a[:cut], b[cut:]]), np.concatenate([b[:cut], a[cut:]])


@dataclass(eq=False)
class Fitness:
    """ Fitness oracle: bits -> raw evaluation (lam-free) -> generalized cost E.
    Remembers the cheapest feasible chromosome among everything it has evaluated. """
    problem: RouteProblem
    encoding: Encoding
    params: PenaltyParams
    evaluations: int = 0
    best_bits: Optional[np.ndarray] = None
    best_raw: Optional[RawEvaluation] = None

    def evaluate(self, bits) -> RawEvaluation:
        bits = np.atleast_2d(np.asarray(bits, dtype=bool))
        self.evaluations += len(bits)
        raw = self.problem.evaluate(self.encoding.ordinates(bits))
        self._remember(bits, raw)
        return raw

    def _remember(self, bits: np.ndarray, raw: RawEvaluation) -> None:
        feasible = np.nonzero(raw.feasible)[0]
        if not len(feasible):
            return
        k = feasible[np.argmin(raw.S[feasible])]
        if self.best_raw is None or raw.S[k] < self.best_raw.S[0]:
            self.best_bits, self.best_raw = bits[k].copy(), raw.take([k])

    def score(self, raw: RawEvaluation) -> np.ndarray:
        return raw.score(self.params)


def rank(fitness: np.ndarray, birth: np.ndarray, bits: np.ndarray) -> np.ndarray:
    """ Ascending E, then older first, then lexicographic bits. """
    keys = [bits[:, j] for j in range(bits.shape[1] - 1, -1, -1)] + [birth, fitness]
    return np.lexsort(keys)


@dataclass(eq=False)
class Population:
    """ Members kept sorted best-first. """
    bits: np.ndarray
    raw: RawEvaluation
    fitness: np.ndarray
    birth: np.ndarray
    resolution: int
    generation: int = 0

    @property
    def size(self) -> int:
        return len(self.bits)

    @property
    def best_fitness(self) -> float:
        return float(self.fitness[0])

    def take(self, idx) -> 'Population':
        return Population(self.bits[idx], self.raw.take(idx), self.fitness[idx], self.birth[idx], self.resolution, self.generation)

    def sorted(self) -> 'Population':
        return self.take(rank(self.fitness, self.birth, self.bits))

    def rescore(self, fitness: Fitness) -> 'Population':
        return replace(self, fitness=fitness.score(self.raw)).sorted()

    def elite(self, fraction: float = DEFAULT_ELITE_FRACTION) -> np.ndarray:
        return self.bits[:max(1, int(math.ceil(fraction * self.size)))]

    @classmethod
    def from_bits(cls, bits, fitness: Fitness, generation: int = 0) -> 'Population':
        bits = np.asarray(bits, dtype=bool)
        raw = fitness.evaluate(bits)
        return cls(bits, raw, fitness.score(raw), np.full(len(bits), generation), fitness.encoding.resolution, generation).sorted()

    @classmethod
    def random(cls, fitness: Fitness, size: int, rng: np.random.Generator) -> 'Population':
        if size < 2:
            raise InvalidInputError(f"population size must be >= 2, got {size}", param='population_size')
        return cls.from_bits(rng.random((size, fitness.encoding.length)) < 0.5, fitness)


def ga_offspring(pop: Population, count: int, rng: np.random.Generator, crossover_rate: float = DEFAULT_CROSSOVER_RATE,
                 mutation_rate: Optional[float] = None, tournament: int = DEFAULT_TOURNAMENT) -> np.ndarray:
    """ Tournament selection, single-point crossover and per-bit mutation; exactly `count` children. """
    L = pop.bits.shape[1]
    if count <= 0:
        return np.zeros((0, L), dtype=bool)
    if mutation_rate is None:
        mutation_rate = 1.0 / L
    pairs = (count + 1) // 2

    def select(k):
        cand = rng.integers(0, pop.size, size=(k, tournament))
        return cand[np.arange(k), np.argmin(pop.fitness[cand], axis=1)]

    a, b = pop.bits[select(pairs)], pop.bits[select(pairs)]
    crossed = rng.random(pairs) < crossover_rate
    cuts = rng.integers(1, L, size=pairs) if L > 1 else np.full(pairs, L)
    swap = (np.arange(L)[None, :] >= cuts[:, None]) & crossed[:, None]
    children = np.stack([np.where(swap, b, a), np.where(swap, a, b)], axis=1).reshape(-1, L)[:count]
    return children ^ (rng.random(children.shape) < mutation_rate)


def distinct_first(bits: np.ndarray) -> np.ndarray:
    """ Row order with the first copy of every distinct bit string ahead of all repeats. """
    _, first = np.unique(bits, axis=0, return_index=True)
    repeat = np.ones(len(bits), dtype=bool)
    repeat[first] = False
    return np.concatenate([np.sort(first), np.nonzero(repeat)[0]])


def next_generation(pop: Population, ga_off, eda_off, fitness: Fitness) -> Population:
    """ Steady-state merge: the best `size` distinct chromosomes of parents and both offspring
    pools survive. Of identical chromosomes only the oldest copy counts; repeats fill in only
    when there are fewer distinct chromosomes than places. """
    pools = [np.asarray(p, dtype=bool) for p in (ga_off, eda_off) if len(p)]
    if not pools:
        return pop
    new_bits = np.concatenate(pools)
    raw_new = fitness.evaluate(new_bits)
    merged = Population(
        np.concatenate([pop.bits, new_bits]),
        RawEvaluation.concat([pop.raw, raw_new]),
        np.concatenate([pop.fitness, fitness.score(raw_new)]),
        np.concatenate([pop.birth, np.full(len(new_bits), pop.generation + 1)]),
        pop.resolution,
        pop.generation + 1,
    )
    ranked = merged.sorted()
    survivors = ranked.take(distinct_first(ranked.bits)[:pop.size])
    logger.trace(f"generation {survivors.generation}: best E {survivors.best_fitness:.6g}")
    return survivors
