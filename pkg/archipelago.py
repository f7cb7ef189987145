import csv
import math
import queue
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from evo_core import (DEFAULT_CROSSOVER_RATE, DEFAULT_ELITE_FRACTION, DEFAULT_GA_FRACTION, DistributionModel,
                      Encoding, Fitness, Population, eda_fit, eda_sample, ga_offspring, next_generation)
from geo_env import Route
from penalty import PenaltyParams, RawEvaluation, RouteProblem, anneal
from route_errors import InternalError, InvalidInputError, RuleViolationError

DEFAULT_POPULATION = 40
DEFAULT_MIGRATION_INTERVAL = 10
DEFAULT_MIGRATION_FRACTION = 0.25
DEFAULT_MAX_GENERATIONS = 500
DEFAULT_PLATEAU = 30
DEFAULT_LEVELS = ((6, 1, 0.20), (8, 1, 0.10), (10, 1, 0.05)) # (bits, islands, g_rate): coarse anneals fastest
LOG_COLUMNS = ['island', 'generation', 'lambda', 'best_E', 'best_S', 'best_P', 'wall_ms']


@dataclass(frozen=True)
class IslandConfig:
    resolution: int
    population_size: int = DEFAULT_POPULATION
    g_rate: float = 0.1
    lam0: float = 1.0
    migration_interval: int = DEFAULT_MIGRATION_INTERVAL
    level: int = 0

    def __post_init__(self):
        if self.resolution < 1:
            raise InvalidInputError(f"island resolution must be >= 1, got {self.resolution}", param='resolution')
        if self.population_size < 2:
            raise InvalidInputError(f"population size must be >= 2, got {self.population_size}", param='population_size')
        if self.g_rate < 0:
            raise InvalidInputError(f"g_rate must be >= 0, got {self.g_rate}", param='g_rate')
        if not self.lam0 > 0:
            raise InvalidInputError(f"lam0 must be positive, got {self.lam0}", param='lam0')
        if self.migration_interval < 1:
            raise InvalidInputError(f"migration interval must be >= 1, got {self.migration_interval}", param='migration_interval')


@dataclass(frozen=True)
class IslandNetwork:
    islands: Tuple[IslandConfig, ...]
    edges: Tuple[Tuple[int, int], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, 'islands', tuple(self.islands))
        object.__setattr__(self, 'edges', tuple(tuple(e) for e in self.edges))
        if not self.islands:
            raise InvalidInputError("a network needs at least one island")
        for i, j in self.edges:
            if not (0 <= i < len(self.islands) and 0 <= j < len(self.islands)):
                raise InvalidInputError(f"edge {i}->{j} references a missing island")
            src, dst = self.islands[i], self.islands[j]
            if src.resolution > dst.resolution or src.level >= dst.level:
                raise RuleViolationError(f"edge {i}->{j} goes from {src.resolution} bits (level {src.level}) to {dst.resolution} bits (level {dst.level})")

    def out_edges(self, i: int) -> List[int]:
        return [j for s, j in self.edges if s == i]


def build_network(levels: Sequence[Tuple[int, int, float]], population_size: int = DEFAULT_POPULATION, lam0: float = 1.0,
                  migration_interval: int = DEFAULT_MIGRATION_INTERVAL) -> IslandNetwork:
    """ Islands per (bits, count, g_rate) level; every island feeds every island of every deeper level. """
    if not levels:
        raise InvalidInputError("need at least one level")
    resolutions = [int(l[0]) for l in levels]
    if any(b <= a for a, b in zip(resolutions, resolutions[1:])):
        raise RuleViolationError(f"levels must have strictly increasing resolution, got {resolutions}")

    islands, by_level = [], []
    for level, (bits, count, g_rate) in enumerate(levels):
        if count < 1:
            raise InvalidInputError(f"level {level} needs at least one island, got {count}")
        by_level.append(list(range(len(islands), len(islands) + count)))
        islands.extend(IslandConfig(bits, population_size, g_rate, lam0, migration_interval, level) for _ in range(count))

    edges = [(i, j) for lv, src in enumerate(by_level) for deeper in by_level[lv + 1:] for i in src for j in deeper]
    return IslandNetwork(tuple(islands), tuple(edges))


def default_network(population_size: int = DEFAULT_POPULATION, migration_interval: int = DEFAULT_MIGRATION_INTERVAL) -> IslandNetwork:
    return build_network(DEFAULT_LEVELS, population_size=population_size, migration_interval=migration_interval)


@dataclass(frozen=True, eq=False)
class MigrationMessage:
    source: int
    generation: int
    model: DistributionModel

    @property
    def payload_size(self) -> int:
        return len(self.model.marginals)


def project_model(model: DistributionModel, target: int) -> DistributionModel:
    """ Source bits become the most significant target bits; new low bits are uninformative (0.5). """
    l = model.resolution
    if target < l:
        raise RuleViolationError(f"cannot project a {l}-bit model down to {target} bits")
    if target == l:
        return model
    m = model.marginals.reshape(model.n_free, l)
    padded = np.concatenate([m, np.full((model.n_free, target - l), 0.5)], axis=1)
    return DistributionModel(padded.reshape(-1), target, model.sample_count)


def immigrant_count(fraction: float, size: int) -> int:
    if not 0 < fraction < 1:
        raise InvalidInputError(f"migration fraction must lie in (0, 1), got {fraction}", param='fraction')
    return int(math.ceil(fraction * size - 1e-12))


def incorporate(pop: Population, msg: MigrationMessage, fraction: float, fitness: Fitness, rng: np.random.Generator) -> Population:
    model = project_model(msg.model, pop.resolution)
    if model.resolution != pop.resolution or len(model.marginals) != pop.bits.shape[1]:
        raise InternalError(f"projected model ({model.resolution} bits, {len(model.marginals)} marginals) does not fit a {pop.resolution}-bit population")
    immigrants = eda_sample(model, immigrant_count(fraction, pop.size), rng)
    return replace(next_generation(pop, [], immigrants, fitness), generation=pop.generation)


@dataclass(frozen=True)
class Termination:
    max_generations: int = DEFAULT_MAX_GENERATIONS
    plateau: Optional[int] = DEFAULT_PLATEAU # generations without feasible-best improvement, counted once something is feasible
    wall_time: Optional[float] = None # seconds


@dataclass(frozen=True)
class EvolutionSettings:
    crossover_rate: float = DEFAULT_CROSSOVER_RATE
    mutation_rate: Optional[float] = None
    ga_fraction: float = DEFAULT_GA_FRACTION
    elite_fraction: float = DEFAULT_ELITE_FRACTION
    migration_fraction: float = DEFAULT_MIGRATION_FRACTION
    gray: bool = False
    penalty: PenaltyParams = PenaltyParams()


@dataclass(frozen=True)
class LogRow:
    island: str
    generation: int
    lam: float
    best_E: float
    best_S: float
    best_P: float
    wall_ms: float

    def trace(self) -> tuple:
        return (self.island, self.generation, self.lam, self.best_E, self.best_S, self.best_P)


class ConvergenceLog:
    def __init__(self, rows: Sequence[LogRow] = ()):
        self.rows: List[LogRow] = list(rows)

    def add(self, row: LogRow) -> None:
        self.rows.append(row)

    def extend(self, rows: Sequence[LogRow]) -> None:
        self.rows.extend(rows)

    def trace(self) -> List[tuple]:
        """ The log without wall times, comparable across runs. """
        return [r.trace() for r in self.rows]

    def to_csv(self, path) -> None:
        with open(path, 'w', newline='') as f:
            writer = csv.writer(f)
            writer.writerow(LOG_COLUMNS)
            for r in self.rows:
                writer.writerow([r.island, r.generation, repr(r.lam), repr(r.best_E), repr(r.best_S), repr(r.best_P), f"{r.wall_ms:.3f}"])

    @classmethod
    def from_csv(cls, path) -> 'ConvergenceLog':
        with open(path, newline='') as f:
            reader = csv.DictReader(f)
            if reader.fieldnames != LOG_COLUMNS:
                raise InvalidInputError(f"{path}: expected columns {','.join(LOG_COLUMNS)}, got {reader.fieldnames}")
            return cls([LogRow(r['island'], int(r['generation']), float(r['lambda']), float(r['best_E']), float(r['best_S']),
                               float(r['best_P']), float(r['wall_ms'])) for r in reader])

    def __len__(self):
        return len(self.rows)


@dataclass(frozen=True)
class Candidate:
    ordinates: np.ndarray
    raw: RawEvaluation # single row
    E: float
    P: float
    lam: float
    island: int


class Island:
    """ One population at a fixed bit resolution with its own lam schedule and random stream. """

    def __init__(self, index: int, config: IslandConfig, problem: RouteProblem, settings: EvolutionSettings, seed: np.random.SeedSequence):
        self.index = index
        self.config = config
        self.settings = settings
        self.rng = np.random.default_rng(seed)
        self.lam = config.lam0
        self.encoding = Encoding(problem.n_free, config.resolution, problem.span, settings.gray)
        self.fitness = Fitness(problem, self.encoding, settings.penalty.at(self.lam))
        self.pop = Population.random(self.fitness, config.population_size, self.rng)
        self.generation = 0
        self.inbox: 'queue.Queue[MigrationMessage]' = queue.Queue()
        self.received: List[MigrationMessage] = []
        self.best: Optional[Candidate] = None
        self.improved_at = 0
        self._track()

    @property
    def name(self) -> str:
        return str(self.index)

    def step(self) -> None:
        s = self.settings
        self.generation += 1
        self.lam = anneal(self.lam, self.config.g_rate)
        self.fitness.params = s.penalty.at(self.lam)
        self.pop = self.pop.rescore(self.fitness)

        n_ga = int(round(self.pop.size * s.ga_fraction))
        ga_off = ga_offspring(self.pop, n_ga, self.rng, s.crossover_rate, s.mutation_rate)
        model = eda_fit(self.pop.elite(s.elite_fraction), self.config.resolution)
        eda_off = eda_sample(model, self.pop.size - n_ga, self.rng)
        self.pop = next_generation(self.pop, ga_off, eda_off, self.fitness)
        self._track()

    def publish(self) -> MigrationMessage:
        model = eda_fit(self.pop.elite(self.settings.elite_fraction), self.config.resolution)
        return MigrationMessage(self.index, self.generation, model)

    def receive(self, msg: MigrationMessage) -> None:
        self.inbox.put(msg)

    def drain(self) -> None:
        while True:
            try:
                msg = self.inbox.get_nowait()
            except queue.Empty:
                return
            if msg.model.resolution > self.config.resolution:
                raise RuleViolationError(f"island {self.index} ({self.config.resolution} bits) received a {msg.model.resolution}-bit model from island {msg.source}")
            self.received.append(msg)
            self.pop = incorporate(self.pop, msg, self.settings.migration_fraction, self.fitness, self.rng)
            logger.debug(f"island {self.index} gen {self.generation}: incorporated model from island {msg.source} (gen {msg.generation})")
            self._track()

    def _track(self) -> None:
        """ Picks up the cheapest feasible route this island has evaluated, survivor or not. """
        raw = self.fitness.best_raw
        if raw is None:
            return
        S = float(raw.S[0])
        if self.best is None or S < self.best.raw.S[0]:
            self.best = Candidate(self.encoding.ordinates(self.fitness.best_bits), raw, S, 0.0, self.lam, self.index)
            self.improved_at = self.generation

    def leader(self) -> Candidate:
        """ The current best member by E, feasible or not. """
        raw = self.pop.raw.take([0])
        return Candidate(self.encoding.ordinates(self.pop.bits[0]), raw, float(self.pop.fitness[0]),
                         float(raw.penalty(self.fitness.params)[0]), self.lam, self.index)

    def row(self, t0: float) -> LogRow:
        raw = self.pop.raw
        return LogRow(self.name, self.generation, self.lam, float(self.pop.fitness[0]), float(raw.S[0]),
                      float(raw.penalty(self.fitness.params)[0]), (time.perf_counter() - t0) * 1000.0)


@dataclass(eq=False)
class RunResult:
    route: Route
    candidate: Candidate
    feasible: bool
    log: ConvergenceLog
    generations: int
    evaluations: int
    wall_ms: float
    feasible_trace: List[Tuple[float, float]] = field(default_factory=list) # (wall_ms, best feasible S)

    @property
    def S(self) -> float:
        return float(self.candidate.raw.S[0])

    @property
    def P(self) -> float:
        return self.candidate.P

    @property
    def E(self) -> float:
        return self.candidate.E

    @property
    def lam_final(self) -> float:
        return self.candidate.lam


class _Tracker:
    """ Network-wide feasible best and stopping rules.

    Staleness is counted in network generations: the generation every island has completed.
    Updating more often than that (free-running threads report after each island step) does
    not advance the plateau count. """

    def __init__(self, termination: Termination, t0: float):
        self.termination = termination
        self.t0 = t0
        self.best_S = math.inf
        self.stale = 0
        self.counted = 0
        self.trace: List[Tuple[float, float]] = []

    def update(self, islands: Sequence[Island]) -> None:
        generation = min(isl.generation for isl in islands)
        bests = [isl.best.raw.S[0] for isl in islands if isl.best is not None]
        if bests and min(bests) < self.best_S:
            self.best_S = float(min(bests))
            self.stale = 0
            self.trace.append(((time.perf_counter() - self.t0) * 1000.0, self.best_S))
        elif math.isfinite(self.best_S) and generation > self.counted:
            self.stale += generation - self.counted
        self.counted = max(self.counted, generation)

    def done(self, generation: int) -> bool:
        t = self.termination
        if generation >= t.max_generations:
            return True
        if t.plateau is not None and self.stale >= t.plateau:
            return True
        return t.wall_time is not None and time.perf_counter() - self.t0 >= t.wall_time


def _deliver(network: IslandNetwork, islands: Sequence[Island], msg: MigrationMessage) -> None:
    for j in network.out_edges(msg.source):
        islands[j].receive(msg)


def _run_lockstep(network, islands, tracker, log, workers, t0) -> int:
    """ Barrier after every generation; results do not depend on the worker count. """
    generation = 0
    with ThreadPoolExecutor(max_workers=workers) as pool:
        while not tracker.done(generation):
            list(pool.map(Island.step, islands))
            generation += 1
            log.extend([isl.row(t0) for isl in islands])
            for isl in islands:
                if generation % isl.config.migration_interval == 0:
                    _deliver(network, islands, isl.publish())
            list(pool.map(Island.drain, islands))
            tracker.update(islands)
    return generation


def _run_free(network, islands, tracker, log, workers, t0) -> int:
    """ One thread per island, at most `workers` stepping at once; messages flow through inbox queues. """
    stop = threading.Event()
    gate = threading.Semaphore(workers)
    lock = threading.Lock()
    exq = queue.Queue()

    def worker(isl: Island):
        try:
            while not stop.is_set():
                with gate:
                    isl.step()
                    if isl.generation % isl.config.migration_interval == 0:
                        _deliver(network, islands, isl.publish())
                    isl.drain()
                with lock:
                    log.add(isl.row(t0))
                    tracker.update(islands)
                    if tracker.done(isl.generation):
                        stop.set()
        except Exception as e:
            exq.put(e)
            stop.set()

    threads = [threading.Thread(target=worker, args=(isl,), daemon=True) for isl in islands]
    for t in threads:
        t.start()
    for t in threads:
        t.join()

    if not exq.empty():
        raise exq.get_nowait()
    return max(isl.generation for isl in islands)


def run(network: IslandNetwork, problem: RouteProblem, termination: Termination = Termination(), seed: int = 0,
        workers: int = 1, deterministic: bool = True, settings: EvolutionSettings = EvolutionSettings()) -> RunResult:
    if workers < 1:
        raise InvalidInputError(f"workers must be >= 1, got {workers}", param='workers')

    t0 = time.perf_counter()
    seeds = np.random.SeedSequence(seed).spawn(len(network.islands))
    islands = [Island(i, cfg, problem, settings, s) for i, (cfg, s) in enumerate(zip(network.islands, seeds))]
    log = ConvergenceLog([isl.row(t0) for isl in islands])
    tracker = _Tracker(termination, t0)
    tracker.update(islands)

    logger.info(f"Evolving {len(islands)} island(s) at {[c.resolution for c in network.islands]} bits, "
                f"{'deterministic' if deterministic else 'free-running'}, {workers} worker(s), seed {seed}")
    runner = _run_lockstep if deterministic else _run_free
    generations = runner(network, islands, tracker, log, workers, t0)
    wall_ms = (time.perf_counter() - t0) * 1000.0
    evaluations = sum(isl.fitness.evaluations for isl in islands)

    feasible = [isl.best for isl in islands if isl.best is not None]
    if feasible:
        best = min(feasible, key=lambda c: (c.raw.S[0], c.island))
        best = replace(best, lam=islands[best.island].lam)
    else:
        best = min((isl.leader() for isl in islands), key=lambda c: (c.E, c.island))
        logger.warning(f"No feasible route after {generations} generations; best infeasible has P={best.P:.6g}")

    logger.info(f"Finished {generations} generations in {wall_ms / 1000:.2f}s ({generations / max(wall_ms / 1000, 1e-9):.1f} gen/s, "
                f"{evaluations} evaluations), best S={best.raw.S[0]:.6g}, feasible={bool(feasible)}")
    return RunResult(problem.route(best.ordinates), best, bool(feasible), log, generations, evaluations, wall_ms, tracker.trace)
