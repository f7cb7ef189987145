import numpy as np
import pytest

from evo_core import (Chromosome, DistributionModel, Encoding, Fitness, Population, cell_area, decode, eda_fit, eda_sample,
                      ga_offspring, next_generation, single_point_crossover)
from geo_env import EnvironmentField, ShipModel
from penalty import Obstacle, PenaltyParams, RouteProblem
from route_errors import InvalidInputError


def bits(s):
    return np.array([c == '1' for c in s])


@pytest.mark.parametrize("code,y", [('00', -1.0), ('11', 1.0), ('01', -1 / 3)])
def test_decode_examples(code, y):
    route = decode(Chromosome(bits(code), 2), 1.0, 1)
    assert route.ordinates[0] == pytest.approx(y)
    assert len(route.points) == 3


def test_decode_is_injective_and_spans_the_band():
    enc = Encoding(1, 10, 5.0)
    ords = enc.ordinates(enc.bits_for(np.arange(2 ** 10)[:, None]))[:, 0]
    assert len(np.unique(ords)) == 2 ** 10
    assert ords[0] == -5.0
    assert ords[-1] == pytest.approx(5.0)


def test_gray_code_round_trip():
    enc = Encoding(3, 5, 2.0, gray=True)
    codes = np.array([[0, 7, 31], [16, 15, 1]])
    np.testing.assert_array_equal(enc.codes(enc.bits_for(codes)), codes)
    # neighbouring codes differ in exactly one bit
    b = Encoding(1, 5, 2.0, gray=True).bits_for(np.arange(32)[:, None])
    assert np.all((b[1:] ^ b[:-1]).sum(1) == 1)


def test_encode_picks_nearest_code():
    enc = Encoding(2, 4, 1.0)
    np.testing.assert_array_equal(enc.codes(enc.encode([-1.0, 1.0])), [0, 15])
    np.testing.assert_allclose(enc.ordinates(enc.encode([0.05, -0.05])), [1 / 15, -1 / 15])


def test_cell_area():
    assert cell_area(1.0, 1, 1) == 1.0
    assert cell_area(1.0, 10, 8) == pytest.approx(7.8125e-4, rel=1e-15)
    rng = np.random.default_rng(1)
    for _ in range(100):
        d, M, n = rng.uniform(0.1, 500.0), int(rng.integers(1, 40)), int(rng.integers(1, 30))
        assert cell_area(d, M, n) == d * d / (M * 2.0 ** (n - 1))
        assert cell_area(d, M, n + 1) == cell_area(d, M, n) / 2


def test_single_point_crossover():
    a, b = single_point_crossover(bits('0000'), bits('1111'), 2)
    np.testing.assert_array_equal(a, bits('0011'))
    np.testing.assert_array_equal(b, bits('1100'))


def test_eda_fit_examples():
    model = eda_fit([Chromosome(bits(s), 1) for s in ('10', '10', '11', '10')])
    np.testing.assert_allclose(model.marginals, [0.875, 0.25])
    model = eda_fit(np.zeros((5, 6), dtype=bool), resolution=3)
    np.testing.assert_allclose(model.marginals, 0.1)
    model = eda_fit([Chromosome(bits('1'), 1)])
    np.testing.assert_allclose(model.marginals, 0.5)
    with pytest.raises(InvalidInputError):
        eda_fit([Chromosome(bits('1010'), 2), Chromosome(bits('1010'), 4)])


def test_eda_sample_examples():
    rng = np.random.default_rng(0)
    assert eda_sample(DistributionModel(np.ones(6), 3), 50, rng).all()
    assert eda_sample(DistributionModel(np.full(4, 0.5), 2), 0, rng).shape == (0, 4)
    samples = eda_sample(DistributionModel(np.full(8, 0.5), 4), 10_000, rng)
    sigma = np.sqrt(0.25 / 10_000)
    assert np.all(np.abs(samples.mean(0) - 0.5) < 4 * sigma)


def test_refit_after_sample_within_binomial_bounds():
    rng = np.random.default_rng(7)
    n = 10_000
    inside = total = 0
    for _ in range(20):
        p = rng.uniform(0.05, 0.95, size=12)
        refit = eda_fit(eda_sample(DistributionModel(p, 4), n, rng), resolution=4).marginals
        sigma = np.sqrt(p * (1 - p) / n)
        z = np.abs(refit - p) / sigma
        inside += int((z <= 3).sum())
        total += len(p)
        assert np.all(z <= 4.5)
    # a 3-sigma band holds about 99.7% of bits
    assert inside >= 0.98 * total


@pytest.fixture
def fitness():
    problem = RouteProblem(10.0, 3, EnvironmentField.calm(10.0), ShipModel(1.0))
    return Fitness(problem, Encoding(3, 4, 10.0), PenaltyParams())


def test_ga_offspring_identity_operators(fitness):
    rng = np.random.default_rng(3)
    pop = Population.random(fitness, 10, rng)
    kids = ga_offspring(pop, 7, rng, crossover_rate=0.0, mutation_rate=0.0)
    assert kids.shape == (7, 12)
    parents = {tuple(b) for b in pop.bits}
    assert all(tuple(k) in parents for k in kids)


def test_ga_offspring_deterministic(fitness):
    pop = Population.random(fitness, 10, np.random.default_rng(3))
    a = ga_offspring(pop, 9, np.random.default_rng(11))
    b = ga_offspring(pop, 9, np.random.default_rng(11))
    np.testing.assert_array_equal(a, b)


def test_next_generation_semantics(fitness):
    enc = fitness.encoding
    pop = Population.from_bits(enc.bits_for(np.array([[7, 7, 7], [8, 8, 8], [7, 8, 7], [6, 8, 7]])), fitness)
    rows = lambda p: {tuple(b) for b in p.bits}
    worst = tuple(pop.bits[-1])

    assert next_generation(pop, [], [], fitness) is pop

    # better than the worst parent: it takes exactly that slot
    child = enc.bits_for(np.array([[7, 8, 8]]))
    nxt = next_generation(pop, child, [], fitness)
    assert nxt.size == pop.size
    assert rows(nxt) == (rows(pop) - {worst}) | {tuple(child[0])}

    # all worse: survivors are the parents
    bad = enc.bits_for(np.array([[0, 15, 0], [15, 0, 15]]))
    same = next_generation(pop, [], bad, fitness)
    np.testing.assert_array_equal(same.bits, pop.bits)
    np.testing.assert_array_equal(same.fitness, pop.fitness)


def test_population_sorted_and_rescored(fitness):
    pop = Population.random(fitness, 12, np.random.default_rng(5))
    assert np.all(np.diff(pop.fitness) >= 0)
    evaluations = fitness.evaluations
    fitness.params = PenaltyParams().at(50.0)
    again = pop.rescore(fitness)
    assert fitness.evaluations == evaluations
    assert np.all(np.diff(again.fitness) >= 0)


@pytest.mark.parametrize("count", [0, 1, 2, 5, 16])
def test_ga_offspring_count(fitness, count):
    pop = Population.random(fitness, 6, np.random.default_rng(0))
    kids = ga_offspring(pop, count, np.random.default_rng(count))
    assert kids.shape == (count, fitness.encoding.length)
    assert kids.dtype == bool


def test_elitism_at_fixed_lambda():
    rng = np.random.default_rng(99)
    for _ in range(100):
        span, M, n = float(rng.uniform(2.0, 30.0)), int(rng.integers(1, 5)), int(rng.integers(2, 7))
        cx = rng.uniform(0.3, 0.7) * span
        w = rng.uniform(0.05, 0.2) * span
        obstacle = Obstacle(np.array([(cx - w, -w), (cx + w, -w), (cx + w, w), (cx - w, w)]))
        problem = RouteProblem(span, M, EnvironmentField.calm(span), ShipModel(1.0), obstacles=[obstacle])
        fit = Fitness(problem, Encoding(M, n, span), PenaltyParams().at(float(rng.uniform(0.5, 20.0))))
        pop = Population.random(fit, 8, rng)
        best = [pop.best_fitness]
        for _ in range(5):
            model = eda_fit(pop.elite(), n)
            pop = next_generation(pop, ga_offspring(pop, 4, rng), eda_sample(model, 4, rng), fit)
            best.append(pop.best_fitness)
        assert all(b <= a for a, b in zip(best, best[1:]))


def test_next_generation_keeps_one_copy_of_each_chromosome(fitness):
    enc = fitness.encoding
    pop = Population.from_bits(enc.bits_for(np.array([[7, 7, 7], [7, 8, 7], [6, 8, 7], [8, 8, 8]])), fitness)
    clones = np.repeat(pop.bits[:1], 3, axis=0)
    nxt = next_generation(pop, clones, pop.bits[1:2], fitness)
    assert len({tuple(b) for b in nxt.bits}) == nxt.size
    # the surviving copy of a repeated chromosome is the parent
    np.testing.assert_array_equal(nxt.bits, pop.bits)
    np.testing.assert_array_equal(nxt.birth, pop.birth)


def test_next_generation_fills_with_repeats_when_short(fitness):
    one = fitness.encoding.bits_for(np.array([[7, 7, 7]]))
    pop = Population.from_bits(np.repeat(one, 3, axis=0), fitness)
    nxt = next_generation(pop, one, [], fitness)
    assert nxt.size == 3
    assert {tuple(b) for b in nxt.bits} == {tuple(one[0])}


def test_fitness_remembers_cheapest_feasible(fitness):
    enc = fitness.encoding
    zigzag, level, bent = enc.bits_for(np.array([[0, 15, 0], [7, 7, 7], [7, 8, 8]]))
    assert fitness.best_raw is None

    fitness.evaluate(zigzag)
    assert fitness.best_raw is None

    raw = fitness.evaluate(np.stack([zigzag, bent, level]))
    assert raw.feasible.tolist() == [False, True, True]
    np.testing.assert_array_equal(fitness.best_bits, level)
    assert fitness.best_raw.S[0] == pytest.approx(raw.S[2])

    fitness.evaluate(bent)
    np.testing.assert_array_equal(fitness.best_bits, level)
