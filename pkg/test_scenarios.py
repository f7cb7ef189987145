#!/usr/bin/env python
import argparse
import csv
import json
import os
import statistics
import subprocess
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

import archipelago
from archipelago import Termination, build_network
from backend.brute import exhaustive_search
from backend.bypass import bypass_solver, enumerate_bypasses
from backend.sa import SAParams, simulated_annealing
from backend.shortest import shortest_feasible_path
from geo_env import EnvironmentField, ShipModel
from penalty import Obstacle, RouteProblem, split_ratios, turn_slacks
from routing import main
from scenario import load_scenario

# CLI cases are configured with scenario_conf_tests.json

HERE = Path(__file__).parent
SLOW = os.environ.get('ROUTING_SLOW_TESTS') == '1'
slow = pytest.mark.skipif(not SLOW, reason="set ROUTING_SLOW_TESTS=1 for long-running acceptance checks")

green_pass = '✅ pass'
red_fail = '❌ fail'


def load_conf():
    with open(HERE / 'scenario_conf_tests.json') as f:
        return json.load(f)


def run_case(cmd_args: list, expect: dict, out_dir, log_level: str = 'WARNING', quiet: bool = True) -> dict:
    """ Run routing.py once and check its exit code and JSON summary against `expect`. """
    t = time.time()
    proc = subprocess.run([sys.executable, str(HERE / 'routing.py'), *cmd_args, '-o', str(out_dir), '-L', log_level],
                          cwd=HERE, capture_output=True, text=True)
    t = time.time() - t

    summary = {}
    lines = proc.stdout.strip().splitlines()
    if lines and lines[-1].startswith('{'):
        summary = json.loads(lines[-1])

    results, notes = [proc.returncode == expect.get('exit', 0)], []
    if not results[-1]:
        notes.append(f"exit {proc.returncode}, expected {expect.get('exit', 0)}")
    if 'feasible' in expect:
        results.append(summary.get('feasible') == expect['feasible'])
        if not results[-1]:
            notes.append(f"feasible={summary.get('feasible')}")
    cost = summary.get('best_cost')
    if 'max_cost' in expect:
        results.append(cost is not None and cost <= expect['max_cost'])
        if not results[-1]:
            notes.append(f"cost {cost} > {expect['max_cost']}")
    if 'min_cost' in expect:
        results.append(cost is not None and cost >= expect['min_cost'])
        if not results[-1]:
            notes.append(f"cost {cost} < {expect['min_cost']}")
    if not quiet and proc.stderr:
        print(proc.stderr, file=sys.stderr)

    return {'args': cmd_args, 'results': results, 'time': t, 'cost': cost,
            'note': '; '.join(notes) or f"{results.count(True)}/{len(results)} checks passed"}


def make_csv_header():
    return ['pass', 'args', 'time', 'cost', 'note']


def make_csv_row(r):
    return ['✅' if all(r['results']) else '❌', ' '.join(r['args']), f"{r['time']:.1f}", r['cost'], r['note']]


@pytest.mark.parametrize("cmd_args,expect", [
    pytest.param(a, e, marks=slow) if e.get('slow') else (a, e) for a, e in load_conf()
], ids=[' '.join(a) for a, _ in load_conf()])
def test_cli_case(cmd_args, expect, tmp_path):
    r = run_case(cmd_args, expect, tmp_path)
    assert all(r['results']), r['note']


def _random_obstacles(rng, span):
    obstacles = []
    for _ in range(rng.integers(1, 4)):
        cx, cy = rng.uniform(0.2 * span, 0.8 * span), rng.uniform(-0.3 * span, 0.3 * span)
        w, h = rng.uniform(0.03, 0.12, size=2) * span
        if rng.random() < 0.5:
            ring = [(cx - w, cy - h), (cx + w, cy - h), (cx + w, cy + h), (cx - w, cy + h)]
        else:
            ring = [(cx - w, cy - h), (cx + w, cy - h), (cx, cy + h)]
        obstacles.append(Obstacle(np.array(ring)))
    return obstacles


def test_reported_feasible_routes_are_feasible():
    rng = np.random.default_rng(2024)
    net = build_network([(6, 1, 0.2)], population_size=16)
    reported = 0
    for seed in range(50):
        span = float(rng.uniform(5.0, 50.0))
        problem = RouteProblem(span, int(rng.integers(3, 7)), EnvironmentField.calm(span), ShipModel(1.0),
                               obstacles=_random_obstacles(rng, span))
        result = archipelago.run(net, problem, Termination(max_generations=15, plateau=None), seed=seed)
        if not result.feasible:
            continue
        reported += 1
        pts = result.route.points
        assert np.all(split_ratios(pts[None], problem.obstacles, problem.area_tol) == 0.0)
        assert np.all(turn_slacks(pts, problem.ship.max_turn) >= 0.0)
    assert reported > 0


@slow
def test_small_oracle_hit_rate():
    scenario = load_scenario(HERE / 'scenarios' / 'small_oracle.json')
    oracle = exhaustive_search(scenario.problem, 4, scenario.penalty_params().at(scenario.final_lambda()), feasible_only=True)
    hits = 0
    for seed in range(20):
        result = archipelago.run(scenario.network(), scenario.problem, scenario.termination(), seed=seed, settings=scenario.settings())
        assert result.wall_ms < 2000.0
        hits += result.feasible and abs(result.S - oracle.S) <= 1e-9 * oracle.S
    assert hits >= 18


@slow
def test_aegean20_near_shortest_path(tmp_path):
    path = HERE / 'scenarios' / 'aegean20.json'
    scenario = load_scenario(path)
    reference = shortest_feasible_path(scenario.obstacles, (0.0, 0.0), (scenario.frame.span, 0.0))
    assert main(['solve', '-s', str(path), '-o', str(tmp_path), '-L', 'WARNING']) == 0
    result = json.loads((tmp_path / 'result.json').read_text())
    assert result['cost']['S'] <= 1.05 * reference.length / scenario.ship.speed


@slow
def test_slow_annealing_beats_fast():
    scenario = load_scenario(HERE / 'scenarios' / 'aegean20.json')
    s = scenario.spec.solver
    medians = {}
    for g_rate in (0.02, 0.10, 0.50):
        net = build_network([(l.resolution, l.islands, g_rate) for l in s.levels], population_size=s.population_size)
        costs = []
        for seed in range(10):
            res = archipelago.run(net, scenario.problem, scenario.termination(), seed=seed, settings=scenario.settings())
            costs.append(res.S if res.feasible else np.inf)
        medians[g_rate] = statistics.median(costs)
    print(f"median final cost by annealing rate: {medians}")
    assert medians[0.02] <= medians[0.50]
    ordered = [medians[0.02] <= medians[0.10], medians[0.10] <= medians[0.50], medians[0.02] <= medians[0.50]]
    assert sum(ordered) >= 2


@slow
def test_annealing_small_oracle_hit_rate():
    scenario = load_scenario(HERE / 'scenarios' / 'small_oracle.json')
    problem = scenario.problem
    oracle = exhaustive_search(problem, 4, scenario.penalty_params().at(scenario.final_lambda()), feasible_only=True)
    params = SAParams(temperature=0.05 * problem.span, cooling=0.95, steps_per_temp=40, step_cells=4, stages=150, resolution=4)
    hits = 0
    for seed in range(20):
        out = simulated_annealing(problem, params, seed, scenario.penalty_params())
        hits += out.feasible and abs(out.S - oracle.S) <= 1e-9 * oracle.S
    assert hits >= 18


def four_obstacle_problem():
    squares = [(1.5, -0.3, 2.0, 0.3), (3.5, 0.2, 4.2, 0.8), (5.8, -0.8, 6.5, -0.2), (8.0, -0.3, 8.5, 0.3)]
    obstacles = [Obstacle(np.array([(x0, y0), (x1, y0), (x1, y1), (x0, y1)])) for x0, y0, x1, y1 in squares]
    return RouteProblem(10.0, 3, EnvironmentField.calm(10.0), ShipModel(1.0), obstacles=obstacles)


@slow
def test_bypass_matches_exhaustive_on_four_obstacles():
    problem = four_obstacle_problem()
    oracle = exhaustive_search(problem, 6, feasible_only=True)
    assert oracle.feasible
    classes = enumerate_bypasses(problem.obstacles, (0.0, 0.0), (problem.span, 0.0))
    assert len(classes) == 16
    out = bypass_solver(classes, problem, generations=100, seed=5, population_size=20, resolution=6, workers=4)
    assert out.feasible
    assert oracle.S - 1e-9 <= out.S <= 1.01 * oracle.S


def generations_to_plateau(log, island, rel=0.10):
    """ First generation whose best E is within `rel` of the island's final best E. """
    rows = [r for r in log.rows if r.island == island]
    final = rows[-1].best_E
    return next(r.generation for r in rows if abs(r.best_E - final) <= rel * abs(final))


@slow
def test_coarse_islands_settle_first():
    scenario = load_scenario(HERE / 'scenarios' / 'aegean20.json')
    net = scenario.network()
    coarse, fine = '0', str(len(net.islands) - 1)
    coarse_gens, fine_gens = [], []
    for seed in range(10):
        res = archipelago.run(net, scenario.problem, scenario.termination(), seed=seed, settings=scenario.settings())
        coarse_gens.append(generations_to_plateau(res.log, coarse))
        fine_gens.append(generations_to_plateau(res.log, fine))
    print(f"median generations to plateau: coarse {statistics.median(coarse_gens)}, fine {statistics.median(fine_gens)}")
    assert statistics.median(coarse_gens) < statistics.median(fine_gens)


def _time_to(trace, threshold):
    return next((t for t, S in trace if S <= threshold), np.inf)


@slow
def test_island_model_reaches_threshold_before_annealing():
    scenario = load_scenario(HERE / 'scenarios' / 'aegean20.json')
    problem = scenario.problem
    threshold = 1.05 * shortest_feasible_path(problem.obstacles, (0.0, 0.0), (problem.span, 0.0)).length / scenario.ship.speed
    sa = scenario.spec.solver.sa
    ga_times, sa_times = [], []
    for seed in range(10):
        res = archipelago.run(scenario.network(), problem, scenario.termination(), seed=seed, settings=scenario.settings())
        ga_times.append(_time_to(res.feasible_trace, threshold))
        params = SAParams(0.05 * problem.span / scenario.ship.speed, sa.cooling, sa.steps_per_temp, sa.step_cells,
                          10 ** 6, sa.g_rate, sa.resolution, max_evaluations=res.evaluations)
        out = simulated_annealing(problem, params, seed, scenario.penalty_params())
        sa_times.append(_time_to(out.extra['feasible_trace'], threshold))
    ga, sa_median = statistics.median(ga_times), statistics.median(sa_times)
    print(f"median time to {threshold:.4g}: island model {ga:.0f} ms, annealing {sa_median:.0f} ms")
    assert ga < sa_median


@slow
@pytest.mark.skipif((os.cpu_count() or 1) < 4, reason="needs 4 cores")
def test_thread_scaling(tmp_path):
    path = str(HERE / 'scenarios' / 'aegean20.json')
    assert main(['bench', '-s', path, '-o', str(tmp_path), '-w', '1', '4', '8', '--repeats', '3', '--generations', '40', '-L', 'WARNING']) == 0
    with open(tmp_path / 'bench.csv', newline='') as f:
        speedup = {int(r['workers']): float(r['speedup']) for r in csv.DictReader(f)}
    assert speedup[4] >= 2.0
    # 4 islands: extra workers have nothing to run
    assert speedup[8] <= 8.0


if __name__ == '__main__':
    parser = argparse.ArgumentParser(description='Run the scenario CLI cases')
    parser.add_argument('-v', '--verbose', action='store_true', help="Verbose")
    parser.add_argument('--slow', action='store_true', help="Include slow cases")
    parser.add_argument('--abort-on-fail', action='store_true', help="Abort testing on fail.")
    parser.add_argument('-L', '--log-level', default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"], help="Set the log level")
    args = parser.parse_args()

    cases = [(a, e) for a, e in load_conf() if args.slow or SLOW or not e.get('slow')]
    print(f"### Begin tests. test count: {len(cases)}")
    all_results = []
    for i, (cmd_args, expect) in enumerate(cases):
        with tempfile.TemporaryDirectory() as out_dir:
            r = run_case(cmd_args, expect, out_dir, args.log_level, quiet=not args.verbose)
        all_results.append(r)
        passed = all(r['results'])
        print(f"### Test {i + 1}/{len(cases)}: routing.py {' '.join(cmd_args)}  # {green_pass if passed else red_fail}, time: {r['time']:.1f}s, {r['note']}")
        if not passed and args.abort_on_fail:
            break
    print("### End tests.")

    with open('test_output.csv', 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(make_csv_header())
        for r in all_results:
            writer.writerow(make_csv_row(r))

    sys.exit(0 if all(all(r['results']) for r in all_results) else 1)
