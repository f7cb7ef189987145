import csv
import json
from pathlib import Path

import numpy as np
import pytest

from routing import main
from route_errors import ScenarioError
from scenario import load_route, load_scenario

SCENARIOS = Path(__file__).parent / 'scenarios'
STRAIGHT = str(SCENARIOS / 'straight.json')


def write_scenario(tmp_path, name='scenario.json', **changes):
    data = json.loads((SCENARIOS / 'straight.json').read_text())
    for key, value in changes.items():
        section, _, field = key.partition('__')
        if field:
            data[section][field] = value
        else:
            data[section] = value
    path = tmp_path / name
    path.write_text(json.dumps(data, indent=2))
    return path


def test_scenarios_in_repo_load():
    for path in sorted(SCENARIOS.glob('*.json')):
        if path.name == 'breeze.json':
            continue
        scenario = load_scenario(path)
        assert scenario.problem.span > 0


def line_with(path, text):
    return next(n for n, line in enumerate(path.read_text().splitlines(), 1) if text in line)


def test_alpha_out_of_range(tmp_path):
    path = write_scenario(tmp_path, alpha=1.5)
    with pytest.raises(ScenarioError) as e:
        load_scenario(path)
    assert [i[2] for i in e.value.issues] == ['alpha']
    assert e.value.issues[0][1] == line_with(path, '"alpha"')


def test_every_issue_is_reported(tmp_path):
    with pytest.raises(ScenarioError) as e:
        load_scenario(write_scenario(tmp_path, alpha=-0.5, ship={'speed': 0.0}))
    assert {i[2] for i in e.value.issues} == {'alpha', 'ship.speed'}


def test_deterministic_needs_a_seed(tmp_path):
    data = json.loads((SCENARIOS / 'straight.json').read_text())
    del data['solver']['seed']
    path = tmp_path / 'noseed.json'
    path.write_text(json.dumps(data))
    with pytest.raises(ScenarioError) as e:
        load_scenario(path)
    assert 'seed' in e.value.message


def test_broken_json_has_a_line_number(tmp_path):
    path = tmp_path / 'broken.json'
    path.write_text('{\n  "schema_version": 1,\n  "name": \n}\n')
    with pytest.raises(ScenarioError) as e:
        load_scenario(path)
    assert e.value.issues[0][1] == 4


def test_missing_obstacle_file(tmp_path):
    with pytest.raises(ScenarioError) as e:
        load_scenario(write_scenario(tmp_path, obstacles='nowhere.geojson'))
    assert 'nowhere.geojson' in e.value.issues[0][0]


def test_solve_writes_rescorable_route(tmp_path):
    assert main(['solve', '-s', STRAIGHT, '-o', str(tmp_path), '-L', 'WARNING']) == 0
    result = json.loads((tmp_path / 'result.json').read_text())
    assert result['feasible']
    assert result['solver'] == 'gaeda'
    assert result['metadata']['seed'] == 7

    scenario = load_scenario(STRAIGHT)
    route = load_route(tmp_path / 'result.json')
    raw = scenario.problem.evaluate(route.ordinates[None])
    assert abs(float(raw.S[0]) - result['cost']['S']) <= 1e-9
    assert bool(raw.feasible[0])

    with open(tmp_path / 'convergence.csv', newline='') as f:
        rows = list(csv.DictReader(f))
    assert rows and set(rows[0]) == {'island', 'generation', 'lambda', 'best_E', 'best_S', 'best_P', 'wall_ms'}

    geo = json.loads((tmp_path / 'route.geojson').read_text())
    assert geo['geometry']['type'] == 'LineString'
    assert len(geo['geometry']['coordinates']) == 8


def test_output_does_not_depend_on_workers(tmp_path):
    one, four = tmp_path / 'one', tmp_path / 'four'
    assert main(['solve', '-s', STRAIGHT, '-o', str(one), '-w', '1', '-L', 'WARNING']) == 0
    assert main(['solve', '-s', STRAIGHT, '-o', str(four), '-w', '4', '-L', 'WARNING']) == 0
    assert (one / 'route.geojson').read_bytes() == (four / 'route.geojson').read_bytes()


def test_seed_override(tmp_path):
    assert main(['solve', '-s', STRAIGHT, '-o', str(tmp_path), '--seed', '99', '-L', 'WARNING']) == 0
    assert json.loads((tmp_path / 'result.json').read_text())['metadata']['seed'] == 99


def test_unreachable_goal_exits_with_no_solution(tmp_path):
    wall = {'type': 'FeatureCollection', 'features': [{'type': 'Feature', 'properties': {'name': 'wall'}, 'geometry': {
        'type': 'Polygon', 'coordinates': [[[4.0, -30.0], [5.0, -30.0], [5.0, 30.0], [4.0, 30.0], [4.0, -30.0]]]}}]}
    (tmp_path / 'wall.geojson').write_text(json.dumps(wall))
    path = write_scenario(tmp_path, obstacles='wall.geojson', termination={'max_generations': 3})
    assert main(['solve', '-s', str(path), '-o', str(tmp_path / 'out'), '-L', 'ERROR']) == 2
    assert not json.loads((tmp_path / 'out' / 'result.json').read_text())['feasible']


def test_baseline_brute(tmp_path):
    assert main(['baseline', '--solver', 'brute', '-s', str(SCENARIOS / 'small_oracle.json'), '-o', str(tmp_path), '-L', 'WARNING']) == 0
    result = json.loads((tmp_path / 'result.json').read_text())
    assert result['solver'] == 'brute'
    assert result['metadata']['evaluations'] == 4096


def test_baseline_shortest(tmp_path):
    assert main(['baseline', '--solver', 'shortest', '-s', str(SCENARIOS / 'single_square.json'), '-o', str(tmp_path), '-L', 'WARNING']) == 0
    result = json.loads((tmp_path / 'result.json').read_text())
    assert result['cost']['S'] == pytest.approx(3.23607, abs=1e-5)
    assert result['metadata']['length'] == pytest.approx(3.23607, abs=1e-5)


def test_unknown_solver_is_an_input_error(tmp_path):
    assert main(['baseline', '--solver', 'tabu', '-s', STRAIGHT, '-o', str(tmp_path), '-L', 'CRITICAL']) == 1


def test_bench_single_worker(tmp_path):
    assert main(['bench', '-s', STRAIGHT, '-o', str(tmp_path), '-w', '1', '--repeats', '1', '--generations', '3', '-L', 'WARNING']) == 0
    with open(tmp_path / 'bench.csv', newline='') as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 1
    assert rows[0]['workers'] == '1'
    assert float(rows[0]['speedup']) == 1.0


def test_validate(tmp_path, capsys):
    assert main(['validate', '-s', STRAIGHT]) == 0
    assert 'ok' in capsys.readouterr().out
    assert main(['validate', '-s', str(write_scenario(tmp_path, alpha=2.0)), '-L', 'CRITICAL']) == 1


def test_emitted_latlon_rounding(tmp_path):
    scenario_path = SCENARIOS / 'thessaloniki.json'
    assert main(['baseline', '--solver', 'shortest', '-s', str(scenario_path), '-o', str(tmp_path), '-L', 'WARNING']) in (0, 2)
    result = json.loads((tmp_path / 'result.json').read_text())
    latlon = np.array(result['waypoints_latlon'])
    np.testing.assert_allclose(latlon, np.round(latlon, 6), rtol=0, atol=1e-9)
    geo = json.loads((tmp_path / 'route.geojson').read_text())
    # GeoJSON positions are [lon, lat]
    assert geo['geometry']['coordinates'][0] == [latlon[0, 1], latlon[0, 0]]


def test_issue_lines_follow_nested_keys(tmp_path):
    levels = [{'resolution': 4, 'islands': 1, 'g_rate': 0.1}, {'resolution': 0, 'islands': 1, 'g_rate': 0.1}]
    path = write_scenario(tmp_path, ship={'speed': -1.0}, solver__levels=levels)
    with pytest.raises(ScenarioError) as e:
        load_scenario(path)
    lines = {field: line for _, line, field, _ in e.value.issues}
    assert lines['ship.speed'] == line_with(path, '"speed"')
    text = path.read_text().splitlines()
    resolution_lines = [n for n, line in enumerate(text, 1) if '"resolution": 0' in line]
    assert lines['solver.levels.1.resolution'] == resolution_lines[0]


def test_aegean20_result_rescores(tmp_path):
    data = json.loads((SCENARIOS / 'aegean20.json').read_text())
    data['obstacles'] = str(SCENARIOS / data['obstacles'])
    data['termination'] = {'max_generations': 25, 'plateau': None}
    path = tmp_path / 'aegean20.json'
    path.write_text(json.dumps(data))
    assert main(['solve', '-s', str(path), '-o', str(tmp_path / 'out'), '-L', 'WARNING']) in (0, 2)

    result = json.loads((tmp_path / 'out' / 'result.json').read_text())
    scenario = load_scenario(path)
    route = load_route(tmp_path / 'out' / 'result.json')
    S = float(scenario.problem.evaluate(route.ordinates[None]).S[0])
    assert abs(S - result['cost']['S']) <= 1e-9 * abs(result['cost']['S'])


def test_bypass_scaling_table(tmp_path):
    path = str(SCENARIOS / 'aegean20.json')
    assert main(['bypass-scaling', '-s', path, '-o', str(tmp_path), '--max-obstacles', '3', '--generations', '5', '-L', 'WARNING']) == 0
    with open(tmp_path / 'bypass_scaling.csv', newline='') as f:
        rows = list(csv.DictReader(f))
    assert list(rows[0]) == ['N', 'classes', 'wall_ms', 'best_cost']
    assert [int(r['N']) for r in rows] == [0, 1, 2, 3]
    assert [int(r['classes']) for r in rows] == [1, 2, 4, 8]
    assert all(float(r['wall_ms']) > 0 for r in rows)
    # no obstacles: the seed is the straight route
    assert float(rows[0]['best_cost']) <= 8.4


def test_bypass_scaling_rejects_too_many_obstacles(tmp_path):
    path = str(SCENARIOS / 'single_square.json')
    assert main(['bypass-scaling', '-s', path, '-o', str(tmp_path), '--max-obstacles', '2', '-L', 'CRITICAL']) == 1
