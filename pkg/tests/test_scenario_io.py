import pytest

from kinesim.core.errors import ScenarioInvariantError, ScenarioParseError
from kinesim.core.kinematics import AgentState
from kinesim.scenario_io import (
    file_sha256,
    list_scenario_files,
    load_scenario,
    load_scenarios_dir,
    save_scenario,
    scenario_path,
    write_manifest,
)
from kinesim.schemas import AgentMeta, LightState, Scenario, TrafficLight, Track


def test_saved_scenario_loads_identically(synthetic_scenes, tmp_path):
    for scenario in synthetic_scenes:
        path = save_scenario(scenario, scenario_path(tmp_path, scenario.scenario_id))
        assert load_scenario(path) == scenario


def test_floats_are_written_in_shortest_round_trip_form(make_scenario, tmp_path):
    scenario = make_scenario([{"id": 4, "x": 0.1 + 0.2, "y": 1.0 / 3.0, "v": 2.2}], dt=0.1)
    path = save_scenario(scenario, tmp_path / "exact.scn.jsonl")
    text = path.read_text()
    assert "0.30000000000000004" in text and '"dt":0.1,' in text
    first = load_scenario(path).tracks[0].states[0]
    assert (first.x, first.y, first.v) == (0.1 + 0.2, 1.0 / 3.0, 2.2)
    assert load_scenario(path) == scenario


def test_lights_survive_the_file(make_scenario, tmp_path):
    scenario = make_scenario([{"id": 4, "x": 1.0, "y": 2.0, "v": 3.0}])
    states = [LightState.RED] * 4 + [LightState.GREEN] * (scenario.num_steps - 4)
    scenario = Scenario(**{**dict(scenario), "lights": [TrafficLight(id=0, stop_point=(10.0, 0.0), states=states)]})
    loaded = load_scenario(save_scenario(scenario, tmp_path / "lit.scn.jsonl"))
    assert loaded.lights[0].states == states


def test_truncated_file_is_a_parse_error(synthetic_scenes, tmp_path):
    path = save_scenario(synthetic_scenes[0], tmp_path / "cut.scn.jsonl")
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(ScenarioParseError) as info:
        load_scenario(path)
    assert "truncated" in str(info.value)


def test_garbage_line_reports_its_number(synthetic_scenes, tmp_path):
    path = save_scenario(synthetic_scenes[0], tmp_path / "bad.scn.jsonl")
    lines = path.read_text().splitlines()
    lines[1] = '{"record": "polyline", "polyline": {"id": 0}}'
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ScenarioParseError) as info:
        load_scenario(path)
    assert info.value.line == 2


def test_empty_file_is_a_parse_error(tmp_path):
    path = tmp_path / "empty.scn.jsonl"
    path.write_text("")
    with pytest.raises(ScenarioParseError):
        load_scenario(path)


def test_track_lengths_must_match_the_scenario():
    meta = AgentMeta(id=7, length=4.5, width=2.0)
    state = AgentState(x=0.0, y=0.0, theta=0.0, v=0.0)
    track = Track(meta=meta, states=[state] * 3, valid=[True] * 3)
    with pytest.raises(ScenarioInvariantError) as info:
        Scenario(scenario_id="short", dt=0.5, history_len=1, future_len=4, tracks=[track])
    assert info.value.track_id == 7


def test_directory_load_can_skip_unreadable_files(synthetic_scenes, tmp_path):
    for scenario in synthetic_scenes:
        save_scenario(scenario, scenario_path(tmp_path, scenario.scenario_id))
    broken = tmp_path / "zz-broken.scn.jsonl"
    broken.write_text("not json\n")

    with pytest.raises(ScenarioParseError):
        load_scenarios_dir(tmp_path)
    scenarios, skipped = load_scenarios_dir(tmp_path, skip_invalid=True)
    assert [s.scenario_id for s in scenarios] == sorted(s.scenario_id for s in synthetic_scenes)
    assert skipped == [broken]


def test_manifest_lists_hashes(synthetic_scenes, tmp_path):
    paths = [save_scenario(s, scenario_path(tmp_path, s.scenario_id)) for s in synthetic_scenes]
    manifest = write_manifest(tmp_path, paths)
    rows = manifest.read_text().splitlines()
    assert len(rows) == len(paths)
    digest, name = rows[0].split("  ")
    assert digest == file_sha256(paths[0])
    assert name == paths[0].name
    assert list_scenario_files(tmp_path) == sorted(paths)
