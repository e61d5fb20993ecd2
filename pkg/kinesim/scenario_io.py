"""
Scenario files: one JSON record per line.

The first line is a header carrying the scenario scalars and the number of
polyline, light and track records that follow, so a truncated file is detected
rather than silently loaded. Floats use the shortest repr that round-trips, so
load(save(s)) == s exactly. See docs/FORMATS.md.
"""

import hashlib
import logging
from pathlib import Path
from typing import Annotated, Iterable, List, Literal, Tuple, Union

from pydantic import BaseModel, Field, TypeAdapter, ValidationError

from kinesim.core.errors import KinesimError, ScenarioParseError
from kinesim.schemas import MapPolyline, Scenario, Track, TrafficLight

logger = logging.getLogger(__name__)

SCENARIO_SUFFIX = ".scn.jsonl"
FORMAT_VERSION = 1


class HeaderLine(BaseModel):
    record: Literal["header"] = "header"
    format_version: int = FORMAT_VERSION
    scenario_id: str
    dt: float
    history_len: int
    future_len: int
    n_polylines: int = Field(ge=0)
    n_lights: int = Field(ge=0)
    n_tracks: int = Field(ge=0)


class PolylineLine(BaseModel):
    record: Literal["polyline"] = "polyline"
    polyline: MapPolyline


class LightLine(BaseModel):
    record: Literal["light"] = "light"
    light: TrafficLight


class TrackLine(BaseModel):
    record: Literal["track"] = "track"
    track: Track


_BodyLine = TypeAdapter(
    Annotated[Union[PolylineLine, LightLine, TrackLine], Field(discriminator="record")]
)


def scenario_lines(scenario: Scenario) -> Iterable[str]:
    yield HeaderLine(
        scenario_id=scenario.scenario_id,
        dt=scenario.dt,
        history_len=scenario.history_len,
        future_len=scenario.future_len,
        n_polylines=len(scenario.polylines),
        n_lights=len(scenario.lights),
        n_tracks=len(scenario.tracks),
    ).model_dump_json()
    for polyline in scenario.polylines:
        yield PolylineLine(polyline=polyline).model_dump_json()
    for light in scenario.lights:
        yield LightLine(light=light).model_dump_json()
    for track in scenario.tracks:
        yield TrackLine(track=track).model_dump_json()


def save_scenario(scenario: Scenario, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for line in scenario_lines(scenario):
            handle.write(line + "\n")
    return path


def _first_error(exc: ValidationError) -> str:
    error = exc.errors()[0]
    location = ".".join(str(part) for part in error.get("loc", ()))
    return f"{location}: {error.get('msg')}" if location else str(error.get("msg"))


def load_scenario(path: Union[str, Path]) -> Scenario:
    """Read one scenario file; malformed content raises ScenarioParseError"""
    path = Path(path)
    with path.open("r", encoding="utf-8") as handle:
        lines = [(no, line) for no, line in enumerate(handle, start=1) if line.strip()]
    if not lines:
        raise ScenarioParseError(str(path), 1, "empty scenario file")

    header_no, header_text = lines[0]
    try:
        header = HeaderLine.model_validate_json(header_text)
    except ValidationError as exc:
        raise ScenarioParseError(str(path), header_no, f"bad header ({_first_error(exc)})") from exc
    if header.format_version != FORMAT_VERSION:
        raise ScenarioParseError(str(path), header_no, f"unsupported format version {header.format_version}")

    polylines: List[MapPolyline] = []
    lights: List[TrafficLight] = []
    tracks: List[Track] = []
    for line_no, text in lines[1:]:
        try:
            body = _BodyLine.validate_json(text)
        except ValidationError as exc:
            raise ScenarioParseError(str(path), line_no, _first_error(exc)) from exc
        if isinstance(body, PolylineLine):
            polylines.append(body.polyline)
        elif isinstance(body, LightLine):
            lights.append(body.light)
        else:
            tracks.append(body.track)

    expected = (header.n_polylines, header.n_lights, header.n_tracks)
    found = (len(polylines), len(lights), len(tracks))
    if found != expected:
        last_line = lines[-1][0] + 1
        raise ScenarioParseError(
            str(path), last_line, f"record counts {found} do not match header {expected} (truncated file?)"
        )

    try:
        return Scenario(
            scenario_id=header.scenario_id,
            dt=header.dt,
            history_len=header.history_len,
            future_len=header.future_len,
            polylines=polylines,
            lights=lights,
            tracks=tracks,
        )
    except ValidationError as exc:
        raise ScenarioParseError(str(path), header_no, _first_error(exc)) from exc


def scenario_path(directory: Union[str, Path], scenario_id: str) -> Path:
    return Path(directory) / f"{scenario_id}{SCENARIO_SUFFIX}"


def list_scenario_files(directory: Union[str, Path]) -> List[Path]:
    return sorted(Path(directory).glob(f"*{SCENARIO_SUFFIX}"))


def load_scenarios_dir(directory: Union[str, Path], skip_invalid: bool = False) -> Tuple[List[Scenario], List[Path]]:
    """Load every scenario file in a directory, sorted by file name.

    With skip_invalid, unreadable files are logged and returned in the second
    list instead of aborting the load.
    """
    scenarios: List[Scenario] = []
    skipped: List[Path] = []
    for path in list_scenario_files(directory):
        try:
            scenarios.append(load_scenario(path))
        except KinesimError as exc:
            if not skip_invalid:
                raise
            logger.warning("skipping %s: %s", path.name, exc)
            skipped.append(path)
    return scenarios, skipped


def file_sha256(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(directory: Union[str, Path], paths: Iterable[Path]) -> Path:
    """manifest.txt: '<sha256>  <file name>' per scenario file"""
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    with manifest.open("w", encoding="utf-8") as handle:
        for path in paths:
            handle.write(f"{file_sha256(path)}  {Path(path).name}\n")
    return manifest
