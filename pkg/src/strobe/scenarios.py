"""Canned scenario configurations used by the demos, tests and acceptance runs.

All of them fit inside the toy 51.2 m grid; the sensor range is trimmed to
match so the simulator does not cast rays nobody rasterizes.
"""

from __future__ import annotations

from .geometry import ClassId
from .sim import ActorSpec, EgoSpec, MapSpec, ScenarioConfig, SensorSpec

TOY_SENSOR = SensorSpec(max_range=25.0)

V = ClassId.VEHICLE
P = ClassId.PEDESTRIAN
C = ClassId.CYCLIST

_ROAD = (((-40.0, -5.0), (40.0, -5.0), (40.0, 9.0), (-40.0, 9.0)),)
_CROSSWALK = (((8.0, -5.0), (11.0, -5.0), (11.0, 9.0), (8.0, 9.0)),)


def stationary_grid(seed: int = 0, duration: float = 1.0, sensor: SensorSpec = TOY_SENSOR) -> ScenarioConfig:
    """Parked vehicles around a parked ego, plus a standing pedestrian and cyclist."""
    actors = []
    aid = 0
    for x in (-14.0, -6.0, 6.0, 14.0):
        for y in (-9.0, 8.0):
            actors.append(ActorSpec(aid, V, 4.8, 2.0, x, y, yaw=0.0 if y < 0 else 3.1))
            aid += 1
    actors.append(ActorSpec(aid, P, 0.6, 0.6, 3.0, -6.0))
    actors.append(ActorSpec(aid + 1, C, 1.8, 0.7, -3.0, 5.5, yaw=1.2))
    return ScenarioConfig("stationary_grid", seed, duration, EgoSpec(), tuple(actors),
                          MapSpec(_ROAD, _CROSSWALK), sensor)


def crossing_pedestrians(seed: int = 0, duration: float = 2.0, sensor: SensorSpec = TOY_SENSOR) -> ScenarioConfig:
    starts = ((9.0, -5.0, 1.5708), (9.6, 9.0, -1.5708), (10.2, -4.0, 1.5708), (10.8, 8.0, -1.5708))
    actors = tuple(
        ActorSpec(i, P, 0.6, 0.6, x, y, yaw=yaw, speed=1.4, spawn=0.1 * i)
        for i, (x, y, yaw) in enumerate(starts)
    )
    return ScenarioConfig("crossing_pedestrians", seed, duration, EgoSpec(yaw=0.0), actors,
                          MapSpec(_ROAD, _CROSSWALK), sensor)


def fast_overtake(seed: int = 0, duration: float = 1.0, sensor: SensorSpec = TOY_SENSOR) -> ScenarioConfig:
    """Ego cruising at 9 m/s overtaken by two vehicles at 10 m/s.

    Both vehicles stay inside the first sector of every sweep, so in sweep
    mode their returns are always about 90-100 ms old at emission time.
    """
    ego = EgoSpec(waypoints=((0.0, 0.0), (200.0, 0.0)), speed=9.0)
    actors = (
        ActorSpec(0, V, 4.8, 2.0, 12.0, 4.0, speed=10.0),
        ActorSpec(1, V, 4.8, 2.0, 20.0, 10.0, speed=10.0),
    )
    road = (((-40.0, -5.0), (260.0, -5.0), (260.0, 14.0), (-40.0, 14.0)),)
    return ScenarioConfig("fast_overtake", seed, duration, ego, actors, MapSpec(road, ()), sensor)


def occlusion_alley(seed: int = 0, duration: float = 5.0, sensor: SensorSpec = TOY_SENSOR) -> ScenarioConfig:
    """A vehicle driving between the ego and a row of parked cars, hiding each in turn."""
    actors = [
        ActorSpec(i, V, 4.8, 2.0, x, 7.5)
        for i, x in enumerate((-14.0, -5.0, 4.0, 13.0))
    ]
    actors.append(ActorSpec(4, V, 4.8, 2.0, -22.0, 3.5, speed=8.0))
    actors.append(ActorSpec(5, V, 4.8, 2.0, 9.0, -6.0, yaw=3.1416))
    actors.append(ActorSpec(6, V, 4.8, 2.0, -9.0, -6.5, yaw=3.1416))
    actors.append(ActorSpec(7, P, 0.6, 0.6, -2.0, -9.0, yaw=0.0, speed=0.8))
    actors.append(ActorSpec(8, C, 1.8, 0.7, 18.0, 1.0, yaw=3.1416, speed=3.0))
    return ScenarioConfig("occlusion_alley", seed, duration, EgoSpec(), tuple(actors),
                          MapSpec(_ROAD, _CROSSWALK), sensor)


def empty_scene(seed: int = 0, duration: float = 1.0, sensor: SensorSpec = TOY_SENSOR) -> ScenarioConfig:
    return ScenarioConfig("empty_scene", seed, duration, EgoSpec(), (), MapSpec(), sensor)


LIBRARY = {
    f.__name__: f
    for f in (stationary_grid, crossing_pedestrians, fast_overtake, occlusion_alley, empty_scene)
}


def get(name: str, **kw) -> ScenarioConfig:
    try:
        return LIBRARY[name](**kw)
    except KeyError:
        raise KeyError(f"unknown scenario {name!r}; choose from {sorted(LIBRARY)}") from None
