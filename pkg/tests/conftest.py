from pathlib import Path

import numpy as np
import pytest

from symrl.env import EnvState, ScenarioConfig
from symrl.maps import MapSpec, load_map

REPO = Path(__file__).resolve().parents[1]
MAPS_DIR = REPO / "maps"

OPEN8 = """CPPMAP v1
........
..L.....
..O..N..
.o......
....o...
.L......
......O.
........
"""

MICRO5 = """CPPMAP v1
.....
.L...
..O..
.o...
.....
"""


@pytest.fixture
def open8():
    return load_map(OPEN8, "open8")


@pytest.fixture
def micro5():
    return load_map(MICRO5, "micro5")


@pytest.fixture
def small_cfg():
    return ScenarioConfig(b_max=25, timeout=300, n_rects_min=1, n_rects_max=2, rect_min=2, rect_max=3)


def random_map(m: int, rng: np.random.Generator, p_land=0.08, p_nfz=0.08, p_high=0.08, p_low=0.10) -> MapSpec:
    """Random valid map; always has at least one landing cell."""
    while True:
        landing = rng.random((m, m)) < p_land
        nfz = (rng.random((m, m)) < p_nfz) & ~landing
        high = (rng.random((m, m)) < p_high) & ~landing & ~nfz
        low = (rng.random((m, m)) < p_low) & ~landing & ~nfz & ~high
        if landing.any():
            mp = MapSpec(m=m, landing=landing, nfz=nfz, low_obstacle=low, high_obstacle=high, name="random")
            mp.validate()
            return mp


def random_state(mp: MapSpec, cfg: ScenarioConfig, rng: np.random.Generator) -> EnvState:
    """Random structurally valid state, flying or landed."""
    target = (rng.random((mp.m, mp.m)) < 0.2) & ~mp.high_obstacle
    if rng.random() < 0.3:
        cells = np.argwhere(mp.landing)
        r, c = cells[rng.integers(len(cells))]
        landed = True
    else:
        cells = np.argwhere(mp.flyable)
        r, c = cells[rng.integers(len(cells))]
        landed = False
    battery = int(rng.integers(1, cfg.b_max + 1))
    return EnvState(
        map=mp,
        target=target,
        position=(int(r), int(c)),
        battery=battery,
        landed=landed,
        step_count=int(rng.integers(0, 50)),
    )
