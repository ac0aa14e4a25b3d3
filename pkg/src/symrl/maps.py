"""Map definitions, the CPPMAP/CPPSCEN text formats, padding, and landing-distance fields."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

MAP_HEADER = "CPPMAP v1"
SCEN_HEADER = "CPPSCEN v1"

# dist_to_landing value for cells that cannot reach a landing zone
UNREACHABLE = np.iinfo(np.int32).max

_CELL_CHARS = {
    ".": None,
    "L": "landing",
    "N": "nfz",
    "o": "low_obstacle",
    "O": "high_obstacle",
}
_CHAR_OF = {"landing": "L", "nfz": "N", "low_obstacle": "o", "high_obstacle": "O"}


class MapFormatError(ValueError):
    """Raised for malformed map or scenario files and invalid map layouts."""


@dataclass
class MapSpec:
    """Square grid map: structural boolean layers plus a name.

    Each cell is at most one of landing / nfz / low obstacle / high obstacle.
    Row index r grows southward, column index c grows eastward.
    """

    m: int
    landing: np.ndarray
    nfz: np.ndarray
    low_obstacle: np.ndarray
    high_obstacle: np.ndarray
    name: str = "map"
    _dist_cache: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def no_fly(self) -> np.ndarray:
        return self.nfz | self.high_obstacle

    @property
    def occluder(self) -> np.ndarray:
        return self.low_obstacle | self.high_obstacle

    @property
    def flyable(self) -> np.ndarray:
        return ~self.no_fly

    def validate(self) -> None:
        for layer_name in ("landing", "nfz", "low_obstacle", "high_obstacle"):
            layer = getattr(self, layer_name)
            if layer.shape != (self.m, self.m):
                raise MapFormatError(f"layer {layer_name} is not {self.m}x{self.m}")
            if layer.dtype != np.bool_:
                raise MapFormatError(f"layer {layer_name} must be boolean")
        if (self.landing & self.nfz).any():
            raise MapFormatError("a cell cannot be both landing and no-fly")
        if (self.landing & self.high_obstacle).any():
            raise MapFormatError("a high obstacle cell cannot be a landing zone")
        if not self.landing.any():
            raise MapFormatError("map has no landing cell")

    def dist_to_landing(self) -> np.ndarray:
        """Shortest-path steps over flyable cells to the nearest landing cell.

        UNREACHABLE marks cells with no flyable route to any landing zone.
        Cached per MapSpec; the layers are treated as immutable after load.
        """
        if self._dist_cache is None:
            self._dist_cache = _bfs_distance(self.flyable, self.landing)
        return self._dist_cache

    def __eq__(self, other) -> bool:
        if not isinstance(other, MapSpec):
            return NotImplemented
        return (
            self.m == other.m
            and self.name == other.name
            and np.array_equal(self.landing, other.landing)
            and np.array_equal(self.nfz, other.nfz)
            and np.array_equal(self.low_obstacle, other.low_obstacle)
            and np.array_equal(self.high_obstacle, other.high_obstacle)
        )


def _bfs_distance(passable: np.ndarray, sources: np.ndarray) -> np.ndarray:
    m = passable.shape[0]
    dist = np.full((m, m), UNREACHABLE, dtype=np.int32)
    queue: deque[tuple[int, int]] = deque()
    for r, c in np.argwhere(sources & passable):
        dist[r, c] = 0
        queue.append((int(r), int(c)))
    while queue:
        r, c = queue.popleft()
        d = dist[r, c] + 1
        for nr, nc in ((r - 1, c), (r, c + 1), (r + 1, c), (r, c - 1)):
            if 0 <= nr < m and 0 <= nc < m and passable[nr, nc] and d < dist[nr, nc]:
                dist[nr, nc] = d
                queue.append((nr, nc))
    return dist


def load_map(text: str, name: str = "map") -> MapSpec:
    """Parse CPPMAP v1 text into a validated MapSpec."""
    lines = [ln for ln in text.splitlines() if ln.strip() != ""]
    if not lines or lines[0].strip() != MAP_HEADER:
        raise MapFormatError(f'map file must start with "{MAP_HEADER}"')
    rows = [ln.rstrip("\n") for ln in lines[1:]]
    if not rows:
        raise MapFormatError("map file has no grid rows")
    m = len(rows)
    if any(len(row) != m for row in rows):
        raise MapFormatError(f"map must be square, got {m} rows of widths {sorted({len(r) for r in rows})}")
    layers = {key: np.zeros((m, m), dtype=bool) for key in ("landing", "nfz", "low_obstacle", "high_obstacle")}
    for r, row in enumerate(rows):
        for c, ch in enumerate(row):
            if ch not in _CELL_CHARS:
                raise MapFormatError(f"unknown map character {ch!r} at row {r}, column {c}")
            key = _CELL_CHARS[ch]
            if key is not None:
                layers[key][r, c] = True
    spec = MapSpec(m=m, name=name, **layers)
    spec.validate()
    return spec


def save_map(spec: MapSpec) -> str:
    """Render a MapSpec back to CPPMAP v1 text."""
    grid = np.full((spec.m, spec.m), ".", dtype="<U1")
    for key, ch in _CHAR_OF.items():
        grid[getattr(spec, key)] = ch
    return "\n".join([MAP_HEADER] + ["".join(row) for row in grid]) + "\n"


def load_map_file(path) -> MapSpec:
    from pathlib import Path

    p = Path(path)
    return load_map(p.read_text(encoding="utf-8"), name=p.stem)


def rotate_map(spec: MapSpec, k: int) -> MapSpec:
    """Rotate every structural layer by 90*k degrees counterclockwise."""
    k = k % 4
    if k == 0:
        return spec
    rot = lambda a: np.ascontiguousarray(np.rot90(a, k))
    return MapSpec(
        m=spec.m,
        landing=rot(spec.landing),
        nfz=rot(spec.nfz),
        low_obstacle=rot(spec.low_obstacle),
        high_obstacle=rot(spec.high_obstacle),
        name=spec.name,
    )


def pad_map(spec: MapSpec, m: int) -> MapSpec:
    """Embed a map into an m x m grid, filling the border with high-obstacle cells.

    Border cells are both no-fly and occluding, i.e. semantically out of bounds.
    The original grid is anchored with floor((m - spec.m) / 2) cells of border
    on the top and left.
    """
    if m < spec.m:
        raise MapFormatError(f"cannot pad {spec.m}x{spec.m} map {spec.name!r} down to {m}")
    if m == spec.m:
        return spec
    off = (m - spec.m) // 2

    def embed(layer: np.ndarray, fill: bool) -> np.ndarray:
        out = np.full((m, m), fill, dtype=bool)
        out[off : off + spec.m, off : off + spec.m] = layer
        return out

    return MapSpec(
        m=m,
        landing=embed(spec.landing, False),
        nfz=embed(spec.nfz, False),
        low_obstacle=embed(spec.low_obstacle, False),
        high_obstacle=embed(spec.high_obstacle, True),
        name=spec.name,
    )


def build_map_pool(specs: Sequence[MapSpec], rotations: bool = False) -> list[MapSpec]:
    """Pad all maps to a common size; with rotations, expand to all four rotations.

    The rotated pool is exactly 4x the base pool, and every rotated entry is
    verified cell-for-cell against the rotation of its base entry.
    """
    if not specs:
        raise MapFormatError("map pool is empty")
    m = max(s.m for s in specs)
    padded = [pad_map(s, m) for s in specs]
    if not rotations:
        return padded
    pool = []
    for base in padded:
        for k in range(4):
            rot = rotate_map(base, k)
            if k > 0:
                rot.name = f"{base.name}@r{90 * k}"
            for layer in ("landing", "nfz", "low_obstacle", "high_obstacle"):
                assert np.array_equal(getattr(rot, layer), np.rot90(getattr(base, layer), k))
            pool.append(rot)
    assert len(pool) == 4 * len(padded)
    return pool


@dataclass
class ScenarioSpec:
    """Reproducible evaluation scenario: a map name, a seed, and explicit target cells."""

    map_name: str
    seed: int
    targets: list[tuple[int, int]]


def load_scenario(text: str) -> ScenarioSpec:
    """Parse CPPSCEN v1 text."""
    lines = [ln.strip() for ln in text.splitlines() if ln.strip() != ""]
    if not lines or lines[0] != SCEN_HEADER:
        raise MapFormatError(f'scenario file must start with "{SCEN_HEADER}"')
    fields: dict[str, str] = {}
    for ln in lines[1:]:
        if ":" not in ln:
            raise MapFormatError(f"malformed scenario line: {ln!r}")
        key, _, val = ln.partition(":")
        fields[key.strip()] = val.strip()
    for key in ("map", "seed", "targets"):
        if key not in fields:
            raise MapFormatError(f"scenario file missing field {key!r}")
    targets = []
    for tok in fields["targets"].split():
        r_s, _, c_s = tok.partition(",")
        targets.append((int(r_s), int(c_s)))
    return ScenarioSpec(map_name=fields["map"], seed=int(fields["seed"]), targets=targets)


def save_scenario(scen: ScenarioSpec) -> str:
    cells = " ".join(f"{r},{c}" for r, c in scen.targets)
    return f"{SCEN_HEADER}\nmap: {scen.map_name}\nseed: {scen.seed}\ntargets: {cells}\n"
