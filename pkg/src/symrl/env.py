"""Deterministic grid-world UAV coverage environment with battery, recharge, and action masking.

Actions (indices fixed across the whole package):
    0 east, 1 north, 2 west, 3 south, 4 take off, 5 land, 6 charge.
Moving, landing, and taking off each drain one battery step; charging while
landed restores charge_per_step up to capacity. Coverage happens only while
airborne: after each step, every remaining target cell inside the field of
view with an unobstructed line of sight is marked covered.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np

from .maps import MapSpec, UNREACHABLE

EAST, NORTH, WEST, SOUTH, TAKE_OFF, LAND, CHARGE = range(7)
N_ACTIONS = 7
ACTION_NAMES = ("east", "north", "west", "south", "take_off", "land", "charge")

# row delta, column delta for the four directional actions
DELTAS = ((0, 1), (-1, 0), (0, -1), (1, 0))

SOLVED = "solved"
TIMEOUT = "timeout"


class MaskViolationError(RuntimeError):
    """Stepping an action the mask forbids is a programming error, not an env outcome."""


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    """Episode parameters the environment needs beyond the map itself.

    The reward scale r_c, step penalty r_m, battery capacity, field-of-view
    half width, and timeout are all exposed because the original problem
    definition leaves them open; the defaults here are desk-scale choices.
    """

    r_c: float = 0.4
    r_m: float = 0.1
    b_max: int = 40
    charge_per_step: int = 4
    fov_half: int = 2
    timeout: int = 1500
    n_rects_min: int = 1
    n_rects_max: int = 3
    rect_min: int = 2
    rect_max: int = 5
    safety_margin: int = 0

    def validate(self) -> None:
        if self.r_c <= 0 or self.r_m <= 0:
            raise ConfigError("r_c and r_m must be positive")
        if self.b_max <= 0 or self.charge_per_step <= 0:
            raise ConfigError("b_max and charge_per_step must be positive")
        if self.fov_half < 1:
            raise ConfigError("fov_half must be at least 1")
        if self.timeout < 1:
            raise ConfigError("timeout must be at least 1")
        if not (1 <= self.n_rects_min <= self.n_rects_max):
            raise ConfigError("target rectangle count range is invalid")
        if not (1 <= self.rect_min <= self.rect_max):
            raise ConfigError("target rectangle size range is invalid")
        if self.safety_margin < 0:
            raise ConfigError("safety_margin must be nonnegative")
        if self.b_max < self.safety_margin + 2:
            raise ConfigError("b_max too small to ever take off under the mask")


@dataclass
class EnvState:
    """Full world state. Treated as a value: step() never mutates its input."""

    map: MapSpec
    target: np.ndarray
    position: tuple[int, int]
    battery: int
    landed: bool
    step_count: int = 0

    def __eq__(self, other) -> bool:
        if not isinstance(other, EnvState):
            return NotImplemented
        return (
            self.map == other.map
            and np.array_equal(self.target, other.target)
            and self.position == other.position
            and self.battery == other.battery
            and self.landed == other.landed
            and self.step_count == other.step_count
        )

    def copy(self) -> "EnvState":
        return replace(self, target=self.target.copy())


def validate_state(state: EnvState, cfg: ScenarioConfig) -> None:
    mp = state.map
    r, c = state.position
    if not (0 <= r < mp.m and 0 <= c < mp.m):
        raise ValueError(f"position {state.position} out of bounds")
    if state.landed and not mp.landing[r, c]:
        raise ValueError("landed agent must sit on a landing cell")
    if not state.landed and mp.no_fly[r, c]:
        raise ValueError("flying agent inside a no-fly cell")
    if not (0 <= state.battery <= cfg.b_max):
        raise ValueError(f"battery {state.battery} outside [0, {cfg.b_max}]")
    if (state.target & mp.high_obstacle).any():
        raise ValueError("target cells on high obstacles are unobservable")


# ---------------------------------------------------------------------------
# Field of view with exact line-of-sight geometry.
#
# Cells are unit squares; sight runs along the segment between cell centers.
# A cell strictly between the endpoints blocks the ray iff the open segment
# passes through the cell's open interior. Corner and edge grazing therefore
# never blocks, which keeps the predicate exactly invariant under the four
# grid rotations (no tie-breaking anywhere).
# ---------------------------------------------------------------------------

_blocker_cache: dict[int, dict[tuple[int, int], tuple[tuple[int, int], ...]]] = {}


def _segment_crosses_open_cell(dr: int, dc: int, i: int, j: int) -> bool:
    # Segment from (1/2, 1/2) to (dr + 1/2, dc + 1/2); coordinates doubled to
    # stay integral: from (1, 1) to (2dr + 1, 2dc + 1), cell interior
    # (2i, 2i + 2) x (2j, 2j + 2).
    a = (1, 1)
    d = (2 * dr, 2 * dc)
    lo = (2 * i, 2 * j)
    hi = (2 * i + 2, 2 * j + 2)
    t0, t1 = Fraction(0), Fraction(1)
    for axis in range(2):
        if d[axis] == 0:
            if not (lo[axis] < a[axis] < hi[axis]):
                return False
            continue
        ta = Fraction(lo[axis] - a[axis], d[axis])
        tb = Fraction(hi[axis] - a[axis], d[axis])
        if ta > tb:
            ta, tb = tb, ta
        t0 = max(t0, ta)
        t1 = min(t1, tb)
    return t0 < t1


def blocker_table(fov_half: int) -> dict[tuple[int, int], tuple[tuple[int, int], ...]]:
    """For every offset in the FoV window, the strictly-between cells that can occlude it."""
    if fov_half not in _blocker_cache:
        table: dict[tuple[int, int], tuple[tuple[int, int], ...]] = {}
        for dr in range(-fov_half, fov_half + 1):
            for dc in range(-fov_half, fov_half + 1):
                blockers = []
                for i in range(min(0, dr), max(0, dr) + 1):
                    for j in range(min(0, dc), max(0, dc) + 1):
                        if (i, j) in ((0, 0), (dr, dc)):
                            continue
                        if _segment_crosses_open_cell(dr, dc, i, j):
                            blockers.append((i, j))
                table[(dr, dc)] = tuple(blockers)
        _blocker_cache[fov_half] = table
    return _blocker_cache[fov_half]


def _fov_mask(mp: MapSpec, position: tuple[int, int], fov_half: int) -> np.ndarray:
    m = mp.m
    r0, c0 = position
    occ = mp.occluder
    vis = np.zeros((m, m), dtype=bool)
    for (dr, dc), blockers in blocker_table(fov_half).items():
        r, c = r0 + dr, c0 + dc
        if not (0 <= r < m and 0 <= c < m):
            continue
        for bi, bj in blockers:
            if occ[r0 + bi, c0 + bj]:
                break
        else:
            vis[r, c] = True
    return vis


def field_of_view(state: EnvState, cfg: ScenarioConfig) -> set[tuple[int, int]]:
    """Visible cells around a flying agent; a landed agent sees nothing."""
    if state.landed:
        return set()
    vis = _fov_mask(state.map, state.position, cfg.fov_half)
    return {(int(r), int(c)) for r, c in np.argwhere(vis)}


# ---------------------------------------------------------------------------
# Action mask and transition.
# ---------------------------------------------------------------------------


def action_mask(state: EnvState, cfg: ScenarioConfig) -> np.ndarray:
    """Boolean mask over the 7 actions.

    Movement is allowed only into in-bounds flyable cells from which the
    remaining battery still covers the shortest flyable path to a landing
    cell, the landing step itself, and the safety margin. Landed agents may
    only take off (with enough battery to land again) or charge (below
    capacity).
    """
    mp = state.map
    mask = np.zeros(N_ACTIONS, dtype=bool)
    r, c = state.position
    if state.landed:
        mask[TAKE_OFF] = state.battery > 1 + cfg.safety_margin
        mask[CHARGE] = state.battery < cfg.b_max
        return mask
    dist = mp.dist_to_landing()
    for a, (dr, dc) in enumerate(DELTAS):
        nr, nc = r + dr, c + dc
        if not (0 <= nr < mp.m and 0 <= nc < mp.m):
            continue
        if mp.no_fly[nr, nc]:
            continue
        d = dist[nr, nc]
        if d != UNREACHABLE and d + 1 + cfg.safety_margin <= state.battery - 1:
            mask[a] = True
    mask[LAND] = bool(mp.landing[r, c]) and state.battery >= 1
    return mask


def step(state: EnvState, action: int, cfg: ScenarioConfig) -> tuple[EnvState, float, str | None]:
    """Deterministic transition. Raises MaskViolationError on forbidden actions."""
    if not 0 <= action < N_ACTIONS:
        raise ValueError(f"action index {action} out of range")
    if not action_mask(state, cfg)[action]:
        raise MaskViolationError(
            f"action {ACTION_NAMES[action]} is masked at position {state.position} "
            f"(battery {state.battery}, landed {state.landed})"
        )
    position = state.position
    battery = state.battery
    landed = state.landed
    target = state.target.copy()
    if action < 4:
        dr, dc = DELTAS[action]
        position = (position[0] + dr, position[1] + dc)
        battery -= 1
    elif action == TAKE_OFF:
        landed = False
        battery -= 1
    elif action == LAND:
        landed = True
        battery -= 1
    else:
        battery = min(cfg.b_max, battery + cfg.charge_per_step)
    covered = 0
    if not landed:
        newly = _fov_mask(state.map, position, cfg.fov_half) & target
        covered = int(newly.sum())
        target &= ~newly
    reward = cfg.r_c * covered - cfg.r_m
    nxt = EnvState(
        map=state.map,
        target=target,
        position=position,
        battery=battery,
        landed=landed,
        step_count=state.step_count + 1,
    )
    if landed and not target.any():
        done = SOLVED
    elif nxt.step_count >= cfg.timeout:
        done = TIMEOUT
    else:
        done = None
    return nxt, reward, done


# ---------------------------------------------------------------------------
# Scenario generation.
# ---------------------------------------------------------------------------


def generate_targets(mp: MapSpec, cfg: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    """Union of random axis-aligned rectangles, clipped to observable cells.

    Redraws (bounded) until at least one target cell survives the clipping.
    """
    legal = ~mp.high_obstacle
    for _ in range(100):
        target = np.zeros((mp.m, mp.m), dtype=bool)
        n = int(rng.integers(cfg.n_rects_min, cfg.n_rects_max + 1))
        for _ in range(n):
            h = int(rng.integers(cfg.rect_min, min(cfg.rect_max, mp.m) + 1))
            w = int(rng.integers(cfg.rect_min, min(cfg.rect_max, mp.m) + 1))
            r0 = int(rng.integers(0, mp.m - h + 1))
            c0 = int(rng.integers(0, mp.m - w + 1))
            target[r0 : r0 + h, c0 : c0 + w] = True
        target &= legal
        if target.any():
            return target
    raise RuntimeError(f"could not place any target on map {mp.name!r}")


def reset(mp: MapSpec, cfg: ScenarioConfig, seed: int) -> EnvState:
    """Fresh episode: agent landed on a random landing cell, full battery, random targets."""
    cfg.validate()
    mp.validate()
    rng = np.random.default_rng(seed)
    cells = np.argwhere(mp.landing)
    r, c = cells[int(rng.integers(len(cells)))]
    target = generate_targets(mp, cfg, rng)
    return EnvState(map=mp, target=target, position=(int(r), int(c)), battery=cfg.b_max, landed=True)


def reset_with_targets(
    mp: MapSpec, cfg: ScenarioConfig, targets: list[tuple[int, int]], seed: int
) -> EnvState:
    """Episode with an explicit target-cell list (scenario files); seed picks the landing cell."""
    cfg.validate()
    mp.validate()
    rng = np.random.default_rng(seed)
    cells = np.argwhere(mp.landing)
    r, c = cells[int(rng.integers(len(cells)))]
    target = np.zeros((mp.m, mp.m), dtype=bool)
    for tr, tc in targets:
        if not (0 <= tr < mp.m and 0 <= tc < mp.m):
            raise ValueError(f"target cell ({tr},{tc}) out of bounds")
        if mp.high_obstacle[tr, tc]:
            raise ValueError(f"target cell ({tr},{tc}) sits on a high obstacle")
        target[tr, tc] = True
    if not target.any():
        raise ValueError("scenario has no target cells")
    return EnvState(map=mp, target=target, position=(int(r), int(c)), battery=cfg.b_max, landed=True)


# ---------------------------------------------------------------------------
# Observation.
# ---------------------------------------------------------------------------

N_CHANNELS = 5
N_SCALARS = 2


@dataclass
class Observation:
    """Network input: stacked map channels plus a scalar feature vector.

    Channels: 0 landing zones, 1 no-fly, 2 occluders, 3 remaining target,
    4 agent position one-hot. Scalars: battery fraction, landed flag.
    """

    layers: np.ndarray  # (5, m, m) float64
    scalars: np.ndarray  # (2,) float64


def observe(state: EnvState, cfg: ScenarioConfig) -> Observation:
    mp = state.map
    layers = np.zeros((N_CHANNELS, mp.m, mp.m), dtype=np.float64)
    layers[0] = mp.landing
    layers[1] = mp.no_fly
    layers[2] = mp.occluder
    layers[3] = state.target
    layers[4, state.position[0], state.position[1]] = 1.0
    scalars = np.array([state.battery / cfg.b_max, 1.0 if state.landed else 0.0])
    return Observation(layers=layers, scalars=scalars)
