"""Deterministic non-learning planner, the comparator for the relative-deviation metric.

Greedy scheme: fly the shortest flyable path to the nearest cell whose field
of view still covers an uncovered target; when the battery-safety mask blocks
that, head to the nearest landing zone, land, charge to full, take off, and
resume. Every returned action is mask-legal.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .env import (
    CHARGE,
    DELTAS,
    EnvState,
    LAND,
    ScenarioConfig,
    TAKE_OFF,
    action_mask,
    blocker_table,
)
from .maps import UNREACHABLE


@dataclass
class PlanState:
    """Cached plan between calls; safe to start empty at any state."""

    waypoints: deque = field(default_factory=deque)
    return_committed: bool = False
    _vantage: np.ndarray | None = None
    _target_count: int = -1


def _vantage_mask(state: EnvState, cfg: ScenarioConfig) -> np.ndarray:
    """Flyable cells from which at least one remaining target cell is visible."""
    mp = state.map
    occ = mp.occluder
    vantage = np.zeros((mp.m, mp.m), dtype=bool)
    table = blocker_table(cfg.fov_half)
    for tr, tc in np.argwhere(state.target):
        for (dr, dc), blockers in table.items():
            vr, vc = tr - dr, tc - dc
            if not (0 <= vr < mp.m and 0 <= vc < mp.m) or vantage[vr, vc] or mp.no_fly[vr, vc]:
                continue
            for bi, bj in blockers:
                if occ[vr + bi, vc + bj]:
                    break
            else:
                vantage[vr, vc] = True
    return vantage


def _bfs_first_step(mp, start: tuple[int, int], goal_mask: np.ndarray) -> int | None:
    """First directional action of a shortest flyable path into goal_mask.

    Deterministic tie-breaking: breadth-first with neighbors expanded in
    action-index order (east, north, west, south).
    """
    if goal_mask[start]:
        return None
    m = mp.m
    prev_action = np.full((m, m), -1, dtype=np.int8)
    seen = np.zeros((m, m), dtype=bool)
    seen[start] = True
    queue = deque([start])
    flyable = mp.flyable
    while queue:
        r, c = queue.popleft()
        for a, (dr, dc) in enumerate(DELTAS):
            nr, nc = r + dr, c + dc
            if not (0 <= nr < m and 0 <= nc < m) or seen[nr, nc] or not flyable[nr, nc]:
                continue
            seen[nr, nc] = True
            prev_action[nr, nc] = prev_action[r, c] if prev_action[r, c] >= 0 else a
            if goal_mask[nr, nc]:
                return int(prev_action[nr, nc])
            queue.append((nr, nc))
    return None


def _step_toward_landing(state: EnvState, mask: np.ndarray) -> int:
    """A mask-legal move that decreases the distance-to-landing field."""
    dist = state.map.dist_to_landing()
    r, c = state.position
    for a, (dr, dc) in enumerate(DELTAS):
        nr, nc = r + dr, c + dc
        if not (0 <= nr < state.map.m and 0 <= nc < state.map.m):
            continue
        if mask[a] and dist[nr, nc] != UNREACHABLE and dist[nr, nc] == dist[r, c] - 1:
            return a
    return int(np.flatnonzero(mask)[0])  # plan blocked, any legal action


def heuristic_action(state: EnvState, plan: PlanState, cfg: ScenarioConfig) -> int:
    mask = action_mask(state, cfg)
    targets_left = bool(state.target.any())

    if state.landed:
        plan.return_committed = False
        if state.battery < cfg.b_max and mask[CHARGE]:
            return CHARGE
        return TAKE_OFF

    if not targets_left:
        if mask[LAND]:
            return LAND
        return _step_toward_landing(state, mask)

    count = int(state.target.sum())
    if plan._vantage is None or plan._target_count != count:
        plan._vantage = _vantage_mask(state, cfg)
        plan._target_count = count
        plan.waypoints.clear()

    if not plan.return_committed:
        a = _bfs_first_step(state.map, state.position, plan._vantage)
        if a is not None and mask[a]:
            return a
    # either no vantage is reachable or the battery mask blocks the approach:
    # return to a landing zone and recharge
    plan.return_committed = True
    if mask[LAND]:
        return LAND
    return _step_toward_landing(state, mask)


def relative_deviation(agent_steps: int, heuristic_steps: int) -> float:
    """(agent - heuristic) / heuristic episode steps; both episodes must be solved."""
    if agent_steps <= 0 or heuristic_steps <= 0:
        raise ValueError("relative deviation is defined only for solved episodes")
    return (agent_steps - heuristic_steps) / heuristic_steps
