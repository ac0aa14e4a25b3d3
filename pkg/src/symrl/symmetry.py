"""The C4 rotation group and its action on states, actions, distributions, and masks.

Convention (fixed package-wide): row r grows southward, column c grows
eastward, north is dr = -1. The 90-degree counterclockwise rotation maps
cell (r, c) to (m - 1 - c, r), exactly np.rot90. Rotating a displacement
vector the same way sends east to north, north to west, west to south,
and south to east; land, take off, and charge are unaffected.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .env import EnvState, N_ACTIONS, Observation
from .maps import rotate_map


@dataclass(frozen=True)
class GroupElement:
    """Counterclockwise rotation by 90*k degrees."""

    k: int

    def __post_init__(self):
        if self.k not in (0, 1, 2, 3):
            raise ValueError(f"rotation index {self.k} not in 0..3")


E = GroupElement(0)
R90 = GroupElement(1)
R180 = GroupElement(2)
R270 = GroupElement(3)
GROUP = (E, R90, R180, R270)


def compose(a: GroupElement, b: GroupElement) -> GroupElement:
    """Apply b first, then a."""
    return GROUP[(a.k + b.k) % 4]


def inverse(a: GroupElement) -> GroupElement:
    return GROUP[(4 - a.k) % 4]


# ACTION_PERMS[k][a]: the action a becomes under rotation by 90*k degrees.
# Directions cycle east -> north -> west -> south; the rest map to themselves.
ACTION_PERMS = np.array(
    [[(a + k) % 4 if a < 4 else a for a in range(N_ACTIONS)] for k in range(4)],
    dtype=np.intp,
)
INV_ACTION_PERMS = np.array([ACTION_PERMS[(4 - k) % 4] for k in range(4)], dtype=np.intp)


@dataclass(frozen=True)
class ActionPermutation:
    """The bijection on action indices induced by one group element."""

    perm: tuple[int, ...]

    @classmethod
    def of(cls, g: GroupElement) -> "ActionPermutation":
        return cls(tuple(int(x) for x in ACTION_PERMS[g.k]))

    def apply(self, action: int) -> int:
        return self.perm[action]


def transform_action(g: GroupElement, action: int) -> int:
    if not 0 <= action < N_ACTIONS:
        raise ValueError(f"action index {action} out of range")
    return int(ACTION_PERMS[g.k][action])


def transform_position(g: GroupElement, position: tuple[int, int], m: int) -> tuple[int, int]:
    r, c = position
    for _ in range(g.k):
        r, c = m - 1 - c, r
    return (r, c)


def rotate_grid(g: GroupElement, grid: np.ndarray) -> np.ndarray:
    """Rotate the last two axes by 90*g.k degrees counterclockwise."""
    if g.k == 0:
        return grid.copy()
    return np.ascontiguousarray(np.rot90(grid, g.k, axes=(-2, -1)))


def transform_state(g: GroupElement, state: EnvState) -> EnvState:
    """L_g: rotate every map layer and the target map, move the position along.

    Battery, landed flag, and step count are untouched. Exact bijection:
    applying g then inverse(g) reproduces the input bit for bit.
    """
    if g.k == 0:
        return state.copy()
    return replace(
        state,
        map=rotate_map(state.map, g.k),
        target=rotate_grid(g, state.target),
        position=transform_position(g, state.position, state.map.m),
    )


def transform_distribution(g: GroupElement, p: np.ndarray) -> np.ndarray:
    """P_g: permute probability mass so that q[K_g[a]] = p[a]."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (N_ACTIONS,):
        raise ValueError(f"expected a distribution over {N_ACTIONS} actions, got shape {p.shape}")
    if (p < 0).any():
        raise ValueError("distribution has negative entries")
    if abs(float(p.sum()) - 1.0) > 1e-9:
        raise ValueError(f"distribution sums to {p.sum()!r}, not 1")
    q = np.empty_like(p)
    q[ACTION_PERMS[g.k]] = p
    return q


def transform_mask(g: GroupElement, mask: np.ndarray) -> np.ndarray:
    """Permute a boolean action mask by K_g."""
    mask = np.asarray(mask)
    if mask.shape != (N_ACTIONS,):
        raise ValueError(f"expected a mask over {N_ACTIONS} actions, got shape {mask.shape}")
    out = np.empty_like(mask)
    out[ACTION_PERMS[g.k]] = mask
    return out


def rotate_observation(g: GroupElement, obs: Observation) -> Observation:
    """Equals observe(transform_state(g, s)) bit for bit, without rebuilding the state."""
    return Observation(layers=rotate_grid(g, obs.layers), scalars=obs.scalars.copy())
