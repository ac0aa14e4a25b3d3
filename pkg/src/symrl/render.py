"""ASCII rendering of episodes for debugging: one frame per step on stdout."""

from __future__ import annotations

import numpy as np

from .env import ACTION_NAMES, EnvState, ScenarioConfig, _fov_mask, step


def render_frame(state: EnvState, cfg: ScenarioConfig, trail: set | None = None) -> str:
    """Single frame: structure, remaining targets, FoV, trajectory, agent, battery."""
    mp = state.map
    grid = np.full((mp.m, mp.m), ".", dtype="<U1")
    grid[mp.landing] = "L"
    grid[mp.nfz] = "N"
    grid[mp.low_obstacle] = "o"
    grid[mp.high_obstacle] = "O"
    if trail:
        for r, c in trail:
            grid[r, c] = ","
    if not state.landed:
        fov = _fov_mask(mp, state.position, cfg.fov_half)
        grid[fov & (grid == ".")] = "+"
    grid[state.target] = "*"
    r, c = state.position
    grid[r, c] = "A" if state.landed else "@"
    rows = ["".join(row) for row in grid]
    rows.append(
        f"step {state.step_count}  battery {state.battery}/{cfg.b_max}  "
        f"{'landed' if state.landed else 'flying'}  targets {int(state.target.sum())}"
    )
    return "\n".join(rows)


def render_episode(policy, state: EnvState, cfg: ScenarioConfig, out=None) -> list[str]:
    """Play one greedy episode, printing a frame per step; returns all frames."""
    policy.start_episode()
    trail: set = set()
    frames = [render_frame(state, cfg, trail)]
    done = None
    while done is None:
        a = policy.act(state, cfg)
        trail.add(state.position)
        state, reward, done = step(state, a, cfg)
        frame = render_frame(state, cfg, trail)
        frames.append(frame + f"  action {ACTION_NAMES[a]}  reward {reward:+.2f}")
    frames[-1] += f"  [{done}]"
    if out is not None:
        for frame in frames:
            print(frame, file=out)
            print(file=out)
    return frames
