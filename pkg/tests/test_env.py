import numpy as np
import pytest

from symrl.env import (
    CHARGE,
    EAST,
    LAND,
    NORTH,
    SOUTH,
    TAKE_OFF,
    WEST,
    EnvState,
    MaskViolationError,
    ScenarioConfig,
    SOLVED,
    TIMEOUT,
    action_mask,
    field_of_view,
    generate_targets,
    observe,
    reset,
    reset_with_targets,
    step,
    validate_state,
)
from symrl.maps import load_map

from conftest import random_map, random_state
from oracles import bfs_distances, discounted_return, sampled_line_of_sight


def flying(mp, pos, battery, cfg, target=None):
    t = np.zeros((mp.m, mp.m), dtype=bool) if target is None else target
    return EnvState(map=mp, target=t, position=pos, battery=battery, landed=False)


# -- reset -------------------------------------------------------------------


def test_reset_deterministic(open8, small_cfg):
    a = reset(open8, small_cfg, seed=123)
    b = reset(open8, small_cfg, seed=123)
    assert a == b
    c = reset(open8, small_cfg, seed=124)
    assert a != c or a.target.sum() != c.target.sum() or True  # different seed may coincide


def test_reset_single_landing_cell(small_cfg):
    mp = load_map("CPPMAP v1\n....\n..L.\n....\n....\n")
    for seed in range(10):
        s = reset(mp, small_cfg, seed)
        assert s.position == (1, 2)
        assert s.landed and s.battery == small_cfg.b_max and s.step_count == 0


def test_reset_targets_never_on_high_obstacles(small_cfg):
    rng = np.random.default_rng(0)
    for trial in range(50):
        mp = random_map(int(rng.integers(4, 10)), rng, p_high=0.25)
        for seed in range(20):
            s = reset(mp, small_cfg, seed)
            assert not (s.target & mp.high_obstacle).any()
            assert s.target.any()
            validate_state(s, small_cfg)


def test_generate_targets_property_1000_seeds(open8, small_cfg):
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        t = generate_targets(open8, small_cfg, rng)
        assert t.any() and not (t & open8.high_obstacle).any()


def test_reset_with_targets(open8, small_cfg):
    s = reset_with_targets(open8, small_cfg, [(0, 0), (7, 7)], seed=1)
    assert s.target[0, 0] and s.target[7, 7] and s.target.sum() == 2
    with pytest.raises(ValueError):
        reset_with_targets(open8, small_cfg, [(2, 2)], seed=1)  # high obstacle cell


# -- field of view -------------------------------------------------------------


def test_fov_open_map_full_square():
    mp = load_map("CPPMAP v1\n" + "\n".join(["." * 7] * 6 + ["L" + "." * 6]) + "\n")
    cfg = ScenarioConfig(fov_half=2, b_max=20)
    s = flying(mp, (3, 3), 10, cfg)
    fov = field_of_view(s, cfg)
    assert len(fov) == 25
    assert fov == {(r, c) for r in range(1, 6) for c in range(1, 6)}


def test_fov_landed_empty(open8, small_cfg):
    s = EnvState(map=open8, target=np.zeros((8, 8), bool), position=(1, 2), battery=5, landed=True)
    assert field_of_view(s, small_cfg) == set()


def test_fov_adjacent_occluder_blocks_column():
    # agent at (3,3), occluder due north at (2,3): strictly beyond cells on
    # that column are invisible
    rows = ["......."] * 7
    rows[2] = "...o..."
    rows[6] = "L......"
    mp = load_map("CPPMAP v1\n" + "\n".join(rows) + "\n")
    cfg = ScenarioConfig(fov_half=3, b_max=20)
    s = flying(mp, (3, 3), 10, cfg)
    fov = field_of_view(s, cfg)
    assert (2, 3) in fov  # the occluder cell itself is visible
    assert (1, 3) not in fov and (0, 3) not in fov


def test_fov_matches_sampled_ray_oracle(small_cfg):
    rng = np.random.default_rng(1)
    checked = 0
    for _ in range(12):
        mp = random_map(7, rng, p_low=0.25, p_high=0.15)
        cells = np.argwhere(mp.flyable)
        r, c = map(int, cells[rng.integers(len(cells))])
        cfg = ScenarioConfig(fov_half=3, b_max=20)
        s = flying(mp, (r, c), 10, cfg)
        fov = field_of_view(s, cfg)
        for dr in range(-3, 4):
            for dc in range(-3, 4):
                tr, tc = r + dr, c + dc
                if not (0 <= tr < 7 and 0 <= tc < 7):
                    continue
                expected = sampled_line_of_sight(mp.occluder, (r, c), (tr, tc))
                assert ((tr, tc) in fov) == expected
                checked += 1
    assert checked > 300


# -- action mask ----------------------------------------------------------------


def test_mask_landed_exactly_takeoff_charge(open8, small_cfg):
    s = EnvState(map=open8, target=np.ones((8, 8), bool) & ~open8.high_obstacle,
                 position=(1, 2), battery=small_cfg.b_max, landed=True)
    mask = action_mask(s, small_cfg)
    assert mask[TAKE_OFF] and not mask[CHARGE]  # charge masked at full battery
    assert not mask[:4].any() and not mask[LAND]
    s2 = EnvState(map=open8, target=s.target, position=(1, 2), battery=small_cfg.b_max - 1, landed=True)
    mask2 = action_mask(s2, small_cfg)
    assert mask2[TAKE_OFF] and mask2[CHARGE]
    assert list(np.flatnonzero(mask2)) == [TAKE_OFF, CHARGE]


def test_mask_edge_of_map(small_cfg):
    mp = load_map("CPPMAP v1\nL...\n....\n....\n....\n")
    s = flying(mp, (0, 0), 20, small_cfg)
    mask = action_mask(s, small_cfg)
    assert not mask[NORTH] and not mask[WEST]
    assert mask[EAST] and mask[SOUTH]
    assert mask[LAND]


def test_mask_battery_threshold_matches_bfs_oracle():
    cfg = ScenarioConfig(b_max=30, safety_margin=1)
    rng = np.random.default_rng(2)
    from symrl.env import DELTAS

    for _ in range(300):
        mp = random_map(int(rng.integers(4, 10)), rng)
        s = random_state(mp, cfg, rng)
        if s.landed:
            continue
        mask = action_mask(s, cfg)
        oracle = bfs_distances(mp.flyable, mp.landing)
        for a, (dr, dc) in enumerate(DELTAS):
            nr, nc = s.position[0] + dr, s.position[1] + dc
            legal = (
                0 <= nr < mp.m
                and 0 <= nc < mp.m
                and not mp.no_fly[nr, nc]
                and oracle[nr, nc] >= 0
                and oracle[nr, nc] + 1 + cfg.safety_margin <= s.battery - 1
            )
            assert mask[a] == legal


def test_mask_exact_boundary_battery():
    # battery exactly dist+1+margin: moves that increase the distance are masked
    mp = load_map("CPPMAP v1\nL....\n.....\n.....\n.....\n.....\n")
    cfg = ScenarioConfig(b_max=20, safety_margin=0)
    dist = mp.dist_to_landing()
    pos = (2, 2)
    batt = dist[pos] + 1 + 0 + 1  # exactly enough to move closer, then land
    s = flying(mp, pos, int(batt), cfg)
    mask = action_mask(s, cfg)
    from symrl.env import DELTAS

    for a, (dr, dc) in enumerate(DELTAS):
        nr, nc = pos[0] + dr, pos[1] + dc
        assert mask[a] == (dist[nr, nc] < dist[pos])


# -- step -------------------------------------------------------------------------


def test_step_move_east(open8, small_cfg):
    s = flying(open8, (3, 3), 20, small_cfg)
    s2, reward, done = step(s, EAST, small_cfg)
    assert s2.position == (3, 4) and s2.battery == 19 and not s2.landed
    assert s2.step_count == 1 and done is None
    assert s.battery == 20  # input untouched


def test_step_reward_formula(open8):
    cfg = ScenarioConfig(r_c=0.4, r_m=0.1, b_max=25, fov_half=1)
    # place exactly 3 targets inside the post-move FoV
    target = np.zeros((8, 8), bool)
    target[3, 4] = target[4, 4] = target[4, 5] = True
    s = flying(open8, (3, 3), 20, cfg, target=target)
    s2, reward, done = step(s, EAST, cfg)
    assert reward == 0.4 * 3 - 0.1 == pytest.approx(1.1)
    assert not s2.target.any()


def test_step_masked_action_raises(open8, small_cfg):
    s = EnvState(map=open8, target=np.ones((8, 8), bool) & ~open8.high_obstacle,
                 position=(1, 2), battery=10, landed=True)
    with pytest.raises(MaskViolationError):
        step(s, EAST, small_cfg)
    with pytest.raises(ValueError):
        step(s, 9, small_cfg)


def test_step_solved_on_landing(open8, small_cfg):
    target = np.zeros((8, 8), bool)
    target[1, 3] = True
    s = flying(open8, (1, 3), 20, small_cfg, target=target)
    # flying over the last target does not cover it (it is the agent's cell
    # and was covered on arrival in a real episode); cover it explicitly here
    s2, _, done = step(s, WEST, small_cfg)  # moving covers cell (1,3) via FoV
    assert not s2.target.any() and done is None  # airborne, not solved yet
    assert s2.position == (1, 2)
    s3, _, done3 = step(s2, LAND, small_cfg)
    assert done3 == SOLVED and s3.landed


def test_step_timeout(open8):
    cfg = ScenarioConfig(b_max=25, timeout=3)
    s = reset(open8, cfg, seed=5)
    done = None
    steps = 0
    while done is None:
        mask = action_mask(s, cfg)
        s, _, done = step(s, int(np.flatnonzero(mask)[0]), cfg)
        steps += 1
    assert done in (SOLVED, TIMEOUT) and steps <= 3


def test_charge_caps_at_bmax(open8):
    cfg = ScenarioConfig(b_max=25, charge_per_step=10)
    s = EnvState(map=open8, target=np.ones((8, 8), bool) & ~open8.high_obstacle,
                 position=(1, 2), battery=20, landed=True)
    s2, reward, _ = step(s, CHARGE, cfg)
    assert s2.battery == 25 and s2.landed
    assert reward == -cfg.r_m  # landed, no coverage


def test_takeoff_covers_fov(open8, small_cfg):
    target = np.ones((8, 8), bool) & ~open8.high_obstacle
    s = EnvState(map=open8, target=target, position=(1, 2), battery=25, landed=True)
    s2, reward, _ = step(s, TAKE_OFF, small_cfg)
    assert not s2.landed and s2.battery == 24
    assert s2.target.sum() < target.sum()  # FoV coverage applied after take off
    assert reward > 0


def test_coverage_monotone_and_battery_conservation(small_cfg):
    rng = np.random.default_rng(3)
    for _ in range(40):
        mp = random_map(int(rng.integers(5, 9)), rng)
        s = reset(mp, small_cfg, int(rng.integers(1 << 31)))
        done = None
        while done is None:
            mask = action_mask(s, small_cfg)
            legal = np.flatnonzero(mask)
            a = int(legal[rng.integers(len(legal))])
            s2, _, done = step(s, a, small_cfg)
            assert (s2.target & ~s.target).sum() == 0  # never grows
            if a == CHARGE:
                assert s2.battery == min(small_cfg.b_max, s.battery + small_cfg.charge_per_step)
            else:
                assert s2.battery == s.battery - 1
            s = s2


def test_mask_safety_battery_never_zero_airborne():
    # adversarial random mask-respecting policy across many episodes
    cfg = ScenarioConfig(b_max=12, timeout=120)
    rng = np.random.default_rng(4)
    episodes = 0
    while episodes < 1000:
        mp = random_map(int(rng.integers(4, 8)), rng)
        s = reset(mp, cfg, int(rng.integers(1 << 31)))
        done = None
        while done is None:
            legal = np.flatnonzero(action_mask(s, cfg))
            assert len(legal) > 0
            s, _, done = step(s, int(legal[rng.integers(len(legal))]), cfg)
            if not s.landed:
                assert s.battery > 0
        assert done in (SOLVED, TIMEOUT)
        episodes += 1


def test_every_episode_terminates(open8, small_cfg):
    rng = np.random.default_rng(5)
    for _ in range(50):
        s = reset(open8, small_cfg, int(rng.integers(1 << 31)))
        done = None
        steps = 0
        while done is None:
            legal = np.flatnonzero(action_mask(s, small_cfg))
            s, _, done = step(s, int(legal[rng.integers(len(legal))]), small_cfg)
            steps += 1
        assert steps <= small_cfg.timeout


def test_trajectory_return_matches_discounted_oracle(open8, small_cfg):
    # the discounted sum of step rewards equals the definitional oracle
    rng = np.random.default_rng(6)
    gamma = 0.9
    s = reset(open8, small_cfg, 7)
    rewards = []
    done = None
    while done is None:
        legal = np.flatnonzero(action_mask(s, small_cfg))
        s, r, done = step(s, int(legal[rng.integers(len(legal))]), small_cfg)
        rewards.append(r)
    direct = discounted_return(rewards, gamma)
    acc = 0.0
    for t, r in enumerate(rewards):
        acc += (gamma**t) * r
    assert direct == pytest.approx(acc, abs=1e-12)


# -- observe ------------------------------------------------------------------------


def test_observe_channels(open8, small_cfg):
    s = reset(open8, small_cfg, seed=9)
    obs = observe(s, small_cfg)
    assert obs.layers.shape == (5, 8, 8)
    assert obs.layers[4].sum() == 1.0
    assert obs.layers[4][s.position] == 1.0
    assert np.array_equal(obs.layers[0] > 0, open8.landing)
    assert np.array_equal(obs.layers[1] > 0, open8.no_fly)
    assert np.array_equal(obs.layers[2] > 0, open8.occluder)
    assert np.array_equal(obs.layers[3] > 0, s.target)
    assert obs.scalars[0] == 1.0  # full battery
    assert obs.scalars[1] == 1.0  # landed


def test_symmetric_mdp_property_random_transitions(small_cfg):
    # step/reward/done commute exactly with the paired transformations
    from symrl import symmetry as sym

    rng = np.random.default_rng(7)
    checked = 0
    while checked < 2000:
        mp = random_map(int(rng.integers(4, 10)), rng)
        s = random_state(mp, small_cfg, rng)
        legal = np.flatnonzero(action_mask(s, small_cfg))
        if len(legal) == 0:
            continue
        a = int(legal[rng.integers(len(legal))])
        s2, reward, done = step(s, a, small_cfg)
        for g in sym.GROUP:
            t2, treward, tdone = step(sym.transform_state(g, s), sym.transform_action(g, a), small_cfg)
            assert t2 == sym.transform_state(g, s2)
            assert treward == reward and tdone == done
        checked += 1
