"""Greedy evaluation suites (plain, rotated, scenario files), equivariance probes,
and their CSV reports."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .ensemble import ensemble_eval, eval_branches, ensemble_from_branches
from .env import EnvState, ScenarioConfig, action_mask, observe, reset, step, SOLVED
from .heuristic import PlanState, heuristic_action
from .maps import MapSpec
from .net import ParamNet, masked_policy
from .symmetry import (
    ACTION_PERMS,
    GROUP,
    inverse,
    rotate_observation,
    transform_action,
    transform_mask,
    transform_state,
)


def worker_count() -> int:
    """Worker pool size, capped by the SYMRL_THREADS environment variable."""
    raw = os.environ.get("SYMRL_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    return max(1, n) if n else min(8, os.cpu_count() or 1)


# ---------------------------------------------------------------------------
# Policies for greedy evaluation.
# ---------------------------------------------------------------------------


class HeuristicPolicy:
    name = "heuristic"

    def __init__(self):
        self._plan = PlanState()

    def start_episode(self) -> None:
        self._plan = PlanState()

    def act(self, state: EnvState, cfg: ScenarioConfig, frame_k: int = 0) -> int:
        return heuristic_action(state, self._plan, cfg)


class NetPolicy:
    """Greedy argmax policy over a trained net, raw or ensemble-wrapped.

    Ties break toward the lowest action index. For the ensemble, the argmax
    is taken on the distribution pulled back to the canonical frame (frame_k
    identifies the rotation an evaluation suite applied to the scenario), so
    ties break identically in every frame and rotated suites reproduce the
    canonical trajectory exactly.
    """

    def __init__(self, net: ParamNet, kind: str = "raw"):
        if kind not in ("raw", "ensemble"):
            raise ValueError(f"unknown policy kind {kind!r}")
        self.net = net
        self.kind = kind
        self.name = kind

    def start_episode(self) -> None:
        pass

    def act(self, state: EnvState, cfg: ScenarioConfig, frame_k: int = 0) -> int:
        mask = action_mask(state, cfg)
        if self.kind == "raw":
            logits, _ = self.net.forward(observe(state, cfg))
            return int(np.argmax(masked_policy(logits, mask)))
        g_inv = inverse(GROUP[frame_k])
        obs = rotate_observation(g_inv, observe(state, cfg))
        mask_canon = transform_mask(g_inv, mask)
        ens_p, _, _ = _ensemble_batch(self.net, obs.layers[None], obs.scalars[None], mask_canon[None])
        a_canon = int(np.argmax(ens_p[0]))
        return transform_action(GROUP[frame_k], a_canon)


def _ensemble_batch(net, layers, scalars, masks):
    branches = eval_branches(net, net.param_tensors(), layers, scalars, masks)
    ens_p, ens_v = ensemble_from_branches(branches)
    return ens_p.data, ens_v.data, branches


@dataclass
class EpisodeResult:
    solved: bool
    steps: int
    coverage_ratio: float
    total_reward: float


def run_episode(policy, state: EnvState, cfg: ScenarioConfig, frame_k: int = 0) -> EpisodeResult:
    policy.start_episode()
    initial = int(state.target.sum())
    total_reward = 0.0
    done = None
    steps = 0
    while done is None:
        a = policy.act(state, cfg, frame_k=frame_k)
        state, reward, done = step(state, a, cfg)
        total_reward += reward
        steps += 1
    remaining = int(state.target.sum())
    cr = 1.0 if done == SOLVED else (initial - remaining) / initial
    return EpisodeResult(solved=done == SOLVED, steps=steps, coverage_ratio=cr, total_reward=total_reward)


# ---------------------------------------------------------------------------
# Evaluation report.
# ---------------------------------------------------------------------------

EVAL_RECORD_HEADER = "map,rotation,seed,solved,coverage_ratio,steps,rd"
EVAL_SUMMARY_HEADER = "metric,value,spread"


@dataclass
class EvalRecord:
    map_name: str
    rotation: int  # degrees: 0, 90, 180, 270
    seed: int
    solved: bool
    coverage_ratio: float
    steps: int
    rd: float  # nan unless both the agent and the heuristic solved the episode


@dataclass
class EvalReport:
    records: list[EvalRecord]
    aggregates: dict[str, tuple[float, float]]  # metric -> (value, spread)

    def records_csv(self) -> str:
        lines = [EVAL_RECORD_HEADER]
        for r in self.records:
            lines.append(
                f"{r.map_name},{r.rotation},{r.seed},{int(r.solved)},"
                f"{r.coverage_ratio!r},{r.steps},{r.rd!r}"
            )
        return "\n".join(lines) + "\n"

    def summary_csv(self) -> str:
        lines = [EVAL_SUMMARY_HEADER]
        for metric, (value, spread) in self.aggregates.items():
            lines.append(f"{metric},{value!r},{spread!r}")
        return "\n".join(lines) + "\n"

    def solved_ratio(self) -> float:
        return self.aggregates["solved_ratio"][0]


def _aggregate(records: list[EvalRecord]) -> dict[str, tuple[float, float]]:
    if not records:
        return {"solved_ratio": (float("nan"), 0.0), "mean_cr": (float("nan"), 0.0), "median_rd": (float("nan"), 0.0)}
    crs = np.array([r.coverage_ratio for r in records])
    solved = np.array([r.solved for r in records])
    rds = np.array([r.rd for r in records if not np.isnan(r.rd)])
    median_rd = float(np.median(rds)) if rds.size else float("nan")
    rd_spread = float(np.max(np.abs(rds - median_rd))) if rds.size else 0.0
    return {
        "solved_ratio": (float(solved.mean()), 0.0),
        "mean_cr": (float(crs.mean()), float(np.max(np.abs(crs - crs.mean()))) if crs.size else 0.0),
        "median_rd": (median_rd, rd_spread),
    }


def _verify_report(report: EvalReport) -> None:
    # aggregates must be recomputable from the serialized records
    lines = report.records_csv().strip().splitlines()[1:]
    parsed = []
    for ln in lines:
        map_name, rotation, seed, solved, cr, steps, rd = ln.split(",")
        parsed.append(
            EvalRecord(map_name, int(rotation), int(seed), bool(int(solved)), float(cr), int(steps), float(rd))
        )
    redo = _aggregate(parsed)
    for key, (value, spread) in report.aggregates.items():
        rv, rs = redo[key]
        same = lambda a, b: (np.isnan(a) and np.isnan(b)) or a == b
        if not (same(value, rv) and same(spread, rs)):
            raise AssertionError(f"aggregate {key} not recomputable from records")


def _episode_for(policy_factory, mp: MapSpec, scfg: ScenarioConfig, seed: int, k: int, with_rd: bool):
    s0 = reset(mp, scfg, seed)
    state = transform_state(GROUP[k], s0)
    result = run_episode(policy_factory(), state, scfg, frame_k=k)
    rd = float("nan")
    if with_rd and result.solved:
        href = run_episode(HeuristicPolicy(), state.copy(), scfg, frame_k=k)
        if href.solved:
            rd = (result.steps - href.steps) / href.steps
    return EvalRecord(
        map_name=mp.name,
        rotation=90 * k,
        seed=seed,
        solved=result.solved,
        coverage_ratio=result.coverage_ratio,
        steps=result.steps,
        rd=rd,
    )


def evaluate(
    policy_factory,
    maps: list[MapSpec],
    scfg: ScenarioConfig,
    n_scenarios: int,
    base_seed: int,
    rotations: bool = False,
    with_rd: bool = True,
) -> EvalReport:
    """Deterministic greedy evaluation; per-scenario seeding makes the report
    independent of the worker pool size."""
    tasks = []
    for mi, mp in enumerate(maps):
        for i in range(n_scenarios):
            seed = int(np.random.SeedSequence([base_seed, mi, i]).generate_state(1)[0])
            for k in range(4) if rotations else (0,):
                tasks.append((mp, seed, k))
    results: list[EvalRecord | None] = [None] * len(tasks)

    def run(idx: int):
        mp, seed, k = tasks[idx]
        results[idx] = _episode_for(policy_factory, mp, scfg, seed, k, with_rd)

    workers = worker_count()
    if workers > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, range(len(tasks))))
    else:
        for idx in range(len(tasks)):
            run(idx)
    report = EvalReport(records=list(results), aggregates=_aggregate(list(results)))
    _verify_report(report)
    return report


# ---------------------------------------------------------------------------
# Equivariance probe.
# ---------------------------------------------------------------------------

PROBE_RECORD_HEADER = "state,rotation,kl_to_mean,value,value_gap," + ",".join(
    f"p{a}" for a in range(7)
)


@dataclass
class ProbeRecord:
    state_idx: int
    rotation: int
    kl_to_mean: float
    value: float
    value_gap: float
    dist: np.ndarray  # pulled back to the canonical frame


@dataclass
class ProbeReport:
    records: list[ProbeRecord]
    mean_kl_spread: float
    mean_value_spread: float

    def records_csv(self) -> str:
        lines = [PROBE_RECORD_HEADER]
        for r in self.records:
            probs = ",".join(repr(float(p)) for p in r.dist)
            lines.append(
                f"{r.state_idx},{r.rotation},{r.kl_to_mean!r},{r.value!r},{r.value_gap!r},{probs}"
            )
        return "\n".join(lines) + "\n"


def _pulled_back_dists(net: ParamNet, state: EnvState, scfg: ScenarioConfig, ensemble: bool):
    """(4, 7) pulled-back action distributions and (4,) values across rotations."""
    if not ensemble:
        out = ensemble_eval(net, state, scfg)
        return out.per_rotation_dists, out.per_rotation_values
    dists, values = [], []
    for k, g in enumerate(GROUP):
        rotated = transform_state(g, state)
        out = ensemble_eval(net, rotated, scfg)
        dists.append(out.ensemble_dist[ACTION_PERMS[k]])
        values.append(out.ensemble_value)
    return np.stack(dists), np.array(values)


def _kl_spread(dists: np.ndarray, mask: np.ndarray) -> np.ndarray:
    mean = dists.mean(axis=0)
    kls = np.zeros(len(dists))
    for k, d in enumerate(dists):
        sup = mask & (d > 0)
        kls[k] = float(np.sum(d[sup] * (np.log(d[sup]) - np.log(mean[sup]))))
    return kls


def raw_rotation_probe(net: ParamNet, state: EnvState, scfg: ScenarioConfig) -> tuple[float, float]:
    """(mean KL of per-rotation raw dists to their mean, mean |V_g - mean V|)."""
    out = ensemble_eval(net, state, scfg)
    mask = action_mask(state, scfg)
    kls = _kl_spread(out.per_rotation_dists, mask)
    vgaps = np.abs(out.per_rotation_values - out.per_rotation_values.mean())
    return float(kls.mean()), float(vgaps.mean())


def probe(net: ParamNet, states: list[EnvState], scfg: ScenarioConfig, ensemble: bool = False) -> ProbeReport:
    records = []
    kl_means, vgap_means = [], []
    for idx, state in enumerate(states):
        mask = action_mask(state, scfg)
        dists, values = _pulled_back_dists(net, state, scfg, ensemble)
        kls = _kl_spread(dists, mask)
        vgaps = np.abs(values - values.mean())
        kl_means.append(kls.mean())
        vgap_means.append(vgaps.mean())
        for k in range(4):
            records.append(
                ProbeRecord(
                    state_idx=idx,
                    rotation=90 * k,
                    kl_to_mean=float(kls[k]),
                    value=float(values[k]),
                    value_gap=float(vgaps[k]),
                    dist=dists[k],
                )
            )
    return ProbeReport(
        records=records,
        mean_kl_spread=float(np.mean(kl_means)) if kl_means else float("nan"),
        mean_value_spread=float(np.mean(vgap_means)) if vgap_means else float("nan"),
    )
