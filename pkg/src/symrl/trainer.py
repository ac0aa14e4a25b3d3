"""Proximal policy optimization with ensemble/raw behavior policies, the two
regularization losses, performance-scheduled discounting, and the five agent
configurations (baseline, augment, ensemble, regularized, ens_reg)."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .buffer import RolloutBuffer, compute_gae, normalize_advantages
from .ensemble import (
    ensemble_from_branches,
    eval_branches,
    reg_losses_from_branches,
)
from .env import (
    EnvState,
    MaskViolationError,
    N_ACTIONS,
    SOLVED,
    ScenarioConfig,
    action_mask,
    observe,
    reset,
    step,
)
from .maps import MapSpec, build_map_pool
from .net import Adam, ParamNet, default_descriptor, load_checkpoint, masked_log_softmax, save_checkpoint

logger = logging.getLogger(__name__)

AGENT_MODES = ("baseline", "augment", "ensemble", "regularized", "ens_reg")
ENSEMBLE_MODES = ("ensemble", "ens_reg")
REGULARIZED_MODES = ("regularized", "ens_reg")

METRICS_HEADER = (
    "rollout,env_steps,episodes,solved,solved_ratio,mean_ep_steps,mean_ep_return,gamma,"
    "policy_loss,value_loss,entropy,reg_pi,reg_v,approx_kl,probe_kl_spread,probe_value_spread"
)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainerConfig:
    """Every hyperparameter the training loop consumes. All desk-scale defaults."""

    agent_mode: str = "baseline"
    total_steps: int = 100_000
    rollout_steps: int = 4096
    n_envs: int = 8
    minibatch_size: int = 256
    epochs: int = 4
    clip_eps: float = 0.2
    gae_lambda: float = 0.95
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    reg_pi: float = 0.1
    reg_v: float = 0.1
    lr: float = 3e-4
    gamma0: float = 0.95
    gamma_max: float = 0.999
    gamma_kappa: float = 0.995
    seed: int = 0
    adv_norm: bool = True
    detach_reg_target: bool = True
    reg_divergence: str = "kl"
    arch: str | None = None  # architecture descriptor; default derived from map size
    checkpoint_every: int = 0  # rollouts between checkpoints; 0 = final only
    probe_states: int = 8

    def validate(self) -> None:
        if self.agent_mode not in AGENT_MODES:
            raise ValueError(
                f"unknown agent_mode {self.agent_mode!r}; valid modes: {', '.join(AGENT_MODES)}"
            )
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must be in (0, 1)")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must be in [0, 1]")
        if not self.gamma0 <= self.gamma_max < 1.0:
            raise ValueError("need gamma0 <= gamma_max < 1")
        if not 0.0 < self.gamma_kappa < 1.0:
            raise ValueError("gamma_kappa must be in (0, 1)")
        if self.rollout_steps % self.n_envs != 0:
            raise ValueError("rollout_steps must be a multiple of n_envs")
        if self.rollout_steps > 0 and self.minibatch_size > self.rollout_steps:
            raise ValueError("minibatch_size cannot exceed rollout_steps")


def schedule_gamma(gamma: float, solved: bool, cfg: TrainerConfig) -> float:
    """Contract the gap to 1 by kappa on every solved episode, capped at gamma_max."""
    if not solved:
        return gamma
    return min(cfg.gamma_max, 1.0 - (1.0 - gamma) * cfg.gamma_kappa)


# ---------------------------------------------------------------------------
# Environment pool.
# ---------------------------------------------------------------------------


class EnvRunner:
    """One environment slot with private rng streams for scenarios and action sampling."""

    def __init__(self, pool: list[MapSpec], cfg: ScenarioConfig, scen_seed, act_seed):
        self.pool = pool
        self.cfg = cfg
        self.scen_rng = np.random.default_rng(scen_seed)
        self.act_rng = np.random.default_rng(act_seed)
        self.state: EnvState | None = None
        self.map_idx = 0
        self.ep_steps = 0
        self.ep_return = 0.0

    def new_episode(self) -> None:
        self.map_idx = int(self.scen_rng.integers(len(self.pool)))
        seed = int(self.scen_rng.integers(2**63))
        self.state = reset(self.pool[self.map_idx], self.cfg, seed)
        self.ep_steps = 0
        self.ep_return = 0.0

    def sample_action(self, probs: np.ndarray) -> int:
        u = self.act_rng.random()
        a = int(np.searchsorted(np.cumsum(probs), u, side="right"))
        a = min(a, N_ACTIONS - 1)
        if probs[a] == 0.0:  # u landed on a boundary of a zero-mass action
            a = int(np.argmax(probs))
        return a

    def rng_states(self) -> dict:
        return {"scen": self.scen_rng.bit_generator.state, "act": self.act_rng.bit_generator.state}

    def load_rng_states(self, states: dict) -> None:
        self.scen_rng.bit_generator.state = states["scen"]
        self.act_rng.bit_generator.state = states["act"]


def make_runners(pool: list[MapSpec], scfg: ScenarioConfig, tcfg: TrainerConfig) -> list[EnvRunner]:
    root = np.random.SeedSequence(tcfg.seed)
    seeds = root.spawn(2 * tcfg.n_envs)
    runners = []
    for i in range(tcfg.n_envs):
        r = EnvRunner(pool, scfg, seeds[2 * i], seeds[2 * i + 1])
        r.new_episode()
        runners.append(r)
    return runners


# ---------------------------------------------------------------------------
# Behavior policy evaluation (no gradients needed, but shares the graph code).
# ---------------------------------------------------------------------------


def behavior_eval(
    net: ParamNet, layers: np.ndarray, scalars: np.ndarray, masks: np.ndarray, ensemble: bool
) -> tuple[np.ndarray, np.ndarray]:
    """(action probabilities, value estimates) of the behavior policy for a batch."""
    pt = net.param_tensors()
    if ensemble:
        branches = eval_branches(net, pt, layers, scalars, masks)
        ens_p, ens_v = ensemble_from_branches(branches)
        return ens_p.data, ens_v.data
    logits, values = net.forward_t(pt, layers, scalars)
    _, p = masked_log_softmax(logits, masks)
    return p.data, values.data


@dataclass
class RolloutStats:
    episodes: int = 0
    solved: int = 0
    ep_steps: list[int] = field(default_factory=list)
    ep_returns: list[float] = field(default_factory=list)

    @property
    def solved_ratio(self) -> float:
        return self.solved / self.episodes if self.episodes else float("nan")


def collect_rollout(
    runners: list[EnvRunner],
    net: ParamNet,
    tcfg: TrainerConfig,
    scfg: ScenarioConfig,
    gamma: float,
) -> tuple[RolloutBuffer, RolloutStats, float]:
    """Advance the pool for rollout_steps total transitions under the behavior policy.

    Episodes auto-reset with fresh scenarios; the discount factor contracts
    toward gamma_max on every solved episode and the updated value is
    returned. Deterministic given the runner rng states and the net.
    """
    use_ensemble = tcfg.agent_mode in ENSEMBLE_MODES
    n = len(runners)
    n_steps = tcfg.rollout_steps // n
    m = runners[0].pool[0].m
    buf = RolloutBuffer(n_steps, n, m)
    stats = RolloutStats()
    for t in range(n_steps):
        obs = [observe(r.state, scfg) for r in runners]
        layers = np.stack([o.layers for o in obs])
        scalars = np.stack([o.scalars for o in obs])
        masks = np.stack([action_mask(r.state, scfg) for r in runners])
        probs, values = behavior_eval(net, layers, scalars, masks, use_ensemble)
        actions = np.zeros(n, dtype=np.intp)
        logp = np.zeros(n)
        rewards = np.zeros(n)
        dones = np.zeros(n, dtype=bool)
        for i, runner in enumerate(runners):
            a = runner.sample_action(probs[i])
            actions[i] = a
            logp[i] = np.log(probs[i, a])
            state2, reward, done = step(runner.state, a, scfg)
            runner.state = state2
            runner.ep_steps += 1
            runner.ep_return += reward
            rewards[i] = reward
            dones[i] = done is not None
            if done is not None:
                stats.episodes += 1
                stats.ep_steps.append(runner.ep_steps)
                stats.ep_returns.append(runner.ep_return)
                if done == SOLVED:
                    stats.solved += 1
                gamma = schedule_gamma(gamma, done == SOLVED, tcfg)
                runner.new_episode()
        buf.add_step(t, layers, scalars, masks, actions, logp, rewards, values, dones)
    if n_steps > 0:
        obs = [observe(r.state, scfg) for r in runners]
        layers = np.stack([o.layers for o in obs])
        scalars = np.stack([o.scalars for o in obs])
        masks = np.stack([action_mask(r.state, scfg) for r in runners])
        _, last_values = behavior_eval(net, layers, scalars, masks, use_ensemble)
        buf.last_values = last_values
    return buf, stats, gamma


# ---------------------------------------------------------------------------
# PPO update.
# ---------------------------------------------------------------------------


def _minibatch_loss(
    net: ParamNet,
    tcfg: TrainerConfig,
    layers: np.ndarray,
    scalars: np.ndarray,
    masks: np.ndarray,
    actions: np.ndarray,
    old_logp: np.ndarray,
    adv: np.ndarray,
    returns: np.ndarray,
) -> tuple[Tensor, dict]:
    use_ensemble = tcfg.agent_mode in ENSEMBLE_MODES
    use_reg = tcfg.agent_mode in REGULARIZED_MODES
    pt = net.param_tensors()

    branches = None
    if use_ensemble or use_reg:
        branches = eval_branches(net, pt, layers, scalars, masks)

    if use_ensemble:
        ens_p, ens_v = ensemble_from_branches(branches)
        maskf = masks.astype(np.float64)
        log_ens = ad.log(ens_p + Tensor(1.0 - maskf))
        new_logp = ad.take_along(log_ens, actions)
        entropy = -ad.tsum(ens_p * log_ens * Tensor(maskf), axis=-1)
        v_pred = ens_v
    else:
        logits, values = net.forward_t(pt, layers, scalars)
        logp_all, p = masked_log_softmax(logits, masks)
        new_logp = ad.take_along(logp_all, actions)
        entropy = -ad.tsum(p * logp_all * Tensor(masks.astype(np.float64)), axis=-1)
        v_pred = values

    ratio = ad.exp(new_logp - Tensor(old_logp))
    adv_t = Tensor(adv)
    surr = ad.minimum(ratio * adv_t, ad.clip(ratio, 1.0 - tcfg.clip_eps, 1.0 + tcfg.clip_eps) * adv_t)
    policy_loss = -ad.tmean(surr)
    value_loss = ad.tmean(ad.square(v_pred - Tensor(returns)))
    entropy_mean = ad.tmean(entropy)
    total = policy_loss + tcfg.value_coef * value_loss - tcfg.entropy_coef * entropy_mean

    stats = {
        "policy_loss": float(policy_loss.data),
        "value_loss": float(value_loss.data),
        "entropy": float(entropy_mean.data),
        "approx_kl": float(np.mean(old_logp - new_logp.data)),
        "reg_pi": 0.0,
        "reg_v": 0.0,
    }
    if use_reg:
        pi_loss, v_loss = reg_losses_from_branches(
            branches, detach_target=tcfg.detach_reg_target, divergence=tcfg.reg_divergence
        )
        total = total + tcfg.reg_pi * pi_loss + tcfg.reg_v * v_loss
        stats["reg_pi"] = float(pi_loss.data)
        stats["reg_v"] = float(v_loss.data)
    return total, stats


def ppo_update(
    net: ParamNet,
    buffer: RolloutBuffer,
    tcfg: TrainerConfig,
    opt: Adam,
    update_rng: np.random.Generator,
) -> dict:
    """Clipped-surrogate epochs over shuffled minibatches; one Adam step per minibatch."""
    layers, scalars, masks, actions, old_logp, adv = buffer.flat_core()
    returns = buffer.flat_returns()
    total = buffer.size
    agg: dict[str, float] = {}
    count = 0
    for _ in range(tcfg.epochs):
        order = update_rng.permutation(total)
        for lo in range(0, total, tcfg.minibatch_size):
            idx = order[lo : lo + tcfg.minibatch_size]
            loss, stats = _minibatch_loss(
                net,
                tcfg,
                layers[idx],
                scalars[idx],
                masks[idx],
                actions[idx],
                old_logp[idx],
                adv[idx],
                returns[idx],
            )
            try:
                tape = net.gradient(loss)
            except FloatingPointError as err:
                raise TrainingDiverged(f"non-finite loss in ppo_update: {err}") from err
            net.params = opt.step(net.params, tape.grad, lr=tcfg.lr)
            for key, val in stats.items():
                agg[key] = agg.get(key, 0.0) + val
            count += 1
    return {key: val / count for key, val in agg.items()} if count else {}


# ---------------------------------------------------------------------------
# Equivariance probe used for the per-rollout metrics columns.
# ---------------------------------------------------------------------------


def make_probe_states(
    pool: list[MapSpec], scfg: ScenarioConfig, n_states: int, seed
) -> list[EnvState]:
    """Deterministic mid-episode states: reset, then a few random legal actions."""
    rng = np.random.default_rng(seed)
    states = []
    while len(states) < n_states:
        mp = pool[int(rng.integers(len(pool)))]
        s = reset(mp, scfg, int(rng.integers(2**63)))
        for _ in range(int(rng.integers(1, 12))):
            legal = np.flatnonzero(action_mask(s, scfg))
            a = int(legal[rng.integers(len(legal))])
            s, _, done = step(s, a, scfg)
            if done is not None:
                break
        states.append(s)
    return states


def probe_spreads(net: ParamNet, states: list[EnvState], scfg: ScenarioConfig) -> tuple[float, float]:
    """(mean KL spread of the raw policy across rotations, mean |V - mean V|)."""
    from .evaluation import raw_rotation_probe

    kls, vgaps = [], []
    for s in states:
        kl, vgap = raw_rotation_probe(net, s, scfg)
        kls.append(kl)
        vgaps.append(vgap)
    return float(np.mean(kls)), float(np.mean(vgaps))


# ---------------------------------------------------------------------------
# Training loop with checkpoint/resume.
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def save_trainer_checkpoint(
    path: Path,
    net: ParamNet,
    opt: Adam,
    runners: list[EnvRunner],
    update_rng: np.random.Generator,
    gamma: float,
    rollout_idx: int,
    env_steps: int,
) -> None:
    path.mkdir(parents=True, exist_ok=True)
    save_checkpoint(net, path / "net.ckpt")
    meta = {
        "gamma": gamma,
        "rollout_idx": rollout_idx,
        "env_steps": env_steps,
        "adam_t": opt.t,
        "adam_lr": opt.lr,
        "update_rng": update_rng.bit_generator.state,
        "runners": [
            {
                "rng": r.rng_states(),
                "map_idx": r.map_idx,
                "position": list(r.state.position),
                "battery": r.state.battery,
                "landed": r.state.landed,
                "step_count": r.state.step_count,
                "ep_steps": r.ep_steps,
                "ep_return": r.ep_return,
            }
            for r in runners
        ],
    }
    (path / "trainer.json").write_text(json.dumps(meta), encoding="utf-8")
    np.savez(
        path / "state.npz",
        adam_m=opt.m,
        adam_v=opt.v,
        targets=np.stack([r.state.target for r in runners]),
    )


def load_trainer_checkpoint(path: Path, runners: list[EnvRunner], opt: Adam):
    net = load_checkpoint(path / "net.ckpt")
    meta = json.loads((path / "trainer.json").read_text(encoding="utf-8"))
    blobs = np.load(path / "state.npz")
    opt.m = blobs["adam_m"].astype(np.float64)
    opt.v = blobs["adam_v"].astype(np.float64)
    opt.t = int(meta["adam_t"])
    opt.lr = float(meta["adam_lr"])
    for i, (runner, rmeta) in enumerate(zip(runners, meta["runners"])):
        runner.load_rng_states(rmeta["rng"])
        runner.map_idx = int(rmeta["map_idx"])
        runner.state = EnvState(
            map=runner.pool[runner.map_idx],
            target=blobs["targets"][i].astype(bool),
            position=tuple(rmeta["position"]),
            battery=int(rmeta["battery"]),
            landed=bool(rmeta["landed"]),
            step_count=int(rmeta["step_count"]),
        )
        runner.ep_steps = int(rmeta["ep_steps"])
        runner.ep_return = float(rmeta["ep_return"])
    return net, float(meta["gamma"]), int(meta["rollout_idx"]), int(meta["env_steps"]), meta["update_rng"]


def train(
    map_specs: list[MapSpec],
    tcfg: TrainerConfig,
    scfg: ScenarioConfig,
    run_dir,
    resume=None,
) -> dict:
    """Alternating collect/update until total_steps; emits metrics.csv and checkpoints.

    Only whole rollouts run: total_steps below rollout_steps means zero
    updates and a header-only metrics file. Returns a small summary dict.
    """
    tcfg.validate()
    scfg.validate()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    pool = build_map_pool(map_specs, rotations=(tcfg.agent_mode == "augment"))
    m = pool[0].m
    descriptor = tcfg.arch or default_descriptor(m)

    net = ParamNet(descriptor, seed=tcfg.seed)
    opt = Adam(net.n_params, lr=tcfg.lr)
    runners = make_runners(pool, scfg, tcfg)
    update_rng = np.random.default_rng(np.random.SeedSequence(tcfg.seed).spawn(2 * tcfg.n_envs + 1)[-1])
    probe_seed = np.random.SeedSequence(tcfg.seed).spawn(2 * tcfg.n_envs + 2)[-1]
    probe = make_probe_states(pool, scfg, tcfg.probe_states, probe_seed) if tcfg.probe_states else []
    gamma = tcfg.gamma0
    rollout_idx = 0
    env_steps = 0

    if resume is not None:
        net, gamma, rollout_idx, env_steps, rng_state = load_trainer_checkpoint(
            Path(resume), runners, opt
        )
        update_rng.bit_generator.state = rng_state
        if net.descriptor != descriptor:
            raise ValueError(
                f"checkpoint architecture {net.descriptor!r} does not match run {descriptor!r}"
            )

    config_path = run_dir / "config.json"
    if not config_path.exists():
        config_path.write_text(
            json.dumps({"trainer": asdict(tcfg), "scenario": asdict(scfg), "maps": [s.name for s in map_specs]}),
            encoding="utf-8",
        )

    metrics_path = run_dir / "metrics.csv"
    new_file = not metrics_path.exists()
    solved_history: list[float] = []
    with open(metrics_path, "a", encoding="utf-8", newline="") as metrics:
        if new_file:
            metrics.write(METRICS_HEADER + "\n")
            metrics.flush()
        try:
            while env_steps + tcfg.rollout_steps <= tcfg.total_steps:
                buf, stats, gamma_next = collect_rollout(runners, net, tcfg, scfg, gamma)
                compute_gae(buf, gamma, tcfg.gae_lambda)
                if tcfg.adv_norm:
                    normalize_advantages(buf)
                update_stats = ppo_update(net, buf, tcfg, opt, update_rng)
                gamma = gamma_next
                env_steps += tcfg.rollout_steps
                rollout_idx += 1
                kl_spread, v_spread = probe_spreads(net, probe, scfg) if probe else (float("nan"),) * 2
                row = [
                    str(rollout_idx),
                    str(env_steps),
                    str(stats.episodes),
                    str(stats.solved),
                    _fmt(stats.solved_ratio),
                    _fmt(float(np.mean(stats.ep_steps)) if stats.ep_steps else float("nan")),
                    _fmt(float(np.mean(stats.ep_returns)) if stats.ep_returns else float("nan")),
                    _fmt(gamma),
                    _fmt(update_stats.get("policy_loss", float("nan"))),
                    _fmt(update_stats.get("value_loss", float("nan"))),
                    _fmt(update_stats.get("entropy", float("nan"))),
                    _fmt(update_stats.get("reg_pi", float("nan"))),
                    _fmt(update_stats.get("reg_v", float("nan"))),
                    _fmt(update_stats.get("approx_kl", float("nan"))),
                    _fmt(kl_spread),
                    _fmt(v_spread),
                ]
                metrics.write(",".join(row) + "\n")
                metrics.flush()
                solved_history.append(stats.solved_ratio)
                logger.info(
                    "rollout %d steps %d solved %.2f gamma %.4f",
                    rollout_idx,
                    env_steps,
                    stats.solved_ratio,
                    gamma,
                )
                if tcfg.checkpoint_every and rollout_idx % tcfg.checkpoint_every == 0:
                    save_trainer_checkpoint(
                        run_dir / f"ckpt_{rollout_idx}", net, opt, runners, update_rng, gamma, rollout_idx, env_steps
                    )
        except Exception:
            save_trainer_checkpoint(
                run_dir / "ckpt_crash", net, opt, runners, update_rng, gamma, rollout_idx, env_steps
            )
            raise
    save_trainer_checkpoint(
        run_dir / "ckpt_final", net, opt, runners, update_rng, gamma, rollout_idx, env_steps
    )
    save_checkpoint(net, run_dir / "net_final.ckpt")
    return {
        "rollouts": rollout_idx,
        "env_steps": env_steps,
        "gamma": gamma,
        "final_solved_ratio": solved_history[-1] if solved_history else float("nan"),
        "run_dir": str(run_dir),
    }
