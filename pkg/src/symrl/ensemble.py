"""Equivariant policy ensemble, invariant value ensemble, and the regularization losses.

The ensemble policy averages, over all four rotations, the raw policy
evaluated on the rotated state and pulled back to the canonical action
frame; the ensemble critic averages the raw value over the rotated states.
Averages are summed in value-sorted order so that evaluating at a rotated
state yields bit-identical numbers (the summand multiset is the same), which
makes the equivariance and invariance identities exact rather than
approximate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .env import EnvState, N_ACTIONS, ScenarioConfig, action_mask, observe
from .net import ParamNet, masked_log_softmax
from .symmetry import ACTION_PERMS, INV_ACTION_PERMS


def rotate_layers(layers: np.ndarray, k: int) -> np.ndarray:
    """Rotate a batch of channel stacks (N, C, m, m) by 90*k degrees CCW."""
    if k % 4 == 0:
        return layers
    return np.ascontiguousarray(np.rot90(layers, k, axes=(2, 3)))


def rotated_masks(masks: np.ndarray, k: int) -> np.ndarray:
    """Masks of the rotated states: K_g applied to each row."""
    return masks[:, INV_ACTION_PERMS[k]]


@dataclass
class BranchEval:
    """Per-rotation tensors from one shared forward pass over a batch.

    Index k corresponds to rotation by 90*k degrees. Distributions and
    log-probs live in the rotated state's own action frame; `pulled` holds
    the distributions mapped back to the canonical frame.
    """

    masks: list[np.ndarray]  # rotated boolean masks, (N, 7) each
    logps: list[Tensor]  # (N, 7) each
    probs: list[Tensor]  # (N, 7) each
    values: list[Tensor]  # (N,) each
    pulled: list[Tensor]  # (N, 7) each, canonical frame


def eval_branches(
    net: ParamNet, pt: list[Tensor], layers: np.ndarray, scalars: np.ndarray, masks: np.ndarray
) -> BranchEval:
    """Run the net on all four rotations of the batch in one forward pass."""
    n = layers.shape[0]
    big_layers = np.concatenate([rotate_layers(layers, k) for k in range(4)], axis=0)
    big_scalars = np.concatenate([scalars] * 4, axis=0)
    logits, values = net.forward_t(pt, big_layers, big_scalars)
    out = BranchEval(masks=[], logps=[], probs=[], values=[], pulled=[])
    for k in range(4):
        mask_k = rotated_masks(masks, k)
        logp_k, p_k = masked_log_softmax(ad.rows(logits, k * n, (k + 1) * n), mask_k)
        out.masks.append(mask_k)
        out.logps.append(logp_k)
        out.probs.append(p_k)
        out.values.append(ad.rows(values, k * n, (k + 1) * n))
        out.pulled.append(ad.permute_cols(p_k, ACTION_PERMS[k]))
    return out


def ensemble_from_branches(branches: BranchEval) -> tuple[Tensor, Tensor]:
    """(ensemble distribution (N, 7), ensemble value (N,)) from branch tensors."""
    ens_p = ad.sorted_mean(ad.stack(branches.pulled, axis=1), axis=1)
    ens_v = ad.sorted_mean(ad.stack(branches.values, axis=1), axis=1)
    return ens_p, ens_v


def ensemble_policy_t(
    net: ParamNet, pt: list[Tensor], layers: np.ndarray, scalars: np.ndarray, masks: np.ndarray
) -> tuple[Tensor, Tensor, BranchEval]:
    branches = eval_branches(net, pt, layers, scalars, masks)
    ens_p, ens_v = ensemble_from_branches(branches)
    return ens_p, ens_v, branches


@dataclass
class EnsembleOutput:
    """Numeric ensemble evaluation at a single state."""

    ensemble_dist: np.ndarray  # (7,)
    ensemble_value: float
    per_rotation_dists: np.ndarray  # (4, 7), pulled back to the canonical frame
    per_rotation_values: np.ndarray  # (4,)


def ensemble_eval(net: ParamNet, state: EnvState, cfg: ScenarioConfig) -> EnsembleOutput:
    obs = observe(state, cfg)
    mask = action_mask(state, cfg)
    ens_p, ens_v, branches = ensemble_policy_t(
        net, net.param_tensors(), obs.layers[None], obs.scalars[None], mask[None]
    )
    return EnsembleOutput(
        ensemble_dist=ens_p.data[0],
        ensemble_value=float(ens_v.data[0]),
        per_rotation_dists=np.stack([p.data[0] for p in branches.pulled]),
        per_rotation_values=np.array([v.data[0] for v in branches.values]),
    )


def ensemble_log_prob(
    net: ParamNet, state: EnvState, action: int, cfg: ScenarioConfig
) -> Tensor:
    """log of the ensemble probability of `action`, gradient-capable through all branches."""
    mask = action_mask(state, cfg)
    if not mask[action]:
        raise ValueError(f"action {action} is masked at this state")
    obs = observe(state, cfg)
    ens_p, _, _ = ensemble_policy_t(
        net, net.param_tensors(), obs.layers[None], obs.scalars[None], mask[None]
    )
    return ad.tsum(ad.log(ad.take_along(ens_p, np.array([action]))))


# ---------------------------------------------------------------------------
# Regularization losses.
# ---------------------------------------------------------------------------


def _ensemble_at_rotation(branches: BranchEval, g: int) -> Tensor:
    """Ensemble distribution at the rotated state L_g[s], in that state's frame.

    pi_bar(b | L_g s) = (1/4) sum_{g'} pi(K_{g'} b | L_{g' o g} s), assembled
    from the branch distributions already computed for s.
    """
    terms = [
        ad.permute_cols(branches.probs[(gp + g) % 4], ACTION_PERMS[gp]) for gp in range(4)
    ]
    return ad.sorted_mean(ad.stack(terms, axis=1), axis=1)


def reg_losses_from_branches(
    branches: BranchEval, detach_target: bool = True, divergence: str = "kl"
) -> tuple[Tensor, Tensor]:
    """(policy regularization, value regularization) for one batch.

    Policy: mean over rotations and batch of D(pi(.|L_g s) || pi_bar(.|L_g s)),
    restricted to the permitted-action support. Value: mean squared gap
    between each rotation's value estimate and the ensemble value.
    """
    kl_terms = []
    for g in range(4):
        maskf = Tensor(branches.masks[g].astype(np.float64))
        target = _ensemble_at_rotation(branches, g)
        if detach_target:
            target = ad.stop_grad(target)
        if divergence == "kl":
            # log of the target is only needed on the support; masked entries
            # are exact zeros on both sides, so shift them to log(1) = 0
            log_target = ad.log(target + (1.0 - maskf))
            term = ad.tsum(branches.probs[g] * (branches.logps[g] - log_target) * maskf, axis=-1)
        elif divergence == "mse":
            term = ad.tsum(ad.square(branches.probs[g] - target), axis=-1)
        else:
            raise ValueError(f"unknown divergence {divergence!r} (use 'kl' or 'mse')")
        kl_terms.append(term)
    pi_loss = ad.tmean(ad.stack(kl_terms, axis=0))

    ens_v = ad.sorted_mean(ad.stack(branches.values, axis=1), axis=1)
    if detach_target:
        ens_v = ad.stop_grad(ens_v)
    v_terms = [ad.square(branches.values[g] - ens_v) for g in range(4)]
    v_loss = ad.tmean(ad.stack(v_terms, axis=0))
    return pi_loss, v_loss


def _batch_arrays(states: list[EnvState], cfg: ScenarioConfig):
    obs = [observe(s, cfg) for s in states]
    layers = np.stack([o.layers for o in obs])
    scalars = np.stack([o.scalars for o in obs])
    masks = np.stack([action_mask(s, cfg) for s in states])
    return layers, scalars, masks


def policy_reg_loss(
    net: ParamNet,
    states: list[EnvState],
    cfg: ScenarioConfig,
    detach_target: bool = True,
    divergence: str = "kl",
) -> Tensor:
    if not states:
        raise ValueError("policy_reg_loss needs a nonempty batch")
    layers, scalars, masks = _batch_arrays(states, cfg)
    branches = eval_branches(net, net.param_tensors(), layers, scalars, masks)
    pi_loss, _ = reg_losses_from_branches(branches, detach_target, divergence)
    return pi_loss


def value_reg_loss(
    net: ParamNet, states: list[EnvState], cfg: ScenarioConfig, detach_target: bool = True
) -> Tensor:
    if not states:
        raise ValueError("value_reg_loss needs a nonempty batch")
    layers, scalars, masks = _batch_arrays(states, cfg)
    branches = eval_branches(net, net.param_tensors(), layers, scalars, masks)
    _, v_loss = reg_losses_from_branches(branches, detach_target)
    return v_loss


# ---------------------------------------------------------------------------
# Policy-optimization objectives (unclipped), including the naive augmented
# variant that is only sound for exactly equivariant policies.
# ---------------------------------------------------------------------------


def _policy_probs(net: ParamNet, layers, scalars, masks, ensemble: bool) -> np.ndarray:
    pt = net.param_tensors()
    if ensemble:
        ens_p, _, _ = ensemble_policy_t(net, pt, layers, scalars, masks)
        return ens_p.data
    logits, _ = net.forward_t(pt, layers, scalars)
    _, p = masked_log_softmax(logits, masks)
    return p.data


def po_objective(net: ParamNet, buffer, ensemble: bool = False) -> float:
    """Plain importance-weighted policy objective: mean of ratio * advantage."""
    layers, scalars, masks, actions, old_logp, adv = buffer.flat_core()
    probs = _policy_probs(net, layers, scalars, masks, ensemble)
    ratio = probs[np.arange(len(actions)), actions] / np.exp(old_logp)
    return float(np.mean(ratio * adv))


def naive_augmented_po_objective(net: ParamNet, buffer, ensemble: bool = False) -> float:
    """Augmented objective that averages pi(K_g a | L_g s) over rotations.

    A biased surrogate unless the policy is exactly equivariant, in which
    case every summand equals the base ratio and it reduces to po_objective.
    """
    layers, scalars, masks, actions, old_logp, adv = buffer.flat_core()
    n = len(actions)
    num = np.zeros(n, dtype=np.float64)
    for k in range(4):
        probs_k = _policy_probs(
            net, rotate_layers(layers, k), scalars, rotated_masks(masks, k), ensemble
        )
        num += probs_k[np.arange(n), ACTION_PERMS[k][actions]]
    ratio = (num / 4.0) / np.exp(old_logp)
    return float(np.mean(ratio * adv))
