"""Clipped group-relative objective for one module-level group, with gradient.

For a group of G items with advantages A_i the objective is

    (1/G) sum_i w_i sum_t [ min(r_t A_i, clip(r_t, 1-eps, 1+eps) A_i) - beta KL_t ]

where r_t is the token probability ratio current/old, w_i = 1/|o_i| under
length normalisation, and KL_t is the per-token k3 estimate against the
reference policy (or the exact full-vocabulary KL).  Advantages and the
old/reference log-probs are constants; the gradient is taken w.r.t. the
current parameters of the group's module only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .groups import GrpoGroup
from .policy import Policy, SnapshotSet, log_softmax

KL_MODES = ("k3", "exact")


@dataclass(frozen=True)
class ObjectiveConfig:
    clip_eps: float = 0.2
    kl_coeff: float = 0.01
    advantage_eps: float = 1e-8
    length_normalize: bool = True
    kl_mode: str = "k3"
    # Weight of flagged padding duplicates relative to genuine items.
    duplicate_weight: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.kl_coeff < 0 or self.advantage_eps < 0 or self.duplicate_weight < 0:
            raise ValueError("kl_coeff, advantage_eps and duplicate_weight must be >= 0")
        if self.kl_mode not in KL_MODES:
            raise ValueError(f"kl_mode must be one of {KL_MODES}")


@dataclass
class GroupLossReport:
    objective: float
    advantages: np.ndarray
    mean_ratio: float
    clip_fraction: float
    mean_kl: float
    gradient: dict = field(repr=False)
    zero_signal: bool = False
    n_tokens: int = 0

    @property
    def loss(self) -> float:
        return -self.objective

    @property
    def mean_abs_advantage(self) -> float:
        return float(np.mean(np.abs(self.advantages)))


def compute_advantages(rewards: Sequence[float], advantage_eps: float = 1e-8) -> np.ndarray:
    """``(r - mean) / (std + eps)`` with the population std.

    A group whose rewards are all equal gets zero advantages.
    """
    r = np.asarray(rewards, dtype=float)
    if r.size == 0:
        raise ValueError("rewards must be nonempty")
    if r.max() == r.min():
        return np.zeros_like(r)
    return (r - r.mean()) / (r.std() + advantage_eps)


def token_ratio(current: Policy, old: Policy, q, o) -> np.ndarray:
    return np.exp(current.log_prob(q, o) - old.log_prob(q, o))


def kl_penalty(current: Policy, reference: Policy, q, o) -> np.ndarray:
    """Per-token k3 estimate ``rho - log rho - 1`` with rho = p_ref / p_cur."""
    log_rho = reference.log_prob(q, o) - current.log_prob(q, o)
    # expm1 avoids cancellation when rho is close to 1
    return np.expm1(log_rho) - log_rho


def exact_kl(current: Policy, reference: Policy, q, o) -> np.ndarray:
    """Full-vocabulary ``KL(p_cur || p_ref)`` at each output position."""
    lp = log_softmax(current.logits(q, o))
    lq = log_softmax(reference.logits(q, o))
    return (np.exp(lp) * (lp - lq)).sum(axis=-1)


def group_objective(group: GrpoGroup, snapshots: SnapshotSet, cfg: ObjectiveConfig,
                    kl_coeff: Optional[float] = None) -> GroupLossReport:
    """Objective value, diagnostics and analytic gradient for one group."""
    if not group.items:
        raise ValueError("group has no items")
    module = group.target_policy
    cur = snapshots.current.policy_for(module)
    old = snapshots.old.policy_for(module)
    ref = snapshots.reference.policy_for(module)
    beta = cfg.kl_coeff if kl_coeff is None else kl_coeff
    eps = cfg.clip_eps

    adv = compute_advantages(group.rewards, cfg.advantage_eps)
    G = len(group.items)
    grad = cur.zeros_like_params()
    total = 0.0
    ratios, kls = [], []
    n_clipped = 0

    for item, a in zip(group.items, adv):
        q, o = item.prompt, item.output
        if len(o) < 1:
            raise ValueError("group item with empty output")
        z = cur.logits(q, o)
        lp_all = log_softmax(z)
        probs = np.exp(lp_all)
        idx = np.arange(len(o))
        lp = lp_all[idx, list(o)]
        ratio = np.exp(lp - old.log_prob(q, o))

        surrogate = np.minimum(ratio * a, np.clip(ratio, 1 - eps, 1 + eps) * a)
        clipped = (a > 0) & (ratio > 1 + eps) | (a < 0) & (ratio < 1 - eps)
        # d surrogate / d log p_t: zero on the clipped branch
        dsurr = np.where(clipped, 0.0, a * ratio)

        if cfg.kl_mode == "k3":
            log_rho = ref.log_prob(q, o) - lp
            rho_m1 = np.expm1(log_rho)
            kl = rho_m1 - log_rho
            dlogp = dsurr + beta * rho_m1
            dlogits = -probs * dlogp[:, None]
            dlogits[idx, list(o)] += dlogp
        else:
            lq_all = log_softmax(ref.logits(q, o))
            kl = (probs * (lp_all - lq_all)).sum(axis=-1)
            dlogits = -probs * dsurr[:, None]
            dlogits[idx, list(o)] += dsurr
            dlogits -= beta * probs * (lp_all - lq_all - kl[:, None])

        w = 1.0 / G
        if cfg.length_normalize:
            w /= len(o)
        if item.is_padding_duplicate:
            w *= cfg.duplicate_weight
        # no float() cast: finite-difference oracles evaluate this in long double
        total += w * np.sum(surrogate - beta * kl)
        if w:
            cur.backprop_logits(q, o, w * dlogits, grad)

        ratios.append(ratio)
        kls.append(kl)
        n_clipped += int(np.sum(clipped))

    ratios_flat = np.concatenate(ratios)
    return GroupLossReport(
        objective=total if isinstance(total, np.longdouble) else float(total),
        advantages=adv,
        mean_ratio=float(ratios_flat.mean()),
        clip_fraction=n_clipped / ratios_flat.size,
        mean_kl=float(np.concatenate(kls).mean()),
        gradient=grad,
        zero_signal=bool(np.all(adv == 0.0)),
        n_tokens=int(ratios_flat.size),
    )
