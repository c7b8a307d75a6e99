"""Module-level GRPO groups formed from a meta-group of trajectories.

Every trace of every rollout is filed under ``(module_id, k)`` where ``k``
counts earlier calls to the same module in that trajectory.  All items carry
their trajectory's program-level reward.  Groups are then padded
(``truncate`` or ``fill``) and brought to exactly ``G`` items by
reward-variance-maximising selection.
"""

from __future__ import annotations

import logging
import statistics
from dataclasses import dataclass, replace
from typing import Any, Iterable, NamedTuple, Optional, Sequence

from .runtime import ProgramSpec, Trajectory, TokenSeq, RewardFunction, score

log = logging.getLogger(__name__)

PADDING_MODES = ("truncate", "fill")


class RewardError(RuntimeError):
    """The reward function failed on a complete trajectory."""


class GroupKey(NamedTuple):
    module_id: str
    relative_invocation_index: int


@dataclass(frozen=True)
class GroupItem:
    prompt: TokenSeq
    output: TokenSeq
    reward: float
    source_trajectory: int
    is_padding_duplicate: bool = False
    teacher_id: Optional[str] = None


@dataclass
class GrpoGroup:
    key: GroupKey
    items: list[GroupItem]

    @property
    def target_policy(self) -> str:
        return self.key.module_id

    @property
    def rewards(self) -> list[float]:
        return [it.reward for it in self.items]

    def __len__(self) -> int:
        return len(self.items)


def expected_group_count(trajectories: Sequence[Trajectory]) -> int:
    """``sum_i max_j K[M_i, rho_j]``."""
    maxima: dict[str, int] = {}
    for traj in trajectories:
        for m, k in traj.invocation_counts().items():
            maxima[m] = max(maxima.get(m, 0), k)
    return sum(maxima.values())


def group_traces(trajectories: Sequence[Trajectory], rewards: Sequence[float],
                 module_order: Optional[Sequence[str]] = None) -> list[GrpoGroup]:
    """Align traces by (module, relative invocation index); no padding.

    Groups come back sorted by module (declaration order when
    ``module_order`` is given, else by name) then by invocation index.
    """
    buckets: dict[GroupKey, list[GroupItem]] = {}
    for j, (traj, r) in enumerate(zip(trajectories, rewards)):
        seen: dict[str, int] = {}
        for tr in traj.traces:
            k = seen.get(tr.module_id, 0)
            buckets.setdefault(GroupKey(tr.module_id, k), []).append(
                GroupItem(tr.prompt, tr.output, float(r), j, teacher_id=traj.teacher_id))
            seen[tr.module_id] = k + 1

    if module_order is not None:
        rank = {m: i for i, m in enumerate(module_order)}
        unknown = {k.module_id for k in buckets} - set(rank)
        if unknown:
            raise ValueError(f"traces reference modules not in the program: {sorted(unknown)}")
        sort_key = lambda k: (rank[k.module_id], k.relative_invocation_index)  # noqa: E731
    else:
        sort_key = None
    return [GrpoGroup(k, buckets[k]) for k in sorted(buckets, key=sort_key)]


def pad_groups(groups: Iterable[GrpoGroup], mode: str, R: int) -> list[GrpoGroup]:
    """Equalise group sizes across structurally divergent trajectories.

    ``truncate`` keeps only groups represented in all ``R`` trajectories,
    i.e. invocation indices below ``min_j K[M, rho_j]``.  ``fill`` keeps every
    group and duplicates items (diverse order, flagged) up to ``R``.
    """
    if mode not in PADDING_MODES:
        raise ValueError(f"padding mode must be one of {PADDING_MODES}, got {mode!r}")
    out = []
    for g in groups:
        n_sources = len({it.source_trajectory for it in g.items})
        if mode == "truncate":
            if n_sources == R:
                out.append(g)
            continue
        if not g.items:
            log.warning("dropping empty group %s: nothing to fill from", g.key)
            continue
        if len(g.items) < R:
            g = GrpoGroup(g.key, _upsample(g.items, R))
        out.append(g)
    return out


def _upsample(items: Sequence[GroupItem], size: int) -> list[GroupItem]:
    """Append flagged duplicates round-robin, farthest-from-mean rewards first."""
    mean = statistics.fmean(it.reward for it in items)
    order = sorted(range(len(items)), key=lambda i: (-abs(items[i].reward - mean), i))
    dups = [replace(items[order[j % len(order)]], is_padding_duplicate=True)
            for j in range(size - len(items))]
    return list(items) + dups


def select_k_diverse(items: Sequence[GroupItem], G: int) -> list[GroupItem]:
    """Return exactly ``G`` items, favouring high reward variance.

    Down-sampling picks the size-``G`` subset with maximal population variance
    of rewards; among equally good subsets the one whose sorted positions are
    lexicographically smallest wins.  A maximal-variance subset always takes
    some lowest and some highest rewards (variance is strictly convex in any
    single element when ``G >= 2``), so only ``G + 1`` value multisets need
    scoring.
    """
    if not items:
        raise ValueError("select_k_diverse needs at least one item")
    if G < 1:
        raise ValueError("G must be >= 1")
    n = len(items)
    if n == G:
        return list(items)
    if n < G:
        return _upsample(items, G)
    if G == 1:
        return [items[0]]

    by_value = sorted(range(n), key=lambda i: (items[i].reward, i))
    vals = [items[i].reward for i in by_value]
    candidates = []
    for a in range(G + 1):
        chosen = vals[:a] + vals[n - G + a:]
        candidates.append((statistics.pvariance(chosen), chosen))
    best = max(v for v, _ in candidates)

    subsets = set()
    for v, chosen in candidates:
        if v != best:
            continue
        need: dict[float, int] = {}
        for r in chosen:
            need[r] = need.get(r, 0) + 1
        picked = []
        for i in range(n):
            r = items[i].reward
            if need.get(r, 0):
                picked.append(i)
                need[r] -= 1
        subsets.add(tuple(picked))
    return [items[i] for i in min(subsets)]


def trajectory_rewards(rollouts: Sequence[tuple[Any, Trajectory]], reward_fn: RewardFunction,
                       metadata: Any, fallback_reward: float = 0.0) -> list[float]:
    rewards = []
    for j, (_, traj) in enumerate(rollouts):
        try:
            rewards.append(score(traj, reward_fn, metadata, fallback_reward))
        except Exception as exc:  # reward functions must be total on complete runs
            raise RewardError(f"reward function failed on complete rollout {j}: {exc}") from exc
    return rewards


def form_module_level_groups(program: ProgramSpec, rollouts: Sequence[tuple[Any, Trajectory]],
                             G: int, reward_fn: RewardFunction, x: Any = None, m: Any = None, *,
                             padding_mode: str = "fill", fallback_reward: float = 0.0,
                             ) -> tuple[list[GrpoGroup], list[str]]:
    """Score rollouts, align their traces into groups, pad, and resize to ``G``.

    Returns the groups and, index-aligned, the module id whose parameters
    each group updates.  ``x`` is accepted for interface symmetry; rewards
    depend only on the rollout and the metadata ``m``.
    """
    if not rollouts:
        raise ValueError("need at least one rollout")
    if G < 1:
        raise ValueError("G must be >= 1")
    rewards = trajectory_rewards(rollouts, reward_fn, m, fallback_reward)
    raw = group_traces([t for _, t in rollouts], rewards, program.module_ids)
    padded = pad_groups(raw, padding_mode, len(rollouts))
    groups = [GrpoGroup(g.key, select_k_diverse(g.items, G)) for g in padded]
    return groups, [g.target_policy for g in groups]
