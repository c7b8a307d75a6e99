"""Brute-force oracles used to check the engine.

These only go through the public surface (``execute_program``, policy
``next_distribution``/``log_prob``, ``group_objective``...) and recompute
everything else from scratch: exact expected reward by enumerating every
trajectory, finite-difference gradients, exhaustive subset search for
diverse selection, and a plain single-prompt GRPO objective.
"""

from __future__ import annotations

import itertools
import math
import statistics
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Optional, Sequence

import numpy as np

from .envs import make_builtin_env
from .groups import GroupItem, GrpoGroup, GroupKey, form_module_level_groups, select_k_diverse
from .objective import ObjectiveConfig, group_objective
from .policy import PolicyBank, SnapshotSet, TablePolicy, make_policy
from .runtime import (
    COMPLETE,
    EARLY_TERMINATION,
    LENGTH_OVERFLOW,
    PARSE_FAILURE,
    Call,
    Halt,
    ModuleSpec,
    ProgramSpec,
    Trace,
    Trajectory,
)


class EnumerationTooLarge(RuntimeError):
    pass


@dataclass
class EnumerationReport:
    n_trajectories: int
    mass: float
    expected_reward: float
    status_mass: dict = field(default_factory=dict)


def _output_sequences(policy, prompt, spec: ModuleSpec) -> Iterator[tuple[tuple[int, ...], float]]:
    def rec(prefix, prob):
        dist = policy.next_distribution(tuple(prompt) + prefix)
        for v, p in enumerate(dist):
            if p == 0.0:
                continue
            seq = prefix + (v,)
            if v == spec.end_token or len(seq) == spec.max_output_len:
                yield seq, prob * p
            else:
                yield from rec(seq, prob * p)
    yield from rec((), 1.0)


def enumerate_trajectories(program: ProgramSpec, bank: PolicyBank, x: Any,
                           max_trajectories: int = 10 ** 6) -> Iterator[tuple[float, Trajectory]]:
    """Yield ``(probability, trajectory)`` for every positive-probability run."""
    count = 0

    def leaf(traces, final, status, prob):
        nonlocal count
        count += 1
        if count > max_trajectories:
            raise EnumerationTooLarge(
                f"more than {max_trajectories} trajectories (explored {count - 1}); "
                f"program {program.name!r} with budget {program.max_invocations}")
        return prob, Trajectory(list(traces), final, status)

    def rec(history, traces, prob):
        step = program.control_flow(x, tuple(history))
        if isinstance(step, Halt):
            yield leaf(traces, step.final_output, COMPLETE, prob)
            return
        if len(traces) >= program.max_invocations:
            yield leaf(traces, None, EARLY_TERMINATION, prob)
            return
        spec = program.module(step.module_id)
        prompt = spec.make_prompt(step.module_input)
        policy = bank.policy_for(spec.module_id)
        for out, p in _output_sequences(policy, prompt, spec):
            tr = traces + [Trace(spec.module_id, prompt, out, len(traces))]
            if spec.parse is not None and not spec.parse(out):
                yield leaf(tr, None, PARSE_FAILURE, prob * p)
            elif spec.require_end and len(out) == spec.max_output_len and out[-1] != spec.end_token:
                yield leaf(tr, None, LENGTH_OVERFLOW, prob * p)
            else:
                yield from rec(history + [(spec.module_id, out)], tr, prob * p)

    yield from rec([], [], 1.0)


def enumerate_expected_reward(program: ProgramSpec, bank: PolicyBank, x: Any, reward_fn,
                              metadata: Any = None, fallback_reward: float = 0.0,
                              max_trajectories: int = 10 ** 6) -> EnumerationReport:
    total = mass = 0.0
    n = 0
    by_status: dict[str, float] = {}
    for prob, traj in enumerate_trajectories(program, bank, x, max_trajectories):
        r = reward_fn(traj.final_output, traj, metadata) if traj.complete else fallback_reward
        total += prob * r
        mass += prob
        n += 1
        by_status[traj.status] = by_status.get(traj.status, 0.0) + prob
    return EnumerationReport(n, mass, total, by_status)


def dataset_expected_reward(env, bank: PolicyBank, fallback_reward: float = 0.0,
                            max_trajectories: int = 10 ** 6) -> float:
    """Exact expected reward averaged uniformly over the environment's dataset."""
    vals = [enumerate_expected_reward(env.program, bank, ex.input, env.reward_fn, ex.metadata,
                                      fallback_reward, max_trajectories).expected_reward
            for ex in env.dataset]
    return sum(vals) / len(vals)


# -- finite differences --------------------------------------------------------

def fd_gradient(evaluate: Callable[[], float], params: dict, step: float = 1e-5,
                extended: bool = True) -> dict:
    """Central differences; ``evaluate`` must read ``params`` in place.

    With ``extended`` the parameter arrays are swapped for ``np.longdouble``
    copies while probing, so the evaluations run in extended precision where
    the platform has it.  That lowers the cancellation floor of
    ``(f(x+h) - f(x-h)) / 2h`` from about 1e-11 to about 1e-14.
    """
    originals = dict(params)
    if extended:
        for k, v in originals.items():
            params[k] = v.astype(np.longdouble)
    out = {}
    try:
        for k, arr in params.items():
            g = np.zeros(arr.shape)
            flat, gflat = arr.reshape(-1), g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = evaluate()
                flat[i] = orig - step
                down = evaluate()
                flat[i] = orig
                gflat[i] = (up - down) / (2 * step)
            out[k] = g
    finally:
        params.update(originals)
    return out


def fd_gradient_check(evaluate: Callable[[], float], params: dict, analytic: dict,
                      step: float = 1e-5, threshold: float = 1e-8) -> float:
    """Worst relative error over coordinates with ``|analytic| > threshold``."""
    if step <= 0:
        raise ValueError("step must be positive")
    numeric = fd_gradient(evaluate, params, step)
    worst = 0.0
    for k in params:
        a, n = analytic[k].reshape(-1), numeric[k].reshape(-1)
        mask = np.abs(a) > threshold
        if mask.any():
            rel = np.abs(a[mask] - n[mask]) / np.maximum(np.abs(a[mask]), np.abs(n[mask]))
            worst = max(worst, float(rel.max()))
    return worst


# -- standalone single-prompt GRPO ------------------------------------------------

def reference_grpo_single_stage(prompt, completions, rewards, snapshots: SnapshotSet,
                                cfg: ObjectiveConfig, module_id: Optional[str] = None) -> float:
    """Plain-loop GRPO objective for G completions of one shared prompt."""
    mid = module_id or snapshots.current.module_ids[0]
    pi, pi_old, pi_ref = (b.policy_for(mid) for b in
                          (snapshots.current, snapshots.old, snapshots.reference))
    G = len(completions)
    mean = sum(rewards) / G
    std = math.sqrt(sum((r - mean) ** 2 for r in rewards) / G)
    if max(rewards) == min(rewards):
        adv = [0.0] * G
    else:
        adv = [(r - mean) / (std + cfg.advantage_eps) for r in rewards]
    lo, hi = 1 - cfg.clip_eps, 1 + cfg.clip_eps

    total = 0.0
    for o, a in zip(completions, adv):
        acc = 0.0
        for t in range(len(o)):
            ctx = tuple(prompt) + tuple(o[:t])
            p_all = pi.next_distribution(ctx)
            q_all = pi_ref.next_distribution(ctx)
            p = p_all[o[t]]
            w = p / pi_old.next_distribution(ctx)[o[t]]
            surr = min(w * a, min(max(w, lo), hi) * a)
            if cfg.kl_mode == "exact":
                kl = sum(pv * math.log(pv / qv) for pv, qv in zip(p_all, q_all) if pv > 0)
            else:
                ratio = q_all[o[t]] / p
                kl = ratio - math.log(ratio) - 1
            acc += surr - cfg.kl_coeff * kl
        total += acc / len(o) if cfg.length_normalize else acc
    return total / G


# -- diverse selection --------------------------------------------------------------

def brute_force_select(items: Sequence[GroupItem], G: int) -> list[GroupItem]:
    """Exhaustive max-variance subset; the first maximiser in lexicographic order."""
    best, best_combo = -1.0, None
    for combo in itertools.combinations(range(len(items)), G):
        v = statistics.pvariance([items[i].reward for i in combo])
        if v > best:
            best, best_combo = v, combo
    return [items[i] for i in best_combo]


# -- random instances -----------------------------------------------------------------

def single_module_program(vocab_size: int, max_len: int, end_token: Optional[int] = None,
                          module_id: str = "m") -> ProgramSpec:
    def control_flow(x, history):
        return Call(module_id, x) if not history else Halt(history[0][1])
    spec = ModuleSpec(module_id, lambda inp: tuple(inp), vocab_size, max_len, end_token=end_token)
    return ProgramSpec((spec,), control_flow, max_invocations=1, name="single")


@dataclass
class SingleModuleInstance:
    program: ProgramSpec
    snapshots: SnapshotSet
    prompt: tuple
    completions: list
    rewards: list
    cfg: ObjectiveConfig


def random_snapshots(rng: np.random.Generator, V: int, A: int, window: int,
                     module_ids=("m",), kind: str = "table", spread: float = 1.0,
                     drift: float = 0.3) -> SnapshotSet:
    """Reference, old and current banks that differ by random perturbations."""
    def bank(params_fn):
        groups = {}
        for mid in module_ids:
            pol = make_policy(kind, V, A, window) if kind == "table" else \
                make_policy(kind, V, A, window, hidden=4, seed=int(rng.integers(1 << 30)))
            for k, v in pol.params.items():
                v[...] = params_fn(k, v)
            groups[mid] = pol
        return PolicyBank(groups, {m: m for m in module_ids})

    ref = bank(lambda k, v: rng.normal(0.0, spread, v.shape))
    old = ref.copy()
    cur = ref.copy()
    for b, scale in ((old, drift), (cur, drift)):
        for pol in b.groups.values():
            for v in pol.params.values():
                v += rng.normal(0.0, scale, v.shape)
    return SnapshotSet(cur, old.freeze(), ref.freeze())


def random_single_module_instance(rng: np.random.Generator) -> SingleModuleInstance:
    V = int(rng.integers(2, 7))
    A = V + int(rng.integers(0, 3))
    window = int(rng.integers(1, 3))
    max_len = int(rng.integers(1, 5))
    end = int(V - 1) if rng.random() < 0.5 else None
    snaps = random_snapshots(rng, V, A, window, drift=float(rng.uniform(0.05, 0.6)))
    prompt = tuple(int(t) for t in rng.integers(0, A, size=int(rng.integers(1, 4))))
    G = int(rng.integers(2, 9))
    old = snaps.old.policy_for("m")
    completions = [old.sample_output(prompt, rng, max_len, end) for _ in range(G)]
    kind = rng.integers(3)
    if kind == 0:
        rewards = [float(v) for v in rng.integers(0, 2, size=G)]
    elif kind == 1:
        rewards = [float(v) for v in rng.normal(size=G)]
    else:
        rewards = [float(rng.normal())] * G
    cfg = ObjectiveConfig(clip_eps=float(rng.uniform(0.05, 0.5)),
                          kl_coeff=float(rng.choice([0.0, 0.01, 0.04, 0.5])),
                          advantage_eps=float(rng.choice([0.0, 1e-8, 1e-3])),
                          length_normalize=bool(rng.random() < 0.8),
                          kl_mode="exact" if rng.random() < 0.2 else "k3")
    return SingleModuleInstance(single_module_program(V, max_len, end), snaps, prompt,
                                completions, rewards, cfg)


def mmgrpo_single_stage_objective(inst: SingleModuleInstance) -> float:
    """The same instance pushed through group formation and ``group_objective``."""
    rollouts = [(i, Trajectory([Trace("m", inst.prompt, o, 0)], i))
                for i, o in enumerate(inst.completions)]
    rewards = inst.rewards
    groups, _ = form_module_level_groups(inst.program, rollouts, len(rollouts),
                                         lambda y, traj, m: m[y], inst.prompt, rewards)
    assert len(groups) == 1
    return group_objective(groups[0], inst.snapshots, inst.cfg).objective


def random_group(rng: np.random.Generator, kind: str = "table", force_clip: bool = False):
    """A random multi-prompt group plus snapshots for gradient checks."""
    V = int(rng.integers(2, 6))
    A = V + int(rng.integers(0, 2))
    window = int(rng.integers(1, 3))
    snaps = random_snapshots(rng, V, A, window, kind=kind,
                             drift=0.8 if force_clip else float(rng.uniform(0.05, 0.4)))
    G = int(rng.integers(2, 7))
    old = snaps.old.policy_for("m")
    items = []
    for j in range(G):
        prompt = tuple(int(t) for t in rng.integers(0, A, size=int(rng.integers(1, 3))))
        out = old.sample_output(prompt, rng, int(rng.integers(1, 4)))
        items.append(GroupItem(prompt, out, float(rng.integers(0, 2)) if rng.random() < 0.5
                               else float(rng.normal()), j,
                               is_padding_duplicate=bool(rng.random() < 0.2)))
    cfg = ObjectiveConfig(clip_eps=float(rng.uniform(0.05, 0.3)) if force_clip
                          else float(rng.uniform(0.1, 0.5)),
                          kl_coeff=float(rng.choice([0.0, 0.04, 0.3])),
                          length_normalize=bool(rng.random() < 0.7),
                          kl_mode="exact" if rng.random() < 0.25 else "k3",
                          duplicate_weight=float(rng.choice([1.0, 0.5])))
    return GrpoGroup(GroupKey("m", 0), items), snaps, cfg


def _near_kink(group, snaps, cfg, margin=1e-4) -> bool:
    cur, old = snaps.current.policy_for("m"), snaps.old.policy_for("m")
    for it in group.items:
        w = np.exp(cur.log_prob(it.prompt, it.output) - old.log_prob(it.prompt, it.output))
        if np.any(np.abs(w - (1 - cfg.clip_eps)) < margin) or \
                np.any(np.abs(w - (1 + cfg.clip_eps)) < margin):
            return True
    return False


def group_gradient_error(group, snaps, cfg, step: float = 1e-5,
                         perturb: float = 0.0) -> float:
    rep = group_objective(group, snaps, cfg)
    analytic = {k: v * (1.0 + perturb) for k, v in rep.gradient.items()}
    params = snaps.current.policy_for(group.target_policy).params
    return fd_gradient_check(lambda: group_objective(group, snaps, cfg).objective,
                             params, analytic, step)


# -- suite ------------------------------------------------------------------------------

@dataclass
class OracleResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _check_enumeration_closed_form() -> tuple[bool, str]:
    lines, ok = [], True
    for name, kw in (("chain-1", {}), ("chain-2", dict(max_output_len=2)),
                     ("branch", dict(max_output_len=2)),
                     ("multihop-copy", dict(h=1, vocab_size=4))):
        env = make_builtin_env(name, **kw)
        bank = PolicyBank.for_program(env.program, env.context_vocab)
        got = dataset_expected_reward(env, bank)
        good = abs(got - env.uniform_reward) < 1e-12
        ok &= good
        lines.append(f"{name}: enumerated {got:.6g} vs closed form {env.uniform_reward:.6g}")
    return ok, "; ".join(lines)


def _check_mc_vs_enumeration(n: int, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    lines, ok = [], True
    for name, kw in (("chain-2", dict(max_output_len=2)), ("branch", dict(max_output_len=2)),
                     ("multihop-copy", dict(h=1, vocab_size=4, max_output_len=3))):
        z, exact, mc, se = mc_vs_enumeration(make_builtin_env(name, **kw), n, rng)
        ok &= z <= 3.0
        lines.append(f"{name}: exact {exact:.5f} mc {mc:.5f} ({z:.2f} sigma)")
    return ok, "; ".join(lines)


def biased_bank(env, rng: np.random.Generator, scale: float = 1.5) -> PolicyBank:
    """Random non-uniform table bank (plus a nudge toward target tokens)."""
    bank = PolicyBank.for_program(env.program, env.context_vocab)
    for spec in env.program.modules:
        pol = bank.policy_for(spec.module_id)
        pol.params["logits"][...] = rng.normal(0.0, scale, pol.params["logits"].shape)
        for payload in range(spec.vocab_size - 1):
            prompt = spec.make_prompt(payload)
            pol.params["logits"][pol.row_for(prompt), env.target_token(spec.module_id, prompt)] += 1.5
    return bank


def mc_vs_enumeration(env, n: int, rng: np.random.Generator):
    """Compare exact expected reward with a Monte-Carlo estimate over ``n`` rollouts.

    Examples are drawn uniformly from the dataset; returns
    ``(|z|, exact, mc_mean, standard_error)``.
    """
    from .runtime import execute_program, score

    bank = biased_bank(env, rng)
    exact = dataset_expected_reward(env, bank)
    rs = np.empty(n)
    for i in range(n):
        ex = env.dataset[int(rng.integers(len(env.dataset)))]
        rs[i] = score(execute_program(env.program, bank, ex.input, rng), env.reward_fn, ex.metadata)
    se = math.sqrt(max(exact * (1 - exact), 1e-300) / n) if set(np.unique(rs)) <= {0.0, 1.0} \
        else rs.std(ddof=1) / math.sqrt(n)
    return abs(rs.mean() - exact) / se, exact, float(rs.mean()), se


def _check_fd(n: int, seed: int, perturb: float) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst, checked = 0.0, 0
    while checked < n:
        group, snaps, cfg = random_group(rng, kind="mlp" if checked % 5 == 4 else "table",
                                         force_clip=checked % 3 == 0)
        if _near_kink(group, snaps, cfg):
            continue
        worst = max(worst, group_gradient_error(group, snaps, cfg, perturb=perturb))
        checked += 1
    return worst <= 1e-4, f"{n} groups, worst relative error {worst:.2e} (tolerance 1e-4)"


def _check_single_stage(n: int, seed: int) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        inst = random_single_module_instance(rng)
        a = mmgrpo_single_stage_objective(inst)
        b = reference_grpo_single_stage(inst.prompt, inst.completions, inst.rewards,
                                        inst.snapshots, inst.cfg)
        worst = max(worst, abs(a - b))
    return worst <= 1e-10, f"{n} instances, max |diff| {worst:.2e} (tolerance 1e-10)"


def _check_diverse(seed: int, max_items: int = 7) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    cases = 0
    for n in range(1, max_items + 1):
        for _ in range(20):
            pool = [0.0, 1.0] if rng.random() < 0.5 else [0.0, 0.25, 0.5, 1.0]
            items = [GroupItem((0,), (0,), float(rng.choice(pool)) if rng.random() < 0.7
                               else float(rng.normal()), j) for j in range(n)]
            for G in range(1, n + 1):
                if select_k_diverse(items, G) != brute_force_select(items, G):
                    return False, f"mismatch for rewards {[i.reward for i in items]}, G={G}"
                cases += 1
    return True, f"{cases} cases agree with exhaustive search"


def _check_kl_stationary(seed: int) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(10):
        group, snaps, cfg = random_group(rng)
        ref = snaps.reference
        same = SnapshotSet(ref.copy(), ref.frozen_copy(), ref)
        zero_adv = GrpoGroup(group.key, [GroupItem(i.prompt, i.output, 1.0, i.source_trajectory)
                                         for i in group.items])
        rep = group_objective(zero_adv, same, ObjectiveConfig(kl_coeff=0.5))
        worst = max(worst, max(float(np.abs(g).max()) for g in rep.gradient.values()))
    return worst < 1e-12, f"max |grad| at reference {worst:.1e}"


def run_suite(mutate: Optional[str] = None, quick: bool = False) -> list[OracleResult]:
    """Run every oracle; ``mutate='gradient'`` perturbs the analytic gradient by 1%."""
    checks = [
        ("enumeration_closed_form", _check_enumeration_closed_form),
        ("mc_vs_enumeration", lambda: _check_mc_vs_enumeration(5000 if quick else 20000)),
        ("fd_gradient", lambda: _check_fd(10 if quick else 40, 1,
                                          1e-2 if mutate == "gradient" else 0.0)),
        ("single_stage_equivalence", lambda: _check_single_stage(50 if quick else 200, 2)),
        ("diverse_selection", lambda: _check_diverse(3, 6 if quick else 8)),
        ("kl_stationary_at_reference", lambda: _check_kl_stationary(4)),
    ]
    results = []
    for name, fn in checks:
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # report, keep going
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(OracleResult(name, bool(ok), detail, time.perf_counter() - t0))
    return results
