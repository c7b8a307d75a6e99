"""Acceptance gate: criteria 1-9, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -v`` (lines appear in the terminal
summary) or directly with ``python tests/test_acceptance.py``.
"""

import statistics
import sys
import time

import numpy as np
from mmgrpo.envs import make_builtin_env
from mmgrpo.groups import (
    GroupItem,
    GroupKey,
    expected_group_count,
    form_module_level_groups,
    group_traces,
    pad_groups,
    select_k_diverse,
)
from mmgrpo.objective import compute_advantages, group_objective
from mmgrpo.oracles import (
    _near_kink,
    brute_force_select,
    dataset_expected_reward,
    fd_gradient_check,
    mc_vs_enumeration,
    mmgrpo_single_stage_objective,
    random_group,
    random_single_module_instance,
    reference_grpo_single_stage,
)
from mmgrpo.policy import PolicyBank
from mmgrpo.runtime import COMPLETE, EARLY_TERMINATION, PARSE_FAILURE, Trace, Trajectory, \
    execute_program
from mmgrpo.trainer import STUDENT, TeacherSpec, TrainConfig, better_together, estimate_reward, \
    train, warm_start_bank

RESULTS: list[str] = []


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)


# -- helpers -------------------------------------------------------------------------

def optimal_bank(env) -> PolicyBank:
    """Deterministic bank: first token is the target, then the end token."""
    bank = PolicyBank.for_program(env.program, env.context_vocab)
    for spec in env.program.modules:
        pol = bank.policy_for(spec.module_id)
        pol.params["logits"][:, spec.end_token] = 1e6
        for payload in range(spec.vocab_size - 1):
            prompt = spec.make_prompt(payload)
            row = pol.row_for(prompt)
            pol.params["logits"][row] = 0.0
            pol.params["logits"][row, env.target_token(spec.module_id, prompt)] = 1e6
    return bank


def eval_reward(env, bank, seed, n=2000):
    return estimate_reward(env.program, bank, env.dataset, env.reward_fn, n,
                           np.random.default_rng(10_000 + seed))


def n_calls(env) -> int:
    ex = env.dataset[0]
    return len(execute_program(env.program, optimal_bank(env), ex.input,
                               np.random.default_rng(0)).traces)


LEARN_ENVS = [("chain-2", dict(vocab_size=8)), ("multihop-copy", dict(h=2, vocab_size=8))]
SEEDS = (0, 1, 2)


# -- 1 ---------------------------------------------------------------------------------

def test_criterion_1_single_stage_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(200):
        inst = random_single_module_instance(rng)
        a = mmgrpo_single_stage_objective(inst)
        b = reference_grpo_single_stage(inst.prompt, inst.completions, inst.rewards,
                                        inst.snapshots, inst.cfg)
        worst = max(worst, abs(a - b))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-10 and dt < 10
    report(1, ok, f"200 instances, max |diff| {worst:.1e} (<= 1e-10), {dt:.1f}s (< 10s)")
    assert ok


# -- 2 ---------------------------------------------------------------------------------

def test_criterion_2_gradient_fidelity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2025)
    worst, n_beta, n_clip, done, kinks = 0.0, 0, 0, 0, 0
    while done < 100:
        kind = "mlp" if done % 5 == 4 else "table"
        g, snaps, cfg = random_group(rng, kind=kind, force_clip=done % 3 == 0)
        if _near_kink(g, snaps, cfg):
            kinks += 1
            continue
        rep = group_objective(g, snaps, cfg)
        err = fd_gradient_check(lambda: group_objective(g, snaps, cfg).objective,
                                snaps.current.policy_for(g.target_policy).params,
                                rep.gradient, step=1e-5)
        worst = max(worst, err)
        n_beta += cfg.kl_coeff > 0
        n_clip += rep.clip_fraction > 0
        done += 1
    dt = time.perf_counter() - t0
    ok = worst <= 1e-4 and n_beta > 0 and n_clip > 0 and dt < 30
    report(2, ok, f"100 groups ({n_beta} with beta>0, {n_clip} with clipping active, "
                  f"{kinks} kink-adjacent draws resampled), worst rel err {worst:.1e} "
                  f"(<= 1e-4), {dt:.1f}s (< 30s)")
    assert ok


# -- 3 ---------------------------------------------------------------------------------

def _random_trajs(rng):
    mods = ["M0", "M1", "M2"]
    trajs = []
    for _ in range(int(rng.integers(1, 9))):
        seq = [mods[int(rng.integers(3))] for _ in range(int(rng.integers(0, 8)))]
        status = rng.choice([COMPLETE, COMPLETE, PARSE_FAILURE, EARLY_TERMINATION])
        traces = [Trace(m, (i,), (int(rng.integers(4)),), i) for i, m in enumerate(seq)]
        trajs.append(Trajectory(traces, 0 if status == COMPLETE else None, str(status)))
    return mods, trajs


def test_criterion_3_group_combinatorics():
    from collections import Counter
    rng = np.random.default_rng(3)
    bad = 0
    for _ in range(1000):
        mods, trajs = _random_trajs(rng)
        rewards = [float(rng.integers(0, 2)) for _ in trajs]
        raw = group_traces(trajs, rewards, mods)
        counts = [t.invocation_counts() for t in trajs]
        formula = sum(max(c.get(m, 0) for c in counts) for m in mods)
        grouped = Counter((it.source_trajectory, g.key.module_id, it.prompt, it.output)
                          for g in raw for it in g.items)
        traced = Counter((j, tr.module_id, tr.prompt, tr.output)
                         for j, t in enumerate(trajs) for tr in t.traces)
        if len(raw) != formula or expected_group_count(trajs) != formula or grouped != traced:
            bad += 1

    from mmgrpo.runtime import Halt, ModuleSpec, ProgramSpec
    prog = ProgramSpec(tuple(ModuleSpec(m, lambda x: (x,), 4, 1) for m in ("M1", "M2")),
                       lambda x, h: Halt(None))
    example = [Trajectory([Trace("M1", (0,), (1,), 0), Trace("M2", (1,), (2,), 1),
                           Trace("M1", (2,), (3,), 2)], 0, COMPLETE) for _ in range(3)]
    groups, _ = form_module_level_groups(prog, [(0, t) for t in example], 3,
                                         lambda y, t, m: 1.0)
    shape = [(g.key.module_id, g.key.relative_invocation_index, len(g)) for g in groups]
    ok = bad == 0 and shape == [("M1", 0, 3), ("M1", 1, 3), ("M2", 0, 3)]
    report(3, ok, f"1000 fuzzed rollout sets, {bad} violations of count formula/partition; "
                  f"two-module example -> {shape}")
    assert ok


# -- 4 ---------------------------------------------------------------------------------

def test_criterion_4_padding_semantics():
    rng = np.random.default_rng(4)
    bad = 0
    for _ in range(500):
        mods, trajs = _random_trajs(rng)
        R = len(trajs)
        raw = group_traces(trajs, [float(rng.random()) for _ in trajs], mods)
        counts = [t.invocation_counts() for t in trajs]
        want = {GroupKey(m, k) for m in mods for k in range(min(c.get(m, 0) for c in counts))}
        trunc = pad_groups(raw, "truncate", R)
        fill = pad_groups(raw, "fill", R)
        raw_sizes = {g.key: len(g) for g in raw}
        if {g.key for g in trunc} != want or any(len(g) != R for g in trunc):
            bad += 1
        if {g.key for g in fill} != set(raw_sizes):
            bad += 1
        for g in fill:
            n_dup = sum(it.is_padding_duplicate for it in g.items)
            if len(g) != R or n_dup != R - raw_sizes[g.key] or \
                    any(it.is_padding_duplicate for it in g.items[:raw_sizes[g.key]]):
                bad += 1
    same = [Trajectory([Trace("A", (0,), (j,), 0), Trace("B", (1,), (j,), 1),
                        Trace("A", (2,), (j,), 2)], 0, COMPLETE) for j in range(4)]
    raw = group_traces(same, [0, 1, 0.5, 1])
    agree = pad_groups(raw, "truncate", 4) == pad_groups(raw, "fill", 4)
    ok = bad == 0 and agree
    report(4, ok, f"500 fuzzed sets, {bad} violations; identical-structure modes agree: {agree}")
    assert ok


# -- 5 ---------------------------------------------------------------------------------

def test_criterion_5_diverse_selection():
    rng = np.random.default_rng(5)
    cases = mismatches = 0
    for n in range(1, 9):
        for _ in range(40):
            pool = rng.choice(3)
            if pool == 0:
                rewards = rng.integers(0, 2, size=n).astype(float)
            elif pool == 1:
                rewards = rng.choice([0.0, 0.25, 0.5, 1.0], size=n)
            else:
                rewards = rng.normal(size=n)
            its = [GroupItem((0,), (0,), float(r), j) for j, r in enumerate(rewards)]
            for G in range(1, n + 1):
                got, want = select_k_diverse(its, G), brute_force_select(its, G)
                if got != want or statistics.pvariance([i.reward for i in got]) != \
                        statistics.pvariance([i.reward for i in want]):
                    mismatches += 1
                cases += 1
    ok = mismatches == 0
    report(5, ok, f"{cases} (items<=8, G<=items) cases, {mismatches} differ from exhaustive search")
    assert ok


# -- 6 ---------------------------------------------------------------------------------

def test_criterion_6_learning():
    lines, ok = [], True
    for name, kw in LEARN_ENVS:
        env = make_builtin_env(name, **kw)
        opt = dataset_expected_reward(env, optimal_bank(env))
        fresh = PolicyBank.for_program(env.program, env.context_vocab)
        uniform, _ = eval_reward(env, fresh, 99)
        finals, times = [], []
        for seed in SEEDS:
            t0 = time.perf_counter()
            res = train(env.program, PolicyBank.for_program(env.program, env.context_vocab), None,
                        env.dataset, env.reward_fn, TrainConfig(n_steps=750, seed=seed))
            times.append(time.perf_counter() - t0)
            finals.append(eval_reward(env, res.bank, seed)[0])
        mean = float(np.mean(finals))
        env_ok = (mean >= 0.85 * opt and uniform <= 0.05 * opt and env.uniform_reward <= 0.05 * opt
                  and max(times) <= 300)
        ok &= env_ok
        lines.append(f"{name}: optimum {opt:.3f}, uniform {uniform:.4f} (closed form "
                     f"{env.uniform_reward:.4f}), trained {[round(f, 3) for f in finals]} "
                     f"mean {mean:.3f} (>= {0.85 * opt:.3f}), slowest run {max(times):.0f}s")
    report(6, ok, "; ".join(lines))
    assert ok


# -- 7 ---------------------------------------------------------------------------------

def test_criterion_7_staging_trend():
    lines, ok = [], True
    for name, kw in LEARN_ENVS:
        env = make_builtin_env(name, **kw)
        hit = 0.6 ** (1.0 / n_calls(env))
        po = warm_start_bank(env, hit)
        po_reward, _ = eval_reward(env, po, 77)
        wins, pairs = 0, []
        for seed in SEEDS:
            cfg = TrainConfig(n_steps=150, seed=seed)
            plain = train(env.program, PolicyBank.for_program(env.program, env.context_vocab),
                          None, env.dataset, env.reward_fn, cfg)
            staged = better_together(env.program, warm_start_bank(env, hit), env.dataset,
                                     env.reward_fn, cfg)
            a = eval_reward(env, plain.bank, seed)[0]
            b = eval_reward(env, staged.bank, seed)[0]
            pairs.append((round(b, 3), round(a, 3)))
            wins += b >= a
        ok &= wins >= 2
        lines.append(f"{name}: start {po_reward:.2f}, (staged, plain) {pairs}, "
                     f"staged >= plain on {wins}/3")
    report(7, ok, "; ".join(lines))
    assert ok


# -- 8 ---------------------------------------------------------------------------------

def test_criterion_8_invariances():
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(50):
        g, snaps, cfg = random_group(rng)
        shift = float(rng.normal(0, 10))
        base = group_objective(g, snaps, cfg)
        moved = type(g)(g.key, [GroupItem(i.prompt, i.output, i.reward + shift,
                                          i.source_trajectory, i.is_padding_duplicate)
                                for i in g.items])
        rep = group_objective(moved, snaps, cfg)
        worst = max(worst, float(np.abs(rep.advantages - base.advantages).max()),
                    *(float(np.abs(rep.gradient[k] - base.gradient[k]).max()) for k in base.gradient))
        r = [i.reward for i in g.items]
        worst = max(worst, float(np.abs(compute_advantages(r) -
                                        compute_advantages([x + shift for x in r])).max()))

    env = make_builtin_env("chain-2")
    start = warm_start_bank(env, 0.4)
    teacher = warm_start_bank(env, 0.9).freeze()
    fp_start, fp_teacher = start.fingerprint(), teacher.fingerprint()
    cfg = TrainConfig(n_steps=20, rollouts={STUDENT: 8, "expert": 4}, seed=5)
    runs = [train(env.program, start, [TeacherSpec(STUDENT), TeacherSpec("expert", teacher)],
                  env.dataset, env.reward_fn, cfg) for _ in range(2)]
    immutable = (teacher.fingerprint() == fp_teacher and start.fingerprint() == fp_start
                 and all(r.snapshots.reference.fingerprint() == fp_start for r in runs))
    deterministic = (runs[0].history == runs[1].history and
                     runs[0].group_rows == runs[1].group_rows and
                     runs[0].bank.fingerprint() == runs[1].bank.fingerprint())
    ok = worst <= 1e-9 and immutable and deterministic
    report(8, ok, f"shift invariance max diff {worst:.1e} (<= 1e-9); teacher/reference "
                  f"bit-identical: {immutable}; two seeded runs bit-identical: {deterministic}")
    assert ok


# -- 9 ---------------------------------------------------------------------------------

SAMPLING_ENVS = [("chain-2", dict(vocab_size=8, max_output_len=2)),
                 ("branch", dict(vocab_size=8, max_output_len=2)),
                 ("multihop-copy", dict(h=1, vocab_size=4, max_output_len=3))]


def test_criterion_9_sampling_consistency():
    lines, ok = [], True
    for i, (name, kw) in enumerate(SAMPLING_ENVS):
        env = make_builtin_env(name, **kw)
        z, exact, mc, se = mc_vs_enumeration(env, 50_000, np.random.default_rng(900 + i))
        ok &= z <= 3.0
        lines.append(f"{name}: exact {exact:.4f}, MC {mc:.4f} +/- {se:.4f} ({z:.2f} sigma)")
    report(9, ok, "; ".join(lines) + " (<= 3 sigma)")
    assert ok


if __name__ == "__main__":
    tests = [v for k, v in sorted(globals().items()) if k.startswith("test_criterion_")]
    failed = 0
    for fn in tests:
        try:
            fn()
        except AssertionError:
            failed += 1
    print("\n".join(["", "summary:"] + RESULTS))
    sys.exit(1 if failed else 0)
