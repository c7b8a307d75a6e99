"""Command line: ``train``, ``rollout``, ``inspect-groups``, ``verify``.

Log verbosity comes from ``MMGRPO_LOG_LEVEL`` (default ``WARNING``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import persistence
from .config import ConfigError, RunConfig, load_config
from .envs import ConfigurationError, make_builtin_env
from .groups import GrpoGroup, group_traces, pad_groups, select_k_diverse
from .oracles import run_suite
from .persistence import LogFormatError
from .policy import PolicyBank, SnapshotSet, load_bank, load_checkpoint, save_bank, save_checkpoint
from .runtime import execute_program, score
from .trainer import STUDENT, TeacherSpec, Trainer, TrainingInterrupted, estimate_reward

log = logging.getLogger("mmgrpo")

CHECKPOINT = "checkpoint.npz"
FINAL_BANK = "bank.npz"
METRICS = "metrics.csv"
STEPS = "steps.csv"
MANIFEST = "manifest.json"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _build_env(cfg: RunConfig):
    return make_builtin_env(cfg.env.name, **cfg.env.params)


def _initial_bank(cfg: RunConfig, env) -> PolicyBank:
    p = cfg.policy
    kw = dict(hidden=p.hidden, seed=cfg.seed) if p.kind == "mlp" else {}
    return PolicyBank.for_program(env.program, env.context_vocab, p.window, p.shared, p.kind, **kw)


def _check_bank(bank: PolicyBank, env, what: str) -> None:
    try:
        bank.check_program(env.program)
    except (KeyError, ValueError) as exc:
        raise ConfigurationError(f"{what} does not fit environment {env.name!r}: {exc}") from None


def cmd_train(args) -> int:
    overrides = {"seed": args.seed, "stage.mode": args.stage, "stage.init_bank": args.init_bank}
    cfg = load_config(args.config, overrides)
    env = _build_env(cfg)
    tcfg = cfg.train_config()
    out = Path(args.out or Path("runs") / cfg.config_hash()[:12])
    out.mkdir(parents=True, exist_ok=True)

    teachers = [TeacherSpec(STUDENT)]
    if cfg.stage.mode == "better-together":
        if not cfg.stage.init_bank:
            raise ConfigError(["stage.init_bank: required for better-together"])
        start_bank = load_bank(cfg.stage.init_bank)
        _check_bank(start_bank, env, f"init bank {cfg.stage.init_bank}")
        if cfg.stage.po_teacher_rollouts:
            teachers.append(TeacherSpec("po", start_bank.frozen_copy()))
            tcfg.rollouts["po"] = cfg.stage.po_teacher_rollouts
    else:
        start_bank = _initial_bank(cfg, env)

    trainer = Trainer(env.program, start_bank, env.dataset, env.reward_fn, tcfg, teachers)
    flushed = {"metrics": 0, "steps": 0}
    ckpt_path = out / CHECKPOINT
    if args.resume and ckpt_path.exists():
        banks, meta = load_checkpoint(ckpt_path)
        if meta.get("config_hash") != cfg.config_hash():
            raise ConfigurationError(f"{ckpt_path} was written by a different config; refusing to resume")
        snaps = SnapshotSet(banks["current"], banks["old"].freeze(), banks["reference"].freeze())
        trainer.restore(meta["trainer"], snaps)
        flushed = meta["flushed"]
        persistence.truncate_rows(out / METRICS, flushed["metrics"])
        persistence.truncate_rows(out / STEPS, flushed["steps"])
        log.info("resumed from step %d", trainer.step)
    else:
        for name in (METRICS, STEPS):
            (out / name).unlink(missing_ok=True)

    manifest = dict(config_hash=cfg.config_hash(), seed=cfg.seed, env=cfg.env.name,
                    env_params=cfg.env.params, stage=cfg.stage.mode, started=_now(),
                    finished=None, checkpoint=str(ckpt_path), metrics=str(out / METRICS),
                    steps=str(out / STEPS), final_bank=None, config=json.loads(cfg.canonical()))
    persistence.write_json(out / MANIFEST, manifest)

    def flush_and_checkpoint(t: Trainer) -> None:
        flushed["metrics"] = persistence.append_rows(out / METRICS, t.group_rows, flushed["metrics"])
        flushed["steps"] = persistence.append_rows(out / STEPS, t.history, flushed["steps"])
        s = t.snapshots
        save_checkpoint(ckpt_path, {"current": s.current, "old": s.old, "reference": s.reference},
                        dict(config_hash=cfg.config_hash(), trainer=t.state(), flushed=flushed))

    def on_step(t: Trainer) -> None:
        if t.step % cfg.train.checkpoint_every == 0:
            flush_and_checkpoint(t)

    try:
        result = trainer.run(on_step=on_step)
    except TrainingInterrupted as exc:
        flush_and_checkpoint(trainer)
        print(f"{exc}; checkpoint written to {ckpt_path} (resume with --resume)", file=sys.stderr)
        return 130
    flush_and_checkpoint(trainer)
    save_bank(out / FINAL_BANK, result.bank, dict(config_hash=cfg.config_hash(), env=cfg.env.name))

    manifest.update(finished=_now(), final_bank=str(out / FINAL_BANK))
    if cfg.eval_rollouts:
        mean, se = estimate_reward(env.program, result.bank, env.dataset, env.reward_fn,
                                   cfg.eval_rollouts, np.random.default_rng(cfg.seed + 1),
                                   cfg.train.fallback_reward)
        manifest.update(eval_reward=mean, eval_reward_se=se)
        print(f"final evaluation reward {mean:.4f} +/- {se:.4f}")
    persistence.write_json(out / MANIFEST, manifest)
    print(f"run written to {out}")
    return 0


def cmd_rollout(args) -> int:
    cfg = load_config(args.config, {"seed": args.seed})
    env = _build_env(cfg)
    try:
        bank = load_bank(args.checkpoint)
    except (OSError, ValueError) as exc:
        print(f"error: cannot use checkpoint {args.checkpoint}: {exc}", file=sys.stderr)
        return 2
    _check_bank(bank, env, f"checkpoint {args.checkpoint}")
    rng = np.random.default_rng(cfg.seed)
    trajs = []
    for i in range(args.n):
        ex = env.dataset[i % len(env.dataset)]
        traj = execute_program(env.program, bank, ex.input, rng, ex.example_id)
        score(traj, env.reward_fn, ex.metadata, cfg.train.fallback_reward)
        trajs.append(traj)
    persistence.write_trajectory_log(args.out, trajs)
    print(f"wrote {len(trajs)} trajectories to {args.out}")
    return 0


def inspect_groups(trajectories, G=None, padding_mode: str = "fill",
                   fallback_reward: float = 0.0) -> list[dict]:
    """Offline group formation over a trajectory log, one meta-group per input id."""
    by_input: dict = {}
    for t in trajectories:
        by_input.setdefault(json.dumps(t.program_input_id), []).append(t)
    report = []
    for input_key, trajs in by_input.items():
        rewards = [fallback_reward if t.reward is None else t.reward for t in trajs]
        raw = group_traces(trajs, rewards)
        pre = {g.key: len(g) for g in raw}
        padded = pad_groups(raw, padding_mode, len(trajs))
        size = G or len(trajs)
        for g in padded:
            final = GrpoGroup(g.key, select_k_diverse(g.items, size))
            rec = persistence.group_record(final, pre[g.key])
            rec["program_input_id"] = json.loads(input_key)
            report.append(rec)
        report.append({"program_input_id": json.loads(input_key), "summary": True,
                       "rollouts": len(trajs), "groups_pre_padding": len(raw),
                       "groups_post_padding": len(padded)})
    return report


def cmd_inspect(args) -> int:
    try:
        trajs = persistence.read_trajectory_log(args.log)
    except LogFormatError as exc:
        print(f"error: {args.log}: {exc}", file=sys.stderr)
        return 2
    report = inspect_groups(trajs, args.group_size, args.padding, args.fallback_reward)
    if args.json:
        for rec in report:
            print(persistence.dumps_record(rec))
        return 0
    if not report:
        print("no trajectories: 0 groups")
        return 0
    for rec in report:
        if rec.get("summary"):
            print(f"input {rec['program_input_id']}: {rec['rollouts']} rollouts, "
                  f"{rec['groups_pre_padding']} groups before padding, "
                  f"{rec['groups_post_padding']} after {args.padding}")
            continue
        n_dup = sum(rec["padding"])
        print(f"  {rec['module']}#{rec['index']}: size {rec['size_pre']} -> {rec['size']} "
              f"({n_dup} duplicates)  reward mean {rec['reward_mean']:.4f} std {rec['reward_std']:.4f}")
    return 0


def cmd_verify(args) -> int:
    results = run_suite(mutate=args.mutate, quick=args.quick)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<28} {r.seconds:7.2f}s  {r.detail}")
    n_fail = sum(not r.passed for r in results)
    print(f"{len(results) - n_fail}/{len(results)} oracles passed")
    return 1 if n_fail else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmgrpo", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run module-level GRPO training")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="run directory (default runs/<config hash>)")
    t.add_argument("--stage", choices=["plain", "better-together"])
    t.add_argument("--init-bank", help="pre-optimised bank checkpoint for better-together")
    t.add_argument("--resume", action="store_true", help="continue from the run's checkpoint")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("rollout", help="sample trajectories under a checkpoint")
    r.add_argument("--config", required=True)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("-n", type=int, default=12)
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int)
    r.set_defaults(func=cmd_rollout)

    g = sub.add_parser("inspect-groups", help="form module-level groups from a trajectory log")
    g.add_argument("log")
    g.add_argument("-G", "--group-size", type=int)
    g.add_argument("--padding", choices=["truncate", "fill"], default="fill")
    g.add_argument("--fallback-reward", type=float, default=0.0)
    g.add_argument("--json", action="store_true", help="one JSON record per group")
    g.set_defaults(func=cmd_inspect)

    v = sub.add_parser("verify", help="run the brute-force oracle suite")
    v.add_argument("--quick", action="store_true")
    v.add_argument("--mutate", choices=["gradient"], help="inject a fault; the suite must fail")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("MMGRPO_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
