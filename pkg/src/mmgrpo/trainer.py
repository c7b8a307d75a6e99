"""Training loop: teacher-mixture rollouts, group formation, per-group ascent."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Optional, Sequence

import numpy as np

from .envs import ConfigurationError, Environment
from .groups import PADDING_MODES, form_module_level_groups
from .objective import ObjectiveConfig, group_objective
from .policy import PolicyBank, SnapshotSet, TablePolicy, snapshot_refresh
from .runtime import (
    DatasetExample,
    ProgramSpec,
    RewardFunction,
    Trace,
    Trajectory,
    execute_program,
    score,
)

log = logging.getLogger(__name__)

STUDENT = "student"


@dataclass
class TrainConfig:
    n_steps: int = 750
    batch_size: int = 4
    # teacher id -> rollouts per example
    rollouts: dict = field(default_factory=lambda: {STUDENT: 12})
    group_size: int = 12
    lr: float = 2.0
    weight_decay: float = 0.0
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    kl_coeff_overrides: dict = field(default_factory=dict)
    padding_mode: str = "fill"
    fallback_reward: float = 0.0
    seed: int = 0
    snapshot_every: int = 1

    def validate(self) -> None:
        errors = []
        if self.n_steps < 0:
            errors.append("n_steps: must be >= 0")
        if self.batch_size < 1:
            errors.append("batch_size: must be >= 1")
        if self.group_size < 1:
            errors.append("group_size: must be >= 1")
        if any(k < 0 for k in self.rollouts.values()):
            errors.append("rollouts: counts must be >= 0")
        if sum(self.rollouts.values()) < self.group_size:
            errors.append("rollouts: total rollouts per example must be >= group_size")
        if self.padding_mode not in PADDING_MODES:
            errors.append(f"padding_mode: must be one of {PADDING_MODES}")
        if self.snapshot_every < 1:
            errors.append("snapshot_every: must be >= 1")
        if self.lr < 0 or self.weight_decay < 0:
            errors.append("lr/weight_decay: must be >= 0")
        if errors:
            raise ConfigurationError("; ".join(errors))


@dataclass
class TeacherSpec:
    """A program sharing the student's structure, with its own weights.

    ``bank=None`` marks the student itself, which samples from the current
    old snapshot.  ``program`` may differ in prompt templates; ``module_map``
    renames teacher module ids to the student's.
    """

    teacher_id: str
    bank: Optional[PolicyBank] = None
    program: Optional[ProgramSpec] = None
    module_map: Optional[dict] = None

    @property
    def is_student(self) -> bool:
        return self.bank is None


def check_teachers(program: ProgramSpec, teachers: Sequence[TeacherSpec], K: dict) -> None:
    """Fail fast on structural mismatch, a missing student or missing counts."""
    ids = [t.teacher_id for t in teachers]
    if len(set(ids)) != len(ids):
        raise ConfigurationError(f"duplicate teacher ids {ids}")
    if sum(t.is_student for t in teachers) != 1:
        raise ConfigurationError("teacher list must include the student exactly once")
    missing = [i for i in ids if i not in K]
    if missing:
        raise ConfigurationError(f"rollout counts missing for teachers {missing}")
    extra = [k for k in K if k not in ids]
    if extra:
        raise ConfigurationError(f"rollout counts given for unknown teachers {extra}")
    want = dict(program.signature())
    for t in teachers:
        if t.is_student:
            continue
        tprog = t.program or program
        mmap = t.module_map or {}
        got = {mmap.get(m, m): v for m, v in tprog.signature()}
        if got != want:
            raise ConfigurationError(f"teacher {t.teacher_id!r} structure {got} != student {want}")
        for mid in tprog.module_ids:
            if t.bank.policy_for(mid).vocab_size != dict(tprog.signature())[mid]:
                raise ConfigurationError(f"teacher {t.teacher_id!r}: bank vocab mismatch on {mid!r}")


def _remap(traj: Trajectory, mmap: dict) -> Trajectory:
    if mmap:
        traj.traces = [Trace(mmap.get(tr.module_id, tr.module_id), tr.prompt, tr.output,
                             tr.invocation_index_global) for tr in traj.traces]
    return traj


def sample_teacher_rollouts(teachers: Sequence[TeacherSpec], K: dict, example: DatasetExample,
                            rng: np.random.Generator, program: ProgramSpec,
                            student_bank: PolicyBank) -> list[tuple[Any, Trajectory]]:
    """``K[t]`` rollouts from every teacher, all on ``example.input``."""
    out = []
    for t in teachers:
        tprog = t.program or program
        bank = student_bank if t.is_student else t.bank
        for _ in range(K[t.teacher_id]):
            traj = execute_program(tprog, bank, example.input, rng, example.example_id)
            traj.teacher_id = None if t.is_student else t.teacher_id
            out.append((traj.final_output, _remap(traj, t.module_map or {})))
    return out


@dataclass
class StepMetrics:
    step: int
    mean_reward: float
    student_reward: float
    completion_rate: float
    n_groups: int
    objective: float
    clip_fraction: float
    mean_kl: float


@dataclass
class GroupRow:
    step: int
    module_id: str
    invocation_index: int
    objective: float
    mean_abs_advantage: float
    clip_fraction: float
    mean_kl: float


@dataclass
class TrainResult:
    bank: PolicyBank
    history: list[StepMetrics]
    group_rows: list[GroupRow]
    snapshots: SnapshotSet


class TrainingInterrupted(Exception):
    """Raised after an interrupt once state has been rolled back to a step boundary."""


class Trainer:
    """Stateful runner behind :func:`train`; supports resuming from a checkpoint."""

    def __init__(self, program: ProgramSpec, student, dataset: Sequence[DatasetExample],
                 reward_fn: RewardFunction, cfg: TrainConfig,
                 teachers: Optional[Sequence[TeacherSpec]] = None):
        cfg.validate()
        if not dataset:
            raise ConfigurationError("dataset is empty")
        self.snapshots = student if isinstance(student, SnapshotSet) else SnapshotSet.start(student)
        self.snapshots.current.check_program(program)
        self.teachers = list(teachers) if teachers else [TeacherSpec(STUDENT)]
        check_teachers(program, self.teachers, cfg.rollouts)
        self.program = program
        self.dataset = list(dataset)
        self.reward_fn = reward_fn
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.step = 0
        self.history: list[StepMetrics] = []
        self.group_rows: list[GroupRow] = []

    # -- checkpoint state --------------------------------------------------

    def state(self) -> dict:
        return dict(step=self.step, rng=self.rng.bit_generator.state,
                    history=[vars(h) for h in self.history],
                    group_rows=[vars(g) for g in self.group_rows])

    def restore(self, state: dict, snapshots: SnapshotSet) -> None:
        self.snapshots = snapshots
        self.step = state["step"]
        self.rng.bit_generator.state = state["rng"]
        self.history = [StepMetrics(**h) for h in state["history"]]
        self.group_rows = [GroupRow(**g) for g in state["group_rows"]]

    # -- loop ----------------------------------------------------------------

    def run(self, n_steps: Optional[int] = None,
            on_step: Optional[Callable[["Trainer"], None]] = None) -> TrainResult:
        end = self.cfg.n_steps if n_steps is None else self.step + n_steps
        while self.step < end:
            boundary = (self.snapshots.current.frozen_copy(), self.snapshots.old,
                        self.rng.bit_generator.state, self.step,
                        len(self.history), len(self.group_rows))
            try:
                self._one_step()
            except KeyboardInterrupt:
                cur, old, rng_state, step, nh, ng = boundary
                self.snapshots = SnapshotSet(cur.copy(), old, self.snapshots.reference)
                self.rng.bit_generator.state = rng_state
                self.step = step
                del self.history[nh:]
                del self.group_rows[ng:]
                raise TrainingInterrupted(f"interrupted during step {step}") from None
            if on_step is not None:
                on_step(self)
        return TrainResult(self.snapshots.current, self.history, self.group_rows, self.snapshots)

    def _one_step(self) -> None:
        cfg = self.cfg
        if self.step % cfg.snapshot_every == 0:
            self.snapshots = snapshot_refresh(self.snapshots)
        batch = self.rng.integers(0, len(self.dataset), size=cfg.batch_size)

        rewards, student_rewards, completes = [], [], []
        objectives, clips, kls = [], [], []
        n_groups = 0
        for idx in batch:
            ex = self.dataset[int(idx)]
            rollouts = sample_teacher_rollouts(self.teachers, cfg.rollouts, ex, self.rng,
                                               self.program, self.snapshots.old)
            groups, targets = form_module_level_groups(
                self.program, rollouts, cfg.group_size, self.reward_fn, ex.input, ex.metadata,
                padding_mode=cfg.padding_mode, fallback_reward=cfg.fallback_reward)
            for _, traj in rollouts:
                rewards.append(traj.reward)
                completes.append(traj.complete)
                if traj.teacher_id is None:
                    student_rewards.append(traj.reward)
            if not groups:
                log.warning("step %d: example %r produced no groups; skipped",
                            self.step, ex.example_id)
                continue
            for g, module_id in zip(groups, targets):
                rep = group_objective(g, self.snapshots, cfg.objective,
                                      cfg.kl_coeff_overrides.get(module_id))
                self.snapshots.current.policy_for(module_id).apply_update(
                    rep.gradient, cfg.lr, cfg.weight_decay)
                n_groups += 1
                objectives.append(rep.objective)
                clips.append(rep.clip_fraction)
                kls.append(rep.mean_kl)
                self.group_rows.append(GroupRow(
                    self.step, module_id, g.key.relative_invocation_index, rep.objective,
                    rep.mean_abs_advantage, rep.clip_fraction, rep.mean_kl))

        def mean(xs):
            return float(np.mean(xs)) if xs else 0.0

        self.history.append(StepMetrics(
            self.step, mean(rewards), mean(student_rewards), mean(completes), n_groups,
            mean(objectives), mean(clips), mean(kls)))
        self.step += 1


def train(program: ProgramSpec, student, teachers: Optional[Sequence[TeacherSpec]],
          dataset: Sequence[DatasetExample], reward_fn: RewardFunction,
          cfg: TrainConfig) -> TrainResult:
    """Run ``cfg.n_steps`` steps of module-level GRPO from ``student``.

    ``student`` is a PolicyBank (its state becomes the reference policy) or a
    SnapshotSet.  ``teachers`` defaults to the student alone.
    """
    return Trainer(program, student, dataset, reward_fn, cfg, teachers).run()


def better_together(program: ProgramSpec, po_bank: PolicyBank,
                    dataset: Sequence[DatasetExample], reward_fn: RewardFunction,
                    cfg: TrainConfig, po_teacher_rollouts: int = 0,
                    teachers: Optional[Sequence[TeacherSpec]] = None) -> TrainResult:
    """Weight optimisation staged after a pre-optimised bank.

    The student starts from ``po_bank``.  With ``po_teacher_rollouts > 0`` a
    frozen copy of ``po_bank`` is also sampled as an off-policy teacher.
    """
    po_bank.check_program(program)
    teachers = list(teachers) if teachers else [TeacherSpec(STUDENT)]
    if po_teacher_rollouts > 0:
        teachers.append(TeacherSpec("po", po_bank.frozen_copy()))
        cfg = replace(cfg, rollouts={**cfg.rollouts, "po": po_teacher_rollouts})
    return train(program, po_bank, teachers, dataset, reward_fn, cfg)


def estimate_reward(program: ProgramSpec, bank: PolicyBank, dataset: Sequence[DatasetExample],
                    reward_fn: RewardFunction, n_per_example: int, rng: np.random.Generator,
                    fallback_reward: float = 0.0) -> tuple[float, float]:
    """Monte-Carlo mean reward over the dataset and its standard error."""
    rs = []
    for ex in dataset:
        for _ in range(n_per_example):
            traj = execute_program(program, bank, ex.input, rng, ex.example_id)
            rs.append(score(traj, reward_fn, ex.metadata, fallback_reward))
    rs = np.asarray(rs)
    return float(rs.mean()), float(rs.std(ddof=1) / np.sqrt(len(rs))) if len(rs) > 1 else 0.0


def warm_start_bank(env: Environment, hit_prob: float, window: int = 2,
                    shared: bool = False) -> PolicyBank:
    """Table bank whose first token hits the environment's target with ``hit_prob``.

    Stands in for a prompt-optimised program: a better starting distribution
    obtained without any weight updates.  Only the context ``(tag, payload)``
    at the first output position is biased; everything else stays uniform.
    """
    if env.target_token is None:
        raise ValueError(f"environment {env.name!r} exposes no target tokens")
    bank = PolicyBank.for_program(env.program, env.context_vocab, window, shared=shared)
    for spec in env.program.modules:
        pol = bank.policy_for(spec.module_id)
        if not isinstance(pol, TablePolicy):
            raise TypeError("warm_start_bank builds table policies only")
        V = spec.vocab_size
        boost = np.log(hit_prob * (V - 1) / (1.0 - hit_prob))
        for payload in range(V - 1):
            prompt = spec.make_prompt(payload)
            target = env.target_token(spec.module_id, prompt)
            row = pol.row_for(prompt)
            pol.params["logits"][row] = 0.0
            pol.params["logits"][row, target] = boost
    return bank
