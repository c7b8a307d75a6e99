"""Multi-module programs over token vocabularies and their execution.

A program is a set of modules plus a control-flow skeleton.  The skeleton
sees the program input and the outputs produced so far, and either names the
next module to call (with that module's structured input) or halts with a
final output.  Modules never see each other's prompts: a prompt is built only
from the structured input the skeleton hands over.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Hashable, Optional, Sequence

import numpy as np

COMPLETE = "complete"
PARSE_FAILURE = "parse_failure"
EARLY_TERMINATION = "early_termination"
LENGTH_OVERFLOW = "length_overflow"
STATUSES = (COMPLETE, PARSE_FAILURE, EARLY_TERMINATION, LENGTH_OVERFLOW)

TokenSeq = tuple[int, ...]


class ProgramError(ValueError):
    """Raised for malformed programs or control flow that breaks its contract."""


@dataclass(frozen=True)
class ModuleSpec:
    module_id: str
    prompt_template: Callable[[Any], Sequence[int]]
    vocab_size: int
    max_output_len: int = 4
    # None disables early stopping; built-in envs use vocab_size - 1.
    end_token: Optional[int] = None
    # Output predicate; False halts the program with status parse_failure.
    parse: Optional[Callable[[TokenSeq], bool]] = None
    # When set, hitting max_output_len without end_token is a length overflow.
    require_end: bool = False

    def __post_init__(self):
        if self.vocab_size < 1:
            raise ProgramError(f"module {self.module_id!r}: vocab_size must be >= 1")
        if self.max_output_len < 1:
            raise ProgramError(f"module {self.module_id!r}: max_output_len must be >= 1")
        if self.end_token is not None and not 0 <= self.end_token < self.vocab_size:
            raise ProgramError(f"module {self.module_id!r}: end_token outside vocabulary")

    def make_prompt(self, module_input: Any) -> TokenSeq:
        return tuple(int(t) for t in self.prompt_template(module_input))


@dataclass(frozen=True)
class Call:
    """Control-flow directive: invoke ``module_id`` on ``module_input``."""

    module_id: str
    module_input: Any


@dataclass(frozen=True)
class Halt:
    final_output: Any


@dataclass(frozen=True)
class ProgramSpec:
    """Modules plus a deterministic skeleton.

    ``control_flow(x, history)`` receives the program input and a tuple of
    ``(module_id, output)`` pairs for the calls made so far, and returns a
    :class:`Call` or a :class:`Halt`.
    """

    modules: tuple[ModuleSpec, ...]
    control_flow: Callable[[Any, tuple[tuple[str, TokenSeq], ...]], Call | Halt]
    max_invocations: int = 16
    name: str = "program"

    def __post_init__(self):
        ids = [m.module_id for m in self.modules]
        if len(set(ids)) != len(ids):
            raise ProgramError(f"duplicate module ids in {ids}")
        if self.max_invocations < 1:
            raise ProgramError("max_invocations must be >= 1")

    @property
    def module_ids(self) -> tuple[str, ...]:
        return tuple(m.module_id for m in self.modules)

    def module(self, module_id: str) -> ModuleSpec:
        for m in self.modules:
            if m.module_id == module_id:
                return m
        raise ProgramError(f"control flow referenced undeclared module {module_id!r}")

    def signature(self) -> tuple[tuple[str, int], ...]:
        """Structural interface: module ids with their vocabulary sizes."""
        return tuple((m.module_id, m.vocab_size) for m in self.modules)


@dataclass(frozen=True)
class DatasetExample:
    """A program input together with metadata only the reward function may read."""

    input: Any
    metadata: Any = None
    example_id: Hashable = None


@dataclass(frozen=True)
class Trace:
    module_id: str
    prompt: TokenSeq
    output: TokenSeq
    invocation_index_global: int


@dataclass
class Trajectory:
    traces: list[Trace]
    final_output: Any = None
    status: str = COMPLETE
    program_input_id: Hashable = None
    # Populated once the trajectory has been scored.
    reward: Optional[float] = None
    # Which teacher program produced it; None for the student.
    teacher_id: Optional[str] = None

    @property
    def complete(self) -> bool:
        return self.status == COMPLETE

    def invocation_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for tr in self.traces:
            counts[tr.module_id] = counts.get(tr.module_id, 0) + 1
        return counts

    def first_tokens(self) -> tuple[Optional[int], ...]:
        return tuple(tr.output[0] if tr.output else None for tr in self.traces)


RewardFunction = Callable[[Any, Trajectory, Any], float]


def execute_program(program: ProgramSpec, policies, x: Any, rng: np.random.Generator,
                    program_input_id: Hashable = None) -> Trajectory:
    """Run ``program`` on ``x``, sampling every module output from ``policies``.

    ``policies`` is anything with ``policy_for(module_id)`` (a PolicyBank).
    """
    traces: list[Trace] = []
    history: list[tuple[str, TokenSeq]] = []
    while True:
        step = program.control_flow(x, tuple(history))
        if isinstance(step, Halt):
            return Trajectory(traces, step.final_output, COMPLETE, program_input_id)
        if not isinstance(step, Call):
            raise ProgramError(f"control flow returned {step!r}; expected Call or Halt")
        if len(traces) >= program.max_invocations:
            return Trajectory(traces, None, EARLY_TERMINATION, program_input_id)

        spec = program.module(step.module_id)
        prompt = spec.make_prompt(step.module_input)
        policy = policies.policy_for(spec.module_id)
        output = policy.sample_output(prompt, rng, spec.max_output_len, spec.end_token)
        traces.append(Trace(spec.module_id, prompt, output, len(traces)))
        history.append((spec.module_id, output))

        if spec.parse is not None and not spec.parse(output):
            return Trajectory(traces, None, PARSE_FAILURE, program_input_id)
        if (spec.require_end and len(output) == spec.max_output_len
                and output[-1] != spec.end_token):
            return Trajectory(traces, None, LENGTH_OVERFLOW, program_input_id)


def score(trajectory: Trajectory, reward_fn: RewardFunction, metadata: Any,
          fallback_reward: float = 0.0) -> float:
    """Program-level reward; incomplete trajectories get ``fallback_reward``."""
    if trajectory.complete:
        r = float(reward_fn(trajectory.final_output, trajectory, metadata))
    else:
        r = float(fallback_reward)
    trajectory.reward = r
    return r


@dataclass
class Environment:
    """A wired program, its dataset and reward, plus closed-form reference values."""

    name: str
    program: ProgramSpec
    dataset: list[DatasetExample]
    reward_fn: RewardFunction
    context_vocab: int
    optimal_reward: float
    uniform_reward: float
    params: dict = field(default_factory=dict)
    # Maps (module_id, prompt) to the output token that earns reward.
    target_token: Optional[Callable[[str, TokenSeq], Optional[int]]] = None
