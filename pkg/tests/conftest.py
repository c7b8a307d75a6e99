import numpy as np
import pytest

from mmgrpo.groups import GroupItem
from mmgrpo.policy import PolicyBank, TablePolicy
from mmgrpo.runtime import COMPLETE, Call, Halt, ModuleSpec, ProgramSpec, Trace, Trajectory


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_traj(counts, reward=None, status=COMPLETE, prompt_of=None):
    """Trajectory calling modules in the given order, e.g. ["M1", "M2", "M1"]."""
    traces = []
    for i, m in enumerate(counts):
        p = prompt_of(m, i) if prompt_of else (i,)
        traces.append(Trace(m, p, (i % 3,), i))
    t = Trajectory(traces, 0 if status == COMPLETE else None, status)
    t.reward = reward
    return t


def items(rewards):
    return [GroupItem((0,), (0,), float(r), j) for j, r in enumerate(rewards)]


def single_module_program(V=8, max_len=3, end=None, module_id="A", parse=None):
    spec = ModuleSpec(module_id, lambda inp: (inp,), V, max_len, end_token=end, parse=parse)

    def control_flow(x, history):
        return Call(module_id, x) if not history else Halt(history[0][1])
    return ProgramSpec((spec,), control_flow, max_invocations=1)


def table_bank(program, context_vocab, window=2, shared=False):
    return PolicyBank.for_program(program, context_vocab, window, shared=shared)


def set_row(policy: TablePolicy, prompt, prefix, logits):
    policy.params["logits"][policy.row_for(prompt, prefix)] = logits


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
