"""Built-in synthetic environments.

Token layout shared by every environment with vocabulary size ``V``:

* ``0 .. V-2`` are content tokens,
* ``V-1`` is the end token,
* ``V + i`` is the tag token of the i-th module (prompts only).

Every prompt is ``(tag, payload)`` so a policy with a two-token context window
sees exactly the module identity and its structured input.  Each module must
begin its output with a content token; an output that starts with the end
token is a parse failure and halts the program.

Closed-form reference values (uniform policy over all ``V`` tokens):

* ``chain-k``: optimum 1, uniform ``V**-k``;
* ``branch``: optimum 1, uniform ``V**-2``;
* ``multihop-copy``: optimum 1, uniform ``V**-(2h)``.
"""

from __future__ import annotations

import re

from .runtime import (
    Call,
    DatasetExample,
    Environment,
    Halt,
    ModuleSpec,
    ProgramSpec,
    Trajectory,
)


class ConfigurationError(ValueError):
    pass


ENV_NAMES = ("chain-k", "branch", "multihop-copy")


def _succ(t: int, n_content: int, shift: int = 1) -> int:
    return (t + shift) % n_content


def _starts_with_content(end_token: int):
    def parse(output) -> bool:
        return len(output) > 0 and output[0] != end_token
    return parse


def _tagged(tag: int):
    def template(payload) -> tuple[int, int]:
        return (tag, int(payload))
    return template


def _match_reward(final_output, trajectory: Trajectory, gold) -> float:
    return 1.0 if trajectory.first_tokens() == tuple(gold) else 0.0


def _module(module_id: str, tag: int, vocab_size: int, max_len: int) -> ModuleSpec:
    end = vocab_size - 1
    return ModuleSpec(module_id, _tagged(tag), vocab_size, max_len, end_token=end,
                      parse=_starts_with_content(end))


def chain_env(k: int = 2, vocab_size: int = 8, max_output_len: int = 4) -> Environment:
    """k modules in sequence; module i must emit the successor of its input token."""
    if k < 1 or vocab_size < 2:
        raise ConfigurationError("chain-k needs k >= 1 and vocab_size >= 2")
    n_content = vocab_size - 1
    ids = [f"m{i}" for i in range(k)]
    modules = tuple(_module(mid, vocab_size + i, vocab_size, max_output_len)
                    for i, mid in enumerate(ids))

    def control_flow(x, history):
        n = len(history)
        if n == k:
            return Halt(history[-1][1][0])
        token = x if n == 0 else history[-1][1][0]
        return Call(ids[n], token)

    dataset = []
    for s in range(n_content):
        gold, t = [], s
        for _ in range(k):
            t = _succ(t, n_content)
            gold.append(t)
        dataset.append(DatasetExample(s, tuple(gold), example_id=s))

    def target(module_id, prompt):
        return _succ(prompt[-1], n_content)

    program = ProgramSpec(modules, control_flow, max_invocations=k, name=f"chain-{k}")
    return Environment(f"chain-{k}", program, dataset, _match_reward,
                       context_vocab=vocab_size + k, optimal_reward=1.0,
                       uniform_reward=vocab_size ** -k,
                       params=dict(k=k, vocab_size=vocab_size, max_output_len=max_output_len),
                       target_token=target)


def branch_env(vocab_size: int = 8, max_output_len: int = 4) -> Environment:
    """A router picks ``left`` or ``right`` by the parity of its output token.

    The router must emit the successor of the input; the selected branch must
    emit the token two steps after the router's token.
    """
    if vocab_size < 3:
        raise ConfigurationError("branch needs vocab_size >= 3")
    n_content = vocab_size - 1
    modules = (
        _module("router", vocab_size, vocab_size, max_output_len),
        _module("left", vocab_size + 1, vocab_size, max_output_len),
        _module("right", vocab_size + 2, vocab_size, max_output_len),
    )

    def control_flow(x, history):
        if not history:
            return Call("router", x)
        if len(history) == 1:
            routed = history[0][1][0]
            return Call("left" if routed % 2 == 0 else "right", routed)
        return Halt(history[-1][1][0])

    dataset = []
    for s in range(n_content):
        r = _succ(s, n_content)
        dataset.append(DatasetExample(s, (r, _succ(r, n_content, 2)), example_id=s))

    def target(module_id, prompt):
        return _succ(prompt[-1], n_content, 1 if module_id == "router" else 2)

    program = ProgramSpec(modules, control_flow, max_invocations=2, name="branch")
    return Environment("branch", program, dataset, _match_reward,
                       context_vocab=vocab_size + 3, optimal_reward=1.0,
                       uniform_reward=vocab_size ** -2,
                       params=dict(vocab_size=vocab_size, max_output_len=max_output_len),
                       target_token=target)


def multihop_env(h: int = 1, vocab_size: int = 8, max_output_len: int = 4) -> Environment:
    """Alternating ``query``/``answer`` calls, ``h`` hops.

    ``query`` must emit the successor of the current token.  The environment
    looks up evidence for the emitted query (two steps ahead) and ``answer``
    must copy that evidence token, which seeds the next hop.
    """
    if h < 1 or vocab_size < 2:
        raise ConfigurationError("multihop-copy needs h >= 1 and vocab_size >= 2")
    n_content = vocab_size - 1
    modules = (
        _module("query", vocab_size, vocab_size, max_output_len),
        _module("answer", vocab_size + 1, vocab_size, max_output_len),
    )

    def evidence(q: int) -> int:
        return _succ(q, n_content, 2)

    def control_flow(x, history):
        n = len(history)
        if n == 2 * h:
            return Halt(history[-1][1][0])
        if n % 2 == 0:
            return Call("query", x if n == 0 else history[-1][1][0])
        return Call("answer", evidence(history[-1][1][0]))

    dataset = []
    for s in range(n_content):
        gold, c = [], s
        for _ in range(h):
            q = _succ(c, n_content)
            c = evidence(q)
            gold += [q, c]
        dataset.append(DatasetExample(s, tuple(gold), example_id=s))

    def target(module_id, prompt):
        return _succ(prompt[-1], n_content) if module_id == "query" else prompt[-1]

    program = ProgramSpec(modules, control_flow, max_invocations=2 * h,
                          name=f"multihop-copy-{h}")
    return Environment("multihop-copy", program, dataset, _match_reward,
                       context_vocab=vocab_size + 2, optimal_reward=1.0,
                       uniform_reward=vocab_size ** -(2 * h),
                       params=dict(h=h, vocab_size=vocab_size, max_output_len=max_output_len),
                       target_token=target)


def make_builtin_env(name: str, **params) -> Environment:
    """Build a named environment.

    ``chain-3`` is shorthand for ``make_builtin_env("chain", k=3)``.
    """
    m = re.fullmatch(r"chain-(\d+)", name)
    if m:
        params.setdefault("k", int(m.group(1)))
        name = "chain"
    builders = {"chain": chain_env, "chain-k": chain_env, "branch": branch_env,
                "multihop-copy": multihop_env}
    if name not in builders:
        raise ConfigurationError(f"unknown environment {name!r}; known: {', '.join(ENV_NAMES)}")
    try:
        return builders[name](**params)
    except TypeError as exc:
        raise ConfigurationError(f"bad parameters for {name!r}: {exc}") from None
