"""Per-module autoregressive softmax policies, banks of them, and snapshots.

A policy maps a fixed window of the most recent tokens (prompt tail followed
by the output emitted so far) to logits over the module's output vocabulary.
Two parameterisations are provided: a lookup table with one logit row per
window (exact, enumerable) and a tiny tanh MLP over one-hot window features.

Gradients are expressed as dicts of arrays keyed like ``policy.params``.
"""

from __future__ import annotations

import copy
import hashlib
import io
import json
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

CHECKPOINT_FORMAT = "mmgrpo-checkpoint"
CHECKPOINT_VERSION = 1


class DomainError(ValueError):
    """Token id outside the vocabulary a policy was built for."""


class FrozenPolicyError(RuntimeError):
    pass


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class Policy:
    """Shared machinery; subclasses supply ``_logits_for_windows`` and
    ``_backprop``."""

    kind = "base"

    def __init__(self, vocab_size: int, context_vocab: int, window: int = 2):
        if vocab_size < 1 or window < 1:
            raise ValueError("vocab_size and window must be positive")
        if context_vocab < vocab_size:
            raise ValueError("context_vocab must cover the output vocabulary")
        self.vocab_size = vocab_size
        self.context_vocab = context_vocab
        self.window = window
        self.params: dict[str, np.ndarray] = {}

    # -- contexts ---------------------------------------------------------

    @property
    def pad_token(self) -> int:
        return self.context_vocab

    def _check(self, prompt: Sequence[int], output: Sequence[int]) -> None:
        for t in prompt:
            if not 0 <= t < self.context_vocab:
                raise DomainError(f"prompt token {t} outside [0, {self.context_vocab})")
        for t in output:
            if not 0 <= t < self.vocab_size:
                raise DomainError(f"output token {t} outside [0, {self.vocab_size})")

    def windows(self, prompt: Sequence[int], output: Sequence[int]) -> list[tuple[int, ...]]:
        """Context window preceding each output position."""
        c = self.window
        seq = [self.pad_token] * c + list(prompt) + list(output)
        start = c + len(prompt)
        return [tuple(seq[start + t - c:start + t]) for t in range(len(output))]

    def window_after(self, tokens: Sequence[int]) -> tuple[int, ...]:
        seq = [self.pad_token] * self.window + list(tokens)
        return tuple(seq[-self.window:])

    # -- distributions ----------------------------------------------------

    def logits(self, prompt: Sequence[int], output: Sequence[int]) -> np.ndarray:
        """Logits at every output position, shape ``(len(output), V)``."""
        self._check(prompt, output)
        return self._logits_for_windows(self.windows(prompt, output))

    def distributions(self, prompt, output) -> np.ndarray:
        return softmax(self.logits(prompt, output))

    def log_prob(self, prompt: Sequence[int], output: Sequence[int]) -> np.ndarray:
        """``log p(output[t] | prompt, output[:t])`` for every t."""
        if len(output) < 1:
            raise ValueError("output must contain at least one token")
        lp = log_softmax(self.logits(prompt, output))
        return lp[np.arange(len(output)), list(output)]

    def next_distribution(self, tokens: Sequence[int]) -> np.ndarray:
        return softmax(self._logits_for_windows([self.window_after(tokens)])[0])

    def sample_output(self, prompt: Sequence[int], rng: np.random.Generator, max_len: int,
                      end_token: Optional[int] = None) -> tuple[int, ...]:
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        self._check(prompt, ())
        out: list[int] = []
        ctx = list(prompt)
        for _ in range(max_len):
            z = self._logits_for_windows([self.window_after(ctx)])[0]
            cdf = np.cumsum(np.exp(z - z.max()))
            tok = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
            tok = min(tok, self.vocab_size - 1)
            out.append(tok)
            ctx.append(tok)
            if tok == end_token:
                break
        return tuple(out)

    # -- gradients --------------------------------------------------------

    def zeros_like_params(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def backprop_logits(self, prompt, output, dlogits: np.ndarray,
                        grad: Optional[dict] = None) -> dict[str, np.ndarray]:
        """Accumulate ``sum_t dlogits[t] . d logits_t / d params`` into ``grad``."""
        self._check(prompt, output)
        if grad is None:
            grad = self.zeros_like_params()
        self._backprop(self.windows(prompt, output), np.asarray(dlogits, dtype=float), grad)
        return grad

    def weighted_log_prob_grad(self, prompt, output, weights: Sequence[float],
                               grad: Optional[dict] = None) -> dict[str, np.ndarray]:
        """Gradient of ``sum_t weights[t] * log p(output[t] | ...)``."""
        probs = self.distributions(prompt, output)
        d = -probs * np.asarray(weights, dtype=float)[:, None]
        d[np.arange(len(output)), list(output)] += weights
        return self.backprop_logits(prompt, output, d, grad)

    def grad_log_prob(self, prompt, output) -> dict[str, np.ndarray]:
        return self.weighted_log_prob_grad(prompt, output, np.ones(len(output)))

    # -- state ------------------------------------------------------------

    @property
    def frozen(self) -> bool:
        return any(not a.flags.writeable for a in self.params.values())

    def freeze(self) -> "Policy":
        for a in self.params.values():
            a.flags.writeable = False
        return self

    def copy(self) -> "Policy":
        new = copy.copy(self)
        new.params = {k: np.array(v, copy=True) for k, v in self.params.items()}
        return new

    def apply_update(self, grad: dict, lr: float, weight_decay: float = 0.0) -> None:
        """Ascent step ``theta <- theta + lr * (grad - weight_decay * theta)``."""
        if self.frozen:
            raise FrozenPolicyError("cannot update a frozen policy")
        for k, p in self.params.items():
            p += lr * (grad[k] - weight_decay * p)

    def header(self) -> dict:
        return dict(kind=self.kind, vocab_size=self.vocab_size,
                    context_vocab=self.context_vocab, window=self.window)

    def _logits_for_windows(self, windows: list[tuple[int, ...]]) -> np.ndarray:
        raise NotImplementedError

    def _backprop(self, windows, dlogits: np.ndarray, grad: dict) -> None:
        raise NotImplementedError


class TablePolicy(Policy):
    """One logit row per context window: ``(context_vocab + 1) ** window`` rows."""

    kind = "table"

    def __init__(self, vocab_size: int, context_vocab: int, window: int = 2,
                 logits: Optional[np.ndarray] = None):
        super().__init__(vocab_size, context_vocab, window)
        n_rows = (context_vocab + 1) ** window
        if logits is None:
            logits = np.zeros((n_rows, vocab_size))
        logits = np.asarray(logits, dtype=float)
        if logits.shape != (n_rows, vocab_size):
            raise ValueError(f"logit table must have shape {(n_rows, vocab_size)}")
        self.params = {"logits": logits}

    def row(self, window: Sequence[int]) -> int:
        base = self.context_vocab + 1
        idx = 0
        for t in window:
            idx = idx * base + t
        return idx

    def row_for(self, prompt: Sequence[int], output_prefix: Sequence[int] = ()) -> int:
        return self.row(self.window_after(list(prompt) + list(output_prefix)))

    def _logits_for_windows(self, windows):
        return self.params["logits"][[self.row(w) for w in windows]]

    def _backprop(self, windows, dlogits, grad):
        np.add.at(grad["logits"], [self.row(w) for w in windows], dlogits)


class MLPPolicy(Policy):
    """Two-layer tanh network over concatenated one-hot window slots."""

    kind = "mlp"

    def __init__(self, vocab_size: int, context_vocab: int, window: int = 2,
                 hidden: int = 16, seed: int = 0, params: Optional[dict] = None):
        super().__init__(vocab_size, context_vocab, window)
        self.hidden = hidden
        n_in = window * (context_vocab + 1)
        if params is None:
            rng = np.random.default_rng(seed)
            params = {
                "W1": rng.normal(0.0, 1.0 / np.sqrt(window), (n_in, hidden)),
                "b1": np.zeros(hidden),
                # zero output layer: the initial policy is uniform
                "W2": np.zeros((hidden, vocab_size)),
                "b2": np.zeros(vocab_size),
            }
        self.params = {k: np.asarray(v, dtype=float) for k, v in params.items()}

    def _active(self, window) -> list[int]:
        base = self.context_vocab + 1
        return [slot * base + t for slot, t in enumerate(window)]

    def _hidden(self, windows):
        W1, b1 = self.params["W1"], self.params["b1"]
        return np.tanh(np.stack([W1[self._active(w)].sum(axis=0) for w in windows]) + b1)

    def _logits_for_windows(self, windows):
        return self._hidden(windows) @ self.params["W2"] + self.params["b2"]

    def _backprop(self, windows, dlogits, grad):
        h = self._hidden(windows)
        grad["W2"] += h.T @ dlogits
        grad["b2"] += dlogits.sum(axis=0)
        dz = (dlogits @ self.params["W2"].T) * (1.0 - h * h)
        grad["b1"] += dz.sum(axis=0)
        for w, dzt in zip(windows, dz):
            grad["W1"][self._active(w)] += dzt

    def header(self) -> dict:
        return dict(super().header(), hidden=self.hidden)


def make_policy(kind: str, vocab_size: int, context_vocab: int, window: int = 2,
                **kwargs) -> Policy:
    if kind == "table":
        return TablePolicy(vocab_size, context_vocab, window, **kwargs)
    if kind == "mlp":
        return MLPPolicy(vocab_size, context_vocab, window, **kwargs)
    raise ValueError(f"unknown policy kind {kind!r}")


class PolicyBank:
    """Module id -> policy, with optional parameter sharing.

    ``sharing`` maps every module id to a parameter-group name; modules in the
    same group resolve to the same policy object, so an update through one is
    seen by the others immediately.
    """

    def __init__(self, groups: dict[str, Policy], sharing: dict[str, str]):
        missing = {g for g in sharing.values()} - set(groups)
        if missing:
            raise ValueError(f"sharing map references unknown parameter groups {sorted(missing)}")
        self.groups = dict(groups)
        self.sharing = dict(sharing)

    @classmethod
    def for_program(cls, program, context_vocab: int, window: int = 2, shared: bool = False,
                    kind: str = "table", **kwargs) -> "PolicyBank":
        vocab = {m.vocab_size for m in program.modules}
        if shared:
            if len(vocab) != 1:
                raise ValueError("shared weights need a common vocabulary size")
            pol = make_policy(kind, vocab.pop(), context_vocab, window, **kwargs)
            return cls({"shared": pol}, {mid: "shared" for mid in program.module_ids})
        groups = {m.module_id: make_policy(kind, m.vocab_size, context_vocab, window, **kwargs)
                  for m in program.modules}
        return cls(groups, {mid: mid for mid in program.module_ids})

    @property
    def module_ids(self) -> tuple[str, ...]:
        return tuple(self.sharing)

    def policy_for(self, module_id: str) -> Policy:
        try:
            return self.groups[self.sharing[module_id]]
        except KeyError:
            raise KeyError(f"no policy for module {module_id!r}") from None

    def aliases(self, module_id: str) -> tuple[str, ...]:
        g = self.sharing[module_id]
        return tuple(m for m, gg in self.sharing.items() if gg == g)

    def signature(self) -> tuple[tuple[str, int], ...]:
        return tuple((m, self.policy_for(m).vocab_size) for m in self.sharing)

    def check_program(self, program) -> None:
        for m in program.modules:
            pol = self.policy_for(m.module_id)
            if pol.vocab_size != m.vocab_size:
                raise ValueError(f"module {m.module_id!r}: vocab {m.vocab_size} "
                                 f"but policy vocab {pol.vocab_size}")

    def copy(self) -> "PolicyBank":
        return PolicyBank({g: p.copy() for g, p in self.groups.items()}, self.sharing)

    def freeze(self) -> "PolicyBank":
        for p in self.groups.values():
            p.freeze()
        return self

    def frozen_copy(self) -> "PolicyBank":
        return self.copy().freeze()

    @property
    def frozen(self) -> bool:
        return all(p.frozen for p in self.groups.values())

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for g in sorted(self.groups):
            for k in sorted(self.groups[g].params):
                h.update(f"{g}/{k}".encode())
                h.update(np.ascontiguousarray(self.groups[g].params[k]).tobytes())
        h.update(json.dumps(self.sharing, sort_keys=True).encode())
        return h.hexdigest()

    def header(self) -> dict:
        return dict(
            module_ids=list(self.sharing),
            sharing=self.sharing,
            groups={g: p.header() for g, p in self.groups.items()},
        )


class SnapshotSet:
    """The current (trainable), old (sampling) and reference (KL anchor) banks."""

    def __init__(self, current: PolicyBank, old: PolicyBank, reference: PolicyBank):
        if not (old.frozen and reference.frozen):
            raise ValueError("old and reference snapshots must be frozen")
        self.current = current
        self.old = old
        self.reference = reference

    @classmethod
    def start(cls, bank: PolicyBank) -> "SnapshotSet":
        """Fresh run: current is a working copy, old and reference freeze ``bank``."""
        return cls(bank.copy(), bank.frozen_copy(), bank.frozen_copy())

    def refreshed(self) -> "SnapshotSet":
        return snapshot_refresh(self)


def snapshot_refresh(snapshots: SnapshotSet) -> SnapshotSet:
    return SnapshotSet(snapshots.current, snapshots.current.frozen_copy(), snapshots.reference)


# -- checkpoints -------------------------------------------------------------

def _policy_from_header(h: dict, params: dict) -> Policy:
    if h["kind"] == "table":
        return TablePolicy(h["vocab_size"], h["context_vocab"], h["window"], logits=params["logits"])
    if h["kind"] == "mlp":
        return MLPPolicy(h["vocab_size"], h["context_vocab"], h["window"],
                         hidden=h["hidden"], params=params)
    raise ValueError(f"unknown policy kind {h['kind']!r} in checkpoint")


def save_checkpoint(path, banks: dict[str, PolicyBank], meta: Optional[dict] = None) -> None:
    """Write named banks plus free-form metadata to one ``.npz`` file.

    The header is JSON stored as a byte array; parameters are stored as raw
    float64 arrays, so a load/save round trip is bit-exact.
    """
    header = dict(format=CHECKPOINT_FORMAT, version=CHECKPOINT_VERSION,
                  banks={name: b.header() for name, b in banks.items()}, meta=meta or {})
    arrays = {"__header__": np.frombuffer(json.dumps(header, sort_keys=True).encode(), np.uint8)}
    for name, bank in banks.items():
        for g, pol in bank.groups.items():
            for k, v in pol.params.items():
                arrays[f"{name}/{g}/{k}"] = v
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, PolicyBank], dict]:
    with np.load(path, allow_pickle=False) as z:
        if "__header__" not in z.files:
            raise ValueError(f"{path}: not an mmgrpo checkpoint (no header)")
        header = json.loads(bytes(z["__header__"]).decode())
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unrecognised checkpoint format {header.get('format')!r}")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: checkpoint version {header.get('version')} "
                             f"unsupported (expected {CHECKPOINT_VERSION})")
        banks = {}
        for name, bh in header["banks"].items():
            groups = {}
            for g, ph in bh["groups"].items():
                prefix = f"{name}/{g}/"
                params = {f[len(prefix):]: np.array(z[f]) for f in z.files if f.startswith(prefix)}
                groups[g] = _policy_from_header(ph, params)
            banks[name] = PolicyBank(groups, {m: bh["sharing"][m] for m in bh["module_ids"]})
    return banks, header["meta"]


def save_bank(path, bank: PolicyBank, meta: Optional[dict] = None) -> None:
    save_checkpoint(path, {"bank": bank}, meta)


def load_bank(path) -> PolicyBank:
    banks, _ = load_checkpoint(path)
    if "bank" in banks:
        return banks["bank"]
    if "current" in banks:
        return banks["current"]
    raise ValueError(f"{path}: checkpoint holds no policy bank")


def params_equal(a: PolicyBank, b: PolicyBank, module_ids: Optional[Iterable[str]] = None) -> bool:
    """Bit-exact parameter comparison, optionally restricted to some modules."""
    ids = list(module_ids) if module_ids is not None else list(a.module_ids)
    for m in ids:
        pa, pb = a.policy_for(m).params, b.policy_for(m).params
        if pa.keys() != pb.keys():
            return False
        if any(pa[k].tobytes() != pb[k].tobytes() for k in pa):
            return False
    return True
