"""Synthetic tasks: sequence reversal (tagging) and order-1 Markov language modelling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import _LooseEnum
from .errors import ConfigError
from .tensor import make_rng


class TaskKind(_LooseEnum):
    REVERSAL = "Reversal"
    MARKOV_LM = "MarkovLM"


@dataclass(frozen=True)
class TaskSpec:
    kind: TaskKind
    vocab_size: int
    seq_len: int
    transition: tuple[tuple[float, ...], ...] | None = None
    entropy: float | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "kind", TaskKind(self.kind))
        if self.seq_len < 1:
            raise ConfigError("seq_len must be positive")
        if self.kind is TaskKind.REVERSAL:
            if self.vocab_size < 2:
                raise ConfigError("reversal needs vocab_size >= 2")
            return
        if self.transition is None:
            raise ConfigError("MarkovLM needs a transition matrix")
        P = np.asarray(self.transition, dtype=np.float64)
        if P.shape != (self.vocab_size, self.vocab_size):
            raise ConfigError(f"transition matrix must be {self.vocab_size}x{self.vocab_size}")
        if (P < 0).any() or not np.allclose(P.sum(axis=1), 1.0, atol=1e-9):
            raise ConfigError("transition rows must be stochastic")
        object.__setattr__(self, "transition", tuple(tuple(float(v) for v in row) for row in P))
        object.__setattr__(self, "entropy", entropy_rate(P))

    @property
    def P(self) -> np.ndarray:
        return np.asarray(self.transition, dtype=np.float64)


def stationary_distribution(P: np.ndarray, tol: float = 1e-12, max_iter: int = 1_000_000) -> np.ndarray:
    """Power iteration on the lazy chain (P + I) / 2, which shares the
    stationary law of P but is aperiodic."""
    P = np.asarray(P, dtype=np.float64)
    n = P.shape[0]
    lazy = 0.5 * (P + np.eye(n))
    pi = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        nxt = pi @ lazy
        if np.abs(nxt - pi).max() < tol:
            return nxt / nxt.sum()
        pi = nxt
    raise ConfigError("power iteration did not converge")


def entropy_rate(P: np.ndarray) -> float:
    """H* = sum_s pi(s) sum_s' -P(s'|s) log P(s'|s), in nats."""
    P = np.asarray(P, dtype=np.float64)
    pi = stationary_distribution(P)
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.where(P > 0, np.log(P), 0.0)
    return float(-(pi[:, None] * P * logs).sum())


def reversal_targets(ids) -> np.ndarray:
    """target[t] = input[T-1-t] along the last axis."""
    return np.ascontiguousarray(np.asarray(ids)[..., ::-1])


def gen_reversal(spec: TaskSpec, seed, n: int) -> tuple[np.ndarray, np.ndarray]:
    """``n`` uniform random sequences and their reversals, both ``(n, T)``."""
    rng = make_rng(seed)
    inputs = rng.integers(0, spec.vocab_size, size=(n, spec.seq_len), dtype=np.int64)
    return inputs, reversal_targets(inputs)


def gen_markov_lm(spec: TaskSpec, seed, n: int) -> tuple[np.ndarray, np.ndarray, float]:
    """Stationary Markov chains of length T+1, split into next-token pairs.

    Returns ``(inputs, targets, H*)`` with ``targets[:, t] = inputs[:, t+1]``.
    """
    if spec.kind is not TaskKind.MARKOV_LM:
        raise ConfigError("gen_markov_lm needs a MarkovLM task")
    rng = make_rng(seed)
    P = spec.P
    cum = np.cumsum(P, axis=1)
    cum[:, -1] = 1.0
    pi = stationary_distribution(P)
    seq = np.empty((n, spec.seq_len + 1), dtype=np.int64)
    seq[:, 0] = np.searchsorted(np.cumsum(pi), rng.random(n), side="right").clip(max=spec.vocab_size - 1)
    for t in range(spec.seq_len):
        u = rng.random(n)
        seq[:, t + 1] = (u[:, None] >= cum[seq[:, t]]).sum(axis=1)
    return seq[:, :-1].copy(), seq[:, 1:].copy(), spec.entropy


def generate(spec: TaskSpec, seed, n: int) -> tuple[np.ndarray, np.ndarray]:
    if spec.kind is TaskKind.REVERSAL:
        return gen_reversal(spec, seed, n)
    x, y, _ = gen_markov_lm(spec, seed, n)
    return x, y
