"""Diagnostics over attention maps and hidden states.

All functions take plain numpy arrays. Attention maps are expected in the
probability domain (rows already softmax-normalized).
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, MetricError, ShapeError

log = logging.getLogger(__name__)

METRIC_NAMES = (
    "head_similarity",
    "token_correlation",
    "localness",
    "ur_attn",
    "ur_ffn",
    "cross_layer_similarity",
)


def _as_samples(x, rank: int) -> list[np.ndarray]:
    if isinstance(x, np.ndarray) and x.ndim == rank:
        return [x]
    if isinstance(x, np.ndarray) and x.ndim == rank + 1:
        return list(x)
    return [np.asarray(s, dtype=np.float64) for s in x]


def head_similarity(maps) -> float:
    """Mean pairwise cosine similarity of per-query rows across heads.

    ``maps`` is one ``(M, T, T)`` stack or a sequence of them (one per
    sample). Per sample the sum over all ordered head pairs and queries is
    divided by ``T`` and the ``M`` self-pairs are subtracted; the result is
    averaged over samples and divided by ``M(M-1)``.
    """
    samples = _as_samples(maps, 3)
    if not samples:
        raise MetricError("head_similarity needs at least one sample")
    total = 0.0
    M = None
    for A in samples:
        A = np.asarray(A, dtype=np.float64)
        M, T = A.shape[0], A.shape[1]
        if M < 2:
            raise MetricError("head similarity is undefined for fewer than two heads")
        norms = np.linalg.norm(A, axis=-1)
        if (norms == 0).any():
            raise MetricError("attention row with zero norm")
        # (M, M, T) cosines of row t of head j against row t of head k
        dots = np.abs(np.einsum("jts,kts->jkt", A, A))
        cos = dots / (norms[:, None, :] * norms[None, :, :])
        total += cos.sum() / T - M
    return total / len(samples) / (M * (M - 1))


def pearson_matrix(X: np.ndarray) -> np.ndarray:
    """Pairwise Pearson correlation of the rows of ``X`` (population moments)."""
    Xc = X - X.mean(axis=-1, keepdims=True)
    ss = np.sqrt((Xc * Xc).sum(axis=-1))
    return (Xc @ Xc.T) / np.outer(ss, ss)


def token_correlation(features) -> float:
    """Mean off-diagonal Pearson correlation between token vectors.

    Samples containing a constant token vector are skipped with a warning;
    if every sample is skipped a :class:`MetricError` is raised.
    """
    samples = _as_samples(features, 2)
    total, used = 0.0, 0
    for X in samples:
        X = np.asarray(X, dtype=np.float64)
        T = X.shape[0]
        if T < 2:
            raise MetricError("token correlation needs T >= 2")
        Xc = X - X.mean(axis=-1, keepdims=True)
        if (np.abs(Xc).max(axis=-1) == 0).any():
            log.warning("skipping sample with a zero-variance token vector")
            continue
        total += (pearson_matrix(X).sum() - T) / (T * (T - 1))
        used += 1
    if used == 0:
        raise MetricError("no sample had non-constant token vectors")
    return total / used


def localness(A, w: int) -> float:
    """Mean attention mass inside a width-``w`` window centred on each query."""
    if w < 1:
        raise ConfigError(f"window width must be >= 1, got {w}")
    samples = _as_samples(A, 3)
    vals = []
    for S in samples:
        S = np.asarray(S, dtype=np.float64)
        T = S.shape[-1]
        t = np.arange(T)[:, None]
        s = np.arange(T)[None, :]
        inside = (s >= t - math.ceil((w - 1) / 2)) & (s <= t + (w - 1) // 2)
        vals.append((S * inside).sum(axis=-1).mean())
    return float(np.mean(vals))


def default_window(T: int) -> int:
    return int(0.1 * T + 1)


def cross_layer_similarity(features: Sequence) -> list[float]:
    """Cosine similarity of each layer's token vectors to the first layer's.

    ``features[l]`` is ``(T, d)`` or ``(B, T, d)``; the mean runs over all tokens.
    """
    if len(features) < 1:
        raise MetricError("cross-layer similarity needs at least one layer")
    first = np.asarray(features[0], dtype=np.float64)
    n0 = np.linalg.norm(first, axis=-1)
    if (n0 == 0).any():
        raise MetricError("zero-norm token vector in layer 1")
    out = []
    for X in features:
        X = np.asarray(X, dtype=np.float64)
        if X.shape != first.shape:
            raise ShapeError(f"layer features {X.shape} differ from {first.shape}")
        n = np.linalg.norm(X, axis=-1)
        if (n == 0).any():
            raise MetricError("zero-norm token vector")
        out.append(float(((X * first).sum(axis=-1) / (n * n0)).mean()))
    return out


def ur(f_out, combined) -> float:
    """Utilization ratio std(f) / std(f + residual), population moments."""
    f_out = np.asarray(f_out, dtype=np.float64)
    combined = np.asarray(combined, dtype=np.float64)
    if f_out.shape != combined.shape:
        raise ShapeError(f"shapes differ: {f_out.shape} vs {combined.shape}")
    denom = combined.std()
    if denom == 0:
        raise MetricError("std of the combined output is zero")
    return float(f_out.std() / denom)


@dataclass
class MetricsReport:
    layers: list[dict] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        raw = json.loads(text)
        return cls(layers=raw["layers"], metadata=raw["metadata"])

    def rows(self) -> Iterable[tuple[int, str, float | None]]:
        for entry in self.layers:
            for name in METRIC_NAMES:
                if name in entry:
                    yield entry["layer"], name, entry[name]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "metric", "value"])
        for layer, name, value in self.rows():
            w.writerow([layer, name, "" if value is None else repr(float(value))])
        return buf.getvalue()
