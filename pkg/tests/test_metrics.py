import json
import math

import numpy as np
import pytest

from emha.errors import ConfigError, MetricError, ShapeError
from emha.metrics import (
    MetricsReport,
    cross_layer_similarity,
    default_window,
    head_similarity,
    localness,
    token_correlation,
    ur,
)
from emha.tensor import make_rng

# ---------------------------------------------------------------- naive-loop oracles


def _cos(u, v):
    dot = sum(a * b for a, b in zip(u, v))
    nu = math.sqrt(sum(a * a for a in u))
    nv = math.sqrt(sum(b * b for b in v))
    return dot / (nu * nv)


def _pearson(u, v):
    n = len(u)
    mu, mv = sum(u) / n, sum(v) / n
    cov = sum((a - mu) * (b - mv) for a, b in zip(u, v)) / n
    su = math.sqrt(sum((a - mu) ** 2 for a in u) / n)
    sv = math.sqrt(sum((b - mv) ** 2 for b in v) / n)
    return cov / (su * sv)


def hd_oracle(samples):
    M = len(samples[0])
    total = 0.0
    for A in samples:
        T = len(A[0])
        acc = 0.0
        for j in range(M):
            for k in range(M):
                for t in range(T):
                    acc += abs(_cos(A[j][t], A[k][t]))
        total += acc / T - M
    return total / len(samples) / (M * (M - 1))


def tc_oracle(samples):
    total = 0.0
    for X in samples:
        T = len(X)
        acc = 0.0
        for j in range(T):
            for k in range(T):
                acc += _pearson(X[j], X[k])
        total += (acc - T) / (T * (T - 1))
    return total / len(samples)


def localness_oracle(samples, w):
    vals = []
    for A in samples:
        M, T = len(A), len(A[0])
        lo_off = math.ceil((w - 1) / 2)
        hi_off = (w - 1) // 2
        acc = 0.0
        for h in range(M):
            for t in range(T):
                for s in range(max(0, t - lo_off), min(T - 1, t + hi_off) + 1):
                    acc += A[h][t][s]
        vals.append(acc / (M * T))
    return sum(vals) / len(vals)


def cls_oracle(layers):
    out = []
    first = layers[0]
    for X in layers:
        out.append(sum(_cos(X[t], first[t]) for t in range(len(X))) / len(X))
    return out


def ur_oracle(f, c):
    def std(v):
        m = sum(v) / len(v)
        return math.sqrt(sum((x - m) ** 2 for x in v) / len(v))
    return std(f) / std(c)


def stochastic(rng, shape):
    x = rng.random(shape) + 1e-3
    return x / x.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------- oracle agreement

def test_head_similarity_matches_loop_oracle():
    for trial in range(50):
        rng = make_rng(1, trial)
        M, T, n = int(rng.integers(2, 4)), int(rng.integers(1, 5)), int(rng.integers(1, 4))
        samples = [stochastic(rng, (M, T, T)) for _ in range(n)]
        assert abs(head_similarity(samples) - hd_oracle([s.tolist() for s in samples])) < 1e-12


def test_token_correlation_matches_loop_oracle():
    for trial in range(50):
        rng = make_rng(2, trial)
        T, d, n = int(rng.integers(2, 5)), int(rng.integers(2, 6)), int(rng.integers(1, 4))
        samples = [rng.standard_normal((T, d)) for _ in range(n)]
        assert abs(token_correlation(samples) - tc_oracle([s.tolist() for s in samples])) < 1e-12


def test_localness_matches_loop_oracle():
    for trial in range(50):
        rng = make_rng(3, trial)
        M, T = int(rng.integers(1, 4)), int(rng.integers(1, 5))
        w = int(rng.integers(1, 2 * T + 2))
        samples = [stochastic(rng, (M, T, T)) for _ in range(2)]
        assert abs(localness(samples, w) - localness_oracle([s.tolist() for s in samples], w)) < 1e-12


def test_cross_layer_similarity_matches_loop_oracle():
    for trial in range(50):
        rng = make_rng(4, trial)
        L, T, d = int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(1, 6))
        layers = [rng.standard_normal((T, d)) for _ in range(L)]
        got = cross_layer_similarity(layers)
        ref = cls_oracle([x.tolist() for x in layers])
        assert max(abs(a - b) for a, b in zip(got, ref)) < 1e-12


def test_ur_matches_loop_oracle():
    for trial in range(50):
        rng = make_rng(5, trial)
        T, d = int(rng.integers(1, 5)), int(rng.integers(1, 6))
        f, res = rng.standard_normal((T, d)), rng.standard_normal((T, d))
        if T * d == 1:
            continue
        assert abs(ur(f, f + res) - ur_oracle(f.ravel().tolist(), (f + res).ravel().tolist())) < 1e-12


# ---------------------------------------------------------------- analytic anchors

def test_head_similarity_anchors():
    one = stochastic(make_rng(6), (4, 4))
    assert abs(head_similarity(np.stack([one] * 3)) - 1.0) < 1e-12
    T = 3
    orth = np.zeros((3, T, T))
    for h in range(3):
        for t in range(T):
            orth[h, t, (t + h) % T] = 1.0
    assert head_similarity(orth) == 0.0


def test_token_correlation_anchors():
    v = make_rng(7).standard_normal(5)
    assert abs(token_correlation(np.stack([v, v, v])) - 1.0) < 1e-12
    assert abs(token_correlation(np.stack([v, -v + 2.0])) + 1.0) < 1e-12


def test_localness_anchors():
    T = 10
    uniform = np.full((1, T, T), 1.0 / T)
    assert abs(localness(uniform, 1) - 0.1) < 1e-12
    assert abs(localness(uniform, 3) - 0.28) < 1e-12
    eye = np.eye(T)[None]
    assert all(localness(eye, w) == 1.0 for w in (1, 2, 5))
    assert default_window(T) == 2


def test_cross_layer_anchors():
    X = make_rng(8).standard_normal((4, 3))
    sims = cross_layer_similarity([X, 2 * X])
    assert abs(sims[0] - 1) < 1e-12 and abs(sims[1] - 1) < 1e-12


def test_ur_anchor():
    f = make_rng(9).standard_normal(12)
    assert ur(f, f + f) == 0.5


# ---------------------------------------------------------------- properties

def test_head_similarity_symmetry_and_bounds():
    rng = make_rng(10)
    for _ in range(20):
        A = stochastic(rng, (3, 4, 4))
        v = head_similarity(A)
        assert 0 <= v <= 1 + 1e-9
        assert head_similarity(A[[2, 0, 1]]) == pytest.approx(v, abs=1e-15)


def test_token_correlation_affine_invariance():
    rng = make_rng(11)
    X = rng.standard_normal((4, 6))
    a = rng.random((4, 1)) + 0.5
    b = rng.standard_normal((4, 1))
    assert abs(token_correlation(a * X + b) - token_correlation(X)) < 1e-9
    assert -1 <= token_correlation(X) <= 1


def test_localness_monotone_and_saturates():
    A = stochastic(make_rng(12), (2, 6, 6))
    vals = [localness(A, w) for w in range(1, 13)]
    assert all(b >= a - 1e-15 for a, b in zip(vals, vals[1:]))
    assert abs(localness(A, 12) - 1) < 1e-9


# ---------------------------------------------------------------- errors

def test_metric_errors():
    with pytest.raises(MetricError):
        head_similarity(np.full((1, 2, 2), 0.5))
    zero_row = np.full((2, 2, 2), 0.5)
    zero_row[0, 1] = 0
    with pytest.raises(MetricError):
        head_similarity(zero_row)
    with pytest.raises(ConfigError):
        localness(np.full((1, 2, 2), 0.5), 0)
    with pytest.raises(MetricError):
        token_correlation([np.ones((3, 4))])
    with pytest.raises(MetricError):
        cross_layer_similarity([np.zeros((2, 3))])
    with pytest.raises(ShapeError):
        ur(np.ones(3), np.ones(4))


def test_constant_token_sample_is_skipped(caplog):
    good = make_rng(13).standard_normal((3, 4))
    bad = good.copy()
    bad[1] = 7.0
    assert token_correlation([good, bad]) == token_correlation([good])
    assert "zero-variance" in caplog.text


# ---------------------------------------------------------------- report

def test_report_round_trip_and_csv():
    report = MetricsReport(layers=[{"layer": 1, "head_similarity": 0.5, "token_correlation": 0.25,
                                    "localness": 0.3, "ur_attn": None, "ur_ffn": 0.7,
                                    "cross_layer_similarity": 1.0}],
                           metadata={"seed": 0, "config_hash": "abc"})
    again = MetricsReport.from_json(report.to_json())
    assert again == report
    lines = report.to_csv().splitlines()
    assert lines[0] == "layer,metric,value"
    assert "1,ur_attn," in lines
    assert json.loads(report.to_json())["metadata"]["seed"] == 0
