import numpy as np
import pytest

from emha.attention import attention_param_shapes
from emha.tensor import Tensor, make_rng


def random_attn_params(config, seed=0, scale=0.5, requires_grad=False):
    params = {}
    for i, (name, shape) in enumerate(attention_param_shapes(config).items()):
        rng = make_rng(seed, i)
        params[name] = Tensor(rng.standard_normal(shape) * scale, requires_grad=requires_grad)
    return params


def softmax_np(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def mhsa_oracle(X, params, M, causal=False):
    """Per-head loop implementation of classical multi-head attention."""
    p = {k: v.data for k, v in params.items()}
    d = X.shape[-1]
    dk = d // M
    T = X.shape[-2]
    out = np.zeros_like(X)
    for i in range(M):
        sl = slice(i * dk, (i + 1) * dk)
        q = X @ p["wq"][:, sl] + p["bq"][sl]
        k = X @ p["wk"][:, sl] + p["bk"][sl]
        v = X @ p["wv"][:, sl] + p["bv"][sl]
        S = q @ np.swapaxes(k, -1, -2) / np.sqrt(dk)
        if causal:
            S = S + np.triu(np.full((T, T), -1e9), 1)
        out += softmax_np(S) @ v @ p["wo"][sl, :]
    return out + p["bo"]


def loop_conv(x, w, b, groups):
    C_in, H, W = x.shape
    C_out, cpg, kh, kw = w.shape
    opg = C_out // groups
    out = np.zeros((C_out, H, W))
    for o in range(C_out):
        grp = o // opg
        for y in range(H):
            for xx in range(W):
                acc = b[o] if b is not None else 0.0
                for c in range(cpg):
                    for dy in range(kh):
                        for dx in range(kw):
                            yy, xs = y + dy - kh // 2, xx + dx - kw // 2
                            if 0 <= yy < H and 0 <= xs < W:
                                acc += w[o, c, dy, dx] * x[grp * cpg + c, yy, xs]
                out[o, y, xx] = acc
    return out


@pytest.fixture
def rng():
    return make_rng(12345)


# one line per acceptance criterion, echoed after the run so it shows without -s
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
