"""Whole-model gradient check against central finite differences (float64)."""

from __future__ import annotations

import logging

import numpy as np

from . import tensor as nt
from .errors import UsageError
from .model import EVAL, ModelConfig, build, model_forward
from .tensor import Tensor, finite_diff_grad, make_rng, max_relative_error
from .training import label_smoothed_ce

log = logging.getLogger(__name__)

# ops whose derivative jumps at 0; central differences are meaningless when
# an input of one of them sits within a few steps of the kink
KINK_OPS = ("relu", "renormalize_rows")


def kink_distance(tape: nt.Tape) -> float:
    """Smallest |input| over every kinked op recorded on ``tape``."""
    dist = np.inf
    for node in tape.nodes:
        if node.op in KINK_OPS:
            dist = min(dist, float(np.abs(node.inputs[0].data).min()))
    return dist


def check_model_gradients(config: ModelConfig, seed: int = 0, batch: int = 2, seq_len: int = 4,
                          smoothing: float = 0.1, eps: float = 1e-5, margin: float = 1e-4,
                          names: list[str] | None = None, max_draws: int = 50) -> dict[str, float]:
    """Max relative error between tape and finite-difference gradients, per tensor.

    Token batches are redrawn until every ReLU/clamp input is at least
    ``margin`` away from zero, so no finite-difference step crosses a kink.
    """
    params = build(config, seed, np.float64)
    for draw in range(max_draws):
        rng = make_rng(seed, 0x67726164, draw)
        ids = rng.integers(0, config.vocab_size, size=(batch, seq_len))
        targets = rng.integers(0, config.vocab_size, size=(batch, seq_len))

        def loss(store) -> Tensor:
            return label_smoothed_ce(model_forward(ids, store, config, EVAL), targets, smoothing)

        with nt.Tape() as tape:
            value = loss(params)
        if kink_distance(tape) >= margin:
            break
        log.info("draw %d has an activation within %g of a kink; redrawing", draw, margin)
    else:
        raise UsageError(f"no batch clear of activation kinks after {max_draws} draws")
    for p in params.values():
        p.grad = None
    tape.backward(value)

    errors = {}
    for name in names or list(params):
        def f(x, name=name):
            return loss({**params, name: x})

        numeric = finite_diff_grad(f, Tensor(params[name].data.copy()), eps)
        analytic = params[name].grad if params[name].grad is not None else np.zeros_like(numeric)
        errors[name] = max_relative_error(analytic, numeric)
    return errors
