"""Transformer encoder built from EMHA/MHSA blocks."""

from __future__ import annotations

import dataclasses
import logging
import math
import zlib
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as nt
from .attention import (
    AttnConfig,
    AttnTrace,
    HeadMask,
    Variant,
    _LooseEnum,
    attention_param_shapes,
    emha_forward,
)
from .errors import ConfigError, UsageError
from .metrics import ur
from .tensor import Tensor

log = logging.getLogger(__name__)


class NormStyle(_LooseEnum):
    PRE = "PreNorm"
    POST = "PostNorm"


class TaskHead(_LooseEnum):
    TAGGING = "Tagging"
    CAUSAL_LM = "CausalLM"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d: int
    ffn_dim: int
    layers: int
    attn: AttnConfig
    norm_style: NormStyle = NormStyle.PRE
    residual_dropout: float = 0.0
    relu_dropout: float = 0.0
    tie_embeddings: bool = False
    task_head: TaskHead = TaskHead.TAGGING
    # leading layers that use ``attn.variant``; the rest fall back to MHSA
    emha_layers: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "norm_style", NormStyle(self.norm_style))
        object.__setattr__(self, "task_head", TaskHead(self.task_head))
        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")
        if self.vocab_size < 1:
            raise ConfigError("vocab_size must be positive")
        if self.attn.d != self.d:
            raise ConfigError(f"attn.d={self.attn.d} differs from d={self.d}")
        for name in ("residual_dropout", "relu_dropout"):
            p = getattr(self, name)
            if not 0 <= p < 1:
                raise ConfigError(f"{name} must lie in [0, 1), got {p}")
        if self.emha_layers is not None and not 0 <= self.emha_layers <= self.layers:
            raise ConfigError(f"emha_layers must lie in 0..{self.layers}")
        if self.task_head is TaskHead.CAUSAL_LM and not self.attn.causal:
            object.__setattr__(self, "attn", dataclasses.replace(self.attn, causal=True))
        if self.ffn_dim < self.d:
            log.warning("ffn_dim=%d is smaller than d=%d", self.ffn_dim, self.d)

    def layer_attn(self, layer: int) -> AttnConfig:
        if self.emha_layers is not None and layer >= self.emha_layers:
            return dataclasses.replace(self.attn, variant=Variant.MHSA)
        return self.attn

    def with_variant(self, variant) -> "ModelConfig":
        return dataclasses.replace(self, attn=dataclasses.replace(self.attn, variant=Variant(variant)))


class ParamStore(dict):
    """Insertion-ordered mapping of parameter name to Tensor."""

    def prefixed(self, prefix: str) -> dict[str, Tensor]:
        n = len(prefix)
        return {k[n:]: v for k, v in self.items() if k.startswith(prefix)}

    def copy(self) -> "ParamStore":
        return ParamStore((k, Tensor(v.data.copy(), requires_grad=v.requires_grad)) for k, v in self.items())


@dataclass
class Mode:
    """Forward-pass mode. Dropout masks are keyed by ``(seed, step, site...)``."""

    train: bool = False
    seed: int = 0
    step: int = 0

    def key(self, *site: int) -> tuple[int, ...]:
        return (self.seed, self.step, *site)


EVAL = Mode()


@dataclass
class Trace:
    """Per-layer captures from :func:`model_forward`."""

    attn_maps: list[np.ndarray] = field(default_factory=list)
    hidden: list[np.ndarray] = field(default_factory=list)
    ur_attn: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    ur_ffn: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)


# ---------------------------------------------------------------------------
# parameters


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, V = config.d, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"embed.weight": (V, d)}
    for layer in range(config.layers):
        p = f"layers.{layer}."
        for k, s in attention_param_shapes(config.layer_attn(layer)).items():
            shapes[p + "attn." + k] = s
        shapes[p + "ln1.gain"] = (d,)
        shapes[p + "ln1.bias"] = (d,)
        shapes[p + "ffn.w1"] = (d, config.ffn_dim)
        shapes[p + "ffn.b1"] = (config.ffn_dim,)
        shapes[p + "ffn.w2"] = (config.ffn_dim, d)
        shapes[p + "ffn.b2"] = (d,)
        shapes[p + "ln2.gain"] = (d,)
        shapes[p + "ln2.bias"] = (d,)
    if config.norm_style is NormStyle.PRE:
        shapes["final_ln.gain"] = (d,)
        shapes["final_ln.bias"] = (d,)
    if not config.tie_embeddings:
        shapes["out.weight"] = (d, V)
    shapes["out.bias"] = (V,)
    return shapes


def _init(name: str, shape: tuple[int, ...], config: ModelConfig, rng: np.random.Generator) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if name == "embed.weight":
        return rng.normal(0.0, config.d ** -0.5, size=shape)
    if leaf == "gain":
        return np.ones(shape)
    if leaf.startswith("b") and len(shape) == 1:
        return np.zeros(shape)
    if len(shape) == 4:
        # Kaiming-uniform for ReLU-followed convolutions
        fan_in = shape[1] * shape[2] * shape[3]
        bound = math.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)
    fan_in, fan_out = shape
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def build(config: ModelConfig, seed: int = 0, dtype=np.float64) -> ParamStore:
    """Allocate and initialize every parameter.

    Each tensor draws from its own stream keyed by ``(seed, crc32(name))``, so
    two configs that share a parameter name get identical initial values.
    """
    store = ParamStore()
    for name, shape in param_shapes(config).items():
        rng = nt.make_rng(seed, zlib.crc32(name.encode()))
        store[name] = Tensor(_init(name, shape, config, rng).astype(dtype), requires_grad=True)
    return store


def param_count(params: Mapping[str, Tensor]) -> int:
    return int(sum(t.size for t in params.values()))


def shape_count(shapes: Mapping[str, tuple[int, ...]]) -> int:
    return int(sum(math.prod(s) for s in shapes.values()))


# ---------------------------------------------------------------------------
# forward


def sinusoidal_positions(T: int, d: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    pe = np.zeros((T, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe


def ffn_forward(x: Tensor, p: Mapping[str, Tensor], relu_dropout: float, mode: Mode, key) -> Tensor:
    h = nt.relu(nt.add(nt.matmul(x, p["ffn.w1"]), p["ffn.b1"]))
    h = nt.dropout(h, relu_dropout, key, mode.train)
    return nt.add(nt.matmul(h, p["ffn.w2"]), p["ffn.b2"])


def block_forward(X: Tensor, params: Mapping[str, Tensor], config: ModelConfig, mode: Mode = EVAL,
                  layer: int = 0, eta=None, trace: Trace | None = None) -> Tensor:
    """One residual block; ``params`` are the block's tensors with the prefix removed."""
    attn_cfg = config.layer_attn(layer)
    attn_p = {k[5:]: v for k, v in params.items() if k.startswith("attn.")}
    site = layer + 1
    amaps = AttnTrace() if trace is not None else None

    def attn(x):
        return emha_forward(x, attn_p, attn_cfg, train=mode.train, dropout_key=mode.key(site, 0),
                            eta=eta, trace=amaps)

    def drop(x, k):
        return nt.dropout(x, config.residual_dropout, mode.key(site, k), mode.train)

    if config.norm_style is NormStyle.PRE:
        f = drop(attn(nt.layer_norm(X, params["ln1.gain"], params["ln1.bias"])), 1)
        X1 = nt.add(X, f)
        g = drop(ffn_forward(nt.layer_norm(X1, params["ln2.gain"], params["ln2.bias"]), params,
                             config.relu_dropout, mode, mode.key(site, 2)), 3)
        out = nt.add(X1, g)
        res1, res2 = X, X1
    else:
        f = drop(attn(X), 1)
        X1 = nt.layer_norm(nt.add(X, f), params["ln1.gain"], params["ln1.bias"])
        g = drop(ffn_forward(X1, params, config.relu_dropout, mode, mode.key(site, 2)), 3)
        out = nt.layer_norm(nt.add(X1, g), params["ln2.gain"], params["ln2.bias"])
        res1, res2 = X, X1

    if trace is not None:
        trace.attn_maps.append(amaps.maps[0])
        trace.hidden.append(out.data.copy())
        trace.ur_attn.append((f.data.copy(), f.data + res1.data))
        trace.ur_ffn.append((g.data.copy(), g.data + res2.data))
    return out


def embed(token_ids, params: Mapping[str, Tensor], config: ModelConfig, mode: Mode = EVAL) -> Tensor:
    ids = np.asarray(token_ids)
    if ids.ndim not in (1, 2):
        raise UsageError(f"token ids must be (T,) or (B, T), got shape {ids.shape}")
    table = params["embed.weight"]
    x = nt.scale(nt.embedding_lookup(table, ids), math.sqrt(config.d))
    pe = sinusoidal_positions(ids.shape[-1], config.d).astype(table.dtype)
    x = nt.add(x, pe)
    return nt.dropout(x, config.residual_dropout, mode.key(0, 0), mode.train)


def _layer_eta(head_mask, layer: int):
    if head_mask is None or isinstance(head_mask, HeadMask):
        return head_mask
    if isinstance(head_mask, Mapping):
        return head_mask.get(layer)
    return head_mask


def model_forward(token_ids, params: Mapping[str, Tensor], config: ModelConfig, mode: Mode = EVAL,
                  head_mask: HeadMask | Mapping[int, HeadMask] | Sequence[float] | None = None,
                  trace: Trace | None = None) -> Tensor:
    """Token ids ``(T,)`` or ``(B, T)`` -> logits ``(..., T, vocab)``.

    ``head_mask`` is applied to every layer, or per layer when given as a
    ``{layer: HeadMask}`` mapping.
    """
    x = embed(token_ids, params, config, mode)
    for layer in range(config.layers):
        p = f"layers.{layer}."
        block_p = {k[len(p):]: v for k, v in params.items() if k.startswith(p)}
        x = block_forward(x, block_p, config, mode, layer, _layer_eta(head_mask, layer), trace)
    if config.norm_style is NormStyle.PRE:
        x = nt.layer_norm(x, params["final_ln.gain"], params["final_ln.bias"])
    if config.tie_embeddings:
        w_out = nt.swapaxes(params["embed.weight"], 0, 1)
    else:
        w_out = params["out.weight"]
    return nt.add(nt.matmul(x, w_out), params["out.bias"])


def utilization_probe(X: Tensor, layer_params: Mapping[str, Tensor], config: ModelConfig,
                      layer: int = 0) -> dict[str, float]:
    """UR of the attention and FFN sublayers of one block (eval mode)."""
    trace = Trace()
    block_forward(X, layer_params, config, EVAL, layer, trace=trace)
    (fa, ca), (ff, cf) = trace.ur_attn[0], trace.ur_ffn[0]
    return {"ur_attn": ur(fa, ca), "ur_ffn": ur(ff, cf)}
