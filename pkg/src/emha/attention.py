"""Multi-head attention: baseline MHSA, many-to-many logits, masking, aggregation.

Per-head projection matrices are stored concatenated: ``wq`` is ``(d, d)`` and
its column block ``i*d_k:(i+1)*d_k`` is the query projection of head ``i``.
``wo`` is ``(d, d)`` with row block ``i`` holding the output projection of
head ``i``, so ``concat_i(head_i) @ wo == sum_i head_i @ wo_i``.

Map stacks are laid out as ``(..., H, T, T)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from . import tensor as nt
from .errors import ConfigError, ShapeError, UsageError
from .tensor import Tensor

MASK_VALUE = -1e9


class _LooseEnum(str, Enum):
    @classmethod
    def _missing_(cls, value):
        if isinstance(value, str):
            key = value.lower().replace("-", "_")
            for member in cls:
                if key in (member.value.lower(), member.name.lower()):
                    return member
        return None


class Variant(_LooseEnum):
    MHSA = "mhsa"
    EIT = "eit"
    E_EIT = "eeit"


class Placement(_LooseEnum):
    ISI_PRE_CSI_PRE = "IsiPre_CsiPre"
    ISI_PRE_CSI_POST = "IsiPre_CsiPost"
    ISI_POST_CSI_POST = "IsiPost_CsiPost"


class Domain(_LooseEnum):
    LOGIT = "logit"
    PROB = "prob"


@dataclass(frozen=True)
class AttnConfig:
    """Hyper-parameters of one attention layer.

    ``kernels`` is ``(Kh_isi, Kw_isi, Kh_csi, Kw_csi)``. For E-EIT the ISI pair
    shapes the grouped layer and the CSI pair the standard layer.
    """

    d: int
    M: int
    r: int | None = None
    variant: Variant = Variant.MHSA
    placement: Placement = Placement.ISI_PRE_CSI_PRE
    M_H_isi: int | None = None
    M_H_csi: int | None = None
    M_H: int | None = None
    kernels: tuple[int, int, int, int] = (1, 1, 1, 1)
    enable_m2m: bool = True
    enable_isi: bool = True
    enable_csi: bool = True
    causal: bool = False
    shared_attention: bool = False
    attn_dropout: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "placement", Placement(self.placement))
        object.__setattr__(self, "kernels", tuple(int(k) for k in self.kernels))
        if self.r is None:
            object.__setattr__(self, "r", self.M)
        if self.M < 1 or self.d < 1:
            raise ConfigError("d and M must be positive")
        if self.d % self.M:
            raise ConfigError(f"d={self.d} is not divisible by M={self.M}")
        if not 1 <= self.r <= self.M:
            raise ConfigError(f"receptive field r={self.r} outside 1..{self.M}")
        if len(self.kernels) != 4 or any(k < 1 or k % 2 == 0 for k in self.kernels):
            raise ConfigError(f"kernel extents must be four odd positive ints, got {self.kernels}")
        if not 0 <= self.attn_dropout < 1:
            raise ConfigError(f"attn_dropout must lie in [0, 1), got {self.attn_dropout}")
        if self.causal and any(k != 1 for k in self.kernels) and self.variant is not Variant.MHSA:
            raise ConfigError("causal attention requires all DEI kernel extents to be 1")
        if self.variant is Variant.EIT:
            if self.enable_isi:
                _need_multiple("M_H_isi", self.M_H_isi, self.M)
            if self.enable_csi:
                _need_positive("M_H_csi", self.M_H_csi)
        elif self.variant is Variant.E_EIT:
            if self.enable_isi and self.enable_csi:
                _need_multiple("M_H", self.M_H, self.M)

    @property
    def d_k(self) -> int:
        return self.d // self.M

    @property
    def uses_dei(self) -> bool:
        return self.variant is not Variant.MHSA

    @property
    def n_maps(self) -> int:
        """Map count entering the interaction stages (M*r with M2M, else M)."""
        if self.uses_dei and self.enable_m2m:
            return self.M * self.r
        return self.M

    @property
    def map_r(self) -> int:
        return self.n_maps // self.M


def _need_positive(name, value):
    if value is None or value < 1:
        raise ConfigError(f"{name} must be a positive int, got {value}")


def _need_multiple(name, value, M):
    _need_positive(name, value)
    if value % M:
        raise ConfigError(f"{name}={value} must be divisible by M={M}")


@dataclass
class AttnMapStack:
    """A stack of ``H`` attention matrices together with their domain."""

    maps: Tensor
    domain: Domain = Domain.LOGIT

    def __post_init__(self):
        self.domain = Domain(self.domain)
        if self.maps.ndim < 3 or self.maps.shape[-1] != self.maps.shape[-2]:
            raise ShapeError(f"map stack must be (..., H, T, T), got {self.maps.shape}")

    @property
    def H(self) -> int:
        return self.maps.shape[-3]

    @property
    def T(self) -> int:
        return self.maps.shape[-1]


@dataclass(frozen=True)
class HeadMask:
    eta: tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(v) for v in self.eta)
        if any(v not in (0.0, 1.0) for v in vals):
            raise ConfigError(f"head mask entries must be 0 or 1, got {vals}")
        object.__setattr__(self, "eta", vals)

    @classmethod
    def ones(cls, M: int) -> "HeadMask":
        return cls((1.0,) * M)

    @classmethod
    def prune_first(cls, M: int, k: int) -> "HeadMask":
        """Zero the first ``k`` heads in index order."""
        return cls(tuple(0.0 if i < k else 1.0 for i in range(M)))

    def __len__(self) -> int:
        return len(self.eta)


# ---------------------------------------------------------------------------
# projections and logits


def split_heads(x: Tensor, M: int) -> Tensor:
    """(..., T, d) -> (..., M, T, d/M)."""
    d = x.shape[-1]
    if d % M:
        raise ConfigError(f"d={d} is not divisible by M={M}")
    x = nt.reshape(x, x.shape[:-1] + (M, d // M))
    return nt.swapaxes(x, -3, -2)


def merge_heads(x: Tensor) -> Tensor:
    """(..., M, T, d_k) -> (..., T, M*d_k)."""
    M, T, dk = x.shape[-3:]
    x = nt.swapaxes(x, -3, -2)
    return nt.reshape(x, x.shape[:-3] + (T, M * dk))


def project_heads(X: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, M: int,
                  bq: Tensor | None = None, bk: Tensor | None = None,
                  bv: Tensor | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """Return per-head Q, K, V, each shaped ``(..., M, T, d_k)``."""
    if X.shape[-1] % M:
        raise ConfigError(f"d={X.shape[-1]} is not divisible by M={M}")
    out = []
    for w, b in ((wq, bq), (wk, bk), (wv, bv)):
        y = nt.matmul(X, w)
        if b is not None:
            y = nt.add(y, b)
        out.append(split_heads(y, M))
    return out[0], out[1], out[2]


def m2m_pairs(M: int, r: int) -> list[tuple[int, int]]:
    """0-based (query head, key head) for every M2M map, in map order.

    With ``r == M`` map ``i`` pairs query ``i // M`` with key ``i % M``. With
    ``r < M`` query head ``i`` takes keys ``(i + j) % M`` for ``j < r``.
    """
    if not 1 <= r <= M:
        raise ConfigError(f"receptive field r={r} outside 1..{M}")
    if r == M:
        return [(i // M, i % M) for i in range(M * M)]
    return [(i, (i + j) % M) for i in range(M) for j in range(r)]


def diagonal_indices(M: int, r: int) -> list[int]:
    """Positions of the (i, i) maps inside an M2M stack."""
    pairs = m2m_pairs(M, r)
    return [pairs.index((i, i)) for i in range(M)]


def m2m_logits(Q: Tensor, K: Tensor, config: AttnConfig | None = None, r: int | None = None) -> AttnMapStack:
    M, dk = Q.shape[-3], Q.shape[-1]
    if r is None:
        r = config.r if config is not None else M
    pairs = m2m_pairs(M, r)
    qs = nt.take(Q, [p[0] for p in pairs], axis=-3)
    ks = nt.take(K, [p[1] for p in pairs], axis=-3)
    S = nt.scale(nt.matmul(qs, nt.swapaxes(ks, -1, -2)), 1.0 / math.sqrt(dk))
    return AttnMapStack(S, Domain.LOGIT)


def standard_logits(Q: Tensor, K: Tensor, config: AttnConfig | None = None) -> AttnMapStack:
    dk = Q.shape[-1]
    S = nt.scale(nt.matmul(Q, nt.swapaxes(K, -1, -2)), 1.0 / math.sqrt(dk))
    return AttnMapStack(S, Domain.LOGIT)


# ---------------------------------------------------------------------------
# masking


@dataclass(frozen=True)
class Causal:
    pass


@dataclass(frozen=True)
class Padding:
    valid_len: int


MaskMode = Causal | Padding


def keep_mask(T: int, mode: MaskMode | None) -> np.ndarray | None:
    """Boolean (T, T) array, True where attention is allowed."""
    if mode is None:
        return None
    if isinstance(mode, Causal):
        return np.tril(np.ones((T, T), dtype=bool))
    if isinstance(mode, Padding):
        if mode.valid_len < 1:
            raise ConfigError("valid_len must be at least 1")
        keep = np.zeros((T, T), dtype=bool)
        keep[:, : mode.valid_len] = True
        return keep
    raise UsageError(f"unknown mask mode {mode!r}")


def apply_mask(S: AttnMapStack, mode: MaskMode | None) -> AttnMapStack:
    """Add ``MASK_VALUE`` at disallowed (query, key) positions of a logit stack."""
    if S.domain is not Domain.LOGIT:
        raise UsageError("masks apply to logit-domain stacks only")
    keep = keep_mask(S.T, mode)
    if keep is None or keep.all():
        return S
    bias = np.where(keep, 0.0, MASK_VALUE).astype(S.maps.dtype)
    return AttnMapStack(nt.add(S.maps, bias), Domain.LOGIT)


def softmax(S: AttnMapStack) -> AttnMapStack:
    if S.domain is not Domain.LOGIT:
        raise UsageError("softmax expects a logit-domain stack")
    return AttnMapStack(nt.softmax_rows(S.maps), Domain.PROB)


# ---------------------------------------------------------------------------
# head-axis mixing and aggregation


def mix_heads(A: Tensor, W: Tensor) -> Tensor:
    """out[..., o, t, s] = sum_h W[o, h] * A[..., h, t, s]."""
    H, T = A.shape[-3], A.shape[-1]
    if W.shape[-1] != H:
        raise ShapeError(f"mixing matrix {W.shape} does not match {H} maps")
    flat = nt.reshape(A, A.shape[:-3] + (H, T * T))
    out = nt.matmul(W, flat)
    return nt.reshape(out, A.shape[:-3] + (W.shape[0], T, T))


def attention_expansion(A: AttnMapStack, W_E: Tensor, W_R: Tensor) -> AttnMapStack:
    """Expand M maps to Me with ``W_E`` and reduce back with ``W_R``."""
    M = A.H
    Me = W_E.shape[0]
    if W_E.shape != (Me, M) or W_R.shape != (M, Me):
        raise ShapeError(f"expected W_E ({Me}, {M}) and W_R ({M}, {Me})")
    if Me < M:
        raise ConfigError(f"expansion width {Me} is smaller than M={M}")
    return AttnMapStack(mix_heads(mix_heads(A.maps, W_E), W_R), A.domain)


def _eta_array(eta, M: int, dtype) -> np.ndarray | None:
    if eta is None:
        return None
    vals = eta.eta if isinstance(eta, HeadMask) else tuple(eta)
    if len(vals) != M:
        raise ConfigError(f"head mask has {len(vals)} entries, expected M={M}")
    return np.asarray(vals, dtype=dtype)[:, None, None]


def aggregate(A: AttnMapStack, V: Tensor, wo: Tensor, eta: HeadMask | Sequence[float] | None = None) -> Tensor:
    """O = sum_i eta_i * A^i V^i W_O^i."""
    if A.domain is not Domain.PROB:
        raise UsageError("aggregate expects probability-domain maps")
    M = V.shape[-3]
    if A.H != M:
        raise ShapeError(f"{A.H} maps for {M} value heads")
    heads = nt.matmul(A.maps, V)
    mask = _eta_array(eta, M, heads.dtype)
    if mask is not None:
        heads = nt.mul(heads, mask)
    return nt.matmul(merge_heads(heads), wo)


def shared_attention_aggregate(A: AttnMapStack, V: Tensor, wo: Tensor, config: AttnConfig | None = None,
                               eta: HeadMask | Sequence[float] | None = None) -> Tensor:
    """Like :func:`aggregate` but every head reads the first map."""
    if config is not None and not config.shared_attention:
        raise UsageError("shared_attention_aggregate called with shared_attention disabled")
    M = V.shape[-3]
    shared = AttnMapStack(nt.take(A.maps, [0] * M, axis=-3), A.domain)
    return aggregate(shared, V, wo, eta)


# ---------------------------------------------------------------------------
# full layer


@dataclass
class AttnTrace:
    """Receives the final probability maps of a forward pass."""

    maps: list[np.ndarray] = field(default_factory=list)


def emha_forward(X: Tensor, params: Mapping[str, Tensor], config: AttnConfig, *,
                 train: bool = False, dropout_key: tuple[int, ...] = (0,),
                 eta: HeadMask | Sequence[float] | None = None,
                 mask: MaskMode | None = None, trace: AttnTrace | None = None) -> Tensor:
    """One attention sublayer, ``(..., T, d) -> (..., T, d)``.

    ``params`` holds ``wq, bq, wk, bk, wv, bv, wo, bo`` and, for the EIT
    variants, the interaction convolutions (see :mod:`emha.interaction`).
    """
    from . import interaction

    M = config.M
    if X.shape[-1] != config.d:
        raise ShapeError(f"input width {X.shape[-1]} != d={config.d}")
    if config.causal:
        if mask is not None and not isinstance(mask, Causal):
            raise ConfigError("causal layers take no other mask")
        mask = Causal()
    Q, K, V = project_heads(X, params["wq"], params["wk"], params["wv"], M,
                            params.get("bq"), params.get("bk"), params.get("bv"))

    if not config.uses_dei:
        A = softmax(apply_mask(standard_logits(Q, K), mask))
    else:
        dei = interaction.DeiParams.from_mapping(params, config)
        S = m2m_logits(Q, K, r=config.r) if config.enable_m2m else standard_logits(Q, K)
        placement = config.placement
        if placement is Placement.ISI_PRE_CSI_PRE:
            S = interaction.isi_stage(S, dei, config)
            S = interaction.csi_stage(S, dei, config)
            A = softmax(apply_mask(S, mask))
        elif placement is Placement.ISI_PRE_CSI_POST:
            S = interaction.isi_stage(S, dei, config)
            A = softmax(apply_mask(S, mask))
            A = interaction.csi_stage(A, dei, config)
            A = _renormalize(A, mask)
        else:
            A = softmax(apply_mask(S, mask))
            A = interaction.isi_stage(A, dei, config)
            A = interaction.csi_stage(A, dei, config)
            A = _renormalize(A, mask)

    if trace is not None:
        trace.maps.append(A.maps.data.copy())
    if config.attn_dropout and train:
        A = AttnMapStack(nt.dropout(A.maps, config.attn_dropout, dropout_key, train), A.domain)
    if config.shared_attention:
        O = shared_attention_aggregate(A, V, params["wo"], config, eta)
    else:
        O = aggregate(A, V, params["wo"], eta)
    if "bo" in params:
        O = nt.add(O, params["bo"])
    return O


def _renormalize(A: AttnMapStack, mask: MaskMode | None) -> AttnMapStack:
    keep = keep_mask(A.T, mask)
    return AttnMapStack(nt.renormalize_rows(A.maps, keep), Domain.PROB)


def attention_param_shapes(config: AttnConfig) -> dict[str, tuple[int, ...]]:
    d = config.d
    shapes: dict[str, tuple[int, ...]] = {}
    for p in ("q", "k", "v", "o"):
        shapes[f"w{p}"] = (d, d)
        shapes[f"b{p}"] = (d,)
    if config.uses_dei:
        from .interaction import dei_param_shapes

        shapes.update(dei_param_shapes(config))
    return shapes
