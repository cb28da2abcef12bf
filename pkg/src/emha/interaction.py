"""Interaction stages over attention-map stacks.

ISI mixes the maps produced by the same query head with grouped
convolutions (``groups = M``); CSI mixes across heads with standard
convolutions. EIT uses two layers for each stage, E-EIT one layer each.
Convolutions run over the ``(T, T)`` map plane with the map index as channel.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

from . import tensor as nt
from .attention import AttnConfig, AttnMapStack, Domain, Variant, diagonal_indices
from .errors import ConfigError, ShapeError
from .tensor import Tensor


@dataclass
class ConvLayer:
    weight: Tensor
    bias: Tensor | None
    groups: int = 1

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return nt.conv2d(x, self.weight, self.bias, self.groups)


@dataclass
class DeiParams:
    """Convolution layers of one interaction block.

    EIT fills all four layers; E-EIT only ``f0`` and ``g0``. Layers of a
    disabled stage are ``None``.
    """

    variant: Variant
    f0: ConvLayer | None = None
    f1: ConvLayer | None = None
    g0: ConvLayer | None = None
    g1: ConvLayer | None = None

    @classmethod
    def from_mapping(cls, params: Mapping[str, Tensor], config: AttnConfig) -> "DeiParams":
        def layer(name, groups):
            w = params.get(f"{name}.weight")
            if w is None:
                return None
            return ConvLayer(w, params.get(f"{name}.bias"), groups)

        M = config.M
        p = cls(config.variant, f0=layer("f0", M), f1=layer("f1", M), g0=layer("g0", 1), g1=layer("g1", 1))
        expected = set(dei_param_shapes(config))
        present = {k for k in params if k.split(".")[0] in ("f0", "f1", "g0", "g1")}
        if present != expected:
            raise ConfigError(f"interaction params {sorted(present)} do not match layout {sorted(expected)}")
        return p


def _check_channels(S: AttnMapStack, layer: ConvLayer, what: str) -> None:
    if S.H != layer.in_channels:
        raise ShapeError(f"{what} expects {layer.in_channels} maps, got {S.H}")


def isi_forward(S: AttnMapStack, p: DeiParams) -> AttnMapStack:
    """Two grouped convolutions with a ReLU between them: M*r maps -> M maps."""
    if p.f0 is None or p.f1 is None:
        raise ConfigError("isi_forward needs the two-layer (EIT) layout")
    _check_channels(S, p.f0, "ISI")
    if S.H % p.f0.groups:
        raise ShapeError(f"{S.H} maps do not split into {p.f0.groups} query groups")
    out = p.f1(nt.relu(p.f0(S.maps)))
    if out.shape[-3] != p.f0.groups:
        raise ShapeError(f"ISI emitted {out.shape[-3]} maps, expected {p.f0.groups}")
    return AttnMapStack(out, Domain.LOGIT)


def csi_forward(S_dot: AttnMapStack, p: DeiParams) -> AttnMapStack:
    """Two standard convolutions with a ReLU between them; map count preserved."""
    if p.g0 is None or p.g1 is None:
        raise ConfigError("csi_forward needs the two-layer (EIT) layout")
    _check_channels(S_dot, p.g0, "CSI")
    out = p.g1(nt.relu(p.g0(S_dot.maps)))
    if out.shape[-3] != S_dot.H:
        raise ShapeError(f"CSI changed the map count from {S_dot.H} to {out.shape[-3]}")
    return AttnMapStack(out, Domain.LOGIT)


def eeit_forward(S: AttnMapStack, p: DeiParams) -> AttnMapStack:
    """Fused single-layer interaction: g0(ReLU(f0(S)))."""
    if p.f0 is None or p.g0 is None or p.f1 is not None or p.g1 is not None:
        raise ConfigError("eeit_forward needs the single-layer (E-EIT) layout")
    _check_channels(S, p.f0, "E-EIT")
    hidden = nt.relu(p.f0(S.maps))
    if hidden.shape[-3] != p.g0.in_channels:
        raise ConfigError(f"E-EIT hidden width {hidden.shape[-3]} != g0 input {p.g0.in_channels}")
    return AttnMapStack(p.g0(hidden), Domain.LOGIT)


def isi_stage(S: AttnMapStack, p: DeiParams, config: AttnConfig) -> AttnMapStack:
    """The ISI half of the pipeline, or diagonal selection when ISI is disabled."""
    if S.H != config.n_maps:
        raise ShapeError(f"expected {config.n_maps} maps entering ISI, got {S.H}")
    if not config.enable_isi:
        if S.H == config.M:
            return S
        idx = diagonal_indices(config.M, config.map_r)
        return AttnMapStack(nt.take(S.maps, idx, axis=-3), S.domain)
    if config.variant is Variant.EIT:
        return isi_forward(S, p)
    _check_channels(S, p.f0, "E-EIT ISI")
    out = p.f0(S.maps)
    if config.enable_csi:
        out = nt.relu(out)
    return AttnMapStack(out, Domain.LOGIT)


def csi_stage(S: AttnMapStack, p: DeiParams, config: AttnConfig) -> AttnMapStack:
    if not config.enable_csi:
        return S
    if config.variant is Variant.EIT:
        return csi_forward(S, p)
    _check_channels(S, p.g0, "E-EIT CSI")
    return AttnMapStack(p.g0(S.maps), Domain.LOGIT)


def dei_param_shapes(config: AttnConfig) -> dict[str, tuple[int, ...]]:
    """Parameter tensor shapes of one interaction block, in storage order."""
    if not config.uses_dei:
        return {}
    M = config.M
    c_in = config.n_maps
    kh_i, kw_i, kh_c, kw_c = config.kernels
    shapes: dict[str, tuple[int, ...]] = {}

    def conv(name, c_out, c_in_per_group, kh, kw):
        shapes[f"{name}.weight"] = (c_out, c_in_per_group, kh, kw)
        shapes[f"{name}.bias"] = (c_out,)

    if config.variant is Variant.EIT:
        if config.enable_isi:
            h = config.M_H_isi
            conv("f0", h, c_in // M, kh_i, kw_i)
            conv("f1", M, h // M, kh_i, kw_i)
        if config.enable_csi:
            h = config.M_H_csi
            conv("g0", h, M, kh_c, kw_c)
            conv("g1", M, h, kh_c, kw_c)
    else:
        isi, csi = config.enable_isi, config.enable_csi
        hidden = config.M_H if (isi and csi) else M
        if isi:
            conv("f0", hidden, c_in // M, kh_i, kw_i)
        if csi:
            conv("g0", M, hidden, kh_c, kw_c)
    return shapes


def _conv_count(c_out, c_in, groups, kh, kw, bias=True):
    return c_out * (c_in // groups) * kh * kw + (c_out if bias else 0)


def dei_param_count(config: AttnConfig, layers: int = 1) -> dict[str, int | None]:
    """Closed-form parameter counts of the EIT and E-EIT blocks for ``config``.

    Both variants are counted from the shared fields of ``config`` (M, r,
    kernels, toggles); a variant whose hidden width is unset is reported as
    ``None``. ``*_no_bias`` entries drop the convolution biases.
    """
    M = config.M
    c_in = M * config.r if config.enable_m2m else M
    kh_i, kw_i, kh_c, kw_c = config.kernels

    def eit(bias):
        n = 0
        if config.enable_isi:
            if config.M_H_isi is None:
                return None
            h = config.M_H_isi
            n += _conv_count(h, c_in, M, kh_i, kw_i, bias) + _conv_count(M, h, M, kh_i, kw_i, bias)
        if config.enable_csi:
            if config.M_H_csi is None:
                return None
            h = config.M_H_csi
            n += _conv_count(h, M, 1, kh_c, kw_c, bias) + _conv_count(M, h, 1, kh_c, kw_c, bias)
        return n

    def eeit(bias):
        isi, csi = config.enable_isi, config.enable_csi
        if isi and csi and config.M_H is None:
            return None
        hidden = config.M_H if (isi and csi) else M
        n = 0
        if isi:
            n += _conv_count(hidden, c_in, M, kh_i, kw_i, bias)
        if csi:
            n += _conv_count(M, hidden, 1, kh_c, kw_c, bias)
        return n

    out: dict[str, int | None] = {
        "eit_per_layer": eit(True),
        "eeit_per_layer": eeit(True),
        "eit_per_layer_no_bias": eit(False),
        "eeit_per_layer_no_bias": eeit(False),
        "layers": layers,
    }
    for key in ("eit", "eeit"):
        per = out[f"{key}_per_layer"]
        out[f"{key}_total"] = None if per is None else per * layers
        nb = out[f"{key}_per_layer_no_bias"]
        out[f"{key}_total_no_bias"] = None if nb is None else nb * layers
    return out
