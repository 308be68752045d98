"""Composable network building blocks on top of the autodiff core.

Layers hold no state of their own: parameters live in a :class:`ParamSet` and
are looked up by dotted name ("branch0.res3.conv1.weight"), so a whole model
is just (spec, ParamSet) plus pure forward functions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    active_graph,
    add,
    conv2d,
    relu,
    scale,
)

__all__ = [
    "ParamSet",
    "LayerSpec",
    "init_params",
    "build_params",
    "resblock",
    "pixel_shuffle",
    "pixel_unshuffle",
    "upsampler",
]


class ParamSet:
    """Named collection of learnable tensors with deterministic ordering.

    Names are unique, every entry requires gradients, and iteration is always
    lexicographic regardless of insertion order.
    """

    def __init__(self) -> None:
        self._entries: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        if not tensor.requires_grad:
            tensor.requires_grad = True
        self._entries[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._entries[name]
        except KeyError:
            raise KeyError(f"no parameter named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return sorted(self._entries)

    def items(self):
        for name in self.names():
            yield name, self._entries[name]

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def total_size(self) -> int:
        return sum(t.data.size for t in self._entries.values())

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name, t in self.items():
            out.add(name, Tensor(t.data.copy(), requires_grad=True))
        return out


@dataclass(frozen=True)
class LayerSpec:
    """One parameterized layer in a model plan.

    ``zero_init`` marks layers whose weights start at zero (the residual
    output head, so an untrained model reproduces its interpolation skip).
    """

    kind: str  # conv | deconv | relu | sigmoid | resblock | pixelshuffle
    kernel: int = 0
    in_channels: int = 0
    out_channels: int = 0
    padding: int = 0
    upscale: int = 0
    zero_init: bool = False
    init_gain: float = 1.0

    def __post_init__(self):
        if self.kind in ("conv", "deconv"):
            if self.kernel < 1 or self.kernel % 2 == 0:
                raise ValueError(f"{self.kind} kernel must be odd and >= 1, got {self.kernel}")
        if self.kind == "pixelshuffle" and self.upscale not in (2, 4):
            raise ValueError(f"pixelshuffle upscale must be 2 or 4, got {self.upscale}")


def build_params(plan, seed: int, dtype=np.float64) -> ParamSet:
    """Create parameters for a (name, LayerSpec) plan.

    Conv/deconv weights are fan-in-scaled normal draws (variance 2/fan_in,
    fan_in = in_channels * k^2) and biases are zero.  Draws follow the plan
    order with a single generator, so the result is a pure function of
    (plan, seed).
    """
    rng = np.random.default_rng(seed)
    params = ParamSet()
    for name, layer in plan:
        if layer.kind not in ("conv", "deconv"):
            continue
        k = layer.kernel
        fan_in = layer.in_channels * k * k
        std = layer.init_gain * math.sqrt(2.0 / fan_in)
        if layer.kind == "conv":
            shape = (layer.out_channels, layer.in_channels, k, k)
        else:
            shape = (layer.in_channels, layer.out_channels, k, k)
        w = rng.normal(0.0, std, size=shape).astype(dtype)
        if layer.zero_init:
            w = np.zeros(shape, dtype=dtype)
        params.add(name + ".weight", Tensor(w, requires_grad=True))
        b = np.zeros((1, layer.out_channels, 1, 1), dtype=dtype)
        params.add(name + ".bias", Tensor(b, requires_grad=True))
    return params


def init_params(spec, seed: int, dtype=np.float64) -> ParamSet:
    """Initialize every learnable tensor of a model described by ``spec``."""
    from .networks import layer_plan  # deferred: networks builds on this module

    return build_params(layer_plan(spec), seed, dtype=dtype)


def resblock(x: Tensor, params: ParamSet, prefix: str, res_scale: float = 1.0) -> Tensor:
    """conv3x3 -> ReLU -> conv3x3 with an identity skip; spatial size preserved."""
    y = conv2d(x, params[prefix + ".conv1.weight"], params[prefix + ".conv1.bias"], padding=1)
    y = relu(y)
    y = conv2d(y, params[prefix + ".conv2.weight"], params[prefix + ".conv2.bias"], padding=1)
    if res_scale != 1.0:
        y = scale(y, res_scale)
    return add(x, y)


def pixel_shuffle(x: Tensor, s: int) -> Tensor:
    """Rearrange s^2 channel groups into an s-times larger spatial grid.

    out[n, c, h*s + a, w*s + b] = in[n, c*s*s + a*s + b, h, w]
    """
    n, c, h, w = x.data.shape
    if c % (s * s) != 0:
        raise ShapeError(f"pixel_shuffle: channels {c} not divisible by {s}**2")
    co = c // (s * s)
    out_data = (
        x.data.reshape(n, co, s, s, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, co, h * s, w * s)
    )
    out = Tensor(np.ascontiguousarray(out_data), requires_grad=x.requires_grad)
    g = active_graph()
    if g is not None and x.requires_grad:

        def backward():
            up = out.grad
            if up is None:
                return
            gx = (
                up.reshape(n, co, h, s, w, s).transpose(0, 1, 3, 5, 2, 4).reshape(n, c, h, w)
            )
            x.accumulate_grad(np.ascontiguousarray(gx))

        g.record(backward)
    return out


def pixel_unshuffle(x: Tensor, s: int) -> Tensor:
    """Exact inverse of :func:`pixel_shuffle`."""
    n, c, h, w = x.data.shape
    if h % s != 0 or w % s != 0:
        raise ShapeError(f"pixel_unshuffle: spatial dims {h}x{w} not divisible by {s}")
    ho, wo = h // s, w // s
    out_data = (
        x.data.reshape(n, c, ho, s, wo, s).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * s * s, ho, wo)
    )
    out = Tensor(np.ascontiguousarray(out_data), requires_grad=x.requires_grad)
    g = active_graph()
    if g is not None and x.requires_grad:

        def backward():
            up = out.grad
            if up is None:
                return
            gx = (
                up.reshape(n, c, s, s, ho, wo).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h, w)
            )
            x.accumulate_grad(np.ascontiguousarray(gx))

        g.record(backward)
    return out


def upsampler(x: Tensor, scale_factor: int, params: ParamSet, prefix: str = "upsampler") -> Tensor:
    """Sub-pixel upscaling head: per 2x stage a conv (F -> 4F, 3x3, pad 1) and a
    pixel shuffle, then a trailing conv (F -> 1) producing the single-channel
    residual image."""
    if scale_factor not in (2, 4):
        raise ShapeError(f"upsampler: unsupported scale {scale_factor}")
    stages = 1 if scale_factor == 2 else 2
    y = x
    for i in range(stages):
        y = conv2d(
            y,
            params[f"{prefix}.stage{i}.weight"],
            params[f"{prefix}.stage{i}.bias"],
            padding=1,
        )
        y = pixel_shuffle(y, 2)
    return conv2d(y, params[prefix + ".out.weight"], params[prefix + ".out.bias"], padding=1)
