"""Multi-head convolutional attention over concatenated modality encodings.

Each head shrinks the input with an unpadded conv (joint spatial/channel
bottleneck), applies a ReLU, and expands back to the input size with the
adjoint conv of the same kernel size.  Head outputs are summed, squashed
through a sigmoid into a gate in (0, 1), and multiplied elementwise with the
input.  Head ``j`` uses kernel size ``2*j + 1`` (1, 3, 5, ... for j = 0, 1,
2, ...) unless overridden, and its bottleneck width is ``round(c / r)`` for
reduction ratio ``r`` (r < 1 widens).

The single-contrast form is the same computation applied to one encoding
tensor instead of a concatenation.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import ShapeError, Tensor, add, conv2d, conv_transpose2d, mul_elementwise, relu, sigmoid
from .layers import LayerSpec, ParamSet

__all__ = [
    "AttentionConfig",
    "attention_layer_plan",
    "head_forward",
    "mmhca_forward",
    "mhca_forward",
    "ablation_variant",
    "ablation_variant_names",
    "export_attention",
]


@dataclass(frozen=True)
class AttentionConfig:
    """Head count, channel reduction ratio, and ablation switches.

    ``kernel_schedule`` overrides the default odd-ladder schedule;
    ``uniform_kernel`` forces every head to one size; ``no_deconv`` replaces
    each head with a single size-preserving padded conv (no bottleneck).
    """

    heads: int = 3
    reduction: float = 0.5
    kernel_schedule: tuple[int, ...] | None = None
    no_deconv: bool = False
    uniform_kernel: int | None = None

    def __post_init__(self):
        if self.heads < 1:
            raise ValueError(f"head count must be >= 1, got {self.heads}")
        if not self.reduction > 0:
            raise ValueError(f"reduction ratio must be > 0, got {self.reduction}")
        for k in self.schedule():
            if k < 1 or k % 2 == 0:
                raise ValueError(f"kernel sizes must be odd and >= 1, got {k}")

    def schedule(self) -> tuple[int, ...]:
        """Per-head kernel sizes."""
        if self.uniform_kernel is not None:
            return (self.uniform_kernel,) * self.heads
        if self.kernel_schedule is not None:
            if len(self.kernel_schedule) != self.heads:
                raise ValueError(
                    f"schedule length {len(self.kernel_schedule)} != head count {self.heads}"
                )
            return tuple(self.kernel_schedule)
        return tuple(2 * j + 1 for j in range(self.heads))

    def bottleneck(self, channels: int) -> int:
        """Per-head filter count: round(c / r), at least 1."""
        return max(1, round(channels / self.reduction))

    def to_dict(self) -> dict:
        return {
            "heads": self.heads,
            "reduction": self.reduction,
            "kernel_schedule": list(self.kernel_schedule) if self.kernel_schedule else None,
            "no_deconv": self.no_deconv,
            "uniform_kernel": self.uniform_kernel,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttentionConfig":
        ks = d.get("kernel_schedule")
        return cls(
            heads=int(d["heads"]),
            reduction=float(d["reduction"]),
            kernel_schedule=tuple(ks) if ks else None,
            no_deconv=bool(d.get("no_deconv", False)),
            uniform_kernel=d.get("uniform_kernel"),
        )


# Gate layers start near the neutral fixed point (A ~ 0.5): full-gain draws
# saturate the sigmoid on realistic feature magnitudes and the random hard
# mask destabilizes early training.
_GATE_INIT_GAIN = 0.1


def attention_layer_plan(cfg: AttentionConfig, channels: int, prefix: str):
    """(name, LayerSpec) pairs for one attention site on ``channels`` inputs."""
    plan = []
    m = cfg.bottleneck(channels)
    for j, k in enumerate(cfg.schedule()):
        if cfg.no_deconv:
            plan.append(
                (f"{prefix}.head{j}.conv",
                 LayerSpec("conv", kernel=k, in_channels=channels, out_channels=channels,
                           padding=(k - 1) // 2, init_gain=_GATE_INIT_GAIN))
            )
        else:
            plan.append(
                (f"{prefix}.head{j}.conv",
                 LayerSpec("conv", kernel=k, in_channels=channels, out_channels=m,
                           init_gain=_GATE_INIT_GAIN))
            )
            plan.append(
                (f"{prefix}.head{j}.deconv",
                 LayerSpec("deconv", kernel=k, in_channels=m, out_channels=channels,
                           init_gain=_GATE_INIT_GAIN))
            )
    return plan


def head_forward(j: int, x: Tensor, cfg: AttentionConfig, params: ParamSet,
                 prefix: str = "attention") -> Tensor:
    """One attention head; output shape equals input shape exactly."""
    k = cfg.schedule()[j]
    _, _, h, w = x.data.shape
    if k > min(h, w):
        raise ShapeError(f"head {j}: kernel {k} larger than spatial extent {h}x{w}")
    name = f"{prefix}.head{j}"
    if cfg.no_deconv:
        return conv2d(
            x, params[name + ".conv.weight"], params[name + ".conv.bias"], padding=(k - 1) // 2
        )
    y = conv2d(x, params[name + ".conv.weight"], params[name + ".conv.bias"], padding=0)
    y = relu(y)
    return conv_transpose2d(y, params[name + ".deconv.weight"], params[name + ".deconv.bias"])


def mmhca_forward(t_concat: Tensor, cfg: AttentionConfig, params: ParamSet,
                  prefix: str = "attention") -> tuple[Tensor, Tensor]:
    """Gate the concatenated encodings; returns (gated tensor, attention map).

    Heads are accumulated in index order so the summation is reproducible.
    """
    total = head_forward(0, t_concat, cfg, params, prefix)
    for j in range(1, cfg.heads):
        total = add(total, head_forward(j, t_concat, cfg, params, prefix))
    att = sigmoid(total)
    return mul_elementwise(t_concat, att), att


def mhca_forward(t_single: Tensor, cfg: AttentionConfig, params: ParamSet,
                 prefix: str = "attention") -> tuple[Tensor, Tensor]:
    """Single-contrast path: identical to the multimodal form on one encoding."""
    return mmhca_forward(t_single, cfg, params, prefix)


# The ablation grid: head-count ladder, the no-bottleneck variant, the
# uniform-kernel capacity control, and the reduction-ratio sweep at 3 heads.
_ABLATION_GRID: dict[str, AttentionConfig] = {
    "1head_r0.5": AttentionConfig(heads=1, reduction=0.5),
    "2heads_r0.5": AttentionConfig(heads=2, reduction=0.5),
    "3heads_r0.5": AttentionConfig(heads=3, reduction=0.5),
    "4heads_r0.5": AttentionConfig(heads=4, reduction=0.5),
    "3heads_nodeconv": AttentionConfig(heads=3, reduction=0.5, no_deconv=True),
    "4heads_1x1_r2": AttentionConfig(heads=4, reduction=2.0, uniform_kernel=1),
    "4heads_r2": AttentionConfig(heads=4, reduction=2.0),
    "h3_r4": AttentionConfig(heads=3, reduction=4.0),
    "h3_r2": AttentionConfig(heads=3, reduction=2.0),
    "h3_r1": AttentionConfig(heads=3, reduction=1.0),
    "h3_r0.5": AttentionConfig(heads=3, reduction=0.5),
    "h3_r0.25": AttentionConfig(heads=3, reduction=0.25),
}


def ablation_variant_names() -> list[str]:
    return list(_ABLATION_GRID)


def ablation_variant(name: str) -> AttentionConfig:
    """Look up one named configuration from the ablation grid."""
    try:
        return _ABLATION_GRID[name]
    except KeyError:
        raise ValueError(
            f"unknown ablation variant {name!r}; known: {', '.join(_ABLATION_GRID)}"
        ) from None


def export_attention(att, out_dir, prefix: str = "attention") -> list[Path]:
    """Write per-channel 8-bit graymaps of an attention tensor plus its channel mean.

    Values in (0, 1) map linearly onto 0..255 with round-half-to-even (so a
    uniform 0.5 map renders as pixel value 128).  Only the first batch item is
    exported.
    """
    data = att.data if isinstance(att, Tensor) else np.asarray(att)
    if data is None or data.ndim != 4:
        raise ValueError("export_attention expects a rank-4 attention tensor")
    from .data import write_pgm

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    maps = data[0]
    paths = []
    for c in range(maps.shape[0]):
        p = out_dir / f"{prefix}_ch{c:03d}.pgm"
        write_pgm(p, maps[c], bit_depth=8)
        paths.append(p)
    p = out_dir / f"{prefix}_mean.pgm"
    write_pgm(p, maps.mean(axis=0), bit_depth=8)
    paths.append(p)
    return paths
