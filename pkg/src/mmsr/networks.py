"""Host super-resolution networks in single-contrast and multimodal forms.

Two trunk families share one recipe: per-modality branches encode each
low-resolution input into an F-channel feature map, the branch outputs are
concatenated along channels, optionally gated by the convolutional attention
module, fused back to F channels by a 3x3 conv, and upscaled by the sub-pixel
head.  A global skip adds a bicubic upsample of the target-modality input so
the network learns a residual.

Attention placement follows the host: with residual blocks (edsr_lite) and a
single contrast the module sits after every residual block with per-site
parameters; in every other combination it is applied exactly once, on the
concatenation, just before fusion and upsampling.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .attention import AttentionConfig, attention_layer_plan, mmhca_forward
from .autodiff import ShapeError, Tensor, add, concat_channels, conv2d, relu
from .layers import LayerSpec, ParamSet, resblock, upsampler
from .resize import bicubic_resize

__all__ = [
    "ModelSpec",
    "layer_plan",
    "encode_branch",
    "forward_multimodal",
    "forward_with_attention",
    "self_ensemble",
]

HOSTS = ("edsr_lite", "espc_lite")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; (spec, ParamSet) fully determines a model."""

    host: str = "edsr_lite"
    n_modalities: int = 2
    target_index: int = 0
    scale: int = 2
    feature_width: int = 64
    block_count: int = 16
    attention: AttentionConfig | None = None
    global_skip: bool = True
    res_scale: float = 1.0

    def __post_init__(self):
        if self.host not in HOSTS:
            raise ValueError(f"unknown host {self.host!r}; expected one of {HOSTS}")
        if self.n_modalities < 1:
            raise ValueError(f"n_modalities must be >= 1, got {self.n_modalities}")
        if not 0 <= self.target_index < self.n_modalities:
            raise ValueError(
                f"target_index {self.target_index} out of range [0, {self.n_modalities})"
            )
        if self.scale not in (2, 4):
            raise ValueError(f"scale must be 2 or 4, got {self.scale}")
        if self.feature_width < 4:
            raise ValueError(f"feature_width must be >= 4, got {self.feature_width}")
        if self.block_count < 1:
            raise ValueError(f"block_count must be >= 1, got {self.block_count}")

    @property
    def per_block_attention(self) -> bool:
        """Single-contrast residual-block hosts gate after every block."""
        return (
            self.attention is not None
            and self.n_modalities == 1
            and self.host == "edsr_lite"
        )

    @property
    def concat_attention(self) -> bool:
        """All other attention placements use one site on the concatenation."""
        return self.attention is not None and not self.per_block_attention

    def to_dict(self) -> dict:
        return {
            "host": self.host,
            "n_modalities": self.n_modalities,
            "target_index": self.target_index,
            "scale": self.scale,
            "feature_width": self.feature_width,
            "block_count": self.block_count,
            "attention": self.attention.to_dict() if self.attention else None,
            "global_skip": self.global_skip,
            "res_scale": self.res_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        att = d.get("attention")
        return cls(
            host=d["host"],
            n_modalities=int(d["n_modalities"]),
            target_index=int(d["target_index"]),
            scale=int(d["scale"]),
            feature_width=int(d["feature_width"]),
            block_count=int(d["block_count"]),
            attention=AttentionConfig.from_dict(att) if att else None,
            global_skip=bool(d.get("global_skip", True)),
            res_scale=float(d.get("res_scale", 1.0)),
        )

    def without_attention(self) -> "ModelSpec":
        return replace(self, attention=None)


def layer_plan(spec: ModelSpec) -> list[tuple[str, LayerSpec]]:
    """Deterministic enumeration of every parameterized layer in the model."""
    f = spec.feature_width
    plan: list[tuple[str, LayerSpec]] = []
    for i in range(spec.n_modalities):
        br = f"branch{i}"
        if spec.host == "edsr_lite":
            plan.append((f"{br}.head", LayerSpec("conv", 3, 1, f, padding=1)))
            for b in range(spec.block_count):
                plan.append((f"{br}.res{b}.conv1", LayerSpec("conv", 3, f, f, padding=1)))
                plan.append((f"{br}.res{b}.conv2", LayerSpec("conv", 3, f, f, padding=1)))
                if spec.per_block_attention:
                    plan += attention_layer_plan(spec.attention, f, f"{br}.att{b}")
        else:  # espc_lite: three stacked 3x3 convs with ReLUs in between
            plan.append((f"{br}.conv1", LayerSpec("conv", 3, 1, f, padding=1)))
            plan.append((f"{br}.conv2", LayerSpec("conv", 3, f, f, padding=1)))
            plan.append((f"{br}.conv3", LayerSpec("conv", 3, f, f, padding=1)))
    if spec.concat_attention:
        plan += attention_layer_plan(spec.attention, spec.n_modalities * f, "attention")
    plan.append(("fusion", LayerSpec("conv", 3, spec.n_modalities * f, f, padding=1)))
    stages = 1 if spec.scale == 2 else 2
    for s in range(stages):
        plan.append((f"upsampler.stage{s}", LayerSpec("conv", 3, f, 4 * f, padding=1)))
    # zero-initialized head: an untrained model is exactly its bicubic skip
    plan.append(("upsampler.out", LayerSpec("conv", 3, f, 1, padding=1, zero_init=True)))
    return plan


def encode_branch(
    spec: ModelSpec,
    i: int,
    lr: Tensor,
    params: ParamSet,
    attention_sink: dict | None = None,
) -> Tensor:
    """Encode one modality's LR input into an (N, F, p, p) feature tensor."""
    if lr.data.shape[1] != 1:
        raise ShapeError(f"branch input must be single-channel, got shape {lr.data.shape}")
    br = f"branch{i}"
    if spec.host == "edsr_lite":
        x = conv2d(lr, params[f"{br}.head.weight"], params[f"{br}.head.bias"], padding=1)
        for b in range(spec.block_count):
            x = resblock(x, params, f"{br}.res{b}", res_scale=spec.res_scale)
            if spec.per_block_attention:
                x, att = mmhca_forward(x, spec.attention, params, f"{br}.att{b}")
                if attention_sink is not None:
                    attention_sink[f"{br}.att{b}"] = att
        return x
    x = conv2d(lr, params[f"{br}.conv1.weight"], params[f"{br}.conv1.bias"], padding=1)
    x = relu(x)
    x = conv2d(x, params[f"{br}.conv2.weight"], params[f"{br}.conv2.bias"], padding=1)
    x = relu(x)
    return conv2d(x, params[f"{br}.conv3.weight"], params[f"{br}.conv3.bias"], padding=1)


def forward_multimodal(
    lrs: list[Tensor],
    spec: ModelSpec,
    params: ParamSet,
    training: bool = False,
    attention_sink: dict | None = None,
) -> Tensor:
    """Super-resolve the target modality from n aligned LR inputs.

    At inference (``training=False``) the output is clamped to [0, 1];
    training leaves it unclamped so loss gradients are unaffected.
    """
    if len(lrs) != spec.n_modalities:
        raise ShapeError(f"expected {spec.n_modalities} LR inputs, got {len(lrs)}")
    shape0 = lrs[0].data.shape
    for t in lrs[1:]:
        if t.data.shape != shape0:
            raise ShapeError(f"LR inputs disagree in shape: {shape0} vs {t.data.shape}")

    encoded = [encode_branch(spec, i, lr, params, attention_sink) for i, lr in enumerate(lrs)]
    fusedin = concat_channels(encoded)
    if spec.concat_attention:
        fusedin, att = mmhca_forward(fusedin, spec.attention, params, "attention")
        if attention_sink is not None:
            attention_sink["attention"] = att
    x = conv2d(fusedin, params["fusion.weight"], params["fusion.bias"], padding=1)
    out = upsampler(x, spec.scale, params)

    if spec.global_skip:
        lr_k = lrs[spec.target_index].data
        base = bicubic_resize(lr_k, shape0[2] * spec.scale, shape0[3] * spec.scale)
        out = add(out, Tensor(base.astype(out.data.dtype)))
    if not training:
        out = Tensor(np.clip(out.data, 0.0, 1.0))
    return out


def forward_with_attention(lrs, spec, params) -> tuple[Tensor, dict]:
    """Inference forward that also returns every attention map by site name."""
    sink: dict = {}
    out = forward_multimodal(lrs, spec, params, training=False, attention_sink=sink)
    return out, sink


# ---------------------------------------------------------------------------
# Geometric self-ensemble
# ---------------------------------------------------------------------------


def _dihedral(x: np.ndarray, t: int) -> np.ndarray:
    """Apply transform t in 0..7: rotation by 90*t degrees, then an optional flip."""
    y = np.rot90(x, k=t % 4, axes=(2, 3))
    if t >= 4:
        y = y[:, :, :, ::-1]
    return np.ascontiguousarray(y)


def _dihedral_inverse(x: np.ndarray, t: int) -> np.ndarray:
    y = x[:, :, :, ::-1] if t >= 4 else x
    return np.ascontiguousarray(np.rot90(y, k=-(t % 4), axes=(2, 3)))


def self_ensemble(forward, lrs: list[np.ndarray], spec=None) -> np.ndarray:
    """Average the model over the 8 dihedral transforms of its inputs.

    ``forward`` maps a list of (N, 1, p, p) arrays to an (N, 1, r, r) array.
    Each transform is applied to every input, the prediction is mapped back
    through the inverse transform, and the 8 members are averaged with equal
    weight in fixed transform order.  Inputs must be square.
    """
    for x in lrs:
        if x.shape[2] != x.shape[3]:
            raise ShapeError(f"self-ensemble needs square inputs, got {x.shape}")
    acc = None
    for t in range(8):
        member = forward([_dihedral(x, t) for x in lrs])
        member = _dihedral_inverse(np.asarray(member), t)
        acc = member if acc is None else acc + member
    return acc / 8.0
