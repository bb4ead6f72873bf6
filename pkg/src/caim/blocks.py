"""Gated style-modulation block.

The block normalizes a feature map per sample and channel, predicts new
scale/shift statistics from the *un-normalized* map with a small conv head,
applies them, and adds the result back through a gated residual path:

    output = gate * modulated(F) + F

With the gate closed (source modality) the block is exactly the identity,
so inserting it into a frozen network cannot disturb source behaviour. The
prediction heads are zero-initialized, which makes the block an exact
identity for the open gate as well until training moves it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    conv2d_3x3,
    global_avg_pool,
    instance_stats,
    linear,
    normalize_scale_shift,
    relu,
)
from .seeding import make_rng

__all__ = [
    "DEFAULT_EPS",
    "InstanceNormConfig",
    "CaimParams",
    "AffinePair",
    "instance_norm",
    "adain",
    "stylizer_forward",
    "estimate_affine",
    "aim",
    "caim_forward",
    "instance_norm_residual",
    "init_caim",
]

DEFAULT_EPS = 1e-5


@dataclass
class InstanceNormConfig:
    """Per-channel normalization settings.

    ``gamma``/``beta`` may be scalars or length-C arrays; inside the
    modulation block they stay fixed at 1 and 0.
    """

    eps: float = DEFAULT_EPS
    gamma: float | np.ndarray = 1.0
    beta: float | np.ndarray = 0.0


@dataclass
class CaimParams:
    """Learnable tensors of one modulation block.

    ``conv1``/``conv2`` form the stylizer that summarizes the un-normalized
    feature map; ``fc_scale``/``fc_shift`` predict the per-channel modulation
    statistics from that summary.
    """

    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    fc_scale_w: Tensor
    fc_scale_b: Tensor
    fc_shift_w: Tensor
    fc_shift_b: Tensor

    def __post_init__(self) -> None:
        c = self.channels
        s = self.stylizer_width
        if self.conv1_w.shape[:2] != (s, c) or self.conv2_w.shape[:2] != (s, s):
            raise ValueError("stylizer conv shapes are inconsistent")
        if self.fc_scale_w.shape != (c, s) or self.fc_shift_w.shape != (c, s):
            raise ValueError("prediction head shapes must be (channels, stylizer_width)")
        if self.fc_scale_b.shape != (c,) or self.fc_shift_b.shape != (c,):
            raise ValueError("prediction head bias shapes must be (channels,)")

    @property
    def channels(self) -> int:
        return self.conv1_w.shape[1]

    @property
    def stylizer_width(self) -> int:
        return self.conv1_w.shape[0]

    def tensors(self) -> list[Tensor]:
        """All learnable tensors in a fixed order (also the checkpoint order)."""
        return [
            self.conv1_w,
            self.conv1_b,
            self.conv2_w,
            self.conv2_b,
            self.fc_scale_w,
            self.fc_scale_b,
            self.fc_shift_w,
            self.fc_shift_b,
        ]


@dataclass
class AffinePair:
    """Predicted per-channel modulation statistics, one row per sample."""

    scale: Tensor  # [B, C]
    shift: Tensor  # [B, C]


def _constant_bc(value: float | np.ndarray, batch: int, channels: int) -> Tensor:
    arr = np.broadcast_to(np.asarray(value, dtype=np.float64), (batch, channels))
    return Tensor(np.ascontiguousarray(arr))


def instance_norm(feature_map: Tensor, cfg: InstanceNormConfig | None = None) -> Tensor:
    """gamma * (F - mean) / std + beta with per-sample, per-channel statistics."""
    if cfg is None:
        cfg = InstanceNormConfig()
    b, c = feature_map.shape[:2]
    stats = instance_stats(feature_map, cfg.eps)
    scale = _constant_bc(cfg.gamma, b, c)
    shift = _constant_bc(cfg.beta, b, c)
    return normalize_scale_shift(feature_map, stats, scale, shift)


def adain(content: Tensor, style: Tensor, eps: float = 0.0) -> Tensor:
    """Re-standardize ``content`` with the per-channel statistics of ``style``.

    Shipped as a reference oracle for the modulation path; not used in
    training.
    """
    if content.shape[:2] != style.shape[:2]:
        raise ValueError(
            f"adain: batch/channel mismatch {content.shape[:2]} vs {style.shape[:2]}"
        )
    content_stats = instance_stats(content, eps)
    style_stats = instance_stats(style, eps)
    return normalize_scale_shift(content, content_stats, style_stats.std, style_stats.mean)


def stylizer_forward(feature_map: Tensor, params: CaimParams) -> Tensor:
    """Shared style representation: conv-ReLU twice, then global average pooling.

    Operates on the un-normalized input; returns a [B, S] code.
    """
    if feature_map.shape[1] != params.channels:
        raise ValueError(
            f"stylizer: feature map has {feature_map.shape[1]} channels, "
            f"block expects {params.channels}"
        )
    h = relu(conv2d_3x3(feature_map, params.conv1_w, params.conv1_b, stride=1, padding=1))
    h = relu(conv2d_3x3(h, params.conv2_w, params.conv2_b, stride=1, padding=1))
    return global_avg_pool(h)


def estimate_affine(style_code: Tensor, params: CaimParams) -> AffinePair:
    """Predict per-channel scale and shift from the style code (no activation)."""
    return AffinePair(
        scale=linear(style_code, params.fc_scale_w, params.fc_scale_b),
        shift=linear(style_code, params.fc_shift_w, params.fc_shift_b),
    )


def aim(feature_map: Tensor, params: CaimParams, eps: float = DEFAULT_EPS) -> Tensor:
    """Adaptive modulation: normalize, then scale/shift with self-predicted stats."""
    stats = instance_stats(feature_map, eps)
    affine = estimate_affine(stylizer_forward(feature_map, params), params)
    return normalize_scale_shift(feature_map, stats, affine.scale, affine.shift)


def caim_forward(
    feature_map: Tensor, gate: int, params: CaimParams, eps: float = DEFAULT_EPS
) -> Tensor:
    """Gated residual modulation: gate * aim(F) + F.

    A closed gate (0) returns the input object itself: no numeric work, so
    the pass-through is bit-exact by construction.
    """
    if gate not in (0, 1):
        raise ValueError(f"gate must be 0 or 1, got {gate!r}")
    if gate == 0:
        return feature_map
    return aim(feature_map, params, eps) + feature_map


def instance_norm_residual(feature_map: Tensor, eps: float = DEFAULT_EPS) -> Tensor:
    """Ablation variant: modulation statistics forced to scale 1, shift 0."""
    return instance_norm(feature_map, InstanceNormConfig(eps=eps)) + feature_map


def init_caim(seed: int, channels: int, stylizer_width: int | None = None) -> CaimParams:
    """Fresh block parameters.

    Stylizer convs are He-uniform; both prediction heads start at exactly
    zero so the block is an identity for either gate value.
    """
    s = channels if stylizer_width is None else stylizer_width
    if channels < 1 or s < 1:
        raise ValueError("channels and stylizer width must be positive")
    rng = make_rng(seed, "caim-init")

    def he_uniform(shape: tuple[int, ...], fan_in: int) -> Tensor:
        limit = np.sqrt(6.0 / fan_in)
        return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)

    zeros = lambda *shape: Tensor(np.zeros(shape), requires_grad=True)
    return CaimParams(
        conv1_w=he_uniform((s, channels, 3, 3), fan_in=channels * 9),
        conv1_b=zeros(s),
        conv2_w=he_uniform((s, s, 3, 3), fan_in=s * 9),
        conv2_b=zeros(s),
        fc_scale_w=zeros(channels, s),
        fc_scale_b=zeros(channels),
        fc_shift_w=zeros(channels, s),
        fc_shift_b=zeros(channels),
    )
