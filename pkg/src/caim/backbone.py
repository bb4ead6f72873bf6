"""Frozen convolutional embedding backbone with pluggable modulation blocks.

The backbone is a stack of stride-2 conv/ReLU blocks followed by global
average pooling and a linear embedding head; embeddings are L2-normalized so
Euclidean training distances and cosine evaluation scores agree in ordering.
Modulation blocks slot in after the first K conv blocks and are the only
trainable parameters once the backbone is frozen.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import (
    Tensor,
    conv2d_3x3,
    global_avg_pool,
    l2_normalize,
    linear,
    load_tensors,
    relu,
    repeat_channels,
    save_tensors,
)
from .blocks import DEFAULT_EPS, CaimParams, caim_forward, init_caim, instance_norm_residual
from .seeding import hash64, make_rng

__all__ = [
    "BackboneConfig",
    "ModelAssembly",
    "VARIANTS",
    "build_backbone",
    "replicate_channels",
    "insert_caim",
    "forward_embed",
    "freeze_backbone",
    "save_checkpoint",
    "load_checkpoint",
]

# "conditional": gate follows the modality (the default, gated block).
# "aim":         modulation applied to both modalities (ablation).
# "in":          plain normalization + residual for both modalities (ablation).
VARIANTS = ("conditional", "aim", "in")


@dataclass
class BackboneConfig:
    num_blocks: int = 5
    channels: tuple[int, ...] = (16, 32, 64, 64, 64)
    in_channels: int = 3
    input_hw: int = 32
    embedding_dim: int = 64

    def __post_init__(self) -> None:
        self.channels = tuple(int(c) for c in self.channels)
        if self.num_blocks < 2:
            raise ValueError("backbone needs at least 2 blocks")
        if len(self.channels) != self.num_blocks:
            raise ValueError(
                f"channels list has {len(self.channels)} entries for {self.num_blocks} blocks"
            )
        if self.embedding_dim < 8:
            raise ValueError("embedding dim must be >= 8")
        if self.in_channels not in (1, 3):
            raise ValueError("in_channels must be 1 or 3")
        hw = self.input_hw
        for i in range(self.num_blocks):
            # ceil-div geometry saturates at 1x1; a block fed a 1x1 map is
            # degenerate, so that is the collapse condition we reject
            if hw < 2:
                raise ValueError(
                    f"spatial size collapses below 1x1 at block {i + 1} "
                    f"for input {self.input_hw}x{self.input_hw}"
                )
            hw = (hw + 2 * 1 - 3) // 2 + 1

    def spatial_sizes(self) -> list[int]:
        """Feature map side length after each block."""
        sizes, hw = [], self.input_hw
        for _ in range(self.num_blocks):
            hw = (hw + 2 * 1 - 3) // 2 + 1
            sizes.append(hw)
        return sizes


@dataclass
class ModelAssembly:
    """Backbone weights plus an insertion plan of modulation blocks.

    ``caim_positions`` are 1-based conv-block indices; after freezing, only
    the modulation parameters are trainable.
    """

    config: BackboneConfig
    conv_weights: list[tuple[Tensor, Tensor]]
    embed_weight: Tensor
    embed_bias: Tensor
    caim_positions: list[int] = field(default_factory=list)
    caim_params: dict[int, CaimParams] = field(default_factory=dict)
    frozen: bool = False
    variant: str = "conditional"

    def backbone_tensors(self) -> list[Tensor]:
        out: list[Tensor] = []
        for w, b in self.conv_weights:
            out.extend([w, b])
        out.extend([self.embed_weight, self.embed_bias])
        return out

    def modulation_tensors(self) -> list[Tensor]:
        out: list[Tensor] = []
        for pos in self.caim_positions:
            out.extend(self.caim_params[pos].tensors())
        return out

    def trainable_tensors(self) -> list[Tensor]:
        return [t for t in self.backbone_tensors() + self.modulation_tensors() if t.requires_grad]


def build_backbone(cfg: BackboneConfig, seed: int) -> ModelAssembly:
    """Deterministically initialized backbone; no modulation blocks yet."""
    rng = make_rng(seed, "backbone-init")

    def he_uniform(shape: tuple[int, ...], fan_in: int) -> Tensor:
        limit = np.sqrt(6.0 / fan_in)
        return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)

    conv_weights = []
    prev = cfg.in_channels
    for c in cfg.channels:
        w = he_uniform((c, prev, 3, 3), fan_in=prev * 9)
        b = Tensor(np.zeros(c), requires_grad=True)
        conv_weights.append((w, b))
        prev = c
    embed_w = he_uniform((cfg.embedding_dim, prev), fan_in=prev)
    embed_b = Tensor(np.zeros(cfg.embedding_dim), requires_grad=True)
    return ModelAssembly(cfg, conv_weights, embed_w, embed_b)


def replicate_channels(img: Tensor) -> Tensor:
    """Copy a single-channel image across three channels.

    Three-channel input passes through unchanged (with a warning, since the
    caller probably did not mean to replicate it).
    """
    if img.data.ndim != 4 or img.shape[1] not in (1, 3):
        raise ValueError(f"replicate_channels expects [B, 1|3, H, W], got {img.shape}")
    if img.shape[1] == 3:
        warnings.warn("replicate_channels: input already has 3 channels, passing through")
        return img
    return repeat_channels(img, 3)


def freeze_backbone(model: ModelAssembly) -> ModelAssembly:
    for t in model.backbone_tensors():
        t.requires_grad = False
    model.frozen = True
    return model


def insert_caim(model: ModelAssembly, count: int, seed: int) -> ModelAssembly:
    """Place modulation blocks after conv blocks 1..count and freeze the backbone."""
    n = model.config.num_blocks
    if not 1 <= count <= n:
        raise ValueError(f"block count must be in 1..{n}, got {count}")
    if model.caim_params:
        raise ValueError("model already has modulation blocks")
    freeze_backbone(model)
    for pos in range(1, count + 1):
        channels = model.config.channels[pos - 1]
        model.caim_params[pos] = init_caim(hash64(seed, "caim", pos), channels)
    model.caim_positions = list(range(1, count + 1))
    return model


def forward_embed(model: ModelAssembly, images, gate: int, eps: float = DEFAULT_EPS) -> Tensor:
    """Embed a batch of images; returns L2-normalized rows of shape [B, D].

    ``gate`` is the modality gate: 0 for source, 1 for target. For the
    default "conditional" variant a closed gate makes every modulation block
    a bit-exact pass-through, so the output equals the plain backbone's. The
    ablation variants ("aim", "in") apply their block to both modalities and
    intentionally break that property.
    """
    if gate not in (0, 1):
        raise ValueError(f"gate must be 0 or 1, got {gate!r}")
    x = images if isinstance(images, Tensor) else Tensor(images)
    hw = model.config.input_hw
    if x.data.ndim != 4 or x.shape[2] != hw or x.shape[3] != hw:
        raise ValueError(f"expected [B, C, {hw}, {hw}] images, got {x.shape}")
    if x.shape[1] == 1 and model.config.in_channels == 3:
        x = replicate_channels(x)
    if x.shape[1] != model.config.in_channels:
        raise ValueError(
            f"expected {model.config.in_channels}-channel input, got {x.shape[1]}"
        )

    for idx, (w, b) in enumerate(model.conv_weights, start=1):
        x = relu(conv2d_3x3(x, w, b, stride=2, padding=1))
        if idx in model.caim_params:
            if model.variant == "conditional":
                x = caim_forward(x, gate, model.caim_params[idx], eps)
            elif model.variant == "aim":
                x = caim_forward(x, 1, model.caim_params[idx], eps)
            elif model.variant == "in":
                x = instance_norm_residual(x, eps)
            else:
                raise ValueError(f"unknown variant {model.variant!r}")
    embedding = linear(global_avg_pool(x), model.embed_weight, model.embed_bias)
    return l2_normalize(embedding, eps=1e-12)


# ---------------------------------------------------------------------------
# checkpoint directory: backbone.bin + caim_<i>.bin + assembly.json
# ---------------------------------------------------------------------------


def save_checkpoint(directory, model: ModelAssembly) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_tensors(directory / "backbone.bin", [t.data for t in model.backbone_tensors()])
    for pos in model.caim_positions:
        save_tensors(
            directory / f"caim_{pos}.bin",
            [t.data for t in model.caim_params[pos].tensors()],
        )
    assembly = {
        "num_blocks": model.config.num_blocks,
        "caim_positions": model.caim_positions,
        "embedding_dim": model.config.embedding_dim,
        "channels": list(model.config.channels),
        "in_channels": model.config.in_channels,
        "input_hw": model.config.input_hw,
        "frozen": model.frozen,
        "variant": model.variant,
    }
    with open(directory / "assembly.json", "w") as fh:
        json.dump(assembly, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(directory) -> ModelAssembly:
    directory = Path(directory)
    with open(directory / "assembly.json") as fh:
        meta = json.load(fh)
    cfg = BackboneConfig(
        num_blocks=meta["num_blocks"],
        channels=tuple(meta["channels"]),
        in_channels=meta["in_channels"],
        input_hw=meta["input_hw"],
        embedding_dim=meta["embedding_dim"],
    )
    frozen = bool(meta.get("frozen", True))
    arrays = load_tensors(directory / "backbone.bin")
    expected = 2 * cfg.num_blocks + 2
    if len(arrays) != expected:
        raise ValueError(
            f"backbone.bin holds {len(arrays)} tensors, expected {expected}"
        )
    conv_weights = [
        (
            Tensor(arrays[2 * i], requires_grad=not frozen),
            Tensor(arrays[2 * i + 1], requires_grad=not frozen),
        )
        for i in range(cfg.num_blocks)
    ]
    embed_w = Tensor(arrays[-2], requires_grad=not frozen)
    embed_b = Tensor(arrays[-1], requires_grad=not frozen)

    positions = [int(p) for p in meta["caim_positions"]]
    caim_params: dict[int, CaimParams] = {}
    for pos in positions:
        parts = load_tensors(directory / f"caim_{pos}.bin")
        if len(parts) != 8:
            raise ValueError(f"caim_{pos}.bin holds {len(parts)} tensors, expected 8")
        caim_params[pos] = CaimParams(*[Tensor(a, requires_grad=True) for a in parts])
    return ModelAssembly(
        config=cfg,
        conv_weights=conv_weights,
        embed_weight=embed_w,
        embed_bias=embed_b,
        caim_positions=positions,
        caim_params=caim_params,
        frozen=frozen,
        variant=meta.get("variant", "conditional"),
    )
