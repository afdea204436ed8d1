"""One DeepUNet segmentation pipeline: stem, DownBlocks, UpBlocks and a class head.

A DownBlock computes ``s = relu(x + conv2(relu(conv1(x))))`` and hands ``s``
both to a 2x2 max-pool and, as a skip connection, to the mirrored UpBlock.
An UpBlock upsamples the coarser features, concatenates the skip and applies
two 3x3 convolutions.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Iterator

import numpy as np

from fusenet.autograd import Tensor, add, concat_channels, maxpool2x2, relu, upsample2x
from fusenet.nn import ConvWeights


@dataclass
class PipelineConfig:
    in_bands: int
    width: int = 32
    depth: int = 4
    classes: int = 6
    upsample_mode: str = "nearest"

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.width < 1 or self.in_bands < 1:
            raise ValueError("width and in_bands must be positive")

    def check_patch(self, height: int, width: int) -> None:
        factor = 2 ** self.depth
        if height % factor or width % factor:
            raise ValueError(f"patch {height}x{width} is not divisible by 2^depth = {factor}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BlockWeights:
    conv1: ConvWeights
    conv2: ConvWeights

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.conv1.named_parameters(f"{prefix}.conv1")
        yield from self.conv2.named_parameters(f"{prefix}.conv2")


@dataclass
class PipelineWeights:
    stem: ConvWeights
    down: list[BlockWeights]
    up: list[BlockWeights]
    head: ConvWeights
    prefix: str = field(default="pipeline", compare=False)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.stem.named_parameters(f"{self.prefix}.stem")
        for i, block in enumerate(self.down):
            yield from block.named_parameters(f"{self.prefix}.down{i}")
        for i, block in enumerate(self.up):
            yield from block.named_parameters(f"{self.prefix}.up{i}")
        yield from self.head.named_parameters(f"{self.prefix}.head")


@dataclass
class PipelineOutput:
    final_features: Tensor
    shallow_features: Tensor
    logits: Tensor
    skips: list[Tensor] = field(default_factory=list)


def init_pipeline(config: PipelineConfig, rng: np.random.Generator, prefix: str = "pipeline",
                  dtype=None) -> PipelineWeights:
    w = config.width
    stem = ConvWeights.he(rng, config.in_bands, w, 3, dtype)
    down = [BlockWeights(ConvWeights.he(rng, w, 2 * w, 3, dtype), ConvWeights.he(rng, 2 * w, w, 3, dtype))
            for _ in range(config.depth)]
    up = [BlockWeights(ConvWeights.he(rng, 2 * w, 2 * w, 3, dtype), ConvWeights.he(rng, 2 * w, w, 3, dtype))
          for _ in range(config.depth)]
    head = ConvWeights.he(rng, w, config.classes, 1, dtype)
    return PipelineWeights(stem, down, up, head, prefix)


def pipeline_parameter_count(in_bands: int, width: int, depth: int, classes: int) -> int:
    """Closed-form parameter count of :func:`init_pipeline`."""
    w = width
    stem = 9 * in_bands * w + w
    down = (9 * w * 2 * w + 2 * w) + (9 * 2 * w * w + w)
    up = (9 * 2 * w * 2 * w + 2 * w) + (9 * 2 * w * w + w)
    head = w * classes + classes
    return stem + depth * (down + up) + head


def down_block_forward(x: Tensor, weights: BlockWeights) -> tuple[Tensor, Tensor]:
    """Returns ``(skip, pooled)``."""
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ValueError(f"DownBlock needs even spatial dims, got {x.shape}")
    t = relu(weights.conv1(x))
    s = relu(add(x, weights.conv2(t)))
    return s, maxpool2x2(s)


def up_block_forward(prev: Tensor, skip: Tensor, weights: BlockWeights,
                     upsample_mode: str = "nearest") -> Tensor:
    n, _, h, w = prev.shape
    if skip.shape[0] != n or skip.shape[2:] != (2 * h, 2 * w):
        raise ValueError(f"skip {skip.shape} must be exactly twice the spatial size of {prev.shape}")
    z = concat_channels([upsample2x(prev, upsample_mode), skip])
    t = relu(weights.conv1(z))
    return relu(weights.conv2(t))


def pipeline_forward(patch: Tensor, config: PipelineConfig, weights: PipelineWeights) -> PipelineOutput:
    if patch.data.ndim != 4 or patch.shape[1] != config.in_bands:
        raise ValueError(f"pipeline expects [N,{config.in_bands},H,W], got {patch.shape}")
    config.check_patch(patch.shape[2], patch.shape[3])
    shallow = relu(weights.stem(patch))
    skips = []
    x = shallow
    for block in weights.down:
        skip, x = down_block_forward(x, block)
        skips.append(skip)
    for i, block in enumerate(weights.up):
        x = up_block_forward(x, skips[config.depth - 1 - i], block, config.upsample_mode)
    return PipelineOutput(final_features=x, shallow_features=shallow,
                          logits=weights.head(x), skips=skips)
