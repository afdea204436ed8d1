"""Multi-task fusion of several band-group pipelines.

Pre-head features of all pipelines are concatenated and mixed by a 1x1
convolution into shared features ``S``. Each group then concatenates its own
shallow (stem) features with ``S`` and extracts private features through its
own 1x1 convolution. A final 1x1 convolution over the private features gives
the class logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from fusenet.autograd import (
    Tensor, add, concat_channels, masked_softmax_cross_entropy, relu, scale, softmax_classes,
)
from fusenet.deepunet import PipelineConfig, PipelineWeights, init_pipeline, pipeline_forward
from fusenet.nn import ConvWeights


@dataclass
class FusionModelConfig:
    groups: list[list[str]]
    width: int = 32
    depth: int = 4
    classes: int = 6
    aux_weight: float = 0.3
    upsample_mode: str = "nearest"
    shared_in_final: bool = False

    def __post_init__(self):
        self.groups = [list(g) for g in self.groups]
        if not self.groups or any(not g for g in self.groups):
            raise ValueError("fusion model needs at least one non-empty band group")
        if self.aux_weight < 0:
            raise ValueError("aux_weight must be >= 0")

    def pipeline_config(self, g: int) -> PipelineConfig:
        return PipelineConfig(in_bands=len(self.groups[g]), width=self.width, depth=self.depth,
                              classes=self.classes, upsample_mode=self.upsample_mode)

    def to_dict(self) -> dict:
        return {"groups": self.groups, "width": self.width, "depth": self.depth,
                "classes": self.classes, "aux_weight": self.aux_weight,
                "upsample_mode": self.upsample_mode, "shared_in_final": self.shared_in_final}


@dataclass
class FusionWeights:
    pipelines: list[PipelineWeights]
    shared_conv: ConvWeights
    private_convs: list[ConvWeights]
    final_conv: ConvWeights

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for p in self.pipelines:
            yield from p.named_parameters()
        yield from self.shared_conv.named_parameters("fusion.shared")
        for g, conv in enumerate(self.private_convs):
            yield from conv.named_parameters(f"fusion.private{g}")
        yield from self.final_conv.named_parameters("fusion.final")


@dataclass
class FusionOutput:
    probs: Tensor
    final_logits: Tensor
    pipeline_logits: list[Tensor] = field(default_factory=list)


def init_fusion(config: FusionModelConfig, rng: np.random.Generator, dtype=None) -> FusionWeights:
    w, n_groups = config.width, len(config.groups)
    pipelines = [init_pipeline(config.pipeline_config(g), rng, prefix=f"group{g}", dtype=dtype)
                 for g in range(n_groups)]
    shared = ConvWeights.he(rng, n_groups * w, w, 1, dtype)
    private = [ConvWeights.he(rng, 2 * w, w, 1, dtype) for _ in range(n_groups)]
    final_in = (n_groups + int(config.shared_in_final)) * w
    final = ConvWeights.he(rng, final_in, config.classes, 1, dtype)
    return FusionWeights(pipelines, shared, private, final)


def fusion_forward(inputs: Sequence[Tensor], config: FusionModelConfig,
                   weights: FusionWeights) -> FusionOutput:
    """Run every group pipeline on its own input and fuse the results.

    ``inputs[g]`` is the ``[N, len(groups[g]), H, W]`` stack for group ``g``.
    """
    if len(inputs) != len(config.groups):
        raise ValueError(f"expected {len(config.groups)} group inputs, got {len(inputs)}")
    ref = inputs[0].shape
    for g, x in enumerate(inputs):
        if x.shape[1] != len(config.groups[g]):
            raise ValueError(f"group {g} expects {len(config.groups[g])} bands, got {x.shape[1]}")
        if (x.shape[0],) + x.shape[2:] != (ref[0],) + ref[2:]:
            raise ValueError(f"group inputs are not aligned: {x.shape} vs {ref}")
    outs = [pipeline_forward(x, config.pipeline_config(g), weights.pipelines[g])
            for g, x in enumerate(inputs)]
    shared = relu(weights.shared_conv(concat_channels([o.final_features for o in outs])))
    private = [relu(conv(concat_channels([o.shallow_features, shared])))
               for o, conv in zip(outs, weights.private_convs)]
    if config.shared_in_final:
        private = private + [shared]
    final_logits = weights.final_conv(concat_channels(private))
    return FusionOutput(probs=softmax_classes(final_logits), final_logits=final_logits,
                        pipeline_logits=[o.logits for o in outs])


def total_loss(out: FusionOutput, labels: np.ndarray, aux_weight: float) -> Tensor:
    """Final-head cross-entropy plus ``aux_weight`` times the summed per-pipeline cross-entropies."""
    loss, _ = masked_softmax_cross_entropy(out.final_logits, labels)
    if aux_weight == 0:
        return loss
    aux = None
    for logits in out.pipeline_logits:
        ce, _ = masked_softmax_cross_entropy(logits, labels)
        aux = ce if aux is None else add(aux, ce)
    return add(loss, scale(aux, aux_weight))
