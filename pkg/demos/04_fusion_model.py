"""The multi-group fusion model and its loss."""
import math

import numpy as np

from fusenet.autograd import Tensor
from fusenet.fusion import FusionModelConfig, fusion_forward, init_fusion, total_loss
from fusenet.nn import parameter_count

cfg = FusionModelConfig(groups=[["DSM"], ["IR", "R", "G"], ["IR", "G", "B"]], width=16, depth=2, classes=6)
rng = np.random.default_rng(0)
weights = init_fusion(cfg, rng)
print("parameters:", parameter_count(weights))
print("fusion layers:", [n for n, _ in weights.named_parameters() if n.startswith("fusion")])

inputs = [Tensor(rng.random((2, len(g), 32, 32), dtype=np.float32)) for g in cfg.groups]
out = fusion_forward(inputs, cfg, weights)
print("probabilities", out.probs.shape, "sum to one:", np.allclose(out.probs.data.sum(axis=1), 1, atol=1e-5))
print("per-pipeline logits:", [p.shape for p in out.pipeline_logits])

labels = rng.integers(0, 6, (2, 32, 32))
labels[:, :4, :4] = 255
for lam in (0.0, 0.3, 1.0):
    print("lambda %.1f -> loss %.4f" % (lam, total_loss(out, labels, lam).item()))

# with all logits zero every term is ln 6
print("uniform reference (1 + 0.3*3) ln 6 =", round((1 + 0.3 * 3) * math.log(6), 4))
