"""One DeepUNet pipeline: blocks, skips and parameter counts."""
import numpy as np

from fusenet.autograd import Tensor
from fusenet.deepunet import PipelineConfig, init_pipeline, pipeline_forward, pipeline_parameter_count
from fusenet.nn import parameter_count

cfg = PipelineConfig(in_bands=3, width=32, depth=2, classes=6)
weights = init_pipeline(cfg, np.random.default_rng(0))
print("parameters:", parameter_count(weights), "closed form:", pipeline_parameter_count(3, 32, 2, 6))

for name, t in list(weights.named_parameters())[:6]:
    print("  %-20s %s" % (name, t.shape))

x = Tensor(np.random.default_rng(1).random((1, 3, 64, 64), dtype=np.float32))
out = pipeline_forward(x, cfg, weights)
print("logits", out.logits.shape, "shallow", out.shallow_features.shape, "final", out.final_features.shape)
print("skip pyramid:", [s.shape for s in out.skips])

# the patch size has to survive d halvings
try:
    pipeline_forward(Tensor(np.zeros((1, 3, 30, 30), np.float32)), cfg, weights)
except ValueError as err:
    print("30x30 patch rejected:", err)
