"""Confusion matrices, OA and F1, and error images."""
import tempfile

import numpy as np

from fusenet.metrics import ConfusionMatrix, accumulate_confusion, summarize, write_error_image

cm = accumulate_confusion(np.array([0, 1, 0]), np.array([0, 1, 1]), ConfusionMatrix.empty(2))
print(cm.counts)
r = summarize(cm, ["background", "object"])
print("OA", r.overall_accuracy, "F1", r.f1)

# a class nobody predicted or labelled stays undefined instead of 0
rng = np.random.default_rng(0)
ref = rng.integers(0, 3, (32, 32))
ref[:4] = 255
pred = np.where(rng.random((32, 32)) < 0.8, np.where(ref == 255, 0, ref), rng.integers(0, 3, (32, 32)))
report = summarize(accumulate_confusion(pred, ref, ConfusionMatrix.empty(4)))
print(report.to_csv())

path = tempfile.mktemp(suffix=".ppm")
write_error_image(path, pred, ref)
print("error image written to", path)
