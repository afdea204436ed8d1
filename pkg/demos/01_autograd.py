"""Tensors, the tape and a finite-difference check."""
import numpy as np

from fusenet.autograd import Tensor, conv2d, relu, maxpool2x2, masked_softmax_cross_entropy, default_dtype
from fusenet.gradcheck import gradient_check, probe_loss

rng = np.random.default_rng(0)

# a 3x3 conv, relu and pool on one 2-channel 6x6 image
x = Tensor(rng.random((1, 2, 6, 6), dtype=np.float32), requires_grad=True)
w = Tensor((rng.standard_normal((4, 2, 3, 3)) * 0.3).astype(np.float32), requires_grad=True)
b = Tensor(np.zeros(4, np.float32), requires_grad=True)
y = maxpool2x2(relu(conv2d(x, w, b)))
print("forward", x.shape, "->", y.shape, y.dtype)

# any scalar works as a loss; here a fixed random read-out
loss = probe_loss(y, rng.standard_normal(y.shape))
loss.backward()
print("loss", round(loss.item(), 5), "grad shapes", x.grad.shape, w.grad.shape, b.grad.shape)

# gradients add up across backward calls, so clear them between steps
first = b.grad.copy()
loss.backward()
print("after a second backward, bias grad doubled:", np.allclose(b.grad, 2 * first))

# per-pixel cross-entropy; label 255 is ignored
logits = Tensor(rng.standard_normal((1, 3, 2, 2)))
labels = np.array([[[0, 2], [255, 1]]])
ce, probs = masked_softmax_cross_entropy(logits, labels)
print("cross-entropy over 3 valid pixels:", round(ce.item(), 5))

# central differences in float64
with default_dtype(np.float64):
    xs = Tensor(rng.standard_normal((1, 2, 5, 5)), requires_grad=True)
    ws = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
    bs = Tensor(rng.standard_normal(3), requires_grad=True)
    probe = rng.standard_normal((1, 3, 5, 5))
    report = gradient_check(lambda: probe_loss(conv2d(xs, ws, bs), probe), {"x": xs, "w": ws, "b": bs})
print("conv gradient check: max relative error %.2e, passed=%s" % (report.max_rel_error, report.passed))
