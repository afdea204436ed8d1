"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from fusenet.autograd import Tensor, _make, backward, record_activation_pattern


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    per_tensor: dict[str, float] = field(default_factory=dict)
    checked: int = 0
    skipped: int = 0  # coordinates whose stencil crossed a ReLU / max-pool kink
    max_skip_fraction: float = 0.25

    @property
    def passed(self) -> bool:
        if not np.isfinite(self.max_rel_error) or self.max_rel_error > self.tolerance:
            return False
        total = self.checked + self.skipped
        return total == 0 or self.skipped <= self.max_skip_fraction * total


def probe_loss(t: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(t * weights)``; a fixed random linear read-out for checking non-scalar ops."""
    def _backward(g):
        return (g * weights,)

    return _make(np.asarray(np.sum(t.data * weights)), (t,), _backward, "probe")


def relative_error(analytic: np.ndarray, numeric: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)`` over ``mask``.

    ``floor`` is 1e-3 of the tensor's largest gradient magnitude so entries
    that are essentially zero do not turn round-off into huge ratios.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-3 * scale)
    err = np.abs(a - n) / denom
    if mask is not None:
        err = err[mask]
    return float(err.max(initial=0.0))


def _same_pattern(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x[0], y[0]) for x, y in zip(a, b))


def kink_margin(fn: Callable[[], Tensor]) -> float:
    """Smallest distance of any ReLU input / max-pool top-two gap from a kink in ``fn()``."""
    _, pattern = _evaluate(fn)
    return min((m for _, m in pattern), default=float("inf"))


def _evaluate(fn):
    with record_activation_pattern() as pattern:
        value = float(fn().data)
    return value, pattern


def numerical_gradient(fn: Callable[[], Tensor], t: Tensor, rel_step: float = 1e-3,
                       return_smooth: bool = False):
    """Central differences with step ``rel_step * max(1, |x|)``, perturbing ``t.data`` in place.

    With ``return_smooth`` also returns a boolean mask that is False where
    either stencil point ran on a different ReLU / max-pool pattern than the
    unperturbed point.
    """
    grad = np.zeros(t.shape, dtype=np.float64)
    smooth = np.ones(t.shape, dtype=bool)
    _, base = _evaluate(fn)
    flat = t.data.reshape(-1)
    out, ok = grad.reshape(-1), smooth.reshape(-1)
    for i in range(flat.size):
        x0 = flat[i]
        h = rel_step * max(1.0, abs(float(x0)))
        flat[i] = x0 + h
        f_plus, p_plus = _evaluate(fn)
        flat[i] = x0 - h
        f_minus, p_minus = _evaluate(fn)
        flat[i] = x0
        out[i] = (f_plus - f_minus) / (2 * h)
        ok[i] = _same_pattern(base, p_plus) and _same_pattern(base, p_minus)
    return (grad, smooth) if return_smooth else grad


def gradient_check(fn: Callable[[], Tensor], tensors: Mapping[str, Tensor],
                   tolerance: float = 1e-4, rel_step: float = 1e-3) -> GradCheckReport:
    """Compare analytic gradients of ``fn()`` against finite differences.

    ``fn`` must rebuild the graph from the given tensors on every call; the
    tensors should be float64. Coordinates whose stencil crosses a ReLU zero
    or a max-pool tie are excluded and counted in ``skipped``. Failures are
    reported, never raised.
    """
    for t in tensors.values():
        t.grad = None
        t.requires_grad = True
    backward(fn())
    per_tensor = {}
    checked = skipped = 0
    for name, t in tensors.items():
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.copy()
        numeric, smooth = numerical_gradient(fn, t, rel_step, return_smooth=True)
        per_tensor[name] = relative_error(analytic, numeric, smooth)
        checked += int(smooth.sum())
        skipped += int((~smooth).sum())
    worst = max(per_tensor.values(), default=0.0)
    return GradCheckReport(worst, tolerance, per_tensor, checked, skipped)


def _away_from_zero(rng, shape, margin=1e-2):
    return rng.uniform(margin, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _distinct(rng, shape, gap=1e-2):
    n = int(np.prod(shape))
    return (rng.permutation(n) * gap).reshape(shape) + rng.uniform(0, gap / 10, size=shape)


def _leaf(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _params(model) -> dict[str, Tensor]:
    return {name: t for name, t in model.named_parameters()}


_KINK_MARGIN = 1e-2
_MAX_DRAWS = 200


def run_suite(seed: int = 0, tolerance: float = 1e-4, width: int = 4) -> dict[str, GradCheckReport]:
    """Finite-difference checks of every differentiable op and of the assembled models (float64)."""
    from fusenet import autograd as A
    from fusenet.deepunet import (
        PipelineConfig, down_block_forward, init_pipeline, pipeline_forward, up_block_forward,
    )
    from fusenet.fusion import FusionModelConfig, fusion_forward, init_fusion, total_loss

    rng = np.random.default_rng(seed)
    reports: dict[str, GradCheckReport] = {}

    with A.default_dtype(np.float64):
        x, w, b = _leaf(rng.standard_normal((1, 2, 6, 6))), _leaf(rng.standard_normal((3, 2, 3, 3))), \
            _leaf(rng.standard_normal(3))
        probe = rng.standard_normal((1, 3, 6, 6))
        reports["conv2d_3x3"] = gradient_check(lambda: probe_loss(A.conv2d(x, w, b), probe),
                                               {"input": x, "kernel": w, "bias": b}, tolerance)
        w1 = _leaf(rng.standard_normal((3, 2, 1, 1)))
        reports["conv2d_1x1"] = gradient_check(lambda: probe_loss(A.conv2d(x, w1, b), probe),
                                               {"input": x, "kernel": w1, "bias": b}, tolerance)

        xp = _leaf(_distinct(rng, (1, 2, 4, 4)))
        probe_p = rng.standard_normal((1, 2, 2, 2))
        reports["maxpool2x2"] = gradient_check(lambda: probe_loss(A.maxpool2x2(xp), probe_p),
                                               {"input": xp}, tolerance)
        xu = _leaf(rng.standard_normal((1, 2, 3, 3)))
        probe_u = rng.standard_normal((1, 2, 6, 6))
        reports["upsample2x"] = gradient_check(lambda: probe_loss(A.upsample2x(xu), probe_u),
                                               {"input": xu}, tolerance)
        xr = _leaf(_away_from_zero(rng, (1, 2, 3, 3)))
        yr = _leaf(rng.standard_normal((1, 2, 3, 3)))
        probe_r = rng.standard_normal((1, 2, 3, 3))
        reports["relu"] = gradient_check(lambda: probe_loss(A.relu(xr), probe_r), {"input": xr}, tolerance)
        reports["add"] = gradient_check(lambda: probe_loss(A.add(xr, yr), probe_r),
                                        {"a": xr, "b": yr}, tolerance)
        za = _leaf(rng.standard_normal((1, 1, 3, 3)))
        probe_c = rng.standard_normal((1, 3, 3, 3))
        reports["concat_channels"] = gradient_check(
            lambda: probe_loss(A.concat_channels([yr, za]), probe_c), {"a": yr, "b": za}, tolerance)
        zs = _leaf(rng.standard_normal((1, 4, 2, 2)))
        probe_s = rng.standard_normal((1, 4, 2, 2))
        reports["softmax_classes"] = gradient_check(lambda: probe_loss(A.softmax_classes(zs), probe_s),
                                                    {"logits": zs}, tolerance)
        labels = rng.integers(0, 4, (1, 2, 2))
        labels[0, 0, 0] = A.IGNORE_INDEX
        reports["cross_entropy"] = gradient_check(
            lambda: A.masked_softmax_cross_entropy(zs, labels)[0], {"logits": zs}, tolerance)

        pcfg = PipelineConfig(in_bands=2, width=width, depth=1, classes=3)
        pw = init_pipeline(pcfg, rng, dtype=np.float64)
        probe_skip = rng.standard_normal((1, width, 4, 4))
        probe_pool = rng.standard_normal((1, width, 2, 2))

        def down_loss():
            skip, pooled = down_block_forward(xb, pw.down[0])
            return A.add(probe_loss(skip, probe_skip), probe_loss(pooled, probe_pool))

        for _ in range(_MAX_DRAWS):
            xb = _leaf(rng.uniform(0, 1, (1, width, 4, 4)))
            if kink_margin(down_loss) >= _KINK_MARGIN:
                break

        reports["down_block"] = gradient_check(
            down_loss, {"input": xb, **_params(_Named(pw.down[0], "down"))}, tolerance)

        def up_loss():
            return probe_loss(up_block_forward(prev, skip, pw.up[0]), probe_skip)

        for _ in range(_MAX_DRAWS):
            prev = _leaf(rng.uniform(0, 1, (1, width, 2, 2)))
            skip = _leaf(rng.uniform(0, 1, (1, width, 4, 4)))
            if kink_margin(up_loss) >= _KINK_MARGIN:
                break
        reports["up_block"] = gradient_check(
            up_loss,
            {"prev": prev, "skip": skip, **_params(_Named(pw.up[0], "up"))}, tolerance)

        patch = _leaf(rng.uniform(0, 1, (1, 2, 8, 8)))
        plabels = rng.integers(0, 3, (1, 8, 8))
        reports["pipeline_d1"] = gradient_check(
            lambda: A.masked_softmax_cross_entropy(pipeline_forward(patch, pcfg, pw).logits, plabels)[0],
            {"input": patch, **_params(pw)}, tolerance)
        pcfg2 = PipelineConfig(in_bands=2, width=width, depth=2, classes=3)
        pw2 = init_pipeline(pcfg2, rng, dtype=np.float64)
        reports["pipeline_d2"] = gradient_check(
            lambda: A.masked_softmax_cross_entropy(pipeline_forward(patch, pcfg2, pw2).logits, plabels)[0],
            {"input": patch, **_params(pw2)}, tolerance)

        for depth in (1, 2):
            fcfg = FusionModelConfig(groups=[["a"], ["b", "c", "d"]], width=width, depth=depth, classes=4,
                                     aux_weight=0.3)
            fw = init_fusion(fcfg, rng, dtype=np.float64)
            inputs = [_leaf(rng.uniform(0, 1, (1, 1, 8, 8))), _leaf(rng.uniform(0, 1, (1, 3, 8, 8)))]
            flabels = rng.integers(0, 4, (1, 8, 8))
            flabels[0, :2, :2] = A.IGNORE_INDEX

            def fusion_loss(fcfg=fcfg, fw=fw, inputs=inputs, flabels=flabels):
                return total_loss(fusion_forward(inputs, fcfg, fw), flabels, fcfg.aux_weight)

            reports[f"fusion_model_d{depth}"] = gradient_check(
                fusion_loss, {"input0": inputs[0], "input1": inputs[1], **_params(fw)}, tolerance)
    return reports


class _Named:
    """Expose a block's parameters through ``named_parameters()`` with a prefix."""

    def __init__(self, block, prefix):
        self.block, self.prefix = block, prefix

    def named_parameters(self):
        return self.block.named_parameters(self.prefix)
