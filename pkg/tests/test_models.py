import math

import numpy as np
import pytest

from fusenet.autograd import Tensor, default_dtype, masked_softmax_cross_entropy, maxpool2x2
from fusenet.deepunet import (
    BlockWeights, PipelineConfig, down_block_forward, init_pipeline, pipeline_forward,
    pipeline_parameter_count, up_block_forward,
)
from fusenet.fusion import FusionModelConfig, FusionOutput, fusion_forward, init_fusion, total_loss
from fusenet.gradcheck import gradient_check
from fusenet.nn import ConvWeights, parameter_count, parameter_dict


def zero_block(w):
    return BlockWeights(ConvWeights.zeros(w, 2 * w, 3), ConvWeights.zeros(2 * w, w, 3))


class TestBlocks:
    def test_down_block_shapes(self):
        rng = np.random.default_rng(0)
        block = BlockWeights(ConvWeights.he(rng, 32, 64, 3), ConvWeights.he(rng, 64, 32, 3))
        skip, pooled = down_block_forward(Tensor(rng.random((1, 32, 64, 64), dtype=np.float32)), block)
        assert skip.shape == (1, 32, 64, 64)
        assert pooled.shape == (1, 32, 32, 32)

    def test_zero_down_block_passes_input(self):
        x = np.random.default_rng(1).random((2, 4, 8, 8))
        skip, pooled = down_block_forward(Tensor(x), zero_block(4))
        np.testing.assert_array_equal(skip.data, x)
        np.testing.assert_array_equal(pooled.data, maxpool2x2(Tensor(x)).data)

    def test_down_block_odd_dims(self):
        with pytest.raises(ValueError):
            down_block_forward(Tensor(np.zeros((1, 2, 5, 4))), zero_block(2))

    def test_up_block_shapes(self):
        rng = np.random.default_rng(2)
        block = BlockWeights(ConvWeights.he(rng, 64, 64, 3), ConvWeights.he(rng, 64, 32, 3))
        out = up_block_forward(Tensor(rng.random((1, 32, 16, 16))), Tensor(rng.random((1, 32, 32, 32))), block)
        assert out.shape == (1, 32, 32, 32)

    def test_zero_up_block_is_zero(self):
        rng = np.random.default_rng(3)
        block = BlockWeights(ConvWeights.zeros(4, 4, 3), ConvWeights.zeros(4, 2, 3))
        out = up_block_forward(Tensor(rng.random((1, 2, 2, 2))), Tensor(rng.random((1, 2, 4, 4))), block)
        assert np.all(out.data == 0)

    def test_up_block_skip_mismatch(self):
        with pytest.raises(ValueError, match="twice"):
            up_block_forward(Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.zeros((1, 2, 6, 6))), zero_block(2))


class TestPipeline:
    def test_shapes_d2(self):
        cfg = PipelineConfig(in_bands=3, width=32, depth=2, classes=6)
        w = init_pipeline(cfg, np.random.default_rng(0))
        out = pipeline_forward(Tensor(np.random.default_rng(1).random((1, 3, 64, 64), dtype=np.float32)), cfg, w)
        assert out.logits.shape == (1, 6, 64, 64)
        assert out.shallow_features.shape == (1, 32, 64, 64)
        assert out.final_features.shape == (1, 32, 64, 64)

    @pytest.mark.parametrize("depth", [1, 2, 3])
    def test_skip_pyramid(self, depth):
        cfg = PipelineConfig(in_bands=1, width=2, depth=depth, classes=3)
        w = init_pipeline(cfg, np.random.default_rng(depth))
        out = pipeline_forward(Tensor(np.random.default_rng(0).random((2, 1, 16, 16))), cfg, w)
        assert [s.shape for s in out.skips] == [(2, 2, 16 // 2 ** i, 16 // 2 ** i) for i in range(depth)]
        assert out.logits.shape == (2, 3, 16, 16)

    def test_indivisible_patch(self):
        cfg = PipelineConfig(in_bands=1, width=2, depth=2, classes=3)
        with pytest.raises(ValueError, match="divisible"):
            pipeline_forward(Tensor(np.zeros((1, 1, 6, 8))), cfg, init_pipeline(cfg, np.random.default_rng(0)))

    def test_parameter_count_hand(self):
        # stem 9*3*2+2=56; down 9*2*4+4 + 9*4*2+2 = 150; up 9*4*4+4 + 9*4*2+2 = 222; head 2*6+6 = 18
        assert pipeline_parameter_count(3, 2, 1, 6) == 56 + 150 + 222 + 18 == 446
        cfg = PipelineConfig(in_bands=3, width=2, depth=1, classes=6)
        assert parameter_count(init_pipeline(cfg, np.random.default_rng(0))) == 446

    @pytest.mark.parametrize("in_bands,width,depth,classes", [(1, 4, 2, 6), (3, 8, 3, 2), (5, 32, 4, 6)])
    def test_parameter_count_closed_form(self, in_bands, width, depth, classes):
        cfg = PipelineConfig(in_bands=in_bands, width=width, depth=depth, classes=classes)
        count = parameter_count(init_pipeline(cfg, np.random.default_rng(0)))
        assert count == pipeline_parameter_count(in_bands, width, depth, classes)

    def test_unique_names(self):
        cfg = PipelineConfig(in_bands=3, width=2, depth=3, classes=6)
        names = [n for n, _ in init_pipeline(cfg, np.random.default_rng(0)).named_parameters()]
        assert len(names) == len(set(names))

    def test_deterministic(self):
        cfg = PipelineConfig(in_bands=2, width=4, depth=2, classes=3)
        w = init_pipeline(cfg, np.random.default_rng(5))
        x = Tensor(np.random.default_rng(6).random((2, 2, 16, 16), dtype=np.float32))
        a = pipeline_forward(x, cfg, w).logits.data
        b = pipeline_forward(x, cfg, w).logits.data
        assert a.tobytes() == b.tobytes()

    def test_minimal_gradcheck(self):
        with default_dtype(np.float64):
            rng = np.random.default_rng(7)
            cfg = PipelineConfig(in_bands=1, width=2, depth=1, classes=2)
            w = init_pipeline(cfg, rng, dtype=np.float64)
            x = Tensor(rng.random((1, 1, 4, 4)), requires_grad=True)
            labels = rng.integers(0, 2, (1, 4, 4))
            report = gradient_check(
                lambda: masked_softmax_cross_entropy(pipeline_forward(x, cfg, w).logits, labels)[0],
                {"x": x, **parameter_dict(w)})
        assert report.passed, report


def _fusion_inputs(cfg, rng, size, batch=1, dtype=np.float32):
    return [Tensor(rng.random((batch, len(g), size, size)).astype(dtype)) for g in cfg.groups]


class TestFusion:
    def test_full_shapes(self):
        cfg = FusionModelConfig(groups=[["DSM"], ["IR", "R", "G"], ["IR", "G", "B"]], width=32, depth=2)
        rng = np.random.default_rng(0)
        out = fusion_forward(_fusion_inputs(cfg, rng, 64), cfg, init_fusion(cfg, rng))
        assert out.probs.shape == (1, 6, 64, 64)
        np.testing.assert_allclose(out.probs.data.sum(axis=1), 1, atol=1e-6)
        assert len(out.pipeline_logits) == 3

    def test_single_group(self):
        cfg = FusionModelConfig(groups=[["a", "b"]], width=4, depth=1, classes=3)
        rng = np.random.default_rng(1)
        out = fusion_forward(_fusion_inputs(cfg, rng, 8), cfg, init_fusion(cfg, rng))
        assert out.probs.shape == (1, 3, 8, 8)

    def test_probabilities_valid_random(self):
        for seed in range(5):
            cfg = FusionModelConfig(groups=[["a"], ["b", "c"]], width=4, depth=2, classes=5)
            rng = np.random.default_rng(seed)
            p = fusion_forward(_fusion_inputs(cfg, rng, 8, batch=2), cfg, init_fusion(cfg, rng)).probs.data
            assert p.min() >= 0 and p.max() <= 1
            np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-6)

    def test_parameter_shapes(self):
        cfg = FusionModelConfig(groups=[["a"], ["b", "c", "d"]], width=4, depth=1, classes=6)
        w = init_fusion(cfg, np.random.default_rng(0))
        params = parameter_dict(w)
        assert params["fusion.shared.kernel"].shape == (4, 8, 1, 1)
        assert params["fusion.private1.kernel"].shape == (4, 8, 1, 1)
        assert params["fusion.final.kernel"].shape == (6, 8, 1, 1)
        assert params["group1.stem.kernel"].shape == (4, 3, 3, 3)

    def test_shared_in_final_flag(self):
        cfg = FusionModelConfig(groups=[["a"], ["b"]], width=4, depth=1, classes=3, shared_in_final=True)
        rng = np.random.default_rng(2)
        w = init_fusion(cfg, rng)
        assert w.final_conv.kernel.shape == (3, 12, 1, 1)
        assert fusion_forward(_fusion_inputs(cfg, rng, 8), cfg, w).probs.shape == (1, 3, 8, 8)

    def test_group_permutation_symmetry(self):
        width = 3
        cfg = FusionModelConfig(groups=[["a"], ["b", "c"], ["d", "e", "f"]], width=width, depth=1, classes=4)
        rng = np.random.default_rng(3)
        with default_dtype(np.float64):
            w = init_fusion(cfg, rng, dtype=np.float64)
            inputs = _fusion_inputs(cfg, rng, 8, dtype=np.float64)
        ref = fusion_forward(inputs, cfg, w).probs.data

        perm = [2, 0, 1]
        cfg_p = FusionModelConfig(groups=[cfg.groups[i] for i in perm], width=width, depth=1, classes=4)
        chan = np.concatenate([np.arange(i * width, (i + 1) * width) for i in perm])
        shared = ConvWeights(Tensor(w.shared_conv.kernel.data[:, chan]), w.shared_conv.bias)
        final = ConvWeights(Tensor(w.final_conv.kernel.data[:, chan]), w.final_conv.bias)
        w_p = type(w)([w.pipelines[i] for i in perm], shared, [w.private_convs[i] for i in perm], final)
        out = fusion_forward([inputs[i] for i in perm], cfg_p, w_p).probs.data
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-14)

    def test_group_mismatch(self):
        cfg = FusionModelConfig(groups=[["a"], ["b", "c"]], width=2, depth=1, classes=3)
        rng = np.random.default_rng(4)
        w = init_fusion(cfg, rng)
        with pytest.raises(ValueError):
            fusion_forward([Tensor(np.zeros((1, 1, 8, 8)))], cfg, w)
        with pytest.raises(ValueError, match="bands"):
            fusion_forward([Tensor(np.zeros((1, 1, 8, 8))), Tensor(np.zeros((1, 1, 8, 8)))], cfg, w)
        with pytest.raises(ValueError, match="aligned"):
            fusion_forward([Tensor(np.zeros((1, 1, 8, 8))), Tensor(np.zeros((1, 2, 4, 4)))], cfg, w)

    def test_wiring_zero_shallow_and_shared(self):
        cfg = FusionModelConfig(groups=[["a"], ["b", "c"]], width=4, depth=1, classes=3)
        rng = np.random.default_rng(5)
        w = init_fusion(cfg, rng)
        for p in w.pipelines:
            p.stem = ConvWeights.zeros(p.stem.kernel.shape[1], 4, 3)
        w.shared_conv = ConvWeights.zeros(8, 4, 1)
        for conv in w.private_convs:
            conv.bias.data[:] = rng.random(4)
        logits = fusion_forward(_fusion_inputs(cfg, rng, 8), cfg, w).final_logits.data
        np.testing.assert_allclose(logits, logits[:, :, :1, :1] * np.ones_like(logits), atol=0)


class TestLoss:
    def _out(self, groups=3, k=6, value=0.0, rng=None):
        shape = (1, k, 4, 4)
        mk = (lambda: Tensor(np.full(shape, value))) if rng is None else (lambda: Tensor(rng.standard_normal(shape)))
        final = mk()
        return FusionOutput(probs=final, final_logits=final, pipeline_logits=[mk() for _ in range(groups)])

    def test_lambda_zero_is_final_ce(self):
        rng = np.random.default_rng(0)
        out = self._out(rng=rng)
        labels = rng.integers(0, 6, (1, 4, 4))
        assert total_loss(out, labels, 0).item() == masked_softmax_cross_entropy(out.final_logits, labels)[0].item()

    def test_uniform_closed_form(self):
        loss = total_loss(self._out(), np.zeros((1, 4, 4), int), 0.3).item()
        assert loss == pytest.approx((1 + 0.3 * 3) * math.log(6), rel=1e-12)
        assert loss == pytest.approx(3.4043, abs=1e-4)

    def test_all_ignored(self):
        with pytest.raises(ValueError):
            total_loss(self._out(), np.full((1, 4, 4), 255), 0.3)

    def test_monotone_in_lambda(self):
        rng = np.random.default_rng(1)
        out = self._out(rng=rng)
        labels = rng.integers(0, 6, (1, 4, 4))
        values = [total_loss(out, labels, lam).item() for lam in (0, 0.1, 0.3, 1.0, 2.5)]
        assert all(b > a for a, b in zip(values, values[1:]))
