"""Occupancy network tests.

The staged-loss oracle recomputes the estimated bits outside the autodiff
tape (plain numpy on the probability values); finite differences provide
the gradient oracle for the full context + prediction composite.
"""
import numpy as np
import pytest

from linr import autodiff as ad
from linr.autodiff import BCE_EPS
from linr.errors import (
    MissingGroundTruthError,
    ScaleMismatchError,
    ShapeError,
)
from linr.network import ModelConfig, NUM_STAGES, OccupancyModel
from linr.voxel import SparseVoxelSet, build_pyramid


def toy_pyramid(rng, n=60, hi=64, num_scales=None):
    pc = SparseVoxelSet(rng.integers(0, hi, size=(n, 3)))
    return build_pyramid(pc, stop_at=8, num_scales=num_scales)


def bce_oracle(probs, bits):
    p = np.clip(np.asarray(probs, dtype=np.float64).reshape(-1), BCE_EPS, 1 - BCE_EPS)
    t = np.asarray(bits, dtype=np.float64).reshape(-1)
    return float(-(t * np.log2(p) + (1 - t) * np.log2(1 - p)).sum())


class TestScaleContext:
    def test_zeroed_mlp_outputs_bias(self):
        model = OccupancyModel(ModelConfig(num_scales=2), seed=0)
        mlp = model.context_mlps[1]
        for layer in (mlp.inner, mlp.outer):
            layer.weight.data[...] = 0
        mlp.inner.bias.data[...] = 0
        mlp.outer.bias.data[...] = np.arange(24, dtype=np.float32)
        coarse = SparseVoxelSet(np.array([[3, 3, 3]]))
        out = model.scale_context(coarse, 1)
        np.testing.assert_array_equal(out.data, np.arange(24, dtype=np.float32)[None])

    def test_distinct_scales_differ(self):
        model = OccupancyModel(ModelConfig(num_scales=3), seed=1)
        coarse = SparseVoxelSet(np.array([[1, 1, 1], [5, 1, 2]]))
        a = model.scale_context(coarse, 0).data
        b = model.scale_context(coarse, 2).data
        assert not np.array_equal(model.embedding.table.data[0],
                                  model.embedding.table.data[2])
        assert not np.array_equal(a, b)

    def test_scale_out_of_range(self):
        model = OccupancyModel(ModelConfig(num_scales=2), seed=2)
        coarse = SparseVoxelSet(np.array([[0, 0, 0]]))
        with pytest.raises(IndexError):
            model.scale_context(coarse, 2)


class TestStagedPrediction:
    def test_zero_model_loses_eight_bits_per_parent(self):
        rng = np.random.default_rng(3)
        pyr = toy_pyramid(rng, n=40)
        model = OccupancyModel(ModelConfig(num_scales=pyr.num_scales), seed=3)
        model.zero_()
        coarse = pyr.levels[1]
        ctx = model.scale_context(coarse, 0)
        probs, loss = model.predict_children(ctx, coarse, pyr.masks(0))
        for p in probs:
            assert np.all(p.data == 0.5)
        assert loss.item() == 8.0 * len(coarse)

    def test_stage_one_sees_single_slot_column(self):
        model = OccupancyModel(ModelConfig(num_scales=1), seed=4)
        coarse = SparseVoxelSet(np.array([[0, 0, 0]]))
        masks = np.array([0b00000001], dtype=np.uint8)
        ctx = model.scale_context(coarse, 0)
        g = model.global_features(ctx, coarse)
        slot0 = ((masks >> 0) & 1).astype(np.float32)
        assert np.stack([slot0], axis=1).tolist() == [[1.0]]
        p1 = model.stage_probability(1, g, [slot0], coarse)
        assert p1.data.shape == (1, 1)
        with pytest.raises(ShapeError):
            model.stage_probability(2, g, [slot0], coarse)

    def test_missing_ground_truth(self):
        model = OccupancyModel(ModelConfig(num_scales=1), seed=5)
        coarse = SparseVoxelSet(np.array([[0, 0, 0]]))
        ctx = model.scale_context(coarse, 0)
        with pytest.raises(MissingGroundTruthError):
            model.predict_children(ctx, coarse, None)

    def test_stage_zero_ignores_targets(self):
        rng = np.random.default_rng(6)
        pyr = toy_pyramid(rng, n=50)
        model = OccupancyModel(ModelConfig(num_scales=pyr.num_scales), seed=6)
        coarse = pyr.levels[1]
        ctx = model.scale_context(coarse, 0)
        with_truth, _ = model.predict_children(ctx, coarse, pyr.masks(0))
        ctx2 = model.scale_context(coarse, 0)
        all_set = np.full(len(coarse), 0xFF, dtype=np.uint8)
        with_fake, _ = model.predict_children(ctx2, coarse, all_set)
        np.testing.assert_array_equal(with_truth[0].data, with_fake[0].data)
        assert not np.array_equal(with_truth[7].data, with_fake[7].data)

    def test_predict_stage_matches_staged_loop(self):
        rng = np.random.default_rng(7)
        pyr = toy_pyramid(rng, n=50)
        model = OccupancyModel(ModelConfig(num_scales=pyr.num_scales), seed=7)
        coarse = pyr.levels[1]
        masks = pyr.masks(0)
        ctx = model.scale_context(coarse, 0)
        probs, _ = model.predict_children(ctx, coarse, masks)
        slots = []
        for j in range(NUM_STAGES):
            ctx_j = model.scale_context(coarse, 0)
            single = model.predict_stage(j, ctx_j, coarse, slots)
            np.testing.assert_array_equal(single.data, probs[j].data)
            slots.append(((masks >> j) & 1).astype(np.float32))

    def test_row_permutation_invariance(self):
        rng = np.random.default_rng(8)
        pts = rng.integers(0, 32, size=(40, 3))
        pc_sorted = SparseVoxelSet(pts)
        pc_shuffled = SparseVoxelSet(pts[rng.permutation(len(pts))])
        assert pc_sorted == pc_shuffled
        model = OccupancyModel(ModelConfig(num_scales=1), seed=8)
        a = model.predict_stage(0, model.scale_context(pc_sorted, 0), pc_sorted, [])
        b = model.predict_stage(0, model.scale_context(pc_shuffled, 0), pc_shuffled, [])
        np.testing.assert_array_equal(a.data, b.data)

    def test_loss_matches_out_of_tape_oracle(self):
        rng = np.random.default_rng(9)
        pyr = toy_pyramid(rng, n=80)
        model = OccupancyModel(ModelConfig(num_scales=pyr.num_scales), seed=9,
                               dtype=np.float64)
        expect = 0.0
        for i in range(pyr.num_scales - 1, -1, -1):
            coarse = pyr.levels[i + 1]
            masks = pyr.masks(i)
            ctx = model.scale_context(coarse, i)
            probs, _ = model.predict_children(ctx, coarse, masks)
            for j in range(NUM_STAGES):
                expect += bce_oracle(probs[j].data, (masks >> j) & 1)
        got = model.frame_loss(pyr).item()
        assert got == pytest.approx(expect, rel=1e-12)


class TestFrameLoss:
    def test_zero_model_baseline(self):
        rng = np.random.default_rng(10)
        pyr = toy_pyramid(rng, n=70)
        model = OccupancyModel(ModelConfig(num_scales=pyr.num_scales), seed=10)
        model.zero_()
        parents = sum(len(pyr.levels[i + 1]) for i in range(pyr.num_scales))
        assert model.frame_loss(pyr).item() == 8.0 * parents

    def test_l2_of_zero_params_is_zero(self):
        rng = np.random.default_rng(11)
        pyr = toy_pyramid(rng, n=30)
        model = OccupancyModel(ModelConfig(num_scales=pyr.num_scales), seed=11)
        model.zero_()
        plain = model.frame_loss(pyr).item()
        with_l2 = model.frame_loss(pyr, l2_coeff=0.5).item()
        assert with_l2 == plain

    def test_l2_term_value(self):
        rng = np.random.default_rng(12)
        pyr = toy_pyramid(rng, n=30)
        model = OccupancyModel(ModelConfig(num_scales=pyr.num_scales), seed=12,
                               dtype=np.float64)
        lam = 1e-3
        diff = model.frame_loss(pyr, l2_coeff=lam).item() - model.frame_loss(pyr).item()
        assert diff == pytest.approx(lam * float((model.flatten() ** 2).sum()), rel=1e-9)

    def test_scale_mismatch(self):
        rng = np.random.default_rng(13)
        pyr = toy_pyramid(rng, n=30)
        model = OccupancyModel(ModelConfig(num_scales=pyr.num_scales + 1), seed=13)
        with pytest.raises(ScaleMismatchError):
            model.frame_loss(pyr)

    def test_loss_finite_even_with_huge_weights(self):
        rng = np.random.default_rng(14)
        pyr = toy_pyramid(rng, n=30)
        model = OccupancyModel(ModelConfig(num_scales=pyr.num_scales), seed=14)
        model.load_flat(np.full(model.num_parameters(), 50.0))
        assert np.isfinite(model.frame_loss(pyr).item())

    def test_training_decreases_loss(self):
        rng = np.random.default_rng(15)
        pc = SparseVoxelSet(rng.integers(0, 256, size=(200, 3)))
        pyr = build_pyramid(pc, stop_at=64)
        model = OccupancyModel(ModelConfig(num_scales=pyr.num_scales), seed=15)
        opt = ad.Adam(model.parameters())
        history = []
        for _ in range(50):
            opt.zero_grad()
            loss = model.frame_loss(pyr, l2_coeff=1e-4)
            history.append(loss.item())
            loss.backward()
            opt.step()
        final = model.frame_loss(pyr, l2_coeff=1e-4).item()
        assert final < history[0]
        assert final < 0.9 * history[0]


class TestParameterFlattening:
    def test_roundtrip(self):
        model = OccupancyModel(ModelConfig(num_scales=4), seed=16)
        rng = np.random.default_rng(16)
        vec = rng.normal(size=model.num_parameters()).astype(np.float32)
        model.load_flat(vec)
        assert np.array_equal(model.flatten(), vec)

    def test_order_is_lexicographic(self):
        model = OccupancyModel(ModelConfig(num_scales=2), seed=17)
        names = model._flat_order
        assert names == sorted(names)

    def test_count_mismatch(self):
        model = OccupancyModel(ModelConfig(num_scales=2), seed=18)
        with pytest.raises(ShapeError):
            model.load_flat(np.zeros(model.num_parameters() + 1))

    def test_same_seed_same_init(self):
        a = OccupancyModel(ModelConfig(num_scales=3), seed=19)
        b = OccupancyModel(ModelConfig(num_scales=3), seed=19)
        assert np.array_equal(a.flatten(), b.flatten())
        c = OccupancyModel(ModelConfig(num_scales=3), seed=20)
        assert not np.array_equal(a.flatten(), c.flatten())


class TestGradientIntegrity:
    def test_full_composite_finite_difference(self):
        rng = np.random.default_rng(21)
        pyr = toy_pyramid(rng, n=25, hi=16)
        model = OccupancyModel(ModelConfig(num_scales=pyr.num_scales), seed=21,
                               dtype=np.float64)
        # Probe at a generic parameter point.  Fresh init has exact-zero
        # biases, which parks binary slot inputs exactly on the ReLU kink
        # where one-sided derivatives differ by construction.
        model.load_flat(rng.normal(scale=0.4, size=model.num_parameters()))

        def loss():
            return model.frame_loss(pyr, l2_coeff=1e-4)

        for p in model.parameters():
            p.grad[...] = 0
        loss().backward()
        analytic = {p.name: p.grad.copy() for p in model.parameters()}

        # The loss is O(10^3) bits, so central differences carry about
        # eps * |loss| / h of cancellation noise; entries below the 1e-2
        # floor are held to the matching absolute bound instead.
        h = 1e-5
        checked = 0
        for p in model.parameters():
            flat = p.data.reshape(-1)
            count = min(3, flat.size)
            for i in rng.choice(flat.size, size=count, replace=False):
                orig = flat[i]
                flat[i] = orig + h
                plus = loss().item()
                flat[i] = orig - h
                minus = loss().item()
                flat[i] = orig
                fd = (plus - minus) / (2 * h)
                an = analytic[p.name].reshape(-1)[i]
                denom = max(abs(fd), abs(an), 1e-2)
                assert abs(fd - an) / denom < 1e-4, (p.name, i, an, fd)
                checked += 1
        assert checked > 100
