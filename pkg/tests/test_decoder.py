"""Entity decoder: sampling, attention stages, and whole-stack behavior."""

import numpy as np
import pytest

from relattn.data import EntityDetection
from relattn.decoder import (
    DecoderStack,
    DecoderState,
    GcaLayer,
    RcaLayer,
    initial_points,
    snap_scale,
)
from relattn.features import build_positional_embeddings
from relattn.params import ParameterRegistry
from relattn.tensor import Tensor


def detections():
    return [
        EntityDetection((0.10, 0.20, 0.30, 0.50), 1, 0),
        EntityDetection((0.40, 0.10, 0.90, 0.60), 3, 2),
        EntityDetection((0.55, 0.60, 0.75, 0.95), 2, 1),
    ]


def volume_and_pe(rng, d=8, H=6, W=6):
    vol = Tensor(rng.standard_normal((5, H, W, d)))
    pe = build_positional_embeddings(H, W, d, Tensor(np.zeros((5, d))))
    return vol, pe


def make_stack(d=8, K=2, layers=2, seed=70):
    reg = ParameterRegistry()
    rng = np.random.default_rng(seed)
    stack = DecoderStack(reg, d=d, K=K, layers=layers, h_G=2, d_G=4,
                         h_R=2, d_R=4, sampler_lr_mult=0.1, rng=rng)
    C = 3
    sub = Tensor(rng.normal(0, 0.5, (C, K, d)), requires_grad=True)
    obj = Tensor(rng.normal(0, 0.5, (C, K, d)), requires_grad=True)
    return reg, stack, sub, obj


class TestInitialPoints:
    def test_centers_and_scale_mapping(self):
        pts = initial_points(detections())
        np.testing.assert_allclose(pts[0], [0.20, 0.35, 0.25])
        np.testing.assert_allclose(pts[1], [0.65, 0.35, 0.75])
        np.testing.assert_allclose(pts[2], [0.65, 0.775, 0.50])

    def test_snap_scale_rounds_to_levels(self):
        pts = Tensor(np.array([[0.3, 0.7, 0.13], [0.2, 0.1, 0.95]]))
        snapped = snap_scale(pts).data
        np.testing.assert_allclose(snapped[:, :2], pts.data[:, :2])
        np.testing.assert_allclose(snapped[:, 2], [0.25, 1.0])

    def test_snap_scale_blocks_scale_gradient(self):
        from relattn.tensor import tsum
        pts = Tensor(np.array([[0.3, 0.7, 0.13]]), requires_grad=True)
        tsum(snap_scale(pts)).backward()
        np.testing.assert_allclose(pts.grad, [[1.0, 1.0, 0.0]])


class TestGca:
    def test_weights_sum_to_one_over_samples(self):
        rng = np.random.default_rng(71)
        reg = ParameterRegistry()
        layer = GcaLayer(reg, "g", d=8, heads=2, head_dim=4, rng=rng)
        n, K, m = 3, 2, 5
        state = Tensor(rng.standard_normal((n, K, 8)))
        box = Tensor(rng.standard_normal((n, 8)))
        feats = Tensor(rng.standard_normal((n, K, m, 8)))
        pe = Tensor(rng.standard_normal((n, K, m, 8)))
        out, w = layer(state, box, feats, pe, return_weights=True)
        assert out.shape == (n, K, 8)
        assert w.shape == (n, K, 2, m)
        np.testing.assert_allclose(w.data.sum(axis=-1),
                                   np.ones((n, K, 2)), atol=1e-12)

    def test_deterministic_and_state_sensitive(self):
        rng = np.random.default_rng(72)
        reg = ParameterRegistry()
        layer = GcaLayer(reg, "g", d=8, heads=2, head_dim=4, rng=rng)
        base = rng.standard_normal((2, 2, 8))
        box = Tensor(np.zeros((2, 8)))
        feats = Tensor(rng.standard_normal((2, 2, 4, 8)))
        pe = Tensor(np.zeros((2, 2, 4, 8)))
        a = layer(Tensor(base), box, feats, pe).data
        b = layer(Tensor(base), box, feats, pe).data
        np.testing.assert_array_equal(a, b)
        c = layer(Tensor(base + 0.5), box, feats, pe).data
        assert not np.allclose(a, c)


class TestRca:
    def make(self, n=3, K=2, d=8, seed=73):
        rng = np.random.default_rng(seed)
        reg = ParameterRegistry()
        layer = RcaLayer(reg, "r", d=d, heads=2, head_dim=4, rng=rng)
        state = DecoderState(
            sub=Tensor(rng.standard_normal((n, K, d))),
            obj=Tensor(rng.standard_normal((n, K, d))),
            sub_box=Tensor(rng.standard_normal((n, d))),
            obj_box=Tensor(rng.standard_normal((n, d))),
        )
        return layer, state

    def test_attention_normalizations(self):
        """Key-softmax rows and query-softmax columns each sum to one."""
        layer, state = self.make()
        _, (over_keys, over_queries) = layer(state, return_weights=True)
        N = 3 * 2
        np.testing.assert_allclose(over_keys.data.sum(axis=-1),
                                   np.ones((2, N)), atol=1e-12)
        np.testing.assert_allclose(over_queries.data.sum(axis=1),
                                   np.ones((2, N)), atol=1e-12)

    def test_both_sides_update(self):
        layer, state = self.make()
        out = layer(state)
        assert out.sub.shape == state.sub.shape
        assert out.obj.shape == state.obj.shape
        assert not np.allclose(out.sub.data, state.sub.data)
        assert not np.allclose(out.obj.data, state.obj.data)

    def test_information_crosses_roles(self):
        """Perturbing the object states changes the subject update."""
        layer, state = self.make()
        a = layer(state).sub.data
        bumped = DecoderState(sub=state.sub,
                              obj=Tensor(state.obj.data + 0.5),
                              sub_box=state.sub_box, obj_box=state.obj_box)
        b = layer(bumped).sub.data
        assert not np.allclose(a, b)


class TestDecode:
    def test_infer_is_deterministic(self):
        rng = np.random.default_rng(74)
        _, stack, sub, obj = make_stack()
        vol, pe = volume_and_pe(rng)
        a = stack.decode(detections(), vol, pe, sub, obj, mode="infer",
                         range_mult=1, step_mult=1)
        b = stack.decode(detections(), vol, pe, sub, obj, mode="infer",
                         range_mult=1, step_mult=1)
        np.testing.assert_array_equal(a.state.sub.data, b.state.sub.data)
        np.testing.assert_array_equal(a.state.obj.data, b.state.obj.data)

    def test_train_mode_requires_rng_and_m(self):
        rng = np.random.default_rng(75)
        _, stack, sub, obj = make_stack()
        vol, pe = volume_and_pe(rng)
        with pytest.raises(ValueError):
            stack.decode(detections(), vol, pe, sub, obj, mode="train")
        with pytest.raises(ValueError):
            stack.decode(detections(), vol, pe, sub, obj, mode="bogus")

    def test_permuting_entities_permutes_outputs(self):
        """The decoder treats entities as a set."""
        rng = np.random.default_rng(76)
        _, stack, sub, obj = make_stack()
        vol, pe = volume_and_pe(rng)
        dets = detections()
        perm = [2, 0, 1]
        a = stack.decode(dets, vol, pe, sub, obj, mode="infer",
                         range_mult=1, step_mult=1)
        b = stack.decode([dets[i] for i in perm], vol, pe, sub, obj,
                         mode="infer", range_mult=1, step_mult=1)
        np.testing.assert_allclose(b.state.sub.data, a.state.sub.data[perm],
                                   atol=1e-10)
        np.testing.assert_allclose(b.state.obj.data, a.state.obj.data[perm],
                                   atol=1e-10)

    def test_collected_points_stay_in_unit_cube(self):
        rng = np.random.default_rng(77)
        _, stack, sub, obj = make_stack(layers=2)
        vol, pe = volume_and_pe(rng)
        res = stack.decode(detections(), vol, pe, sub, obj, mode="train",
                           rng=np.random.default_rng(0), m=4,
                           collect_points=True)
        assert len(res.points_sub) == 2
        for pts in res.points_sub + res.points_obj:
            assert pts.shape == (3, 2, 4, 3)
            assert pts.min() >= 0.0 and pts.max() <= 1.0

    def test_mean_trajectory_accumulates_unclamped(self):
        """The recorded mean path is the running sum of offset means on top
        of the initial points, without any clamping."""
        rng = np.random.default_rng(78)
        _, stack, sub, obj = make_stack(layers=2)
        vol, pe = volume_and_pe(rng)
        res = stack.decode(detections(), vol, pe, sub, obj, mode="train",
                           rng=np.random.default_rng(1), m=3)
        p0 = initial_points(detections()).reshape(3, 1, 3)
        want = p0 + res.mu_sub[0].data
        np.testing.assert_allclose(res.mean_sub[0].data, want, atol=1e-12)
        want2 = want + res.mu_sub[1].data
        np.testing.assert_allclose(res.mean_sub[1].data, want2, atol=1e-12)

    def test_nearest_scale_option_changes_sampling(self):
        rng = np.random.default_rng(79)
        _, stack, sub, obj = make_stack()
        vol, pe = volume_and_pe(rng)
        tri = stack.decode(detections(), vol, pe, sub, obj, mode="infer",
                           range_mult=1, step_mult=1)
        near = stack.decode(detections(), vol, pe, sub, obj, mode="infer",
                            range_mult=1, step_mult=1,
                            scale_interpolation="nearest")
        assert not np.allclose(tri.state.sub.data, near.state.sub.data)
