"""Backbone, aggregation graphs, heads and the assembled network."""

import numpy as np
import pytest

from pyramid_pose.anchors import AnchorSpec
from pyramid_pose.backbone import (GRAPHS, Aggregator, Backbone, BackboneConfig, PFPNConfig,
                                   ancestors, model_summary)
from pyramid_pose.heads import HeadConfig, ModelConfig, PoseNetwork
from pyramid_pose.tensor import ShapeError, Tensor


def tiny_model(mode="pfpn", width=8, classes=2):
    return ModelConfig(pyramid=PFPNConfig(width=width, mode=mode),
                       heads=HeadConfig(8, 8, 8, num_classes=classes),
                       backbone=BackboneConfig(widths=(8, 8, 8), stem_widths=(4, 4, 4)))


def zeros_pyramid(width, mode, rng, hw=(24, 32)):
    agg = Aggregator((8, 16, 32), PFPNConfig(width, mode), rng)
    h, w = hw
    c3 = Tensor(np.zeros((1, 8, h, w)))
    c4 = Tensor(np.zeros((1, 16, h // 2, w // 2)))
    c5 = Tensor(np.zeros((1, 32, h // 4, w // 4)))
    return agg, agg(c3, c4, c5)


class TestGraphTopology:
    @pytest.mark.parametrize("mode", ["pfpn", "fpn"])
    def test_add_nodes_have_two_inputs(self, mode):
        adds = [n for n in GRAPHS[mode] if n.is_add]
        assert adds and all(len(n.inputs) == 2 for n in adds)

    def test_p4_depends_on_every_backbone_level(self):
        assert {"C3", "C4", "C5"} <= ancestors(GRAPHS["pfpn"], "P4")

    def test_c5_only_lateral_before_p5(self):
        g = {n.name: n for n in GRAPHS["pfpn"]}
        users = [n for n in GRAPHS["pfpn"] if "C5" in n.inputs]
        assert [n.name for n in users] == ["L5"] and g["L5"].kind == "lateral"
        assert "L5" in g["P5"].inputs

    def test_skip_connections_on_p3_and_p4(self):
        g = {n.name: n for n in GRAPHS["pfpn"]}
        assert "L3" in g["P3"].inputs and "L4" in g["P4"].inputs

    def test_none_mode_has_no_fusion(self):
        assert all(n.kind == "lateral" for n in GRAPHS["none"])
        assert ancestors(GRAPHS["none"], "P4") == {"C4"}

    def test_every_input_defined_before_use(self):
        for mode, graph in GRAPHS.items():
            known = {"C3", "C4", "C5"}
            for n in graph:
                assert set(n.inputs) <= known, (mode, n.name)
                known.add(n.name)


class TestAggregator:
    @pytest.mark.parametrize("mode", ["pfpn", "fpn", "none"])
    def test_zero_features_propagate_to_biases_only(self, rng, mode):
        agg, pyr = zeros_pyramid(8, mode, rng)
        for conv in agg.convs:
            conv.bias.data[:] = 0
        pyr = agg(Tensor(np.zeros((1, 8, 24, 32))), Tensor(np.zeros((1, 16, 12, 16))),
                  Tensor(np.zeros((1, 32, 6, 8))))
        assert all(np.all(p.data == 0) for p in pyr.levels())

    @pytest.mark.parametrize("mode", ["pfpn", "fpn", "none"])
    def test_output_shapes(self, rng, mode):
        _, pyr = zeros_pyramid(32, mode, rng)
        assert [p.shape for p in pyr.levels()] == [(1, 32, 24, 32), (1, 32, 12, 16), (1, 32, 6, 8)]

    def test_stride_mismatch(self, rng):
        agg = Aggregator((8, 16, 32), PFPNConfig(8), rng)
        with pytest.raises(ShapeError, match="stride"):
            agg(Tensor(np.zeros((1, 8, 24, 32))), Tensor(np.zeros((1, 16, 10, 16))), Tensor(np.zeros((1, 32, 5, 8))))

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            PFPNConfig(mode="bifpn")

    def test_parameters_named_after_nodes(self, rng):
        agg = Aggregator((8, 16, 32), PFPNConfig(8), rng)
        names = {n.split(".")[0] for n, _ in agg.named_parameters()}
        assert names == {"L3", "L4", "L5", "T4", "T3", "P3", "B4", "P4", "P5"}

    def test_summary_lists_nodes(self, rng):
        agg = Aggregator((8, 16, 32), PFPNConfig(8), rng)
        text = model_summary(agg)
        assert "P4" in text and "fuse" in text and str(agg.num_parameters()) in text


class TestBackbone:
    def test_strides(self, rng):
        bb = Backbone(BackboneConfig(widths=(4, 6, 8), stem_widths=(2, 2, 2)), rng)
        c3, c4, c5 = bb(Tensor(np.zeros((1, 3, 64, 96), np.float32)))
        assert c3.shape == (1, 4, 8, 12) and c4.shape == (1, 6, 4, 6) and c5.shape == (1, 8, 2, 3)

    def test_rejects_non_multiple_of_32(self, rng):
        bb = Backbone(BackboneConfig(widths=(4, 6, 8), stem_widths=(2, 2, 2)), rng)
        with pytest.raises(ShapeError, match="width"):
            bb(Tensor(np.zeros((1, 3, 64, 80), np.float32)))


class TestPoseNetwork:
    def test_output_shapes(self):
        net = PoseNetwork(tiny_model(), seed=0)
        out = net(Tensor(np.zeros((2, 3, 64, 96), np.float32)))
        assert [o.shape for o in out.location] == [(2, 18, 8, 12), (2, 18, 4, 6), (2, 18, 2, 3)]
        assert [o.shape for o in out.correspondence] == [(2, 144, 8, 12), (2, 144, 4, 6), (2, 144, 2, 3)]
        assert out.mask.shape == (2, 2, 8, 12)

    def test_initial_scores_near_prior(self, rng):
        net = PoseNetwork(tiny_model(), seed=0)
        out = net(Tensor(rng.uniform(-1, 1, (1, 3, 64, 64)).astype(np.float32)))
        assert np.mean(np.concatenate([o.data.ravel() for o in out.location])) == pytest.approx(0.01, abs=0.005)

    def test_same_seed_same_weights(self):
        a, b = PoseNetwork(tiny_model(), 5), PoseNetwork(tiny_model(), 5)
        assert all(np.array_equal(a.state_dict()[k], b.state_dict()[k]) for k in a.state_dict())

    def test_l2_weights_are_correspondence_tower(self):
        net = PoseNetwork(tiny_model(), 0)
        assert len(net.l2_weights()) == 4
        assert all(w is c.weight for w, c in zip(net.l2_weights(), net.correspondence.tower))

    def test_mask_grid_640x480(self):
        cfg = tiny_model(classes=1)
        out = PoseNetwork(cfg, 0)(Tensor(np.zeros((1, 3, 480, 640), np.float32)))
        assert out.mask.shape[2:] == (60, 80)

    def test_anchor_count_must_match(self):
        cfg = tiny_model()
        cfg.anchors = AnchorSpec(ratios=(1.0,))
        with pytest.raises(ValueError):
            PoseNetwork(cfg, 0)

    def test_head_width_mismatch(self):
        net = PoseNetwork(tiny_model(), 0)
        with pytest.raises(ShapeError):
            net.location.forward_level(Tensor(np.zeros((1, 5, 4, 4), np.float32)))
