"""Focal, correspondence and total losses against independent scalar oracles."""

import math

import numpy as np
import pytest

from pyramid_pose.anchors import BOX_EDGES, AnchorSpec, assign_targets, generate_anchors
from pyramid_pose.backbone import BackboneConfig, PFPNConfig
from pyramid_pose.gradcheck import check_gradients
from pyramid_pose.heads import HeadConfig, ModelConfig, NetworkOutput, PoseNetwork
from pyramid_pose.losses import (CorrLossConfig, FocalConfig, LossWeights, corr_loss, correspondence_loss,
                                 focal_loss, location_loss, mask_loss, smooth_l1, total_loss)
from pyramid_pose.tensor import Tensor


def focal_oracle(p, y, alpha=0.25, gamma=2.0):
    p = min(max(p, 1e-7), 1 - 1e-7)
    if y == 1:
        return -alpha * (1 - p) ** gamma * math.log(p)
    return -(1 - alpha) * p ** gamma * math.log(1 - p)


def sl1(r, d):
    return 0.5 * r * r / d if abs(r) < d else abs(r) - 0.5 * d


def corr_oracle(pred, target, anchor, delta=0.8, edge_weight=1.0):
    point = sum(sl1(a - b, delta) for a, b in zip(pred, target)) / 16
    w, h = anchor[2] - anchor[0], anchor[3] - anchor[1]
    cp = [(pred[2 * k] * w, pred[2 * k + 1] * h) for k in range(8)]
    ct = [(target[2 * k] * w, target[2 * k + 1] * h) for k in range(8)]
    edge = 0.0
    for i, j in BOX_EDGES:
        lp = math.hypot(cp[j][0] - cp[i][0], cp[j][1] - cp[i][1])
        lt = math.hypot(ct[j][0] - ct[i][0], ct[j][1] - ct[i][1])
        edge += sl1(lp - lt, delta)
    return point + edge_weight * edge / 12


class TestFocal:
    def test_confident_correct_is_zero(self):
        assert focal_loss([1 - 1e-7], [1]) == pytest.approx(0.0, abs=1e-12)

    def test_half_probability_positive(self):
        assert focal_loss([0.5], [1]) == pytest.approx(0.25 * 0.25 * math.log(2), abs=1e-12)
        assert focal_loss([0.5], [1]) == pytest.approx(0.04332, abs=1e-5)

    def test_reduces_to_half_cross_entropy(self, rng):
        p = rng.uniform(0.01, 0.99, 50)
        y = (rng.random(50) > 0.5).astype(float)
        ce = -(y * np.log(p) + (1 - y) * np.log(1 - p)).sum()
        assert focal_loss(p, y, FocalConfig(alpha=0.5, gamma=0.0)) == pytest.approx(0.5 * ce)

    def test_matches_oracle(self, rng):
        p = rng.uniform(0, 1, 200)
        y = rng.integers(0, 2, 200)
        assert focal_loss(p, y) == pytest.approx(sum(focal_oracle(a, b) for a, b in zip(p, y)), rel=1e-12)

    def test_clamps_boundaries(self):
        assert np.isfinite(focal_loss([0.0, 1.0], [1, 0]))

    @pytest.mark.parametrize("kw", [{"alpha": 0.0}, {"alpha": 1.0}, {"gamma": -1.0}])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            FocalConfig(**kw)


class TestCorrespondence:
    ANCHOR = np.array([10.0, 20.0, 74.0, 52.0])

    def test_zero_when_equal(self, rng):
        t = rng.normal(size=16)
        assert correspondence_loss(t, t, self.ANCHOR) == 0.0

    def test_translation_has_no_edge_term(self, rng):
        t = rng.normal(size=16)
        p = t + np.tile([0.3, -0.2], 8)
        with_edges = correspondence_loss(p, t, self.ANCHOR)
        no_edges = correspondence_loss(p, t, self.ANCHOR, CorrLossConfig(edge_weight=0.0))
        assert with_edges == pytest.approx(no_edges, abs=1e-12) and no_edges > 0

    def test_matches_oracle(self, rng):
        for _ in range(50):
            t = rng.normal(size=16)
            p = t + rng.normal(scale=rng.choice([0.05, 0.5, 2.0]), size=16)
            assert correspondence_loss(p, t, self.ANCHOR) == pytest.approx(corr_oracle(p, t, self.ANCHOR), rel=1e-12)

    def test_smooth_l1_transition(self):
        val, der = smooth_l1(np.array([0.4, 0.8, -2.0]), 0.8)
        assert np.allclose(val, [0.1, 0.4, 1.6])
        assert np.allclose(der, [0.5, 1.0, -1.0])

    def test_invalid_delta(self):
        with pytest.raises(ValueError):
            CorrLossConfig(delta=0.0)

    def test_no_positives_contributes_zero(self, rng):
        anchors = generate_anchors((64, 64))
        asg = [assign_targets(anchors, [])]
        outs = [Tensor(rng.normal(size=(1, 144, g[0], g[1])), requires_grad=True) for g in anchors.grid]
        loss = corr_loss(outs, asg, anchors.boxes, CorrLossConfig())
        loss.backward()
        assert loss.item() == 0.0 and all(np.all(o.grad == 0) for o in outs)

    def test_average_over_positive_anchors(self, rng):
        anchors = generate_anchors((64, 64))
        corners = rng.uniform(10, 50, (8, 2))
        asg = assign_targets(anchors, [(1, np.array([8.0, 8.0, 50.0, 52.0]), corners)])
        outs = [Tensor(rng.normal(size=(1, 144, g[0], g[1]))) for g in anchors.grid]
        from pyramid_pose.anchors import flatten_head_output
        flat = np.concatenate([flatten_head_output(o.data, 16) for o in outs], axis=1)[0]
        idx = np.nonzero(asg.positive)[0]
        want = np.mean([corr_oracle(flat[i], asg.corr_targets[i], anchors.boxes[i]) for i in idx])
        got = corr_loss(outs, [asg], anchors.boxes, CorrLossConfig()).item()
        assert got == pytest.approx(want, rel=1e-10)


class TestLocationAndMask:
    def test_location_normalised_by_positives(self, rng):
        anchors = generate_anchors((64, 64))
        asg = assign_targets(anchors, [(1, anchors.boxes[30].copy(), np.zeros((8, 2)))])
        scores = [Tensor(rng.uniform(0.01, 0.99, (1, 9, g[0], g[1]))) for g in anchors.grid]
        from pyramid_pose.anchors import flatten_head_output
        p = np.concatenate([flatten_head_output(s.data, 1) for s in scores], axis=1)[0, :, 0]
        y = (asg.labels == 1).astype(int)
        want = sum(focal_oracle(a, b) for a, b in zip(p, y)) / max(1, asg.num_positive)
        assert location_loss(scores, [asg], 1, FocalConfig()).item() == pytest.approx(want, rel=1e-10)

    def test_mask_normalised_by_cells(self, rng):
        p = rng.uniform(0.01, 0.99, (2, 1, 3, 4))
        y = (rng.random((2, 1, 3, 4)) > 0.5).astype(float)
        want = sum(focal_oracle(a, b) for a, b in zip(p.ravel(), y.ravel())) / 12 / 2
        assert mask_loss(Tensor(p), y, FocalConfig()).item() == pytest.approx(want, rel=1e-10)

    def test_mask_shape_mismatch(self):
        with pytest.raises(ValueError):
            mask_loss(Tensor(np.full((1, 1, 2, 2), 0.5)), np.zeros((1, 1, 3, 3)), FocalConfig())


def tiny_cfg():
    return ModelConfig(backbone=BackboneConfig(widths=(4, 4, 4), convs_per_stage=1, stem_widths=(2, 2, 2)),
                       pyramid=PFPNConfig(width=8), heads=HeadConfig(4, 4, 4, num_classes=1, anchors_per_location=1),
                       anchors=AnchorSpec(scales=(1.0,), ratios=(1.0,)))


@pytest.fixture
def tiny_problem(rng):
    cfg = tiny_cfg()
    net = PoseNetwork(cfg, seed=3).astype(np.float64)
    # at initialisation all eight predicted corners nearly coincide, where the
    # edge lengths have unbounded curvature; start from a box-shaped prediction
    k = np.arange(8)
    # zero biases put whole receptive fields of dead units exactly on the ReLU
    # kink, where backprop and central differences legitimately disagree
    for name, p in net.named_parameters():
        if name.endswith("bias"):
            p.data += rng.uniform(-0.05, 0.05, p.shape)
    net.correspondence.predict.bias.data[:] = np.stack(
        [0.1 + 0.6 * (k & 1) + 0.25 * (k >> 2), 0.1 + 0.6 * (k >> 1 & 1) + 0.2 * (k >> 2)], axis=1).ravel()
    anchors = generate_anchors((32, 32), cfg.anchors)
    box = anchors.boxes[5].copy() + np.array([1.0, -1.0, 2.0, 1.0])
    # the larger boxes give the coarsest levels positives so every
    # parameter sees a gradient well above finite-difference noise
    objs = [(1, box, rng.uniform(0, 32, (8, 2))),
            (1, np.array([-20.0, -22.0, 42.0, 40.0]), rng.uniform(-20, 40, (8, 2))),
            (1, np.array([-40.0, -44.0, 80.0, 78.0]), rng.uniform(-40, 80, (8, 2)))]
    asg = [assign_targets(anchors, objs)]
    assert all(asg[0].positive[s].any() for s in anchors.level_slices())
    mask = (rng.random((1, 1, 4, 4)) > 0.5).astype(float)
    image = Tensor(rng.uniform(-1, 1, (1, 3, 32, 32)))
    return net, anchors, asg, mask, image


class TestTotalLoss:
    def test_breakdown_sums_to_total(self, tiny_problem):
        net, anchors, asg, mask, image = tiny_problem
        _, parts = total_loss(net(image), asg, mask, anchors.boxes, 1, net.l2_weights())
        assert parts.total == pytest.approx(parts.correspondence + parts.location + parts.mask + parts.l2)

    def test_weights_applied(self, tiny_problem):
        net, anchors, asg, mask, image = tiny_problem
        out = net(image)
        _, one = total_loss(out, asg, mask, anchors.boxes, 1, [], weights=LossWeights(1.0, 1.0, 1.0))
        _, dflt = total_loss(out, asg, mask, anchors.boxes, 1, [])
        assert dflt.correspondence == pytest.approx(0.125 * one.correspondence)
        assert dflt.mask == pytest.approx(0.1 * one.mask)

    def test_l2_term(self, tiny_problem):
        net, anchors, asg, mask, image = tiny_problem
        _, parts = total_loss(net(image), asg, mask, anchors.boxes, 1, net.l2_weights(), 0.001)
        want = 0.001 * sum(float(np.sum(w.data ** 2)) for w in net.l2_weights())
        assert parts.l2 == pytest.approx(want)

    def test_zero_weight_removes_gradient(self, tiny_problem):
        net, anchors, asg, mask, image = tiny_problem
        loss, _ = total_loss(net(image), asg, mask, anchors.boxes, 1, [], weights=LossWeights(0.0, 1.0, 1.0))
        loss.backward()
        assert np.all(net.correspondence.predict.weight.grad == 0)

    def test_perfect_predictions_leave_l2_only(self, rng):
        anchors = generate_anchors((32, 32), AnchorSpec(scales=(1.0,), ratios=(1.0,)))
        box = anchors.boxes[5].copy()
        asg = assign_targets(anchors, [(1, box, rng.uniform(0, 32, (8, 2)))])
        from pyramid_pose.anchors import unflatten_head_grad
        loc, corr, start = [], [], 0
        for g in anchors.grid:
            n = g[0] * g[1]
            lab = (asg.labels[start:start + n] == 1).astype(float)
            loc.append(Tensor(unflatten_head_grad(np.clip(lab, 1e-7, 1 - 1e-7)[None, :, None], (1, 1, *g), 1)))
            corr.append(Tensor(unflatten_head_grad(asg.corr_targets[None, start:start + n], (1, 16, *g), 16)))
            start += n
        mask = np.zeros((1, 1, 4, 4))
        out = NetworkOutput(loc, corr, Tensor(np.full((1, 1, 4, 4), 1e-7)), None)
        w = [Tensor(np.ones((2, 2)))]
        _, parts = total_loss(out, [asg], mask, anchors.boxes, 1, w, 0.001)
        assert parts.correspondence == 0.0
        assert parts.location < 1e-9 and parts.mask < 1e-9
        assert parts.total == pytest.approx(0.004, abs=1e-8)

    def test_invariant_to_object_order(self, rng):
        anchors = generate_anchors((64, 64))
        objs = [(1, np.array([4.0, 4.0, 36.0, 40.0]), rng.uniform(0, 64, (8, 2))),
                (2, np.array([30.0, 20.0, 62.0, 60.0]), rng.uniform(0, 64, (8, 2)))]
        outs = NetworkOutput([Tensor(rng.uniform(0.05, 0.95, (1, 18, g[0], g[1]))) for g in anchors.grid],
                             [Tensor(rng.normal(size=(1, 144, g[0], g[1]))) for g in anchors.grid],
                             Tensor(rng.uniform(0.05, 0.95, (1, 2, 8, 8))), None)
        mask = np.zeros((1, 2, 8, 8))
        a = total_loss(outs, [assign_targets(anchors, objs)], mask, anchors.boxes, 2, [])[1].total
        b = total_loss(outs, [assign_targets(anchors, objs[::-1])], mask, anchors.boxes, 2, [])[1].total
        assert a == pytest.approx(b, rel=1e-12)

    def test_gradient_every_parameter(self, tiny_problem):
        net, anchors, asg, mask, image = tiny_problem
        params = net.parameters()

        def build(_):
            return total_loss(net(image), asg, mask, anchors.boxes, 1, net.l2_weights())[0]

        # the P5 gradients are small next to the loss value, so the step is the
        # usual cube root of machine epsilon rather than 1e-6, which is
        # dominated by cancellation error there
        assert check_gradients(build, params, eps=1e-5, max_probes=12) < 1e-4
