"""Configuration files, the train / infer / eval drivers and the command line."""

import json

import numpy as np
import pytest
import yaml

from conftest import tiny_config
from pyramid_pose import cli
from pyramid_pose import tensor as T
from pyramid_pose.checkpoint import CheckpointError
from pyramid_pose.config import ConfigError, RunConfig
from pyramid_pose.evaluation import RESULT_COLUMNS, as_detections, ground_truth, read_results, write_results
from pyramid_pose.geometry import Intrinsics, Pose, project
from pyramid_pose.infer import DetectionRecord, detect, unoccluded, visible_model_points
from pyramid_pose.metrics import evaluate
from pyramid_pose.selftest import format_results, run_selftest
from pyramid_pose.train import build_network, load_dataset, load_network, mask_targets, save_network, train


class TestConfig:
    def test_paper_defaults(self):
        cfg = RunConfig()
        assert (cfg.optim.lr, cfg.optim.batch_size, cfg.optim.epochs) == (1e-5, 8, 200)
        assert (cfg.optim.plateau_factor, cfg.optim.plateau_patience) == (0.1, 2)
        assert not cfg.optim.freeze_backbone
        assert (cfg.loss.weights.correspondence, cfg.loss.weights.location, cfg.loss.weights.mask) == (0.125, 1.0, 0.1)
        assert cfg.loss.correspondence.delta == 0.8 and cfg.model.heads.l2_lambda == 0.001
        assert (cfg.model.heads.location_width, cfg.model.heads.correspondence_width) == (256, 512)
        assert cfg.infer.ransac.iterations == 300 and cfg.infer.score_threshold == 0.5
        assert cfg.eval.threshold_fraction == 0.10

    def test_file_roundtrip(self, tmp_path, tiny):
        tiny.augmentation = tiny.augmentation.with_chance(0.25)
        tiny.model.pyramid.mode = "fpn"
        tiny.save(tmp_path / "c.yaml")
        assert RunConfig.load(tmp_path / "c.yaml") == tiny

    def test_partial_file_keeps_defaults(self, tmp_path):
        (tmp_path / "c.yaml").write_text("seed: 5\noptim:\n  lr: 0.01\n")
        cfg = RunConfig.load(tmp_path / "c.yaml")
        assert cfg.seed == 5 and cfg.optim.lr == 0.01 and cfg.optim.batch_size == 8

    @pytest.mark.parametrize("text", ["optim:\n  nope: 1\n", "- 1\n- 2\n", "optim: [\n", "optim:\n  lr: -1\n"])
    def test_invalid_files(self, tmp_path, text):
        (tmp_path / "c.yaml").write_text(text)
        with pytest.raises((ConfigError, ValueError)):
            RunConfig.load(tmp_path / "c.yaml")


class TestTrain:
    def test_smoke(self, tiny, tmp_path):
        res = train(tiny, log_path=tmp_path / "log.jsonl")
        assert np.isfinite(res.final_loss) and res.steps == 2
        assert (tmp_path / "model.ckpt").exists()
        lines = [json.loads(x) for x in (tmp_path / "log.jsonl").read_text().splitlines()]
        epoch = [x for x in lines if x["kind"] == "epoch"]
        assert len(epoch) == 1
        assert {"epoch", "L_corr", "L_loc", "L_mask", "l2", "total"} <= set(epoch[0])

    def test_deterministic(self, tmp_path):
        a = train(tiny_config(tmp_path / "a", epochs=2))
        b = train(tiny_config(tmp_path / "b", epochs=2))
        assert [h["total"] for h in a.history] == [h["total"] for h in b.history]
        na, _ = load_network(tmp_path / "a" / "model.ckpt")
        nb, _ = load_network(tmp_path / "b" / "model.ckpt")
        assert all(np.array_equal(x, nb.state_dict()[k]) for k, x in na.state_dict().items())

    def test_loss_decreases(self, tmp_path):
        cfg = tiny_config(tmp_path, epochs=8)
        cfg.augment = False
        res = train(cfg)
        assert np.mean([h["total"] for h in res.history[-4:]]) < np.mean([h["total"] for h in res.history[:4]])

    def test_max_steps_and_freeze(self, tiny):
        tiny.optim.epochs = 5
        tiny.optim.max_steps = 3
        tiny.optim.freeze_backbone = True
        start = build_network(tiny).backbone.state_dict()
        res = train(tiny)
        assert res.steps == 3
        assert all(np.array_equal(v, res.network.backbone.state_dict()[k]) for k, v in start.items())

    def test_class_out_of_range(self, tiny):
        tiny.model.heads.num_classes = 1
        with pytest.raises(ValueError, match="class id 2"):
            train(tiny)

    def test_unwritable_checkpoint(self, tiny, tmp_path):
        (tmp_path / "blocker").write_text("")
        tiny.checkpoint = str(tmp_path / "blocker" / "model.ckpt")
        with pytest.raises(OSError):
            train(tiny)

    def test_mask_targets(self, scenes):
        s = scenes[0]
        m = mask_targets(s, 2)
        assert m.shape == (2, 24, 32)
        o = s.objects[0]
        cells = o.mask.reshape(24, 8, 32, 8).mean(axis=(1, 3)) >= 0.5
        assert np.array_equal(m[o.class_id - 1] > 0, cells)


class TestCheckpoint:
    def test_corrupt_file(self, tiny, tmp_path):
        (tmp_path / "model.ckpt").write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError):
            load_network(tmp_path / "model.ckpt")

    def test_truncated_file(self, tiny, tmp_path):
        save_network(tmp_path / "model.ckpt", build_network(tiny), tiny)
        data = (tmp_path / "model.ckpt").read_bytes()
        (tmp_path / "model.ckpt").write_bytes(data[: len(data) // 2])
        with pytest.raises(CheckpointError):
            load_network(tmp_path / "model.ckpt")

    def test_config_mismatch(self, tiny, tmp_path):
        save_network(tmp_path / "model.ckpt", build_network(tiny), tiny)
        other = tiny_config(tmp_path)
        other.model.pyramid.width = 16
        with pytest.raises(CheckpointError, match="differs"):
            load_network(tmp_path / "model.ckpt", other)

    def test_roundtrip(self, tiny, tmp_path):
        net = build_network(tiny)
        save_network(tmp_path / "model.ckpt", net, tiny)
        back, cfg = load_network(tmp_path / "model.ckpt")
        assert cfg == tiny
        assert all(np.array_equal(v, back.state_dict()[k]) for k, v in net.state_dict().items())


class TestInfer:
    def test_zero_network_detects_nothing(self, tiny, scenes, mesh_map):
        net = build_network(tiny)
        for p in net.parameters():
            p.data[...] = 0
        assert detect(net, scenes, mesh_map, tiny) == []

    def test_visible_points_face_camera(self, mesh_map):
        mesh = mesh_map[1]
        pose = Pose(np.eye(3), np.array([0.0, 0.0, 1000.0]))
        pts = visible_model_points(mesh, pose, 300)
        assert len(pts) == 300
        assert np.allclose(pts[:, 2], mesh.extent_min[2])

    def test_unoccluded_drops_points_behind_nearer_surfaces(self, mesh_map):
        mesh = mesh_map[1]
        K = Intrinsics(500.0, 500.0, 320.0, 240.0)
        pose = Pose(np.eye(3), np.array([0.0, 0.0, 1000.0]))
        pts = visible_model_points(mesh, pose, 400)
        depth = np.full((480, 640), 1000.0 + mesh.extent_min[2])
        depth[:, :320] = 500.0          # an occluder over the left half
        depth[:240, 320:] = 0.0         # no depth reading in the top right
        u, v = np.round(project(pts, pose, K)).T
        want = (u >= 320) & (v >= 240)
        assert 0 < want.sum() < len(pts)
        assert np.array_equal(unoccluded(pts, pose, depth, K, 10.0), want)

    def test_unoccluded_margin(self, mesh_map):
        mesh = mesh_map[1]
        K = Intrinsics(500.0, 500.0, 320.0, 240.0)
        pose = Pose(np.eye(3), np.array([0.0, 0.0, 1000.0]))
        pts = visible_model_points(mesh, pose, 50)
        front = 1000.0 + mesh.extent_min[2]
        assert unoccluded(pts, pose, np.full((480, 640), front - 9.0), K, 10.0).all()
        assert not unoccluded(pts, pose, np.full((480, 640), front - 11.0), K, 10.0).any()
        assert unoccluded(np.zeros((0, 3)), pose, np.ones((480, 640)), K, 10.0).shape == (0,)

    def test_records_above_threshold(self, tiny, scenes, mesh_map):
        net = build_network(tiny)
        net.location.predict.bias.data[...] = 5.0
        recs = detect(net, scenes[:1], mesh_map, tiny)
        assert recs and all(r.score > 0.5 and r.time_ms > 0 and r.pose.is_valid() for r in recs)


class TestEvaluation:
    def _oracle_records(self, samples):
        return [DetectionRecord(s.image_id, o.class_id, 0.9, o.corners[None], o.pose, time_ms=3.0,
                                scene_id=s.scene_id) for s in samples for o in s.objects]

    def test_perfect_oracle(self, scenes, mesh_map):
        rep = evaluate(as_detections(self._oracle_records(scenes)), ground_truth(scenes), mesh_map)
        assert rep.mean_recall == 1.0

    def test_result_file(self, tmp_path, scenes):
        recs = self._oracle_records(scenes)
        write_results(tmp_path / "r.csv", recs)
        assert (tmp_path / "r.csv").read_text().splitlines()[0] == ",".join(RESULT_COLUMNS)
        rows = read_results(tmp_path / "r.csv")
        assert len(rows) == len(recs)
        for row, r in zip(rows, recs):
            assert len(row["R"]) == 9 and len(row["t"]) == 3
            assert np.array_equal(np.reshape(row["R"], (3, 3)), r.pose.R) and row["time"] == 0.003


class TestSelftest:
    def test_passes(self):
        results = run_selftest()
        assert all(r.passed for r in results), format_results(results)

    def test_broken_op_fails(self, monkeypatch):
        real = T.sigmoid

        def broken(x):
            out = real(x)
            return T.custom_op(out.data, (x,), lambda g: x.accumulate(g))

        monkeypatch.setattr(T, "sigmoid", broken)
        results = run_selftest([("op gradients", __import__("pyramid_pose.selftest").selftest.check_op_gradients)])
        assert not results[0].passed and "FAIL" in format_results(results)


class TestCommandLine:
    def _write(self, tmp_path, cfg):
        cfg.save(tmp_path / "run.yaml")
        return ["--config", str(tmp_path / "run.yaml")]

    def test_train_infer_eval(self, tmp_path, tiny, capsys):
        args = self._write(tmp_path, tiny)
        assert cli.main(["train", *args]) == 0
        out = tmp_path / "out"
        assert (out / "config.yaml").exists() and (out / "train_summary.json").exists()
        assert cli.main(["infer", *args]) == 0
        assert isinstance(json.loads((out / "detections.json").read_text()), list)
        assert cli.main(["eval", *args, "--icp", "on"]) == 0
        assert "Avg." in capsys.readouterr().out
        assert (out / "report.json").exists() and (out / "results.csv").exists()

    def test_flag_overrides(self, tmp_path, tiny):
        args = cli._parser().parse_args(["train", *self._write(tmp_path, tiny), "--seed", "9", "--aggregation",
                                         "none", "--icp", "on", "--out", str(tmp_path / "o"),
                                         "--checkpoint", str(tmp_path / "c.ckpt")])
        cfg = cli.resolve_config(args)
        assert cfg.seed == 9 and cfg.model.pyramid.mode == "none" and cfg.infer.use_icp
        assert cfg.out_dir == str(tmp_path / "o") and cfg.checkpoint == str(tmp_path / "c.ckpt")

    def test_bad_config_exit_code(self, tmp_path, capsys):
        (tmp_path / "bad.yaml").write_text("optim:\n  nope: 3\n")
        assert cli.main(["train", "--config", str(tmp_path / "bad.yaml")]) == 2
        assert "error" in capsys.readouterr().err

    def test_missing_checkpoint_exit_code(self, tmp_path, tiny):
        assert cli.main(["infer", *self._write(tmp_path, tiny), "--checkpoint", str(tmp_path / "none.ckpt")]) == 2

    def test_selftest_command(self, capsys):
        assert cli.main(["selftest"]) == 0
        assert "6/6 checks passed" in capsys.readouterr().out

    def test_unknown_command(self):
        with pytest.raises(SystemExit):
            cli.main(["fly"])
