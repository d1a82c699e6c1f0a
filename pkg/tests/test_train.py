import csv
import json

import numpy as np
import pytest

from rigforge import synthdata as sd
from rigforge import train as tr
from rigforge.errors import (
    BadConfig,
    CheckpointMismatch,
    DatasetMissing,
    IoError,
)
from rigforge.network import ModelConfig

TINY_MODEL = ModelConfig(
    width=12, blocks=2, global_width=6, global_feature=8, facs_dim=12, k_eigen=32
)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("train_ds")
    cfg = sd.DatasetConfig(
        rigged=2, unrigged=2, test_rigged=1, test_unrigged=1,
        interp_factor=1, levels=(1,), sup_res=(48, 48),
        flow_noise_px=0.0, seed=13,
    )
    sd.generate_dataset(cfg, root)
    return root


def run_config(dataset_root, out_dir, **kw):
    defaults = dict(
        dataset_root=str(dataset_root), out_dir=str(out_dir), seed=0,
        model=TINY_MODEL,
        stage1=tr.StageConfig(epochs=2, max_steps=8, lr=1e-3),
        stage2=tr.StageConfig(epochs=2, max_steps=8, lr=1e-3),
    )
    defaults.update(kw)
    return tr.RunConfig(**defaults)


class TestLrSchedule:
    def test_step_zero_is_zero(self):
        assert tr.lr_schedule(0, 100, 1e-4, 10) == 0.0

    def test_warmup_end_is_exact_lr(self):
        assert tr.lr_schedule(10, 100, 1e-4, 10) == pytest.approx(1e-4, abs=0)

    def test_end_of_training_near_zero(self):
        assert tr.lr_schedule(100, 100, 1e-4, 10) < 1e-8 * 1e-4

    def test_warmup_monotone(self):
        vals = [tr.lr_schedule(s, 100, 1e-4, 20) for s in range(21)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))

    def test_cosine_decreasing_after_warmup(self):
        vals = [tr.lr_schedule(s, 100, 1e-4, 10) for s in range(10, 101)]
        assert all(b <= a + 1e-18 for a, b in zip(vals, vals[1:]))

    def test_restarts(self):
        # two cycles: the rate comes back up after the first cycle ends
        v_end_c1 = tr.lr_schedule(54, 100, 1e-4, 10, cycles=2)
        v_start_c2 = tr.lr_schedule(56, 100, 1e-4, 10, cycles=2)
        assert v_start_c2 > v_end_c1


class TestConfigValidation:
    def test_zero_epochs_rejected(self):
        with pytest.raises(BadConfig):
            tr.StageConfig(epochs=0)

    def test_negative_weights_rejected(self):
        with pytest.raises(BadConfig):
            tr.StageConfig(weights=(1.0, -0.5, 1.0, 1.0))

    def test_unknown_ablation_rejected(self, dataset, tmp_path):
        with pytest.raises(BadConfig):
            run_config(dataset, tmp_path, ablation="no-such-thing")

    def test_json_roundtrip(self, dataset, tmp_path):
        raw = {
            "dataset_root": str(dataset),
            "out_dir": str(tmp_path),
            "seed": 3,
            "ablation": "no-flow",
            "model": {"width": 12, "blocks": 2, "global_width": 6,
                      "global_feature": 8, "facs_dim": 12, "k_eigen": 32},
            "stage1": {"epochs": 1, "lr": 0.001},
        }
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps(raw))
        cfg = tr.RunConfig.from_json(p)
        assert cfg.ablation == "no-flow"
        assert cfg.model.width == 12
        assert cfg.stage1.lr == 0.001
        assert cfg.stage2.epochs == 4  # default


class TestStage1:
    def test_smoke_loss_decreases(self, dataset, tmp_path):
        # 1 head, 2 poses, 50 steps: windowed mean loss drops >= 1% per window
        import shutil

        root = tmp_path / "ds2"
        shutil.copytree(dataset, root)
        manifest = json.loads((root / "manifest.json").read_text())
        manifest["pose_names"] = manifest["pose_names"][:2]
        manifest["facs_vectors"] = manifest["facs_vectors"][:2]
        manifest["heads"] = [
            h for h in manifest["heads"]
            if h["id"] == "r000" or h["split"] == "test"
        ]
        (root / "manifest.json").write_text(json.dumps(manifest))
        cfg = run_config(
            root, tmp_path / "run",
            stage1=tr.StageConfig(epochs=30, max_steps=50, lr=2e-3, warmup_frac=0.0),
        )
        tr.train_stage1(cfg)
        rows = list(csv.DictReader(open(tmp_path / "run" / "loss_stage1.csv")))
        losses = np.array([float(r["total"]) for r in rows])
        assert len(losses) == 50
        windows = losses.reshape(5, 10).mean(axis=1)
        for a, b in zip(windows, windows[1:]):
            assert b < 0.99 * a

    def test_no2d_has_no_stage1(self, dataset, tmp_path):
        cfg = run_config(dataset, tmp_path, ablation="no-2d")
        with pytest.raises(BadConfig):
            tr.train_stage1(cfg)

    def test_loss_curve_one_row_per_step(self, dataset, tmp_path):
        cfg = run_config(dataset, tmp_path / "run")
        tr.train_stage1(cfg)
        rows = list(csv.DictReader(open(tmp_path / "run" / "loss_stage1.csv")))
        assert len(rows) == 8
        assert [int(r["step"]) for r in rows] == list(range(8))

    def test_audit_never_reads_sequestered(self, dataset, tmp_path):
        cfg = run_config(dataset, tmp_path / "run")
        tr.train_stage1(cfg)
        audit = (tmp_path / "run" / "audit_stage1.log").read_text()
        assert "eval_gt" not in audit


class TestStage2:
    def test_requires_rigged_samples(self, dataset, tmp_path):
        import shutil

        root = tmp_path / "ds3"
        shutil.copytree(dataset, root)
        manifest = json.loads((root / "manifest.json").read_text())
        for h in manifest["heads"]:
            if h["role"] == "rigged":
                h["split"] = "test"
        (root / "manifest.json").write_text(json.dumps(manifest))
        cfg = run_config(root, tmp_path / "run")
        with pytest.raises(DatasetMissing):
            tr.train_stage2(cfg, None)

    def test_checkpoint_config_mismatch(self, dataset, tmp_path):
        cfg_a = run_config(dataset, tmp_path / "a")
        ck = tr.train_stage1(cfg_a)
        other_model = ModelConfig(
            width=16, blocks=2, global_width=6, global_feature=8,
            facs_dim=12, k_eigen=32,
        )
        cfg_b = run_config(dataset, tmp_path / "b", model=other_model)
        with pytest.raises(CheckpointMismatch):
            tr.train_stage2(cfg_b, ck)

    def test_stage2_only_reads_rigged_sup2d(self, dataset, tmp_path):
        cfg = run_config(dataset, tmp_path / "run")
        tr.train_stage2(cfg, None)
        audit = (tmp_path / "run" / "audit_stage2.log").read_text().splitlines()
        sup_lines = [l for l in audit if "sup2d" in l]
        assert sup_lines, "stage 2 uses 2D supervision"
        assert all(l.startswith("heads/r") for l in sup_lines)
        assert not any("eval_gt" in l for l in audit)

    def test_firewall_blocks_eval_gt_in_training_mode(self, dataset):
        store = tr.DataStore(dataset, k_eigen=16, training=True)
        entry = [h for h in store.entries(role="unrigged")][0]
        with pytest.raises(DatasetMissing):
            store._touch(store.root / "eval_gt" / entry["id"] / "rig" / "poses.json")


class TestEvaluate:
    def test_zero_prediction_baseline_matches_gt_magnitude(self, dataset, tmp_path):
        # untrained model predicts zero displacement everywhere, so the MAE
        # must equal the mean ground-truth displacement norm
        from rigforge.network import init_model, save_model

        params = init_model(TINY_MODEL, seed=0)
        ck = tmp_path / "zero.rfck"
        save_model(ck, params)
        report = tr.evaluate_checkpoint(ck, dataset, split="test")
        store = tr.DataStore(dataset, TINY_MODEL.k_eigen, training=False)
        mags = []
        for entry in store.entries(split="test"):
            s = store.load_sample(entry, with_rig=False)
            gt = store.load_eval_rig_fields(entry, s.mesh.n_vertices)
            mags.append(np.linalg.norm(gt, axis=2).ravel())
        expected = np.concatenate(mags).mean() * 1000.0
        assert report["mae_mm"] == pytest.approx(expected, rel=1e-12)

    def test_report_schema_and_roundtrip(self, dataset, tmp_path):
        from rigforge.network import init_model, save_model
        import jsonschema

        params = init_model(TINY_MODEL, seed=0)
        ck = tmp_path / "m.rfck"
        save_model(ck, params)
        out = tmp_path / "report.json"
        report = tr.evaluate_checkpoint(ck, dataset, split="test", report_path=out)
        loaded = json.loads(out.read_text())
        jsonschema.validate(loaded, tr.EVAL_REPORT_SCHEMA)
        assert loaded == json.loads(json.dumps(report))

    def test_missing_split_rejected(self, dataset, tmp_path):
        from rigforge.network import init_model, save_model

        params = init_model(TINY_MODEL, seed=0)
        ck = tmp_path / "m.rfck"
        save_model(ck, params)
        with pytest.raises(DatasetMissing):
            tr.evaluate_checkpoint(ck, dataset, split="nope")


class TestInfer:
    def test_rig_roundtrip_and_determinism(self, dataset, tmp_path):
        from rigforge.mesh import icosphere, save_obj
        from rigforge.network import init_model, save_model
        from rigforge.rig import load_rig

        params = init_model(TINY_MODEL, seed=0)
        ck = tmp_path / "m.rfck"
        save_model(ck, params)
        mesh_path = tmp_path / "sphere.obj"
        save_obj(icosphere(1), mesh_path)
        out_a = tmp_path / "a.rfrig"
        out_b = tmp_path / "b.rfrig"
        timing = tr.infer_rig(ck, mesh_path, out_a)
        tr.infer_rig(ck, mesh_path, out_b)
        assert timing["poses"] == 13  # neutral + facs_dim
        rig = load_rig(out_a)
        assert rig.n_poses == 13
        assert out_a.read_bytes() == out_b.read_bytes()

    def test_missing_mesh_error_carries_path(self, dataset, tmp_path):
        from rigforge.network import init_model, save_model

        params = init_model(TINY_MODEL, seed=0)
        ck = tmp_path / "m.rfck"
        save_model(ck, params)
        with pytest.raises(IoError, match="nowhere.obj"):
            tr.infer_rig(ck, tmp_path / "nowhere.obj", tmp_path / "o.rfrig")


class TestCli:
    def test_gen_precompute_pose_commands(self, tmp_path):
        from rigforge.cli import main as cli_main
        from rigforge.mesh import icosphere, load_obj, save_obj

        mesh_path = tmp_path / "m.obj"
        save_obj(icosphere(1), mesh_path)
        assert cli_main(["precompute", "--mesh", str(mesh_path), "--k", "8"]) == 0
        assert (tmp_path / "m_k8.rfop").exists()

        # build a rig from the analytic generator and pose it
        head = sd.make_head(sd.HeadParams(level=1, eye_level=0))
        from rigforge.rig import save_rig

        rig_path = tmp_path / "r.rfrig"
        save_rig(head.rig, rig_path)
        wpath = tmp_path / "w.json"
        wpath.write_text(json.dumps({head.rig.pose_names[1]: 1.0}))
        out = tmp_path / "posed.obj"
        assert cli_main([
            "pose", "--rig", str(rig_path), "--weights", str(wpath),
            "--out", str(out),
        ]) == 0
        posed = load_obj(out)
        expected = head.rig.neutral.vertices.astype(np.float32) + \
            head.rig.displacements[1].astype(np.float32)
        np.testing.assert_allclose(posed.vertices, expected, atol=1e-6)
