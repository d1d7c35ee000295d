import json
import shutil

import numpy as np
import pytest

from cabbage_pheno.config import Config, ConfigError, load_config, parse_config
from cabbage_pheno.phenometrics import HeadGeometry, LeafGeometry, PlantRecord
from cabbage_pheno.pipeline import CSV_COLUMNS, FrameResult, RunReport, emit_outputs, plants_csv, plants_json, run
from cabbage_pheno.raster import load_segmentation
from cabbage_pheno.stereo import CameraRig
from cabbage_pheno.synth import cabbage_scene, scene_truth, write_scene

W = 320
F = 380.0


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    rig = CameraRig(focal_px=F, cx=(W - 1) / 2, cy=(W - 1) / 2)
    spec = cabbage_scene(rig, W, W, seed=0, n_frames=4)
    out = tmp_path_factory.mktemp("scene")
    written = write_scene(spec, out, reference_only=False)
    return spec, written


@pytest.fixture(scope="module")
def config():
    return Config(focal_px=F, d_max=32)


@pytest.fixture(scope="module")
def report(scene, config):
    return run(config, scene[1]["frames"], scene[1]["masks"])


def _record(n_leaves=3):
    head = HeadGeometry((10.0, 12.0), 300, 9.77, 60.0, 68.0, 8.0, 2144.66)
    rec = PlantRecord(1, head)
    for i in range(n_leaves):
        rec.leaves.append(LeafGeometry(i, (1.0, 2.0), (0.0, 0.0, 76.0), (20.0, 5.0, 70.0), 21.5, 190.0))
    return rec


class TestRun:
    def test_all_frames_processed(self, report):
        assert report.ok
        assert [f.frame_id for f in report.frames] == ["frame_000", "frame_001", "frame_002", "frame_003"]
        assert report.frames[1].status == "ok"
        assert report.frames[0].status == "ok: single-pair mode"

    def test_accuracy(self, report, scene):
        truth = scene_truth(scene[0])[0]
        for frame in report.frames:
            rec = frame.records[0]
            assert rec.head.diameter_cm == pytest.approx(truth.head.diameter_cm, rel=0.05)
            assert rec.head.volume_cm3 == pytest.approx(truth.head.volume_cm3, rel=0.15)
            assert len(rec.leaves) == 3

    def test_every_plant_accounted(self, report, scene):
        for frame, mask in zip(report.frames, scene[1]["masks"]):
            plants = {i.instance_id for i in load_segmentation(mask).instances if i.cls.value == "plant"}
            seen = [r.plant_id for r in frame.records] + list(frame.plant_errors)
            assert sorted(seen) == sorted(plants)

    def test_rerun_byte_identical(self, report, scene, config, tmp_path):
        again = run(config, scene[1]["frames"], scene[1]["masks"])
        assert plants_csv(again) == plants_csv(report)
        assert plants_json(again) == plants_json(report)
        emit_outputs(report, tmp_path / "a")
        emit_outputs(again, tmp_path / "b")
        for name in ("plants.csv", "plants.json", "depth_frame_001.png", "disparity_frame_001.png"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_idempotent_output_dir(self, report, tmp_path):
        emit_outputs(report, tmp_path)
        first = {p.name: p.read_bytes() for p in tmp_path.iterdir()}
        emit_outputs(report, tmp_path)
        assert first == {p.name: p.read_bytes() for p in tmp_path.iterdir()}

    def test_two_frames(self, scene, config):
        frames = scene[1]["frames"][1:3]
        masks = [m for m in scene[1]["masks"] if "frame_001" in m]
        rep = run(config, frames, masks)
        assert any("single-pair mode" in w for w in rep.warnings)
        assert rep.frames[0].status == "ok: single-pair mode"
        assert len(rep.frames[0].records) == 1

    def test_workers_identical(self, report, scene, config):
        rep = run(config.updated(workers=2), scene[1]["frames"], scene[1]["masks"])
        assert plants_csv(rep) == plants_csv(report)

    def test_crash_isolation(self, report, scene, config, tmp_path):
        frames, masks = [], []
        for p in scene[1]["frames"]:
            frames.append(shutil.copy(p, tmp_path))
        for m in scene[1]["masks"]:
            masks.append(shutil.copy(m, tmp_path))
        bad = tmp_path / "frame_001.json"
        bad.write_text('{"frame_id": "frame_001", "width": 320, "height": 320, "instances": [{"class": "leaf"')
        rep = run(config, frames, masks)
        assert not rep.ok
        by_id = {f.frame_id: f for f in rep.frames}
        assert by_id["frame_001"].status.startswith("failed")
        clean = {f.frame_id: f for f in report.frames}
        for fid in ("frame_000", "frame_002"):
            assert [r.to_dict() for r in by_id[fid].records] == [r.to_dict() for r in clean[fid].records]

    def test_empty_segmentation_skipped(self, scene, config, tmp_path):
        frames = [shutil.copy(p, tmp_path) for p in scene[1]["frames"][:3]]
        (tmp_path / "frame_001.json").write_text(
            json.dumps({"frame_id": "frame_001", "width": W, "height": W, "instances": []})
        )
        rep = run(config, frames, [tmp_path / "frame_001.json"])
        assert rep.ok
        assert rep.frames[0].status.startswith("skipped")
        assert any("empty segmentation" in w for w in rep.warnings)

    def test_mask_size_mismatch_fails_frame(self, scene, config, tmp_path):
        frames = [shutil.copy(p, tmp_path) for p in scene[1]["frames"][:3]]
        (tmp_path / "frame_001.json").write_text(
            json.dumps({"frame_id": "frame_001", "width": 10, "height": 10, "instances": []})
        )
        rep = run(config, frames, [tmp_path / "frame_001.json"])
        assert rep.frames[0].failed

    def test_unmatched_mask_warns(self, scene, config, tmp_path):
        stray = tmp_path / "elsewhere.json"
        stray.write_text("{}")
        rep = run(config, scene[1]["frames"][:2], [stray])
        assert rep.frames == []
        assert any("no matching frame" in w for w in rep.warnings)


class TestOutputs:
    def test_empty_report(self, tmp_path):
        emit_outputs(RunReport(), tmp_path)
        assert (tmp_path / "plants.csv").read_text() == ",".join(CSV_COLUMNS) + "\n"

    def test_one_plant_row(self, tmp_path):
        rep = RunReport([FrameResult("f7", records=[_record()])])
        emit_outputs(rep, tmp_path)
        lines = (tmp_path / "plants.csv").read_text().splitlines()
        assert len(lines) == 2
        row = lines[1].split(",")
        assert len(row) == 6
        assert row[:2] == ["f7", "1"] and float(row[2]) == 16.0 and row[4] == "3"
        assert float(row[5]) == pytest.approx(3 * 190.0 / 1e4)

    def test_json_leaves(self, tmp_path):
        rep = RunReport([FrameResult("f7", records=[_record(3)])])
        emit_outputs(rep, tmp_path)
        doc = json.loads((tmp_path / "plants.json").read_text())
        leaves = doc["frames"][0]["plants"][0]["leaves"]
        assert len(leaves) == 3
        for leaf in leaves:
            assert {"p", "q", "length_cm", "area_cm2"} <= set(leaf)

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError, match="file"):
            emit_outputs(RunReport(), blocker / "out")


class TestConfig:
    def test_defaults(self):
        c = Config()
        assert (c.height_cm, c.speed_cm_s, c.fps, c.leaf_coefficient) == (90.0, 100.0, 60.0, 8.3)
        assert c.rig((480, 640)).baseline_cm == pytest.approx(100 / 60)
        assert c.rig((480, 640)).cx == 319.5

    def test_parse(self):
        c = parse_config("# rig\nfocal_px = 700  # px\n\nd_max=64\ncx = auto\n")
        assert c.focal_px == 700.0 and c.d_max == 64 and c.cx is None

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown"):
            parse_config("colour = red")

    def test_out_of_range(self):
        with pytest.raises(ConfigError, match="paths"):
            parse_config("paths = 6")
        with pytest.raises(ConfigError, match="ratio"):
            Config(ratio=1.5)

    def test_bad_value(self):
        with pytest.raises(ConfigError, match="cannot parse"):
            parse_config("seed = abc")

    def test_bad_line(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_config("seed = 1\nnonsense\n")

    def test_overrides(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("seed = 4\n")
        c = load_config(path).updated(seed="9", ratio=0.6)
        assert c.seed == 9 and c.ratio == 0.6
        assert load_config(None) == Config()
