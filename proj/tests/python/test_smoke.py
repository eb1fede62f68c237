import math

import numpy as np
import pytest

import chanssl


def test_iou_and_transforms():
    a = chanssl.Box3D(0, 0, 0, 1, 1, 1, 0)
    b = chanssl.Box3D(0, 0, 0, 1, 1, 1, math.pi / 4)
    assert chanssl.iou_bev(a, a) == 1.0
    assert chanssl.iou_bev(a, b) == pytest.approx(1 / math.sqrt(2), abs=1e-6)

    t = chanssl.Transform(flip_y=True, theta=0.4, s=1.05)
    back = chanssl.apply_box(chanssl.invert(t), chanssl.apply_box(t, b))
    assert back.to_tuple() == pytest.approx(b.to_tuple(), abs=1e-9)

    pts = np.array([[1.0, 2.0, 0.5, 0.3], [-1.0, 0.0, 1.0, 0.9]])
    moved = chanssl.apply_points(chanssl.invert(t), chanssl.apply_points(t, pts))
    assert np.allclose(moved, pts, atol=1e-9)


def test_consistency_thresholds_and_weights():
    box = chanssl.Box3D(1, 2, 0.8, 1.6, 1.5, 3.9, 0.2)
    assert chanssl.channel_iou_consistency([box, box, box]) == 1.0
    scores, count = chanssl.hssda_iou_consistency([box] * 4, [box] * 5)
    assert scores == [1.0] * 4 and count == 20

    low, high = chanssl.dual_thresholds([0.1, 0.12, 0.5, 0.52, 0.9, 0.92])
    assert (low, high) == pytest.approx((0.31, 0.71), abs=1e-12)
    level, weight = chanssl.stratify(0.8, 0.7, 0.5, [0.3] * 3, [0.9] * 3)
    assert level == "ambiguous" and weight == pytest.approx(0.56)

    assert chanssl.ap_recall_grid([True], 2) == 0.5
    assert chanssl.ap_recall_grid([], 0) is None


def test_data_roundtrips():
    scene = chanssl.synth_scene(4, "000004")
    cloud = scene["cloud"]
    assert cloud.shape[1] == 4
    assert np.array_equal(chanssl.decode_bin_cloud(chanssl.encode_bin_cloud(cloud)), cloud)
    with pytest.raises(chanssl.IoError):
        chanssl.decode_bin_cloud(b"\0" * 17)
    labeled, unlabeled = chanssl.split_sample(200, 0.05, 1)
    assert len(labeled) == 10 and len(unlabeled) == 190


def test_detect_runs_on_a_scene():
    scene = chanssl.synth_scene(2)
    dets = chanssl.detect(scene["cloud"], chanssl.DetectorParams())
    assert dets
    assert all(len(d["channel_boxes"]) == 3 for d in dets)
    assert all(0.0 <= d["confidence"] <= 1.0 for d in dets)


def test_pipeline(tmp_path):
    cfg = chanssl.RunConfig.parse(
        "\n".join(
            [
                "seed = 5",
                f"data_root = {tmp_path / 'data'}",
                "n_train = 12",
                "n_val = 4",
                "label_fraction = 0.25",
                "pretrain_epochs = 3",
                "ssl_epochs = 1",
            ]
        )
    )
    chanssl.gen_data(cfg)
    cfg.out_dir = str(tmp_path / "pre")
    chanssl.pretrain(cfg)
    params = chanssl.load_params(str(tmp_path / "pre" / "params.bin"))
    assert len(params.values) == chanssl.DetectorParams.size

    cfg.params = str(tmp_path / "pre" / "params.bin")
    cfg.out_dir = str(tmp_path / "ssl")
    chanssl.ssl_train(cfg)
    chanssl.report(str(tmp_path / "ssl"), svg=False)
    assert (tmp_path / "ssl" / "report" / "losses.csv").exists()

    cfg.out_dir = str(tmp_path / "eval")
    assert chanssl.evaluate(cfg, "oracle")["mAP"] == 1.0
    assert chanssl.evaluate(cfg, "empty")["mAP"] == 0.0


def test_errors_map_to_python_exceptions(tmp_path):
    with pytest.raises(chanssl.ConfigError):
        chanssl.RunConfig.parse("no_such_key = 1")
    cfg = chanssl.RunConfig.parse(f"seed = 1\ndata_root = {tmp_path / 'missing'}")
    cfg.out_dir = str(tmp_path / "out")
    with pytest.raises(chanssl.IoError):
        chanssl.evaluate(cfg, "oracle")
    bad = tmp_path / "bad.bin"
    chanssl.save_params(chanssl.DetectorParams(), str(bad))
    data = bytearray(bad.read_bytes())
    data[8] = 7
    bad.write_bytes(bytes(data))
    with pytest.raises(chanssl.ModelCompatibilityError):
        chanssl.load_params(str(bad))
