import json
from dataclasses import replace

import numpy as np
import pytest

from bevdistill.checkpoint import Checkpoint, snapshot
from bevdistill.config import AblationFlags, ConfigError, LwdConfig, TrainConfig, config_from_json, load_config
from bevdistill.dataset import load_dataset, scene_targets
from bevdistill.gradcheck import format_report, run_gradcheck
from bevdistill.maps import export_maps, read_map_csv, read_pgm, to_pgm_bytes
from bevdistill.models import prepare_scene
from bevdistill.pointcloud import LabelSet, PointCloud
from bevdistill.train import (
    METRIC_COLUMNS,
    baseline_config,
    build_teacher,
    evaluate,
    point_accuracy,
    pretrain_teacher,
    train_student,
    write_metrics_csv,
)
from conftest import small_config

# ---------------------------------------------------------------- config


def test_default_config_values():
    cfg = TrainConfig().validate()
    assert (cfg.c_v, cfg.c_b, cfg.num_layers, cfg.vpd_layers) == (16, 16, 3, (2, 3))
    assert (cfg.lr, cfg.batch_size, cfg.epochs, cfg.temperature) == (0.001, 2, 10, 2.0)
    assert (cfg.lwd.k_rho * cfg.lwd.k_theta, cfg.lwd.m) == (24, 2)
    lw = cfg.loss_weights
    assert (lw.beta1, lw.beta2, lw.beta3) == (2.0, 2.0, 1.0)


def test_config_json_round_trip():
    cfg = small_config(seed=9)
    assert config_from_json(json.loads(cfg.dumps())) == cfg


def test_config_rejects_unknown_and_invalid_keys():
    with pytest.raises(ConfigError, match="bogus"):
        config_from_json({"bogus": 1})
    with pytest.raises(ConfigError, match="nested"):
        config_from_json({"lwd": {"nested": 1}})
    with pytest.raises(ConfigError, match="vpd_layers"):
        config_from_json({"vpd_layers": []})
    with pytest.raises(ConfigError):
        config_from_json({"optimizer": "rmsprop"})


def test_empty_vpd_layers_allowed_when_vpd_off():
    cfg = config_from_json({"vpd_layers": [], "ablation": {"vpd": False}})
    assert cfg.vpd_layers == ()


def test_load_config_seed_override(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"epochs": 2}))
    cfg = load_config(tmp_path / "c.json", seed=5)
    assert cfg.epochs == 2 and cfg.seed == 5


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_bytes_stable(tmp_path):
    cfg = small_config()
    teacher = build_teacher(cfg, 4)
    ckpt = Checkpoint("teacher", snapshot(teacher.named_parameters()), cfg.to_json(), {"k": 1}, 0, 4, [1.0] * 4)
    ckpt.save(tmp_path / "a.ckpt")
    again = Checkpoint.load(tmp_path / "a.ckpt")
    again.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert all(np.array_equal(ckpt.params[k], again.params[k]) for k in ckpt.params)


# ---------------------------------------------------------------- training


def test_teacher_zero_epochs_is_initialization(small_data):
    cfg, data = small_data
    ckpt = pretrain_teacher(replace(cfg, teacher_epochs=0), data)
    init = snapshot(build_teacher(cfg, data.num_classes).named_parameters())
    assert ckpt.params.keys() == init.keys()
    assert all(np.array_equal(ckpt.params[k], init[k]) for k in init)


def test_teacher_is_deterministic(small_data):
    cfg, data = small_data
    assert pretrain_teacher(cfg, data, steps=3).dumps() == pretrain_teacher(cfg, data, steps=3).dumps()


@pytest.fixture(scope="module")
def teacher(small_data):
    cfg, data = small_data
    return pretrain_teacher(replace(cfg, optimizer="adam", lr=0.01), data, steps=200)


def test_teacher_learns_separable_scenes(small_data, teacher):
    _, data = small_data
    assert point_accuracy(teacher, data.train) > 0.9
    assert evaluate(teacher, data.train).miou > 0.9


def test_student_log_satisfies_objective_arithmetic(small_data, teacher):
    cfg, data = small_data
    result = train_student(cfg, teacher, data)
    lw = cfg.loss_weights
    assert len(result.step_log) == 2
    for c in result.step_log:
        expected = c["wce"] + c["lovasz"] + lw.beta1 * c["vpd"] + lw.beta2 * c["lwd"] + lw.beta3 * c["logit"]
        assert abs(c["total"] - expected) < 1e-10
        assert c["vpd"] > 0 and c["lwd"] > 0 and c["logit"] > 0
    assert list(result.metrics[0]) == list(METRIC_COLUMNS)


def test_ablation_off_logs_zeros(small_data, teacher):
    cfg, data = small_data
    result = train_student(baseline_config(cfg), teacher, data)
    for c in result.step_log:
        assert c["vpd"] == 0.0 and c["lwd"] == 0.0 and c["logit"] == 0.0
        assert c["total"] == c["wce"] + c["lovasz"]


@pytest.mark.parametrize(
    "ablation, lwd, zeros",
    [
        (AblationFlags(logit_kd=False), LwdConfig(), {"logit"}),
        (AblationFlags(vpd=False), LwdConfig(), {"vpd"}),
        (AblationFlags(), LwdConfig(enabled=False), {"lwd"}),
    ],
)
def test_single_flag_zeroes_its_term(small_data, teacher, ablation, lwd, zeros):
    cfg, data = small_data
    result = train_student(replace(cfg, ablation=ablation, lwd=lwd), teacher, data)
    for term in ("vpd", "lwd", "logit"):
        values = [c[term] for c in result.step_log]
        assert all(v == 0.0 for v in values) if term in zeros else all(v > 0 for v in values)


def test_ablation_variants_run(small_data, teacher):
    cfg, data = small_data
    for flags in (
        AblationFlags(compression_mode="scatter_max"),
        AblationFlags(domain_transfer=False, cross_attention=False),
    ):
        result = train_student(replace(cfg, ablation=flags), teacher, data)
        assert all(np.isfinite(c["total"]) for c in result.step_log)


def test_student_is_reproducible(small_data, teacher, tmp_path):
    cfg, data = small_data
    a, b = train_student(cfg, teacher, data), train_student(cfg, teacher, data)
    assert a.checkpoint.dumps() == b.checkpoint.dumps()
    write_metrics_csv(tmp_path / "a.csv", a.metrics)
    write_metrics_csv(tmp_path / "b.csv", b.metrics)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_alignment_rises_with_vpd(small_data, teacher):
    cfg, data = small_data
    result = train_student(replace(cfg, optimizer="adam", lr=0.01, epochs=3), teacher, data)
    assert len(result.alignment) == 4 and result.alignment[-1] > result.alignment[0]


def test_student_rejects_mismatched_teacher(small_data, teacher):
    cfg, data = small_data
    other = replace(cfg, grid=replace(cfg.grid, z_bins=4))
    with pytest.raises(ValueError, match="grid"):
        train_student(other, teacher, load_dataset(replace(other, data=cfg.data)))


# ---------------------------------------------------------------- evaluation


def test_evaluate_is_deterministic(small_data, teacher):
    _, data = small_data
    a, b = evaluate(teacher, data.val), evaluate(teacher, data.val)
    assert a.miou == b.miou and np.array_equal(a.confusion, b.confusion)


def test_single_class_predictor(small_data, teacher):
    _, data = small_data
    ckpt = Checkpoint(teacher.role, {k: v.copy() for k, v in teacher.params.items()}, teacher.config,
                      teacher.rng_state, 0, teacher.num_classes, teacher.class_weights, teacher.class_names)
    head_w = next(k for k in ckpt.params if k.endswith("head.weight"))
    head_b = next(k for k in ckpt.params if k.endswith("head.bias"))
    ckpt.params[head_w][...] = 0.0
    ckpt.params[head_b][...] = [0.0, 0.0, 5.0, 0.0]
    report = evaluate(ckpt, data.val)
    targets = np.concatenate([scene_targets(s) for s in data.val])
    share = (targets == 2).sum() / len(targets)
    assert report.iou[2] == pytest.approx(share, abs=1e-15)
    assert report.miou == pytest.approx(share / 4, abs=1e-15)


def test_evaluate_empty_raises(teacher):
    with pytest.raises(ValueError):
        evaluate(teacher, [])


# ---------------------------------------------------------------- gradcheck


def test_gradcheck_all_pass():
    results = run_gradcheck()
    assert all(r.passed for r in results), format_report(results)
    assert {r.name for r in results} >= {
        "domain_transfer", "cross_attention", "vpd_loss", "height_embedding", "two_stage_compression",
        "lwd_loss", "weighted_ce", "lovasz_softmax", "logit_kd", "total_objective",
    }


def test_gradcheck_negative_control():
    results = run_gradcheck(names=["lwd_loss", "vpd_loss"], corrupt=["lwd_loss"])
    assert [r.passed for r in results] == [False, True]
    assert "failed: lwd_loss" in format_report(results)


# ---------------------------------------------------------------- maps


def test_export_maps_empty_scan(tmp_path):
    scene = prepare_scene(PointCloud(np.zeros((0, 4))), LabelSet([]), TrainConfig().grid, 4)
    export_maps(scene, tmp_path, predictions=np.zeros(0, dtype=np.int64))
    assert not read_map_csv(tmp_path / "scan_height.csv").any()
    assert not read_map_csv(tmp_path / "scan_errors.csv").any()
    assert not read_pgm(tmp_path / "scan_height.pgm").any()


def test_export_maps_three_voxel_column(tmp_path):
    pts = np.array([[3.0, 0.1, z, 0.5] for z in (-1.8, 0.1, 1.6)])
    scene = prepare_scene(PointCloud(pts), LabelSet([1, 1, 1]), TrainConfig().grid, 4)
    export_maps(scene, tmp_path, predictions=np.array([1, 0, 2]))
    height = read_map_csv(tmp_path / "scan_height.csv")
    assert height.shape == (16, 16) and height.max() == 3 and height.sum() == 3
    errors = read_map_csv(tmp_path / "scan_errors.csv")
    assert errors.sum() == 2 and np.argmax(errors) == np.argmax(height)


def test_pgm_peak_matches_csv_argmax(small_data, tmp_path):
    _, data = small_data
    export_maps(data.val[0], tmp_path)
    csv_map = read_map_csv(tmp_path / "scan_height.csv")
    pgm = read_pgm(tmp_path / "scan_height.pgm")
    assert pgm.shape == csv_map.shape and pgm.max() == 255
    assert set(np.flatnonzero(pgm == 255)) == set(np.flatnonzero(csv_map == csv_map.max()))


def test_pgm_header():
    assert to_pgm_bytes(np.array([[0, 2], [1, 0]])).startswith(b"P5\n2 2\n255\n")
