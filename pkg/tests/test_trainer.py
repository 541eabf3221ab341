"""Loss assembly, average precision, training loop, and checkpoint tests."""

import struct
import types

import numpy as np
import pytest

import protovote.tensor as T
from protovote.backbone import tiny_backbone_config
from protovote.checkpoint import (CheckpointError, load_checkpoint, read_header,
                                  save_checkpoint)
from protovote.geomdata import DatasetConfig, SceneConfig, generate_dataset
from protovote.pipeline import Model, ModelConfig
from protovote.tensor import Tensor
from protovote.trainer import (LossConfig, TrainConfig, Trainer,
                               assign_objectness, average_precision,
                               build_prototypes_for, detection_loss, evaluate)


# ---------------------------------------------------------------------------
# objectness labels


def test_objectness_band():
    centers = np.array([[0.1, 0, 0], [0.45, 0, 0], [0.9, 0, 0]])
    gt = np.array([[0.0, 0.0, 0.0]])
    labels = assign_objectness(centers, gt)
    assert labels.tolist() == [1, -1, 0]


def test_objectness_boundaries_are_ignored():
    centers = np.array([[0.3, 0, 0], [0.6, 0, 0]])
    labels = assign_objectness(centers, np.zeros((1, 3)))
    assert labels.tolist() == [-1, -1]  # strict inequalities on both sides


def test_objectness_nearest_center_rule():
    # near one object but far from another: nearest distance decides
    centers = np.array([[0.1, 0, 0]])
    gt = np.array([[0.0, 0.0, 0.0], [5.0, 0.0, 0.0]])
    assert assign_objectness(centers, gt).tolist() == [1]


def test_objectness_no_ground_truth():
    labels = assign_objectness(np.random.default_rng(0).uniform(0, 1, (7, 3)),
                               np.zeros((0, 3)))
    assert (labels == 0).all()


def test_objectness_custom_radii():
    centers = np.array([[0.4, 0, 0]])
    gt = np.zeros((1, 3))
    assert assign_objectness(centers, gt, pos_radius=0.5, neg_radius=0.7)[0] == 1


# ---------------------------------------------------------------------------
# detection loss on a fully controlled synthetic forward result


def _fake_box(center, size, class_id):
    from protovote.geomdata import Box
    return Box(np.asarray(center, dtype=float), np.asarray(size, dtype=float),
               class_id)


def _fake_scene(boxes):
    return types.SimpleNamespace(scene_id="fake", boxes=boxes)


def _fake_result(prop_centers, raw, seed_positions, vote_offsets):
    proposals = types.SimpleNamespace(centers=Tensor(prop_centers))
    votes = types.SimpleNamespace(offsets=Tensor(vote_offsets))
    return types.SimpleNamespace(proposals=proposals, raw=raw,
                                 seed_positions=seed_positions, votes=votes)


def _raw(t, r):
    return {"center_offset": Tensor(np.zeros((t, 3))),
            "log_size": Tensor(np.zeros((t, 3))),
            "objectness_logits": Tensor(np.zeros((t, 2))),
            "class_logits": Tensor(np.zeros((t, r)))}


def test_detection_loss_zero_logits_identities():
    # one positive proposal sitting exactly on a unit-anchor ground truth:
    # cls = ln(R), obj = ln(2), reg = 0, vote = 0 (no seeds inside)
    box = _fake_box([2.0, 2.0, 0.5], [1.0, 1.0, 1.0], class_id=3)
    scene = _fake_scene([box])
    result = _fake_result(np.array([[2.0, 2.0, 0.5], [7.0, 7.0, 0.5]]),
                          _raw(2, 3),
                          seed_positions=np.full((4, 3), 50.0),
                          vote_offsets=np.zeros((4, 3)))
    total, info = detection_loss(result, scene, roster=[1, 3, 8],
                                 anchor_size=np.ones(3), weights=LossConfig())
    assert info["n_positive"] == 1
    assert abs(info["loss_cls"] - np.log(3)) < 1e-12
    assert abs(info["loss_obj"] - np.log(2)) < 1e-12
    assert info["loss_reg"] == 0.0
    assert info["loss_vote"] == 0.0
    assert abs(total.item() - (np.log(3) + np.log(2))) < 1e-12


def test_detection_loss_component_recomposition():
    rng = np.random.default_rng(4)
    box = _fake_box([1.0, 1.0, 0.5], [0.8, 1.2, 1.0], class_id=2)
    scene = _fake_scene([box])
    raw = {k: Tensor(rng.standard_normal(v.shape))
           for k, v in _raw(3, 2).items()}
    result = _fake_result(rng.uniform(0, 2, (3, 3)), raw,
                          seed_positions=rng.uniform(0, 2, (16, 3)),
                          vote_offsets=rng.standard_normal((16, 3)))
    weights = LossConfig(alpha_reg=0.5, alpha_obj=2.0, alpha_vote=0.25)
    total, info = detection_loss(result, scene, roster=[2, 5],
                                 anchor_size=np.ones(3), weights=weights)
    recomposed = (info["loss_cls"] + 0.5 * info["loss_reg"]
                  + 2.0 * info["loss_obj"] + 0.25 * info["loss_vote"])
    assert abs(total.item() - recomposed) < 1e-12


def test_detection_loss_vote_targets():
    # seeds inside the box must regress toward its center; one seed at a
    # known offset with zero predicted offset gives a hand-computable huber
    box = _fake_box([0.0, 0.0, 0.0], [2.0, 2.0, 2.0], class_id=0)
    scene = _fake_scene([box])
    seeds = np.array([[0.2, 0.0, 0.0], [9.0, 9.0, 9.0]])
    result = _fake_result(np.array([[0.0, 0.0, 0.0]]), _raw(1, 1),
                          seed_positions=seeds, vote_offsets=np.zeros((2, 3)))
    _, info = detection_loss(result, scene, roster=[0],
                             anchor_size=np.ones(3), weights=LossConfig())
    # target (-0.2, 0, 0), prediction 0: mean huber = 0.5 * 0.2^2 / 3
    assert abs(info["loss_vote"] - 0.5 * 0.04 / 3) < 1e-12


def test_detection_loss_no_positive_flag():
    box = _fake_box([0.0, 0.0, 0.0], [1.0, 1.0, 1.0], class_id=0)
    scene = _fake_scene([box])
    result = _fake_result(np.array([[9.0, 9.0, 9.0]]), _raw(1, 1),
                          seed_positions=np.full((2, 3), 50.0),
                          vote_offsets=np.zeros((2, 3)))
    total, info = detection_loss(result, scene, roster=[0],
                                 anchor_size=np.ones(3), weights=LossConfig())
    assert info["no_positive"]
    assert info["loss_cls"] == 0.0 and info["loss_reg"] == 0.0
    assert abs(info["loss_obj"] - np.log(2)) < 1e-12


def test_detection_loss_gradients():
    rng = np.random.default_rng(5)
    box = _fake_box([1.0, 1.0, 0.5], [1.0, 1.0, 1.0], class_id=4)
    scene = _fake_scene([box])
    params = {k: Tensor(rng.standard_normal(v.shape), requires_grad=True, name=k)
              for k, v in _raw(3, 2).items()}
    seeds = rng.uniform(0, 2, (10, 3))
    offsets = Tensor(rng.standard_normal((10, 3)), requires_grad=True,
                     name="offsets")
    centers = rng.uniform(0.5, 1.5, (3, 3))

    def loss():
        result = _fake_result(centers, dict(params), seeds, np.zeros((10, 3)))
        result.votes = types.SimpleNamespace(offsets=offsets)
        total, _ = detection_loss(result, scene, roster=[4, 6],
                                  anchor_size=np.ones(3), weights=LossConfig())
        return total

    report = T.grad_check(loss, list(params.values()) + [offsets], h=1e-5,
                          tol=1e-6, coords_per_param=6,
                          rng=np.random.default_rng(6))
    assert report["passed"], report


def test_loss_config_rejects_negative_weight():
    with pytest.raises(ValueError):
        LossConfig(alpha_obj=-1.0).validate()


# ---------------------------------------------------------------------------
# average precision


def _grid_ap(detections, gt_boxes, thr, n_grid=200_000):
    """Independent AP oracle: greedy match (same rule), then numeric
    integration of the precision envelope on a dense recall grid."""
    from protovote.boxes3d import iou3d_axis_aligned
    n_gt = sum(len(v) for v in gt_boxes.values())
    order = sorted(range(len(detections)), key=lambda i: (-detections[i][0], i))
    matched = {}
    tp = []
    for i in order:
        _, sid, center, size = detections[i]
        best_iou, best_j = 0.0, None
        for j, (gc, gs) in enumerate(gt_boxes.get(sid, [])):
            if j in matched.get(sid, set()):
                continue
            iou = iou3d_axis_aligned(center, size, gc, gs)
            if iou > best_iou:
                best_iou, best_j = iou, j
        hit = best_j is not None and best_iou >= thr
        if hit:
            matched.setdefault(sid, set()).add(best_j)
        tp.append(1.0 if hit else 0.0)
    tp = np.asarray(tp)
    cum = np.cumsum(tp)
    recall = cum / n_gt
    precision = cum / np.arange(1, len(tp) + 1)
    grid = (np.arange(n_grid) + 1) / n_grid
    vals = np.zeros(n_grid)
    for gi, r in enumerate(grid):
        ok = recall >= r
        vals[gi] = precision[ok].max() if ok.any() else 0.0
    return float(vals.mean())


def test_ap_perfect_single_detection():
    gt = {"s0": [(np.zeros(3), np.ones(3))]}
    dets = [(0.9, "s0", np.zeros(3), np.ones(3))]
    assert average_precision(dets, gt, 0.5) == 1.0


def test_ap_half_recall():
    gt = {"s0": [(np.zeros(3), np.ones(3)), (np.array([5.0, 0, 0]), np.ones(3))]}
    dets = [(0.9, "s0", np.zeros(3), np.ones(3))]
    assert average_precision(dets, gt, 0.5) == 0.5


def test_ap_false_positive_above_true_positive():
    gt = {"s0": [(np.zeros(3), np.ones(3))]}
    dets = [(0.9, "s0", np.array([50.0, 0, 0]), np.ones(3)),
            (0.5, "s0", np.zeros(3), np.ones(3))]
    assert average_precision(dets, gt, 0.5) == 0.5


def test_ap_each_gt_matched_once():
    # two detections on the same ground truth: the second is a false positive
    gt = {"s0": [(np.zeros(3), np.ones(3))]}
    dets = [(0.9, "s0", np.zeros(3), np.ones(3)),
            (0.8, "s0", np.zeros(3), np.ones(3))]
    assert average_precision(dets, gt, 0.5) == 1.0


def test_ap_none_without_ground_truth():
    assert average_precision([(0.5, "s0", np.zeros(3), np.ones(3))], {}, 0.5) is None


def test_ap_matches_grid_oracle_randomized():
    rng = np.random.default_rng(17)
    for trial in range(5):
        gt = {}
        for sid in ("a", "b"):
            gt[sid] = [(rng.uniform(0, 4, 3), rng.uniform(0.8, 1.5, 3))
                       for _ in range(rng.integers(1, 4))]
        dets = []
        for _ in range(rng.integers(3, 10)):
            sid = rng.choice(["a", "b"])
            base = gt[sid][rng.integers(len(gt[sid]))]
            center = base[0] + rng.normal(0, 0.4, 3)
            dets.append((float(rng.uniform(0, 1)), sid, center,
                         base[1] * rng.uniform(0.8, 1.2)))
        got = average_precision(dets, gt, 0.25)
        want = _grid_ap(dets, gt, 0.25)
        assert abs(got - want) < 1e-4, (trial, got, want)


# ---------------------------------------------------------------------------
# training loop + checkpoints


@pytest.fixture(scope="module")
def train_setup(tmp_path_factory):
    cfg = DatasetConfig(
        seed=19,
        scene=SceneConfig(points_per_scene=512, min_points_per_object=24,
                          objects_max=3),
        scenes_per_split={"base_train": 10, "base_val": 3, "novel_train": 10,
                          "novel_val": 3, "novel_easy": 3})
    dataset = generate_dataset(cfg, tmp_path_factory.mktemp("train_data"))
    model_cfg = ModelConfig(backbone=tiny_backbone_config(512), bank_size=16,
                            proposals=8)
    return dataset, model_cfg


def _train(dataset, model_cfg, out_dir, seed=3, mode="full", episodes=3):
    model = Model(model_cfg, anchor_size=dataset.anchor_size, seed=seed)
    cfg = TrainConfig(seed=seed, mode=mode, epochs=1,
                      episodes_per_epoch=episodes, r=2, k=2, n_query=1)
    trainer = Trainer(model, dataset, cfg, out_dir=out_dir)
    rows = trainer.train()
    return model, trainer, rows


def test_training_runs_and_logs(train_setup, tmp_path):
    dataset, model_cfg = train_setup
    model, trainer, rows = _train(dataset, model_cfg, tmp_path / "run")
    assert len(rows) == 3
    for row in rows:
        assert np.isfinite(row["loss_total"])
        assert row["bank_updates"] >= 1     # full mode feeds the bank
    log = (tmp_path / "run" / "training_log.csv").read_text().splitlines()
    assert log[0].startswith("step,epoch,iteration,lr,loss_total")
    assert len(log) == 4


def test_training_step_changes_parameters(train_setup, tmp_path):
    dataset, model_cfg = train_setup
    model = Model(model_cfg, anchor_size=dataset.anchor_size, seed=3)
    before = {n: p.data.copy() for n, p in model.named_tensors().items()}
    cfg = TrainConfig(seed=3, mode="full", epochs=1, episodes_per_epoch=1,
                      r=2, k=2, n_query=1)
    Trainer(model, dataset, cfg).train_step(episode_seed=12345)
    changed = [n for n, p in model.named_tensors().items()
               if not np.array_equal(before[n], p.data)]
    assert len(changed) >= 0.8 * len(before)


def test_baseline_mode_never_touches_bank(train_setup, tmp_path):
    dataset, model_cfg = train_setup
    model = Model(model_cfg, anchor_size=dataset.anchor_size, seed=3)
    bank_before = model.bank.prototypes.copy()
    cfg = TrainConfig(seed=3, mode="baseline", epochs=1, episodes_per_epoch=2,
                      r=2, k=2, n_query=1)
    Trainer(model, dataset, cfg).train()
    np.testing.assert_array_equal(model.bank.prototypes, bank_before)


def test_training_bitwise_deterministic(train_setup, tmp_path):
    dataset, model_cfg = train_setup
    m1, _, rows1 = _train(dataset, model_cfg, tmp_path / "a", seed=8)
    m2, _, rows2 = _train(dataset, model_cfg, tmp_path / "b", seed=8)
    assert [r["loss_total"] for r in rows1] == [r["loss_total"] for r in rows2]
    for (n1, p1), (n2, p2) in zip(m1.named_tensors().items(),
                                  m2.named_tensors().items()):
        assert n1 == n2
        np.testing.assert_array_equal(p1.data, p2.data)
    np.testing.assert_array_equal(m1.bank.prototypes, m2.bank.prototypes)
    a = (tmp_path / "a" / "checkpoint_final.pvck").read_bytes()
    b = (tmp_path / "b" / "checkpoint_final.pvck").read_bytes()
    assert a == b


def test_lr_schedule():
    cfg = TrainConfig(lr=1e-3, lr_decay_epochs=(2, 4), lr_decay_factor=0.1)
    lr_at = Trainer._lr_at
    fake = types.SimpleNamespace(config=cfg)
    assert lr_at(fake, 0) == 1e-3
    assert lr_at(fake, 2) == pytest.approx(1e-4)
    assert lr_at(fake, 4) == pytest.approx(1e-5)


def test_checkpoint_roundtrip_bit_exact(train_setup, tmp_path):
    dataset, model_cfg = train_setup
    model, trainer, _ = _train(dataset, model_cfg, tmp_path / "run", seed=11)
    path = tmp_path / "run" / "checkpoint_final.pvck"
    restored = Model(model_cfg, anchor_size=dataset.anchor_size, seed=999)
    opt = T.AdamW(restored.params(), lr=1e-3, weight_decay=0.01)
    header = load_checkpoint(path, restored, opt)
    for (n1, p1), (n2, p2) in zip(model.named_tensors().items(),
                                  restored.named_tensors().items()):
        assert n1 == n2
        np.testing.assert_array_equal(p1.data, p2.data)
    np.testing.assert_array_equal(model.bank.prototypes, restored.bank.prototypes)
    np.testing.assert_array_equal(model.bank.assignment_counts,
                                  restored.bank.assignment_counts)
    assert opt.step_count == trainer.optimizer.step_count
    for a, b in zip(opt.m, trainer.optimizer.m):
        np.testing.assert_array_equal(a, b)
    for a, b in zip(opt.v, trainer.optimizer.v):
        np.testing.assert_array_equal(a, b)
    # saving the restored state reproduces the file byte for byte
    save_checkpoint(tmp_path / "again.pvck", restored, opt,
                    extra=header["extra"])
    assert (tmp_path / "again.pvck").read_bytes() == path.read_bytes()


def test_checkpoint_version_mismatch_refused(train_setup, tmp_path):
    dataset, model_cfg = train_setup
    model, _, _ = _train(dataset, model_cfg, tmp_path / "run", seed=12)
    path = tmp_path / "run" / "checkpoint_final.pvck"
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 2)
    bad = tmp_path / "bad.pvck"
    bad.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        read_header(bad)


def test_checkpoint_config_mismatch_refused(train_setup, tmp_path):
    dataset, model_cfg = train_setup
    model, _, _ = _train(dataset, model_cfg, tmp_path / "run", seed=13)
    path = tmp_path / "run" / "checkpoint_final.pvck"
    other_cfg = ModelConfig(backbone=tiny_backbone_config(512), bank_size=32,
                            proposals=8)
    other = Model(other_cfg, anchor_size=dataset.anchor_size, seed=0)
    with pytest.raises(CheckpointError, match="config"):
        load_checkpoint(path, other)


# ---------------------------------------------------------------------------
# evaluation plumbing


def test_evaluate_structure(train_setup):
    dataset, model_cfg = train_setup
    model = Model(model_cfg, anchor_size=dataset.anchor_size, seed=2)
    protos = build_prototypes_for(model, dataset, dataset.novel_class_ids,
                                  k=2, seed=1, mode="full")
    result = evaluate(model, dataset, dataset.splits["novel_val"], protos,
                      "full")
    assert result.n_scenes == 3
    assert set(result.map_by_threshold) == {0.25, 0.5}
    for c in protos.class_ids:
        assert set(result.per_class[c]) == {0.25, 0.5}
    js = result.to_json()
    assert js["n_scenes"] == 3


def test_build_prototypes_insufficient_shots(train_setup):
    dataset, model_cfg = train_setup
    model = Model(model_cfg, anchor_size=dataset.anchor_size, seed=2)
    with pytest.raises(ValueError, match="instances"):
        build_prototypes_for(model, dataset, dataset.novel_class_ids,
                             k=500, seed=1)
