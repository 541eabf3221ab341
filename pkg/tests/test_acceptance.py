"""Acceptance suite: end-to-end correctness, directionality, determinism.

Criteria (one test each, marked in the test name):

1. end-to-end gradient correctness on a toy scene, all parameter groups
2. brute-force oracle equivalence for every combinatorial/numeric kernel
3. momentum-bank dynamics: closed-form blending, convergence, no-op groups
4. cross-attention contracts: row sums, permutation symmetries, reference
5. ablation direction over 5 seeds: full >= {pvm, phm} >= baseline (1 SE)
6. assignment-histogram transfer: part-sharing classes more similar
7. hard vs soft assignment both train; comparison reported (informational)
8. bit-identical training reruns; checkpoint save/load/eval reproduction
9. >= 70% class-agnostic recall on held-out single-object novel scenes

Criteria 5-7 and 9 train a reduced-scale grid (4 modes x 5 seeds plus one
soft-assignment run). Trained checkpoints are cached in
tests/_acceptance_cache keyed by a config hash, so only the first run pays
the training cost.
"""

import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pytest

import protovote.tensor as T
from protovote.backbone import BackboneConfig, SALayerConfig, fps, radius_group
from protovote.boxes3d import iou3d_axis_aligned
from protovote.checkpoint import load_checkpoint, save_checkpoint
from protovote.geomdata import (DatasetConfig, SceneConfig, generate_dataset,
                                sample_episode)
from protovote.phm import build_class_prototypes
from protovote.pipeline import MODES, Model, ModelConfig
from protovote.pvm import (AttentionConfig, CrossAttention,
                           GeometricPrototypeBank, assignment_histogram,
                           hard_assign, histogram_cosine, momentum_update,
                           naive_cross_attention)
from protovote.tensor import Tensor
from protovote.trainer import (LossConfig, TrainConfig, Trainer,
                               average_precision, build_prototypes_for,
                               detection_loss, evaluate)

SEEDS = (0, 1, 2, 3, 4)
CACHE = Path(__file__).parent / "_acceptance_cache"


# ---------------------------------------------------------------------------
# shared reduced-scale benchmark


def bench_dataset_config() -> DatasetConfig:
    return DatasetConfig(
        seed=0,
        scene=SceneConfig(points_per_scene=512, min_points_per_object=48,
                          clutter_ratio=0.25, objects_min=2, objects_max=2,
                          room_min=4.0, room_max=5.0),
        scenes_per_split={"base_train": 100, "base_val": 10, "novel_train": 20,
                          "novel_val": 12, "novel_easy": 12})


def bench_backbone() -> BackboneConfig:
    return BackboneConfig(
        sa_layers=[SALayerConfig(128, 1.0, 8, [16, 16]),
                   SALayerConfig(64, 2.0, 8, [16, 32])],
        fp_targets=[128], fp_widths=[32])


def bench_model_config(assignment: str = "hard") -> ModelConfig:
    return ModelConfig(backbone=bench_backbone(), bank_size=32, proposals=32,
                       group_radius=1.0, assignment=assignment)


def bench_train_config(seed: int, mode: str) -> TrainConfig:
    return TrainConfig(seed=seed, mode=mode, epochs=3, episodes_per_epoch=667,
                       r=3, k=3, n_query=1, lr=2e-3, lr_decay_epochs=(2,),
                       augment=True, loss=LossConfig(alpha_vote=3.0))


@pytest.fixture(scope="module")
def bench_dataset(tmp_path_factory):
    return generate_dataset(bench_dataset_config(),
                            tmp_path_factory.mktemp("bench_data"))


def _cache_key(seed: int, mode: str, assignment: str) -> str:
    blob = json.dumps({
        "dataset": repr(bench_dataset_config()),
        "model": repr(bench_model_config(assignment)),
        "train": repr(bench_train_config(seed, mode)),
    }, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def trained_model(dataset, seed: int, mode: str,
                  assignment: str = "hard") -> Model:
    """Train (or load from the on-disk cache) one benchmark model."""
    model = Model(bench_model_config(assignment),
                  anchor_size=dataset.anchor_size, seed=seed)
    path = CACHE / f"{mode}_{assignment}_s{seed}_{_cache_key(seed, mode, assignment)}.pvck"
    if path.exists():
        load_checkpoint(path, model)
        return model
    Trainer(model, dataset, bench_train_config(seed, mode)).train()
    CACHE.mkdir(exist_ok=True)
    save_checkpoint(path, model)
    return model


def bench_eval(model, dataset, mode: str, proto_seed: int = 100):
    protos = build_prototypes_for(model, dataset, dataset.novel_class_ids,
                                  k=3, seed=proto_seed, mode=mode)
    return protos, evaluate(model, dataset, dataset.splits["novel_val"],
                            protos, mode)


# ---------------------------------------------------------------------------
# criterion 1: end-to-end gradients


def test_criterion_1_end_to_end_gradients(tmp_path):
    start = time.time()
    cfg = DatasetConfig(
        seed=3,
        scene=SceneConfig(points_per_scene=64, min_points_per_object=16,
                          clutter_ratio=0.25, objects_min=1, objects_max=2,
                          room_min=4.0, room_max=4.5),
        scenes_per_split={"base_train": 6, "base_val": 1, "novel_train": 2,
                          "novel_val": 1, "novel_easy": 1})
    dataset = generate_dataset(cfg, tmp_path / "toy")
    backbone = BackboneConfig(
        sa_layers=[SALayerConfig(16, 1.5, 8, [6, 6]),
                   SALayerConfig(8, 3.0, 8, [6, 8])],
        fp_targets=[16], fp_widths=[8])
    model = Model(ModelConfig(backbone=backbone, n_classes=2, bank_size=6,
                              proposals=4, group_radius=1.0),
                  anchor_size=dataset.anchor_size, seed=9)
    # nudge every parameter off its init so zero-initialized layers do not
    # make upstream gradients vacuously zero
    noise = np.random.default_rng(41)
    for tensor in model.named_tensors().values():
        tensor.data += 0.05 * noise.standard_normal(tensor.data.shape)
    episode = sample_episode(dataset, r=2, k=1, seed=5, n_query=1)
    scene = dataset.scene(episode.query_scene_ids[0])

    def loss():
        protos = build_class_prototypes(
            episode, dataset,
            lambda pts: _pos_feats(model.extract_refined(pts, "full")))
        result = model.forward(scene.points, protos, "full")
        total, _ = detection_loss(result, scene, episode.class_roster,
                                  model.anchor_size, LossConfig())
        return total

    def _pos_feats(pair):
        seeds, refined = pair
        return seeds.positions, refined

    groups = model.param_groups()
    assert set(groups) >= {"backbone", "pvm_attention", "vote",
                           "phm_attention", "head"}
    for name, params in groups.items():
        report = T.grad_check(loss, params, h=1e-5, tol=1e-3,
                              coords_per_param=3,
                              rng=np.random.default_rng(17))
        assert report["passed"], (name, report)
    assert time.time() - start < 120


def test_criterion_1_per_op_suite():
    # compact randomized per-op pass at the tighter tolerance (the full
    # per-op coverage lives in the tensor test module)
    rng = np.random.default_rng(23)
    for _ in range(20):
        a = Tensor(rng.standard_normal((4, 5)), requires_grad=True, name="a")
        b = Tensor(rng.standard_normal((5, 3)), requires_grad=True, name="b")

        def loss():
            h = T.relu(T.matmul(a, b))
            p = T.log_softmax(T.reshape(h, (12,)))
            return T.add(T.sum_(T.mul(p, p)), T.mean(T.smooth_l1(a, 0.3)))

        report = T.grad_check(loss, [a, b], h=1e-5, tol=1e-5,
                              coords_per_param=3, rng=rng)
        assert report["passed"], report


# ---------------------------------------------------------------------------
# criterion 2: brute-force oracle equivalence


def test_criterion_2_oracles():
    start = time.time()
    rng = np.random.default_rng(41)
    model = Model(ModelConfig(backbone=bench_backbone(), bank_size=8,
                              proposals=4, group_radius=1.0),
                  anchor_size=np.ones(3), seed=0)
    for case in range(100):
        n = int(rng.integers(8, 65))
        pts = rng.uniform(-2, 2, size=(n, 3))

        # farthest point sampling: greedy maximin, first-occurrence ties
        m = int(rng.integers(1, min(n, 9)))
        got = fps(pts, m, start_index=0)
        sel = [0]
        d = np.linalg.norm(pts - pts[0], axis=1)
        for _ in range(m - 1):
            nxt = int(np.argmax(d))
            sel.append(nxt)
            d = np.minimum(d, np.linalg.norm(pts - pts[nxt], axis=1))
        assert got.tolist() == sel

        # radius grouping: sort by (distance, index), truncate at cap
        radius, cap = float(rng.uniform(0.5, 2.0)), 6
        centers = pts[sel]
        groups = radius_group(centers, pts, radius, cap)
        for ci in range(len(centers)):
            dist = np.linalg.norm(pts - centers[ci], axis=1)
            inside = sorted(np.nonzero(dist <= radius)[0],
                            key=lambda i: (dist[i], i))[:cap]
            assert groups[ci].tolist() == inside

        # hard assignment: euclidean argmin, first occurrence
        bank = GeometricPrototypeBank(5, 3, gamma=0.9, seed=case)
        assign = hard_assign(pts, bank)
        d2 = ((pts[:, None, :] - bank.prototypes[None]) ** 2).sum(axis=2)
        assert assign.tolist() == np.argmin(d2, axis=1).tolist()

        # IoU3D: direct interval-overlap recomputation
        ca, cb = rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 3)
        sa, sb = rng.uniform(0.2, 2, 3), rng.uniform(0.2, 2, 3)
        inter = 1.0
        for k in range(3):
            lo = max(ca[k] - sa[k] / 2, cb[k] - sb[k] / 2)
            hi = min(ca[k] + sa[k] / 2, cb[k] + sb[k] / 2)
            inter *= max(hi - lo, 0.0)
        want = inter / (sa.prod() + sb.prod() - inter)
        assert abs(iou3d_axis_aligned(ca, sa, cb, sb) - want) < 1e-12

    # sample-and-group membership on 100 random vote sets
    from protovote.pvm import VoteOutput
    for case in range(100):
        n = int(rng.integers(8, 65))
        centers = rng.uniform(0, 4, size=(n, 3))
        votes = VoteOutput(Tensor(np.zeros((n, 3))), Tensor(np.zeros((n, 4))),
                           Tensor(centers), Tensor(rng.standard_normal((n, 4))),
                           centers.copy())
        t, radius = 4, 1.0
        props = model.sample_and_group(votes, t=t, radius=radius)
        sel = fps(centers, t, start_index=0)
        for vi in range(n):
            dist = np.linalg.norm(centers[sel] - centers[vi], axis=1)
            gi = int(np.argmin(dist))
            member = any(vi in g for g in props.member_indices)
            if dist[gi] <= radius:
                assert vi in props.member_indices[gi]
            else:
                assert not member

    # AP against an independent dense-grid integration oracle
    for case in range(100):
        n_gt = int(rng.integers(1, 5))
        gt = {"s": [(rng.uniform(0, 3, 3), rng.uniform(0.8, 1.4, 3))
                    for _ in range(n_gt)]}
        dets = []
        for _ in range(int(rng.integers(1, 8))):
            g = gt["s"][int(rng.integers(n_gt))]
            dets.append((float(rng.uniform(0, 1)), "s",
                         g[0] + rng.normal(0, 0.35, 3), g[1]))
        got = average_precision(dets, gt, 0.25)
        want = _ap_grid_oracle(dets, gt, 0.25)
        assert abs(got - want) < 1e-4
    assert time.time() - start < 60


def _ap_grid_oracle(dets, gt, thr, n_grid=100_000):
    n_gt = sum(len(v) for v in gt.values())
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][0], i))
    matched: dict[str, set] = {}
    tp = []
    for i in order:
        _, sid, c, s = dets[i]
        best, bj = 0.0, None
        for j, (gc, gs) in enumerate(gt.get(sid, [])):
            if j in matched.get(sid, set()):
                continue
            iou = iou3d_axis_aligned(c, s, gc, gs)
            if iou > best:
                best, bj = iou, j
        if bj is not None and best >= thr:
            matched.setdefault(sid, set()).add(bj)
            tp.append(1.0)
        else:
            tp.append(0.0)
    cum = np.cumsum(tp)
    rec = cum / n_gt
    prec = cum / np.arange(1, len(tp) + 1)
    # numeric integration of the precision envelope on a dense recall grid
    envelope = np.maximum.accumulate(prec[::-1])[::-1]
    grid = (np.arange(n_grid) + 1) / n_grid
    pos = np.searchsorted(rec, grid, side="left")
    vals = np.where(pos < len(rec), envelope[np.minimum(pos, len(rec) - 1)], 0.0)
    return float(vals.mean())


# ---------------------------------------------------------------------------
# criterion 3: momentum-bank dynamics


def test_criterion_3_momentum_dynamics():
    rng = np.random.default_rng(51)
    feats = rng.standard_normal((30, 4))

    # closed-form blending for gamma in {0, 0.9, 1}
    for gamma in (0.0, 0.9, 1.0):
        bank = GeometricPrototypeBank(3, 4, gamma=gamma, seed=1)
        before = bank.prototypes.copy()
        assign = hard_assign(feats, bank)
        momentum_update(bank, feats, assign)
        for k in range(3):
            rows = feats[assign == k]
            if len(rows):
                want = gamma * before[k] + (1 - gamma) * rows.mean(axis=0)
            else:
                want = before[k]
            np.testing.assert_array_equal(bank.prototypes[k], want)

    # empty groups stay bit-identical
    bank = GeometricPrototypeBank(4, 4, gamma=0.5, seed=2)
    before = bank.prototypes.copy()
    momentum_update(bank, feats[:5], np.zeros(5, dtype=np.intp))
    np.testing.assert_array_equal(bank.prototypes[1:], before[1:])
    assert not np.array_equal(bank.prototypes[0], before[0])

    # gamma = 0.999: monotone convergence toward a stationary target
    bank = GeometricPrototypeBank(4, 4, gamma=0.999, seed=3)
    target = rng.standard_normal(4)
    stream = np.tile(target, (12, 1))
    dists = []
    for _ in range(1000):
        momentum_update(bank, stream, hard_assign(stream, bank))
        dists.append(float(np.linalg.norm(bank.prototypes - target,
                                          axis=1).sum()))
    assert all(b <= a + 1e-12 for a, b in zip(dists, dists[1:]))
    assert dists[-1] < dists[0]


# ---------------------------------------------------------------------------
# criterion 4: attention contracts


def test_criterion_4_attention_contracts():
    rng = np.random.default_rng(61)
    att = CrossAttention(AttentionConfig(dim=8, heads=4), rng)
    q = rng.standard_normal((6, 8))
    kv = rng.standard_normal((5, 8))

    weights = att.attention_weights(Tensor(q), kv)
    for w in weights:
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-9)

    out = att(Tensor(q), kv).data
    # prototype permutation invariance: exact
    perm = rng.permutation(5)
    np.testing.assert_array_equal(att(Tensor(q), kv[perm]).data, out)
    # seed permutation equivariance: exact
    qperm = rng.permutation(6)
    np.testing.assert_array_equal(att(Tensor(q[qperm]), kv).data, out[qperm])
    # naive reference
    np.testing.assert_allclose(out, naive_cross_attention(q, kv, att),
                               atol=1e-9)


# ---------------------------------------------------------------------------
# criteria 5-7, 9: the trained benchmark grid


@pytest.fixture(scope="module")
def mode_grid(bench_dataset):
    grid = {}
    for mode in MODES:
        for seed in SEEDS:
            grid[(mode, seed)] = trained_model(bench_dataset, seed, mode)
    return grid


def _map25(model, dataset, mode, seed):
    _, result = bench_eval(model, dataset, mode, proto_seed=100 + seed)
    return result.map_by_threshold[0.25]


@pytest.fixture(scope="module")
def mode_scores(mode_grid, bench_dataset):
    scores = {mode: np.array([_map25(mode_grid[(mode, s)], bench_dataset,
                                     mode, s) for s in SEEDS])
              for mode in MODES}
    print("\nnovel mAP@0.25 by mode:",
          {m: f"{v.mean():.3f}+-{v.std(ddof=1) / np.sqrt(len(v)):.3f}"
           for m, v in scores.items()})
    return scores


def _ordered(hi: np.ndarray, lo: np.ndarray) -> bool:
    """hi >= lo within one standard error of the paired difference."""
    diff = hi - lo
    se = diff.std(ddof=1) / np.sqrt(len(diff))
    return diff.mean() >= -se


def test_criterion_5_ablation_direction(mode_scores):
    assert _ordered(mode_scores["full"], mode_scores["pvm_only"])
    assert _ordered(mode_scores["full"], mode_scores["phm_only"])
    assert _ordered(mode_scores["pvm_only"], mode_scores["baseline"])
    assert _ordered(mode_scores["phm_only"], mode_scores["baseline"])
    assert mode_scores["full"].mean() > 0.0


def test_criterion_6_histogram_transfer(mode_grid, bench_dataset):
    kinds = bench_dataset.part_kinds_by_class
    class_ids = sorted(kinds)
    diffs = []
    for seed in SEEDS:
        model = mode_grid[("full", seed)]
        feats: dict[int, list] = {}
        for split in ("base_val", "novel_val"):
            for sid in bench_dataset.splits[split]:
                scene = bench_dataset.scene(sid)
                seeds_, refined = model.extract_refined(scene.points, "full")
                for b in scene.boxes:
                    inside = b.contains(seeds_.positions)
                    if inside.any():
                        feats.setdefault(b.class_id, []).append(
                            refined.data[inside])
        hist = assignment_histogram(
            {c: np.concatenate(v) for c, v in feats.items()}, model.bank)
        share, disjoint = [], []
        for i, a in enumerate(class_ids):
            for b in class_ids[i + 1:]:
                cos = histogram_cosine(hist[a], hist[b])
                bucket = share if set(kinds[a]) & set(kinds[b]) else disjoint
                bucket.append(cos)
        assert share and disjoint
        diffs.append(np.mean(share) - np.mean(disjoint))
    print("\nhistogram cosine gap (share - disjoint) per seed:",
          [f"{d:+.3f}" for d in diffs])
    assert np.mean(diffs) > 0.0


def test_criterion_7_hard_vs_soft_informational(bench_dataset, capsys):
    results = {}
    for assignment in ("hard", "soft"):
        model = trained_model(bench_dataset, seed=0, mode="full",
                              assignment=assignment)
        _, result = bench_eval(model, bench_dataset, "full")
        results[assignment] = result.map_by_threshold
        assert set(result.map_by_threshold) == {0.25, 0.5}
    # directional claim is informational: reported, not gated
    with capsys.disabled():
        print(f"\n[informational] hard assignment mAP: {results['hard']}, "
              f"soft assignment mAP: {results['soft']}")


def test_criterion_9_novel_easy_recall(mode_grid, bench_dataset):
    recalls = []
    for seed in SEEDS:
        model = mode_grid[("full", seed)]
        protos, _ = bench_eval(model, bench_dataset, "full",
                               proto_seed=100 + seed)
        hit = total = 0
        for sid in bench_dataset.splits["novel_easy"]:
            scene = bench_dataset.scene(sid)
            result = model.forward(scene.points, protos, "full")
            for box in scene.boxes:
                total += 1
                if any(iou3d_axis_aligned(d.center, d.size, box.center,
                                          box.size) >= 0.25
                       for d in result.detections):
                    hit += 1
        recalls.append(hit / total)
    print("\nnovel_easy recall per seed:", [f"{r:.2f}" for r in recalls])
    assert np.mean(recalls) >= 0.70


# ---------------------------------------------------------------------------
# criterion 8: determinism and persistence


def test_criterion_8_determinism_and_persistence(tmp_path):
    cfg = DatasetConfig(
        seed=29,
        scene=SceneConfig(points_per_scene=512, min_points_per_object=24,
                          objects_max=3),
        scenes_per_split={"base_train": 10, "base_val": 3, "novel_train": 10,
                          "novel_val": 3, "novel_easy": 3})
    dataset = generate_dataset(cfg, tmp_path / "data")
    mcfg = ModelConfig(backbone=bench_backbone(), bank_size=16, proposals=8)

    outs = []
    for run in ("a", "b"):
        model = Model(mcfg, anchor_size=dataset.anchor_size, seed=7)
        tcfg = TrainConfig(seed=7, mode="full", epochs=1, episodes_per_epoch=4,
                           r=2, k=2, n_query=1)
        trainer = Trainer(model, dataset, tcfg, out_dir=tmp_path / run)
        trainer.train()
        outs.append((model, trainer))
    ck_a = (tmp_path / "a" / "checkpoint_final.pvck").read_bytes()
    ck_b = (tmp_path / "b" / "checkpoint_final.pvck").read_bytes()
    assert ck_a == ck_b
    log_a = (tmp_path / "a" / "training_log.csv").read_bytes()
    assert log_a == (tmp_path / "b" / "training_log.csv").read_bytes()

    # save -> load -> eval reproduces evaluation numbers exactly
    model = outs[0][0]
    protos = build_prototypes_for(model, dataset, dataset.novel_class_ids,
                                  k=2, seed=1, mode="full")
    direct = evaluate(model, dataset, dataset.splits["novel_val"], protos,
                      "full")
    restored = Model(mcfg, anchor_size=dataset.anchor_size, seed=999)
    load_checkpoint(tmp_path / "a" / "checkpoint_final.pvck", restored)
    protos2 = build_prototypes_for(restored, dataset, dataset.novel_class_ids,
                                   k=2, seed=1, mode="full")
    replayed = evaluate(restored, dataset, dataset.splits["novel_val"],
                        protos2, "full")
    assert direct.to_json() == replayed.to_json()
