"""Episodic training, loss assembly, and average-precision evaluation."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .boxes3d import iou3d_axis_aligned  # re-exported for callers
from .geomdata import Dataset, augment, sample_episode
from .phm import ClassPrototypeSet, build_class_prototypes
from .pipeline import Model
from .tensor import Tensor

__all__ = ["LossConfig", "TrainConfig", "EvalResult", "assign_objectness",
           "detection_loss", "average_precision", "evaluate", "Trainer",
           "iou3d_axis_aligned", "build_prototypes_for"]


@dataclass
class LossConfig:
    alpha_reg: float = 1.0
    alpha_obj: float = 1.0
    alpha_vote: float = 1.0
    pos_radius: float = 0.3   # center distance for a positive label (meters)
    neg_radius: float = 0.6   # beyond this from every center -> negative

    def validate(self):
        for v in (self.alpha_reg, self.alpha_obj, self.alpha_vote):
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weights must be finite nonnegative, got {v}")


POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


def assign_objectness(centers: np.ndarray, gt_centers: np.ndarray,
                      pos_radius: float = 0.3, neg_radius: float = 0.6) -> np.ndarray:
    """Label each center positive (< pos_radius to the nearest ground-truth
    center), negative (> neg_radius from every center) or ignore (the band
    in between, excluded from the objectness loss)."""
    if len(gt_centers) == 0:
        return np.full(len(centers), NEGATIVE)
    d = np.linalg.norm(centers[:, None, :] - gt_centers[None, :, :], axis=2).min(axis=1)
    labels = np.full(len(centers), IGNORE)
    labels[d < pos_radius] = POSITIVE
    labels[d > neg_radius] = NEGATIVE
    return labels


def detection_loss(result, scene, roster: list[int], anchor_size: np.ndarray,
                   weights: LossConfig) -> tuple[Tensor, dict]:
    """Assemble cls + reg + objectness + vote losses for one query scene.

    Returns the weighted total (a tape scalar) and a dict of float
    components for logging. Scenes with no positive proposals contribute
    zero cls/reg with ``no_positive`` flagged.
    """
    weights.validate()
    if not scene.boxes:
        raise ValueError(f"scene {scene.scene_id} has no ground truth")
    gt_centers = np.asarray([b.center for b in scene.boxes])
    gt_sizes = np.asarray([b.size for b in scene.boxes])
    gt_class_idx = np.asarray([roster.index(b.class_id) for b in scene.boxes])

    prop_centers = result.proposals.centers.data
    labels = assign_objectness(prop_centers, gt_centers,
                               weights.pos_radius, weights.neg_radius)
    nearest = np.argmin(np.linalg.norm(
        prop_centers[:, None, :] - gt_centers[None, :, :], axis=2), axis=1)

    zero = Tensor(0.0)
    pos = np.nonzero(labels == POSITIVE)[0]
    labeled = np.nonzero(labels != IGNORE)[0]
    info = {"n_positive": len(pos), "no_positive": len(pos) == 0}

    # objectness: 2-way cross entropy over the labeled proposals
    if len(labeled):
        l_obj = T.cross_entropy(T.gather_rows(result.raw["objectness_logits"], labeled),
                                labels[labeled])
    else:
        l_obj = zero

    if len(pos):
        l_cls = T.cross_entropy(T.gather_rows(result.raw["class_logits"], pos),
                                gt_class_idx[nearest[pos]])
        off_target = gt_centers[nearest[pos]] - prop_centers[pos]
        size_target = np.log(gt_sizes[nearest[pos]] / anchor_size)
        l_reg = T.add(T.mean(T.smooth_l1(T.gather_rows(result.raw["center_offset"], pos),
                                         off_target)),
                      T.mean(T.smooth_l1(T.gather_rows(result.raw["log_size"], pos),
                                         size_target)))
    else:
        l_cls = zero
        l_reg = zero

    # vote loss: foreground seeds regress to their object's center
    seed_pos = result.seed_positions
    fg_rows = []
    fg_targets = []
    for b in scene.boxes:
        inside = np.nonzero(b.contains(seed_pos))[0]
        fg_rows.append(inside)
        fg_targets.append(np.tile(b.center, (len(inside), 1)) - seed_pos[inside])
    fg_rows_cat = np.concatenate(fg_rows) if fg_rows else np.zeros(0, dtype=np.intp)
    if len(fg_rows_cat):
        targets = np.concatenate(fg_targets)
        l_vote = T.mean(T.smooth_l1(T.gather_rows(result.votes.offsets, fg_rows_cat),
                                    targets))
    else:
        l_vote = zero

    total = T.add(T.add(l_cls, T.scale(l_reg, weights.alpha_reg)),
                  T.add(T.scale(l_obj, weights.alpha_obj),
                        T.scale(l_vote, weights.alpha_vote)))
    info.update({"loss_cls": l_cls.item(), "loss_reg": l_reg.item(),
                 "loss_obj": l_obj.item(), "loss_vote": l_vote.item(),
                 "loss_total": total.item()})
    return total, info


# ---------------------------------------------------------------------------
# evaluation


def average_precision(detections: list[tuple], gt_boxes: dict[str, list],
                      iou_threshold: float) -> float | None:
    """All-points-interpolated AP for one class.

    ``detections``: (score, scene_id, center, size), any order.
    ``gt_boxes``: scene_id -> [(center, size)] for this class.
    Returns None when there is no ground truth.
    """
    n_gt = sum(len(v) for v in gt_boxes.values())
    if n_gt == 0:
        return None
    order = sorted(range(len(detections)),
                   key=lambda i: (-detections[i][0], i))
    matched: dict[str, set] = {sid: set() for sid in gt_boxes}
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        score, sid, center, size = detections[i]
        best_iou, best_j = 0.0, None
        for j, (gc, gs) in enumerate(gt_boxes.get(sid, [])):
            if j in matched.get(sid, set()):
                continue
            iou = iou3d_axis_aligned(center, size, gc, gs)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j is not None and best_iou >= iou_threshold:
            matched.setdefault(sid, set()).add(best_j)
            tp[rank] = 1.0
    tps = np.cumsum(tp)
    recall = tps / n_gt
    precision = tps / np.arange(1, len(order) + 1)
    # precision envelope + area under the stepwise curve
    ap = 0.0
    prev_r = 0.0
    for r in np.unique(recall[tp > 0]):
        p = precision[recall >= r].max() if np.any(recall >= r) else 0.0
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


@dataclass
class EvalResult:
    per_class: dict            # class_id -> {threshold: AP or None}
    map_by_threshold: dict     # threshold -> mAP over classes with GT
    n_scenes: int

    def to_json(self):
        return {"per_class": {str(k): {str(t): v for t, v in d.items()}
                              for k, d in self.per_class.items()},
                "map_by_threshold": {str(t): v for t, v in self.map_by_threshold.items()},
                "n_scenes": self.n_scenes}


def evaluate(model: Model, dataset: Dataset, scene_ids: list[str],
             prototypes: ClassPrototypeSet | None, mode: str = "full",
             iou_thresholds=(0.25, 0.5)) -> EvalResult:
    """Greedy-matching AP over the given scenes; each ground truth is
    matched at most once per threshold."""
    class_ids = (prototypes.class_ids if prototypes is not None
                 else list(range(model.config.n_classes)))
    dets: dict[int, list] = {c: [] for c in class_ids}
    gts: dict[int, dict[str, list]] = {c: {} for c in class_ids}
    for sid in scene_ids:
        scene = dataset.scene(sid)
        result = model.forward(scene.points, prototypes, mode)
        for d in result.detections:
            if d.class_id in dets:
                dets[d.class_id].append((d.objectness, sid, d.center, d.size))
        for b in scene.boxes:
            if b.class_id in gts:
                gts[b.class_id].setdefault(sid, []).append((b.center, b.size))

    per_class = {}
    for c in class_ids:
        per_class[c] = {}
        for thr in iou_thresholds:
            ap = average_precision(dets[c], gts[c], thr)
            if ap is None:
                warnings.warn(f"class {c}: no ground truth in eval scenes, "
                              "excluded from mAP")
            per_class[c][thr] = ap
    map_by_threshold = {}
    for thr in iou_thresholds:
        vals = [per_class[c][thr] for c in class_ids if per_class[c][thr] is not None]
        map_by_threshold[thr] = float(np.mean(vals)) if vals else 0.0
    return EvalResult(per_class, map_by_threshold, len(scene_ids))


def build_prototypes_for(model: Model, dataset: Dataset, class_ids: list[int],
                         k: int, seed: int, split: str = "novel_train",
                         mode: str = "full") -> ClassPrototypeSet:
    """K-shot support selection for the given classes (seeded), then the
    standard pool-then-average prototype construction."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5EED5)))
    index = dataset.instance_index(split)
    support = {}
    for cid in class_ids:
        inst = index.get(cid, [])
        if len(inst) < k:
            raise ValueError(f"class {cid} has {len(inst)} instances in "
                             f"{split!r}, need {k}")
        pick = rng.choice(len(inst), size=k, replace=False)
        support[cid] = [inst[int(i)] for i in sorted(pick)]

    class _Ep:
        pass

    ep = _Ep()
    ep.support = support
    return build_class_prototypes(
        ep, dataset, lambda pts: _positions_features(model, pts, mode))


def _positions_features(model: Model, points: np.ndarray, mode: str):
    seeds, refined = model.extract_refined(points, mode)
    return seeds.positions, refined


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    seed: int = 0
    mode: str = "full"
    epochs: int = 36
    episodes_per_epoch: int = 200
    r: int = 3                 # roster size
    k: int = 3                 # shots
    n_query: int = 2
    lr: float = 1e-3
    lr_decay_epochs: tuple = (24, 32)
    lr_decay_factor: float = 0.1
    weight_decay: float = 0.01
    augment: bool = True
    loss: LossConfig = field(default_factory=LossConfig)
    checkpoint_every: int = 0  # epochs; 0 = only final


class DivergenceError(RuntimeError):
    pass


class Trainer:
    """Episodic training on base classes; each iteration samples a K-shot
    R-class episode, builds class prototypes from its support set, runs the
    query scenes, steps AdamW and momentum-updates the prototype bank."""

    def __init__(self, model: Model, dataset: Dataset, config: TrainConfig,
                 out_dir: str | Path | None = None):
        config.loss.validate()
        self.model = model
        self.dataset = dataset
        self.config = config
        self.out_dir = Path(out_dir) if out_dir else None
        self.optimizer = T.AdamW(model.params(), lr=config.lr,
                                 weight_decay=config.weight_decay)
        self.log_rows: list[dict] = []

    def _lr_at(self, epoch: int) -> float:
        lr = self.config.lr
        for e in self.config.lr_decay_epochs:
            if epoch >= e:
                lr *= self.config.lr_decay_factor
        return lr

    def train_step(self, episode_seed: int) -> dict:
        cfg = self.config
        model = self.model
        use_phm = cfg.mode in ("phm_only", "full")
        episode = sample_episode(self.dataset, cfg.r, cfg.k, seed=episode_seed,
                                 split="base_train", n_query=cfg.n_query)
        if use_phm:
            protos = build_class_prototypes(
                episode, self.dataset,
                lambda pts: _positions_features(model, pts, cfg.mode))
        else:
            protos = ClassPrototypeSet(
                Tensor(np.zeros((cfg.r, model.config.backbone.feature_dim))),
                episode.class_roster)

        total = None
        comps = {"loss_cls": 0.0, "loss_reg": 0.0, "loss_obj": 0.0,
                 "loss_vote": 0.0, "n_positive": 0}
        bank_updates = 0
        results = []
        for qi, sid in enumerate(episode.query_scene_ids):
            scene = self.dataset.scene(sid)
            if cfg.augment:
                scene = augment(scene, seed=episode_seed * 1000 + qi)
            result = model.forward(scene.points, protos if use_phm else None, cfg.mode)
            loss, info = detection_loss(result, scene, episode.class_roster,
                                        model.anchor_size, cfg.loss)
            total = loss if total is None else T.add(total, loss)
            for key in ("loss_cls", "loss_reg", "loss_obj", "loss_vote"):
                comps[key] += info[key]
            comps["n_positive"] += info["n_positive"]
            results.append((result, scene))
        total = T.scale(total, 1.0 / len(episode.query_scene_ids))
        value = total.item()
        if not np.isfinite(value):
            raise DivergenceError(f"loss diverged: {value}")

        self.optimizer.zero_grad()
        total.backward()
        self.optimizer.step()

        if cfg.mode in ("pvm_only", "full"):
            for result, scene in results:
                bank_updates += 1 if model.update_bank(
                    result.seed_positions, result.seed_features, scene.boxes) else 0

        n = len(episode.query_scene_ids)
        return {"loss_total": value,
                **{k: v / n for k, v in comps.items() if k.startswith("loss")},
                "n_positive": comps["n_positive"],
                "bank_updates": bank_updates}

    def train(self) -> list[dict]:
        cfg = self.config
        step = 0
        for epoch in range(cfg.epochs):
            self.optimizer.lr = self._lr_at(epoch)
            for it in range(cfg.episodes_per_epoch):
                episode_seed = int(np.random.SeedSequence(
                    (cfg.seed, epoch, it)).generate_state(1)[0])
                try:
                    row = self.train_step(episode_seed)
                except DivergenceError:
                    # parameters are still pre-step: persist them and abort
                    if self.out_dir:
                        self._save("last_good")
                        self.write_log()
                    raise
                row.update({"epoch": epoch, "iteration": it, "step": step,
                            "lr": self.optimizer.lr})
                self.log_rows.append(row)
                step += 1
            if self.out_dir and cfg.checkpoint_every and \
                    (epoch + 1) % cfg.checkpoint_every == 0:
                self._save(f"epoch_{epoch:03d}")
        if self.out_dir:
            self._save("final")
            self.write_log()
        return self.log_rows

    def _save(self, tag: str):
        from .checkpoint import save_checkpoint
        self.out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(self.out_dir / f"checkpoint_{tag}.pvck", self.model,
                        self.optimizer, extra={"tag": tag})

    def write_log(self):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / "training_log.csv"
        if not self.log_rows:
            path.write_text("")
            return
        cols = ["step", "epoch", "iteration", "lr", "loss_total", "loss_cls",
                "loss_reg", "loss_obj", "loss_vote", "n_positive", "bank_updates"]
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=cols)
            writer.writeheader()
            for row in self.log_rows:
                writer.writerow({c: row.get(c, "") for c in cols})


def eval_tables(result: EvalResult) -> list[dict]:
    """Flatten an EvalResult into CSV-ready rows."""
    rows = []
    for cid, by_thr in sorted(result.per_class.items()):
        row = {"class_id": cid}
        for thr, ap in by_thr.items():
            row[f"ap_{int(thr * 100)}"] = "" if ap is None else f"{ap:.6f}"
        rows.append(row)
    row = {"class_id": "mAP"}
    for thr, v in result.map_by_threshold.items():
        row[f"ap_{int(thr * 100)}"] = f"{v:.6f}"
    rows.append(row)
    return rows


def save_eval(result: EvalResult, out_dir: Path, name: str = "eval"):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{name}.json").write_text(
        json.dumps(result.to_json(), sort_keys=True, indent=1))
    rows = eval_tables(result)
    with (out_dir / f"{name}.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
