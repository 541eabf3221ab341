"""Procedural synthetic indoor scenes for few-shot detection experiments.

Object classes are assembled from a shared vocabulary of geometric
primitives (plate, stick, corner, hinge, edge), so that different classes
share part kinds. Scenes are rooms with a handful of objects standing on
the floor plus clutter points. Everything is a pure function of
(config, seed): the same seed reproduces byte-identical files.

On-disk layout:
    dataset/manifest.json
    dataset/scenes/<id>.json   boxes + ids (JSON header)
    dataset/scenes/<id>.bin    little-endian float32 xyz triplets
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PART_KINDS = ("plate", "stick", "corner", "hinge", "edge")

MANIFEST_VERSION = 1


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# primitive parts


@dataclass(frozen=True)
class PrimitivePart:
    """One part of an object template: a kind plus the axis-aligned cuboids
    realizing it inside the unit object frame [0,1]^3."""

    kind: str
    cuboids: tuple  # tuple of (lo, hi) pairs, each a 3-vector in [0,1]

    def __post_init__(self):
        if self.kind not in PART_KINDS:
            raise ConfigError(f"unknown part kind {self.kind!r}")
        for lo, hi in self.cuboids:
            if not (np.all(np.asarray(hi) > np.asarray(lo))
                    and np.all(np.asarray(lo) >= -1e-9)
                    and np.all(np.asarray(hi) <= 1 + 1e-9)):
                raise ConfigError(f"part cuboid outside unit frame: {lo} {hi}")


def _make_part(kind: str, rng: np.random.Generator) -> PrimitivePart:
    """Instantiate a part kind with mild random proportions."""
    t = rng.uniform(0.04, 0.10)  # characteristic thickness
    if kind == "plate":
        z = rng.uniform(0.3, 0.9)
        cubs = (((0.0, 0.0, z - t), (1.0, 1.0, z)),)
    elif kind == "stick":
        x = rng.uniform(0.1, 0.9 - t)
        y = rng.uniform(0.1, 0.9 - t)
        cubs = (((x, y, 0.0), (x + t, y + t, 1.0)),)
    elif kind == "corner":
        s = rng.uniform(0.35, 0.6)
        cubs = (((0.0, 0.0, 0.0), (s, s, t)),
                ((0.0, 0.0, 0.0), (s, t, s)),
                ((0.0, 0.0, 0.0), (t, s, s)))
    elif kind == "hinge":
        h = rng.uniform(0.4, 0.8)
        cubs = (((0.0, 0.0, 0.0), (1.0, 1.0, t)),
                ((0.0, 0.0, 0.0), (1.0, t, h)))
    elif kind == "edge":
        y = rng.uniform(0.0, 1.0 - t)
        cubs = (((0.0, y, 0.0), (1.0, y + t, t)),)
    else:  # pragma: no cover
        raise ConfigError(kind)
    cubs = tuple((tuple(float(v) for v in lo), tuple(float(v) for v in hi))
                 for lo, hi in cubs)
    return PrimitivePart(kind, cubs)


@dataclass(frozen=True)
class ObjectTemplate:
    class_id: int
    parts: tuple  # of PrimitivePart
    base_size: tuple  # canonical (dx, dy, dz) in meters

    @property
    def part_kinds(self) -> tuple:
        return tuple(p.kind for p in self.parts)


def build_class_templates(n_classes: int, seed: int) -> list[ObjectTemplate]:
    """One template per class; part-kind pairs are drawn from the 10
    unordered pairs over the 5 kinds, so some class pairs share a kind and
    others are disjoint."""
    if n_classes < 2:
        raise ConfigError("need at least 2 classes")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC1A55)))
    pairs = [(a, b) for i, a in enumerate(PART_KINDS) for b in PART_KINDS[i + 1:]]
    order = rng.permutation(len(pairs))
    templates = []
    for cid in range(n_classes):
        kinds = pairs[order[cid % len(pairs)]]
        parts = tuple(_make_part(k, rng) for k in kinds)
        base = tuple(float(s) for s in rng.uniform(0.6, 1.3, size=3))
        templates.append(ObjectTemplate(cid, parts, base))
    # transfer premise: every class must share >=1 kind with another class
    for t in templates:
        shared = any(set(t.part_kinds) & set(o.part_kinds)
                     for o in templates if o.class_id != t.class_id)
        if not shared:  # cannot happen with pair-combos and >=2 classes, but keep the guard
            raise ConfigError(f"class {t.class_id} shares no part kind")
    return templates


def part_incidence(templates: list[ObjectTemplate]) -> dict[int, list[str]]:
    return {t.class_id: sorted(set(t.part_kinds)) for t in templates}


# ---------------------------------------------------------------------------
# scenes


@dataclass
class Box:
    center: np.ndarray  # (3,)
    size: np.ndarray    # (3,) positive extents along x, y, z
    class_id: int

    @property
    def lo(self):
        return self.center - self.size / 2

    @property
    def hi(self):
        return self.center + self.size / 2

    def contains(self, pts: np.ndarray) -> np.ndarray:
        return np.all((pts >= self.lo - 1e-9) & (pts <= self.hi + 1e-9), axis=1)

    def to_json(self):
        return {"center": [float(v) for v in self.center],
                "size": [float(v) for v in self.size],
                "class_id": int(self.class_id)}

    @staticmethod
    def from_json(d):
        return Box(np.asarray(d["center"], dtype=np.float64),
                   np.asarray(d["size"], dtype=np.float64),
                   int(d["class_id"]))


@dataclass
class PointCloudScene:
    scene_id: str
    points: np.ndarray  # (N, 3) float64
    boxes: list


def _sample_cuboid_surface(rng: np.random.Generator, lo, hi, n: int) -> np.ndarray:
    """n points uniform over the surface of an axis-aligned cuboid."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    ext = hi - lo
    areas = np.array([ext[1] * ext[2], ext[1] * ext[2],
                      ext[0] * ext[2], ext[0] * ext[2],
                      ext[0] * ext[1], ext[0] * ext[1]])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = lo + rng.random((n, 3)) * ext
    axis = face // 2
    side = face % 2
    pts[np.arange(n), axis] = np.where(side == 0, lo[axis], hi[axis])
    return pts


def sample_object_points(template: ObjectTemplate, rng: np.random.Generator,
                         n: int, size: np.ndarray) -> np.ndarray:
    """n surface points of an object instance scaled to ``size``, in the
    object frame with its box spanning [0, size]."""
    cubs = [c for p in template.parts for c in p.cuboids]
    ext = [np.asarray(hi) - np.asarray(lo) for lo, hi in cubs]
    areas = np.array([2 * (e[0] * e[1] + e[1] * e[2] + e[0] * e[2]) for e in ext])
    counts = np.floor(n * areas / areas.sum()).astype(int)
    counts[: n - counts.sum()] += 1
    chunks = [_sample_cuboid_surface(rng, lo, hi, c)
              for (lo, hi), c in zip(cubs, counts) if c > 0]
    return np.concatenate(chunks, axis=0) * size


@dataclass
class SceneConfig:
    points_per_scene: int = 4096
    min_points_per_object: int = 32
    clutter_ratio: float = 0.5
    objects_min: int = 2
    objects_max: int = 8
    room_min: float = 4.0
    room_max: float = 8.0
    max_classes_per_scene: int = 3
    size_jitter: float = 0.15

    def validate(self):
        n_obj_points = int(self.points_per_scene * (1 - self.clutter_ratio))
        if n_obj_points < self.objects_max * self.min_points_per_object:
            raise ConfigError(
                f"points_per_scene={self.points_per_scene} cannot give "
                f"{self.objects_max} objects >= {self.min_points_per_object} points each")


def generate_scene(scene_id: str, templates_by_id: dict, allowed_classes: list[int],
                   cfg: SceneConfig, rng: np.random.Generator,
                   n_objects: int | None = None) -> PointCloudScene:
    room = rng.uniform(cfg.room_min, cfg.room_max, size=2)
    if n_objects is None:
        n_objects = int(rng.integers(cfg.objects_min, cfg.objects_max + 1))
    roster = list(rng.choice(allowed_classes,
                             size=min(cfg.max_classes_per_scene, len(allowed_classes)),
                             replace=False))

    boxes: list[Box] = []
    for _ in range(n_objects):
        cid = int(rng.choice(roster))
        tpl = templates_by_id[cid]
        size = np.asarray(tpl.base_size) * rng.uniform(1 - cfg.size_jitter,
                                                       1 + cfg.size_jitter, size=3)
        placed = False
        for _attempt in range(40):
            cx = rng.uniform(size[0] / 2, room[0] - size[0] / 2)
            cy = rng.uniform(size[1] / 2, room[1] - size[1] / 2)
            center = np.array([cx, cy, size[2] / 2])
            cand = Box(center, size.copy(), cid)
            margin = 0.1
            clash = any(np.all(np.abs(cand.center[:2] - b.center[:2])
                               < (cand.size[:2] + b.size[:2]) / 2 + margin)
                        for b in boxes)
            if not clash:
                boxes.append(cand)
                placed = True
                break
        if not placed:
            continue  # crowded room; fewer objects is fine
    if not boxes:
        cid = int(roster[0])
        size = np.asarray(templates_by_id[cid].base_size, dtype=np.float64)
        boxes.append(Box(np.array([room[0] / 2, room[1] / 2, size[2] / 2]),
                         size, cid))

    n_total = cfg.points_per_scene
    n_clutter = int(n_total * cfg.clutter_ratio)
    n_obj_pts = n_total - n_clutter
    per_obj = np.full(len(boxes), n_obj_pts // len(boxes))
    per_obj[: n_obj_pts - per_obj.sum()] += 1

    chunks = []
    for b, tpl_n in zip(boxes, per_obj):
        tpl = templates_by_id[b.class_id]
        pts = sample_object_points(tpl, rng, int(tpl_n), b.size)
        chunks.append(pts + b.lo)

    # clutter: floor + two walls + volumetric noise
    n_floor = n_clutter // 2
    n_wall = n_clutter // 4
    n_noise = n_clutter - n_floor - n_wall
    floor = np.column_stack([rng.uniform(0, room[0], n_floor),
                             rng.uniform(0, room[1], n_floor),
                             np.zeros(n_floor)])
    wall_x = rng.uniform(0, room[0], n_wall)
    wall = np.column_stack([wall_x, np.zeros(n_wall), rng.uniform(0, 2.5, n_wall)])
    noise = np.column_stack([rng.uniform(0, room[0], n_noise),
                             rng.uniform(0, room[1], n_noise),
                             rng.uniform(0, 2.5, n_noise)])
    chunks += [floor, wall, noise]
    points = np.concatenate(chunks, axis=0)
    order = rng.permutation(len(points))
    return PointCloudScene(scene_id, points[order], boxes)


# ---------------------------------------------------------------------------
# augmentation


def apply_augmentation(scene: PointCloudScene, flip: bool, quarter_turns: int,
                       scale: float) -> PointCloudScene:
    """Flip about the x=0 plane, rotate about the up axis by 90-degree
    multiples, and scale uniformly. Boxes stay axis-aligned and consistent
    with the points."""
    pts = scene.points.copy()
    boxes = [Box(b.center.copy(), b.size.copy(), b.class_id) for b in scene.boxes]
    if flip:
        pts[:, 0] *= -1
        for b in boxes:
            b.center[0] *= -1
    k = quarter_turns % 4
    for _ in range(k):
        pts = np.column_stack([-pts[:, 1], pts[:, 0], pts[:, 2]])
        for b in boxes:
            b.center[:] = [-b.center[1], b.center[0], b.center[2]]
            b.size[:] = [b.size[1], b.size[0], b.size[2]]
    if scale != 1.0:
        pts *= scale
        for b in boxes:
            b.center *= scale
            b.size *= scale
    return PointCloudScene(scene.scene_id, pts, boxes)


def augment(scene: PointCloudScene, seed: int) -> PointCloudScene:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xAA6)))
    return apply_augmentation(scene,
                              flip=bool(rng.integers(2)),
                              quarter_turns=int(rng.integers(4)),
                              scale=float(rng.uniform(0.9, 1.1)))


# ---------------------------------------------------------------------------
# dataset generation and I/O


@dataclass
class DatasetConfig:
    seed: int = 0
    n_base_classes: int = 5
    n_novel_classes: int = 3
    scenes_per_split: dict = field(default_factory=lambda: {
        "base_train": 200, "base_val": 40, "novel_train": 60,
        "novel_val": 40, "novel_easy": 30})
    scene: SceneConfig = field(default_factory=SceneConfig)

    def validate(self):
        if self.n_base_classes < 2 or self.n_novel_classes < 2:
            raise ConfigError("need >=2 base and >=2 novel classes")
        self.scene.validate()


def _json_dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_scene(scene: PointCloudScene, scenes_dir: Path):
    header = {"scene_id": scene.scene_id,
              "n_points": int(len(scene.points)),
              "boxes": [b.to_json() for b in scene.boxes]}
    (scenes_dir / f"{scene.scene_id}.json").write_text(_json_dumps(header))
    (scenes_dir / f"{scene.scene_id}.bin").write_bytes(
        scene.points.astype("<f4").tobytes())


def load_scene(scenes_dir: Path, scene_id: str) -> PointCloudScene:
    header = json.loads((scenes_dir / f"{scene_id}.json").read_text())
    raw = np.frombuffer((scenes_dir / f"{scene_id}.bin").read_bytes(), dtype="<f4")
    points = raw.reshape(-1, 3).astype(np.float64)
    if len(points) != header["n_points"]:
        raise DataError(f"scene {scene_id}: point count mismatch")
    return PointCloudScene(scene_id, points,
                           [Box.from_json(d) for d in header["boxes"]])


def generate_dataset(cfg: DatasetConfig, out_dir: str | Path) -> "Dataset":
    cfg.validate()
    out = Path(out_dir)
    scenes_dir = out / "scenes"
    scenes_dir.mkdir(parents=True, exist_ok=True)

    n_classes = cfg.n_base_classes + cfg.n_novel_classes
    templates = build_class_templates(n_classes, cfg.seed)
    by_id = {t.class_id: t for t in templates}
    base_ids = list(range(cfg.n_base_classes))
    novel_ids = list(range(cfg.n_base_classes, n_classes))

    splits: dict[str, list[str]] = {}
    all_sizes = []
    for split, count in sorted(cfg.scenes_per_split.items()):
        allowed = base_ids if split.startswith("base") else novel_ids
        n_objects = 1 if split.endswith("easy") else None
        ids = []
        for i in range(count):
            sid = f"{split}_{i:04d}"
            rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, hash_split(split), i)))
            scene = generate_scene(sid, by_id, allowed, cfg.scene, rng,
                                   n_objects=n_objects)
            save_scene(scene, scenes_dir)
            ids.append(sid)
            if split == "base_train":
                all_sizes += [b.size for b in scene.boxes]
        splits[split] = ids

    anchor = np.mean(np.asarray(all_sizes), axis=0)
    manifest = {
        "version": MANIFEST_VERSION,
        "seed": cfg.seed,
        "config": {
            "n_base_classes": cfg.n_base_classes,
            "n_novel_classes": cfg.n_novel_classes,
            "scenes_per_split": cfg.scenes_per_split,
            "scene": vars(cfg.scene),
        },
        "classes": [{"class_id": t.class_id,
                     "name": f"class_{t.class_id:02d}",
                     "split": "base" if t.class_id in base_ids else "novel",
                     "part_kinds": sorted(set(t.part_kinds)),
                     "base_size": list(t.base_size)} for t in templates],
        "splits": splits,
        "anchor_size": [float(v) for v in anchor],
        "min_points_per_object": cfg.scene.min_points_per_object,
    }
    (out / "manifest.json").write_text(_json_dumps(manifest))
    return Dataset(out)


def hash_split(split: str) -> int:
    # stable across processes (builtin hash() is salted)
    return int.from_bytes(split.encode()[:8].ljust(8, b"\0"), "little") % (2 ** 31)


class Dataset:
    """Read-only view of a generated dataset directory with a per-class
    instance index."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise DataError(f"no manifest at {manifest_path}")
        self.manifest = json.loads(manifest_path.read_text())
        if self.manifest.get("version") != MANIFEST_VERSION:
            raise DataError(f"unsupported manifest version {self.manifest.get('version')}")
        self.splits = self.manifest["splits"]
        self.anchor_size = np.asarray(self.manifest["anchor_size"], dtype=np.float64)
        self.base_class_ids = [c["class_id"] for c in self.manifest["classes"]
                               if c["split"] == "base"]
        self.novel_class_ids = [c["class_id"] for c in self.manifest["classes"]
                                if c["split"] == "novel"]
        self.part_kinds_by_class = {c["class_id"]: c["part_kinds"]
                                    for c in self.manifest["classes"]}
        self._cache: dict[str, PointCloudScene] = {}
        self._instance_index: dict[str, dict[int, list]] = {}

    def scene(self, scene_id: str) -> PointCloudScene:
        if scene_id not in self._cache:
            self._cache[scene_id] = load_scene(self.root / "scenes", scene_id)
        return self._cache[scene_id]

    def instance_index(self, split: str) -> dict[int, list]:
        """class_id -> list of (scene_id, box_index) for a split."""
        if split not in self._instance_index:
            index: dict[int, list] = {}
            for sid in self.splits[split]:
                for bi, b in enumerate(self.scene(sid).boxes):
                    index.setdefault(b.class_id, []).append((sid, bi))
            self._instance_index[split] = index
        return self._instance_index[split]


# ---------------------------------------------------------------------------
# episodes


@dataclass
class Episode:
    class_roster: list[int]                 # sorted class ids
    support: dict[int, list]                # class_id -> [(scene_id, box_index)]
    query_scene_ids: list[str]

    def to_json(self):
        return {"class_roster": self.class_roster,
                "support": {str(k): v for k, v in self.support.items()},
                "query_scene_ids": self.query_scene_ids}

    @staticmethod
    def from_json(d):
        return Episode([int(c) for c in d["class_roster"]],
                       {int(k): [tuple(pair) for pair in v]
                        for k, v in d["support"].items()},
                       list(d["query_scene_ids"]))


def sample_episode(dataset: Dataset, r: int, k: int, seed: int,
                   split: str = "base_train", query_split: str | None = None,
                   n_query: int = 2) -> Episode:
    """K-shot R-class episode: roster classes, K support instances per class
    drawn without replacement, and query scenes containing roster classes only."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xE915)))
    index = dataset.instance_index(split)
    eligible = sorted(c for c, inst in index.items() if len(inst) >= k)
    if len(eligible) < r:
        raise DataError(f"only {len(eligible)} classes have >= {k} instances "
                        f"in split {split!r}, need {r}")
    qsplit = query_split or split
    scene_ids = dataset.splits[qsplit]

    # grow the roster around a random query scene so at least one query
    # candidate exists by construction
    roster = None
    for _attempt in range(200):
        sid = scene_ids[int(rng.integers(len(scene_ids)))]
        cls = {b.class_id for b in dataset.scene(sid).boxes}
        if len(cls) > r or not cls <= set(eligible):
            continue
        pad = [c for c in eligible if c not in cls]
        extra = rng.choice(len(pad), size=r - len(cls), replace=False) if len(cls) < r else []
        roster = sorted(cls | {pad[int(i)] for i in extra})
        break
    if roster is None:
        raise DataError(f"no query scene in {qsplit!r} fits an {r}-class roster "
                        f"over classes with >= {k} instances in split {split!r}")

    support: dict[int, list] = {}
    for cid in roster:
        inst = index[cid]
        pick = rng.choice(len(inst), size=k, replace=False)
        support[cid] = [inst[int(i)] for i in sorted(pick)]

    roster_set = set(roster)
    candidates = [sid for sid in scene_ids
                  if {b.class_id for b in dataset.scene(sid).boxes} <= roster_set]
    n_query = min(n_query, len(candidates))
    picks = rng.choice(len(candidates), size=n_query, replace=False)
    query = [candidates[int(i)] for i in sorted(picks)]
    return Episode(roster, support, query)
