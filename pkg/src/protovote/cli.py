"""Command-line entry point: generate / train / eval / ablate / inspect."""

from __future__ import annotations

import os

if os.environ.get("PROTOVOTE_THREADS"):
    # must land before numpy initializes its thread pools
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["PROTOVOTE_THREADS"])

import argparse
import copy
import csv
import datetime
import json
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, tiny_backbone_config
from .checkpoint import CheckpointError, load_checkpoint, read_header
from .geomdata import ConfigError, DataError, Dataset, DatasetConfig, SceneConfig, \
    generate_dataset
from .pipeline import MODES, Model, ModelConfig
from .plotting import bar_chart, line_chart
from .pvm import assignment_histogram, foreground_mask
from .trainer import LossConfig, TrainConfig, Trainer, build_prototypes_for, \
    evaluate, eval_tables

DEFAULT_CONFIG = {
    "dataset": {
        "n_base_classes": 5,
        "n_novel_classes": 3,
        "scenes_per_split": {"base_train": 200, "base_val": 40,
                             "novel_train": 60, "novel_val": 40,
                             "novel_easy": 30},
        "scene": {"points_per_scene": 4096, "min_points_per_object": 32,
                  "clutter_ratio": 0.5, "objects_min": 2, "objects_max": 8,
                  "room_min": 4.0, "room_max": 8.0,
                  "max_classes_per_scene": 3, "size_jitter": 0.15},
    },
    "model": {
        "backbone": "desk",          # "desk" (4096-point scenes) or "tiny"
        "backbone_points": 512,      # tiny backbone sizing
        "bank_size": 120,
        "gamma": 0.999,
        "heads": 4,
        "proposals": 32,
        "group_radius": 1.0,
        "nms_iou": 0.25,
        "assignment": "hard",
        "soft_temperature": 1.0,
    },
    "train": {
        "mode": "full",
        "epochs": 36,
        "episodes_per_epoch": 200,
        "r": 3,
        "k": 3,
        "n_query": 2,
        "lr": 1e-3,
        "lr_decay_epochs": [24, 32],
        "lr_decay_factor": 0.1,
        "weight_decay": 0.01,
        "augment": True,
        "checkpoint_every": 0,
        "loss": {"alpha_reg": 1.0, "alpha_obj": 1.0, "alpha_vote": 1.0,
                 "pos_radius": 0.3, "neg_radius": 0.6},
    },
    "eval": {"split": "novel_val", "support_split": "novel_train",
             "shots": 3, "seed": 0, "iou_thresholds": [0.25, 0.5]},
}

ABLATION_GRIDS = {
    "mode": list(MODES),
    "bank_size": [30, 60, 90, 120, 150],
    "gamma": [0.2, 0.9, 0.99, 0.999, 0.9999],
    "assignment": ["hard", "soft"],
}


class CliError(SystemExit):
    def __init__(self, message: str, code: int = 2):
        print(f"error: {message}", file=sys.stderr)
        super().__init__(code)


# ---------------------------------------------------------------------------
# config plumbing


def _deep_update(base: dict, extra: dict, path: str = "") -> dict:
    for key, val in extra.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise CliError(f"unknown config field {here!r}")
        if isinstance(base[key], dict) and key != "scenes_per_split":
            if not isinstance(val, dict):
                raise CliError(f"config field {here!r} must be an object")
            _deep_update(base[key], val, here)
        else:
            base[key] = val
    return base


def load_config(path: str | None, overrides: list[str]) -> dict:
    config = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        p = Path(path)
        if not p.exists():
            raise CliError(f"config file not found: {p}")
        try:
            _deep_update(config, json.loads(p.read_text()))
        except json.JSONDecodeError as e:
            raise CliError(f"config file {p}: {e}")
    for item in overrides:
        if "=" not in item:
            raise CliError(f"--set expects section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        keys = dotted.split(".")
        node = config
        for key in keys[:-1]:
            if not isinstance(node, dict) or key not in node:
                raise CliError(f"unknown config field {dotted!r}")
            node = node[key]
        if not isinstance(node, dict) or keys[-1] not in node:
            raise CliError(f"unknown config field {dotted!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node[keys[-1]] = value
    return config


def dataset_config(config: dict, seed: int) -> DatasetConfig:
    d = config["dataset"]
    try:
        cfg = DatasetConfig(seed=seed,
                            n_base_classes=d["n_base_classes"],
                            n_novel_classes=d["n_novel_classes"],
                            scenes_per_split=dict(d["scenes_per_split"]),
                            scene=SceneConfig(**d["scene"]))
        cfg.validate()
    except (ConfigError, TypeError) as e:
        raise CliError(f"dataset config: {e}")
    return cfg


def model_config(config: dict) -> ModelConfig:
    m = config["model"]
    if m["backbone"] == "desk":
        backbone = BackboneConfig()
    elif m["backbone"] == "tiny":
        backbone = tiny_backbone_config(m["backbone_points"])
    else:
        raise CliError(f"model.backbone: unknown backbone {m['backbone']!r}")
    try:
        cfg = ModelConfig(backbone=backbone,
                          n_classes=config["train"]["r"],
                          bank_size=m["bank_size"], gamma=m["gamma"],
                          heads=m["heads"], proposals=m["proposals"],
                          group_radius=m["group_radius"], nms_iou=m["nms_iou"],
                          assignment=m["assignment"],
                          soft_temperature=m["soft_temperature"])
        cfg.validate()
    except ValueError as e:
        raise CliError(f"model config: {e}")
    return cfg


def train_config(config: dict, seed: int, mode: str) -> TrainConfig:
    t = config["train"]
    if mode not in MODES:
        raise CliError(f"train.mode: {mode!r} not in {MODES}")
    try:
        loss = LossConfig(**t["loss"])
        loss.validate()
        return TrainConfig(seed=seed, mode=mode, epochs=t["epochs"],
                           episodes_per_epoch=t["episodes_per_epoch"],
                           r=t["r"], k=t["k"], n_query=t["n_query"],
                           lr=t["lr"],
                           lr_decay_epochs=tuple(t["lr_decay_epochs"]),
                           lr_decay_factor=t["lr_decay_factor"],
                           weight_decay=t["weight_decay"],
                           augment=t["augment"],
                           checkpoint_every=t["checkpoint_every"], loss=loss)
    except (ValueError, TypeError) as e:
        raise CliError(f"train config: {e}")


def write_run_files(out: Path, config: dict, command: str):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True))
    meta = {"command": command,
            "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat()}
    (out / "run_meta.json").write_text(json.dumps(meta, indent=2))


def _load_dataset(path: str) -> Dataset:
    try:
        return Dataset(path)
    except DataError as e:
        raise CliError(str(e))


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    config = load_config(args.config, args.set)
    cfg = dataset_config(config, args.seed)
    dataset = generate_dataset(cfg, args.out)
    write_run_files(Path(args.out), config, "generate")
    n = sum(len(v) for v in dataset.splits.values())
    print(f"wrote {n} scenes across {len(dataset.splits)} splits to {args.out}")
    return 0


def _run_eval(model, dataset, config, mode, out: Path, tag: str):
    e = config["eval"]
    class_ids = (dataset.novel_class_ids if e["split"].startswith("novel")
                 else dataset.base_class_ids)
    class_ids = [c for c in class_ids
                 if len(dataset.instance_index(e["support_split"]).get(c, []))
                 >= e["shots"]]
    if not class_ids:
        raise CliError(f"no class has {e['shots']} support instances in "
                       f"{e['support_split']!r}")
    protos = build_prototypes_for(model, dataset, class_ids, k=e["shots"],
                                  seed=e["seed"], split=e["support_split"],
                                  mode=mode)
    result = evaluate(model, dataset, dataset.splits[e["split"]], protos, mode,
                      iou_thresholds=tuple(e["iou_thresholds"]))
    out.mkdir(parents=True, exist_ok=True)
    (out / f"eval_{tag}.json").write_text(json.dumps(result.to_json(), indent=2))
    with (out / f"eval_{tag}.csv").open("w", newline="") as fh:
        rows = eval_tables(result)
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    return result


def cmd_train(args) -> int:
    config = load_config(args.config, args.set)
    mode = args.mode or config["train"]["mode"]
    dataset = _load_dataset(args.data)
    mcfg = model_config(config)
    tcfg = train_config(config, args.seed, mode)
    out = Path(args.out)
    write_run_files(out, config, "train")
    model = Model(mcfg, anchor_size=dataset.anchor_size, seed=args.seed)
    trainer = Trainer(model, dataset, tcfg, out_dir=out)
    rows = trainer.train()
    steps = [r["step"] for r in rows]
    line_chart(out / "loss_curve.svg",
               {"total": (steps, [r["loss_total"] for r in rows]),
                "objectness": (steps, [r["loss_obj"] for r in rows]),
                "vote": (steps, [r["loss_vote"] for r in rows])},
               title=f"training loss ({mode})", x_label="step", y_label="loss")
    result = _run_eval(model, dataset, config, mode, out, "final")
    print(f"trained {len(rows)} episodes ({mode}); "
          f"mAP@0.25 = {result.map_by_threshold.get(0.25, 0.0):.4f}")
    return 0


def _load_model_from(checkpoint: str, config: dict, dataset, mode: str,
                     seed: int = 0) -> Model:
    path = Path(checkpoint)
    if not path.exists():
        raise CliError(f"checkpoint not found: {path}")
    model = Model(model_config(config), anchor_size=dataset.anchor_size,
                  seed=seed)
    try:
        load_checkpoint(path, model)
    except CheckpointError as e:
        raise CliError(str(e))
    return model


def cmd_eval(args) -> int:
    config = load_config(args.config, args.set)
    mode = args.mode or config["train"]["mode"]
    dataset = _load_dataset(args.data)
    model = _load_model_from(args.checkpoint, config, dataset, mode)
    out = Path(args.out)
    write_run_files(out, config, "eval")
    result = _run_eval(model, dataset, config, mode, out, args.tag)
    for thr, v in sorted(result.map_by_threshold.items()):
        print(f"mAP@{thr:.2f} = {v:.4f} over {result.n_scenes} scenes")
    return 0


def cmd_ablate(args) -> int:
    config = load_config(args.config, args.set)
    grid = ABLATION_GRIDS[args.grid]
    dataset = _load_dataset(args.data)
    out = Path(args.out)
    write_run_files(out, config, "ablate")
    rows = []
    for value in grid:
        variant = copy.deepcopy(config)
        mode = variant["train"]["mode"]
        if args.grid == "mode":
            mode = value
        else:
            variant["model"][args.grid] = value
        mcfg = model_config(variant)
        tcfg = train_config(variant, args.seed, mode)
        model = Model(mcfg, anchor_size=dataset.anchor_size, seed=args.seed)
        run_dir = out / f"{args.grid}_{value}"
        Trainer(model, dataset, tcfg, out_dir=run_dir).train()
        result = _run_eval(model, dataset, variant, mode, run_dir, "final")
        row = {"grid": args.grid, "value": value,
               **{f"map_{thr}": v for thr, v in
                  sorted(result.map_by_threshold.items())}}
        rows.append(row)
        print(f"{args.grid}={value}: " +
              ", ".join(f"mAP@{t}={v:.4f}" for t, v in
                        sorted(result.map_by_threshold.items())))
    with (out / "summary.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    first_map = [r[sorted(k for k in r if k.startswith("map_"))[0]] for r in rows]
    bar_chart(out / "summary.svg", [str(v) for v in grid], first_map,
              title=f"ablation over {args.grid}", y_label="mAP")
    return 0


def cmd_inspect(args) -> int:
    config = load_config(args.config, args.set)
    mode = args.mode or config["train"]["mode"]
    dataset = _load_dataset(args.data)
    model = _load_model_from(args.checkpoint, config, dataset, mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = read_header(args.checkpoint)
    (out / "checkpoint_header.json").write_text(json.dumps(header, indent=2))

    bank = model.bank
    with (out / "bank.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["prototype", "assignment_count"]
                        + [f"f{j}" for j in range(bank.dim)])
        for i in range(bank.k):
            writer.writerow([i, int(bank.assignment_counts[i])]
                            + [f"{v:.8g}" for v in bank.prototypes[i]])

    feats_by_class: dict[int, list] = {}
    split = args.split
    if split not in dataset.splits:
        raise CliError(f"unknown split {split!r}")
    for sid in dataset.splits[split][:args.max_scenes]:
        scene = dataset.scene(sid)
        seeds, refined = model.extract_refined(scene.points, mode)
        for b in scene.boxes:
            inside = b.contains(seeds.positions)
            if inside.any():
                feats_by_class.setdefault(b.class_id, []).append(
                    refined.data[inside])
    hist = assignment_histogram(
        {c: np.concatenate(v) for c, v in feats_by_class.items()}, bank)
    with (out / "assignment_histograms.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class_id"] + [f"p{j}" for j in range(bank.k)])
        for cid, counts in sorted(hist.items()):
            writer.writerow([cid] + counts.tolist())

    sid = dataset.splits[split][0]
    scene = dataset.scene(sid)
    result = model.forward(scene.points, None, "baseline" if mode in
                           ("baseline", "pvm_only") else mode)
    with (out / "proposal_features.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        d = result.proposals.features.shape[1]
        writer.writerow(["proposal", "cx", "cy", "cz", "n_members"]
                        + [f"f{j}" for j in range(d)])
        for i in range(result.proposals.features.shape[0]):
            c = result.proposals.centers.data[i]
            writer.writerow([i, f"{c[0]:.6g}", f"{c[1]:.6g}", f"{c[2]:.6g}",
                             len(result.proposals.member_indices[i])]
                            + [f"{v:.8g}" for v in
                               result.proposals.features.data[i]])
    print(f"wrote bank.csv, assignment_histograms.csv, proposal_features.csv "
          f"to {out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protovote",
        description="Few-shot 3D detection on synthetic point-cloud scenes.")
    parser.add_argument("--print-default-config", action="store_true",
                        help="print the full default JSON config and exit")
    sub = parser.add_subparsers(dest="command")

    def common(p, seed_required):
        p.add_argument("--config", help="JSON config file (defaults applied)")
        p.add_argument("--set", action="append", default=[],
                       metavar="SECTION.KEY=VALUE",
                       help="override one config value")
        p.add_argument("--seed", type=int, required=seed_required,
                       default=None if seed_required else 0)
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("generate", help="write a synthetic dataset")
    common(p, seed_required=True)

    p = sub.add_parser("train", help="episodic training on base classes")
    common(p, seed_required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--mode", choices=MODES)

    p = sub.add_parser("eval", help="few-shot evaluation of a checkpoint")
    common(p, seed_required=False)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--tag", default="report")

    p = sub.add_parser("ablate", help="train and evaluate over one grid")
    common(p, seed_required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--grid", required=True, choices=sorted(ABLATION_GRIDS))

    p = sub.add_parser("inspect", help="dump bank / histogram / proposal CSVs")
    common(p, seed_required=False)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--split", default="base_val")
    p.add_argument("--max-scenes", type=int, default=10)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_default_config:
        print(json.dumps(DEFAULT_CONFIG, indent=2, sort_keys=True))
        return 0
    if not args.command:
        parser.print_help()
        return 2
    handlers = {"generate": cmd_generate, "train": cmd_train,
                "eval": cmd_eval, "ablate": cmd_ablate,
                "inspect": cmd_inspect}
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
