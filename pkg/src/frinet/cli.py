"""Command line entry point: ``frinet <command> ...``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

from .backbone import BackboneSpec, PretrainConfig, ToyBackbone, load_backbone, pretrain_on_base
from .data import SegmentationDataset
from .engine import Checkpoint, FeatureCache, TrainConfig, evaluate, model_from_checkpoint, train
from .metrics import EvalReport, dumps_fixed

logger = logging.getLogger("frinet")


def _cmd_generate(args):
    from .synthetic import SyntheticConfig, generate_synthetic_dataset

    cfg = SyntheticConfig(num_images=args.num_images, image_size=args.image_size,
                          shape_classes=args.classes, rng_seed=args.seed)
    ds = generate_synthetic_dataset(cfg)
    ds.save(args.out)
    (Path(args.out) / "synthetic.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    print(f"wrote {len(ds)} images to {args.out}")


def _cmd_pretrain(args):
    import torch

    ds = SegmentationDataset.load(args.dataset)
    split = ds.split(args.fold)
    torch.manual_seed(args.seed)
    backbone = ToyBackbone(channels=args.channels)
    cfg = PretrainConfig(epochs=args.epochs, learning_rate=args.lr, seed=args.seed)
    spec, losses = pretrain_on_base(backbone, ds, split, cfg, args.out)
    print(f"saved backbone to {spec.weights_uri}; pixel accuracy {spec.metadata['pixel_accuracy']:.4f}")


def _cmd_train(args):
    overrides = {"fold": args.fold, "shots": args.shots}
    if args.config:
        cfg = TrainConfig.from_file(args.config, **overrides)
    else:
        cfg = TrainConfig(**overrides)
    ds = SegmentationDataset.load(args.dataset)
    spec = BackboneSpec.from_file(args.backbone)
    backbone = load_backbone(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    ckpt = train(ds, ds.split(args.fold), cfg, spec, backbone, out, FeatureCache(backbone))
    meta = json.loads((out / "final.json").read_text())
    meta["dataset"] = str(Path(args.dataset).resolve())
    (out / "final.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    print(f"trained {ckpt.epoch} epochs; final loss {ckpt.metric_log[-1]['loss']:.4f}; checkpoint {out / 'final.pt'}")


def _cmd_eval(args):
    ckpt = Checkpoint.load(args.checkpoint)
    dataset_path = args.dataset
    if dataset_path is None:
        meta = json.loads(Path(args.checkpoint).with_suffix(".json").read_text())
        dataset_path = meta.get("dataset")
        if dataset_path is None:
            raise SystemExit("checkpoint does not record a dataset; pass --dataset")
    ds = SegmentationDataset.load(dataset_path)
    backbone = load_backbone(ckpt.backbone_ref)
    model = model_from_checkpoint(ckpt, backbone, FeatureCache(backbone))
    report = evaluate(ds, ds.split(ckpt.config.fold), ckpt.config, model, args.episodes, args.seed,
                      iou_mode=args.iou_mode, dump_relations=args.dump_relations,
                      dump_branches=args.dump_branches)
    text = report.to_json()
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(text)
    sys.stdout.write(text)


def load_reports(directory) -> list:
    rows = []
    for f in sorted(Path(directory).glob("*.json")):
        try:
            d = json.loads(f.read_text())
        except json.JSONDecodeError:
            continue
        if isinstance(d, dict) and "miou" in d and "per_class_iou" in d:
            rows.append((f.stem, EvalReport.from_dict(d)))
    return rows


def format_reports(rows, fmt: str) -> str:
    records = [{"name": name, "fold": r.fold, "shots": r.shots, "episodes": r.num_episodes,
                "miou": 100.0 * r.miou, "status": r.status,
                **{f"class_{c}": 100.0 * v for c, v in sorted(r.per_class_iou.items())}}
               for name, r in rows]
    if fmt == "json":
        return dumps_fixed(records)
    keys = []
    for rec in records:
        keys += [k for k in rec if k not in keys]
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=keys, restval="")
        w.writeheader()
        for rec in records:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in rec.items()})
        return buf.getvalue()
    lines = ["| " + " | ".join(keys) + " |", "|" + "---|" * len(keys)]
    for rec in records:
        cells = [f"{rec[k]:.2f}" if isinstance(rec.get(k), float) else str(rec.get(k, "")) for k in keys]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def _cmd_report(args):
    rows = load_reports(args.input)
    if not rows:
        raise SystemExit(f"no evaluation reports found in {args.input}")
    sys.stdout.write(format_reports(rows, args.format))


def _cmd_compare(args):
    from .harness import SharedConfig, compare_harness

    cfg = TrainConfig.from_file(args.config, fold=args.fold) if args.config else TrainConfig(fold=args.fold)
    train_ds = SegmentationDataset.load(args.dataset)
    eval_ds = SegmentationDataset.load(args.eval_dataset or args.dataset)
    backbone = load_backbone(BackboneSpec.from_file(args.backbone))
    shared = SharedConfig(train_ds, eval_ds, args.fold, backbone, cfg, args.episodes, args.seed,
                          FeatureCache(backbone))
    report = compare_harness(args.mode, shared)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.md").write_text(report.to_markdown())
        (out / "comparison.csv").write_text(report.to_csv())
        (out / "comparison.json").write_text(report.to_json())
    sys.stdout.write(report.to_markdown())


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="frinet", description="Few-shot rotation-invariant segmentation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render the synthetic oriented-shapes dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--num-images", type=int, default=600)
    g.add_argument("--image-size", type=int, default=64)
    g.add_argument("--classes", type=int, default=9)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=_cmd_generate)

    pt = sub.add_parser("pretrain", help="pretrain the toy backbone on base classes of a fold")
    pt.add_argument("--fold", type=int, required=True)
    pt.add_argument("--dataset", required=True)
    pt.add_argument("--out", required=True)
    pt.add_argument("--epochs", type=int, default=PretrainConfig.epochs)
    pt.add_argument("--lr", type=float, default=PretrainConfig.learning_rate)
    pt.add_argument("--channels", type=int, default=64)
    pt.add_argument("--seed", type=int, default=0)
    pt.set_defaults(func=_cmd_pretrain)

    t = sub.add_parser("train", help="episodic meta-training with a frozen backbone")
    t.add_argument("--fold", type=int, required=True)
    t.add_argument("--shots", type=int, default=1)
    t.add_argument("--dataset", required=True)
    t.add_argument("--backbone", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on novel-class episodes")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int, required=True)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--report")
    e.add_argument("--dataset")
    e.add_argument("--iou-mode", choices=("pooled", "episode_mean"), default="pooled")
    e.add_argument("--dump-relations")
    e.add_argument("--dump-branches")
    e.set_defaults(func=_cmd_eval)

    r = sub.add_parser("report", help="tabulate evaluation reports found in a directory")
    r.add_argument("--in", dest="input", required=True)
    r.add_argument("--format", choices=("json", "csv", "md"), default="md")
    r.set_defaults(func=_cmd_report)

    c = sub.add_parser("compare", help="run comparison arms on a shared setup")
    c.add_argument("--mode", nargs="+", required=True,
                   choices=("baseline", "rotation_aug", "frinet", "orientation_sweep"))
    c.add_argument("--dataset", required=True)
    c.add_argument("--eval-dataset")
    c.add_argument("--backbone", required=True)
    c.add_argument("--fold", type=int, default=0)
    c.add_argument("--config")
    c.add_argument("--episodes", type=int, default=1000)
    c.add_argument("--seed", type=int, default=1000)
    c.add_argument("--out")
    c.set_defaults(func=_cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.func(args)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
