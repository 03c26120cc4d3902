"""Experiment runner CLI: generate / train / evaluate / plot / ablate.

Every command is driven by a flat key-value spec file (see
``experiment.parse_spec_text``) or the built-in ``biased-context`` preset,
and is deterministic given the same spec and seeds. Outputs live under the
experiment directory: datasets/, checkpoints/, logs/, metrics/, figures/.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .evaluate import MetricsReport, evaluate_model, miou
from .experiment import (
    ExperimentSpec,
    biased_context_spec,
    ensure_datasets,
    load_spec,
    run_experiment,
    spec_to_text,
)
from .model import load_checkpoint
from .synth import TaskSequence, load_dataset
from .trainer import ABLATIONS


def _resolve_spec(args) -> ExperimentSpec:
    if getattr(args, "preset", None):
        if args.preset != "biased-context":
            raise SystemExit(f"unknown preset {args.preset!r}")
        spec = biased_context_spec()
    elif getattr(args, "spec", None):
        spec = load_spec(args.spec)
    else:
        raise SystemExit("provide --spec FILE or --preset biased-context")
    if getattr(args, "out", None):
        spec.out_dir = Path(args.out)
    if getattr(args, "seeds", None):
        spec.seeds = [int(s) for s in args.seeds.split(",")]
    train = spec.train
    if getattr(args, "ablation", None):
        train = replace(train, ablation=args.ablation)
    if getattr(args, "protocol", None):
        train = replace(train, protocol=args.protocol)
    if getattr(args, "mode", None):
        train = replace(train, mode=args.mode)
    spec.train = train
    spec.validate()
    return spec


def cmd_generate(args) -> int:
    spec = _resolve_spec(args)
    ensure_datasets(spec)
    print(f"datasets ready under {spec.out_dir / 'datasets'}")
    return 0


def cmd_train(args) -> int:
    spec = _resolve_spec(args)
    summary = run_experiment(spec, resume=args.resume)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_ablate(args) -> int:
    spec = _resolve_spec(args)
    ablations = [a.strip() for a in args.ablations.split(",")] if args.ablations else list(ABLATIONS)
    summary = run_experiment(spec, ablations=ablations, resume=args.resume)
    print(json.dumps(summary, indent=2))
    print(f"summary table: {spec.out_dir / 'metrics' / 'summary.csv'}")
    return 0


def cmd_evaluate(args) -> int:
    model, inventory = load_checkpoint(args.checkpoint)
    items = load_dataset(args.data)
    task = TaskSequence(partitions=[tuple(p) for p in inventory], mode="overlapped")
    num_classes = max(task.all_classes)
    cm = evaluate_model(model, items, num_classes, known_classes=set(task.all_classes))
    from .evaluate import task_groups

    report = miou(cm, task_groups(task))
    out = Path(args.out) if args.out else Path(args.checkpoint).with_suffix(".metrics.json")
    report.save(out)
    for name, value in report.group_miou.items():
        print(f"{name}: {'-' if value is None else f'{value:.4f}'}")
    print(f"wrote {out}")
    return 0


def _load_seed_reports(metrics_dir: Path) -> dict[str, list[MetricsReport]]:
    by_ablation: dict[str, list[MetricsReport]] = {}
    for sub in sorted(p for p in metrics_dir.iterdir() if p.is_dir()):
        seeds = sorted(sub.glob("seed*.json"))
        if seeds:
            by_ablation[sub.name] = [MetricsReport.load(p) for p in seeds]
    return by_ablation


def cmd_plot(args) -> int:
    metrics_dir = Path(args.metrics)
    if not metrics_dir.exists():
        raise SystemExit(f"no metrics directory at {metrics_dir}")
    by_ablation = _load_seed_reports(metrics_dir)
    if not by_ablation:
        raise SystemExit(f"no seed metrics found under {metrics_dir}")
    out_dir = Path(args.out) if args.out else metrics_dir.parent / "figures"
    out_dir.mkdir(parents=True, exist_ok=True)

    # mIoU evolution: seed-averaged "all" group per step, one curve per method
    evo_rows = []
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, reports in by_ablation.items():
        steps = [h["step"] for h in reports[0].per_step_history]
        curves = []
        for r in reports:
            curves.append([h["group_miou"]["all"] for h in r.per_step_history])
        mean = np.mean(np.asarray(curves, dtype=np.float64), axis=0)
        ax.plot(steps, mean, marker="o", label=name)
        for s, v in zip(steps, mean):
            evo_rows.append({"ablation": name, "step": s, "all_miou": f"{v:.6f}"})
    ax.set_xlabel("learning step")
    ax.set_ylabel("mIoU (all classes seen)")
    ax.set_title("mIoU evolution")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_dir / "evolution.png", dpi=150)
    plt.close(fig)
    with (out_dir / "evolution.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["ablation", "step", "all_miou"])
        w.writeheader()
        w.writerows(evo_rows)

    # final per-class IoU bars, one group of bars per class
    cls_rows = []
    fig, ax = plt.subplots(figsize=(7, 4))
    names = list(by_ablation)
    num_classes = len(next(iter(by_ablation.values()))[0].per_class_iou)
    width = 0.8 / max(len(names), 1)
    for i, name in enumerate(names):
        vals = []
        for c in range(num_classes):
            per_seed = [r.per_class_iou[c] for r in by_ablation[name] if r.per_class_iou[c] is not None]
            vals.append(float(np.mean(per_seed)) if per_seed else 0.0)
            cls_rows.append({"ablation": name, "class": c, "iou": f"{vals[-1]:.6f}"})
        xs = np.arange(num_classes) + i * width
        ax.bar(xs, vals, width=width, label=name)
    ax.set_xticks(np.arange(num_classes) + 0.4 - width / 2)
    ax.set_xticklabels([str(c) for c in range(num_classes)])
    ax.set_xlabel("class index")
    ax.set_ylabel("IoU")
    ax.set_title("final per-class IoU")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_dir / "per_class_iou.png", dpi=150)
    plt.close(fig)
    with (out_dir / "per_class.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["ablation", "class", "iou"])
        w.writeheader()
        w.writerows(cls_rows)

    print(f"figures written to {out_dir}")
    return 0


def cmd_show_spec(args) -> int:
    print(spec_to_text(biased_context_spec()), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctxseg", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def add_common(sp, seeds=True):
        sp.add_argument("--spec", help="flat key-value experiment spec file")
        sp.add_argument("--preset", help="built-in spec: biased-context")
        sp.add_argument("--out", help="experiment output directory (overrides spec)")
        if seeds:
            sp.add_argument("--seeds", help="comma-separated seed list (overrides spec)")
        sp.add_argument("--protocol", help="override protocol, e.g. 15-1")
        sp.add_argument("--mode", choices=["disjoint", "overlapped"], help="override mode")

    g = sub.add_parser("generate", help="materialize train/test datasets on disk")
    add_common(g, seeds=False)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="run the continual sequence for each seed")
    add_common(t)
    t.add_argument("--ablation", choices=ABLATIONS, help="override ablation variant")
    t.add_argument("--resume", action="store_true", help="reuse completed step checkpoints")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", help="run several ablation variants side by side")
    add_common(a)
    a.add_argument("--ablations", help=f"comma list from {','.join(ABLATIONS)} (default: all)")
    a.add_argument("--resume", action="store_true")
    a.set_defaults(func=cmd_ablate)

    e = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset directory")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="dataset directory with manifest.jsonl")
    e.add_argument("--out", help="metrics JSON path")
    e.set_defaults(func=cmd_evaluate)

    f = sub.add_parser("plot", help="mIoU evolution and per-class charts from metrics")
    f.add_argument("--metrics", required=True, help="experiment metrics/ directory")
    f.add_argument("--out", help="figures output directory")
    f.set_defaults(func=cmd_plot)

    s = sub.add_parser("spec", help="print the biased-context preset spec file")
    s.set_defaults(func=cmd_show_spec)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
