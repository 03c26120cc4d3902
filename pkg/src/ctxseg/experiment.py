"""Experiment specs and the seeded multi-run harness.

A spec is a flat ``key = value`` text file describing the scene generator,
the task protocol and the training hyper-parameters. One experiment runs one
or more ablation variants over a list of seeds against the same on-disk
datasets, then writes per-seed metrics, a seed-averaged summary per variant
and a combined CSV with one row per (ablation, group).

Outputs live under a fixed tree inside the experiment directory:
datasets/, checkpoints/, logs/, metrics/, figures/.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from .evaluate import MetricsReport, write_group_csv
from .model import ArchConfig
from .synth import SceneSpec, generate_dataset, load_dataset, save_dataset, uniform_cooccurrence
from .trainer import ABLATIONS, TrainConfig, run_continual

WORKERS_ENV = "CTXSEG_WORKERS"


@dataclass
class ExperimentSpec:
    name: str
    train: TrainConfig
    scene: SceneSpec
    test_scene: SceneSpec
    train_count: int = 160
    test_count: int = 80
    seeds: list[int] = field(default_factory=lambda: [0])
    out_dir: Path = Path("runs/experiment")

    def validate(self) -> None:
        if not self.seeds:
            raise ValueError("need at least one seed")
        if self.train_count < 1 or self.test_count < 1:
            raise ValueError("dataset counts must be >= 1")
        self.train.validate()
        self.scene.validate()
        self.test_scene.validate()


def parse_kv_text(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; '#' starts a comment; blank lines ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _build_cooccurrence(num_classes: int, kv: dict[str, str], prefix: str) -> np.ndarray | None:
    default_key = f"{prefix}cooc_default"
    pair_keys = {k: v for k, v in kv.items() if k.startswith(f"{prefix}cooc_") and k != default_key}
    if default_key not in kv and not pair_keys:
        return None
    m = uniform_cooccurrence(num_classes, float(kv.get(default_key, 0.3)))
    for key, value in pair_keys.items():
        parts = key[len(f"{prefix}cooc_") :].split("_")
        if len(parts) != 2:
            raise ValueError(f"bad co-occurrence key {key!r}, expected {prefix}cooc_<a>_<b>")
        a, b = int(parts[0]), int(parts[1])
        if not (1 <= a <= num_classes and 1 <= b <= num_classes):
            raise ValueError(f"co-occurrence key {key!r} references unknown class")
        m[a, b] = m[b, a] = float(value)
    return m


def _parse_bool(v: str) -> bool:
    if v.lower() in ("1", "true", "yes", "on"):
        return True
    if v.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {v!r}")


def parse_spec_text(text: str, base_dir: Path | None = None) -> ExperimentSpec:
    kv = parse_kv_text(text)

    def get(key: str, default):
        return kv.get(key, default)

    num_classes = int(get("num_fg_classes", 4))
    image_size = (int(get("image_size", 32)), int(get("image_size", 32)))
    if "image_height" in kv or "image_width" in kv:
        image_size = (int(get("image_height", image_size[0])), int(get("image_width", image_size[1])))

    scene = SceneSpec(
        image_size=image_size,
        num_fg_classes=num_classes,
        cooccurrence=_build_cooccurrence(num_classes, kv, ""),
        shapes_per_image=(int(get("shapes_min", 1)), int(get("shapes_max", 3))),
        shape_scale=(float(get("shape_scale_min", 0.14)), float(get("shape_scale_max", 0.26))),
        rng_seed=int(get("train_seed", 100)),
    )
    test_scene = SceneSpec(
        image_size=image_size,
        num_fg_classes=num_classes,
        cooccurrence=_build_cooccurrence(num_classes, kv, "test_") or scene.cooccurrence.copy(),
        shapes_per_image=scene.shapes_per_image,
        shape_scale=scene.shape_scale,
        rng_seed=int(get("test_seed", 999)),
    )
    arch = ArchConfig(
        widths=tuple(int(v) for v in str(get("widths", "24,32,48")).split(",")),
        feature_channels=int(get("feature_channels", 24)),
        gn_groups=int(get("gn_groups", 4)),
    )
    train = TrainConfig(
        protocol=str(get("protocol", "15-1")),
        mode=str(get("mode", "overlapped")),
        epochs_per_step=int(get("epochs_per_step", 10)),
        batch_size=int(get("batch_size", 8)),
        learning_rate=float(get("learning_rate", 0.05)),
        momentum=float(get("momentum", 0.9)),
        weight_decay=float(get("weight_decay", 1e-4)),
        alpha=float(get("alpha", 1.0)),
        gamma=float(get("gamma", 0.01)),
        tau=float(get("tau", 0.8)),
        seed=int(get("seed", 0)),
        ablation=str(get("ablation", "full")),
        fill=str(get("fill", "mean")),
        flip=_parse_bool(str(get("flip", "false"))),
        ratio_cap=float(get("ratio_cap", 20.0)),
        arch=arch,
    )
    out_dir = Path(get("out", "runs/experiment"))
    if base_dir is not None and not out_dir.is_absolute():
        out_dir = base_dir / out_dir
    spec = ExperimentSpec(
        name=str(get("name", "experiment")),
        train=train,
        scene=scene,
        test_scene=test_scene,
        train_count=int(get("train_count", 160)),
        test_count=int(get("test_count", 80)),
        seeds=[int(s) for s in str(get("seeds", "0")).split(",")],
        out_dir=out_dir,
    )
    spec.validate()
    return spec


def load_spec(path: str | Path) -> ExperimentSpec:
    path = Path(path)
    return parse_spec_text(path.read_text(), base_dir=path.parent)


def spec_to_text(spec: ExperimentSpec) -> str:
    """Serialize a spec back to the flat key-value format."""
    t, s = spec.train, spec.scene
    lines = [
        f"name = {spec.name}",
        f"out = {spec.out_dir}",
        f"seeds = {','.join(str(x) for x in spec.seeds)}",
        "",
        f"protocol = {t.protocol}",
        f"mode = {t.mode}",
        f"epochs_per_step = {t.epochs_per_step}",
        f"batch_size = {t.batch_size}",
        f"learning_rate = {t.learning_rate}",
        f"momentum = {t.momentum}",
        f"weight_decay = {t.weight_decay}",
        f"alpha = {t.alpha}",
        f"gamma = {t.gamma}",
        f"tau = {t.tau}",
        f"seed = {t.seed}",
        f"ablation = {t.ablation}",
        f"fill = {t.fill}",
        f"flip = {str(t.flip).lower()}",
        f"ratio_cap = {t.ratio_cap}",
        f"widths = {','.join(str(w) for w in t.arch.widths)}",
        f"feature_channels = {t.arch.feature_channels}",
        f"gn_groups = {t.arch.gn_groups}",
        "",
        f"image_size = {s.image_size[0]}",
        f"num_fg_classes = {s.num_fg_classes}",
        f"shapes_min = {s.shapes_per_image[0]}",
        f"shapes_max = {s.shapes_per_image[1]}",
        f"shape_scale_min = {s.shape_scale[0]}",
        f"shape_scale_max = {s.shape_scale[1]}",
        f"train_count = {spec.train_count}",
        f"test_count = {spec.test_count}",
        f"train_seed = {s.rng_seed}",
        f"test_seed = {spec.test_scene.rng_seed}",
    ]
    k = s.num_fg_classes
    for a in range(1, k + 1):
        for b in range(a + 1, k + 1):
            lines.append(f"cooc_{a}_{b} = {s.cooccurrence[a, b]}")
    for a in range(1, k + 1):
        for b in range(a + 1, k + 1):
            lines.append(f"test_cooc_{a}_{b} = {spec.test_scene.cooccurrence[a, b]}")
    return "\n".join(lines) + "\n"


def biased_context_spec(out_dir: str | Path = "runs/biased_context", seeds=(0, 1, 2)) -> ExperimentSpec:
    """Two-step benchmark where old classes co-occur heavily with new ones.

    Four old classes (step 1) then two new classes (step 2); the training
    co-occurrence forces old-class shapes to appear mostly inside new-class
    images while the test split mixes contexts uniformly, so context
    overfitting shows up directly in the grouped mIoU.
    """
    num_classes = 6
    cooc = uniform_cooccurrence(num_classes, 0.15)
    for old in (1, 2, 3, 4):
        for new in (5, 6):
            cooc[old, new] = cooc[new, old] = 0.75
    scene = SceneSpec(
        image_size=(32, 32),
        num_fg_classes=num_classes,
        cooccurrence=cooc,
        shapes_per_image=(2, 4),
        shape_scale=(0.16, 0.30),
        rng_seed=1001,
    )
    test_scene = SceneSpec(
        image_size=(32, 32),
        num_fg_classes=num_classes,
        cooccurrence=uniform_cooccurrence(num_classes, 0.25),
        shapes_per_image=(2, 4),
        shape_scale=(0.16, 0.30),
        rng_seed=4242,
    )
    train = TrainConfig(
        protocol="4-2",
        mode="overlapped",
        epochs_per_step=12,
        batch_size=8,
        learning_rate=0.05,
        momentum=0.9,
        weight_decay=1e-4,
        alpha=1.0,
        gamma=0.01,
        tau=0.8,
        ablation="full",
        fill="mean",
        arch=ArchConfig(widths=(12, 16, 24), feature_channels=12, gn_groups=4),
    )
    return ExperimentSpec(
        name="biased_context",
        train=train,
        scene=scene,
        test_scene=test_scene,
        train_count=160,
        test_count=96,
        seeds=list(seeds),
        out_dir=Path(out_dir),
    )


def ensure_datasets(spec: ExperimentSpec):
    """Generate train/test splits on disk if missing, then load them.

    Runs always read the saved 8-bit rasters so that repeated invocations see
    bit-identical data regardless of whether this call generated or reused.
    """
    dd = spec.out_dir / "datasets"
    for split, scene, count in (
        ("train", spec.scene, spec.train_count),
        ("test", spec.test_scene, spec.test_count),
    ):
        if not (dd / split / "manifest.jsonl").exists():
            save_dataset(generate_dataset(scene, count), dd / split)
    return load_dataset(dd / "train"), load_dataset(dd / "test")


def _run_one_seed(payload: tuple) -> dict:
    spec, ablation, seed, resume = payload
    config = replace(spec.train, ablation=ablation, seed=seed)
    train_items, test_items = ensure_datasets(spec)
    tag = f"{ablation}/seed{seed}"
    _, report = run_continual(
        config,
        train_items,
        test_items,
        spec.scene.num_fg_classes,
        out_dir=spec.out_dir,
        run_tag=tag,
        resume=resume,
    )
    seed_path = spec.out_dir / "metrics" / ablation / f"seed{seed}.json"
    seed_path.parent.mkdir(parents=True, exist_ok=True)
    report.save(seed_path)
    return {"ablation": ablation, "seed": seed, "report": report.to_json()}


def _workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def run_experiment(
    spec: ExperimentSpec,
    ablations: list[str] | None = None,
    resume: bool = False,
) -> dict:
    """Run every (ablation, seed) pair and write metrics + summaries."""
    spec.validate()
    ablations = ablations or [spec.train.ablation]
    for a in ablations:
        if a not in ABLATIONS:
            raise ValueError(f"unknown ablation {a!r}")
    spec.out_dir.mkdir(parents=True, exist_ok=True)
    ensure_datasets(spec)  # generate once up front, workers then only read

    jobs = [(spec, a, s, resume) for a in ablations for s in spec.seeds]
    workers = _workers()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers, mp_context=get_context("spawn")) as pool:
            results = list(pool.map(_run_one_seed, jobs))
    else:
        results = [_run_one_seed(j) for j in jobs]

    summary = {"name": spec.name, "seeds": spec.seeds, "ablations": {}}
    csv_rows = []
    for a in ablations:
        reports = [MetricsReport.from_json(r["report"]) for r in results if r["ablation"] == a]
        groups: dict[str, dict] = {}
        group_names = reports[0].group_miou.keys()
        for g in group_names:
            vals = [r.group_miou[g] for r in reports if r.group_miou[g] is not None]
            groups[g] = {
                "mean": float(np.mean(vals)) if vals else None,
                "std": float(np.std(vals)) if vals else None,
                "per_seed": [r.group_miou[g] for r in reports],
            }
            csv_rows.append(
                {
                    "ablation": a,
                    "group": g,
                    "miou": "" if groups[g]["mean"] is None else f"{groups[g]['mean']:.6f}",
                    "std": "" if groups[g]["std"] is None else f"{groups[g]['std']:.6f}",
                    "n_seeds": len(reports),
                }
            )
        summary["ablations"][a] = {"groups": groups}
        (spec.out_dir / "metrics" / a).mkdir(parents=True, exist_ok=True)
        (spec.out_dir / "metrics" / a / "summary.json").write_text(
            json.dumps({"ablation": a, "groups": groups}, indent=2)
        )
    write_group_csv(spec.out_dir / "metrics" / "summary.csv", csv_rows)
    (spec.out_dir / "metrics" / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary
