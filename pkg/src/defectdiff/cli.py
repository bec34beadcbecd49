"""Command-line pipeline driver.

Subcommands mirror the experimental protocol: train the defect generator,
sample synthetic minority images, materialize augmented manifests, train and
evaluate frozen-backbone classifiers on the real and augmented arms, project
features with t-SNE, and build the side-by-side report. Every command reads
one JSON config; flags override individual fields. Outputs land only under
the config's output root, each stamped with the config hash and seed.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
from pathlib import Path

from .classifier import (
    Backbone,
    build_classifier,
    compute_class_weights,
    load_classifier,
    predict,
    save_classifier,
    train_classifier,
    write_history,
)
from .config import PipelineConfig, resolve_weights_dir, write_json_atomic
from .ddpm_trainer import DdpmTrainConfig, train_ddpm
from .feature_analysis import (
    extract_features,
    plot_embedding,
    projection_metadata,
    tsne_project,
    write_embedding_csv,
)
from .ingestion import (
    LABEL_DEFECTIVE,
    LABEL_NON_DEFECTIVE,
    build_augmented_manifest,
    load_binary_folders,
    load_minority_folder,
    stratified_split,
)
from .metrics import ARM_AUGMENTED, ARM_REAL, build_roc_curve, compare_arms, evaluate_scores
from .sampler import META_FILE, GenerationRequest, generate, preview_grid
from .schedule import make_linear_schedule

ARMS = ("real", "augmented")
_ARM_NAMES = {"real": ARM_REAL, "augmented": ARM_AUGMENTED}


# ----------------------------------------------------------------- helpers

def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.from_json(args.config)
    overrides = {}
    if getattr(args, "output_root", None):
        overrides["output_root"] = args.output_root
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return cfg.with_overrides(**overrides) if overrides else cfg


def _device(args) -> str:
    choice = getattr(args, "device", "cpu")
    if choice == "gpu":
        import torch

        if not torch.cuda.is_available():
            raise RuntimeError("--device gpu requested but no CUDA device is available")
        return "cuda"
    return "cpu"


def _schedule(cfg: PipelineConfig):
    return make_linear_schedule(
        cfg.schedule.num_timesteps, cfg.schedule.beta_start, cfg.schedule.beta_end
    )


def _require_checkpoint(cfg: PipelineConfig) -> Path:
    meta = cfg.ddpm_dir / "meta.json"
    if not meta.is_file():
        raise FileNotFoundError(
            f"no generator checkpoint at {cfg.ddpm_dir}; run `defectdiff train-ddpm` first"
        )
    return cfg.ddpm_dir


def _require_synthetic(cfg: PipelineConfig) -> Path:
    if not cfg.synthetic_dir.is_dir() or not any(cfg.synthetic_dir.glob("*.png")):
        raise FileNotFoundError(
            f"no synthetic images under {cfg.synthetic_dir}; run `defectdiff generate` first"
        )
    return cfg.synthetic_dir


def _arm_manifest(cfg: PipelineConfig, arm: str):
    real = load_binary_folders(cfg.nondef_dir, cfg.defective_dir)
    if arm == "real":
        return real
    _require_synthetic(cfg)
    return build_augmented_manifest(real, cfg.synthetic_dir)


def _derived_seed(cfg: PipelineConfig, arm: str, backbone: str) -> int:
    # Disjoint deterministic seeds per experiment cell.
    return cfg.seed + 1000 * ARMS.index(arm) + 100 * sorted(cfg.classifiers).index(backbone)


def _stamp(cfg: PipelineConfig, **extra) -> dict:
    return {"config_hash": cfg.config_hash(), "seed": cfg.seed, **extra}


# -------------------------------------------------------------- subcommands

def cmd_train_ddpm(args) -> int:
    cfg = _load_config(args)
    cfg.validate_paths()
    train_cfg = DdpmTrainConfig(
        checkpoint_dir=str(cfg.ddpm_dir),
        epochs=args.epochs if args.epochs is not None else cfg.ddpm.epochs,
        batch_size=cfg.ddpm.batch_size,
        learning_rate=cfg.ddpm.learning_rate,
        weight_decay=cfg.ddpm.weight_decay,
        log_every_steps=cfg.ddpm.log_every_steps,
        seed=cfg.seed,
    )
    manifest = load_minority_folder(cfg.defective_dir)
    ckpt = train_ddpm(manifest, _schedule(cfg), cfg.denoiser, train_cfg, device=_device(args))
    write_json_atomic(ckpt / "run_meta.json", _stamp(cfg))
    print(f"checkpoint written to {ckpt}")
    return 0


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    ckpt = _require_checkpoint(cfg)
    count = args.count if args.count is not None else cfg.generation.num_images
    req = GenerationRequest(
        num_images=count,
        seed=cfg.seed,
        output_dir=str(cfg.synthetic_dir),
        batch_size=cfg.generation.batch_size,
    )
    paths = generate(ckpt, req, device=_device(args))
    # The grid lives outside the synthetic dir so manifest scans only ever
    # see generated samples there.
    grid = preview_grid(paths, cols=min(10, len(paths)),
                        out_path=Path(cfg.output_root) / "preview_grid.png")
    meta_path = cfg.synthetic_dir / META_FILE
    stamped = {**json.loads(meta_path.read_text()), **_stamp(cfg)}
    write_json_atomic(meta_path, stamped)
    print(f"{len(paths)} images written to {cfg.synthetic_dir} (grid: {grid.name})")
    return 0


def cmd_augment(args) -> int:
    cfg = _load_config(args)
    cfg.validate_paths()
    _require_synthetic(cfg)
    cfg.manifests_dir.mkdir(parents=True, exist_ok=True)

    real = load_binary_folders(cfg.nondef_dir, cfg.defective_dir,
                               report_path=cfg.manifests_dir / "skipped_files.tsv")
    augmented = build_augmented_manifest(real, cfg.synthetic_dir)
    real.to_jsonl(cfg.manifests_dir / "real.jsonl")
    augmented.to_jsonl(cfg.manifests_dir / "augmented.jsonl")

    n_def = augmented.count(label=LABEL_DEFECTIVE)
    n_nondef = augmented.count(label=LABEL_NON_DEFECTIVE)
    composition = _stamp(
        cfg,
        real_non_defective=real.count(label=LABEL_NON_DEFECTIVE),
        real_defective=real.count(label=LABEL_DEFECTIVE),
        synthetic_defective=augmented.count(label=LABEL_DEFECTIVE, source="synthetic"),
        defective_share=n_def / len(augmented),
        imbalance_ratio=n_nondef / n_def,
    )
    write_json_atomic(cfg.manifests_dir / "composition.json", composition)
    print(
        f"augmented manifest: {len(augmented)} records, "
        f"defective share {composition['defective_share']:.4f}, "
        f"imbalance ratio {composition['imbalance_ratio']:.3f}"
    )
    return 0


def _train_one(cfg: PipelineConfig, arm: str, backbone: str, device: str):
    """Train a single experiment cell; removes its partial dir on failure."""
    clf_cfg = cfg.classifiers[backbone]
    manifest = _arm_manifest(cfg, arm)
    train_m, val_m = stratified_split(manifest, cfg.split.val_fraction, cfg.seed)
    weights = compute_class_weights(
        train_m.count(label=LABEL_NON_DEFECTIVE), train_m.count(label=LABEL_DEFECTIVE)
    )
    seed = _derived_seed(cfg, arm, backbone)
    run_dir = cfg.classifier_dir(arm, backbone)
    try:
        model = build_classifier(Backbone(backbone), pretrained=cfg.pretrained, seed=seed)
        model.to(device)
        model, history = train_classifier(model, train_m, val_m, weights, clf_cfg)
        save_classifier(model, run_dir, clf_cfg, pretrained=cfg.pretrained, seed=seed)
        write_history(history, run_dir / "history.csv")
        write_json_atomic(run_dir / "run_meta.json", _stamp(
            cfg,
            arm=arm,
            backbone=backbone,
            derived_seed=seed,
            class_weights={"w0": weights.w0, "w1": weights.w1},
            train_size=len(train_m),
            val_size=len(val_m),
        ))
    except Exception:
        shutil.rmtree(run_dir, ignore_errors=True)
        raise
    return run_dir, val_m


def cmd_train_classifier(args) -> int:
    cfg = _load_config(args)
    cfg.validate_paths()
    if args.backbone not in cfg.classifiers:
        raise ValueError(
            f"backbone {args.backbone!r} not configured; have {sorted(cfg.classifiers)}"
        )
    run_dir, _ = _train_one(cfg, args.arm, args.backbone, _device(args))
    print(f"classifier written to {run_dir}")
    return 0


def _evaluate_one(cfg: PipelineConfig, arm: str, backbone: str, threshold=None):
    run_dir = cfg.classifier_dir(arm, backbone)
    if not (run_dir / "head_weights.pt").is_file():
        raise FileNotFoundError(
            f"no trained classifier at {run_dir}; "
            f"run `defectdiff train-classifier --arm {arm} --backbone {backbone}` first"
        )
    clf_cfg = cfg.classifiers[backbone]
    if threshold is None:
        threshold = clf_cfg.decision_threshold
    model = load_classifier(run_dir)
    manifest = _arm_manifest(cfg, arm)
    _, val_m = stratified_split(manifest, cfg.split.val_fraction, cfg.seed)
    preds = predict(model, val_m, threshold,
                    image_size=clf_cfg.image_size, batch_size=clf_cfg.batch_size)
    scores = [p.score for p in preds]
    labels = [1 if r.label == LABEL_DEFECTIVE else 0 for r in val_m.records]
    report = evaluate_scores(scores, labels, threshold, _ARM_NAMES[arm], backbone)

    cfg.reports_dir.mkdir(parents=True, exist_ok=True)
    payload = _stamp(cfg, **report.to_dict(), threshold=threshold, val_size=len(val_m))
    write_json_atomic(cfg.reports_dir / f"{arm}_{backbone}.json", payload)
    build_roc_curve(scores, labels).to_csv(cfg.reports_dir / f"{arm}_{backbone}_roc.csv")
    return report, payload


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    report, _ = _evaluate_one(cfg, args.arm, args.backbone, args.threshold)
    print(
        f"{args.arm}/{args.backbone}: accuracy {report.accuracy:.4f}, "
        f"precision {report.precision:.4f}, recall {report.recall:.4f}, "
        f"f1 {report.f1:.4f}, roc_auc {report.roc_auc:.4f}"
    )
    return 0


def cmd_tsne(args) -> int:
    cfg = _load_config(args)
    cfg.validate_paths()
    manifest = _arm_manifest(cfg, "augmented")
    backbone = cfg.tsne.backbone
    image_size = cfg.classifiers.get(backbone, next(iter(cfg.classifiers.values()))).image_size
    model = build_classifier(Backbone(backbone), pretrained=cfg.pretrained, seed=cfg.seed)
    features = extract_features(manifest, model, image_size=image_size)
    tsne_cfg = cfg.tsne.to_tsne_config()
    embedding = tsne_project(features, tsne_cfg)

    cfg.tsne_dir.mkdir(parents=True, exist_ok=True)
    write_embedding_csv(embedding, features.categories, features.paths,
                        cfg.tsne_dir / "embedding.csv")
    plot_embedding(embedding, features.categories, cfg.tsne_dir / "tsne.png")
    write_json_atomic(cfg.tsne_dir / "projection_meta.json",
                      _stamp(cfg, **projection_metadata(features, tsne_cfg)))
    print(f"embedding for {features.n} samples written to {cfg.tsne_dir}")
    return 0


def _comparison_plot(reports, metric: str, out_path: Path) -> None:
    import matplotlib.pyplot as plt
    import numpy as np

    backbones = sorted({r.backbone for arm in reports.values() for r in arm.values()})
    x = np.arange(len(backbones))
    width = 0.38
    fig, ax = plt.subplots(figsize=(7, 4))
    for i, arm in enumerate(ARMS):
        values = [getattr(reports[arm][b], metric) for b in backbones]
        ax.bar(x + (i - 0.5) * width, values, width, label=_ARM_NAMES[arm])
    ax.set_xticks(x)
    ax.set_xticklabels(backbones)
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel(metric)
    ax.legend()
    fig.savefig(out_path, dpi=150, bbox_inches="tight")
    plt.close(fig)


def cmd_report(args) -> int:
    cfg = _load_config(args)
    cfg.validate_paths()
    _require_synthetic(cfg)
    device = _device(args)

    reports = {arm: {} for arm in ARMS}
    thresholds = {}
    for arm in ARMS:
        for backbone in sorted(cfg.classifiers):
            _train_one(cfg, arm, backbone, device)
            report, _ = _evaluate_one(cfg, arm, backbone)
            reports[arm][backbone] = report
            thresholds[backbone] = cfg.classifiers[backbone].decision_threshold

    comparisons = {
        backbone: compare_arms(reports["real"][backbone], reports["augmented"][backbone])
        for backbone in sorted(cfg.classifiers)
    }

    cfg.reports_dir.mkdir(parents=True, exist_ok=True)
    for backbone, cmp_ in comparisons.items():
        (cfg.reports_dir / f"comparison_{backbone}.md").write_text(cmp_.to_markdown())
        cmp_.to_csv(cfg.reports_dir / f"comparison_{backbone}.csv")
    _comparison_plot(reports, "f1", cfg.reports_dir / "f1_comparison.png")
    _comparison_plot(reports, "roc_auc", cfg.reports_dir / "roc_auc_comparison.png")

    payload = _stamp(
        cfg,
        thresholds=thresholds,
        arms={
            _ARM_NAMES[arm]: {b: r.to_dict() for b, r in by_backbone.items()}
            for arm, by_backbone in reports.items()
        },
        deltas={b: c.deltas for b, c in comparisons.items()},
    )
    write_json_atomic(cfg.reports_dir / "report.json", payload)

    for backbone, cmp_ in comparisons.items():
        print(cmp_.to_markdown())
    print(f"report written to {cfg.reports_dir / 'report.json'}")
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="defectdiff",
        description="Defect-image augmentation pipeline: diffusion generator, "
                    "classifier arms, metrics, and feature projections.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="pipeline config JSON")
        p.add_argument("--output-root", help="override the config's output root")
        p.add_argument("--seed", type=int, help="override the config's global seed")

    def with_device(p):
        p.add_argument("--device", choices=("cpu", "gpu"), default="cpu")

    p = sub.add_parser("train-ddpm", help="train the defect image generator")
    common(p)
    with_device(p)
    p.add_argument("--epochs", type=int, help="override total training epochs")
    p.set_defaults(func=cmd_train_ddpm)

    p = sub.add_parser("generate", help="sample synthetic defective images")
    common(p)
    with_device(p)
    p.add_argument("--count", type=int, help="override the number of images")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("augment", help="materialize real and augmented manifests")
    common(p)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train-classifier", help="train one experiment cell")
    common(p)
    with_device(p)
    p.add_argument("--arm", choices=ARMS, required=True)
    p.add_argument("--backbone", required=True)
    p.set_defaults(func=cmd_train_classifier)

    p = sub.add_parser("evaluate", help="score a trained classifier on its val split")
    common(p)
    p.add_argument("--arm", choices=ARMS, required=True)
    p.add_argument("--backbone", required=True)
    p.add_argument("--threshold", type=float, help="decision threshold override")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("tsne", help="project features of all three sample categories")
    common(p)
    p.set_defaults(func=cmd_tsne)

    p = sub.add_parser("report", help="run both arms across all backbones and compare")
    common(p)
    with_device(p)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    resolve_weights_dir()
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
