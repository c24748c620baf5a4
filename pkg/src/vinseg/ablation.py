"""ResFCN vs B-ResFCN on one manifest: train both, predict the test split, score."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, replace
from pathlib import Path

from .checkpoint import save_checkpoint
from .data import DataError, Manifest, SynthConfig, load_manifest, save_labels, save_prob, synth_dataset
from .metrics import MetricsReport, score_image
from .model import BackboneConfig, ModelConfig
from .predict import extract_instances, predict
from .train import TrainConfig, load_split, train
from .viz import save_loss_curve

log = logging.getLogger(__name__)

VARIANTS = (("resfcn", 1), ("b-resfcn", 2))


def evaluate_model(model, samples: list, names: list, out_dir=None, patch: int = 256, overlap: int = 32,
                   threshold: float = 0.5, connectivity: int = 4, erode_radius: int = 3) -> MetricsReport:
    """Predict each sample, extract instances and score against its instance map."""
    report = MetricsReport()
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    for name, s in zip(names, samples):
        h, w = s.shape
        size = min(patch, h - h % 32, w - w % 32)
        seg, _ = predict(model, s.image, patch=size, overlap=min(overlap, size // 2))
        inst = extract_instances(seg, threshold, connectivity)
        if out_dir is not None:
            save_prob(out_dir / f"{name}_seg.npy", seg)
            save_labels(out_dir / f"{name}_instances.png", inst)
        report.add(score_image(name, inst, s.labels, erode_radius))
    return report


def run_ablation(manifest: Manifest, out_dir, cfg: TrainConfig, backbone: BackboneConfig = None,
                 lam: float = 0.1, threshold: float = 0.5, connectivity: int = 4) -> dict:
    """Train the 1- and 2-branch models identically and compare them on the test split.

    Writes ``<variant>.ckpt``, ``<variant>_log.jsonl``, ``<variant>_loss.svg``,
    per-image predictions under ``pred/<variant>/`` and ``report.json``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_samples = load_split(manifest, "train", cfg.boundary_dilate)
    val_samples = load_split(manifest, "val", cfg.boundary_dilate)
    test_records = manifest.split("test")
    if not test_records:
        raise DataError("manifest has no test split")
    test_samples = load_split(manifest, "test")
    test_names = [Path(r.image).stem for r in test_records]
    backbone = backbone or BackboneConfig()

    report = {"seed": cfg.seed, "train_config": asdict(replace(cfg, lam=lam)), "models": {}}
    for name, branches in VARIANTS:
        log.info("training %s", name)
        mcfg = ModelConfig(backbone, branches=branches, lam=lam, seed=cfg.seed)
        result = train(train_samples, mcfg, replace(cfg, lam=lam), val_samples or None,
                       log_path=out_dir / f"{name}_log.jsonl")
        save_checkpoint(out_dir / f"{name}.ckpt", result.checkpoint)
        save_loss_curve(out_dir / f"{name}_loss.svg", result.log)
        scores = evaluate_model(result.checkpoint.model, test_samples, test_names, out_dir / "pred" / name,
                                patch=manifest.patch_size, threshold=threshold, connectivity=connectivity)
        report["models"][name] = {
            "branches": branches,
            "best_epoch": result.checkpoint.epoch,
            "epochs_run": len(result.log),
            "stopped_early": result.stopped_early,
            "parameters": result.checkpoint.model.num_parameters(),
            **scores.to_dict(),
        }
    one, two = (report["models"][n]["aggregate"] for n, _ in VARIANTS)
    report["comparison"] = {
        "instance_f1_delta": two["instance_f1"] - one["instance_f1"],
        "pixel_f1_delta": two["pixel_f1"] - one["pixel_f1"],
        "instance_dice_delta": two["instance_dice"] - one["instance_dice"],
        "b_resfcn_instance_f1_higher": two["instance_f1"] > one["instance_f1"],
    }
    (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


# desk-scale benchmark: 200/50 synthetic 128x128 scenes, 12 objects, 4 touching pairs
BENCHMARK_SCENE = SynthConfig(h=128, w=128, count=12, touching_pairs=4)
BENCHMARK_TRAIN = TrainConfig(batch_size=8, max_epochs=50, patience=5, optimizer="nadam", lr=5e-3)


def run_benchmark(out_dir, seeds=(0, 1, 2, 3, 4), n_train: int = 200, n_test: int = 50,
                  scene: SynthConfig = BENCHMARK_SCENE, cfg: TrainConfig = BENCHMARK_TRAIN,
                  lam: float = 0.1) -> dict:
    """One synthetic dataset and one ablation per seed, plus a cross-seed summary."""
    out_dir = Path(out_dir)
    per_seed = []
    for seed in seeds:
        t0 = time.perf_counter()
        path = synth_dataset(out_dir / f"seed{seed}" / "data", n_train, n_test, scene, seed=seed)
        rep = run_ablation(load_manifest(path), out_dir / f"seed{seed}" / "run", replace(cfg, seed=seed), lam=lam)
        one, two = (rep["models"][n]["aggregate"] for n, _ in VARIANTS)
        per_seed.append({
            "seed": seed,
            "resfcn": {k: one[k] for k in ("pixel_f1", "instance_f1", "instance_dice")},
            "b-resfcn": {k: two[k] for k in ("pixel_f1", "instance_f1", "instance_dice")},
            "b_resfcn_higher": rep["comparison"]["b_resfcn_instance_f1_higher"],
            "seconds": round(time.perf_counter() - t0, 1),
        })
        log.info("seed %d: %s", seed, per_seed[-1])
    summary = {
        "seeds": per_seed,
        "wins": sum(s["b_resfcn_higher"] for s in per_seed),
        "seconds": round(sum(s["seconds"] for s in per_seed), 1),
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary
