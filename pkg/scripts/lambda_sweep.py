"""Toy-scale sweep of the boundary loss weight for B-ResFCN.

    python scripts/lambda_sweep.py --out runs/lambda --lams 0 0.05 0.1 0.5 1
"""
import argparse
import json
import logging
from dataclasses import replace
from pathlib import Path

from vinseg.ablation import BENCHMARK_SCENE, BENCHMARK_TRAIN, evaluate_model
from vinseg.data import load_manifest, synth_dataset
from vinseg.model import BackboneConfig, ModelConfig
from vinseg.train import load_split, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/lambda")
    ap.add_argument("--lams", type=float, nargs="+", default=[0.0, 0.05, 0.1, 0.5, 1.0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n-train", type=int, default=200)
    ap.add_argument("--n-test", type=int, default=50)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    manifest = load_manifest(synth_dataset(out / "data", args.n_train, args.n_test, BENCHMARK_SCENE, seed=args.seed))
    train_samples = load_split(manifest, "train")
    test_records = manifest.split("test")
    test_samples = load_split(manifest, "test")
    names = [Path(r.image).stem for r in test_records]
    rows = []
    for lam in args.lams:
        cfg = replace(BENCHMARK_TRAIN, seed=args.seed, lam=lam)
        result = train(train_samples, ModelConfig(BackboneConfig(), branches=2, lam=lam, seed=args.seed), cfg)
        agg = evaluate_model(result.checkpoint.model, test_samples, names).to_dict()["aggregate"]
        rows.append({"lam": lam, "best_epoch": result.checkpoint.epoch,
                     **{k: agg[k] for k in ("pixel_f1", "instance_f1", "instance_dice")}})
        print(json.dumps(rows[-1]), flush=True)
    (out / "sweep.json").write_text(json.dumps(rows, indent=2) + "\n")


if __name__ == "__main__":
    main()
