"""Training-loss curves of Nadam, Adam and SGD-momentum on the synthetic task.

    python scripts/optimizer_comparison.py --out runs/optimizers --epochs 10
"""
import argparse
import json
from pathlib import Path

from vinseg.ablation import BENCHMARK_SCENE
from vinseg.data import synth_scene
from vinseg.model import toy_config
from vinseg.train import TrainConfig, train
from vinseg.viz import save_loss_curve


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/optimizers")
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--lr", type=float, default=2e-4)
    ap.add_argument("--n", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    samples = [synth_scene(BENCHMARK_SCENE, 10_000 + i) for i in range(args.n)]
    curves = {}
    for kind in ("nadam", "adam", "sgd"):
        cfg = TrainConfig(max_epochs=args.epochs, patience=args.epochs, optimizer=kind, lr=args.lr, seed=args.seed)
        result = train(samples, toy_config(2, args.seed), cfg)
        curves[kind] = [e["train_loss"] for e in result.log]
        save_loss_curve(out / f"{kind}_loss.svg", result.log)
        print(f"{kind:6s} final train loss {curves[kind][-1]:.2f}", flush=True)
    (out / "curves.json").write_text(json.dumps(curves, indent=2) + "\n")


if __name__ == "__main__":
    main()
