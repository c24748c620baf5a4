"""ResFCN vs B-ResFCN on the synthetic touching-pairs benchmark, five seeds.

    python scripts/run_ablation.py --out runs/ablation
"""
import argparse
import json
import logging

from vinseg.ablation import run_benchmark


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    summary = run_benchmark(args.out, args.seeds)
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
