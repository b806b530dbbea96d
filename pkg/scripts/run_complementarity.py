"""Unimodal vs fused models on the complementary synthetic corpus.

Text alone separates only {angry, happy}; speech alone separates only
{sad, neutral}. Fusion should recover all four classes.

    python3 scripts/run_complementarity.py --out runs/complementarity [--folds 5] [--repeats 1]
"""

import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np

from mgfusion.dataio import SynthConfig, generate_synthetic, load_dataset
from mgfusion.models import ModelSpec
from mgfusion.training import TrainConfig, run_fold, split_folds


def spec(arch, grans, text, args):
    return ModelSpec(arch=arch, granularities=grans, text=text, dim=args.dim,
                     text_layers=args.layers, speech_layers=args.layers, heads=args.heads)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/complementarity"))
    ap.add_argument("--n", type=int, default=400)
    ap.add_argument("--dim", type=int, default=32)
    ap.add_argument("--layers", type=int, default=4)
    ap.add_argument("--heads", type=int, default=4)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--folds", type=int, default=1, help="how many of the CV folds to run")
    ap.add_argument("--repeats", type=int, default=1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = SynthConfig(n=args.n, layers=args.layers, dim=args.dim, seed=args.seed)
    utts = load_dataset(generate_synthetic(cfg, args.out / "data"), ("T", "F"))
    config = TrainConfig(repeats=args.repeats, seed=0)
    tasks = [t for t in split_folds(utts, config) if t[1] < args.folds]
    runs = {
        "text linear": spec("linear", (), True, args),
        "frame linear": spec("linear", ("F",), False, args),
        "late fusion T+F": spec("late_fusion", ("F",), True, args),
        "coattention T+F": spec("coattention", ("F",), True, args),
        "concat T+F": spec("concat", ("F",), True, args),
    }
    results = {}
    for name, s in runs.items():
        t0 = time.perf_counter()
        uas = [run_fold(s, config, *t).test_ua for t in tasks]
        results[name] = {"fold_ua": uas, "mean_ua": float(np.mean(uas)),
                         "seconds": time.perf_counter() - t0}
        print(f"{name:18s} UA {np.mean(uas):.3f}  ({len(uas)} folds, "
              f"{results[name]['seconds']:.0f}s)")
    (args.out / "results.json").write_text(json.dumps(results, indent=1, sort_keys=True))


if __name__ == "__main__":
    main()
