"""Ablation benchmark: full model vs w/o-DFB, w/o-SSAFB, and both removed.

Trains every variant on the default synthetic scene over several seeds and
reports seed-averaged test overall accuracy plus margins to the full
model. Usage:

    python scripts/run_ablation.py [--epochs N] [--seeds a b c] [--size S]
        [--train-fraction F] [--out report.csv]
"""

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))


def run(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--epochs", type=int, default=30)
    parser.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    parser.add_argument("--scene-seed", type=int, default=42)
    parser.add_argument("--size", type=int, default=64)
    parser.add_argument("--classes", type=int, default=5)
    parser.add_argument("--train-fraction", type=float, default=0.1)
    parser.add_argument("--lr", type=float, default=1e-4)
    parser.add_argument("--out", default=None, help="optional CSV for the per-run table")
    args = parser.parse_args(argv)

    import numpy as np

    from dffnet.data import (build_patch_dataset, pca_fit, pca_reduce_cube,
                             split_dataset, synth_generate)
    from dffnet.model import ModelConfig, init_model_params
    from dffnet.train import TrainSettings, evaluate, metrics, train

    scene = synth_generate(args.classes, args.size, seed=args.scene_seed)
    variants = {
        "full": dict(use_dfb=True, use_ssafb=True),
        "no_ssafb": dict(use_dfb=True, use_ssafb=False),
        "no_dfb": dict(use_dfb=False, use_ssafb=True),
        "none": dict(use_dfb=False, use_ssafb=False),
    }
    rows = []
    scores = {name: [] for name in variants}
    for seed in args.seeds:
        split = split_dataset(scene, args.train_fraction, seed)
        pixels = np.array([scene.hsi[:, r, c] for r, c, _ in split.train])
        pca = pca_fit(pixels, 30)
        reduced = pca_reduce_cube(pca, scene.hsi)
        train_ds = build_patch_dataset(reduced, scene.aux, scene.labels,
                                       split.train, 11, np.float32)
        test_ds = build_patch_dataset(reduced, scene.aux, scene.labels,
                                      split.test, 11, np.float32)
        for name, flags in variants.items():
            config = ModelConfig(num_classes=scene.num_classes, seed=seed, **flags)
            params = init_model_params(config, np.float32)
            settings = TrainSettings(epochs=args.epochs, lr=args.lr, seed=seed,
                                     verbose=False)
            t0 = time.perf_counter()
            history = train(config, params, train_ds, settings)
            oa = metrics(evaluate(config, params, test_ds)).oa
            rows.append((seed, name, history[-1].train_oa, oa, time.perf_counter() - t0))
            scores[name].append(oa)
            print(f"seed {seed} {name:9s} train_oa {history[-1].train_oa:.4f} "
                  f"test_oa {oa:.4f} ({rows[-1][-1]:.0f}s)", flush=True)

    means = {name: float(np.mean(vals)) for name, vals in scores.items()}
    print("\nseed-averaged test OA:")
    for name in ("full", "no_ssafb", "no_dfb", "none"):
        print(f"  {name:9s} {means[name]:.4f}  (margin vs full: {means['full'] - means[name]:+.4f})")
    ok = (means["full"] >= means["no_ssafb"] >= means["none"]
          and means["full"] >= means["no_dfb"] >= means["none"])
    print(f"ordering full >= single ablations >= double ablation: {'holds' if ok else 'VIOLATED'}")

    if args.out:
        with open(args.out, "w") as fh:
            fh.write("seed,variant,train_oa,test_oa,seconds\n")
            for seed, name, tr, te, secs in rows:
                fh.write(f"{seed},{name},{tr:.6f},{te:.6f},{secs:.1f}\n")
        print(f"per-run table written to {args.out}")
    return means


if __name__ == "__main__":
    run()
