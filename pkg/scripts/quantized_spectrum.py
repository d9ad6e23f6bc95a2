"""Quantise held-out predictions of a trained model into k categories and compare with the quantised references.

    python scripts/quantized_spectrum.py runs/desk/plain.pleo --k 3 5 9
"""

import argparse

import numpy as np

from pleomorph.cli import config_from_checkpoint, load_regressor
from pleomorph.checkpoint import load_checkpoint
from pleomorph.core import QuantizationScheme, quantize
from pleomorph.dataset import build_dataset
from pleomorph.evaluation import evaluate_patches
from pleomorph.io import aligned_text
from pleomorph.metrics import confusion_matrix, quadratic_kappa


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("checkpoint")
    parser.add_argument("--k", type=int, nargs="+", default=[3, 5, 9])
    parser.add_argument("--split", default="test")
    args = parser.parse_args()
    net, _ = load_regressor(args.checkpoint)
    config = config_from_checkpoint(load_checkpoint(args.checkpoint))
    ds = build_dataset(config.data)
    ev = evaluate_patches(net, ds.splits[args.split])
    print(f"{len(ev.predictions)} patches, MAE {ev.mae:.4f}, Spearman {ev.spearman:.4f}")
    for k in args.k:
        scheme = QuantizationScheme.equal_width(k)
        pred = np.array([quantize(p, scheme) for p in ev.predictions])
        ref = np.array([quantize(r, scheme) for r in ev.references])
        m = confusion_matrix(ref, pred, k)
        print(f"\nk={k}: exact {np.mean(pred == ref):.3f}, within one {np.mean(np.abs(pred - ref) <= 1):.3f}, "
              f"quadratic kappa {quadratic_kappa(ref, pred, k):.3f}")
        print("rows: reference category, columns: predicted category")
        print(aligned_text(["ref"] + [str(c) for c in range(1, k + 1)], [[i + 1, *row] for i, row in enumerate(m)]),
              end="")


if __name__ == "__main__":
    main()
