"""Train the plain and joint desk-scale models on the default synthetic data and report held-out metrics.

    python scripts/desk_experiment.py --out runs/desk
"""

import argparse
import time
from pathlib import Path

from pleomorph.baseline import build_embedding_net, train_joint
from pleomorph.checkpoint import from_modules, save_checkpoint
from pleomorph.config import flatten, load_config
from pleomorph.dataset import build_dataset
from pleomorph.evaluation import evaluate_patches, half_saliency_wins, nucleus_saliency_wins, slide_agreement
from pleomorph.regressor import build_regression_net, train


def report(name, net, ds, config):
    ev = evaluate_patches(net, ds.splits["test"])
    slides = slide_agreement(net, config.data)
    print(f"{name}: test MAE {ev.mae:.4f}, Spearman {ev.spearman:.4f}, "
          f"slides {slides.hits}/{len(slides.scores)} (max category error {slides.max_error}), "
          f"nucleus saliency {nucleus_saliency_wins(net).sum()}/100, left-half saliency {half_saliency_wins(net).sum()}/100",
          flush=True)
    return ev


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="dotted-key config file")
    parser.add_argument("--out", default="runs/desk")
    parser.add_argument("--skip-joint", action="store_true")
    args = parser.parse_args()
    config = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = build_dataset(config.data)
    train_pool, val_pool = ds.splits["train"], ds.splits["val"]

    t = time.time()
    net = build_regression_net(config.net, seed=config.seed)
    result = train(net, train_pool, val_pool, config.train)
    print(f"plain: {len(result.history)} epochs, best {result.best_epoch}, {time.time() - t:.0f}s", flush=True)
    save_checkpoint(out / "plain.pleo", from_modules(flatten(config), {"regressor": net}))
    plain = report("plain", net, ds, config)

    if args.skip_joint:
        return
    t = time.time()
    joint_net = build_regression_net(config.net, seed=config.seed)
    emb = build_embedding_net(config.embedding, seed=config.seed)
    result = train_joint(joint_net, emb, train_pool, val_pool, config.train, config.joint)
    print(f"joint: {len(result.history)} epochs, best {result.best_epoch}, {time.time() - t:.0f}s", flush=True)
    save_checkpoint(out / "joint.pleo", from_modules(flatten(config), {"regressor": joint_net, "embedding": emb}))
    joint = report("joint", joint_net, ds, config)
    print(f"joint minus plain MAE: {joint.mae - plain.mae:+.4f}")


if __name__ == "__main__":
    main()
