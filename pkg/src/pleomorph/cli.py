"""Command line: ``pleomorph <command> [options]``.

Exit codes: 0 success, 2 invalid input, 3 no tumor found, 4 training
diverged, 5 checkpoint integrity error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import io
from .baseline import build_embedding_net, train_joint
from .config import RunConfig, apply_overrides, dump_config, flatten, load_config
from .core import QuantizationScheme, majority_vote, quantize, reference_score
from .dataset import SPLITS, build_dataset, load_dataset, write_dataset
from .errors import InvalidInputError, NoTumorFoundError, PleomorphError
from .inference import render_heatmap, score_image
from .metrics import (
    DIFFERENCES,
    RatingTable,
    leave_one_out_majority_kappa,
    pairwise_kappa_matrix,
    regression_report,
    score_difference_counts,
)
from .regressor import build_regression_net, check_pools, train

log = logging.getLogger("pleomorph")

AI = "AI"
NO_TUMOR_MARKER = "NO_TUMOR"
CHECKPOINT_NAME = "checkpoint.pleo"


# helpers ---------------------------------------------------------------------

def _config(args, **overrides) -> RunConfig:
    extra = {k: v for k, v in overrides.items() if v is not None}
    if args.seed is not None:
        extra["seed"] = args.seed
    return load_config(args.config, extra)


def _out_dir(args) -> Path:
    if args.out is None:
        raise InvalidInputError("--out DIR is required for this command")
    return Path(args.out)


def _prepare(out: Path) -> Path:
    if out.exists() and not out.is_dir():
        raise InvalidInputError(f"{out} exists and is not a directory")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_file(path, what):
    if path is None:
        raise InvalidInputError(f"{what} is required")
    p = Path(path)
    if not p.is_file():
        raise InvalidInputError(f"{what} {p} does not exist")
    return p


def _scheme(k):
    return QuantizationScheme.equal_width(k) if k is not None else None


def config_from_checkpoint(ckpt) -> RunConfig:
    return apply_overrides(RunConfig(), ckpt.config).resolved()


def load_regressor(path):
    ckpt = ckpt_io.load_checkpoint(path)
    config = config_from_checkpoint(ckpt)
    net = build_regression_net(config.net, seed=config.seed)
    ckpt_io.restore(net, ckpt, "regressor")
    net.eval()
    return net, config


# commands --------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    config = _config(args)
    out = _out_dir(args)
    ds = build_dataset(config.data)
    _prepare(out)
    write_dataset(ds, out)
    (out / "config.txt").write_text(dump_config(config))
    for split in SPLITS:
        rois = ds.splits[split]
        cats = [sum(r.category == c for r in rois) for c in (1, 2, 3)]
        print(f"{split}: {len({r.case_id for r in rois})} cases, {len(rois)} tumor ROIs, categories {cats}")
    print(f"slides: {len(ds.slides)}")
    return 0


def cmd_train(args) -> int:
    overrides = {"train.max_epochs": args.epochs, "train.learning_rate": args.lr}
    config = _config(args, **overrides)
    out = _out_dir(args)
    if args.data is None:
        raise InvalidInputError("--data DIR is required")
    ds = load_dataset(args.data, sigma=config.data.sigma)
    pool, val_pool = ds.splits["train"], ds.splits["val"]
    check_pools(pool, val_pool)
    if args.baseline and not all(r.normal is not None for r in pool + val_pool):
        raise InvalidInputError("--baseline needs a normal ROI for every case")
    net = build_regression_net(config.net, seed=config.seed)
    progress = (lambda r: print(f"epoch {r.epoch}: train {r.train_loss:.5f} val {r.val_loss:.5f}", flush=True)) \
        if not args.quiet else None
    _prepare(out)
    (out / "config.txt").write_text(dump_config(config))
    sections = {"regressor": net}
    if args.baseline:
        emb = build_embedding_net(config.embedding, seed=config.seed)
        result = train_joint(net, emb, pool, val_pool, config.train, config.joint, progress)
        sections["embedding"] = emb
        header = ["epoch", "train_loss_t", "val_loss_t", "train_loss_n", "val_loss_n"]
        rows = [(r.epoch, r.train_loss, r.val_loss, r.train_loss_n, r.val_loss_n) for r in result.history]
    else:
        result = train(net, pool, val_pool, config.train, progress)
        header = ["epoch", "train_loss", "val_loss"]
        rows = [(r.epoch, r.train_loss, r.val_loss) for r in result.history]
    io.write_table(out / "history.csv", header, rows)
    checkpoint = ckpt_io.from_modules(flatten(config), sections)
    ckpt_io.save_checkpoint(out / CHECKPOINT_NAME, checkpoint)
    print(f"best epoch {result.best_epoch}, checkpoint {out / CHECKPOINT_NAME}")
    return 0


def _score_one(net, config, image, detections, aggregate):
    grid = config.tiling.grid(image.shape[1], image.shape[0])
    result = score_image(net, image, detections, grid, threshold=config.tiling.tumor_threshold,
                         batch_size=config.tiling.batch_size)
    score = result.slide_score(per_block=(aggregate == "block"))
    return result, float(score)


def _validate_detections(dets, image, source):
    h, w = image.shape[:2]
    bad = [i for i, d in enumerate(dets) if not (0 <= d.x < w and 0 <= d.y < h)]
    if bad:
        raise InvalidInputError(f"{source}: {len(bad)} detections fall outside the {w}x{h} image (row {bad[0] + 2})")


def cmd_score(args) -> int:
    ckpt_path = _require_file(args.checkpoint, "--checkpoint")
    out = _out_dir(args)
    scheme = _scheme(args.quantize)
    net, config = load_regressor(ckpt_path)
    if args.image is not None:
        return _score_image_cmd(args, net, config, out, scheme)
    if args.data is None:
        raise InvalidInputError("give either --image with --detections, or --data")
    return _score_dataset_cmd(args, net, config, out, scheme)


def _score_image_cmd(args, net, config, out, scheme) -> int:
    image_path = _require_file(args.image, "--image")
    det_path = _require_file(args.detections, "--detections")
    image = io.read_ppm(image_path)
    dets = io.read_detections(det_path)
    _validate_detections(dets, image, det_path)
    if min(image.shape[:2]) < config.tiling.tile_size:
        raise InvalidInputError(f"image {image.shape[1]}x{image.shape[0]} is smaller than one "
                                f"{config.tiling.tile_size}px tile")
    item_id = Path(image_path).stem
    try:
        result, score = _score_one(net, config, image, dets, args.aggregate)
    except NoTumorFoundError as exc:
        _prepare(out)
        (out / NO_TUMOR_MARKER).write_text(f"{item_id}: {exc}\n")
        raise
    _prepare(out)
    io.write_scoremap(out / "scoremap.csv", result.score_map)
    io.write_ppm(out / "heatmap.ppm", render_heatmap(result.score_map))
    header = ["id", "score"] + (["category"] if scheme else [])
    row = [item_id, score] + ([quantize(score, scheme)] if scheme else [])
    io.write_table(out / "scores.csv", header, [row])
    print(f"{item_id}: score {score:.4f}" + (f", category {row[2]} of {scheme.k}" if scheme else ""))
    return 0


def _score_dataset_cmd(args, net, config, out, scheme) -> int:
    split = args.split
    if split not in SPLITS + ("slides",):
        raise InvalidInputError(f"--split must be one of {SPLITS + ('slides',)}")
    ds = load_dataset(args.data, sigma=config.data.sigma)
    if split == "slides":
        items = [(s.slide_id, s.slide_id, s.image, s.detections) for s in ds.slides]
    else:
        items = [(r.roi_id, r.case_id, r.image, ds.detections[r.roi_id]) for r in ds.splits[split]]
    if not items:
        raise InvalidInputError(f"split {split!r} is empty")
    rows, empty = [], []
    maps = {}
    for item_id, case_id, image, dets in items:
        try:
            result, score = _score_one(net, config, image, dets, args.aggregate)
        except NoTumorFoundError:
            empty.append(item_id)
            rows.append([item_id, case_id, ""] + ([""] if scheme else []))
            continue
        maps[item_id] = result.score_map
        rows.append([item_id, case_id, score] + ([quantize(score, scheme)] if scheme else []))
    _prepare(out)
    (out / "scoremaps").mkdir(exist_ok=True)
    (out / "heatmaps").mkdir(exist_ok=True)
    for item_id, score_map in maps.items():
        io.write_scoremap(out / "scoremaps" / f"{item_id}.csv", score_map)
        io.write_ppm(out / "heatmaps" / f"{item_id}.ppm", render_heatmap(score_map))
    header = ["id", "case_id", "score"] + (["category"] if scheme else [])
    io.write_table(out / "scores.csv", header, rows)
    if empty:
        (out / NO_TUMOR_MARKER).write_text("".join(f"{i}\n" for i in empty))
    print(f"scored {len(rows) - len(empty)} of {len(rows)} items in split {split}")
    return 0


def _case_predictions(scores_path) -> dict:
    rows = io.read_table(scores_path, ("score",))
    if not rows:
        raise InvalidInputError(f"{scores_path}: no rows")
    key = "case_id" if "case_id" in rows[0] else "id"
    grouped: dict[str, list] = {}
    for i, row in enumerate(rows):
        if row["score"].strip() == "":
            continue
        try:
            grouped.setdefault(row[key].strip(), []).append(float(row["score"]))
        except ValueError:
            raise InvalidInputError(f"{scores_path}: row {i + 2}: bad score {row['score']!r}") from None
    return {case: float(np.mean(v)) for case, v in grouped.items()}


def _agreement_rows(table: RatingTable):
    km = pairwise_kappa_matrix(table)
    means = km.mean_excluding_self
    matrix_rows = [[p] + [float(v) for v in km.values[i]] + [float(means[i])]
                   for i, p in enumerate(km.participants)]
    loo = [[p, leave_one_out_majority_kappa(table, p)] for p in table.participants]
    return km, matrix_rows, loo


def cmd_eval(args) -> int:
    scores_path = _require_file(args.scores, "--scores")
    ratings_path = _require_file(args.ratings, "--ratings")
    out = _out_dir(args)
    predictions = _case_predictions(scores_path)
    panels = io.read_ratings(ratings_path)
    missing = sorted(set(panels) - set(predictions))
    unknown = sorted(set(predictions) - set(panels))
    if args.cases_from_scores:
        missing = []
        panels = {c: p for c, p in panels.items() if c in predictions}
    if missing or unknown:
        raise InvalidInputError(
            f"case ids do not align: without scores {missing[:10]}, without ratings {unknown[:10]}")
    cases = sorted(panels)
    refs = [float(reference_score(panels[c])) for c in cases]
    preds = [predictions[c] for c in cases]
    report = regression_report(preds, refs)
    table = RatingTable.from_panels([panels[c] for c in cases])
    table.require_complete()
    ai = {c: quantize(predictions[c], 3) for c in cases}
    table = table.with_participant(AI, ai)
    km, matrix_rows, loo = _agreement_rows(table)
    diff_rows = []
    for rater in table.participants[:-1]:
        counts = score_difference_counts(table.column(AI), table.column(rater))
        diff_rows.append([rater] + [counts[d] for d in DIFFERENCES])
    majority = [majority_vote(panels[c]) for c in cases]
    _prepare(out)
    io.write_table(out / "regression.csv", ["metric", "value"],
                   [[k, "" if v is None else v] for k, v in report.rows()])
    io.write_table(out / "kappa_matrix.csv", ["participant", *km.participants, "mean_excluding_self"], matrix_rows)
    io.write_table(out / "loo_majority_kappa.csv", ["participant", "kappa"], loo)
    io.write_table(out / "score_differences.csv", ["rater", *[f"{d:+d}" for d in DIFFERENCES]], diff_rows)
    io.write_table(out / "cases.csv", ["case_id", "reference_score", "prediction", "ai_category", "majority"],
                   [[c, r, p, ai[c], m] for c, r, p, m in zip(cases, refs, preds, majority)])
    text = ["regression vs reference scores", io.aligned_text(["metric", "value"], report.rows()),
            "pairwise quadratic kappa", io.aligned_text(["participant", *km.participants, "mean"], matrix_rows, 3),
            "kappa vs leave-one-out majority", io.aligned_text(["participant", "kappa"], loo, 3),
            "AI minus rater score differences",
            io.aligned_text(["rater", *[f"{d:+d}" for d in DIFFERENCES]], diff_rows)]
    (out / "report.txt").write_text("\n".join(text))
    print(f"{len(cases)} cases: MAE {report.mae:.4f}, AI vs majority kappa {loo[-1][1]:.3f}")
    return 0


def cmd_rater_stats(args) -> int:
    ratings_path = _require_file(args.ratings, "--ratings")
    out = _out_dir(args)
    panels = io.read_ratings(ratings_path)
    if not panels:
        raise InvalidInputError(f"{ratings_path}: no ratings")
    cases = sorted(panels)
    table = RatingTable.from_panels([panels[c] for c in cases])
    table.require_complete()
    km, matrix_rows, loo = _agreement_rows(table)
    refs = [[c, float(reference_score(panels[c])), majority_vote(panels[c]), len(panels[c].scores)] for c in cases]
    _prepare(out)
    io.write_table(out / "references.csv", ["case_id", "reference_score", "majority", "n_raters"], refs)
    io.write_table(out / "kappa_matrix.csv", ["participant", *km.participants, "mean_excluding_self"], matrix_rows)
    io.write_table(out / "loo_majority_kappa.csv", ["participant", "kappa"], loo)
    text = ["pairwise quadratic kappa", io.aligned_text(["participant", *km.participants, "mean"], matrix_rows, 3),
            "kappa vs leave-one-out majority", io.aligned_text(["participant", "kappa"], loo, 3)]
    (out / "report.txt").write_text("\n".join(text))
    print(f"{len(cases)} cases, {len(table.participants)} raters")
    return 0


def cmd_grad_check(args) -> int:
    from .gradsuite import all_checks

    results = all_checks(args.seed or 0)
    rows = [[r.name, r.report.max_rel_error, r.tolerance, r.report.checked, r.report.excluded,
             "pass" if r.passed else "FAIL"] for r in results]
    header = ["check", "max_rel_error", "tolerance", "checked", "excluded", "result"]
    print(io.aligned_text(header, rows, 3), end="")
    if args.out is not None:
        io.write_table(_prepare(Path(args.out)) / "gradcheck.csv", header, rows)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} checks failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


# argument parsing ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="dotted-key config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("-q", "--quiet", action="store_true")

    parser = argparse.ArgumentParser(prog="pleomorph", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train the regression network")
    p.add_argument("--data", metavar="DIR")
    p.add_argument("--baseline", action="store_true", help="joint training with the normal-epithelium baseline")
    p.add_argument("--epochs", type=int, help="maximum number of epochs")
    p.add_argument("--lr", type=float, help="learning rate")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", parents=[common], help="score an image or a dataset split")
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--image", metavar="PPM")
    p.add_argument("--detections", metavar="CSV")
    p.add_argument("--data", metavar="DIR")
    p.add_argument("--split", default="test")
    p.add_argument("--quantize", type=int, metavar="K", help="also report the category out of K")
    p.add_argument("--aggregate", choices=("region", "block"), default="region",
                   help="mean over tumor regions (default) or over all blocks")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", parents=[common], help="compare scores with rater panels")
    p.add_argument("--scores", metavar="CSV")
    p.add_argument("--ratings", metavar="CSV")
    p.add_argument("--cases-from-scores", action="store_true",
                   help="evaluate only the rated cases present in the scores file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rater-stats", parents=[common], help="agreement statistics of a rater panel")
    p.add_argument("--ratings", metavar="CSV")
    p.set_defaults(func=cmd_rater_stats)

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient checks")
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PleomorphError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return InvalidInputError.exit_code


if __name__ == "__main__":
    sys.exit(main())
