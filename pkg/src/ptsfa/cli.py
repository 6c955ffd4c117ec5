"""Command-line entry point: ``ptsfa <command> [options]``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import datagen, oracle
from .datagen import SHIFT_PRESETS, ShiftRecipe
from .errors import ConfigError, PTSFAError
from .experiment import SPLITS, make_benchmark
from .model import load_checkpoint, save_checkpoint
from .trainer import Datasets, RunConfig, evaluate, spl_finetune, train

log = logging.getLogger("ptsfa")

METRIC_COLUMNS = ("epoch", "stage", "L_PTSFA", "L_IDA_s", "L_IDA_t", "total", "lr", "lambda",
                  "src_acc", "tgt_acc")
GRAD_TOL = 1e-4


def _fmt(x):
    return repr(float(x))


def write_metrics_csv(reports, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in reports:
            L = r.losses
            w.writerow([r.epoch, r.stage, _fmt(L.ptsfa), _fmt(L.ida_s), _fmt(L.ida_t),
                        _fmt(L.total), _fmt(r.lr), _fmt(r.lam), _fmt(r.src_acc), _fmt(r.tgt_acc)])


def write_stages_csv(stages, path, num_classes):
    cols = ["stage", "sigma_s", "sigma_t"]
    for key in ("src_sel", "tgt_sel", "dmu_norm", "target_gap", "degraded"):
        cols += [f"{key}_{c}" for c in range(num_classes)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for s in stages:
            w.writerow([s.stage, _fmt(s.sigma_s), _fmt(s.sigma_t), *s.src_selected,
                        *s.tgt_selected, *map(_fmt, s.delta_mu_norm), *map(_fmt, s.target_gap),
                        *(int(d) for d in s.degraded)])


def accuracy_svg(values, title="target accuracy", width=640, height=360, pad=48):
    """A single polyline chart of ``values`` against their index, y axis fixed to [0, 1]."""
    n = len(values)
    x_span = max(n - 1, 1)

    def xy(i, v):
        x = pad + (width - 2 * pad) * i / x_span
        y = height - pad - (height - 2 * pad) * min(max(v, 0.0), 1.0)
        return f"{x:.2f},{y:.2f}"

    points = " ".join(xy(i, v) for i, v in enumerate(values))
    grid = []
    for k in range(6):
        v = k / 5
        y = height - pad - (height - 2 * pad) * v
        grid.append(f'<line x1="{pad}" y1="{y:.2f}" x2="{width - pad}" y2="{y:.2f}" '
                    f'stroke="#ddd"/><text x="{pad - 8}" y="{y + 4:.2f}" font-size="11" '
                    f'text-anchor="end">{v:.1f}</text>')
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">\n'
        f'<rect width="100%" height="100%" fill="white"/>\n'
        + "\n".join(grid)
        + f'\n<text x="{width / 2}" y="{pad / 2}" font-size="14" text-anchor="middle">{title}</text>'
        f'\n<text x="{width / 2}" y="{height - 12}" font-size="12" text-anchor="middle">epoch</text>'
        f'\n<polyline fill="none" stroke="#1f77b4" stroke-width="2" points="{points}"/>\n</svg>\n'
    )


def _recipe(args):
    if args.shift_preset != "custom":
        return SHIFT_PRESETS[args.shift_preset]
    recipe = ShiftRecipe(
        jitter_sigma=args.jitter,
        dropout_fraction=args.dropout,
        anisotropic_scale=tuple(args.scale),
        occlusion_fraction=args.occlusion,
        density_bias=args.density_bias,
    )
    recipe.validate()
    return recipe


def cmd_gen_data(args):
    if args.classes < 2:
        raise ConfigError(f"--classes must be at least 2, got {args.classes}")
    if args.classes > len(datagen.CATEGORIES):
        raise ConfigError(f"--classes must be at most {len(datagen.CATEGORIES)}")
    recipe = _recipe(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = make_benchmark(args.seed, recipe=recipe, classes=args.classes, points=args.points,
                          train_per_class=args.train_per_class,
                          test_per_class=args.test_per_class)
    for name, ds in zip(SPLITS, data):
        datagen.write_dataset(ds, out / f"{name}.pcds")
    lines = [
        f"seed = {args.seed}",
        f"classes = {args.classes}",
        f"categories = {','.join(datagen.CATEGORIES[: args.classes])}",
        f"points = {args.points}",
        f"train_per_class = {args.train_per_class}",
        f"test_per_class = {args.test_per_class}",
        f"shift_preset = {args.shift_preset}",
        f"jitter_sigma = {recipe.jitter_sigma}",
        f"dropout_fraction = {recipe.dropout_fraction}",
        f"anisotropic_scale = {','.join(map(str, recipe.anisotropic_scale))}",
        f"occlusion_fraction = {recipe.occlusion_fraction}",
        f"density_bias = {recipe.density_bias}",
        "shifted_splits = target_train,target_test",
    ]
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(SPLITS)} datasets to {out}")
    return 0


def cmd_train(args):
    config = RunConfig.from_file(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = Datasets.load(config)

    def progress(report, _params):
        log.info("epoch %d stage %d total %.4f tgt_acc %.4f", report.epoch, report.stage,
                 report.losses.total, report.tgt_acc)

    result = train(config, data, on_epoch_end=progress)
    write_metrics_csv(result.reports, out / "metrics.csv")
    write_stages_csv(result.stages, out / "stages.csv", result.params.num_classes)
    save_checkpoint(result.params, out / "model.ckpt")
    (out / "config.txt").write_text(config.to_text())
    (out / "accuracy.svg").write_text(accuracy_svg([r.tgt_acc for r in result.reports]))
    final = result.reports[-1]
    print(f"final target accuracy {final.tgt_acc:.4f} after {len(result.reports)} epochs")
    return 0


def cmd_eval(args):
    params = load_checkpoint(args.ckpt)
    dataset = datagen.read_dataset(args.dataset)
    if dataset.num_classes != params.num_classes:
        raise ConfigError(f"dataset has {dataset.num_classes} classes, "
                          f"checkpoint has {params.num_classes}")
    res = evaluate(params, dataset)
    out = Path(args.out) if args.out else Path(args.ckpt).with_name("confusion.csv")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true"] + [f"pred_{c}" for c in range(dataset.num_classes)])
        for c, row in enumerate(res.confusion):
            w.writerow([c, *row])
    print(f"accuracy {res.accuracy:.6f}")
    return 0


def cmd_spl(args):
    config = RunConfig.from_file(args.config)
    params = load_checkpoint(args.ckpt)
    data = Datasets.load(config)
    params, records = spl_finetune(params, config, data)
    out = Path(args.out) if args.out else Path(args.ckpt).with_name("model_spl.ckpt")
    save_checkpoint(params, out)
    with open(out.with_name("spl.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["circle", "threshold", "selected", "pseudo_acc"])
        for r in records:
            w.writerow([r.circle, _fmt(r.threshold), r.selected, _fmt(r.pseudo_acc)])
    for r in records:
        print(f"circle {r.circle}: threshold {r.threshold:.2f}, {r.selected} target samples")
    print(f"target accuracy {evaluate(params, data.target_test).accuracy:.4f}")
    return 0


def cmd_verify_bound(args):
    if args.instances < 1:
        raise ConfigError("--instances must be at least 1")
    rows = oracle.jensen_bound_suite(args.instances, args.seed, args.draws)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["instance", "L_M", "SE", "L_PTSFA", "pass"])
        for r in rows:
            w.writerow([r.instance, _fmt(r.estimate), _fmt(r.stderr), _fmt(r.closed_form),
                        int(r.passed)])
    passed = sum(r.passed for r in rows)
    print(f"{passed}/{len(rows)} bound instances pass")
    return 0 if passed == len(rows) else 1


def cmd_grad_check(args):
    if args.trials < 1:
        raise ConfigError("--trials must be at least 1")
    errs = oracle.gradient_suite(args.trials, args.seed)
    for name, err in errs.items():
        print(f"{name:12s} max relative error {err:.3e}  {'ok' if err < GRAD_TOL else 'FAIL'}")
    worst = max(errs.values())
    print(f"max relative error {worst:.3e} over {args.trials} trials per suite")
    return 0 if worst < GRAD_TOL else 1


def build_parser():
    parser = argparse.ArgumentParser(prog="ptsfa", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write the synthetic source/target splits")
    g.add_argument("--out", required=True)
    g.add_argument("--classes", type=int, default=5)
    g.add_argument("--points", type=int, default=256)
    g.add_argument("--train-per-class", type=int, default=200)
    g.add_argument("--test-per-class", type=int, default=50)
    g.add_argument("--shift-preset", choices=[*SHIFT_PRESETS, "custom"], default="heavy")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--jitter", type=float, default=0.0, help="custom preset only")
    g.add_argument("--dropout", type=float, default=0.0, help="custom preset only")
    g.add_argument("--scale", type=float, nargs=3, default=(1.0, 1.0, 1.0),
                   help="custom preset only")
    g.add_argument("--occlusion", type=float, default=0.0, help="custom preset only")
    g.add_argument("--density-bias", type=float, default=0.0, help="custom preset only")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="warm-up plus staged adaptation")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="accuracy and confusion counts of a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--out", help="confusion CSV (default: next to the checkpoint)")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("spl", help="self-paced pseudo-label fine-tuning")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="fine-tuned checkpoint (default: model_spl.ckpt)")
    s.set_defaults(func=cmd_spl)

    v = sub.add_parser("verify-bound", help="Monte-Carlo check of the closed-form upper bound")
    v.add_argument("--instances", type=int, default=100)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--draws", type=int, default=100_000)
    v.add_argument("--out", default="bound.csv")
    v.set_defaults(func=cmd_verify_bound)

    c = sub.add_parser("grad-check", help="finite-difference check of every gradient")
    c.add_argument("--trials", type=int, default=50)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (PTSFAError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
