"""``retina-hybrid`` command line: synth, train, eval, predict, roc.

Exit codes: 0 ok, 2 config, 3 data, 4 divergence, 5 checkpoint mismatch,
6 degenerate metric.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, RunConfig, load_run_config
from .data import (
    LABEL_NAMES,
    AugmentConfig,
    ManifestError,
    augment,
    generate_synthetic_dataset,
    load_manifest,
    read_image,
)
from .metrics import UndefinedMetricError, binary_auc, roc_points
from .plotting import plot_history, plot_roc
from .trainer import (
    CheckpointMismatch,
    ImageSet,
    TrainingDiverged,
    evaluate_model,
    load_model,
    predict_proba,
    predict_set,
    train,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_MISMATCH, EXIT_METRIC = 0, 2, 3, 4, 5, 6

log = logging.getLogger("retina_hybrid")


class CliError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


def _manifest(path: str, split: str = "train"):
    try:
        return load_manifest(path, split)
    except FileNotFoundError as exc:
        raise CliError(EXIT_DATA, str(exc)) from None
    except ManifestError as exc:
        raise CliError(EXIT_DATA, f"{path}: {exc}") from None


def _image_root(manifest_path: str, override: str | None) -> Path:
    return Path(override) if override else Path(manifest_path).parent


def _image_set(manifest, root, image_size) -> ImageSet:
    try:
        return ImageSet(manifest, root, image_size)
    except FileNotFoundError as exc:
        raise CliError(EXIT_DATA, str(exc)) from None


def _load(checkpoint: str, config: str | None):
    expected = load_run_config(config).model if config else None
    try:
        return load_model(checkpoint, expected)
    except FileNotFoundError as exc:
        raise CliError(EXIT_DATA, str(exc)) from None
    except (CheckpointMismatch, ConfigError) as exc:
        raise CliError(EXIT_MISMATCH, f"checkpoint mismatch: {exc}") from None


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = Path(args.out_dir or "synthetic")
    try:
        m = generate_synthetic_dataset(args.n, args.seed or 0, args.skew, out, args.image_size, args.split)
    except OSError as exc:
        raise CliError(EXIT_DATA, f"cannot write to {out}: {exc}") from None
    print(f"wrote {len(m)} images and {out / 'manifest.csv'}")
    return EXIT_OK


def cmd_train(args) -> int:
    if not args.config:
        raise CliError(EXIT_CONFIG, "--config is required for train")
    cfg: RunConfig = load_run_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    out = Path(args.out_dir or cfg.output.dir)
    if not cfg.data.train_manifest:
        raise CliError(EXIT_CONFIG, "data.train_manifest: required for training")
    train_m = _manifest(cfg.data.train_manifest, "train")
    root = _image_root(cfg.data.train_manifest, cfg.data.image_root)
    val_m = _manifest(cfg.data.val_manifest, "validation") if cfg.data.val_manifest else None
    val_root = _image_root(cfg.data.val_manifest, cfg.data.image_root) if val_m else root
    if cfg.model.num_labels != len(LABEL_NAMES):
        raise CliError(EXIT_CONFIG, f"model.num_labels: manifests carry {len(LABEL_NAMES)} labels")

    image_size = cfg.model.image_size
    aug = None
    if cfg.data.augment.enabled:
        a = cfg.data.augment
        aug = AugmentConfig(a.hflip_p, a.vflip_p, a.rotation_deg, tuple(a.jitter), (image_size, image_size),
                            seed=cfg.train.seed)
    train_set = _image_set(train_m, root, image_size) if cfg.train.sampler != "lp_ros" else train_m
    val_set = _image_set(val_m, val_root, image_size) if val_m else None
    try:
        result = train(cfg.model, train_set, cfg.train, val_set, root, aug, out, cfg.data.lp_ros_pct)
    except TrainingDiverged as exc:
        raise CliError(EXIT_DIVERGED, f"{exc}; last good checkpoint: {exc.last_good}") from None
    except FileNotFoundError as exc:
        raise CliError(EXIT_DATA, str(exc)) from None

    _write_json(out / "config.json", cfg.to_dict())
    eval_set = val_set if val_set is not None else _image_set(train_m, root, image_size)
    report = evaluate_model(result.model, eval_set)
    _write_json(out / "report.json", report.to_dict())
    if result.history:
        plot_history(result.history, out / "training_curves.png")
    print(json.dumps({"best": str(result.best_checkpoint), "model_score": report.model_score}))
    return EXIT_OK


def cmd_eval(args) -> int:
    model, mcfg = _load(args.checkpoint, args.config)
    m = _manifest(args.manifest, "validation")
    data = _image_set(m, _image_root(args.manifest, args.image_root), mcfg.image_size)
    report = evaluate_model(model, data, args.threshold)
    payload = report.to_dict()
    text = json.dumps(payload, indent=2, sort_keys=True)
    print(text)
    out = Path(args.out_dir) if args.out_dir else Path(args.checkpoint).parent
    _write_json(out / "eval_report.json", payload)
    if not report.composites_finite():
        raise CliError(EXIT_METRIC, "composite score is not finite (missing classes in this split)")
    return EXIT_OK


def cmd_predict(args) -> int:
    model, mcfg = _load(args.checkpoint, args.config)
    try:
        raw = read_image(args.image)
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_DATA, f"cannot read image {args.image}: {exc}") from None
    size = mcfg.image_size
    x = augment(raw, AugmentConfig.deterministic((size, size)), np.random.default_rng(0), max_value=255.0)
    with torch.no_grad():
        p = predict_proba(model, torch.from_numpy(x).unsqueeze(0))[0].double().numpy()
    names = LABEL_NAMES if len(p) == len(LABEL_NAMES) else [f"label{i}" for i in range(len(p))]
    for name, v in zip(names, p):
        print(f"{name}\t{v:.6f}")
    positives = [n for n, v in zip(names, p) if v >= args.threshold]
    print("positives\t" + (",".join(positives) if positives else "-"))
    return EXIT_OK


def _write_roc_csv(path: Path, points) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("fpr", "tpr"))
        for fpr, tpr in points:
            w.writerow((repr(float(fpr)), repr(float(tpr))))


def cmd_roc(args) -> int:
    if args.label not in LABEL_NAMES:
        raise CliError(EXIT_CONFIG, f"label: unknown label {args.label!r}")
    model, mcfg = _load(args.checkpoint, args.config)
    m = _manifest(args.manifest, "validation")
    data = _image_set(m, _image_root(args.manifest, args.image_root), mcfg.image_size)
    probs = predict_set(model, data)
    labels = data.targets.numpy()
    j = LABEL_NAMES.index(args.label)
    try:
        pts = roc_points(probs[:, j], labels[:, j])
    except UndefinedMetricError:
        raise CliError(EXIT_METRIC, f"label {args.label} has a single class in this split") from None
    out = Path(args.out_dir) if args.out_dir else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"roc_{args.label}.csv"
    _write_roc_csv(csv_path, pts)
    curves = {args.label: pts}
    aucs = {args.label: binary_auc(probs[:, j], labels[:, j])}
    if args.all:
        # gnuplot-style: one index block per label, blank-line separated
        with (out / "roc_all.dat").open("w", encoding="utf-8") as fh:
            for k, name in enumerate(LABEL_NAMES):
                try:
                    lp = roc_points(probs[:, k], labels[:, k])
                except UndefinedMetricError:
                    continue
                curves[name] = lp
                aucs[name] = binary_auc(probs[:, k], labels[:, k])
                fh.write(f"# {name} auc={aucs[name]!r}\n")
                fh.writelines(f"{x!r} {y!r}\n" for x, y in lp)
                fh.write("\n\n")
    if not args.no_plot:
        plot_roc(curves, out / (f"roc_{args.label}.png" if not args.all else "roc_all.png"), aucs)
    print(csv_path)
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    def global_flags(default):
        p = argparse.ArgumentParser(add_help=False, argument_default=default)
        p.add_argument("--config", help="run configuration (JSON)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir", dest="out_dir")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    parser = argparse.ArgumentParser(prog="retina-hybrid", description=__doc__.splitlines()[0],
                                     parents=[global_flags(None)])
    parser.set_defaults(verbose=False)
    # flags may also follow the subcommand; SUPPRESS keeps top-level values
    common = global_flags(argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic fundus-like dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--skew", type=float, default=0.5)
    p.add_argument("--image-size", dest="image_size", type=int, default=64)
    p.add_argument("--split", choices=("train", "validation"), default="train")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a model from a run config")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "score a checkpoint on a manifest"),
                                 ("roc", cmd_roc, "emit ROC points for one label")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--manifest", required=True)
        p.add_argument("--image-root", dest="image_root", default=None)
        p.set_defaults(func=func)
        if name == "eval":
            p.add_argument("--threshold", type=float, default=0.5)
        else:
            p.add_argument("--label", required=True)
            p.add_argument("--all", action="store_true", help="also write roc_all.dat for every label")
            p.add_argument("--no-plot", dest="no_plot", action="store_true")

    p = sub.add_parser("predict", parents=[common], help="per-label probabilities for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
