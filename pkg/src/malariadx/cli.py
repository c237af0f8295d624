"""Command-line entry point: train, eval, baselines, augment-preview, predict.

Every flag can also come from a plain ``key=value`` file passed with
``--config``; keys are flag names without the leading dashes (``-`` and
``_`` are interchangeable).  Flags given on the command line win over the
file, and the file wins over built-in defaults.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import metrics
from .augment import AugmentConfig, AugmentedBatch, batch_rng, cutmix, mixup, random_pairing, sample_lambda
from .baselines import ForestConfig, feature_matrix, train_random_forest, watershed_classify
from .checkpoint import load_checkpoint, load_for_finetune, save_checkpoint, write_bytes_atomic
from .data import (DEFAULT_RATIOS, DatasetManifest, LabeledSample, SynthConfig, build_splits,
                   load_image_folder, preprocess, read_png, split_dataset, synth_generate, write_png)
from .errors import CheckpointError, LayoutError, MalariaDxError, PersistenceError, RejectedInputError
from .model import PRESETS, preset, predict_proba
from .training import Model, TrainConfig, fit

logger = logging.getLogger("malariadx")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CHECKPOINT = 4
EXIT_PARTIAL = 5

PREDICTED_NAMES = {1: "parasitized", 0: "uninfected"}
PROPOSED_NAME = "Proposed Model"
VGG_NAME = "VGG-mini (no skip)"


class ConfigError(MalariaDxError):
    pass


class DataError(MalariaDxError):
    pass


def _category(exc: BaseException):
    if isinstance(exc, CheckpointError):
        return "checkpoint", EXIT_CHECKPOINT
    if isinstance(exc, (DataError, LayoutError)):
        return "data", EXIT_DATA
    return "config", EXIT_CONFIG


def _fail(category: str, message: str) -> None:
    print(f"error: {category}: {' '.join(str(message).split())}", file=sys.stderr)


# ---------------------------------------------------------------------------
# argument parsing


def _ratios(text: str):
    try:
        parts = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated integers, got {text!r}")
    if len(parts) != 3 or min(parts) < 0 or sum(parts) == 0:
        raise argparse.ArgumentTypeError(f"expected three non-negative integers, got {text!r}")
    return parts


def _names(text: str):
    return tuple(p.strip() for p in text.split(",") if p.strip())


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _add_data(p):
    p.add_argument("--data-root", help="folder with Parasitized/ and Uninfected/ PNG subfolders")
    p.add_argument("--synth", action="store_true", help="use the synthetic cell generator instead of a folder")
    p.add_argument("--synth-per-class", type=int, default=SynthConfig.per_class,
                   help="synthetic images per class")
    p.add_argument("--synth-seed", type=int, default=None,
                   help="generator seed (defaults to --seed)")
    p.add_argument("--image-size", type=int, default=64, help="square input resolution")
    p.add_argument("--ratios", type=_ratios, default=DEFAULT_RATIOS,
                   help="train,test,validation split ratios")
    p.add_argument("--manifest", help="reuse an existing split manifest instead of re-splitting")


def _add_training(p):
    p.add_argument("--preset", choices=sorted(PRESETS), default="resnet-mini", help="model architecture")
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs, help="training epochs")
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size, help="mini-batch size")
    p.add_argument("--lr", type=float, default=TrainConfig.learning_rate, help="Adam learning rate")
    p.add_argument("--beta1", type=float, default=TrainConfig.beta1, help="Adam first-moment decay")
    p.add_argument("--beta2", type=float, default=TrainConfig.beta2, help="Adam second-moment decay")
    p.add_argument("--adam-eps", type=float, default=TrainConfig.eps, help="Adam denominator epsilon")
    p.add_argument("--mixup-alpha", type=float, default=AugmentConfig.mixup_alpha,
                   help="Beta(alpha, alpha) parameter for MixUp")
    p.add_argument("--cutmix-alpha", type=float, default=AugmentConfig.cutmix_alpha,
                   help="Beta(alpha, alpha) parameter for CutMix")
    p.add_argument("--augment-probability", type=float, default=AugmentConfig.apply_probability,
                   help="per-batch probability of each augmentation")
    p.add_argument("--no-augment", action="store_true", help="disable MixUp and CutMix")
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32",
                   help="parameter precision")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="malariadx", formatter_class=fmt,
                                     description="Malaria cell classifier: training, evaluation and baselines.")
    parser.add_argument("--config", help="key=value file supplying defaults for any flag")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=fmt)
        p.add_argument("--seed", type=int, default=0, help="seed for splitting, init, shuffling and augmentation")
        p.add_argument("--out", default="out", help="output directory")
        return p

    p = command("train", "train a model and write checkpoint, epoch log and manifest")
    _add_data(p)
    _add_training(p)
    p.add_argument("--freeze", type=_names, default=(), help="comma-separated parameter prefixes to freeze")
    p.add_argument("--init-checkpoint", help="start from matching tensors of this checkpoint")

    p = command("eval", "score a checkpoint on one split and write the metrics table")
    _add_data(p)
    p.add_argument("--checkpoint", help="model checkpoint to evaluate")
    p.add_argument("--split", choices=("train", "test", "validation"), default="test", help="split to score")
    p.add_argument("--threshold", type=float, default=metrics.DEFAULT_THRESHOLD,
                   help="probability at or above which a cell is called parasitized")
    p.add_argument("--model-name", default=PROPOSED_NAME, help="row label in the report")
    p.add_argument("--reports", help="render this metrics CSV instead of scoring a checkpoint")
    p.add_argument("--reference", action="store_true", help="render the bundled reference comparison")

    p = command("baselines", "compare the model with random forest, watershed and a plain conv net")
    _add_data(p)
    _add_training(p)
    p.add_argument("--checkpoint", help="proposed-model checkpoint (trained from scratch when omitted)")
    p.add_argument("--threshold", type=float, default=metrics.DEFAULT_THRESHOLD,
                   help="probability at or above which a cell is called parasitized")
    p.add_argument("--trees", type=int, default=ForestConfig.n_trees, help="random forest size")
    p.add_argument("--max-depth", type=int, default=ForestConfig.max_depth, help="random forest depth limit")

    p = command("augment-preview", "write a PNG grid of original, MixUp and CutMix images")
    _add_data(p)
    p.add_argument("--count", type=int, default=6, help="images per row")
    p.add_argument("--mixup-alpha", type=float, default=AugmentConfig.mixup_alpha,
                   help="Beta(alpha, alpha) parameter for MixUp")
    p.add_argument("--cutmix-alpha", type=float, default=AugmentConfig.cutmix_alpha,
                   help="Beta(alpha, alpha) parameter for CutMix")
    p.add_argument("--force-lambda", type=float, default=None, help="use this lambda for both techniques")

    p = command("predict", "print path, probability and label for each image")
    p.add_argument("images", nargs="+", help="PNG files to classify")
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--threshold", type=float, default=metrics.DEFAULT_THRESHOLD,
                   help="probability at or above which a cell is called parasitized")
    return parser


def _subparsers(parser: argparse.ArgumentParser) -> Dict[str, argparse.ArgumentParser]:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return dict(action.choices)
    return {}


def read_config_file(path) -> Dict[str, str]:
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _apply_config(parser: argparse.ArgumentParser, values: Dict[str, str], source) -> None:
    """Install file values as defaults on every subcommand that knows the key."""
    subs = _subparsers(parser)
    known = set()
    for sub in subs.values():
        defaults = {}
        for action in sub._actions:
            if action.dest not in values or not action.option_strings:
                continue
            raw = values[action.dest]
            try:
                if isinstance(action, argparse._StoreTrueAction):
                    value = _bool(raw)
                elif action.type is not None:
                    value = action.type(raw)
                else:
                    value = raw
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise ConfigError(f"{source}: bad value for {action.dest}: {exc}") from exc
            if action.choices is not None and value not in action.choices:
                raise ConfigError(f"{source}: {action.dest} must be one of {sorted(action.choices)}")
            defaults[action.dest] = value
            known.add(action.dest)
        sub.set_defaults(**defaults)
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"{source}: unknown keys {', '.join(unknown)}")


# ---------------------------------------------------------------------------
# shared steps


def _check_data_source(args) -> None:
    if bool(args.synth) == bool(args.data_root):
        raise ConfigError("give exactly one of --data-root or --synth")
    if args.data_root and not Path(args.data_root).is_dir():
        raise ConfigError(f"dataset path {args.data_root} does not exist")
    if args.manifest and not Path(args.manifest).is_file():
        raise ConfigError(f"manifest {args.manifest} does not exist")


def _synth_config(args) -> SynthConfig:
    seed = args.seed if args.synth_seed is None else args.synth_seed
    return SynthConfig(per_class=args.synth_per_class, image_size=args.image_size, seed=seed)


def _load_samples(args) -> List[LabeledSample]:
    if args.synth:
        samples, _ = synth_generate(_synth_config(args))
        return samples
    samples, errors = load_image_folder(args.data_root, (args.image_size, args.image_size))
    for rel, msg in errors:
        logger.warning("unreadable image %s: %s", rel, msg)
    return samples


def _manifest(args, samples) -> DatasetManifest:
    if args.manifest:
        try:
            manifest = DatasetManifest.from_tsv(Path(args.manifest).read_text(), args.ratios, args.seed)
        except RejectedInputError as exc:
            raise DataError(str(exc)) from exc
        ids = {s.source_id for s in samples}
        absent = [r.path for r in manifest.records if r.path not in ids]
        if absent:
            raise DataError(f"{len(absent)} manifest entries not found in the dataset, e.g. {absent[0]}")
        return manifest
    try:
        return split_dataset(samples, args.ratios, args.seed)
    except RejectedInputError as exc:
        raise DataError(str(exc)) from exc


def _prepare_out(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise PersistenceError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _write_text(path: Path, text: str) -> None:
    write_bytes_atomic(path, text.encode("utf-8"))


def _train_config(args) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
                       beta1=args.beta1, beta2=args.beta2, eps=args.adam_eps, seed=args.seed,
                       freeze_prefixes=tuple(getattr(args, "freeze", ()) or ()))


def _augment_config(args) -> Optional[AugmentConfig]:
    if args.no_augment:
        return None
    return AugmentConfig(args.mixup_alpha, args.cutmix_alpha, args.augment_probability, args.seed)


def _train(args, name: str, splits, out: Path, tag: str, init_checkpoint=None):
    config = preset(name, (3, args.image_size, args.image_size))
    model = Model.create(config, args.seed, dtype=np.dtype(args.dtype))
    if init_checkpoint:
        params, fresh = load_for_finetune(init_checkpoint, config, args.seed, np.dtype(args.dtype))
        model.params = params
        logger.info("initialized from %s; %d tensors kept fresh", init_checkpoint, len(fresh))
    save_checkpoint(model.params, config, out / f"{tag}initial.plsm")
    result = fit(model, splits, _augment_config(args), _train_config(args),
                 checkpoint_path=out / f"{tag}checkpoint.plsm", log_path=out / f"{tag}epochs.tsv")
    return result, config


def _run_config_text(args) -> str:
    lines = (["synth=true", f"synth_per_class={args.synth_per_class}"] if args.synth
             else [f"data_root={Path(args.data_root).resolve()}"])
    if args.synth and args.synth_seed is not None:
        lines.append(f"synth_seed={args.synth_seed}")
    lines += [f"image_size={args.image_size}", f"ratios={','.join(map(str, args.ratios))}",
              f"seed={args.seed}"]
    return "".join(line + "\n" for line in lines)


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    _check_data_source(args)
    if args.init_checkpoint and not Path(args.init_checkpoint).is_file():
        raise ConfigError(f"checkpoint {args.init_checkpoint} does not exist")
    _train_config(args)
    _augment_config(args)
    samples = _load_samples(args)
    manifest = _manifest(args, samples)
    splits = build_splits(samples, manifest)
    out = _prepare_out(args)
    _write_text(out / "manifest.tsv", manifest.to_tsv())
    _write_text(out / "run.cfg", _run_config_text(args))
    result, _ = _train(args, args.preset, splits, out, "", args.init_checkpoint)
    print(f"best_epoch\t{result.best_epoch}\tval_acc\t{result.best_val_acc:.8f}"
          f"\tval_loss\t{result.best_val_loss:.8f}\tcheckpoint\t{result.checkpoint_path}")
    return EXIT_OK


def _emit_reports(out: Path, stem: str, reports) -> None:
    table = metrics.format_report(reports)
    _write_text(out / f"{stem}.csv", metrics.to_csv(reports))
    _write_text(out / f"{stem}.txt", table)
    sys.stdout.write(table)


def cmd_eval(args) -> int:
    if args.reports or args.reference:
        if args.reports:
            try:
                reports = metrics.from_csv(Path(args.reports).read_text())
            except OSError as exc:
                raise ConfigError(f"cannot read {args.reports}: {exc}") from exc
            except RejectedInputError as exc:
                raise DataError(str(exc)) from exc
        else:
            reports = metrics.reference_reports()
        _emit_reports(_prepare_out(args), "report", reports)
        return EXIT_OK

    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint (or --reports/--reference)")
    _check_data_source(args)
    if not Path(args.checkpoint).is_file():
        raise ConfigError(f"checkpoint {args.checkpoint} does not exist")
    params, config = load_checkpoint(args.checkpoint)
    if tuple(config.input_size[1:]) != (args.image_size, args.image_size):
        raise ConfigError(f"checkpoint expects {config.input_size[1:]} inputs; set --image-size")
    samples = _load_samples(args)
    split = build_splits(samples, _manifest(args, samples))[args.split]
    if len(split) == 0:
        raise DataError(f"split {args.split!r} is empty")
    probs = predict_proba(params, config, split.images)
    report = metrics.evaluate_predictions(args.model_name, probs, split.labels, args.threshold)
    _emit_reports(_prepare_out(args), f"metrics_{args.split}", [report])
    return EXIT_OK


def cmd_baselines(args) -> int:
    _check_data_source(args)
    if args.checkpoint and not Path(args.checkpoint).is_file():
        raise ConfigError(f"checkpoint {args.checkpoint} does not exist")
    forest_config = ForestConfig(n_trees=args.trees, max_depth=args.max_depth, seed=args.seed)
    _train_config(args)
    _augment_config(args)
    samples = _load_samples(args)
    manifest = _manifest(args, samples)
    splits = build_splits(samples, manifest)
    train, test = splits["train"], splits["test"]
    if len(test) == 0:
        raise DataError("test split is empty")
    out = _prepare_out(args)
    _write_text(out / "manifest.tsv", manifest.to_tsv())
    digest = manifest.sha256()
    test_images, test_labels = test.images, test.labels

    forest = train_random_forest(feature_matrix(train.images), train.labels, forest_config)
    rf_probs = forest.predict_proba(feature_matrix(test_images))
    logger.info("random forest done")
    ws_probs = np.array([watershed_classify(im) for im in test_images])
    logger.info("watershed done")
    vgg, vgg_config = _train(args, "vgg-mini", splits, out, "vgg_")
    vgg_probs = predict_proba(vgg.best_params, vgg_config, test_images)
    logger.info("plain conv net done")
    if args.checkpoint:
        params, config = load_checkpoint(args.checkpoint)
    else:
        result, config = _train(args, args.preset, splits, out, "proposed_")
        params = result.best_params
    proposed_probs = predict_proba(params, config, test_images)

    rows = [("Random Forest", rf_probs), (VGG_NAME, vgg_probs),
            ("Watershed Segmentation", ws_probs), (PROPOSED_NAME, proposed_probs)]
    reports = [metrics.evaluate_predictions(name, p, test_labels, args.threshold) for name, p in rows]
    _emit_reports(out, "comparison", reports)
    hashes = "".join(f"{r.model}\t{digest}\t{len(test)}\n" for r in reports)
    _write_text(out / "comparison_manifest.tsv", hashes)
    for r in reports:
        print(f"manifest sha256 [{r.model}]: {digest}")
    return EXIT_OK


def _grid(rows: Sequence[np.ndarray], gap: int = 2) -> np.ndarray:
    """Tile rows of (N, C, H, W) images into one (C, H', W') image, white gaps."""
    n, c, h, w = rows[0].shape
    grid = np.ones((c, len(rows) * (h + gap) - gap, n * (w + gap) - gap))
    for r, images in enumerate(rows):
        for i, im in enumerate(images):
            y, x = r * (h + gap), i * (w + gap)
            grid[:, y:y + h, x:x + w] = im
    return grid


def cmd_augment_preview(args) -> int:
    _check_data_source(args)
    if args.count < 2:
        raise ConfigError("--count must be at least 2 (images are paired with each other)")
    lam = args.force_lambda
    if lam is not None and not 0.0 <= lam <= 1.0:
        raise ConfigError("--force-lambda must lie in [0, 1]")
    AugmentConfig(args.mixup_alpha, args.cutmix_alpha, 1.0, args.seed)
    samples = _load_samples(args)
    if len(samples) < args.count:
        raise DataError(f"dataset has {len(samples)} images, fewer than --count {args.count}")
    pick = np.sort(batch_rng(args.seed, 0).choice(len(samples), size=args.count, replace=False))
    chosen = [samples[i] for i in pick]
    batch = AugmentedBatch(np.stack([s.image for s in chosen]), [s.label for s in chosen])

    rng = batch_rng(args.seed, 1)
    pairing = random_pairing(args.count, rng)
    lam_mix = sample_lambda(args.mixup_alpha, rng) if lam is None else lam
    lam_cut = sample_lambda(args.cutmix_alpha, rng) if lam is None else lam
    mixed = mixup(batch, lam_mix, pairing)
    cut = cutmix(batch, lam_cut, pairing, rng)

    out = _prepare_out(args)
    write_png(_grid([batch.images, mixed.images, cut.images]), out / "augment_preview.png")
    lines = [f"mixup_lambda\t{float(lam_mix)!r}", f"cutmix_lambda\t{float(lam_cut)!r}",
             "column\tsource\tpartner\tlabel\tmixup_label\tlambda_eff\tbox\tcutmix_label"]
    for i, s in enumerate(chosen):
        rec = cut.provenance[i][-1]
        box = ",".join(map(str, rec.box))
        lines.append(f"{i}\t{s.source_id}\t{int(pairing[i])}\t{s.label}\t{float(mixed.labels[i])!r}"
                     f"\t{float(rec.lam)!r}\t{box}\t{float(cut.labels[i])!r}")
    _write_text(out / "augment_preview.txt", "".join(line + "\n" for line in lines))
    print(out / "augment_preview.png")
    return EXIT_OK


def cmd_predict(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise ConfigError(f"checkpoint {args.checkpoint} does not exist")
    params, config = load_checkpoint(args.checkpoint)
    size = tuple(config.input_size[1:])
    failures = 0
    for path in args.images:
        try:
            image = read_png(path)
            sample = preprocess(LabeledSample(image, 0, str(path)), size)
            if sample.image.shape[0] != config.input_size[0]:
                raise RejectedInputError(f"expected {config.input_size[0]} channels")
        except (OSError, ValueError) as exc:
            _fail("data", f"{path}: {exc}")
            failures += 1
            continue
        p = float(predict_proba(params, config, sample.image[None])[0])
        print(f"{path}\t{p!r}\t{PREDICTED_NAMES[int(p >= args.threshold)]}")
        sys.stdout.flush()
    if failures == len(args.images):
        return EXIT_DATA
    return EXIT_PARTIAL if failures else EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "baselines": cmd_baselines,
    "augment-preview": cmd_augment_preview,
    "predict": cmd_predict,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, rest = pre.parse_known_args(argv)
    parser = build_parser()
    try:
        if known.config:
            _apply_config(parser, read_config_file(known.config), known.config)
    except ConfigError as exc:
        _fail("config", exc)
        return EXIT_CONFIG
    args = parser.parse_args(rest)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except MalariaDxError as exc:
        category, code = _category(exc)
        _fail(category, exc)
        return code


if __name__ == "__main__":
    sys.exit(main())
