"""Command-line entry point: scene synthesis, training, evaluation,
prediction maps, gradient checking, and model summary.

Option precedence is flags > config file (key=value lines) > defaults;
unknown config keys are hard usage errors. All randomness flows from
--seed. Exit codes: 0 success, 1 runtime or data error, 2 usage error.
BLAS worker threads are capped via --threads (default 1, which keeps runs
bit-reproducible across machines); the cap is applied before numpy loads,
so it has no effect if numpy is already imported in this process.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

USAGE_ERROR = 2
RUNTIME_ERROR = 1
PUBLISHED_PARAM_COUNT = 1.2829e6


class Option:
    def __init__(self, flag: str, type_, default, help_: str, choices=None):
        self.flag = flag
        self.name = flag.lstrip("-").replace("-", "_")
        self.type = type_
        self.default = default
        self.help = help_
        self.choices = choices


def _bool_flag(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {value!r}")


MODEL_OPTIONS = [
    Option("--pca", int, 30, "principal components kept from the HSI cube"),
    Option("--patch", int, 11, "square patch size (odd)"),
    Option("--width", int, 64, "feature channels through the fusion modules"),
    Option("--dffm", int, 2, "number of fusion modules"),
    Option("--bases", int, 4, "learnable filter bases per dynamic filter block"),
    Option("--post-width", int, 64, "channels of the per-stream conv after the fusion stack"),
    Option("--head-hidden", int, 7168, "hidden width of the classifier"),
    Option("--no-dfb", bool, False, "ablate the dynamic filter blocks"),
    Option("--no-ssafb", bool, False, "ablate the fusion blocks"),
]

TRAIN_OPTIONS = MODEL_OPTIONS + [
    Option("--data", str, None, "scene directory (required)"),
    Option("--out", str, None, "checkpoint directory to write (required)"),
    Option("--epochs", int, 100, "training epochs"),
    Option("--lr", float, 1e-4, "Adam learning rate"),
    Option("--batch", int, 128, "mini-batch size"),
    Option("--train-fraction", float, 0.1, "per-class fraction of labeled pixels used for training"),
    Option("--weight-decay", float, 0.0, "L2 penalty added to gradients"),
    Option("--lr-decay", float, 1.0, "per-epoch learning-rate factor"),
    Option("--dtype", str, "f32", "training precision", choices=("f32", "f64")),
    Option("--seed", int, 42, "seed for split, init, and shuffling"),
]

SYNTH_OPTIONS = [
    Option("--out", str, None, "scene directory to write (required)"),
    Option("--classes", int, 5, "number of land-cover classes (>= 2)"),
    Option("--size", int, 64, "scene side length in pixels"),
    Option("--bands", int, 32, "spectral bands"),
    Option("--aux-channels", int, 1, "auxiliary modality channels"),
    Option("--seed", int, 42, "generator seed"),
]

EVAL_OPTIONS = [
    Option("--model", str, None, "checkpoint directory (required)"),
    Option("--data", str, None, "scene directory (required)"),
    Option("--split", str, "test", "which pixels to score", choices=("train", "test", "all")),
    Option("--batch", int, 128, "inference batch size"),
    Option("--out-cm", str, "confusion.csv", "where to write the confusion matrix CSV"),
]

PREDICT_OPTIONS = [
    Option("--model", str, None, "checkpoint directory (required)"),
    Option("--data", str, None, "scene directory (required)"),
    Option("--out", str, None, "output label map, i32 DTNS (required)"),
    Option("--batch", int, 128, "inference batch size"),
]

GRADCHECK_OPTIONS = [
    Option("--op", str, "all", "op name or 'all'"),
    Option("--tolerance", float, 1e-4, "max relative error vs finite differences"),
    Option("--seed", int, 0, "randomization seed for test inputs"),
]

SUMMARY_OPTIONS = MODEL_OPTIONS + [
    Option("--classes", int, 15, "classifier output classes"),
    Option("--aux-channels", int, 1, "auxiliary modality channels"),
    Option("--seed", int, 42, "initialization seed"),
]

COMMANDS = {
    "synth": (SYNTH_OPTIONS, "generate a synthetic multi-modal scene"),
    "train": (TRAIN_OPTIONS, "train on a scene directory"),
    "eval": (EVAL_OPTIONS, "score a checkpoint on a scene split"),
    "predict": (PREDICT_OPTIONS, "write a full-scene prediction map"),
    "gradcheck": (GRADCHECK_OPTIONS, "finite-difference check of registered ops"),
    "summary": (SUMMARY_OPTIONS, "parameter count and MAC estimate for a configuration"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dffnet", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (options, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="key=value file; flags override it")
        p.add_argument("--threads", type=int, help="BLAS worker cap (default 1)")
        for opt in options:
            if opt.type is bool:
                p.add_argument(opt.flag, action="store_const", const=True,
                               default=argparse.SUPPRESS, help=opt.help)
            else:
                p.add_argument(opt.flag, type=opt.type, default=argparse.SUPPRESS,
                               help=opt.help + (f" (default {opt.default})" if opt.default is not None else ""),
                               choices=opt.choices)
    return parser


def _parse_config_file(path: str) -> dict:
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}")
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


class UsageError(Exception):
    pass


def resolve_options(args: argparse.Namespace, options) -> dict:
    """Merge flags > config file > defaults; reject unknown config keys."""
    by_name = {opt.name: opt for opt in options}
    resolved = {opt.name: opt.default for opt in options}
    if getattr(args, "config", None):
        file_values = _parse_config_file(args.config)
        for key, raw in file_values.items():
            if key == "threads":
                continue
            if key not in by_name:
                raise UsageError(f"unknown config key {key!r} in {args.config}")
            opt = by_name[key]
            try:
                resolved[key] = _bool_flag(raw) if opt.type is bool else opt.type(raw)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"config key {key!r}: {exc}")
            if opt.choices and resolved[key] not in opt.choices:
                raise UsageError(f"config key {key!r}: must be one of {opt.choices}")
    for key, value in vars(args).items():
        if key in by_name:
            resolved[key] = value
    return resolved


def print_resolved(command: str, resolved: dict) -> None:
    pairs = " ".join(f"{k}={v}" for k, v in sorted(resolved.items()))
    print(f"[dffnet {command}] {pairs}")


def _require(resolved: dict, *names: str) -> None:
    for name in names:
        if resolved[name] is None:
            raise UsageError(f"--{name.replace('_', '-')} is required")


def _model_config(resolved: dict, num_classes: int, aux_channels: int, seed: int):
    from .model import ModelConfig
    from .tensor import ShapeError

    try:
        return ModelConfig(
            num_classes=num_classes,
            aux_channels=aux_channels,
            pca_components=resolved["pca"],
            patch_size=resolved["patch"],
            width=resolved["width"],
            dffm_count=resolved["dffm"],
            filter_bases=resolved["bases"],
            post_width=resolved["post_width"],
            head_hidden=resolved["head_hidden"],
            use_dfb=not resolved["no_dfb"],
            use_ssafb=not resolved["no_ssafb"],
            seed=seed,
        )
    except ShapeError as exc:
        raise UsageError(str(exc))


# -- commands -----------------------------------------------------------------


def cmd_synth(resolved: dict) -> int:
    from .data import DataError, save_scene, synth_generate

    _require(resolved, "out")
    if resolved["classes"] < 2:
        raise UsageError(f"--classes must be >= 2, got {resolved['classes']}")
    scene = synth_generate(resolved["classes"], resolved["size"], resolved["bands"],
                           resolved["aux_channels"], resolved["seed"])
    save_scene(resolved["out"], scene, meta={"seed": resolved["seed"]})
    print(f"wrote scene to {resolved['out']}: {scene.hsi.shape[0]} bands,"
          f" {scene.spatial_shape[0]}x{scene.spatial_shape[1]} pixels,"
          f" {scene.num_classes} classes")
    return 0


def _prepare_datasets(scene, resolved: dict, split_seed: int, dtype):
    import numpy as np

    from .data import build_patch_dataset, pca_fit, pca_reduce_cube, split_dataset

    split = split_dataset(scene, resolved["train_fraction"], split_seed)
    train_pixels = np.array([scene.hsi[:, r, c] for r, c, _ in split.train])
    pca = pca_fit(train_pixels, resolved["pca"])
    reduced = pca_reduce_cube(pca, scene.hsi)
    train_ds = build_patch_dataset(reduced, scene.aux, scene.labels, split.train,
                                   resolved["patch"], dtype)
    test_ds = build_patch_dataset(reduced, scene.aux, scene.labels, split.test,
                                  resolved["patch"], dtype)
    return split, pca, reduced, train_ds, test_ds


def cmd_train(resolved: dict) -> int:
    import numpy as np

    from .data import load_scene
    from .model import init_model_params, save_checkpoint
    from .train import TrainSettings, train, write_history

    _require(resolved, "data", "out")
    dtype = np.float32 if resolved["dtype"] == "f32" else np.float64
    scene = load_scene(resolved["data"])
    if scene.num_classes < 2:
        raise UsageError("scene has fewer than 2 labeled classes")
    seed = resolved["seed"]
    config = _model_config(resolved, scene.num_classes, scene.aux.shape[0], seed)
    split, pca, _, train_ds, test_ds = _prepare_datasets(scene, resolved, seed, dtype)
    params = init_model_params(config, dtype)
    settings = TrainSettings(epochs=resolved["epochs"], batch_size=resolved["batch"],
                             lr=resolved["lr"], weight_decay=resolved["weight_decay"],
                             lr_decay=resolved["lr_decay"], seed=seed)
    history = train(config, params, train_ds, settings)
    out = Path(resolved["out"])
    extras = {"pca.mean": pca.mean, "pca.components": pca.components,
              "pca.eigenvalues": pca.eigenvalues}
    meta = {"train_fraction": resolved["train_fraction"], "split_seed": seed,
            "dtype": resolved["dtype"], "epochs": resolved["epochs"],
            "lr": resolved["lr"], "batch": resolved["batch"]}
    save_checkpoint(out, config, params, extras=extras, meta=meta)
    write_history(out / "history.csv", history)
    print(f"final train OA {history[-1].train_oa:.4f}; checkpoint at {out}")
    return 0


def _load_model_and_scene(resolved: dict):
    from .data import load_scene, PcaModel
    from .model import load_checkpoint

    config, params, extras, meta = load_checkpoint(resolved["model"])
    scene = load_scene(resolved["data"])
    for key in ("pca.mean", "pca.components", "pca.eigenvalues"):
        if key not in extras:
            raise UsageError(f"checkpoint lacks {key}; cannot transform the scene")
    pca = PcaModel(extras["pca.mean"], extras["pca.components"], extras["pca.eigenvalues"])
    if scene.hsi.shape[0] != pca.mean.shape[0]:
        raise UsageError(f"scene has {scene.hsi.shape[0]} bands, checkpoint expects {pca.mean.shape[0]}")
    return config, params, meta, scene, pca


def cmd_eval(resolved: dict) -> int:
    import numpy as np

    from .data import build_patch_dataset, pca_reduce_cube, split_dataset
    from .train import evaluate, metrics, write_confusion

    _require(resolved, "model", "data")
    config, params, meta, scene, pca = _load_model_and_scene(resolved)
    reduced = pca_reduce_cube(pca, scene.hsi)
    if resolved["split"] == "all":
        rows, cols = np.nonzero(scene.labels > 0)
        entries = [(int(r), int(c), int(scene.labels[r, c])) for r, c in zip(rows, cols)]
    else:
        split = split_dataset(scene, float(meta.get("train_fraction", 0.1)),
                              int(meta.get("split_seed", config.seed)))
        entries = split.train if resolved["split"] == "train" else split.test
    dataset = build_patch_dataset(reduced, scene.aux, scene.labels, entries,
                                  config.patch_size, np.float64)
    cm = evaluate(config, params, dataset, resolved["batch"])
    m = metrics(cm)
    for cls, acc in enumerate(m.per_class, start=1):
        shown = "n/a" if np.isnan(acc) else f"{acc:.4f}"
        print(f"class {cls:2d} accuracy {shown}")
    print(f"OA {m.oa:.4f}  AA {m.aa:.4f}  Kappa {m.kappa:.4f} "
          f"({cm.total} samples, split={resolved['split']})")
    write_confusion(resolved["out_cm"], cm)
    print(f"confusion matrix written to {resolved['out_cm']}")
    return 0


def cmd_predict(resolved: dict) -> int:
    import numpy as np

    from .data import build_patch_dataset, pca_reduce_cube, write_tensor
    from .train import predict_batched

    _require(resolved, "model", "data", "out")
    config, params, meta, scene, pca = _load_model_and_scene(resolved)
    reduced = pca_reduce_cube(pca, scene.hsi)
    h, w = scene.spatial_shape
    entries = [(r, c, 0) for r in range(h) for c in range(w)]
    dataset = build_patch_dataset(reduced, scene.aux, scene.labels, entries,
                                  config.patch_size, np.float64)
    preds = predict_batched(config, params, dataset, resolved["batch"])
    label_map = (preds.reshape(h, w) + 1).astype(np.int32)
    write_tensor(resolved["out"], label_map)
    print(f"prediction map ({h}x{w}) written to {resolved['out']}")
    return 0


def cmd_gradcheck(resolved: dict) -> int:
    import time

    from .checks import REGISTRY, run_checks

    if resolved["op"] == "all":
        names = sorted(REGISTRY)
    elif resolved["op"] in REGISTRY:
        names = [resolved["op"]]
    else:
        known = ", ".join(sorted(REGISTRY))
        raise UsageError(f"unknown op {resolved['op']!r}; known: {known}")
    start = time.perf_counter()
    all_ok = True
    for name, report in run_checks(names, resolved["tolerance"], resolved["seed"]):
        status = "PASS" if report.passed else "FAIL"
        all_ok &= report.passed
        print(f"{status} {name} (max_rel_err {report.max_rel_err:.3e})")
        if not report.passed:
            print(str(report))
    print(f"checked {len(names)} ops in {time.perf_counter() - start:.2f}s")
    return 0 if all_ok else RUNTIME_ERROR


def cmd_summary(resolved: dict) -> int:
    from .model import count_parameters, estimate_macs

    config = _model_config(resolved, resolved["classes"], resolved["aux_channels"],
                           resolved["seed"])
    count = count_parameters(config)
    macs = estimate_macs(config)
    print(f"learnable parameters: {count} ({count / 1e6:.4f} M)")
    print(f"ratio to published 1.2829 M: {count / PUBLISHED_PARAM_COUNT:.3f}")
    print(f"approx multiply-accumulates per sample: {macs} ({macs / 1e6:.1f} M)")
    return 0


HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
    "summary": cmd_summary,
}


def _cap_threads(argv) -> None:
    threads = 1
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            try:
                threads = int(argv[i + 1])
            except ValueError:
                return  # argparse reports it
        elif arg.startswith("--threads="):
            try:
                threads = int(arg.split("=", 1)[1])
            except ValueError:
                return
    if threads < 1:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(threads))


def _tune_allocator() -> None:
    # keep large buffers on the heap instead of returning them to the OS;
    # avoids page-fault storms from the per-batch allocation churn
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _cap_threads(argv)  # must precede the first numpy import in this process
    _tune_allocator()
    parser = build_parser()
    args = parser.parse_args(argv)
    options, _ = COMMANDS[args.command]
    try:
        resolved = resolve_options(args, options)
        print_resolved(args.command, resolved)
        return HANDLERS[args.command](resolved)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        from .data import DataError
        from .tensor import ShapeError
        from .train import TrainingError

        if isinstance(exc, (DataError, ShapeError, TrainingError, OSError)):
            print(f"error: {exc}", file=sys.stderr)
            return RUNTIME_ERROR
        raise


if __name__ == "__main__":
    sys.exit(main())
