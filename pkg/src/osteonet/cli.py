"""Command-line entry point.

Subcommands:
    ingest      build a manifest from class-labelled image directories
    train       split, train, checkpoint, and export curves
    eval        evaluate a checkpoint on the test split, write reports
    gridsearch  train one model per (lr, batch) cell and pick the best
    gradcheck   verify analytic gradients against finite differences

Configuration is a plain-text file of `key = value` lines (see
KEY_REGISTRY); unknown keys are rejected. `--seed` and `--out` override
the config. Every command writes its outputs under one run directory
named by config hash + timestamp and prints that path as `run_dir:`.

Exit codes: 0 success, 1 verification failure (gradient check failed or
training diverged), 2 configuration error, 3 I/O error.

`OSTEO_THREADS` caps worker parallelism; this build evaluates everything
on one worker, so any positive value is accepted and honoured trivially.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
import time
from dataclasses import replace

from .data import (
    balance_classes,
    batch_iter,
    load_manifest,
    load_manifest_file,
    merge_datasets,
    save_manifest,
    stratified_split,
)
from .errors import (
    ConfigError,
    DatasetError,
    DecodeError,
    DivergenceError,
    OsteonetError,
    WeightFormatError,
    WeightShapeError,
)
from .evaluation import (
    classification_report,
    confusion_matrix,
    export_curves,
    metrics,
    write_confusion_csv,
)
from .gradcheck import model_grad_check, run_op_battery
from .model import ConvBlockSpec, ModelConfig, StageSpec, model_forward, predict
from .preprocessing import AugmentPolicy
from .rng import Rng
from .training import GridSpec, TrainSettings, checkpoint_load, grid_search, train

EXIT_OK = 0
EXIT_VERIFICATION = 1
EXIT_CONFIG = 2
EXIT_IO = 3


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _csv(parser):
    return lambda text: tuple(parser(part.strip()) for part in text.split(",") if part.strip())


# key -> (parser, default); None default means "unset"
KEY_REGISTRY: dict = {
    "dataset_roots": (_csv(str), None),
    "class_names": (_csv(str), ("Normal", "Osteoporosis")),
    "source_names": (_csv(str), None),
    "expected_total": (int, None),
    "expected_class_counts": (_csv(int), None),
    "balance": (_parse_bool, True),
    "seed": (int, 0),
    "out_dir": (str, "runs"),
    "manifest": (str, None),
    "checkpoint": (str, None),
    "split_fractions": (_csv(float), (0.6, 0.2, 0.2)),
    # model; profile defaults to "default", except gradcheck which uses "reduced"
    "profile": (str, None),
    "input_size": (int, None),
    "num_classes": (int, None),
    "output_activation": (str, None),
    "head_units": (int, None),
    "head_dropout": (float, None),
    "stack_dropout": (float, None),
    "stack_filters": (_csv(int), None),
    "backbone_stem_channels": (int, None),
    "backbone_stages": (str, None),
    "tap_stage": (int, None),
    "pretrained_weights": (str, None),
    "freeze_backbone": (_parse_bool, True),
    # augmentation
    "augment": (_parse_bool, True),
    "rotation_deg_max": (float, 10.0),
    "shift_frac_max": (float, 0.1),
    "shear_deg_max": (float, 10.0),
    "zoom_frac_max": (float, 0.1),
    "hflip_prob": (float, 0.5),
    # training
    "epochs": (int, 50),
    "batch": (int, 32),
    "lr": (float, 1e-3),
    "checkpoint_every": (int, 10),
    # grid search
    "grid_lr": (_csv(float), (1e-2, 1e-3, 1e-4)),
    "grid_batch": (_csv(int), (16, 32)),
    # gradient check
    "gradcheck_batch": (int, 2),
    "gradcheck_corrupt_op": (str, None),
}


class RunConfig:
    def __init__(self, values: dict):
        self.values = values

    def __getitem__(self, key):
        return self.values[key]

    @staticmethod
    def load(path: str | None, overrides: dict | None = None) -> "RunConfig":
        values = {k: default for k, (_, default) in KEY_REGISTRY.items()}
        if path is not None:
            if not os.path.isfile(path):
                raise ConfigError(f"config file {path!r} does not exist")
            with open(path, encoding="utf-8") as fh:
                for line_no, line in enumerate(fh, 1):
                    line = line.split("#", 1)[0].strip()
                    if not line:
                        continue
                    if "=" not in line:
                        raise ConfigError(f"{path}:{line_no}: expected 'key = value'")
                    key, _, raw = line.partition("=")
                    key = key.strip()
                    if key not in KEY_REGISTRY:
                        raise ConfigError(f"{path}:{line_no}: unknown key {key!r}")
                    parser, _ = KEY_REGISTRY[key]
                    try:
                        values[key] = parser(raw.strip())
                    except ConfigError:
                        raise
                    except Exception as exc:
                        raise ConfigError(f"{path}:{line_no}: bad value for {key}: {exc}")
        for key, value in (overrides or {}).items():
            if value is not None:
                values[key] = value
        return RunConfig(values)

    def fingerprint(self) -> str:
        canon = "\n".join(f"{k}={self.values[k]!r}" for k in sorted(self.values))
        return hashlib.sha256(canon.encode()).hexdigest()[:8]


def _parse_stages(text: str) -> tuple[StageSpec, ...]:
    """Stage syntax: 'blocks:channels[:d]' per stage, comma-separated.

    A trailing ':d' marks a stage that halves resolution on entry,
    e.g. '2:16:d,2:32,2:64'.
    """
    stages = []
    for part in text.split(","):
        bits = part.strip().split(":")
        if len(bits) not in (2, 3) or (len(bits) == 3 and bits[2] != "d"):
            raise ConfigError(f"bad stage spec {part!r}; expected blocks:channels[:d]")
        stages.append(StageSpec(int(bits[0]), int(bits[1]), len(bits) == 3))
    return tuple(stages)


def build_model_config(config: RunConfig, default_profile: str = "default") -> ModelConfig:
    profile = config["profile"] or default_profile
    if profile == "default":
        base = ModelConfig.default()
    elif profile == "reduced":
        base = ModelConfig.reduced()
    else:
        raise ConfigError(f"unknown profile {profile!r} (default or reduced)")

    kwargs = {}
    if config["input_size"] is not None:
        s = config["input_size"]
        kwargs["input_shape"] = (s, s, 3)
    if config["num_classes"] is not None:
        kwargs["num_classes"] = config["num_classes"]
        kwargs["output_activation"] = "sigmoid" if config["num_classes"] == 2 else "softmax"
    if config["output_activation"] is not None:
        kwargs["output_activation"] = config["output_activation"]
    for key in ("head_units", "head_dropout", "stack_dropout"):
        if config[key] is not None:
            kwargs[key] = config[key]
    if config["stack_filters"] is not None:
        kwargs["stack"] = tuple(ConvBlockSpec(f) for f in config["stack_filters"])

    backbone_kwargs = {}
    if config["backbone_stem_channels"] is not None:
        backbone_kwargs["stem_channels"] = config["backbone_stem_channels"]
    if config["backbone_stages"] is not None:
        backbone_kwargs["stages"] = _parse_stages(config["backbone_stages"])
    if config["tap_stage"] is not None:
        backbone_kwargs["tap_stage"] = config["tap_stage"]
    if config["pretrained_weights"] is not None:
        backbone_kwargs["pretrained_weights"] = config["pretrained_weights"]
    if backbone_kwargs:
        kwargs["backbone"] = replace(base.backbone, **backbone_kwargs)
    return replace(base, **kwargs) if kwargs else base


def build_augment_policy(config: RunConfig) -> AugmentPolicy | None:
    if not config["augment"]:
        return None
    return AugmentPolicy(
        rotation_deg_max=config["rotation_deg_max"],
        shift_frac_max=config["shift_frac_max"],
        shear_deg_max=config["shear_deg_max"],
        zoom_frac_max=config["zoom_frac_max"],
        hflip_prob=config["hflip_prob"],
    )


def make_run_dir(config: RunConfig, command: str) -> str:
    stamp = time.strftime("%Y%m%d-%H%M%S", time.gmtime())
    base = os.path.join(config["out_dir"], f"{command}-{config.fingerprint()}-{stamp}")
    run_dir = base
    suffix = 1
    while os.path.exists(run_dir):
        run_dir = f"{base}.{suffix}"
        suffix += 1
    os.makedirs(run_dir)
    return run_dir


def _threads_cap() -> int:
    raw = os.environ.get("OSTEO_THREADS")
    if raw is None:
        return 1
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"OSTEO_THREADS must be an integer, got {raw!r}")
    if cap < 1:
        raise ConfigError(f"OSTEO_THREADS must be >= 1, got {cap}")
    return cap


# ---------------------------------------------------------------------------
# subcommands


def cmd_ingest(config: RunConfig) -> int:
    roots = config["dataset_roots"]
    if not roots:
        raise ConfigError("ingest needs dataset_roots")
    for root in roots:
        if not os.path.isdir(root):
            raise ConfigError(f"dataset root {root!r} does not exist")
    sources = config["source_names"]
    if sources is not None and len(sources) != len(roots):
        raise ConfigError("source_names must match dataset_roots in length")

    class_names = config["class_names"]
    seed = config["seed"]
    manifests = []
    for i, root in enumerate(roots):
        source = sources[i] if sources else None
        names = class_names
        if len(class_names) == 3 and not os.path.isdir(os.path.join(root, class_names[1])):
            # a binary-labelled source inside a multi-class run: its two
            # classes lift into the 3-class vocabulary when merged
            names = (class_names[0], class_names[2])
        manifests.append(load_manifest(root, names, source=source, seed=seed))

    merged = merge_datasets(manifests)
    counts = merged.counts()
    total = sum(counts)
    lines = [f"{name}: {count}" for name, count in zip(merged.class_names, counts)]
    lines.append(f"total: {total}")

    expected_total = config["expected_total"]
    if expected_total is not None and expected_total != total:
        lines.append(
            f"warning: computed total {total} disagrees with declared expected_total "
            f"{expected_total}; reporting both, trusting neither"
        )
    expected_counts = config["expected_class_counts"]
    if expected_counts is not None and list(expected_counts) != counts:
        lines.append(
            f"warning: computed class counts {counts} disagree with declared "
            f"expected_class_counts {list(expected_counts)}"
        )

    if config["balance"]:
        merged = balance_classes(merged, Rng(seed).derive("balance"))
        lines.append(f"balanced per-class count: {min(merged.counts())}")

    run_dir = make_run_dir(config, "ingest")
    manifest_path = os.path.join(run_dir, "manifest.tsv")
    save_manifest(merged, manifest_path)
    summary = "\n".join(lines) + "\n"
    with open(os.path.join(run_dir, "counts.txt"), "w", encoding="utf-8") as fh:
        fh.write(summary)
    print(summary, end="")
    print(f"manifest: {manifest_path}")
    print(f"run_dir: {run_dir}")
    return EXIT_OK


def _load_split_manifest(config: RunConfig):
    path = config["manifest"]
    if path is None:
        raise ConfigError("this command needs a manifest (run ingest first)")
    manifest = load_manifest_file(path)
    if any(r.split == "unassigned" for r in manifest.records):
        manifest = stratified_split(manifest, fractions=config["split_fractions"],
                                    rng=Rng(config["seed"]).derive("split"))
    return manifest


def cmd_train(config: RunConfig) -> int:
    manifest = _load_split_manifest(config)
    model_config = build_model_config(config)
    run_dir = make_run_dir(config, "train")
    save_manifest(manifest, os.path.join(run_dir, "manifest.tsv"))

    settings = TrainSettings(
        epochs=config["epochs"],
        batch_size=config["batch"],
        lr=config["lr"],
        augment_policy=build_augment_policy(config),
        checkpoint_dir=run_dir,
        checkpoint_every=config["checkpoint_every"],
        freeze=config["freeze_backbone"],
    )

    resume = config["checkpoint"]
    if resume is not None:
        if not os.path.isfile(resume):
            raise ConfigError(f"checkpoint {resume!r} does not exist")
        loaded = checkpoint_load(resume, expected_config=model_config)
        state, history = train(model_config, manifest, Rng(loaded.seed),
                               settings=settings, state=loaded.state, opt=loaded.opt,
                               history=loaded.history, start_epoch=loaded.next_epoch)
    else:
        state, history = train(model_config, manifest, Rng(config["seed"]),
                               settings=settings)

    if history:
        export_curves(history, run_dir)
        last = history[-1]
        print(f"final epoch {last[0]}: train_loss {last[1]:.6f} train_acc {last[2]:.4f} "
              f"val_loss {last[3]:.6f} val_acc {last[4]:.4f}")
    else:
        with open(os.path.join(run_dir, "curves.csv"), "w", encoding="utf-8") as fh:
            fh.write(",".join(
                ("epoch", "train_loss", "val_loss", "train_acc", "val_acc", "wall_time_s"))
                + "\n")
        print("no epochs requested; wrote empty curves.csv")
    print(f"checkpoint: {os.path.join(run_dir, 'ckpt-final.bin')}")
    print(f"run_dir: {run_dir}")
    return EXIT_OK


def cmd_eval(config: RunConfig) -> int:
    ckpt_path = config["checkpoint"]
    if ckpt_path is None:
        raise ConfigError("eval needs a checkpoint")
    if not os.path.isfile(ckpt_path):
        raise ConfigError(f"checkpoint {ckpt_path!r} does not exist")
    manifest = _load_split_manifest(config)
    loaded = checkpoint_load(ckpt_path)
    model_config = loaded.config

    h, w = model_config.input_shape[:2]
    preds: list[int] = []
    labels: list[int] = []
    for xb, yb in batch_iter(manifest, "test", batch_size=config["batch"], shuffle=False,
                             rng=Rng(config["seed"]), image_hw=(h, w)):
        probs = model_forward(model_config, loaded.state, xb, "eval")
        preds.extend(predict(probs).tolist())
        labels.extend(yb.data.argmax(axis=1).tolist())

    cm = confusion_matrix(preds, labels, manifest.class_names)
    report = metrics(cm)
    text = classification_report(report)

    run_dir = make_run_dir(config, "eval")
    with open(os.path.join(run_dir, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    write_confusion_csv(cm, os.path.join(run_dir, "confusion.csv"))
    if loaded.history:
        export_curves(loaded.history, run_dir)
    print(text, end="")
    print(f"run_dir: {run_dir}")
    return EXIT_OK


def cmd_gradcheck(config: RunConfig) -> int:
    corrupt = config["gradcheck_corrupt_op"]
    # the 224px default model is far too slow to finite-difference; when no
    # profile is named, check the reduced one
    model_config = build_model_config(config, default_profile="reduced")

    results = run_op_battery(seed=config["seed"] + 7, corrupt_op=corrupt)
    model_err = model_grad_check(model_config, seed=config["seed"],
                                 batch_size=config["gradcheck_batch"],
                                 corrupt_op=corrupt)
    results.append(("model", model_err))

    threshold = 1e-4
    worst = 0.0
    print(f"{'op':<24}{'max rel err':>14}  status")
    for name, err in results:
        worst = max(worst, err)
        status = "ok" if err < threshold else "FAIL"
        print(f"{name:<24}{err:>14.3e}  {status}")
    print(f"{'worst':<24}{worst:>14.3e}")
    if worst < threshold:
        print(f"gradient check PASSED (max relative error {worst:.3e} < {threshold:g})")
        return EXIT_OK
    print(f"gradient check FAILED (max relative error {worst:.3e} >= {threshold:g})")
    return EXIT_VERIFICATION


def cmd_gridsearch(config: RunConfig) -> int:
    manifest = _load_split_manifest(config)
    model_config = build_model_config(config)
    grid = GridSpec(lr_candidates=config["grid_lr"], batch_candidates=config["grid_batch"])
    settings = TrainSettings(
        epochs=config["epochs"],
        augment_policy=build_augment_policy(config),
        freeze=config["freeze_backbone"],
    )
    result = grid_search(grid, model_config, manifest, Rng(config["seed"]),
                         settings=settings)

    run_dir = make_run_dir(config, "gridsearch")
    grid_csv = os.path.join(run_dir, "grid.csv")
    with open(grid_csv, "w", encoding="utf-8") as fh:
        fh.write("lr,batch,val_acc,diverged\n")
        for cell in result.cells:
            acc = "" if cell.diverged else f"{cell.val_acc:.6f}"
            fh.write(f"{cell.lr:g},{cell.batch_size},{acc},{int(cell.diverged)}\n")

    print(f"{'lr':>10}{'batch':>7}{'val_acc':>10}")
    for cell in result.cells:
        acc = "diverged" if cell.diverged else f"{cell.val_acc:.4f}"
        print(f"{cell.lr:>10g}{cell.batch_size:>7d}{acc:>10}")
    print(f"best: lr={result.best.lr:g} batch={result.best.batch_size} "
          f"val_acc={result.best.val_acc:.4f}")
    print(f"run_dir: {run_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="osteonet",
        description="Knee X-ray osteoporosis classification pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("ingest", "build a dataset manifest"),
        ("train", "train a model and export curves"),
        ("eval", "evaluate a checkpoint on the test split"),
        ("gridsearch", "search over learning rates and batch sizes"),
        ("gradcheck", "verify gradients against finite differences"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="path to a key=value config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="override the config output directory")
    return parser


COMMANDS = {
    "ingest": cmd_ingest,
    "train": cmd_train,
    "eval": cmd_eval,
    "gridsearch": cmd_gridsearch,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _threads_cap()
        config = RunConfig.load(args.config,
                                overrides={"seed": args.seed, "out_dir": args.out})
        return COMMANDS[args.command](config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError,) as exc:
        print(f"verification failure: {exc}", file=sys.stderr)
        return EXIT_VERIFICATION
    except (DatasetError, DecodeError, WeightFormatError, WeightShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OsteonetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VERIFICATION


if __name__ == "__main__":
    sys.exit(main())
