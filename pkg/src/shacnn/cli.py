"""Command-line interface.

    shacnn tree-check TREE
    shacnn train-bcnn --config C --tree T --dataset D --out DIR
    shacnn distill-sha PHASE1_RUN --out DIR
    shacnn eval RUN [--averaging errors_only] [--out DIR]
    shacnn cost ITEM [ITEM ...] [--input-shape C H W]

Exit codes: 0 success, 1 validation or training failure, 2 I/O failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from contextlib import contextmanager
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from . import data_io
from .label_tree import LabelTree, TreeError, parse_tree
from .metrics import (compare_costs, cost_records, eval_records, evaluate_predictions, format_cost_table,
                      format_eval_table)
from .model import (ArchConfig, BundleMismatchError, ConfigError, HierarchicalModel, WeightBundle, build_bcnn,
                    build_sha, extract_weights, load_model_weights, predict_batch, save_model)
from .nn.functional import ShapeError
from .nn.optim import NonFiniteGradientError
from .nn.serialize import WeightFormatError
from .training import TrainConfig, TrainingError, train_phase1, train_phase2, write_history

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2
VALIDATION_ERRORS = (TreeError, ConfigError, BundleMismatchError, TrainingError, ShapeError,
                     data_io.DataFormatError, WeightFormatError, NonFiniteGradientError, ValueError, KeyError)
DATASETS = ("mnist", "cifar10", "cifar100", "synthetic")

log = logging.getLogger("shacnn")


class CommandError(Exception):
    def __init__(self, message: str, code: int = EXIT_INVALID):
        super().__init__(message)
        self.code = code


@contextmanager
def stage(name: str):
    """Re-raise library errors as CommandError naming the stage they came from."""
    try:
        yield
    except CommandError:
        raise
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        raise CommandError(f"[{name}] {exc}", EXIT_IO) from exc
    except VALIDATION_ERRORS as exc:
        raise CommandError(f"[{name}] {exc}", EXIT_INVALID) from exc
    except OSError as exc:
        raise CommandError(f"[{name}] {exc}", EXIT_IO) from exc


# --- resources ---------------------------------------------------------------

def builtin_path(kind: str, name: str) -> Path | None:
    suffix = ".tree" if kind == "trees" else ".json"
    ref = resources.files("shacnn") / "data" / kind / f"{name}{suffix}"
    return Path(str(ref)) if ref.is_file() else None


def resolve_tree_path(ref: str, base: Path | None = None) -> Path:
    p = Path(ref)
    if base is not None and not p.is_absolute() and (base / p).exists():
        return (base / p).resolve()
    if p.exists():
        return p.resolve()
    builtin = builtin_path("trees", ref)
    if builtin is not None:
        return builtin
    raise FileNotFoundError(f"tree file not found: {ref}")


def read_tree(ref: str, base: Path | None = None) -> tuple[LabelTree, str]:
    text = resolve_tree_path(ref, base).read_text(encoding="utf-8")
    return parse_tree(text), text


def read_config(ref: str) -> tuple[dict, Path]:
    p = Path(ref)
    if not p.exists():
        builtin = builtin_path("configs", ref)
        if builtin is None:
            raise FileNotFoundError(f"config file not found: {ref}")
        p = builtin
    return json.loads(p.read_text(encoding="utf-8")), p.resolve().parent


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: Path) -> str:
    return sha256_bytes(Path(path).read_bytes())


# --- configuration -----------------------------------------------------------

def resolve_config(raw: dict, args: argparse.Namespace, phase: str) -> dict:
    """Flags override config values, which override defaults."""
    cfg = copy.deepcopy(raw)
    cfg.setdefault("seed", 0)
    cfg.setdefault("data", {})
    cfg.setdefault("phase1", {})
    cfg.setdefault("phase2", {})
    cfg["phase2"].setdefault("optimizer", {"kind": "adam", "lr": 1e-4})
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "dataset", None):
        cfg["data"]["dataset"] = args.dataset
    if getattr(args, "tree", None):
        cfg["tree"] = args.tree
    section = cfg["phase1" if phase == "one" else "phase2"]
    if getattr(args, "epochs", None) is not None:
        section["epochs"] = args.epochs
    if getattr(args, "batch_size", None) is not None:
        section["batch_size"] = args.batch_size
    if getattr(args, "lr", None) is not None:
        section.setdefault("optimizer", {})["lr"] = args.lr
    if getattr(args, "train_limit", None) is not None:
        cfg["data"]["train_limit"] = args.train_limit
    return cfg


def train_config(cfg: dict, phase: str, progress: bool = True) -> TrainConfig:
    section = dict(cfg["phase1" if phase == "one" else "phase2"])
    return TrainConfig(
        epochs=section.get("epochs", 10),
        batch_size=section.get("batch_size", 64),
        optimizer=section.get("optimizer", {}),
        schedule=section.get("schedule"),
        seed=cfg["seed"],
        phase=phase,
        progress=progress,
    )


# --- datasets ----------------------------------------------------------------

def _first_existing(root: Path, names: Sequence[str]) -> Path:
    for name in names:
        for candidate in (root / name, root / f"{name}.gz"):
            if candidate.exists():
                return candidate
    raise FileNotFoundError(f"none of {list(names)} found under {root}")


def load_splits(cfg: dict, tree: LabelTree, data_dir: str | None
                ) -> tuple[data_io.Dataset, data_io.Dataset | None, data_io.Dataset]:
    """(train, validation, test) datasets for the resolved config."""
    data = cfg["data"]
    name = data.get("dataset", "synthetic")
    seed = cfg["seed"]
    if name not in DATASETS:
        raise ConfigError(f"unknown dataset {name!r}; choose from {DATASETS}")
    if name == "synthetic":
        shape = data.get("image_shape", cfg["arch"]["input_shape"])
        pattern_seed = data.get("pattern_seed", 0)
        noise = data.get("noise", 0.3)
        train = data_io.make_synthetic(tree, data.get("n_per_leaf", 100), shape, seed=data.get("data_seed", 0),
                                       noise=noise, pattern_seed=pattern_seed)
        test = data_io.make_synthetic(tree, data.get("test_n_per_leaf", 50), shape,
                                      seed=data.get("data_seed", 0) + 1, noise=noise, pattern_seed=pattern_seed)
    else:
        root = data_io.data_dir(data_dir)
        if name == "mnist":
            base = root / "mnist" if (root / "mnist").is_dir() else root
            train = data_io.load_mnist(_first_existing(base, ["train-images-idx3-ubyte", "train-images.idx3-ubyte"]),
                                       _first_existing(base, ["train-labels-idx1-ubyte", "train-labels.idx1-ubyte"]))
            test = data_io.load_mnist(_first_existing(base, ["t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"]),
                                      _first_existing(base, ["t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"]))
        elif name == "cifar10":
            base = next((d for d in (root / "cifar10", root / "cifar-10-batches-bin") if d.is_dir()), root)
            train = data_io.load_cifar10([_first_existing(base, [f"data_batch_{i}.bin"]) for i in range(1, 6)])
            test = data_io.load_cifar10([_first_existing(base, ["test_batch.bin"])])
        else:
            base = next((d for d in (root / "cifar100", root / "cifar-100-binary") if d.is_dir()), root)
            train = data_io.load_cifar100(_first_existing(base, ["train.bin"]), tree)
            test = data_io.load_cifar100(_first_existing(base, ["test.bin"]), tree)
        limit = data.get("train_limit")
        if limit is not None and limit < len(train):
            idx = np.sort(np.random.default_rng([seed, 3]).permutation(len(train))[:limit])
            train = train.subset(idx)
    train.check_against(tree)
    test.check_against(tree)
    val = None
    frac = data.get("val_fraction", 0.1)
    if frac:
        train, val = data_io.train_val_split(train, frac, seed)
    if data.get("standardize"):
        data_io.standardize(train, *(d for d in (val, test) if d is not None))
    return train, val, test


# --- runs --------------------------------------------------------------------

def _prepare_out(out: str) -> Path:
    out_dir = Path(out)
    if (out_dir / "manifest.json").exists():
        raise CommandError(f"{out_dir} already holds a run manifest; manifests are never overwritten")
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def _write_run(out_dir: Path, command: str, phase: str, variant: str, cfg: dict, tree_text: str,
               checksums: dict, argv: list[str], parent: dict | None, extra_files: Sequence[str]) -> dict:
    files = {name: sha256_file(out_dir / name) for name in ("config.json", "tree.txt", "weights.shaw",
                                                             "history.jsonl", *extra_files)}
    # the parent's location is not part of the identity, only its run id
    identity = json.dumps({"command": command, "config": cfg, "tree": tree_text, "data": checksums,
                           "parent": parent and parent["run_id"]}, sort_keys=True)
    manifest = {
        "run_id": sha256_bytes(identity.encode())[:16],
        "command": command,
        "phase": phase,
        "variant": variant,
        "seed": cfg["seed"],
        "config": cfg,
        "dataset": {"name": cfg["data"].get("dataset"), "checksums": checksums},
        "files": files,
        "parent": parent,
        "argv": argv,
    }
    with open(out_dir / "manifest.json", "x", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def read_manifest(run: str | Path) -> dict:
    path = Path(run) / "manifest.json"
    return json.loads(path.read_text(encoding="utf-8"))


def replay_argv(manifest: dict, out: str | Path) -> list[str]:
    """Arguments that re-run the command recorded in ``manifest`` into ``out``."""
    argv = list(manifest["argv"])
    i = argv.index("--out")
    argv[i + 1] = str(out)
    return argv


def model_from_run(run: str | Path) -> tuple[HierarchicalModel, LabelTree, dict]:
    run = Path(run)
    manifest = read_manifest(run)
    cfg = manifest["config"]
    tree = parse_tree((run / "tree.txt").read_text(encoding="utf-8"))
    arch = ArchConfig.from_dict(cfg["arch"])
    if manifest["variant"] == "bcnn":
        model = build_bcnn(arch, tree, seed=cfg["seed"])
    else:
        model = build_sha(arch, tree, WeightBundle.load(run / "bundle.shaw"), seed=cfg["seed"])
    load_model_weights(model, run / "weights.shaw")
    return model, tree, manifest


def _summary(history) -> str:
    if not history:
        return "no epochs run"
    last = history[-1]
    acc = last.val_accuracy if last.val_accuracy is not None else last.accuracy
    which = "val" if last.val_accuracy is not None else "train"
    return f"final {which} top-1 per level: " + " ".join(f"{a:.4f}" for a in acc)


# --- commands ----------------------------------------------------------------

def cmd_tree_check(args) -> int:
    path = Path(args.tree)
    if not path.exists():
        builtin = builtin_path("trees", args.tree)
        if builtin is None:
            raise CommandError(f"[tree-check] no such file: {args.tree}", EXIT_IO)
        path = builtin
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise CommandError(f"[tree-check] {exc}", EXIT_IO) from exc
    try:
        tree = parse_tree(text)
    except TreeError as exc:
        print(f"{path}:{exc.line if exc.line is not None else '-'}: {exc.reason}")
        print("invalid")
        return EXIT_INVALID
    print(f"levels: {' '.join(map(str, tree.level_class_counts()))}")
    print(f"leaves: {tree.num_leaves}")
    print("invariants: single root, uniform leaf depth, unique names per level, level partitions: ok")
    print("valid")
    return EXIT_OK


def cmd_train_bcnn(args) -> int:
    if not args.config:
        raise CommandError("[config] train-bcnn needs --config")
    with stage("config"):
        raw, base = read_config(args.config)
        cfg = resolve_config(raw, args, "one")
        if "tree" not in cfg:
            raise ConfigError("no tree given (use --tree or a 'tree' key in the config)")
        tree_path = resolve_tree_path(cfg["tree"], base)
        cfg["tree"] = str(tree_path)
        tree_text = tree_path.read_text(encoding="utf-8")
        tree = parse_tree(tree_text)
        arch = ArchConfig.from_dict(cfg["arch"])
        arch.validate(tree)
        cfg["arch"] = arch.to_dict()
        tcfg = train_config(cfg, "one", progress=not args.quiet)
        if tcfg.schedule is not None and tcfg.schedule.levels != tree.levels:
            raise ConfigError(f"loss-weight schedule has {tcfg.schedule.levels} weights, tree has {tree.levels} levels")
        cfg["phase1"] = {k: v for k, v in tcfg.to_dict().items() if k not in ("seed", "phase")}
    with stage("load-data"):
        train, val, _ = load_splits(cfg, tree, args.data_dir)
    out_dir = _prepare_out(args.out)
    with stage("build"):
        model = build_bcnn(arch, tree, seed=cfg["seed"])
    with stage("train-phase1"):
        model, history = train_phase1(model, train, tree, tcfg, val=val)
    with stage("write"):
        (out_dir / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        (out_dir / "tree.txt").write_text(tree_text, encoding="utf-8")
        save_model(model, out_dir / "weights.shaw")
        write_history(out_dir / "history.jsonl", history)
        argv = ["train-bcnn", "--config", str((out_dir / "config.json").resolve()),
                "--tree", str((out_dir / "tree.txt").resolve()), "--out", str(out_dir)]
        if args.data_dir:
            argv += ["--data-dir", str(Path(args.data_dir).resolve())]
        if args.quiet:
            argv.append("--quiet")
        manifest = _write_run(out_dir, "train-bcnn", "one", "bcnn", cfg, tree_text, train.checksums, argv,
                              None, ())
    print(f"run {manifest['run_id']} written to {out_dir}")
    print(_summary(history))
    return EXIT_OK


def cmd_distill_sha(args) -> int:
    with stage("load-phase1"):
        parent_dir = Path(args.phase1_run)
        parent = read_manifest(parent_dir)
        if parent.get("variant") != "bcnn":
            raise ConfigError(f"{parent_dir} is not a phase-1 (bcnn) run")
        bcnn, tree, _ = model_from_run(parent_dir)
        tree_text = (parent_dir / "tree.txt").read_text(encoding="utf-8")
    with stage("config"):
        if args.config:
            raw, _ = read_config(args.config)
        else:
            raw = parent["config"]
        cfg = resolve_config(raw, args, "two")
        cfg["tree"] = parent["config"]["tree"]
        arch = ArchConfig.from_dict(cfg["arch"])
        arch.validate(tree)
        cfg["arch"] = arch.to_dict()
        tcfg = train_config(cfg, "two", progress=not args.quiet)
        if tcfg.schedule is not None and tcfg.schedule.levels != tree.levels:
            raise ConfigError(f"loss-weight schedule has {tcfg.schedule.levels} weights, tree has {tree.levels} levels")
        cfg["phase2"] = {k: v for k, v in tcfg.to_dict().items() if k not in ("seed", "phase")}
    with stage("extract-weights"):
        bundle = extract_weights(bcnn)
        sha = build_sha(arch, tree, bundle, seed=cfg["seed"])
    with stage("load-data"):
        train, val, _ = load_splits(cfg, tree, args.data_dir)
    out_dir = _prepare_out(args.out)
    with stage("train-phase2"):
        sha, history = train_phase2(sha, train, tree, tcfg, val=val)
    with stage("write"):
        bundle.save(out_dir / "bundle.shaw")
        (out_dir / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        (out_dir / "tree.txt").write_text(tree_text, encoding="utf-8")
        save_model(sha, out_dir / "weights.shaw")
        write_history(out_dir / "history.jsonl", history)
        argv = ["distill-sha", str(parent_dir.resolve()), "--config", str((out_dir / "config.json").resolve()),
                "--out", str(out_dir)]
        if args.data_dir:
            argv += ["--data-dir", str(Path(args.data_dir).resolve())]
        if args.quiet:
            argv.append("--quiet")
        lineage = {"run_id": parent["run_id"], "path": str(parent_dir.resolve())}
        manifest = _write_run(out_dir, "distill-sha", "two", "sha", cfg, tree_text, train.checksums, argv,
                              lineage, ("bundle.shaw",))
    from .metrics import count_params

    total, trainable = count_params(sha)
    frozen = total - trainable
    bundle_size = sum(int(v.size) for v in bundle.tensors().values())
    print(f"run {manifest['run_id']} written to {out_dir} (phase-1 run {parent['run_id']})")
    print(f"params: total {total}, trainable {trainable}, frozen {frozen} (bundle {bundle_size})")
    print(_summary(history))
    return EXIT_OK


def cmd_eval(args) -> int:
    with stage("load-run"):
        run = Path(args.run)
        if not (run / "manifest.json").exists():
            raise FileNotFoundError(f"{run} has no manifest.json")
        if not (run / "weights.shaw").exists():
            raise FileNotFoundError(f"{run} has no weights.shaw")
        model, tree, manifest = model_from_run(run)
        cfg = copy.deepcopy(manifest["config"])
        if args.dataset:
            cfg["data"]["dataset"] = args.dataset
    with stage("load-data"):
        _, _, test = load_splits(cfg, tree, args.data_dir)
    with stage("evaluate"):
        pred = predict_batch(model, test.images)
        report = evaluate_predictions(tree, test.fine_labels, pred, args.averaging)
    name = f"{manifest['variant']}:{manifest['run_id'][:8]}"
    print(format_eval_table(name, report))
    if args.out:
        with stage("write"):
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            (out / "eval.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
                                           encoding="utf-8")
            header = "true_fine," + ",".join(f"pred_level{i + 1}" for i in range(tree.levels))
            rows = [f"{t}," + ",".join(map(str, p)) for t, p in zip(test.fine_labels.tolist(), pred.tolist())]
            (out / "predictions.csv").write_text("\n".join([header, *rows]) + "\n", encoding="utf-8")
            (out / "eval.jsonl").write_text(
                "\n".join(eval_records(name, manifest["variant"], report)) + "\n", encoding="utf-8")
    return EXIT_OK


def _cost_models(item: str, args) -> list[tuple[str, HierarchicalModel]]:
    p = Path(item)
    if p.is_dir():
        model, _, manifest = model_from_run(p)
        return [(f"{p.name}/{manifest['variant']}", model)]
    raw, base = read_config(item)
    tree_ref = args.tree or raw.get("tree")
    if tree_ref is None:
        raise ConfigError(f"{item}: no tree given")
    tree, _ = read_tree(tree_ref, base)
    arch = ArchConfig.from_dict(raw.get("arch", raw))
    if args.input_shape:
        arch.input_shape = tuple(args.input_shape)
    arch.validate(tree)
    label = p.stem
    models = []
    bcnn = build_bcnn(arch, tree, seed=0)
    variants = args.variants.split(",")
    if "bcnn" in variants:
        models.append((f"{label}/bcnn" if tree.levels > 1 else f"{label}/flat", bcnn))
    if "sha" in variants and tree.levels > 1:
        models.append((f"{label}/sha", build_sha(arch, tree, extract_weights(bcnn), seed=0)))
    return models


def cmd_cost(args) -> int:
    with stage("build"):
        models = [m for item in args.items for m in _cost_models(item, args)]
    with stage("count"):
        rows = compare_costs(models, args.input_shape)
    if args.format == "records":
        print("\n".join(cost_records(rows)))
    else:
        print(format_cost_table(rows))
        print(f"(reductions relative to {rows[0]['name']}; batch 1; bias and activations excluded)")
    if args.records:
        with stage("write"):
            Path(args.records).write_text("\n".join(cost_records(rows)) + "\n", encoding="utf-8")
    return EXIT_OK


# --- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shacnn", description="Hierarchy-aware CNN classifiers over label trees.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, train: bool):
        p.add_argument("--config", help="config file (JSON) or shipped config name")
        p.add_argument("--tree", help="tree file or shipped tree name")
        p.add_argument("--dataset", choices=DATASETS)
        p.add_argument("--data-dir", help=f"dataset directory (default: ${data_io.DATA_DIR_ENV} or ~/.cache/shacnn)")
        if train:
            p.add_argument("--seed", type=int)
            p.add_argument("--epochs", type=int)
            p.add_argument("--lr", type=float)
            p.add_argument("--batch-size", type=int)
            p.add_argument("--train-limit", type=int, help="use a seeded subset of this many training samples")
            p.add_argument("--quiet", action="store_true", help="no per-epoch progress on stderr")

    p = sub.add_parser("tree-check", help="validate a label tree file")
    p.add_argument("tree")
    p.set_defaults(func=cmd_tree_check)

    p = sub.add_parser("train-bcnn", help="phase 1: train the branched model")
    common(p, train=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_bcnn)

    p = sub.add_parser("distill-sha", help="phase 2: train the shared-FC model on frozen phase-1 weights")
    p.add_argument("phase1_run")
    common(p, train=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_distill_sha)

    p = sub.add_parser("eval", help="per-level top-1 accuracy and catastrophic distance on the test split")
    p.add_argument("run")
    p.add_argument("--dataset", choices=DATASETS)
    p.add_argument("--data-dir")
    p.add_argument("--averaging", choices=("all_samples", "errors_only"), default="all_samples")
    p.add_argument("--out", help="directory for eval.json, eval.jsonl and predictions.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cost", help="parameter and MAC comparison")
    p.add_argument("items", nargs="+", help="config files / shipped config names / run directories")
    p.add_argument("--tree", help="tree for config items that do not name one")
    p.add_argument("--input-shape", type=int, nargs=3, metavar=("C", "H", "W"))
    p.add_argument("--variants", default="bcnn,sha")
    p.add_argument("--format", choices=("table", "records"), default="table")
    p.add_argument("--records", help="also write line-delimited records to this file")
    p.set_defaults(func=cmd_cost)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"error {args.command} {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
