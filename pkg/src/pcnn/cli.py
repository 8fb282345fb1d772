"""``pcnn`` command line: train, eval, gradcheck, ablate, segment-preview, synth-gen.

Every subcommand resolves its settings as defaults < ``--config`` file <
flags, validates them all, and only then touches the output directory.
Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

from .config import format_kv, parse_bool, parse_ints, parse_kv
from .errors import ImageTooSmall, InvalidConfig, PcnnError

logger = logging.getLogger("pcnn")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
DATA_ENV = "PCNN_DATA_DIR"


class UsageError(Exception):
    pass


def _float(s):
    return float(s)


def _int(s):
    return int(s)


def _ints(s):
    return parse_ints(s)


def _str(s):
    return str(s).strip()


# key: (converter, default). Defaults are the desk-scale settings.
SETTINGS: Dict[str, tuple] = {
    "data": (_str, "synthetic"),
    "data_path": (_str, ""),
    "image_size": (_int, 32),
    "n_synthetic": (_int, 840),
    "n_train": (_int, 700),
    "n_test": (_int, 140),
    "data_seed": (_int, 0),
    "test_set": (_str, "clean"),
    "lr": (_float, 0.001),
    "momentum": (_float, 0.9),
    "weight_decay": (_float, 1e-4),
    "batch_size": (_int, 32),
    "epochs": (_int, 20),
    "alpha": (_float, 12.0),
    "beta": (_float, 8.0),
    "seed": (_int, 0),
    "precision": (_str, "float32"),
    "b1": (_float, 0.5),
    "b2": (_float, 0.65),
    "wsplit": (_float, 0.5),
    "variant": (_str, "full"),
    "variants": (_str, "full,no_crop,gfieb_only"),
    "seeds": (_ints, (0, 1, 2, 3, 4)),
    "alpha_beta_grid": (parse_bool, False),
    "stem_channels": (_int, 16),
    "stage_channels": (_ints, (16, 32, 64)),
    "stage_strides": (_ints, (1, 2, 2)),
    "share_lfsieb": (parse_bool, False),
}

COMMON_KEYS = ("seed",)
DATA_KEYS = ("data", "data_path", "image_size", "n_synthetic", "n_train", "n_test", "data_seed", "test_set")
TRAIN_KEYS = ("lr", "momentum", "weight_decay", "batch_size", "epochs", "alpha", "beta", "precision")
MODEL_KEYS = ("b1", "b2", "wsplit", "variant", "stem_channels", "stage_channels", "stage_strides", "share_lfsieb")
COMMAND_KEYS = {
    "train": COMMON_KEYS + DATA_KEYS + TRAIN_KEYS + MODEL_KEYS,
    "eval": COMMON_KEYS + DATA_KEYS,
    "gradcheck": COMMON_KEYS,
    "ablate": COMMON_KEYS + DATA_KEYS + TRAIN_KEYS + MODEL_KEYS + ("variants", "seeds", "alpha_beta_grid"),
    "segment-preview": COMMON_KEYS + ("b1", "b2", "wsplit"),
    "synth-gen": COMMON_KEYS + ("image_size", "n_synthetic"),
}


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return " ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pcnn", description="Region-based facial expression network, desk scale.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    helps = {
        "train": "train a model and write checkpoint, history and config",
        "eval": "evaluate a checkpoint, with confusion matrix and robustness table",
        "gradcheck": "finite-difference check of every differentiable op",
        "ablate": "train variants over seeds and report median accuracies",
        "segment-preview": "print the five facial regions for an h x w input",
        "synth-gen": "export a synthetic face dataset as PGM files",
    }
    for name, keys in COMMAND_KEYS.items():
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", help="flat key = value settings file")
        p.add_argument("--out", default="pcnn-out", help="output directory (default: pcnn-out)")
        p.add_argument("--threads", type=int, help="cap on BLAS worker threads")
        for key in keys:
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None, metavar=key.upper())
        if name == "train":
            p.add_argument("--resume", help="checkpoint to continue from")
        if name == "eval":
            p.add_argument("--checkpoint", help="checkpoint path (default: OUT/checkpoint.pcnn)")
        if name == "gradcheck":
            p.add_argument("--tol", type=float, default=1e-4, help="max relative error (default 1e-4)")
        if name == "segment-preview":
            p.add_argument("--h", type=int, default=20, help="input height")
            p.add_argument("--w", type=int, default=20, help="input width")
    return parser


def resolve(command: str, args: argparse.Namespace) -> Dict[str, object]:
    """Defaults < config file < flags, converted and checked per key."""
    keys = COMMAND_KEYS[command]
    raw: Dict[str, str] = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        for k, v in parse_kv(path.read_text(encoding="utf-8"), str(path)).items():
            k = k.replace("-", "_")
            if k not in SETTINGS:
                raise UsageError(f"{path}: unknown setting {k!r}")
            if k in keys:
                raw[k] = v
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            raw[k] = v
    resolved = {}
    for k in keys:
        conv, default = SETTINGS[k]
        if k in raw:
            try:
                resolved[k] = conv(raw[k])
            except ValueError as e:
                raise UsageError(f"bad value for {k}: {raw[k]!r} ({e})") from None
        else:
            resolved[k] = default
    return resolved


# Builders (validate-only: no side effects) -------------------------------------

def _train_config(cfg):
    from .training import TrainConfig
    return TrainConfig(lr=cfg["lr"], momentum=cfg["momentum"], weight_decay=cfg["weight_decay"],
                       batch_size=cfg["batch_size"], epochs=cfg["epochs"], alpha=cfg["alpha"], beta=cfg["beta"],
                       seed=cfg["seed"], precision=cfg["precision"])


def _model_parts(cfg):
    from .model import BackboneConfig, Variant
    from .regions import RegionSpec
    return (BackboneConfig(cfg["stem_channels"], cfg["stage_channels"], cfg["stage_strides"]),
            RegionSpec(cfg["b1"], cfg["b2"], cfg["wsplit"]), Variant.parse(cfg["variant"]))


def _check_data(cfg) -> None:
    if cfg["data"] not in ("synthetic", "fer2013", "pgm"):
        raise InvalidConfig(f"data must be synthetic, fer2013 or pgm, got {cfg['data']!r}")
    if cfg["test_set"] not in ("clean", "pose"):
        raise InvalidConfig(f"test_set must be clean or pose, got {cfg['test_set']!r}")
    if cfg["n_train"] < 1 or cfg["n_test"] < 1:
        raise InvalidConfig("n_train and n_test must be >= 1")
    if cfg["data"] == "synthetic" and cfg["n_train"] + cfg["n_test"] > cfg["n_synthetic"]:
        raise InvalidConfig("n_train + n_test exceeds n_synthetic")


def data_path(cfg) -> Path:
    if cfg["data_path"]:
        return Path(cfg["data_path"])
    root = Path(os.environ.get(DATA_ENV, "."))
    return root / ("fer2013.csv" if cfg["data"] == "fer2013" else "synthetic")


def load_data(cfg):
    """(train, test) pair; the test set is pose-and-occlusion augmented when requested."""
    from .data import gen_synthetic_faces, import_dataset, load_fer2013_csv, pose_occlusion_testset, split

    if cfg["data"] == "synthetic":
        ds = gen_synthetic_faces(cfg["n_synthetic"], (cfg["image_size"],) * 2, cfg["data_seed"])
        train_set, test_set = split(ds, cfg["n_train"], cfg["data_seed"])
        test_set = test_set.subset(range(min(cfg["n_test"], len(test_set))))
    elif cfg["data"] == "fer2013":
        path = data_path(cfg)
        train_set = load_fer2013_csv(path, "Training", cfg["n_train"])
        test_set = load_fer2013_csv(path, "PublicTest", cfg["n_test"])
    else:
        ds = import_dataset(data_path(cfg))
        train_set, test_set = split(ds, min(cfg["n_train"], len(ds) - 1), cfg["data_seed"])
        test_set = test_set.subset(range(min(cfg["n_test"], len(test_set))))
    if cfg["test_set"] == "pose":
        test_set = pose_occlusion_testset(test_set, cfg["data_seed"])
    return train_set, test_set


# Output helpers ----------------------------------------------------------------

def _prepare_out(out: Path, resolved: Dict[str, object], command: str) -> None:
    # train owns config.txt and run.log; other commands sharing the directory get their own files
    out.mkdir(parents=True, exist_ok=True)
    stem = "" if command == "train" else f"{command}-"
    text = f"# pcnn {command}\n" + format_kv({k: _fmt(v) for k, v in resolved.items()})
    (out / f"{stem}config.txt").write_text(text, encoding="utf-8")
    handler = logging.FileHandler(out / ("run.log" if command == "train" else f"{command}.log"), mode="w",
                                  encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger("pcnn").addHandler(handler)
    logging.getLogger("pcnn").setLevel(logging.INFO)


def _close_log() -> None:
    lg = logging.getLogger("pcnn")
    for h in list(lg.handlers):
        if isinstance(h, logging.FileHandler):
            lg.removeHandler(h)
            h.close()


def _write(out: Path, name: str, text: str) -> None:
    (out / name).write_text(text, encoding="utf-8")


# Subcommands -------------------------------------------------------------------

def cmd_train(cfg, args, out: Path) -> int:
    from .evaluation import evaluate
    from .training import TrainState, build_for_config, load_checkpoint, save_checkpoint, train

    config = _train_config(cfg)
    backbone, regions, variant = _model_parts(cfg)
    _check_data(cfg)
    if args.resume and not Path(args.resume).is_file():
        raise UsageError(f"checkpoint not found: {args.resume}")
    train_set, test_set = load_data(cfg)
    if args.resume:
        model, state, _ = load_checkpoint(args.resume)
    else:
        model = build_for_config(config, variant, backbone, regions, input_size=train_set.image_size,
                                 share_lfsieb=cfg["share_lfsieb"])
        state = TrainState()
    _prepare_out(out, cfg, "train")
    ckpt = out / "checkpoint.pcnn"

    def on_epoch_end(epoch, st):
        save_checkpoint(model, st, config, ckpt)

    history = train(model, train_set, test_set, config, state, on_epoch_end)
    for i, e in enumerate(history.epochs):
        ev = history.eval_accuracy[i]
        print(f"epoch {e}: loss {history.loss[i]:.4f} train_acc {history.train_accuracy[i]:.4f} "
              f"test_acc {'-' if ev is None else f'{ev:.4f}'}")
    _write(out, "history.csv", history.to_csv())
    save_checkpoint(model, state, config, ckpt)
    acc, cm = evaluate(model, test_set)
    _write(out, "confusion.csv", cm.to_csv())
    print(f"test accuracy {acc:.4f}")
    print(f"wrote {ckpt}")
    return EXIT_OK


def robustness_specs(seed: int):
    from .data import AugSpec, Occlusion, Pose
    return [
        AugSpec(seed=seed),
        AugSpec(occlusion=Occlusion(rect=(0.65, 1.0, 0.0, 1.0)), seed=seed),
        AugSpec(occlusion=Occlusion(rect=(0.0, 0.5, 0.0, 0.5)), seed=seed),
        AugSpec(occlusion=Occlusion(0.25, "mean"), seed=seed),
        AugSpec(pose=Pose(15.0), seed=seed),
        AugSpec(pose=Pose(-30.0), seed=seed),
        AugSpec(occlusion=Occlusion(0.15), pose=Pose(20.0), seed=seed),
    ]


def cmd_eval(cfg, args, out: Path) -> int:
    from .evaluation import evaluate, format_robustness, robustness_report
    from .training import load_checkpoint

    _check_data(cfg)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.pcnn"
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    model, _, _ = load_checkpoint(ckpt)
    _, test_set = load_data(cfg)
    _prepare_out(out, dict(cfg, checkpoint=str(ckpt)), "eval")
    acc, cm = evaluate(model, test_set)
    rows = robustness_report(model, test_set, robustness_specs(cfg["seed"]))
    table = format_robustness(rows)
    _write(out, "confusion.csv", cm.to_csv())
    cm.write_pgm(out / "confusion.pgm")
    _write(out, "robustness.txt", table)
    _write(out, "eval.txt", f"accuracy = {acc!r}\n" + "".join(
        f"class_{k}_accuracy = {a!r}\n" for k, a in enumerate(cm.per_class_accuracy())))
    print(f"accuracy {acc:.4f} on {len(test_set)} samples")
    print(table, end="")
    return EXIT_OK


def cmd_gradcheck(cfg, args, out: Path) -> int:
    from .gradsuite import run_gradient_suite

    if args.tol <= 0:
        raise UsageError("--tol must be positive")
    _prepare_out(out, dict(cfg, tol=args.tol), "gradcheck")
    lines, ok = [], True
    for r in run_gradient_suite(cfg["seed"]):
        passed = r.max_rel_error <= args.tol
        ok &= passed
        lines.append(f"{'PASS' if passed else 'FAIL'} {r.op_name:<28s} max_rel_error {r.max_rel_error:.3e} "
                     f"worst_index {r.worst_index}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    _write(out, "gradcheck.txt", text)
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_ablate(cfg, args, out: Path) -> int:
    from .evaluation import DEFAULT_ALPHA_BETA_GRID, ablation_suite
    from .model import Variant

    config = _train_config(cfg)
    backbone, regions, _ = _model_parts(cfg)
    variants = [Variant.parse(v) for v in _split_variants(cfg["variants"])]
    if not variants:
        raise InvalidConfig("no variants given")
    if not cfg["seeds"]:
        raise InvalidConfig("no seeds given")
    _check_data(cfg)
    train_set, test_set = load_data(cfg)
    _prepare_out(out, cfg, "ablate")
    name = f"{cfg['data']}-{cfg['test_set']}"
    report = ablation_suite(config, variants, {name: (train_set, test_set)}, cfg["seeds"], backbone, regions,
                            DEFAULT_ALPHA_BETA_GRID if cfg["alpha_beta_grid"] else None)
    _write(out, "ablation.csv", report.to_csv())
    _write(out, "ablation.txt", report.to_table())
    print(report.to_table(), end="")
    return EXIT_OK


def _split_variants(text: str) -> List[str]:
    # commas inside custom_alpha_beta(a,b) belong to the variant
    out, depth, cur = [], 0, ""
    for ch in text:
        depth += ch == "("
        depth -= ch == ")"
        if ch == "," and depth == 0:
            out.append(cur)
            cur = ""
        else:
            cur += ch
    out.append(cur)
    return [v.strip() for v in out if v.strip()]


def cmd_segment_preview(cfg, args, out: Path) -> int:
    from .data import write_pgm
    from .regions import REGION_NAMES, RegionSpec, compute_regions

    regions = compute_regions(args.h, args.w, RegionSpec(cfg["b1"], cfg["b2"], cfg["wsplit"]))
    _prepare_out(out, dict(cfg, h=args.h, w=args.w), "segment-preview")
    lines = [f"{name:<16s} rows {r0:>3d}:{r1:<3d} cols {c0:>3d}:{c1:<3d}"
             for name, (r0, r1, c0, c1) in zip(REGION_NAMES, regions)]
    text = "\n".join(lines) + "\n"
    print(text, end="")
    _write(out, "regions.txt", text)
    write_pgm(out / "regions.pgm", regions.index_image(), maxval=len(regions))
    return EXIT_OK


def cmd_synth_gen(cfg, args, out: Path) -> int:
    from .data import export_dataset, gen_synthetic_faces

    ds = gen_synthetic_faces(cfg["n_synthetic"], (cfg["image_size"],) * 2, cfg["seed"])
    _prepare_out(out, cfg, "synth-gen")
    export_dataset(ds, out)
    print(f"wrote {len(ds)} faces to {out} (sha256 {ds.checksum()})")
    return EXIT_OK


COMMANDS: Dict[str, Callable] = {
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "segment-preview": cmd_segment_preview,
    "synth-gen": cmd_synth_gen,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Execute one subcommand and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_INVALID if e.code not in (0, None) else EXIT_OK
    try:
        cfg = resolve(args.command, args)
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be >= 1")
    except (UsageError, ValueError) as e:
        print(f"pcnn {args.command}: error: {e}", file=sys.stderr)
        return EXIT_INVALID

    from threadpoolctl import threadpool_limits

    out = Path(args.out)
    start = time.time()
    try:
        with threadpool_limits(limits=args.threads):
            code = COMMANDS[args.command](cfg, args, out)
        logger.info("%s finished in %.1f s", args.command, time.time() - start)
        return code
    except (UsageError, InvalidConfig, ImageTooSmall) as e:
        print(f"pcnn {args.command}: invalid configuration: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (PcnnError, OSError) as e:
        # most library errors are also ValueErrors, so this clause must precede the bare ValueError one
        logger.error("%s failed: %s", args.command, e)
        print(f"pcnn {args.command}: failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as e:
        print(f"pcnn {args.command}: invalid configuration: {e}", file=sys.stderr)
        return EXIT_INVALID
    finally:
        _close_log()


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
