"""Command-line entry point: ``gecnn <subcommand> [flags]``.

Exit codes: 0 success, 1 invalid flags or unusable input files, 2 failure
while running (divergence, non-finite activations, a verification suite that
does not pass).
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .bones import (MODE_OF_TOPOLOGY, SequenceFormatError, iter_sequences, joints_to_bones, load_manifest,
                    save_dataset, synth_dataset)
from .checkpoint import CheckpointError
from .layers import NonFiniteError
from .models import build_model, load_model, make_config, save_model
from .skeleton import TopologyError, resolve_topology
from .training import (ArrayDataset, DivergenceError, EvalReport, TrainConfig, ablate_temporal_kernel,
                       ablation_csv, evaluate, stratified_split, train, write_log)
from .verify import model_gradcheck, operator_gradchecks, oracle_suite

DATA_DIR_ENV = "GECNN_DATA_DIR"
ORACLE_TOL = 1e-10
GRAD_TOL = 1e-4
MODEL_NAMES = [k + s for k in ("gecnn", "nodenet", "slhm", "bplhm") for s in ("-toy", "")]

log = logging.getLogger("gecnn")


class UsageError(Exception):
    """Bad flags or unusable input files (exit 1)."""


class RunFailure(Exception):
    """The command ran but did not succeed (exit 2)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def data_dir() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV) or "gecnn-data")


def _data_arg(value: str | None, default: str) -> Path:
    return Path(value) if value else data_dir() / default


def _positive(value: str) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return n


def _nonneg_float(value: str) -> float:
    x = float(value)
    if not x >= 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative number, got {value}")
    return x


def _int_list(value: str) -> list[int]:
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {value!r}") from None


def _topology(ref: str):
    try:
        return resolve_topology(ref)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc
    except (TopologyError, ValueError, KeyError) as exc:
        raise UsageError(f"bad topology {ref!r}: {exc}") from exc


def _manifest(path: Path):
    try:
        return load_manifest(path)
    except FileNotFoundError as exc:
        raise UsageError(f"file not found: {exc}") from exc
    except SequenceFormatError as exc:
        raise UsageError(str(exc)) from exc


def _require_file(path: Path, what: str) -> None:
    if not path.is_file():
        raise UsageError(f"{what} file not found: {path}")


def _write_curve(directory: Path, name: str, header: list[str], rows) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / name, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _train_config(args) -> TrainConfig:
    decay = args.decay_epochs if args.decay_epochs is not None else [max(1, (2 * args.epochs) // 3)]
    return TrainConfig(lr=args.lr, momentum=args.momentum, batch_size=args.batch_size, epochs=args.epochs,
                       decay_epochs=tuple(decay), weight_decay=args.weight_decay, seed=args.seed,
                       workers=args.workers)


def _split(data: ArrayDataset, test_fraction: float, seed: int):
    if test_fraction == 0:
        return data, None
    tr, te = stratified_split(data.labels, test_fraction, seed)
    return data.subset(tr), data.subset(te)


# -- subcommands -----------------------------------------------------------------

def cmd_synth(args) -> None:
    topo, template, mode = _topology(args.topology)
    out = _data_arg(args.out, "synth")
    ds = synth_dataset(args.classes, args.per_class, args.frames, topo, mode=mode, seed=args.seed,
                       noise=args.noise, bodies=args.bodies, style=args.style, template=template)
    extra = {"generator": {"classes": args.classes, "per_class": args.per_class, "frames": args.frames,
                           "seed": args.seed, "noise": args.noise, "bodies": args.bodies, "style": args.style}}
    save_dataset(out, ds.sequences, ds.class_names, args.topology, mode, extra)
    print(f"wrote {len(ds.sequences)} sequences ({args.classes} classes, {args.frames} frames) to {out}")


def cmd_convert(args) -> None:
    if (args.source, args.target) != ("joints", "bones"):
        raise UsageError(f"unsupported conversion {args.source} -> {args.target}; only joints -> bones")
    src = _data_arg(args.data, "synth")
    out = Path(args.out) if args.out else src.with_name(src.name + "-bones")
    manifest = _manifest(src)
    if manifest.kind != "joints":
        raise UsageError(f"{src} holds {manifest.kind}, expected joints")
    topo_ref = args.topology or manifest.topology
    topo = _topology(topo_ref)[0]
    if MODE_OF_TOPOLOGY.get(topo.name, manifest.mode) != manifest.mode:
        raise UsageError(f"topology {topo.name} does not fit {manifest.mode} data")
    try:
        bones = [joints_to_bones(seq, topo) for seq in iter_sequences(manifest)]
    except SequenceFormatError as exc:
        raise UsageError(str(exc)) from exc
    except ValueError as exc:
        raise UsageError(f"cannot convert with topology {topo_ref}: {exc}") from exc
    save_dataset(out, bones, manifest.class_names, topo_ref, manifest.mode, manifest.extra)
    print(f"wrote {len(bones)} bone sequences to {out}")


def _load_data(path: Path) -> tuple[ArrayDataset, object]:
    manifest = _manifest(path)
    try:
        return ArrayDataset.from_manifest(manifest), manifest
    except SequenceFormatError as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(args) -> None:
    cfg = _train_config(args)
    data, manifest = _load_data(_data_arg(args.data, "synth"))
    model_cfg = make_config(args.model, num_classes=data.num_classes, topology=manifest.topology,
                            mode=manifest.mode, kernel_size=args.kernel_size, seed=args.seed)
    if data.joints is None and model_cfg.kind != "gecnn":
        raise UsageError(f"{args.model} needs joint sequences; {manifest.root} holds bones only")
    train_data, _ = _split(data, args.test_fraction, args.seed)
    model = build_model(model_cfg)
    result = train(model, train_data, cfg,
                   on_epoch=lambda e, loss, acc: print(f"epoch {e} loss {loss:.6f} train_acc {acc:.4f}"))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(out, model, {"class_names": data.class_names, "data": str(manifest.root),
                            "test_fraction": args.test_fraction, "split_seed": args.seed})
    log_path = Path(args.log) if args.log else out.with_suffix(".log")
    write_log(log_path, result.log_lines)
    if args.plot_data:
        _write_curve(Path(args.plot_data), "train_curve.csv", ["epoch", "loss", "train_accuracy"],
                     [(i + 1, f"{l:.6f}", f"{a:.4f}")
                      for i, (l, a) in enumerate(zip(result.epoch_losses, result.train_accuracy))])
    print(f"saved checkpoint {out} and log {log_path}")


def cmd_eval(args) -> None:
    ckpt = Path(args.model)
    _require_file(ckpt, "checkpoint")
    try:
        model, meta = load_model(ckpt)
    except (CheckpointError, ValueError, KeyError) as exc:
        raise UsageError(f"unusable checkpoint {ckpt}: {exc}") from exc
    data_path = Path(args.data) if args.data else Path(meta.get("data") or data_dir() / "synth")
    data, _ = _load_data(data_path)
    if data.num_classes != model.cfg.num_classes:
        raise UsageError(f"dataset has {data.num_classes} classes, model was trained on {model.cfg.num_classes}")
    if args.split != "all":
        fraction = meta.get("test_fraction", 0.0)
        if not fraction:
            raise UsageError("checkpoint records no held-out split; use --split all")
        tr, te = stratified_split(data.labels, fraction, meta.get("split_seed", 0))
        data = data.subset(te if args.split == "test" else tr)
    report = evaluate(model, data, args.batch_size)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)


def cmd_gradcheck(args) -> None:
    ok = True
    if args.operators:
        for name, rep in operator_gradchecks(args.seed).items():
            print(f"operator {name}: max rel err {rep.max_rel_error:.3e}")
            ok &= rep.passed
    rep = model_gradcheck(args.model, seed=args.seed, frames=args.frames, batch=args.batch,
                          coords=args.coords, topology=args.topology)
    for line in rep.lines():
        print(line)
    if not (ok and rep.passed):
        raise RunFailure(f"gradient check failed (tol {GRAD_TOL:g})")


def cmd_oracle(args) -> None:
    if args.topology is not None:
        _topology(args.topology)
    cases = oracle_suite(args.trials, args.seed, args.topology)
    worst = 0.0
    for kind in ("edge", "node", "shared"):
        dev = max(c.max_abs_deviation for c in cases if c.kind == kind)
        worst = max(worst, dev)
        print(f"{kind} conv: {args.trials} instances, max abs deviation {dev:.3e}")
    print(f"max deviation {worst:.3e} (tol {ORACLE_TOL:g})")
    if not worst < ORACLE_TOL:
        raise RunFailure("fast path disagrees with direct summation")


def cmd_ablate(args) -> None:
    sizes = args.kernel_sizes
    bad = [k for k in sizes if k < 1 or k % 2 == 0]
    if bad or not sizes:
        raise UsageError(f"temporal kernel sizes must be odd and positive, got {sizes}")
    if args.test_fraction == 0:
        raise UsageError("ablation needs a held-out split; --test-fraction must be > 0")
    cfg = _train_config(args)
    data, manifest = _load_data(_data_arg(args.data, "synth"))
    base = make_config(args.model, num_classes=data.num_classes, topology=manifest.topology,
                       mode=manifest.mode, seed=args.seed)
    train_data, test_data = _split(data, args.test_fraction, args.seed)
    rows = ablate_temporal_kernel(sizes, base, train_data, test_data, cfg)
    text = ablation_csv(rows)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    if args.plot_data:
        _write_curve(Path(args.plot_data), "ablation.csv", ["temporal_kernel_size", "top1", "top5"],
                     [(r.kernel_size, f"{r.top1:.4f}", f"{r.top5:.4f}") for r in rows])
    print(text, end="")


def cmd_report(args) -> None:
    path = Path(args.eval)
    _require_file(path, "evaluation report")
    try:
        report = EvalReport.from_json(path.read_text(encoding="utf-8"))
    except (ValueError, KeyError) as exc:
        raise UsageError(f"{path}: {exc}") from exc
    table = report.per_class_table()
    if args.out:
        Path(args.out).write_text(table, encoding="utf-8")
    if args.plot_data:
        _write_curve(Path(args.plot_data), "per_class.csv", ["class", "accuracy"],
                     [(name, f"{acc:.4f}") for name, acc in zip(report.class_names, report.per_class)])
    print(table, end="")
    print(f"top1 {report.top1:.4f} top5 {report.top5:.4f}")


# -- parser ----------------------------------------------------------------------

def _train_flags(p: argparse.ArgumentParser, epochs: int) -> None:
    p.add_argument("--data", help=f"dataset directory (default ${DATA_DIR_ENV}/synth)")
    p.add_argument("--model", default="gecnn-toy", choices=MODEL_NAMES)
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--lr", type=_nonneg_float, default=0.05)
    p.add_argument("--momentum", type=_nonneg_float, default=0.9)
    p.add_argument("--weight-decay", type=_nonneg_float, default=0.0)
    p.add_argument("--batch-size", type=_positive, default=16)
    p.add_argument("--decay-epochs", type=_int_list, default=None,
                   help="comma-separated epochs where lr drops tenfold (default: two thirds in)")
    p.add_argument("--test-fraction", type=float, default=0.25, help="held-out share per class")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=_positive, default=1, help="threads per batch; 1 is the reference mode")
    p.add_argument("--plot-data", metavar="DIR", help="also write CSV series for external plotting")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gecnn", description="Edge/node graph convolutions for skeleton action recognition.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a seeded synthetic joint dataset")
    p.add_argument("--classes", type=_positive, default=4)
    p.add_argument("--per-class", type=_positive, default=50)
    p.add_argument("--frames", type=_positive, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help=f"output directory (default ${DATA_DIR_ENV}/synth)")
    p.add_argument("--topology", default="kinetics18", help="kinetics18, ntu25 or a topology file")
    p.add_argument("--noise", type=_nonneg_float, default=0.02)
    p.add_argument("--bodies", type=_positive, default=1)
    p.add_argument("--style", choices=("limbs", "tempo"), default="limbs")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("convert", help="turn a joint dataset into bone features")
    p.add_argument("--from", dest="source", required=True, choices=("joints",))
    p.add_argument("--to", dest="target", required=True, choices=("bones",))
    p.add_argument("--topology", help="name or file (default: the dataset's own)")
    p.add_argument("--data", help=f"joint dataset directory (default ${DATA_DIR_ENV}/synth)")
    p.add_argument("--out", help="output directory (default: <data>-bones)")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("train", help="train a model and save a checkpoint plus a step log")
    _train_flags(p, epochs=30)
    p.add_argument("--kernel-size", type=_positive, default=9, help="odd temporal kernel length")
    p.add_argument("--out", default="model.ckpt", help="checkpoint path")
    p.add_argument("--log", help="step log path (default: checkpoint path with .log)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint and print the report")
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--data", help="dataset directory (default: the one used for training)")
    p.add_argument("--split", choices=("test", "train", "all"), default="test")
    p.add_argument("--batch-size", type=_positive, default=32)
    p.add_argument("--out", help="also write the report to this file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--model", default="gecnn-toy", choices=MODEL_NAMES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--topology", default="kinetics18")
    p.add_argument("--frames", type=_positive, default=8)
    p.add_argument("--batch", type=_positive, default=3)
    p.add_argument("--coords", type=_positive, default=3, help="sampled coordinates per parameter")
    p.add_argument("--operators", action="store_true", help="also check every operator")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("oracle", help="compare fast layers against direct summation")
    p.add_argument("--topology", help="fixed topology (default: random trees of 1-24 edges)")
    p.add_argument("--trials", type=_positive, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("ablate", help="temporal kernel size table")
    _train_flags(p, epochs=15)
    p.add_argument("--kernel-sizes", type=_int_list, default=[3, 9])
    p.add_argument("--out", help="CSV output path")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="per-class accuracy table from an evaluation report")
    p.add_argument("--eval", required=True, help="report written by `eval --out`")
    p.add_argument("--out", help="CSV output path")
    p.add_argument("--plot-data", metavar="DIR", help="also write CSV series for external plotting")
    p.set_defaults(func=cmd_report)
    return parser


def _check_common(args) -> None:
    if getattr(args, "epochs", 0) < 0:
        raise UsageError("--epochs must be >= 0")
    tf = getattr(args, "test_fraction", None)
    if tf is not None and not 0 <= tf < 1:
        raise UsageError("--test-fraction must be in [0, 1)")
    k = getattr(args, "kernel_size", 1)
    if k % 2 == 0:
        raise UsageError(f"--kernel-size must be odd, got {k}")
    topo = getattr(args, "topology", None)
    if args.command in ("synth", "gradcheck") and topo is not None:
        _topology(topo)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(name)s: %(message)s")
        _check_common(args)
        args.func(args)
    except UsageError as exc:
        print(f"gecnn: error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"gecnn: error: file not found: {exc}", file=sys.stderr)
        return 1
    except (DivergenceError, NonFiniteError, RunFailure) as exc:
        print(f"gecnn: failed: {exc}", file=sys.stderr)
        return 2
    except (ValueError, TopologyError, CheckpointError, SequenceFormatError) as exc:
        print(f"gecnn: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - anything else is a runtime failure
        print(f"gecnn: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
