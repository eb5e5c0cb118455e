"""``fastcaps`` command line: gen-data, train, eval, reconstruct, bench."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import bench, plotting
from .checkpoint import CheckpointError, load_checkpoint
from .container import ContainerError
from .data import (DatasetManifest, IdxError, SynthParams, load_idx, middle_slices, split, synth_nodules,
                   write_idx_images, write_idx_labels)
from .export import write_image
from .losses import LossConfig
from .metrics import write_pr_csv
from .network import VARIANTS, build_model, predict, preset
from .tensor import NonFiniteError, ShapeError, set_precision
from .train import (Trainer, TrainConfig, evaluate, fraction_sweep, prepare_for_model, sweep_medians,
                    write_history_csv)
from .version import BUILD_VERSION

log = logging.getLogger("fastcaps")


@dataclass
class RunConfig:
    command: str
    variant: str | None = None
    data: str | None = None
    data_seed: int | None = None
    loss: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)
    routing_iters: int | None = None
    epochs: int | None = None
    batch_size: int | None = None
    out: str | None = None
    checkpoint: str | None = None
    seed: int = 0
    precision: str = "f32"
    threads: int = 1
    flags: dict = field(default_factory=dict)
    version: str = BUILD_VERSION

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, default=str)


class CliError(Exception):
    pass


# -------------------------------------------------------------- arg helpers


def _int_at_least(lo: int):
    def parse(text: str) -> int:
        try:
            value = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
        if value < lo:
            raise argparse.ArgumentTypeError(f"must be >= {lo}, got {value}")
        return value

    return parse


def _positive_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}")
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {value}")
    return value


def _float_list(text: str) -> list[float]:
    try:
        values = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _fraction_list(text: str) -> list[float]:
    values = _float_list(text)
    # accept 5,10,25 as percentages as well as 0.05,0.1,0.25
    if any(v > 1 for v in values):
        values = [v / 100.0 for v in values]
    if any(not 0 < v <= 1 for v in values):
        raise argparse.ArgumentTypeError(f"fractions must lie in (0, 1], got {text!r}")
    return values


def _split_fractions(text: str) -> tuple[float, float, float]:
    values = _float_list(text)
    if len(values) != 3 or abs(sum(values) - 1) > 1e-6 or any(v < 0 for v in values):
        raise argparse.ArgumentTypeError("split needs three non-negative fractions summing to 1")
    return tuple(values)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    common.add_argument("--threads", type=_int_at_least(1), default=1,
                        help="BLAS threads; 1 keeps runs bit-reproducible (default 1)")
    common.add_argument("--precision", choices=("f32", "f64"), default="f32")
    common.add_argument("--routing-iters", type=_int_at_least(1), default=None,
                        help="routing iterations (default 3, or the checkpoint's value)")
    common.add_argument("--out", default=None, help="output file (gen-data) or directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="fastcaps", description="Capsule networks with consistent routing.")
    parser.add_argument("--version", action="version", version=f"fastcaps {BUILD_VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate a synthetic nodule dataset")
    g.add_argument("--n", type=_int_at_least(2), required=True, help="number of volumes (>= 2)")
    g.add_argument("--size", type=_int_at_least(8), default=32, help="volume edge length (default 32)")
    g.add_argument("--split", type=_split_fractions, default=(0.8, 0.1, 0.1),
                   help="train,val,test fractions (default 0.8,0.1,0.1)")
    g.add_argument("--format", choices=("container", "idx"), default="container",
                   help="idx also writes <out>-images.idx / <out>-labels.idx as 8-bit")

    t = sub.add_parser("train", parents=[common], help="train a model")
    _data_args(t)
    t.add_argument("--variant", choices=VARIANTS, default=None, help="default fast-2d, or the resumed model's")
    t.add_argument("--conv1-filters", type=_int_at_least(1), default=None)
    t.add_argument("--caps-dim", type=_int_at_least(1), default=None)
    t.add_argument("--decoder", choices=("conv", "ff", "none"), default=None)
    t.add_argument("--epochs", type=_int_at_least(1), default=50)
    t.add_argument("--batch-size", type=_int_at_least(1), default=16)
    t.add_argument("--lr", type=_positive_float, default=1e-3)
    t.add_argument("--recon-weight", type=float, default=LossConfig().recon_weight)
    t.add_argument("--train-fraction", type=_fraction_list, default=[1.0],
                   help="fraction of the training split; a comma list runs a size sweep")
    t.add_argument("--sweep-seeds", type=_int_at_least(1), default=3,
                   help="seeds per fraction in a sweep (seed, seed+1, ...)")
    t.add_argument("--split", type=_split_fractions, default=None,
                   help="re-split the dataset with these train,val,test fractions")
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--target-val-error", type=float, default=None,
                   help="stop once validation error (%%) is at or below this")

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    _data_args(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--variant", choices=VARIANTS, default=None, help="expected variant of the checkpoint")
    e.add_argument("--subset", choices=("train", "val", "test", "all"), default="test")
    e.add_argument("--thresholds", type=_int_at_least(100), default=101)

    r = sub.add_parser("reconstruct", parents=[common], help="export inputs and reconstructions")
    _data_args(r)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--k", type=_int_at_least(1), default=4)
    r.add_argument("--subset", choices=("train", "val", "test", "all"), default="test")
    r.add_argument("--figure", action="store_true", help="also write a PNG grid")

    b = sub.add_parser("bench", parents=[common], help="time original against consistent routing")
    b.add_argument("--mode", choices=("routing", "epoch", "both"), default="routing")
    b.add_argument("--repeats", type=_int_at_least(bench.MIN_REPEATS), default=bench.MIN_REPEATS)
    b.add_argument("--warmup", type=_int_at_least(0), default=2)
    b.add_argument("--batch-size", type=_int_at_least(1), default=16)
    b.add_argument("--batches", type=_int_at_least(1), default=4, help="batches per timed epoch sample")
    b.add_argument("--conv1-filters", type=_int_at_least(1), default=None)
    return parser


def _data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", default=None, help="dataset container from gen-data")
    p.add_argument("--idx", nargs=2, metavar=("IMAGES", "LABELS"), default=None, help="IDX image/label pair")


# ----------------------------------------------------------------- helpers


def _run_config(args, **fields) -> RunConfig:
    flags = {k: v for k, v in vars(args).items() if k not in ("verbose",)}
    rc = RunConfig(command=args.command, seed=args.seed, precision=args.precision, threads=args.threads,
                   out=args.out, routing_iters=args.routing_iters, flags=flags)
    for k, v in fields.items():
        setattr(rc, k, v)
    return rc


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_data(args) -> DatasetManifest:
    if args.data and args.idx:
        raise CliError("give either --data or --idx, not both")
    if args.idx:
        return load_idx(*args.idx)
    if not args.data:
        raise CliError("a dataset is required (--data or --idx)")
    if not Path(args.data).exists():
        raise CliError(f"dataset not found: {args.data}")
    return DatasetManifest.load(args.data)


def _subset(manifest: DatasetManifest, name: str):
    if name == "all":
        return manifest.images, manifest.labels
    idx = manifest.indices(name)
    if len(idx) == 0:
        raise CliError(f"dataset has no {name!r} split; regenerate with --split or choose --subset all")
    return manifest.images[idx], manifest.labels[idx]


def _ensure_split(manifest: DatasetManifest, fractions, seed: int) -> DatasetManifest:
    if fractions is not None or manifest.split_sizes()["train"] == 0:
        split(manifest, fractions or (0.8, 0.1, 0.1), seed)
    return manifest


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    if not args.out:
        raise CliError("--out is required for gen-data")
    manifest = split(synth_nodules(args.n, args.seed, SynthParams.for_size(args.size)), args.split, args.seed)
    rc = _run_config(args, data="synthetic", data_seed=args.seed)
    out = Path(args.out)
    manifest.save(out, {"run_config": rc.to_dict()})
    if args.format == "idx":
        write_idx_images(out.with_name(out.stem + "-images.idx"), np.round(manifest.images * 255))
        write_idx_labels(out.with_name(out.stem + "-labels.idx"), manifest.labels)
    bal = manifest.class_balance()
    print(f"wrote {out}: {bal['n']} volumes, {bal['positives']} nodules / {bal['negatives']} non-nodules "
          f"({100 * bal['positive_fraction']:.1f}% positive); splits {manifest.split_sizes()}")
    return 0


def _model_config(args):
    overrides = {"routing_iters": args.routing_iters or 3}
    for flag, key in (("conv1_filters", "conv1_filters"), ("caps_dim", "caps_dim"), ("decoder", "decoder")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    return preset(args.variant, **overrides)


def cmd_train(args) -> int:
    if args.variant is None and not args.resume:
        args.variant = "fast-2d"
    manifest = _ensure_split(_load_data(args), args.split, args.seed)
    loss = LossConfig(recon_weight=args.recon_weight)
    out = _out_dir(args, "runs/train")
    fractions = args.train_fraction
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed,
                      train_fraction=fractions[0], loss=loss, target_val_error=args.target_val_error)
    rc = _run_config(args, variant=args.variant, data=args.data or ",".join(args.idx or []),
                     data_seed=manifest.seed, loss=loss.to_dict(),
                     optimizer={"name": "adam", "lr": cfg.lr, "betas": list(cfg.betas), "eps": cfg.eps},
                     epochs=args.epochs, batch_size=args.batch_size, checkpoint=str(out / "best.ckpt"))
    plotting.set_provenance(rc.to_json())
    (out / "run_config.json").write_text(json.dumps(rc.to_dict(), indent=2, sort_keys=True, default=str))

    if len(fractions) > 1:
        if args.resume:
            raise CliError("--resume cannot be combined with a --train-fraction sweep")
        model_cfg = _model_config(args)
        data = prepare_for_model(manifest, build_model(model_cfg, 0))
        seeds = [args.seed + k for k in range(args.sweep_seeds)]
        rows = fraction_sweep(data, lambda s: build_model(model_cfg, s), cfg, fractions, seeds)
        _write_sweep(rows, out / "sweep.csv", rc)
        plotting.plot_fraction_sweep(rows, out / "sweep.png")
        for f, med in sweep_medians(rows):
            print(f"fraction {f:g}: median test accuracy {med:.2f}%")
        return 0

    if args.resume:
        trainer = Trainer.resume(args.resume, cfg, out, rc.to_dict())
        if args.variant is not None and args.variant != trainer.model.config.variant:
            raise CliError(f"--variant {args.variant} does not match checkpoint ({trainer.model.config.variant})")
        rc.variant = trainer.model.config.variant
    else:
        trainer = Trainer(build_model(_model_config(args), args.seed), cfg, out, rc.to_dict())
    data = prepare_for_model(manifest, trainer.model)
    history = trainer.fit(data)
    write_history_csv(history, out / "metrics.csv", rc.to_dict())
    plotting.plot_history(history, out / "loss.png", title=trainer.model.config.variant)
    best = trainer.best or {}
    print(f"trained {len(history)} epochs; best epoch {best.get('epoch')} "
          f"val error {best.get('val_error', float('nan')):.2f}% -> {out / 'best.ckpt'}")
    return 0


def _write_sweep(rows: list[dict], path: Path, rc: RunConfig) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# run_config: {rc.to_json()}\n")
        w = csv.DictWriter(fh, fieldnames=["fraction", "seed", "n_train", "test_accuracy", "test_loss",
                                           "train_loss"])
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})


def _load_model(args):
    try:
        model, info, _ = load_checkpoint(args.checkpoint)
    except FileNotFoundError as exc:
        raise CliError(str(exc))
    variant = getattr(args, "variant", None)
    if variant is not None and variant != model.config.variant:
        raise CliError(f"checkpoint holds a {model.config.variant} model, not {variant}")
    if args.routing_iters is not None:
        model.config = model.config.replace(routing_iters=args.routing_iters)
    return model, info


def cmd_eval(args) -> int:
    model, info = _load_model(args)
    manifest = prepare_for_model(_load_data(args), model)
    images, labels = _subset(manifest, args.subset)
    rc = _run_config(args, variant=model.config.variant, data=args.data, data_seed=manifest.seed,
                     checkpoint=args.checkpoint, routing_iters=model.config.routing_iters)
    rc.loss = info.get("run_config", {}).get("loss", LossConfig().to_dict())
    plotting.set_provenance(rc.to_json())
    report = evaluate(model, images, labels, LossConfig(**rc.loss), n_thresholds=args.thresholds)
    curve = report.pr_curve
    out = _out_dir(args, "runs/eval")
    with open(out / "metrics.csv", "w", newline="") as fh:
        fh.write(f"# run_config: {rc.to_json()}\n")
        w = csv.DictWriter(fh, fieldnames=["subset", "n"] + list(report.row()))
        w.writeheader()
        w.writerow({"subset": args.subset, "n": len(labels), **report.row()})
    write_pr_csv(curve, out / "pr.csv", f"run_config: {rc.to_json()}")
    plotting.plot_pr_curve(curve, out / "pr.png", title=f"{model.config.variant} ({args.subset})")
    print(f"{model.config.variant} on {args.subset} ({len(labels)}): precision {report.precision:.2f}% "
          f"recall {report.recall:.2f}% error {report.error_rate:.2f}%")
    return 0


def cmd_reconstruct(args) -> int:
    model, _ = _load_model(args)
    if model.config.decoder == "none":
        raise CliError("checkpoint has no decoder")
    manifest = prepare_for_model(_load_data(args), model)
    images, _ = _subset(manifest, args.subset)
    k = min(args.k, len(images))
    x = images[:k].astype(model.params["conv1.weight"].dtype)
    result = model.encode(x)
    recon = model.decode(result, predict(result.lengths)).data
    rc = _run_config(args, variant=model.config.variant, data=args.data, checkpoint=args.checkpoint,
                     routing_iters=model.config.routing_iters)
    out = _out_dir(args, "runs/reconstruct")
    meta = {"run_config": rc.to_dict()}
    written = []
    for i in range(k):
        written.append(write_image(out / f"input_{i:03d}", x[i], meta))
        written.append(write_image(out / f"recon_{i:03d}", recon[i], meta))
    if args.figure:
        plotting.set_provenance(rc.to_json())
        plotting.plot_reconstructions(x, recon, out / "reconstructions.png")
    err = float(np.mean(np.sum((recon - x) ** 2, axis=tuple(range(1, x.ndim)))))
    print(f"wrote {len(written)} files to {out}; mean reconstruction error {err:.4f}")
    return 0


def cmd_bench(args) -> int:
    iters = args.routing_iters or 3
    out = _out_dir(args, "runs/bench")
    rc = _run_config(args, routing_iters=iters, batch_size=args.batch_size)
    plotting.set_provenance(rc.to_json())
    thread_counts = [1] if args.threads == 1 else [1, args.threads]
    reports, tables = [], []
    for n in thread_counts:
        with bench.blas_threads(n):
            batch = []
            if args.mode in ("routing", "both"):
                batch += bench.routing_comparison(iters, args.repeats, args.warmup, args.batch_size, args.seed)
            if args.mode in ("epoch", "both"):
                data = middle_slices(synth_nodules(args.batches * args.batch_size, args.seed))
                overrides = {"conv1_filters": args.conv1_filters} if args.conv1_filters else {}
                batch += bench.epoch_comparison(data.images, data.labels, args.batches, args.batch_size, iters,
                                                args.repeats, args.warmup, args.seed, overrides)
        for r in batch:
            r.params["threads"] = n
            if len(thread_counts) > 1:
                r.config_id = f"{r.config_id}@{n}t"
        tables.append(f"threads={n}\n" + bench.format_table(batch))
        reports += batch
    bench.write_reports(reports, out / "bench.json", {"run_config": rc.to_dict()})
    table = "\n\n".join(tables)
    (out / "bench.txt").write_text(f"# run_config: {rc.to_json()}\n{table}\n")
    plotting.plot_bench(reports, out / "bench.png")
    print(table)
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "reconstruct": cmd_reconstruct, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    set_precision(args.precision)
    try:
        with bench.blas_threads(args.threads):
            return COMMANDS[args.command](args)
    except (CliError, CheckpointError, ContainerError, IdxError, ShapeError, NonFiniteError,
            ValueError, OSError) as exc:
        print(f"fastcaps {args.command}: error: {exc}", file=sys.stderr)
        return 1
    finally:
        set_precision("f32")


if __name__ == "__main__":
    sys.exit(main())
