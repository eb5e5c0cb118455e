"""Training loop, evaluation and the training-set-size sweep."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import DatasetManifest, Stream, middle_slices, nested_subset
from .decoder import reconstruction_error
from .losses import LossConfig, margin_loss, total_loss
from .metrics import EvalReport, summarize
from .network import CapsNet, predict
from .optim import Adam
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

HISTORY_FIELDS = ["epoch", "train_loss", "train_margin", "train_recon", "val_loss", "val_error",
                  "test_loss", "test_error", "test_recon", "seconds"]


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    train_fraction: float = 1.0
    loss: LossConfig = field(default_factory=LossConfig)
    target_val_error: float | None = None  # stop early once validation error is this low

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.train_fraction <= 1:
            raise ValueError("train_fraction must be in (0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def prepare_for_model(manifest: DatasetManifest, model: CapsNet, axis: int = 0) -> DatasetManifest:
    """Take middle slices when a 2-D model meets a volume dataset."""
    want = model.config.input_shape
    if manifest.sample_shape == want:
        return manifest
    if manifest.images.ndim == 4 and len(want) == 2:
        sliced = middle_slices(manifest, axis)
        if sliced.sample_shape == want:
            return sliced
    raise ValueError(f"dataset samples {manifest.sample_shape} do not fit model input {want}")


def compute_loss(model: CapsNet, x: np.ndarray, y: np.ndarray, cfg: LossConfig, decode_classes=None):
    """Forward pass plus objective; returns ``(total, margin, recon, forward_result)``.

    Reconstruction error is summed per sample and averaged over the batch.
    """
    r = model.encode(x)
    margin = margin_loss(r.lengths, y, cfg)
    if model.config.decoder == "none":
        return margin, margin, None, r
    classes = y if decode_classes is None else decode_classes
    recon = reconstruction_error(x.reshape((len(x),) + model.config.input_shape), model.decode(r, classes))
    recon = recon * (1.0 / len(x))
    return total_loss(margin, recon, cfg.recon_weight), margin, recon, r


def train_step(model: CapsNet, opt: Adam, x: np.ndarray, y: np.ndarray, cfg: LossConfig) -> dict:
    x = x.astype(model.params["conv1.weight"].dtype, copy=False)
    with Tape() as tape:
        loss, margin, recon, _ = compute_loss(model, x, y, cfg)
    grads = tape.backward(loss)
    opt.step(grads)
    return {"loss": loss.item(), "margin": margin.item(), "recon": recon.item() if recon is not None else 0.0}


def evaluate(model: CapsNet, images: np.ndarray, labels: np.ndarray, cfg: LossConfig = LossConfig(),
             batch_size: int = 64, n_thresholds: int = 101) -> EvalReport:
    """Metrics over a labelled set; decoding uses the predicted class."""
    if len(labels) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    dtype = model.params["conv1.weight"].dtype
    preds, scores, losses, recons = [], [], [], []
    for lo in range(0, len(labels), batch_size):
        x = images[lo:lo + batch_size].astype(dtype, copy=False)
        y = labels[lo:lo + batch_size]
        r = model.encode(x)
        pred = predict(r.lengths)
        margin = margin_loss(r.lengths, y, cfg).item()
        recon = 0.0
        if model.config.decoder != "none":
            xr = model.decode(r, pred)
            recon = reconstruction_error(x.reshape(xr.shape), xr).item() / len(y)
        preds.append(pred)
        scores.append(r.lengths.data[:, 1])
        losses.append((margin + cfg.recon_weight * recon) * len(y))
        recons.append(recon * len(y))
    report = summarize(np.concatenate(preds), labels, np.concatenate(scores), n_thresholds)
    report.loss = float(np.sum(losses) / len(labels))
    report.recon_error = float(np.sum(recons) / len(labels))
    return report


def _split_arrays(manifest: DatasetManifest, name: str):
    idx = manifest.indices(name)
    return manifest.images[idx], manifest.labels[idx]


def _better(row: dict, best: dict | None) -> bool:
    if best is None:
        return True
    if row["val_error"] != best["val_error"]:
        return row["val_error"] < best["val_error"]
    return row["val_loss"] < best["val_loss"]


class Trainer:
    def __init__(self, model: CapsNet, cfg: TrainConfig, out_dir: str | Path | None = None,
                 run_config: dict | None = None):
        self.model = model
        self.cfg = cfg
        self.opt = Adam(model.params, cfg.lr, cfg.betas, cfg.eps)
        self.out_dir = Path(out_dir) if out_dir else None
        self.run_config = run_config or {}
        self.history: list[dict] = []
        self.start_epoch = 1
        self.best: dict | None = None

    @classmethod
    def resume(cls, checkpoint: str | Path, cfg: TrainConfig, out_dir=None, run_config=None) -> "Trainer":
        model, info, tensors = load_checkpoint(checkpoint)
        trainer = cls(model, cfg, out_dir, run_config)
        opt_info = info.get("optimizer")
        if opt_info:
            trainer.opt.load_state(tensors, opt_info["step"])
        meta = info.get("meta", {})
        trainer.history = list(meta.get("history", []))
        trainer.start_epoch = int(meta.get("epoch", 0)) + 1
        trainer.best = meta.get("best")
        return trainer

    def _meta(self, epoch: int) -> dict:
        return {"epoch": epoch, "seed": self.cfg.seed, "history": self.history, "best": self.best,
                "train_config": self.cfg.to_dict()}

    def train_indices(self, manifest: DatasetManifest) -> np.ndarray:
        idx = manifest.indices("train")
        if self.cfg.train_fraction < 1.0:
            idx = nested_subset(idx, manifest.labels, self.cfg.train_fraction, self.cfg.seed)
        return idx

    def fit(self, manifest: DatasetManifest) -> list[dict]:
        cfg = self.cfg
        train_idx = self.train_indices(manifest)
        if len(train_idx) == 0:
            raise ValueError("training split is empty")
        val = _split_arrays(manifest, "val")
        test = _split_arrays(manifest, "test")
        if len(val[1]) == 0:
            val = test if len(test[1]) else (manifest.images[train_idx], manifest.labels[train_idx])
        images, labels = manifest.images, manifest.labels
        for epoch in range(self.start_epoch, self.start_epoch + cfg.epochs):
            t0 = time.perf_counter()
            order = train_idx[Stream(cfg.seed * 100003 + epoch).permutation(len(train_idx))]
            sums = {"loss": 0.0, "margin": 0.0, "recon": 0.0}
            for lo in range(0, len(order), cfg.batch_size):
                batch = order[lo:lo + cfg.batch_size]
                step = train_step(self.model, self.opt, images[batch], labels[batch], cfg.loss)
                for k in sums:
                    sums[k] += step[k] * len(batch)
            row = {"epoch": epoch, "train_loss": sums["loss"] / len(order),
                   "train_margin": sums["margin"] / len(order), "train_recon": sums["recon"] / len(order)}
            vr = evaluate(self.model, *val, cfg.loss)
            row.update(val_loss=vr.loss, val_error=vr.error_rate)
            if len(test[1]):
                tr = evaluate(self.model, *test, cfg.loss)
                row.update(test_loss=tr.loss, test_error=tr.error_rate, test_recon=tr.recon_error)
            else:
                row.update(test_loss=float("nan"), test_error=float("nan"), test_recon=float("nan"))
            row["seconds"] = time.perf_counter() - t0
            self.history.append(row)
            log.info("epoch %d train %.4f val_err %.2f test_err %.2f (%.1fs)", epoch, row["train_loss"],
                     row["val_error"], row["test_error"], row["seconds"])
            improved = _better(row, self.best)
            if improved:
                self.best = dict(row)
            if self.out_dir:
                if improved:
                    save_checkpoint(self.out_dir / "best.ckpt", self.model, self._meta(epoch), None, self.run_config)
                save_checkpoint(self.out_dir / "last.ckpt", self.model, self._meta(epoch), self.opt, self.run_config)
                write_history_csv(self.history, self.out_dir / "metrics.csv", self.run_config)
            if cfg.target_val_error is not None and row["val_error"] <= cfg.target_val_error:
                break
        return self.history


def write_history_csv(history: list[dict], path: str | Path, run_config: dict | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if run_config:
            fh.write(f"# run_config: {_flat_json(run_config)}\n")
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, extrasaction="ignore")
        w.writeheader()
        for row in history:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})


def read_history_csv(path: str | Path) -> list[dict]:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.DictReader(lines))
    return [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in rows]


def _flat_json(d: dict) -> str:
    import json

    return json.dumps(d, sort_keys=True, default=str)


def fraction_sweep(manifest: DatasetManifest, build, cfg: TrainConfig, fractions, seeds) -> list[dict]:
    """Train one model per (fraction, seed) and score it on the test split.

    ``build(seed)`` returns a freshly initialised model. Subsets for one seed
    are nested across fractions.
    """
    rows = []
    test_x, test_y = _split_arrays(manifest, "test")
    for seed in seeds:
        for fraction in fractions:
            run_cfg = TrainConfig(**{**cfg.__dict__, "seed": seed, "train_fraction": fraction})
            trainer = Trainer(build(seed), run_cfg)
            trainer.fit(manifest)
            # final weights: sweeps keep no per-run checkpoints
            report = evaluate(trainer.model, test_x, test_y, cfg.loss)
            rows.append({"fraction": fraction, "seed": seed, "n_train": len(trainer.train_indices(manifest)),
                         "test_accuracy": report.accuracy, "test_loss": report.loss,
                         "train_loss": trainer.history[-1]["train_loss"]})
    return rows


def sweep_medians(rows: list[dict]) -> list[tuple[float, float]]:
    fractions = sorted({r["fraction"] for r in rows})
    return [(f, float(np.median([r["test_accuracy"] for r in rows if r["fraction"] == f]))) for f in fractions]
