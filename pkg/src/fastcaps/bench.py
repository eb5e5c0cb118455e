"""Wall-clock benchmarks for routing and full training steps.

Every measurement runs ``warmup`` untimed repeats followed by ``repeats``
timed ones on ``time.perf_counter``; the median is the headline number and
raw samples stay in the report.
"""

from __future__ import annotations

import json
import statistics
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Stream
from .losses import LossConfig
from .network import CapsNet, build_model, preset
from .optim import Adam
from .routing import RoutingGrouping, coefficient_count, route
from .train import compute_loss, train_step

MIN_REPEATS = 5


@dataclass
class PhaseStats:
    median: float
    min: float
    max: float
    samples: list[float]

    @classmethod
    def of(cls, samples: list[float]) -> "PhaseStats":
        return cls(statistics.median(samples), min(samples), max(samples), list(samples))


@dataclass
class BenchReport:
    config_id: str
    coefficients: int
    phases: dict[str, PhaseStats] = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    speedup: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _check_repeats(repeats: int, warmup: int) -> None:
    if repeats < MIN_REPEATS:
        raise ValueError(f"repeats must be >= {MIN_REPEATS}, got {repeats}")
    if warmup < 0:
        raise ValueError("warmup must be >= 0")


def time_call(fn, repeats: int, warmup: int) -> PhaseStats:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return PhaseStats.of(samples)


def time_interleaved(fns: dict, repeats: int, warmup: int) -> dict:
    """Time several callables round-robin so slow drift in the machine hits all of them alike."""
    for _ in range(warmup):
        for fn in fns.values():
            fn()
    samples = {name: [] for name in fns}
    for _ in range(repeats):
        for name, fn in fns.items():
            t0 = time.perf_counter()
            fn()
            samples[name].append(time.perf_counter() - t0)
    return {name: PhaseStats.of(s) for name, s in samples.items()}


def blas_threads(n: int | None):
    """Context limiting BLAS threads; ``None`` leaves the library default."""
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def random_votes(batch: int, n_children: int, n_parents: int, dim: int, seed: int, dtype=np.float32) -> np.ndarray:
    v = Stream(seed).normal(batch * n_children * n_parents * dim)
    return (0.1 * v).reshape(batch, n_children, n_parents, dim).astype(dtype)


def bench_routing(n_children: int, n_parents: int, dim: int, grouping: RoutingGrouping | None = None,
                  iterations: int = 3, repeats: int = MIN_REPEATS, warmup: int = 2, batch: int = 16,
                  seed: int = 0, config_id: str | None = None) -> BenchReport:
    """Time ``route()`` alone on fixed random votes."""
    _check_repeats(repeats, warmup)
    grouping = grouping or RoutingGrouping.identity(n_children)
    votes = random_votes(batch, n_children, n_parents, dim, seed)
    stats = time_call(lambda: route(votes, grouping, iterations), repeats, warmup)
    return BenchReport(config_id or f"route-I{n_children}-J{n_parents}-D{dim}",
                       coefficient_count(n_children, n_parents, grouping), {"routing": stats},
                       {"I": n_children, "J": n_parents, "D": dim, "groups": grouping.n_groups,
                        "iterations": iterations, "batch": batch, "repeats": repeats, "warmup": warmup})


def _epoch_workload(model: CapsNet, images: np.ndarray, labels: np.ndarray, batches: int, batch_size: int,
                    seed: int, loss_cfg: LossConfig) -> dict:
    """Callables for the routing, forward and step phases over fixed batches."""
    if batches < 1:
        raise ValueError("need at least one batch")
    if len(labels) < batch_size:
        raise ValueError("dataset smaller than one batch")
    dtype = model.params["conv1.weight"].dtype
    order = Stream(seed).permutation(len(labels))
    chunks = [order[(k * batch_size) % len(labels):][:batch_size] for k in range(batches)]
    chunks = [c if len(c) == batch_size else order[:batch_size] for c in chunks]
    xs = [images[c].astype(dtype) for c in chunks]
    ys = [labels[c] for c in chunks]
    cfg = model.config
    votes = [model.encode(x).votes.data for x in xs]
    opt = Adam(model.params)

    def routing():
        for v in votes:
            route(v, model.grouping, cfg.routing_iters)

    def forward():
        for x, y in zip(xs, ys):
            compute_loss(model, x, y, loss_cfg)

    def step():
        for x, y in zip(xs, ys):
            train_step(model, opt, x, y, loss_cfg)

    return {"routing": routing, "forward": forward, "step": step}


def _epoch_report(model: CapsNet, phases: dict, batches: int, batch_size: int, repeats: int, warmup: int,
                  config_id: str | None) -> BenchReport:
    cfg = model.config
    return BenchReport(config_id or cfg.variant,
                       coefficient_count(cfg.n_primary, cfg.num_classes, model.grouping), phases,
                       {"variant": cfg.variant, "batches": batches, "batch_size": batch_size,
                        "iterations": cfg.routing_iters, "repeats": repeats, "warmup": warmup,
                        "n_primary": cfg.n_primary, "config": cfg.to_dict()})


def bench_epoch(model: CapsNet, images: np.ndarray, labels: np.ndarray, batches: int, batch_size: int = 16,
                repeats: int = MIN_REPEATS, warmup: int = 1, seed: int = 0,
                loss_cfg: LossConfig = LossConfig(), config_id: str | None = None) -> BenchReport:
    """Time routing, forward and full training steps over ``batches`` fixed batches."""
    _check_repeats(repeats, warmup)
    work = _epoch_workload(model, images, labels, batches, batch_size, seed, loss_cfg)
    phases = {name: time_call(fn, repeats, warmup) for name, fn in work.items()}
    return _epoch_report(model, phases, batches, batch_size, repeats, warmup, config_id)


def add_speedups(baseline: BenchReport, candidate: BenchReport) -> dict[str, float]:
    """Baseline median over candidate median for every shared phase; stored on ``candidate``."""
    ratios = {name: baseline.phases[name].median / candidate.phases[name].median
              for name in candidate.phases if name in baseline.phases}
    candidate.speedup = ratios
    return ratios


def routing_comparison(iterations: int = 3, repeats: int = MIN_REPEATS, warmup: int = 2, batch: int = 16,
                       seed: int = 0) -> list[BenchReport]:
    """Original 2-D CapsNet routing (2048 children) against fast-2d consistent routing (64 children).

    The two workloads are timed round-robin.
    """
    _check_repeats(repeats, warmup)
    reports, fns = [], {}
    for variant in ("original-2d", "fast-2d"):
        cfg = preset(variant)
        grouping = RoutingGrouping.identity(cfg.n_primary)
        votes = random_votes(batch, cfg.n_primary, cfg.num_classes, cfg.out_dim, seed)
        fns[variant] = lambda v=votes, g=grouping: route(v, g, iterations)
        reports.append(BenchReport(variant, coefficient_count(cfg.n_primary, cfg.num_classes, grouping), {},
                                   {"I": cfg.n_primary, "J": cfg.num_classes, "D": cfg.out_dim,
                                    "groups": grouping.n_groups, "iterations": iterations, "batch": batch,
                                    "repeats": repeats, "warmup": warmup}))
    stats = time_interleaved(fns, repeats, warmup)
    for r in reports:
        r.phases["routing"] = stats[r.config_id]
    add_speedups(*reports)
    return reports


def epoch_comparison(images: np.ndarray, labels: np.ndarray, batches: int = 4, batch_size: int = 16,
                     iterations: int = 3, repeats: int = MIN_REPEATS, warmup: int = 1, seed: int = 0,
                     overrides: dict | None = None) -> list[BenchReport]:
    """Both variants on identical batches; every phase of both models is timed round-robin."""
    _check_repeats(repeats, warmup)
    overrides = overrides or {}
    models, fns = {}, {}
    for variant in ("original-2d", "fast-2d"):
        model = build_model(preset(variant, routing_iters=iterations, **overrides), seed)
        models[variant] = model
        work = _epoch_workload(model, images, labels, batches, batch_size, seed, LossConfig())
        fns.update({(variant, phase): fn for phase, fn in work.items()})
    stats = time_interleaved(fns, repeats, warmup)
    reports = [_epoch_report(m, {ph: stats[(v, ph)] for ph in ("routing", "forward", "step")}, batches,
                             batch_size, repeats, warmup, v) for v, m in models.items()]
    add_speedups(*reports)
    return reports


def format_table(reports: list[BenchReport]) -> str:
    header = f"{'config':<14}{'coeffs':>8}  {'phase':<9}{'median s':>11}{'min s':>11}{'max s':>11}{'speedup':>9}"
    lines = [header, "-" * len(header)]
    for r in reports:
        for name, st in r.phases.items():
            sp = r.speedup.get(name)
            sp_txt = f"{sp:8.2f}x" if sp is not None else f"{'-':>9}"
            lines.append(f"{r.config_id:<14}{r.coefficients:>8}  {name:<9}{st.median:>11.5f}{st.min:>11.5f}"
                         f"{st.max:>11.5f}{sp_txt}")
    return "\n".join(lines)


def write_reports(reports: list[BenchReport], path: str | Path, extra: dict | None = None) -> None:
    payload = {"reports": [r.to_dict() for r in reports]}
    payload.update(extra or {})
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))
