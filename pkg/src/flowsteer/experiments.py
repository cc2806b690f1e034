"""Desk-scale versions of the evaluation protocols.

Each protocol samples every eval image once per corrector from the same
start noise, so method differences are paired.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from . import seeding
from .metrics import kernel_mmd, score_pair
from .sampler import CorrectorConfig, TimeGrid, sample
from .synth import EditSample, build_dataset
from .velocity import MLPField, Prompt, TrainConfig, VelocityField, pairs_from_samples, train_flow_matching

CSV_FIELDS = ("method", "model", "task", "M", "alpha", "psnr_full", "ssim_full", "psnr_region",
              "ssim_region", "mmd", "seed", "sample")

DEFAULT_M = 3
DEFAULT_ALPHA = 0.01
DEFAULT_N = 20
DEFAULT_NOISE_INVERSION_I = 1
SWEEP_M = (1, 3, 5, 7, 9)
SWEEP_ALPHA = (0.001, 0.01, 0.1)


@dataclass
class ExperimentConfig:
    task: str = "text-removal"
    seed: int = 0
    n_train: int = 512
    eval_seed: int = 10_000
    n_eval: int = 64
    size: int = 32
    grid_n: int = DEFAULT_N
    m: int = DEFAULT_M
    alpha: float = DEFAULT_ALPHA
    reevaluate_v: bool = False
    train: TrainConfig | None = None

    def train_config(self) -> TrainConfig:
        return replace(self.train or TrainConfig(), seed=self.seed)


def train_data(cfg: ExperimentConfig) -> list[EditSample]:
    return build_dataset(cfg.n_train, cfg.task, cfg.seed, cfg.size)


def eval_data(cfg: ExperimentConfig) -> list[EditSample]:
    samples = build_dataset(cfg.n_eval, cfg.task, cfg.eval_seed, cfg.size)
    for s in samples:
        s.split = "eval"
    return samples


def train_model(cfg: ExperimentConfig, on_step=None):
    pairs = pairs_from_samples(train_data(cfg))
    return train_flow_matching(pairs, cfg.train_config(), on_step=on_step)


Methods = Sequence[tuple[str, CorrectorConfig]]


def edit_correctors(m: int = DEFAULT_M, alpha: float = DEFAULT_ALPHA,
                    reevaluate_v: bool = False) -> dict[str, CorrectorConfig]:
    return {
        "none": CorrectorConfig("none", 0, alpha),
        "noise-inversion": CorrectorConfig("none", 0, alpha, noise_inversion_i=DEFAULT_NOISE_INVERSION_I),
        "empty-prompt": CorrectorConfig("empty-prompt", m, alpha, reevaluate_v=reevaluate_v),
        "edit-prompt": CorrectorConfig("edit-prompt", m, alpha, reevaluate_v=reevaluate_v),
        "straight-path": CorrectorConfig("straight-path", m, alpha, reevaluate_v=reevaluate_v),
        "flowchef": CorrectorConfig("flowchef", m, alpha, s=alpha / 2),
    }


@dataclass
class Row:
    method: str
    model: str
    task: str
    m: int
    alpha: float
    psnr_full: float
    ssim_full: float
    psnr_region: float
    ssim_region: float
    mmd: float | None
    seed: int
    sample: int | str


def run_methods(field: VelocityField, samples: Sequence[EditSample], methods: Methods,
                grid: TimeGrid, cfg: ExperimentConfig, prompt: int | None = None, reference: str = "gt",
                model_name: str = "toy-mlp", on_record=None) -> tuple[list[Row], dict[tuple, list[np.ndarray]]]:
    """Sample each eval image under each method and score it.

    ``methods`` is a list of (name, corrector) pairs; names may repeat when
    M or alpha differ. ``prompt=None`` uses each sample's own edit prompt;
    ``reference`` picks the image scores are measured against ("gt" or "in").
    Outputs are keyed by (name, M, alpha). ``on_record(name, corr, k, rec)``
    sees every trajectory record.
    """
    for _, corr in methods:
        corr.validate(grid)
    rows: list[Row] = []
    outputs: dict[tuple, list[np.ndarray]] = {(name, corr.m, corr.alpha): [] for name, corr in methods}
    for k, s in enumerate(samples):
        z0 = seeding.start_noise(cfg.eval_seed, k, s.x_in.size)
        c = s.prompt if prompt is None else prompt
        ref = s.x_gt if reference == "gt" else s.x_in
        for name, corr in methods:
            out, rec = sample(field, s.x_in, c, grid, corr, z0)
            if on_record is not None:
                on_record(name, corr, k, rec)
            outputs[(name, corr.m, corr.alpha)].append(out)
            # scores use the exported image, i.e. clamped to [0, 1]
            rep = score_pair(np.clip(out, 0.0, 1.0), ref, s.mask)
            rows.append(Row(name, model_name, s.task, corr.m, corr.alpha, rep.psnr_full, rep.ssim_full,
                            rep.psnr_region, rep.ssim_region, None, cfg.seed, k))
    return rows, outputs


def summarize(rows: Iterable[Row], outputs: dict[tuple, list[np.ndarray]] | None = None,
              refs: Sequence[np.ndarray] | None = None) -> list[Row]:
    """Per-method means (in first-seen order); MMD against ``refs`` when given."""
    groups: dict[tuple, list[Row]] = {}
    for r in rows:
        groups.setdefault((r.method, r.m, r.alpha), []).append(r)
    out = []
    for (method, m, alpha), rs in groups.items():
        mmd = None
        if outputs is not None and refs is not None and (method, m, alpha) in outputs:
            mmd = kernel_mmd([np.clip(o, 0, 1) for o in outputs[(method, m, alpha)]], refs)
        out.append(Row(method, rs[0].model, rs[0].task, m, alpha,
                       _mean(r.psnr_full for r in rs), _mean(r.ssim_full for r in rs),
                       _mean(r.psnr_region for r in rs), _mean(r.ssim_region for r in rs),
                       mmd, rs[0].seed, "mean"))
    return out


def _mean(xs) -> float:
    # PSNR can be +inf on exact matches; cap so means stay finite
    vals = [min(x, 100.0) for x in xs]
    return float(np.mean(vals))


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        if math.isinf(x):
            return "inf"
        return repr(x)
    return str(x)


def rows_to_csv(rows: Iterable[Row]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in rows:
        w.writerow([_fmt(v) for v in (r.method, r.model, r.task, r.m, r.alpha, r.psnr_full, r.ssim_full,
                                      r.psnr_region, r.ssim_region, r.mmd, r.seed, r.sample)])
    return buf.getvalue()


def reconstruct(field, samples, grid, cfg, on_record=None):
    """Empty-prompt sampling scored against the input image, baseline vs corrected."""
    methods = [
        ("baseline", CorrectorConfig("none", 0, cfg.alpha)),
        ("ours", CorrectorConfig("empty-prompt", cfg.m, cfg.alpha, reevaluate_v=cfg.reevaluate_v)),
    ]
    return run_methods(field, samples, methods, grid, cfg, prompt=int(Prompt.EMPTY), reference="in",
                       on_record=on_record)


def edit_eval(field, samples, grid, cfg, methods: Sequence[str] | None = None, on_record=None):
    table = edit_correctors(cfg.m, cfg.alpha, cfg.reevaluate_v)
    if methods is not None:
        unknown = [m for m in methods if m not in table]
        if unknown:
            raise ValueError(f"unknown corrector(s) {unknown}; expected any of {list(table)}")
        table = {m: table[m] for m in methods}
    return run_methods(field, samples, list(table.items()), grid, cfg, on_record=on_record)


def sweep_grid(ms: Sequence[int] = SWEEP_M, alphas: Sequence[float] = SWEEP_ALPHA,
               m_default: int = DEFAULT_M, alpha_default: float = DEFAULT_ALPHA) -> list[tuple[int, float]]:
    """M varied at the default alpha, then alpha varied at the default M, deduplicated."""
    out: list[tuple[int, float]] = []
    for pt in [(m, alpha_default) for m in ms] + [(m_default, a) for a in alphas]:
        if pt not in out:
            out.append(pt)
    return out


def sweep(field, samples, grid, cfg, points: Sequence[tuple[int, float]] | None = None):
    """Baseline plus the empty-prompt corrector at every (M, alpha) point."""
    points = sweep_grid(m_default=cfg.m, alpha_default=cfg.alpha) if points is None else points
    methods = [("baseline", CorrectorConfig("none", 0, 0.0))]
    for m, a in points:
        methods.append(("ours", CorrectorConfig("empty-prompt", m, a, reevaluate_v=cfg.reevaluate_v)))
    return run_methods(field, samples, methods, grid, cfg)


def load_or_train(cfg: ExperimentConfig, checkpoint=None) -> MLPField:
    if checkpoint is not None:
        return MLPField.load(checkpoint)
    return train_model(cfg).model
