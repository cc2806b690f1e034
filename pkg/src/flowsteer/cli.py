"""Command-line harness: train, reconstruct, edit-eval, sweep, verify, overhead, gen-data.

Every command writes only under ``--out``. Settings may come from a flat
``key=value`` file given with ``--config``; explicit flags win. Keys are the
long flag names with dashes or underscores, e.g. ``grid-n=20``.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import seeding
from .experiments import (
    DEFAULT_ALPHA,
    DEFAULT_M,
    DEFAULT_N,
    ExperimentConfig,
    Row,
    edit_correctors,
    edit_eval,
    eval_data,
    reconstruct,
    rows_to_csv,
    summarize,
    sweep,
    sweep_grid,
    train_data,
)
from .sampler import ConfigError, CorrectorConfig, TimeGrid, overhead_counts
from .surrogate import (
    CONTRACTION_TOL,
    GRADIENT_STEP_TOL,
    decomposition_residual,
    jacobian_norm,
    surrogate_loss,
    true_loss,
    verify_propositions,
)
from .synth import MAX_SIZE, TASKS, build_dataset, export_dataset
from .velocity import (
    AffineField,
    ConstantField,
    MLPField,
    Prompt,
    TrainConfig,
    TrainingError,
    pairs_from_samples,
    train_flow_matching,
)

log = logging.getLogger("flowsteer")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DIVERGED = 2
EXIT_VERIFY = 3

BOUND_SLACK = 1e-4
DECOMPOSITION_TOL = 1e-12
AFFINE_TOL = 1e-10


# -- config file ----------------------------------------------------------------


def read_config(path) -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value, got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = val
    return out


def _apply_config(parser: argparse.ArgumentParser, sub: argparse.ArgumentParser, values: dict[str, str]) -> None:
    known = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r} for this command")
        act = known[key]
        if isinstance(act, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            defaults[key] = raw.lower() in ("1", "true", "yes", "on")
        elif act.type is not None:
            defaults[key] = act.type(raw)
        else:
            defaults[key] = raw
    sub.set_defaults(**defaults)


# -- shared helpers -------------------------------------------------------------


def _hidden(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x)


def _size(text: str) -> int:
    n = int(text)
    if not 11 <= n <= MAX_SIZE:
        raise argparse.ArgumentTypeError(f"size must be in [11, {MAX_SIZE}]")
    return n


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


def _dump_json(path: Path, doc) -> None:
    _write(path, json.dumps(doc, indent=1, sort_keys=True, allow_nan=True) + "\n")


def _experiment(args) -> ExperimentConfig:
    return ExperimentConfig(
        task=args.task,
        seed=args.seed,
        eval_seed=args.eval_seed,
        n_eval=args.n_eval,
        size=args.size,
        grid_n=args.grid_n,
        m=args.m,
        alpha=args.alpha,
        reevaluate_v=args.reevaluate_v,
    )


def _load_model(args) -> MLPField:
    if not args.checkpoint:
        raise FileNotFoundError("--checkpoint is required for this command")
    path = Path(args.checkpoint)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    return MLPField.load(path)


def _eval_set(args, model: MLPField):
    cfg = _experiment(args)
    if model.dim != cfg.size * cfg.size:
        raise ConfigError(f"checkpoint has dim {model.dim} but --size {cfg.size} gives {cfg.size ** 2}")
    grid = TimeGrid.uniform(cfg.grid_n)
    return cfg, grid, eval_data(cfg)


def _trajectory_writer(args, out: Path):
    if not args.dump_trajectories:
        return None
    tdir = out / "trajectories"
    tdir.mkdir(exist_ok=True)

    def hook(name, corr, k, rec):
        tag = f"{name}_M{corr.m}_a{corr.alpha!r}_{k:04d}.json"
        _write(tdir / tag, rec.to_json(record_states=args.record_states) + "\n")

    return hook


def _write_rows(out: Path, stem: str, rows: list[Row], summary: list[Row]) -> None:
    _write(out / f"{stem}.csv", rows_to_csv(rows))
    _write(out / f"{stem}_summary.csv", rows_to_csv(summary))


def _print_summary(summary: Sequence[Row]) -> None:
    for r in summary:
        mmd = "" if r.mmd is None else f" mmd={r.mmd:.5f}"
        print(f"{r.method:16s} M={r.m} alpha={r.alpha:g} psnr={r.psnr_full:.3f} ssim={r.ssim_full:.4f} "
              f"psnr_region={r.psnr_region:.3f} ssim_region={r.ssim_region:.4f}{mmd}")


# -- commands -------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    out = _out_dir(args)
    samples = build_dataset(args.n, args.task, args.seed, args.size)
    path = export_dataset(samples, out, args.seed, args.task)
    print(f"wrote {len(samples)} samples to {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    out = _out_dir(args)
    tcfg = TrainConfig(steps=args.steps, batch_size=args.batch_size, lr=args.lr, seed=args.seed,
                       hidden=_hidden(args.hidden))
    cfg = ExperimentConfig(task=args.task, seed=args.seed, n_train=args.n_train, size=args.size, train=tcfg)
    pairs = pairs_from_samples(train_data(cfg))
    try:
        res = train_flow_matching(pairs, cfg.train_config())
    except TrainingError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        _write(out / "train_loss.csv", "step,loss\n" + "".join(f"{k},{v!r}\n" for k, v in enumerate(e.losses)))
        return EXIT_DIVERGED
    res.model.save(out / "model.ckpt")
    _write(out / "train_loss.csv", "step,loss\n" + "".join(f"{k},{v!r}\n" for k, v in enumerate(res.losses)))
    if res.losses:
        print(f"trained {len(res.losses)} steps, loss {res.losses[0]:.4f} -> {res.losses[-1]:.4f}")
    print(f"checkpoint: {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    model = _load_model(args)
    cfg, grid, samples = _eval_set(args, model)
    out = _out_dir(args)
    rows, outputs = reconstruct(model, samples, grid, cfg, on_record=_trajectory_writer(args, out))
    summary = summarize(rows, outputs, [s.x_in for s in samples])
    _write_rows(out, "reconstruct", rows, summary)
    _print_summary(summary)
    return EXIT_OK


def cmd_edit_eval(args) -> int:
    model = _load_model(args)
    cfg, grid, samples = _eval_set(args, model)
    methods = None if args.corrector == "all" else [m.strip() for m in args.corrector.split(",")]
    table = edit_correctors(cfg.m, cfg.alpha)
    if methods is not None and any(m not in table for m in methods):
        bad = [m for m in methods if m not in table]
        print(f"unknown corrector(s) {bad}; expected any of {sorted(table)}", file=sys.stderr)
        return EXIT_USAGE
    out = _out_dir(args)
    rows, outputs = edit_eval(model, samples, grid, cfg, methods, on_record=_trajectory_writer(args, out))
    summary = summarize(rows, outputs, [s.x_gt for s in samples])
    _write_rows(out, "edit_eval", rows, summary)
    _print_summary(summary)
    return EXIT_OK


def sweep_svg(summary: Sequence[Row], baseline: Row, alpha: float) -> str:
    """Line plot of text-region PSNR against M at one alpha, baseline dashed."""
    pts = sorted((r.m, r.psnr_region) for r in summary if r.method == "ours" and r.alpha == alpha)
    w, h, pad = 420, 280, 48
    xs = [p[0] for p in pts] or [0, 1]
    ys = [p[1] for p in pts] + [baseline.psnr_region]
    x0, x1 = min(xs), max(xs) if max(xs) > min(xs) else min(xs) + 1
    y0, y1 = min(ys), max(ys)
    if y1 - y0 < 1e-9:
        y0, y1 = y0 - 0.5, y1 + 0.5
    span = y1 - y0
    y0, y1 = y0 - 0.1 * span, y1 + 0.1 * span

    def sx(x):
        return pad + (x - x0) / (x1 - x0) * (w - 2 * pad)

    def sy(y):
        return h - pad - (y - y0) / (y1 - y0) * (h - 2 * pad)

    line = " ".join(f"{sx(m):.2f},{sy(v):.2f}" for m, v in pts)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        f'<rect width="{w}" height="{h}" fill="white"/>',
        f'<line x1="{pad}" y1="{h - pad}" x2="{w - pad}" y2="{h - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{h - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{sy(baseline.psnr_region):.2f}" x2="{w - pad}" '
        f'y2="{sy(baseline.psnr_region):.2f}" stroke="gray" stroke-dasharray="4 3"/>',
        f'<polyline points="{line}" fill="none" stroke="steelblue" stroke-width="2"/>',
    ]
    for m, v in pts:
        parts.append(f'<circle cx="{sx(m):.2f}" cy="{sy(v):.2f}" r="3" fill="steelblue"/>')
        parts.append(f'<text x="{sx(m):.2f}" y="{h - pad + 16}" font-size="11" text-anchor="middle">{m}</text>')
    for y in (y0 + 0.1 * span, y1 - 0.1 * span):
        parts.append(f'<text x="{pad - 6}" y="{sy(y):.2f}" font-size="11" text-anchor="end">{y:.3f}</text>')
    parts += [
        f'<text x="{w / 2}" y="{h - 10}" font-size="12" text-anchor="middle">M (corrected steps)</text>',
        f'<text x="14" y="{h / 2}" font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 14 {h / 2})">text-region PSNR (dB)</text>',
        f'<text x="{w / 2}" y="20" font-size="12" text-anchor="middle">alpha={alpha:g}; dashed: baseline</text>',
        "</svg>",
    ]
    return "\n".join(parts) + "\n"


def cmd_sweep(args) -> int:
    model = _load_model(args)
    cfg, grid, samples = _eval_set(args, model)
    ms = [int(x) for x in args.sweep_m.split(",")]
    alphas = [float(x) for x in args.sweep_alpha.split(",")]
    bad = [m for m in ms if not 0 <= m < grid.n]
    if bad:
        print(f"config error: M values {bad} must satisfy 0 <= M < N={grid.n}", file=sys.stderr)
        return EXIT_USAGE
    points = sweep_grid(ms, alphas, cfg.m, cfg.alpha)
    out = _out_dir(args)
    rows, outputs = sweep(model, samples, grid, cfg, points)
    summary = summarize(rows, outputs, [s.x_gt for s in samples])
    baseline = next(r for r in summary if r.method == "baseline")
    _write(out / "sweep_samples.csv", rows_to_csv(rows))
    _write(out / "sweep.csv", rows_to_csv(summary))
    _write(out / "sweep_psnr_region_vs_m.svg", sweep_svg(summary, baseline, cfg.alpha))
    _print_summary(summary)
    return EXIT_OK


def _analytic_fields(dim: int, rng: np.random.Generator):
    const = ConstantField(rng.standard_normal(dim))
    A = rng.standard_normal((dim, dim)) / math.sqrt(dim)
    offsets = {int(p): rng.standard_normal(dim) for p in Prompt if p != Prompt.EMPTY}
    affine = AffineField(A, rng.standard_normal(dim), offsets)
    return [("analytic-constant", const), ("analytic-affine", affine)]


def _verify_instance(name: str, field, grid: TimeGrid, rng: np.random.Generator, k: int) -> dict:
    d = field.dim
    z = rng.standard_normal(d)
    x_in = rng.random(d)
    i = int(rng.integers(0, grid.n))
    alpha = float(rng.random())
    c = int(rng.integers(1, len(Prompt)))
    rep = verify_propositions(field, z, x_in, grid, i, alpha, rng=rng)
    entry = {"instance": k, "field": name, "i": i, "alpha": alpha, "prompt": Prompt(c).name,
             "propositions": rep.as_dict()}

    tl = true_loss(field, z, x_in, grid, i)
    sur = surrogate_loss(z, x_in, grid, i, tl.u)
    gap = float(np.linalg.norm(tl.gradient - sur.gradient))
    grad_entry = {"gap": gap}
    if isinstance(field, ConstantField):
        resid = float(np.max(np.abs(tl.gradient - sur.gradient)))
        grad_entry.update(kind="exact", residual=resid, ok=resid < AFFINE_TOL)
    elif isinstance(field, AffineField):
        expect = (np.eye(d) + sur.remaining * field.A).T @ sur.gradient
        resid = float(np.max(np.abs(tl.gradient - expect)))
        grad_entry.update(kind="exact", residual=resid, ok=resid < AFFINE_TOL)
    else:
        jn = jacobian_norm(field, z, x_in, grid, i, seed=k)
        bound = sur.remaining * jn * float(np.linalg.norm(sur.gradient)) + BOUND_SLACK
        grad_entry.update(kind="bound", jacobian_norm=jn, bound=bound, ok=gap <= bound)
    entry["gradient_relation"] = grad_entry

    dres = decomposition_residual(field, z, grid, i, c, x_in)
    entry["decomposition"] = {"residual": dres, "ok": dres <= DECOMPOSITION_TOL}
    entry["ok"] = bool(rep.ok and grad_entry["ok"] and entry["decomposition"]["ok"])
    if not entry["ok"]:
        entry["dump"] = {"z": z.tolist(), "x_in": x_in.tolist()}
    return entry


def cmd_verify(args) -> int:
    out = _out_dir(args)
    grid = TimeGrid.uniform(args.grid_n)
    rng = seeding.rng(args.seed, seeding.VERIFY)
    if args.checkpoint:
        fields = [("trained-mlp", _load_model(args))]
    else:
        fields = _analytic_fields(args.dim, rng)
    entries = []
    for k in range(args.instances):
        name, field = fields[k % len(fields)]
        entries.append(_verify_instance(name, field, grid, rng, k))
    worst = {
        "minimizer_residual": max(e["propositions"]["minimizer_residual"] for e in entries),
        "gradient_step_residual": max(e["propositions"]["gradient_step_residual"] for e in entries),
        "contraction_residual": max(e["propositions"]["contraction_residual"] for e in entries),
        "decomposition_residual": max(e["decomposition"]["residual"] for e in entries),
    }
    failed = [e for e in entries if not e["ok"]]
    report = {
        "grid_n": grid.n,
        "seed": args.seed,
        "fields": [n for n, _ in fields],
        "tolerances": {"minimizer": 1e-18, "gradient_step": GRADIENT_STEP_TOL, "contraction": CONTRACTION_TOL,
                       "decomposition": DECOMPOSITION_TOL, "affine_gradient": AFFINE_TOL,
                       "bound_slack": BOUND_SLACK},
        "worst": worst,
        "n_instances": len(entries),
        "n_failed": len(failed),
        "instances": entries,
    }
    _dump_json(out / "verify.json", report)
    print(json.dumps({"n_instances": len(entries), "n_failed": len(failed), "worst": worst}, sort_keys=True))
    if failed:
        _dump_json(out / "verify_failures.json", failed)
        print(f"tolerance breach in {len(failed)} instance(s); first: {failed[0]['instance']}", file=sys.stderr)
        print(json.dumps(failed[0], sort_keys=True)[:4000], file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_overhead(args) -> int:
    model = _load_model(args)
    cfg, grid, samples = _eval_set(args, model)
    s = samples[0]
    z0 = seeding.start_noise(cfg.eval_seed, 0, s.x_in.size)
    corr = CorrectorConfig("empty-prompt", cfg.m, cfg.alpha, reevaluate_v=cfg.reevaluate_v)
    counts = overhead_counts(model, s.x_in, s.prompt, grid, corr, z0)
    counts.update(m=cfg.m, n=grid.n, dim=model.dim)
    out = _out_dir(args)
    _dump_json(out / "overhead.json", counts)
    print(json.dumps(counts, sort_keys=True))
    return EXIT_OK


# -- parser ---------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file; explicit flags override it")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out")
    p.add_argument("--size", type=_size, default=32, help="image side in pixels")
    p.add_argument("--task", choices=TASKS, default="text-removal")


def _sampling(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint")
    p.add_argument("--grid-n", type=int, default=DEFAULT_N, help="Euler steps N")
    p.add_argument("--m", type=int, default=DEFAULT_M, help="corrected steps M")
    p.add_argument("--alpha", type=float, default=DEFAULT_ALPHA, help="correction strength")
    p.add_argument("--n-eval", type=int, default=64)
    p.add_argument("--eval-seed", type=int, default=10_000)
    p.add_argument("--reevaluate-v", action="store_true",
                   help="recompute the prompt velocity after each blend")
    p.add_argument("--dump-trajectories", action="store_true", help="write one JSON record per trajectory")
    p.add_argument("--record-states", action="store_true", help="include full states in trajectory JSON")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowsteer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="export a synthetic dataset as PGM + manifest")
    _common(p)
    p.add_argument("--n", type=int, default=64)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the toy velocity field")
    _common(p)
    p.add_argument("--steps", type=int, default=TrainConfig.steps)
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    p.add_argument("--lr", type=float, default=TrainConfig.lr)
    p.add_argument("--hidden", default="256,256", help="comma-separated hidden widths")
    p.add_argument("--n-train", type=int, default=512)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="empty-prompt reconstruction, baseline vs corrected")
    _common(p)
    _sampling(p)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("edit-eval", help="edit with each corrector and score against ground truth")
    _common(p)
    _sampling(p)
    p.add_argument("--corrector", default="all",
                   help="comma list of: none, noise-inversion, empty-prompt, edit-prompt, straight-path, flowchef")
    p.set_defaults(func=cmd_edit_eval)

    p = sub.add_parser("sweep", help="corrected-step count and strength sweep")
    _common(p)
    _sampling(p)
    p.add_argument("--sweep-m", default="1,3,5,7,9")
    p.add_argument("--sweep-alpha", default="0.001,0.01,0.1")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="check the closed-form correction identities on random instances")
    _common(p)
    p.add_argument("--checkpoint", help="trained field; analytic fields when omitted")
    p.add_argument("--grid-n", type=int, default=DEFAULT_N)
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--dim", type=int, default=16, help="dimension of the analytic fields")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("overhead", help="count network slots and blend work, baseline vs corrected")
    _common(p)
    _sampling(p)
    p.set_defaults(func=cmd_overhead)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        sub = parser._subparsers._group_actions[0].choices[args.command]
        try:
            _apply_config(parser, sub, read_config(args.config))
        except (ConfigError, ValueError, OSError) as e:
            print(f"config error: {e}", file=sys.stderr)
            return EXIT_USAGE
        args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
