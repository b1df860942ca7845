"""Command-line entry point: data generation, training, verification, reports.

One JSON config file describes a run. Top-level keys:

  out_dir   directory for training artifacts
  dataset   path of the transition JSONL consumed by ``train``
  env       task layout (n_modes, mode_radius, mode_std, ds, da, horizon,
            box_radius, action_bound, noise_scale)
  data      generation knobs (n_trajectories, seed)
  train     every TrainConfig field except eval_env, plus ``evaluate`` to
            toggle greedy-rollout evaluation

Unknown keys anywhere in the document are rejected. ``--set key=value``
overrides single entries with dotted paths (``--set train.steps=500``);
values are parsed as JSON when possible, otherwise kept as strings.

Exit codes: 0 success, 1 verification failure, 2 usage or config error.
The CSV stays the source of truth for plots; SVGs are rendered by hand so
no plotting stack is needed. C4_THREADS caps BLAS worker pools.
"""

from __future__ import annotations

import argparse
import json
import os
import statistics
import sys
from dataclasses import fields as dataclass_fields
from pathlib import Path

from .data import EnvSpec, generate, load_jsonl, save_jsonl
from .errors import C4Error, InputError, ParseError
from .gmm import mixture_to_json
from .train import TrainConfig, metrics_from_csv, metrics_to_csv, train
from .verify import SUITES, run_suite

_TOP_KEYS = ("out_dir", "dataset", "env", "data", "train")
_ENV_KEYS = ("n_modes", "mode_radius", "mode_std", "ds", "da", "horizon",
             "box_radius", "action_bound", "noise_scale")
_DATA_KEYS = ("n_trajectories", "seed")
_TRAIN_KEYS = tuple(f.name for f in dataclass_fields(TrainConfig)
                    if f.name != "eval_env") + ("evaluate",)

_REPORT_METRICS = ("td_loss", "tr_n_sample_convention", "eval_return")
_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2")
_MAX_POLYLINE_POINTS = 2000


def _reject_unknown(section: dict, allowed: tuple, where: str) -> None:
    for key in section:
        if key not in allowed:
            raise InputError(f"unknown config key '{where}{key}'")


def _apply_override(cfg: dict, assignment: str) -> None:
    key, sep, raw = assignment.partition("=")
    if not sep or not key:
        raise InputError(f"--set expects key=value, got {assignment!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = key.split(".")
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise InputError(f"--set path {key!r} crosses a non-object value")
        node = child
    node[parts[-1]] = value


def load_run_config(path: str, overrides: list[str] | None = None) -> dict:
    """Parse and validate a run config; overrides apply before validation."""
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise InputError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise InputError("config root must be a JSON object")
    for assignment in overrides or []:
        _apply_override(cfg, assignment)
    _reject_unknown(cfg, _TOP_KEYS, "")
    for name, allowed in (("env", _ENV_KEYS), ("data", _DATA_KEYS),
                          ("train", _TRAIN_KEYS)):
        if name in cfg:
            if not isinstance(cfg[name], dict):
                raise InputError(f"config section {name!r} must be an object")
            _reject_unknown(cfg[name], allowed, f"{name}.")
    for name in ("out_dir", "dataset"):
        if name in cfg and not isinstance(cfg[name], str):
            raise InputError(f"config key {name!r} must be a string path")
    return cfg


def build_env(cfg: dict) -> EnvSpec:
    section = dict(cfg.get("env", {}))
    n_modes = int(section.pop("n_modes", 1))
    mode_radius = float(section.pop("mode_radius", 0.6))
    mode_std = float(section.pop("mode_std", 0.05))
    return EnvSpec.with_circular_modes(n_modes, mode_radius, mode_std, **section)


def build_train_config(cfg: dict, env: EnvSpec, baseline: bool) -> TrainConfig:
    section = dict(cfg.get("train", {}))
    if "steps" not in section:
        raise InputError("config must set train.steps")
    evaluate = bool(section.pop("evaluate", True))
    if "hidden" in section:
        section["hidden"] = tuple(int(width) for width in section["hidden"])
    if baseline:
        section["baseline_mode"] = True
    return TrainConfig(eval_env=env if evaluate else None, **section)


def _apply_thread_cap() -> None:
    raw = os.environ.get("C4_THREADS")
    if raw is None:
        return
    try:
        n = int(raw)
    except ValueError:
        raise InputError(f"C4_THREADS must be a positive integer, got {raw!r}")
    if n < 1:
        raise InputError(f"C4_THREADS must be a positive integer, got {raw!r}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(n))


def cmd_gen_data(args) -> int:
    cfg = load_run_config(args.config, args.set)
    env = build_env(cfg)
    section = cfg.get("data", {})
    dataset = generate(env, n_trajectories=int(section.get("n_trajectories", 50)),
                       seed=int(section.get("seed", 0)))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_jsonl(dataset, str(out))
    print(json.dumps({"path": str(out), "n_transitions": len(dataset),
                      "ds": dataset.ds, "da": dataset.da,
                      "modes": env.n_modes, "seed": dataset.seed}))
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.set)
    dataset_path = cfg.get("dataset")
    if dataset_path is None:
        raise InputError("config must set 'dataset'")
    if not Path(dataset_path).is_file():
        raise InputError(f"dataset not found: {dataset_path}")
    dataset = load_jsonl(dataset_path)
    env = build_env(cfg)
    train_cfg = build_train_config(cfg, env, args.baseline)
    out_dir = Path(cfg.get("out_dir", "."))
    out_dir.mkdir(parents=True, exist_ok=True)

    on_refresh = None
    if not train_cfg.baseline_mode:
        mixture_dir = out_dir / "mixtures"
        mixture_dir.mkdir(exist_ok=True)

        def on_refresh(step, mixture):
            path = mixture_dir / f"refresh_{step:06d}.json"
            path.write_text(mixture_to_json(mixture), encoding="utf-8")

    critic, metrics = train(dataset, train_cfg, on_refresh=on_refresh)
    suffix = "_baseline" if train_cfg.baseline_mode else ""
    metrics_path = out_dir / f"metrics{suffix}.csv"
    critic_path = out_dir / f"critic{suffix}.json"
    metrics_to_csv(metrics, str(metrics_path))
    critic.save(str(critic_path))
    print(json.dumps({"metrics": str(metrics_path), "critic": str(critic_path),
                      "steps": len(metrics)}))
    return 0


def cmd_verify(args) -> int:
    report = run_suite(args.suite, seed=args.seed)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0 if report["passed"] else 1


def _run_label(path: str, taken: set) -> str:
    base = Path(path).stem
    label = base
    bump = 2
    while label in taken:
        label = f"{base}-{bump}"
        bump += 1
    taken.add(label)
    return label


def _series(rows: list[dict], metric: str) -> list[tuple[int, float]]:
    return [(row["step"], row[metric]) for row in rows if row[metric] is not None]


def _thin(points: list) -> list:
    if len(points) <= _MAX_POLYLINE_POINTS:
        return points
    stride = -(-len(points) // _MAX_POLYLINE_POINTS)
    kept = points[::stride]
    if kept[-1] != points[-1]:
        kept.append(points[-1])
    return kept


def render_metric_svg(metric: str, runs: list[tuple[str, list[dict]]]) -> str:
    """Self-contained SVG overlaying one polyline per run for one metric."""
    width, height = 720, 420
    left, right, top, bottom = 70, 160, 30, 45
    body = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
            f'height="{height}" viewBox="0 0 {width} {height}">',
            f'<rect width="{width}" height="{height}" fill="white"/>',
            f'<text x="{left}" y="20" font-family="sans-serif" font-size="14" '
            f'font-weight="bold">{metric}</text>']
    series = [(label, _thin(_series(rows, metric))) for label, rows in runs]
    drawn = [s for s in series if s[1]]
    if not drawn:
        body.append(f'<text x="{width // 2}" y="{height // 2}" '
                    'font-family="sans-serif" font-size="13" '
                    'text-anchor="middle">no data</text>')
        body.append("</svg>")
        return "\n".join(body) + "\n"

    xs = [p[0] for _, pts in drawn for p in pts]
    ys = [p[1] for _, pts in drawn for p in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x0 == x1:
        x0, x1 = x0 - 1, x1 + 1
    if y0 == y1:
        y0, y1 = y0 - 1.0, y1 + 1.0
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad
    plot_w = width - left - right
    plot_h = height - top - bottom

    def sx(x):
        return left + (x - x0) / (x1 - x0) * plot_w

    def sy(y):
        return top + (y1 - y) / (y1 - y0) * plot_h

    axis = (f'<line x1="{left}" y1="{top}" x2="{left}" y2="{height - bottom}" '
            'stroke="black"/>'
            f'<line x1="{left}" y1="{height - bottom}" x2="{width - right}" '
            f'y2="{height - bottom}" stroke="black"/>')
    body.append(axis)
    labels = [
        (left, height - bottom + 16, "start", f"{x0:.6g}"),
        (width - right, height - bottom + 16, "end", f"{x1:.6g}"),
        (left - 6, height - bottom, "end", f"{y0:.6g}"),
        (left - 6, top + 10, "end", f"{y1:.6g}"),
    ]
    for x, y, anchor, text in labels:
        body.append(f'<text x="{x}" y="{y}" font-family="sans-serif" '
                    f'font-size="11" text-anchor="{anchor}">{text}</text>')

    for i, (label, pts) in enumerate(series):
        color = _PALETTE[i % len(_PALETTE)]
        if pts:
            coords = " ".join(f"{sx(s):.2f},{sy(v):.2f}" for s, v in pts)
            body.append(f'<polyline points="{coords}" fill="none" '
                        f'stroke="{color}" stroke-width="1.5"/>')
        ly = top + 8 + 16 * i
        body.append(f'<rect x="{width - right + 10}" y="{ly - 8}" width="10" '
                    f'height="10" fill="{color}"/>')
        body.append(f'<text x="{width - right + 25}" y="{ly + 1}" '
                    f'font-family="sans-serif" font-size="11">{label}</text>')
    body.append("</svg>")
    return "\n".join(body) + "\n"


def cmd_report(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs = []
    taken = set()
    for path in args.csv:
        try:
            rows = metrics_from_csv(path)
        except ParseError as exc:
            raise InputError(f"{path}: {exc}") from exc
        runs.append((_run_label(path, taken), rows))
    summary = {}
    for label, rows in runs:
        per_metric = {}
        for metric in _REPORT_METRICS:
            values = [v for _, v in _series(rows, metric)]
            per_metric[metric] = {
                "final": values[-1] if values else None,
                "median": statistics.median(values) if values else None,
            }
        summary[label] = per_metric
    for metric in _REPORT_METRICS:
        (out_dir / f"{metric}.svg").write_text(render_metric_svg(metric, runs),
                                               encoding="utf-8")
    summary_path = out_dir / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                            encoding="utf-8")
    print(json.dumps({"out_dir": str(out_dir),
                      "plots": [f"{m}.svg" for m in _REPORT_METRICS],
                      "summary": str(summary_path)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="c4",
        description="Clustered cross-covariance control for TD critics.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate an offline dataset")
    gen.add_argument("--config", required=True)
    gen.add_argument("--out", required=True)
    gen.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    gen.set_defaults(func=cmd_gen_data)

    tr = sub.add_parser("train", help="train a critic and write artifacts")
    tr.add_argument("--config", required=True)
    tr.add_argument("--baseline", action="store_true",
                    help="run the ablation twin with the shared seed")
    tr.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    tr.set_defaults(func=cmd_train)

    ver = sub.add_parser("verify", help="run numerical invariant suites")
    ver.add_argument("--suite", required=True, choices=SUITES)
    ver.add_argument("--seed", type=int, default=0)
    ver.set_defaults(func=cmd_verify)

    rep = sub.add_parser("report", help="render SVG plots and a summary")
    rep.add_argument("csv", nargs="+")
    rep.add_argument("--out", required=True)
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _apply_thread_cap()
        return args.func(args)
    except C4Error as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
