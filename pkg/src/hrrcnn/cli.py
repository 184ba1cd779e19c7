"""Command-line interface and on-disk formats.

Run config
    Flat ``key = value`` text, one key per line, ``#`` starts a comment.
    ``seed``, ``steps`` and ``train_scenes`` are required; every other key has
    a default (see :class:`RunConfig`).  Unknown keys are rejected by name.

Checkpoint
    ASCII header followed by a little-endian float32 payload::

        HRRCNN-CHECKPOINT 1
        config <key>=<value>            (one per RunConfig field)
        tensor <name> <d0,d1,...> <byte offset into payload>
        payload <byte count>
        end
        <raw float32 bytes>

Tables
    Metrics logs, AP reports, delta tables, regression plot data and attention
    dumps are comma-separated text with a header row.  Floats are written with
    ``repr`` so a table reproduces the exact doubles that produced it.

Commands: ``train``, ``eval``, ``report``, ``inspect-attention``,
``gradcheck`` and ``synth-export``.  Exit status is 0 on success, 1 when a
gradient check fails and 2 on any error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import sys
from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .detector import HrModelParams, ModelConfig, hr_forward, init_params
from .gradcheck import run_suite
from .graphs import Metric, SemanticMetric
from .metrics import ApReport, FrequencyRegression, class_frequency_regression, param_count_report
from .synthdata import CLASS_NAMES, SceneSpec, class_counts, export_scene, generate_scene, spec_hash, split_indices
from .training import LogRow, TrainConfig, eval_proposals, evaluate, scenes_for, train_loop

CHECKPOINT_MAGIC = "HRRCNN-CHECKPOINT 1"
REQUIRED_KEYS = ("seed", "steps", "train_scenes")


class CliError(Exception):
    """User-facing failure; the message is printed and the exit status is 2."""


# ---------------------------------------------------------------------------
# run config
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    steps: int = 2000
    train_scenes: int = 20
    val_scenes: int = 50
    # dataset
    data_seed: int = 0
    image_size: int = 64
    min_objects: int = 1
    max_objects: int = 5
    min_size: int = 12
    max_size: int = 28
    noise: float = 0.15
    class_probs: Tuple[float, float, float] = (0.6, 0.3, 0.1)
    # model
    num_levels: int = 3
    channels: int = 32
    stem_channels: int = 16
    pool_size: int = 7
    hidden_dim: int = 128
    temperature: float = 2.0
    metric: str = "dot"
    groups: int = 2
    mlp_hidden: int = 16
    enable_pixel: bool = True
    enable_scale: bool = True
    enable_roi: bool = True
    enable_stage2: bool = True
    share_head: bool = True
    stage_order: Tuple[str, str] = ("pr", "sr")
    # optimisation
    lr: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup_steps: int = 100
    decay_at: float = 0.75
    clip_norm: float = 10.0
    n_per_gt: int = 4
    n_bg: int = 8
    jitter: float = 0.25
    eval_jitter: float = 0.15
    eval_interval: int = 500
    # diagnostics
    gradcheck_entries: int = 16

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(
            self.image_size,
            self.image_size,
            self.min_objects,
            self.max_objects,
            self.min_size,
            self.max_size,
            self.noise,
            tuple(self.class_probs),
            self.data_seed,
        )

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            num_levels=self.num_levels,
            channels=self.channels,
            stem_channels=self.stem_channels,
            pool_size=self.pool_size,
            hidden_dim=self.hidden_dim,
            temperature=self.temperature,
            metric=SemanticMetric(Metric(self.metric), self.groups),
            mlp_hidden=self.mlp_hidden,
            enable_pixel=self.enable_pixel,
            enable_scale=self.enable_scale,
            enable_roi=self.enable_roi,
            enable_stage2=self.enable_stage2,
            share_head=self.share_head,
            stage_order=tuple(self.stage_order),
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            steps=self.steps,
            lr=self.lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            warmup_steps=self.warmup_steps,
            decay_at=self.decay_at,
            clip_norm=self.clip_norm,
            n_per_gt=self.n_per_gt,
            n_bg=self.n_bg,
            jitter=self.jitter,
            eval_jitter=self.eval_jitter,
            eval_interval=self.eval_interval,
            seed=self.seed,
        )

    def splits(self) -> Tuple[range, range]:
        return split_indices(self.train_scenes, self.val_scenes)

    def lines(self) -> List[str]:
        return [f"{f.name}={format_value(getattr(self, f.name))}" for f in fields(self)]


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_bool(key: str, text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise CliError(f"config key {key!r}: expected true/false, got {text!r}")


def _parse_value(key: str, text: str, default):
    try:
        if isinstance(default, bool):
            return _parse_bool(key, text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            parts = [p.strip() for p in text.split(",")]
            if len(parts) != len(default):
                raise CliError(f"config key {key!r}: expected {len(default)} comma-separated values, got {text!r}")
            return tuple(type(d)(p) for d, p in zip(default, parts))
        return text
    except ValueError as exc:
        raise CliError(f"config key {key!r}: cannot parse {text!r} ({exc})") from None


def parse_config(text: str, require: Sequence[str] = REQUIRED_KEYS) -> RunConfig:
    defaults = RunConfig()
    known = {f.name for f in fields(RunConfig)}
    values: Dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"config line {lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise CliError(f"unknown config key {key!r} (line {lineno})")
        if key in values:
            raise CliError(f"config key {key!r} given twice (line {lineno})")
        values[key] = _parse_value(key, value, getattr(defaults, key))
    for key in require:
        if key not in values:
            raise CliError(f"missing required config key {key!r}")
    cfg = dataclasses.replace(defaults, **values)
    try:
        cfg.scene_spec()
        model = cfg.model_config()
        model.metric.check(cfg.hidden_dim)
        model.metric.check(cfg.channels)
    except (ValueError, TypeError) as exc:
        raise CliError(f"invalid config: {exc}") from None
    return cfg


def load_config(path: str, seed_override: Optional[int] = None) -> RunConfig:
    with open(path) as fh:
        cfg = parse_config(fh.read())
    if seed_override is not None:
        cfg = dataclasses.replace(cfg, seed=seed_override)
    return cfg


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: str, params: HrModelParams, cfg: RunConfig) -> None:
    header = [CHECKPOINT_MAGIC] + [f"config {line}" for line in cfg.lines()]
    payload = []
    offset = 0
    for name, t in params.registry:
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        header.append(f"tensor {name} {','.join(map(str, t.shape))} {offset}")
        payload.append(arr.tobytes())
        offset += arr.nbytes
    header += [f"payload {offset}", "end"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        for chunk in payload:
            fh.write(chunk)


def load_checkpoint(path: str) -> Tuple[HrModelParams, RunConfig]:
    """Rebuild parameters (widened to float64) and the run config they were trained with."""
    with open(path, "rb") as fh:
        blob = fh.read()
    marker = b"\nend\n"
    cut = blob.find(marker)
    if not blob.startswith(CHECKPOINT_MAGIC.encode()) or cut < 0:
        raise CliError(f"{path}: not a checkpoint")
    lines = blob[:cut].decode("ascii").splitlines()[1:]
    payload = blob[cut + len(marker) :]
    cfg_lines, tensors, size = [], [], None
    for line in lines:
        kind, _, rest = line.partition(" ")
        if kind == "config":
            cfg_lines.append(rest)
        elif kind == "tensor":
            name, shape, off = rest.split(" ")
            tensors.append((name, tuple(int(d) for d in shape.split(",") if d), int(off)))
        elif kind == "payload":
            size = int(rest)
        else:
            raise CliError(f"{path}: unexpected header line {line!r}")
    if size is None or size != len(payload):
        raise CliError(f"{path}: payload is {len(payload)} bytes, header says {size}")
    cfg = parse_config("\n".join(cfg_lines), require=())
    params = init_params(cfg.model_config(), cfg.seed)
    expected = {n: t.shape for n, t in params.registry}
    if set(expected) != {n for n, _, _ in tensors}:
        raise CliError(f"{path}: tensor set does not match the model described by its config")
    state = {}
    for name, shape, off in tensors:
        if shape != expected[name]:
            raise CliError(f"{path}: tensor {name} has shape {shape}, model expects {expected[name]}")
        count = int(np.prod(shape))
        state[name] = np.frombuffer(payload, dtype="<f4", count=count, offset=off).astype(np.float64)
        state[name] = state[name].reshape(shape)
    params.registry.load_state(state)
    return params, cfg


# ---------------------------------------------------------------------------
# tables
# ---------------------------------------------------------------------------


def _num(x) -> str:
    return repr(float(x))


def write_csv(path: str, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_num(v) if isinstance(v, (float, np.floating)) else v for v in row])


def read_csv(path: str) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


CLASS_IDS = [1, 2, 3]


def metrics_header() -> List[str]:
    return ["step", "loss", "ap50", "ap"] + [f"ap50_{CLASS_NAMES[c]}" for c in CLASS_IDS]


def write_report(path: str, report: ApReport) -> None:
    rows = [
        [c, CLASS_NAMES[c], report.gt_counts[c], report.train_counts.get(c, 0), report.ap50[c], report.ap[c]]
        for c in report.class_ids
    ]
    write_csv(path, ["class_id", "name", "gt_count", "train_count", "ap50", "ap"], rows)


def read_report(path: str) -> ApReport:
    rows = read_csv(path)
    if not rows or "ap50" not in rows[0]:
        raise CliError(f"{path}: not an AP report")
    ids = [int(r["class_id"]) for r in rows]
    return ApReport(
        ids,
        {int(r["class_id"]): float(r["ap50"]) for r in rows},
        {int(r["class_id"]): float(r["ap"]) for r in rows},
        {int(r["class_id"]): int(r["gt_count"]) for r in rows},
        {int(r["class_id"]): int(r["train_count"]) for r in rows},
    )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(config_path: str, out_dir: str, seed_override: Optional[int] = None, echo=print) -> List[LogRow]:
    """Train, writing ``checkpoint.bin``, ``metrics.csv`` and the resolved ``config.txt``."""
    cfg = load_config(config_path, seed_override)
    os.makedirs(out_dir, exist_ok=True)
    spec = cfg.scene_spec()
    train_idx, _ = cfg.splits()
    log_path = os.path.join(out_dir, "metrics.csv")
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(metrics_header())

        def on_row(row: LogRow):
            writer.writerow([row.step] + [_num(v) for v in row.fields(CLASS_IDS)[1:]])
            fh.flush()
            echo(f"step {row.step}: loss {row.loss:.4f} AP50 {row.report.mean_ap50:.4f} AP {row.report.mean_ap:.4f}")

        params, rows = train_loop(spec, train_idx, cfg.model_config(), cfg.train_config(), callback=on_row)
    save_checkpoint(os.path.join(out_dir, "checkpoint.bin"), params, cfg)
    with open(os.path.join(out_dir, "config.txt"), "w") as fh:
        fh.write("\n".join(cfg.lines()) + "\n")
    return rows


def cmd_eval(checkpoint: str, split: str = "val", out: Optional[str] = None, echo=print) -> ApReport:
    params, cfg = load_checkpoint(checkpoint)
    train_idx, val_idx = cfg.splits()
    if split not in ("train", "val"):
        raise CliError(f"split must be 'train' or 'val', got {split!r}")
    indices = train_idx if split == "train" else val_idx
    if len(indices) == 0:
        raise CliError(f"the {split} split is empty")
    spec = cfg.scene_spec()
    report = evaluate(params, scenes_for(spec, indices), cfg.train_config())
    counts = class_counts(spec, train_idx)
    report.train_counts = {c: int(counts[c]) for c in report.class_ids}
    if out:
        write_report(out, report)
    for c in report.class_ids:
        echo(f"{CLASS_NAMES[c]:9s} gt {report.gt_counts[c]:4d} AP50 {report.ap50[c]:.4f} AP {report.ap[c]:.4f}")
    echo(f"mean      AP50 {report.mean_ap50:.4f} AP {report.mean_ap:.4f}")
    return report


@dataclass
class ReportResult:
    class_ids: List[int]
    train_counts: Dict[int, int]
    delta_ap: Dict[int, float]
    delta_ap50: Dict[int, float]
    mean_delta_ap: float
    mean_delta_ap50: float
    linear: Optional[FrequencyRegression] = None
    log: Optional[FrequencyRegression] = None
    param_counts: Dict[str, float] = field(default_factory=dict)


def compare_reports(base: ApReport, other: ApReport) -> ReportResult:
    """Per-class ``other - base`` with least-squares fits against training counts."""
    if base.class_ids != other.class_ids:
        raise CliError(f"class sets differ: {base.class_ids} vs {other.class_ids}")
    counts = other.train_counts or base.train_counts
    if base.train_counts and other.train_counts and base.train_counts != other.train_counts:
        raise CliError("reports were evaluated against different training sets")
    ids = base.evaluated
    d_ap = {c: other.ap[c] - base.ap[c] for c in ids}
    d_ap50 = {c: other.ap50[c] - base.ap50[c] for c in ids}
    result = ReportResult(
        ids,
        {c: counts.get(c, 0) for c in ids},
        d_ap,
        d_ap50,
        other.mean_ap - base.mean_ap,
        other.mean_ap50 - base.mean_ap50,
    )
    x = [result.train_counts[c] for c in ids]
    y = [d_ap[c] for c in ids]
    if len(ids) >= 2 and len(set(x)) > 1:
        result.linear = class_frequency_regression(y, x)
        if min(x) > 0:
            result.log = class_frequency_regression(y, x, log_scale=True)
    return result


def cmd_report(
    base_report: str, other_report: str, out_dir: str, checkpoint: Optional[str] = None, echo=print
) -> ReportResult:
    """Delta table ``delta.csv`` and regression plot data ``regression.csv``."""
    result = compare_reports(read_report(base_report), read_report(other_report))
    os.makedirs(out_dir, exist_ok=True)
    rows = [
        [c, CLASS_NAMES[c], result.train_counts[c], result.delta_ap[c], result.delta_ap50[c]] for c in result.class_ids
    ]
    rows.append(["mean", "all", sum(result.train_counts.values()), result.mean_delta_ap, result.mean_delta_ap50])
    write_csv(os.path.join(out_dir, "delta.csv"), ["class_id", "name", "train_count", "delta_ap", "delta_ap50"], rows)
    plot = [["point", result.train_counts[c], result.delta_ap[c]] for c in result.class_ids]
    for name, fit in (("linear", result.linear), ("log", result.log)):
        if fit is None:
            continue
        xs = np.array([min(result.train_counts.values()), max(result.train_counts.values())], dtype=np.float64)
        line_x = np.log(xs) if fit.log_scale else xs
        for xv, yv in zip(xs, fit.predict(line_x)):
            plot.append([f"fit_{name}", float(xv), float(yv)])
        plot.append([f"coef_{name}", fit.slope, fit.intercept])
    write_csv(os.path.join(out_dir, "regression.csv"), ["series", "x", "y"], plot)

    for c in result.class_ids:
        echo(f"{CLASS_NAMES[c]:9s} n_train {result.train_counts[c]:5d} dAP {result.delta_ap[c]:+.4f} dAP50 {result.delta_ap50[c]:+.4f}")
    echo(f"mean      dAP {result.mean_delta_ap:+.4f} dAP50 {result.mean_delta_ap50:+.4f}")
    if result.linear is not None:
        echo(f"fit dAP = {result.linear.slope:+.3e} * count {result.linear.intercept:+.4f}")
    if result.log is not None:
        echo(f"fit dAP = {result.log.slope:+.3e} * log(count) {result.log.intercept:+.4f}")
    if checkpoint:
        params, _ = load_checkpoint(checkpoint)
        result.param_counts = param_count_report(params)
        for key, value in result.param_counts.items():
            echo(f"params {key:28s} {value:.4g}" if isinstance(value, float) else f"params {key:28s} {value}")
    return result


def attention_dumps(params: HrModelParams, cfg: RunConfig, scene_index: int, roi_index: int) -> Dict[str, tuple]:
    """Per graph: ``(weights [N, N], edge_attrs [N, N, g + k])`` for one RoI of one scene."""
    if scene_index < 0:
        raise CliError(f"scene index must be >= 0, got {scene_index}")
    scene = generate_scene(cfg.scene_spec(), scene_index)
    proposals = eval_proposals(scene, cfg.train_config())
    if not 0 <= roi_index < len(proposals):
        raise CliError(f"roi index {roi_index} out of range: scene {scene_index} has {len(proposals)} proposals")
    traces: dict = {}
    hr_forward(None, scene.image, proposals, params, traces)
    out = {}
    for stage_name in ("stage1", "stage2"):
        for graph_name, (graph, tr) in traces.get(stage_name, {}).items():
            w, e = tr.weights.data, graph.edge_attrs.data
            if w.ndim == 3:  # one graph per RoI
                w, e = w[roi_index], e[roi_index]
            out[f"{stage_name}.{graph_name}"] = (w, e)
    return out


def cmd_inspect_attention(checkpoint: str, scene_index: int, roi_index: int, out_dir: str, echo=print) -> Dict[str, tuple]:
    params, cfg = load_checkpoint(checkpoint)
    dumps = attention_dumps(params, cfg, scene_index, roi_index)
    os.makedirs(out_dir, exist_ok=True)
    for name, (w, e) in dumps.items():
        N, k = w.shape[0], e.shape[-1]
        rows = [[i, j, w[i, j]] + list(e[i, j]) for i in range(N) for j in range(N)]
        write_csv(os.path.join(out_dir, f"attention_{name}.csv"), ["i", "j", "weight"] + [f"e{m}" for m in range(k)], rows)
        echo(f"{name}: {N}x{N} weights, max row-sum error {np.max(np.abs(w.sum(axis=1) - 1.0)):.1e}")
    return dumps


def cmd_gradcheck(config_path: str, seed_override: Optional[int] = None, echo=print) -> bool:
    cfg = load_config(config_path, seed_override)
    echo(f"{'check':28s} {'max rel err':>12s} {'threshold':>10s}  result")

    def show(row):
        echo(f"{row.name:28s} {row.error:12.3e} {row.threshold:10.0e}  {'pass' if row.passed else 'FAIL'}")

    rows = run_suite(cfg.model_config(), cfg.gradcheck_entries or None, cfg.seed, show)
    return all(r.passed for r in rows)


def cmd_synth_export(config_path: str, out_dir: str, count: Optional[int] = None, echo=print) -> List[str]:
    cfg = load_config(config_path)
    spec = cfg.scene_spec()
    n = cfg.train_scenes + cfg.val_scenes if count is None else count
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for i in range(n):
        png, _ = export_scene(generate_scene(spec, i), out_dir, f"scene_{i:05d}")
        written.append(png)
    with open(os.path.join(out_dir, "manifest.txt"), "w") as fh:
        fh.write(f"spec_hash {spec_hash(spec)}\nscenes {n}\n")
        fh.write("\n".join(f"config {line}" for line in cfg.lines()) + "\n")
    echo(f"wrote {n} scenes to {out_dir} (spec {spec_hash(spec)})")
    return written


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hrrcnn", description="Graph-attention detector on synthetic scenes.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoint + metrics log")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed-override", type=int)

    p = sub.add_parser("eval", help="AP report of a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val", choices=["train", "val"])
    p.add_argument("--out", help="report CSV path")

    p = sub.add_parser("report", help="per-class AP deltas of two reports and their regression")
    p.add_argument("base", help="baseline report CSV")
    p.add_argument("other", help="compared report CSV")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--checkpoint", help="also print parameter counts of this checkpoint")

    p = sub.add_parser("inspect-attention", help="dump attention weights and edge attributes for one RoI")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", type=int, required=True)
    p.add_argument("--roi", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gradcheck", help="finite-difference check table")
    p.add_argument("--config", required=True)
    p.add_argument("--seed-override", type=int)

    p = sub.add_parser("synth-export", help="write scenes as PNG + annotation sidecars")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            cmd_train(args.config, args.out, args.seed_override)
        elif args.command == "eval":
            cmd_eval(args.checkpoint, args.split, args.out)
        elif args.command == "report":
            cmd_report(args.base, args.other, args.out, args.checkpoint)
        elif args.command == "inspect-attention":
            cmd_inspect_attention(args.checkpoint, args.scene, args.roi, args.out)
        elif args.command == "gradcheck":
            return 0 if cmd_gradcheck(args.config, args.seed_override) else 1
        elif args.command == "synth-export":
            cmd_synth_export(args.config, args.out, args.count)
    except (CliError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0
