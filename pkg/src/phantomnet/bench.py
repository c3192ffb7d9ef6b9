"""Benchmark harness and CLI: time forward+decode+NMS per frame on built-in
or user configs, compare models, and emit JSON/CSV/table reports.

The timed window covers inference and postprocessing only; frame
generation, I/O, and report serialization sit outside it. Timed runs are
single-threaded by default for stable numbers.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from contextlib import nullcontext
from dataclasses import dataclass

import numpy as np

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover - dependency is declared, belt and braces
    threadpool_limits = None

from .netgraph import (
    CostReport,
    Model,
    ModelGraph,
    build_model,
    count_costs,
    load_weights,
    read_weights,
    resolve_config,
)
from .postprocess import (
    decode,
    evaluate_map,
    nms,
    read_ground_truth_jsonl,
    read_predictions_jsonl,
)
from .tensor import ConfigError, Tensor4

CSV_HEADER = "model,input,params,gflops,size_mb,fps,lat_ms_mean,lat_ms_p50,lat_ms_p90"


def synthetic_frames(size: int, seed: int = 0):
    """Endless stream of seeded random frames (1, 3, size, size)."""
    rng = np.random.default_rng(seed)
    while True:
        yield Tensor4(rng.uniform(0.0, 1.0, size=(1, 3, size, size)).astype(np.float32))


def image_dir_frames(path: str, size: int):
    """Cycle over the images of a directory, resized to the model input.

    Requires Pillow; images are normalized to [0, 1] CHW float32.
    """
    import os

    from PIL import Image

    names = sorted(
        n for n in os.listdir(path) if n.lower().endswith((".png", ".jpg", ".jpeg", ".bmp"))
    )
    if not names:
        raise ConfigError(f"no images found in {path}")
    frames = []
    for n in names:
        img = Image.open(os.path.join(path, n)).convert("RGB").resize((size, size))
        arr = np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 255.0
        frames.append(Tensor4(arr[None]))
    while True:
        yield from frames


@dataclass(frozen=True)
class BenchReport:
    """Latency/FPS measurement plus the model's analytic cost totals."""

    model_name: str
    input_size: int
    warmup_iters: int
    timed_iters: int
    lat_ms_mean: float
    lat_ms_p50: float
    lat_ms_p90: float
    fps: float
    params: int
    macs: int
    flops: int
    size_bytes: int

    def to_dict(self) -> dict:
        return {
            "model_name": self.model_name,
            "input_size": self.input_size,
            "warmup_iters": self.warmup_iters,
            "timed_iters": self.timed_iters,
            "latency_ms": {
                "mean": round(self.lat_ms_mean, 4),
                "p50": round(self.lat_ms_p50, 4),
                "p90": round(self.lat_ms_p90, 4),
            },
            "fps": round(self.fps, 4),
            "cost": {
                "params": self.params,
                "macs": self.macs,
                "flops": self.flops,
                "size_bytes": self.size_bytes,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BenchReport":
        lat = d["latency_ms"]
        cost = d["cost"]
        return cls(
            model_name=d["model_name"],
            input_size=d["input_size"],
            warmup_iters=d["warmup_iters"],
            timed_iters=d["timed_iters"],
            lat_ms_mean=lat["mean"],
            lat_ms_p50=lat["p50"],
            lat_ms_p90=lat["p90"],
            fps=d["fps"],
            params=cost["params"],
            macs=cost["macs"],
            flops=cost["flops"],
            size_bytes=cost["size_bytes"],
        )


def run_benchmark(
    model: Model,
    source,
    warmup: int = 10,
    iters: int = 100,
    model_name: str = "model",
    input_size: int | None = None,
    conf_thresh: float = 0.25,
    iou_thresh: float = 0.5,
    parallel: bool = False,
) -> BenchReport:
    """Time forward+decode+nms over ``iters`` frames after ``warmup`` frames."""
    if iters < 1:
        raise ConfigError(f"iters must be >= 1, got {iters}")
    if warmup < 0:
        raise ConfigError(f"warmup must be >= 0, got {warmup}")
    frames = iter(source)
    try:
        first = next(frames)
    except StopIteration:
        raise ConfigError("frame source yielded no frames") from None
    size = first.h if input_size is None else input_size

    limiter = nullcontext()
    if not parallel and threadpool_limits is not None:
        limiter = threadpool_limits(limits=1)

    latencies = []
    frame = first
    with limiter:
        for i in range(warmup + iters):
            t0 = time.perf_counter()
            raw = model.forward(frame)
            dets = decode(raw, conf_thresh)
            nms(dets, iou_thresh)
            t1 = time.perf_counter()
            if i >= warmup:
                latencies.append((t1 - t0) * 1000.0)
            if i + 1 < warmup + iters:
                frame = next(frames)

    lat = np.asarray(latencies)
    mean = float(lat.mean())
    cost = count_costs(model.graph, size)
    return BenchReport(
        model_name=model_name,
        input_size=size,
        warmup_iters=warmup,
        timed_iters=iters,
        lat_ms_mean=mean,
        lat_ms_p50=float(np.percentile(lat, 50)),
        lat_ms_p90=float(np.percentile(lat, 90)),
        fps=1000.0 / mean,
        params=cost.params,
        macs=cost.macs,
        flops=cost.flops,
        size_bytes=cost.size_bytes,
    )


def compare(a: BenchReport, b: BenchReport) -> dict:
    """Percentage deltas of b relative to a; signs flip when swapped."""
    if a.input_size != b.input_size:
        raise ConfigError(
            f"cannot compare reports at different input sizes: {a.input_size} vs {b.input_size}"
        )

    def pct(x, y):
        return round((y - x) / x * 100.0, 4)

    return {
        "a": a.model_name,
        "b": b.model_name,
        "input_size": a.input_size,
        "fps_pct": pct(a.fps, b.fps),
        "params_pct": pct(a.params, b.params),
        "flops_pct": pct(a.flops, b.flops),
        "size_pct": pct(a.size_bytes, b.size_bytes),
    }


def _csv_line(r: BenchReport) -> str:
    return ",".join(
        [
            r.model_name,
            str(r.input_size),
            str(r.params),
            f"{r.flops / 1e9:.3f}",
            f"{r.size_bytes / 1e6:.3f}",
            f"{r.fps:.2f}",
            f"{r.lat_ms_mean:.3f}",
            f"{r.lat_ms_p50:.3f}",
            f"{r.lat_ms_p90:.3f}",
        ]
    )


def render_table(r: BenchReport) -> str:
    rows = [
        ("model", r.model_name),
        ("input", str(r.input_size)),
        ("params", f"{r.params:,}"),
        ("gflops", f"{r.flops / 1e9:.3f}"),
        ("size_mb", f"{r.size_bytes / 1e6:.3f}"),
        ("fps", f"{r.fps:.2f}"),
        ("lat_ms_mean", f"{r.lat_ms_mean:.3f}"),
        ("lat_ms_p50", f"{r.lat_ms_p50:.3f}"),
        ("lat_ms_p90", f"{r.lat_ms_p90:.3f}"),
    ]
    key_w = max(len(k) for k, _ in rows)
    val_w = max(len(v) for _, v in rows)
    return "\n".join(f"{k:<{key_w}}  {v:>{val_w}}" for k, v in rows) + "\n"


def emit(report: BenchReport, path: str, fmt: str = "json") -> None:
    """Write a report in one of {json, csv, table}; output is bit-stable."""
    if fmt == "json":
        text = json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n"
    elif fmt == "csv":
        text = CSV_HEADER + "\n" + _csv_line(report) + "\n"
    elif fmt == "table":
        text = render_table(report)
    else:
        raise ConfigError(f"unknown format '{fmt}' (expected json, csv, or table)")
    try:
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)
    except OSError as e:
        raise OSError(f"cannot write report to {path}: {e}") from e


def load_report(path: str) -> BenchReport:
    with open(path, "r", encoding="utf-8") as f:
        return BenchReport.from_dict(json.load(f))


def _load_model(config_spec: str, weights_spec: str) -> tuple[str, ModelGraph, Model]:
    name, graph = resolve_config(config_spec)
    if weights_spec.startswith("random:"):
        seed = int(weights_spec.split(":", 1)[1])
        model = build_model(graph).init_random(seed)
    else:
        manifest, blob = read_weights(weights_spec)
        model = load_weights(graph, manifest, blob)
    return name, graph, model


def _render_cost_table(cost: CostReport, name: str) -> str:
    header = f"{'idx':>3}  {'kind':<12} {'out_shape':<22} {'params':>10} {'macs':>13}"
    lines = [f"model: {name} @ {cost.input_size}", header, "-" * len(header)]
    for row in cost.per_layer:
        shape = row.out_shape
        if shape and isinstance(shape[0], tuple):
            shape_s = "+".join("x".join(map(str, s)) for s in shape)
        else:
            shape_s = "x".join(map(str, shape))
        lines.append(
            f"{row.index:>3}  {row.kind:<12} {shape_s:<22} {row.params:>10,} {row.macs:>13,}"
        )
    lines.append("-" * len(header))
    lines.append(
        f"total: params={cost.params:,}  macs={cost.macs:,}  "
        f"gflops={cost.flops / 1e9:.3f}  size={cost.size_bytes / 1e6:.3f} MB"
    )
    return "\n".join(lines) + "\n"


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="bench", description="Model benchmark harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="time a model on synthetic or on-disk frames")
    p_run.add_argument("--config", required=True, help="config path or builtin:{baseline,phantom}")
    p_run.add_argument("--weights", default="random:0", help="weights stem/path or random:<seed>")
    p_run.add_argument("--size", type=int, default=640)
    p_run.add_argument("--iters", type=int, default=100)
    p_run.add_argument("--warmup", type=int, default=10)
    p_run.add_argument("--source", default="synthetic", help="synthetic or an image directory")
    p_run.add_argument("--seed", type=int, default=0, help="seed for the synthetic source")
    p_run.add_argument("--conf", type=float, default=0.25)
    p_run.add_argument("--out", default=None, help="report path (default: stdout)")
    p_run.add_argument("--format", default="json", choices=["json", "csv", "table"])
    p_run.add_argument(
        "--parallel", action="store_true", help="allow intra-op threading in the timed region"
    )

    p_cmp = sub.add_parser("compare", help="percentage deltas between two JSON reports")
    p_cmp.add_argument("report_a")
    p_cmp.add_argument("report_b")

    p_cost = sub.add_parser("cost", help="analytic cost accounting only, no timing")
    p_cost.add_argument("--config", required=True)
    p_cost.add_argument("--size", type=int, default=None)
    p_cost.add_argument("--out", default=None)
    p_cost.add_argument("--format", default="table", choices=["json", "table"])

    p_eval = sub.add_parser("eval", help="mAP from prediction/ground-truth JSON lines")
    p_eval.add_argument("--preds", required=True)
    p_eval.add_argument("--gt", required=True)

    args = parser.parse_args(argv)

    if args.command == "run":
        name, _, model = _load_model(args.config, args.weights)
        if args.source == "synthetic":
            source = synthetic_frames(args.size, args.seed)
        else:
            source = image_dir_frames(args.source, args.size)
        report = run_benchmark(
            model,
            source,
            warmup=args.warmup,
            iters=args.iters,
            model_name=name,
            input_size=args.size,
            conf_thresh=args.conf,
            parallel=args.parallel,
        )
        if args.out:
            emit(report, args.out, args.format)
        if args.format == "json":
            print(json.dumps(report.to_dict(), sort_keys=True, indent=2))
        elif args.format == "csv":
            print(CSV_HEADER)
            print(_csv_line(report))
        else:
            print(render_table(report), end="")
        return 0

    if args.command == "compare":
        delta = compare(load_report(args.report_a), load_report(args.report_b))
        print(json.dumps(delta, sort_keys=True, indent=2))
        return 0

    if args.command == "cost":
        name, graph = resolve_config(args.config)
        cost = count_costs(graph, args.size)
        if args.format == "json":
            text = json.dumps(cost.to_dict(), sort_keys=True, indent=2) + "\n"
        else:
            text = _render_cost_table(cost, name)
        if args.out:
            with open(args.out, "w", encoding="utf-8") as f:
                f.write(text)
        print(text, end="")
        return 0

    # eval
    preds = read_predictions_jsonl(args.preds)
    gts = read_ground_truth_jsonl(args.gt)
    result = evaluate_map(preds, gts)
    print(
        json.dumps(
            {
                "map50": round(result.map50, 6),
                "map50_95": round(result.map50_95, 6),
                "per_class": {
                    str(k): {"ap50": round(v["ap50"], 6), "ap": round(v["ap"], 6)}
                    for k, v in result.per_class.items()
                },
            },
            sort_keys=True,
            indent=2,
        )
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
