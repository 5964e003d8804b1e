"""Command-line entry points: simulate, train, ablate, sweep-heads, run, bench."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import evaluate, ingest, pipeline
from .geom import IntersectionGeometry, demo_geometry
from .model import load_params, save_params


def _write_json(obj: dict, path: str | None) -> None:
    text = json.dumps(obj, indent=2, default=str)
    if path:
        Path(path).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def _load_dataset(args) -> evaluate.WindowDataset:
    geometry = IntersectionGeometry.load(args.geometry)
    records = ingest.read_stream(args.data)
    truths = ingest.read_labels(args.labels)
    return evaluate.build_dataset(records, truths, geometry)


def _train_config(args) -> evaluate.TrainConfig:
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            return evaluate.TrainConfig.from_dict(json.load(fh))
    return evaluate.TrainConfig()


def cmd_make_geometry(args) -> int:
    demo_geometry().save(args.out)
    print(f"wrote demo geometry to {args.out}")
    return 0


def cmd_simulate(args) -> int:
    geometry = IntersectionGeometry.load(args.geometry)
    spec = ingest.ScenarioSpec.load(args.spec)
    records, truths = ingest.generate_scenario(spec, geometry)
    ingest.write_stream(records, args.out)
    ingest.write_labels(truths, args.labels)
    print(f"wrote {len(records)} frames / {len(truths)} VRUs to {args.out}")
    return 0


def cmd_train(args) -> int:
    dataset = _load_dataset(args)
    cfg = _train_config(args)
    result = evaluate.train(dataset, cfg)
    save_params(result.params, args.out)
    report = {"dataset_hash": dataset.sha256(), "windows": len(dataset),
              **result.summary(),
              "val_loss": result.val_loss, "lr_trace": result.lr_trace}
    _write_json(report, args.report)
    print(f"saved weights to {args.out} "
          f"(test accuracy {result.test_metrics.accuracy:.4f})")
    return 0


def cmd_ablate(args) -> int:
    dataset = _load_dataset(args)
    cfg = _train_config(args)
    report = evaluate.ablation(dataset, cfg, groups=tuple(args.groups))
    _write_json(report.to_dict(), args.report)
    return 0


def cmd_sweep_heads(args) -> int:
    dataset = _load_dataset(args)
    cfg = _train_config(args)
    report = evaluate.head_sweep(dataset, cfg, heads=tuple(args.heads))
    _write_json(report.to_dict(), args.report)
    return 0


def cmd_run(args) -> int:
    geometry = IntersectionGeometry.load(args.geometry)
    params = load_params(args.weights)
    sink = None
    if args.alert_udp:
        host, port = args.alert_udp.rsplit(":", 1)
        sink = pipeline.UdpAlertSink(host, int(port))
    summary = pipeline.run(ingest.read_stream(args.infile), geometry, params,
                           predictions_path=args.out, alert_sink=sink,
                           dump_features_path=args.dump_features)
    if sink:
        sink.close()
    _write_json(summary, None)
    return 0


def cmd_bench(args) -> int:
    geometry = IntersectionGeometry.load(args.geometry)
    params = load_params(args.weights)
    spec = ingest.ScenarioSpec(
        n_vrus=max(2, args.frames // 47), label=None, noise_sigma=1.0,
        dropout=0.02, seed=7, max_concurrent=5)
    records, _ = ingest.generate_scenario(spec, geometry)
    records = records[:args.frames] if len(records) > args.frames else records
    report = pipeline.bench(records, geometry, params)
    _write_json(report, args.report)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crosswise",
        description="Crossing-direction prediction for VRUs at intersections")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-geometry", help="write the demo intersection config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_geometry)

    p = sub.add_parser("simulate", help="generate a synthetic record stream")
    p.add_argument("--geometry", required=True)
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--labels", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train on a recorded stream")
    p.add_argument("--data", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--geometry", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="incremental feature-group ablation")
    p.add_argument("--data", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--geometry", required=True)
    p.add_argument("--config")
    p.add_argument("--groups", nargs="+", default=["L", "M", "G", "P"])
    p.add_argument("--report")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-heads", help="attention head-count sweep")
    p.add_argument("--data", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--geometry", required=True)
    p.add_argument("--config")
    p.add_argument("--heads", nargs="+", type=int, default=[1, 2, 4])
    p.add_argument("--report")
    p.set_defaults(func=cmd_sweep_heads)

    p = sub.add_parser("run", help="stream records through a trained model")
    p.add_argument("--geometry", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alert-udp", dest="alert_udp")
    p.add_argument("--dump-features", dest="dump_features")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bench", help="throughput and latency benchmark")
    p.add_argument("--geometry", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--frames", type=int, default=3000)
    p.add_argument("--report")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
