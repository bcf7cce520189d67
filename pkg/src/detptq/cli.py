"""``detptq`` command line: data generation, training, quantization, evaluation and probes.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Every JSON or
CSV artifact records the tool version, the full parsed configuration
and the seed.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .container import ContainerError, load_model, save_model
from .odol import ODOLConfig
from .probe import PROBE_METRICS, PointProbe, UnknownLayerError, best_metrics, probe_layer, scale_sweep
from .ptq import DEFAULT_PGRID, PTQConfig, QuantizationError, evaluate, quantize_network
from .synthdata import DatasetError, SceneSpec, generate_dataset, load_calibration, load_dataset, save_dataset
from .toydet.model import ToyDetector, ToyDetectorConfig
from .train import TrainingDiverged, train_toy

log = logging.getLogger("detptq")

OUT_ENV = "DETPTQ_OUT"


class UsageError(ValueError):
    pass


def _bits(text: str) -> tuple[int, int]:
    try:
        w, a = (int(v) for v in text.split("/"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bits must look like W/A, e.g. 4/4 (got {text!r})") from None
    if not (2 <= w <= 16 and 2 <= a <= 16):
        raise argparse.ArgumentTypeError("bit-widths must lie in 2..16")
    return w, a


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _provenance(args: argparse.Namespace) -> dict:
    cfg = {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(vars(args).items()) if k != "func"}
    return {"tool": "detptq", "version": __version__, "seed": args.seed, "config": cfg}


def _out_dir(args) -> Path:
    out = Path(args.out_dir or os.environ.get(OUT_ENV, "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, rows: list[dict], prov: dict) -> None:
    """CSV with one leading ``#`` line holding the provenance JSON."""
    with open(path, "w", newline="") as f:
        f.write("# " + json.dumps(prov, sort_keys=True) + "\n")
        w = csv.DictWriter(f, fieldnames=list(rows[0]) if rows else [], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_csv(path: os.PathLike) -> tuple[dict, list[dict]]:
    """Inverse of the CSV writer: ``(provenance, rows)`` with numeric fields parsed."""
    with open(path) as f:
        first = f.readline()
        prov = json.loads(first[2:]) if first.startswith("# ") else {}
        rows = []
        for r in csv.DictReader(f):
            parsed = {}
            for k, v in r.items():
                try:
                    parsed[k] = float(v)
                except ValueError:
                    parsed[k] = v
            rows.append(parsed)
    return prov, rows


# commands ---------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec = SceneSpec(shapes_per_image=tuple(args.shapes), seed=args.seed)
    ds = generate_dataset(spec, args.n, seed=args.seed)
    save_dataset(ds, args.out, seed=args.seed)
    print(f"wrote {len(ds)} images to {args.out}")
    return 0


def cmd_train(args) -> int:
    ds = load_dataset(args.data)
    model = ToyDetector(ToyDetectorConfig(), seed=args.seed)
    trained = train_toy(model, ds, args.epochs, seed=args.seed, batch_size=args.batch_size, lr=args.lr)
    save_model(trained, args.out, meta=_provenance(args))
    print(f"wrote {args.out}")
    return 0


def ptq_config(args) -> PTQConfig:
    w, a = args.bits
    odol_cfg = ODOLConfig(args.cls_fn, args.loc_fn, args.alpha, args.score_threshold, args.top_k, args.nms_threshold)
    return PTQConfig(w_bits=w, a_bits=a, mode=args.mode, metric=args.metric, pgrid=args.pgrid, odol=odol_cfg,
                     select_iters=args.select_iters, recon_iters=args.recon_iters, batch_size=args.batch_size,
                     qdrop=args.qdrop, odol_subset=args.odol_subset, seed=args.seed)


def cmd_quantize(args) -> int:
    cfg = ptq_config(args)
    fp = load_model(args.model)
    if fp.state:
        raise UsageError(f"{args.model} is already quantized")
    calib = load_calibration(args.calib, args.n_calib, args.seed)
    qmodel, report = quantize_network(fp.model, calib, cfg)
    if args.val:
        val = load_dataset(args.val)
        report.map_fp = evaluate(fp.model, val)
        report.map_q = evaluate(qmodel, val)
        report.perf_loss = report.map_fp - report.map_q
    out = _out_dir(args)
    prov = _provenance(args)
    save_model(qmodel, out / "quantized.bin", meta=prov)
    _write_json(out / "report.json", {**prov, "report": report.to_json_dict()})
    traces = report.timings()
    for r in traces:
        r.pop("seconds")
    _write_csv(out / "traces.csv", traces, prov)
    # wall-clock lives apart from the report so the report stays reproducible
    _write_json(out / "timings.json", {"total_seconds": report.seconds, "candidates": report.timings()})
    summary = {"map_fp": report.map_fp, "map_q": report.map_q, "perf_loss": report.perf_loss,
               "p_star": {b.name: b.p_star for b in report.blocks}}
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    qm = load_model(args.model)
    ds = load_dataset(args.data)
    m = evaluate(qm, ds, iou_thresholds=args.iou_thresholds)
    result = {**_provenance(args), "mAP": m, "n_images": len(ds), "quantized": bool(qm.state)}
    text = json.dumps(result, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def _probe(args) -> PointProbe:
    fp = load_model(args.model)
    calib = load_calibration(args.calib, args.n_calib, args.seed)
    val = load_dataset(args.val)
    return PointProbe(fp.model, calib, val)


def cmd_probe_layer(args) -> int:
    probe = _probe(args)
    rows = probe_layer(probe, args.layer, args.bits_single, args.metrics)
    out = Path(args.out) if args.out else _out_dir(args) / "probe_layer.csv"
    _write_csv(out, rows, _provenance(args))
    print(json.dumps(best_metrics(rows), sort_keys=True))
    return 0


def cmd_scale_sweep(args) -> int:
    probe = _probe(args)
    out_dir = _out_dir(args)
    prov = _provenance(args)
    for layer in args.layer:
        rows = scale_sweep(probe, layer, args.bits_single, args.points, args.pgrid)
        out = out_dir / f"sweep_{rows[0]['layer']}.csv"
        _write_csv(out, rows, prov)
        print(f"wrote {out}")
    return 0


# parser ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1, help="worker cap (computation is single-threaded)")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_calib(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", required=True, help="model container")
    p.add_argument("--calib", required=True, help="dataset directory used for calibration images")
    p.add_argument("--n-calib", type=int, default=64)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="detptq", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"detptq {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic shapes dataset")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--shapes", type=int, nargs=2, default=(1, 3), metavar=("MIN", "MAX"))
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the toy detector")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("quantize", help="post-training quantization")
    _add_common(p)
    _add_calib(p)
    p.add_argument("--val", help="labeled dataset; fills mAP fields of the report")
    p.add_argument("--out-dir")
    p.add_argument("--bits", type=_bits, default=(4, 4), help="W/A, e.g. 4/4")
    p.add_argument("--mode", choices=("simple", "advanced"), default="advanced")
    p.add_argument("--metric", default="adaptive", help="adaptive, minmax, mse, cosine or lp:<p>")
    p.add_argument("--pgrid", type=_floats, default=DEFAULT_PGRID)
    p.add_argument("--cls-fn", choices=("kl", "mse"), default="kl")
    p.add_argument("--loc-fn", choices=("l1", "iou"), default="l1")
    p.add_argument("--alpha", type=float)
    p.add_argument("--score-threshold", type=float, default=0.05)
    p.add_argument("--top-k", type=int, default=100)
    p.add_argument("--nms-threshold", type=float, default=0.5)
    p.add_argument("--select-iters", type=int, default=500)
    p.add_argument("--recon-iters", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--qdrop", action="store_true")
    p.add_argument("--odol-subset", type=int)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("eval", help="mAP of a model on a labeled dataset")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--iou-thresholds", type=_floats, default=(0.5,))
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    for name, fn, hlp in (("probe-layer", cmd_probe_layer, "per-metric performance loss of single activations"),
                          ("scale-sweep", cmd_scale_sweep, "loss curves over one activation scale")):
        p = sub.add_parser(name, help=hlp)
        _add_common(p)
        _add_calib(p)
        p.add_argument("--val", required=True, help="labeled dataset for L_perf")
        p.add_argument("--layer", required=True, action="append", help="activation point or block name; repeatable")
        p.add_argument("--bits", dest="bits_single", type=int, default=4)
        p.add_argument("--out-dir")
        if name == "probe-layer":
            p.add_argument("--metrics", type=lambda s: tuple(s.split(",")), default=PROBE_METRICS)
            p.add_argument("--out")
        else:
            p.add_argument("--points", type=int, default=100)
            p.add_argument("--pgrid", type=_floats, default=DEFAULT_PGRID)
        p.set_defaults(func=fn)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ContainerError, DatasetError, QuantizationError, TrainingDiverged, FileNotFoundError, OSError) as e:
        print(f"detptq {args.command}: failed: {e}", file=sys.stderr)
        return 1
    except (UsageError, UnknownLayerError, ValueError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"detptq {args.command}: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
