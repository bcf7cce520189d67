"""Single-activation probes: metric comparisons and scale sweeps against labeled performance loss.

Only one activation point is quantized at a time; everything else runs
FP. Block outputs before the probed block are cached once, so each
candidate scale only recomputes the network from that block onward.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .odol import ODOLConfig, odol, select_positive_boxes
from .quantizer import AffineQuantizer, _zero_point, fake_quantize_ste, init_minmax, scale_grid, search_scale, lp_power_sum
from .qmodel import RecordingContext
from .synthdata import CalibrationSet, SyntheticDataset
from .toydet.metrics import evaluate_map
from .toydet.model import DetectionOutput, ToyDetector, postprocess

ODOL_VARIANTS = (("kl", "l1"), ("kl", "iou"), ("mse", "l1"), ("mse", "iou"))
PROBE_METRICS = ("minmax", "l1", "l2", "l3", "l4")


class UnknownLayerError(KeyError):
    pass


def resolve_point(model: ToyDetector, name: str) -> tuple[int, str]:
    """Map an activation point (or a block name, meaning its output) to ``(block index, point)``."""
    for bi, b in enumerate(model.blocks):
        if name in b.act_points:
            return bi, name
        if name == b.name:
            return bi, b.act_points[-1]
    known = ", ".join(model.act_points)
    raise UnknownLayerError(f"unknown layer {name!r}; activation points are: {known}")


class _OnePoint:
    def __init__(self, point: str, q: AffineQuantizer | None):
        self.point, self.q = point, q

    def weight(self, layer, w):
        return w

    def act(self, point, x):
        if point != self.point or self.q is None:
            return x
        return fake_quantize_ste(x, self.q)


@dataclass
class _Cached:
    feats: dict[str, np.ndarray]
    acts: dict[str, np.ndarray]
    fp: DetectionOutput


def _cache(model: ToyDetector, x: np.ndarray) -> _Cached:
    rec = RecordingContext()
    with T.no_grad():
        outs = model.features(x, rec)
    return _Cached({k: v.data for k, v in outs.items()}, rec.seen, model.output_from(outs))


class PointProbe:
    """FP caches for a calibration set and (optionally) a labeled validation set."""

    def __init__(self, model: ToyDetector, calib: CalibrationSet, val: SyntheticDataset | None = None,
                 odol_cfgs: Sequence[ODOLConfig] | None = None):
        self.model = model
        self.cal = _cache(model, calib.inputs())
        self.val = val
        self.val_cache = _cache(model, val.inputs()) if val is not None else None
        self.map_fp = self._map(self.val_cache.fp) if val is not None else None
        self.odol_cfgs = list(odol_cfgs) if odol_cfgs is not None else [ODOLConfig(c, l) for c, l in ODOL_VARIANTS]
        # positive sets depend only on the selection thresholds, shared by all variants here
        self.positives = [select_positive_boxes(self.cal.fp, c) for c in self.odol_cfgs]

    def _map(self, out: DetectionOutput) -> float:
        return evaluate_map(postprocess(out), self.val.annotations, self.model.config.num_classes)

    def _run(self, cache: _Cached, bi: int, point: str, q: AffineQuantizer | None) -> DetectionOutput:
        outs = {k: T.Tensor(v) for k, v in cache.feats.items()}
        with T.no_grad():
            outs = self.model.run_from(outs, bi, _OnePoint(point, q))
        return self.model.output_from(outs)

    def calib_act(self, point: str) -> np.ndarray:
        return self.cal.acts[point]

    def perf_loss(self, bi: int, point: str, q: AffineQuantizer | None) -> float:
        if self.val is None:
            raise ValueError("performance loss needs a labeled validation set")
        return self.map_fp - self._map(self._run(self.val_cache, bi, point, q))

    def odols(self, bi: int, point: str, q: AffineQuantizer | None) -> list[float]:
        out = self._run(self.cal, bi, point, q)
        return [odol(self.cal.fp, out, pos, c).total for c, pos in zip(self.odol_cfgs, self.positives)]


def probe_quantizer(x: np.ndarray, metric: str, bits: int) -> AffineQuantizer:
    """Per-tensor unsigned activation quantizer for ``metric`` in ``minmax``/``l<p>``."""
    if metric == "minmax":
        return init_minmax(x, bits, False)
    if metric.startswith("l") and metric[1:]:
        return search_scale(x, bits, False, metric="lp", p=float(metric[1:]))
    raise ValueError(f"unknown probe metric {metric!r}")


def probe_layer(probe: PointProbe, layers: Sequence[str], bits: int = 4,
                metrics: Sequence[str] = PROBE_METRICS) -> list[dict]:
    """Rows ``{layer, metric, s, L_perf}``: one activation point quantized under each metric."""
    rows = []
    for name in layers:
        bi, point = resolve_point(probe.model, name)
        x = probe.calib_act(point)
        for metric in metrics:
            q = probe_quantizer(x, metric, bits)
            rows.append({"layer": point, "metric": metric, "s": float(q.scale[0]),
                         "L_perf": probe.perf_loss(bi, point, q)})
    return rows


def best_metrics(rows: list[dict]) -> dict[str, str]:
    """Per layer, the metric with the lowest ``L_perf`` (first listed wins ties)."""
    best: dict[str, dict] = {}
    for r in rows:
        cur = best.get(r["layer"])
        if cur is None or r["L_perf"] < cur["L_perf"]:
            best[r["layer"]] = r
    return {k: v["metric"] for k, v in best.items()}


def _normalize(col: np.ndarray) -> np.ndarray:
    lo, hi = col.min(), col.max()
    return np.zeros_like(col) if hi - lo <= 0 else (col - lo) / (hi - lo)


def scale_sweep(probe: PointProbe, layer: str, bits: int = 4, points: int = 100,
                pgrid: Sequence[float] = (1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5),
                with_perf: bool = True) -> list[dict]:
    """Sweep one activation scale from 0.01 to 1.0 times its Min-Max scale.

    Every row holds the scale ratio, the scale, the un-rooted Lp error of
    the activation for each ``p``, every ODOL variant, ``L_perf`` and
    min-max normalized copies (``*_norm``) of the loss columns.
    """
    bi, point = resolve_point(probe.model, layer)
    x = probe.calib_act(point)
    q_max = init_minmax(x, bits, False)
    scales = scale_grid(q_max, points)[:, 0]
    ratios = np.linspace(0.01, 1.0, points)
    xmin = np.atleast_1d(x.min())
    labels = [c.label for c in probe.odol_cfgs]
    rows = []
    for ratio, s in zip(ratios, scales):
        z = _zero_point(xmin, np.atleast_1d(s), q_max.qmin, q_max.qmax)
        q = AffineQuantizer(s, z, bits, False)
        xq = fake_quantize_ste(x, q).data
        row = {"layer": point, "ratio": float(ratio), "s": float(s)}
        for p in pgrid:
            row[f"lp_{p:g}"] = lp_power_sum(x, xq, p)
        for lab, v in zip(labels, probe.odols(bi, point, q)):
            row[f"odol_{lab}"] = v
        if with_perf:
            row["L_perf"] = probe.perf_loss(bi, point, q)
        rows.append(row)
    loss_cols = [k for k in rows[0] if k.startswith(("lp_", "odol_")) or k == "L_perf"]
    for k in loss_cols:
        norm = _normalize(np.array([r[k] for r in rows]))
        for r, v in zip(rows, norm):
            r[f"{k}_norm"] = float(v)
    return rows


def sweep_argmin(rows: list[dict], column: str) -> int:
    """Index of the smallest value in ``column``; ties go to the largest scale."""
    vals = np.array([r[column] for r in rows])
    return len(vals) - 1 - int(np.argmin(vals[::-1]))
