"""Block-wise post-training quantization with per-block Lp metric selection.

Blocks are quantized in execution order. For every block each candidate
``p`` yields activation scales minimizing the Lp reconstruction error;
the candidate whose partially quantized network has the lowest ODOL
against the FP network wins, and the block is then reconstructed with
that ``p``. Labels are never read here.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .odol import ODOLConfig, PositiveSet, odol, select_positive_boxes
from .optim import Adam
from .qmodel import QuantizedContext, QuantizedDetector, QuantState, RecordingContext
from .quantizer import (
    SCALE_EPS,
    AffineQuantizer,
    RoundingSchedule,
    fake_quantize,
    fake_quantize_ste,
    init_minmax,
    init_rounding,
    lp_objective,
    lp_power_sum,
    rectified_sigmoid,
    rounding_regularizer,
    search_scale,
    soft_round,
)
from .synthdata import CalibrationSet, SyntheticDataset
from .tensor import Tensor
from .toydet.metrics import evaluate_map
from .toydet.model import FP, Block, DetectionOutput, ToyDetector, postprocess

log = logging.getLogger(__name__)

DEFAULT_PGRID = (1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5)
METRICS = ("adaptive", "minmax", "mse", "cosine")
BLOCK_KINDS = ("stem", "residual", "neck", "conv")
TIE_TOL = 1e-12


class QuantizationError(RuntimeError):
    pass


def parse_metric(metric: str) -> tuple[str, float | None]:
    """``"lp:3"`` -> ``("lp", 3.0)``; named metrics pass through."""
    if metric.startswith("lp:"):
        p = float(metric[3:])
        if p < 1:
            raise ValueError(f"lp metric needs p >= 1, got {p}")
        return "lp", p
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS} or lp:<p>")
    return metric, None


@dataclass
class PTQConfig:
    w_bits: int = 4
    a_bits: int = 4
    mode: str = "advanced"  # "simple" (grid search) or "advanced" (Adam + learned rounding)
    metric: str = "adaptive"
    pgrid: tuple[float, ...] = DEFAULT_PGRID
    odol: ODOLConfig = field(default_factory=ODOLConfig)
    select_iters: int = 500
    recon_iters: int = 1000
    act_lr: float = 3e-4
    round_lr: float = 1e-3
    warmup: float = 0.4
    batch_size: int = 32
    qdrop: bool = False
    edge_bits: int = 8
    neck_edge: bool = False  # also keep the neck (head inputs) at edge_bits
    odol_subset: int | None = None
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.odol, dict):
            self.odol = ODOLConfig(**self.odol)
        self.pgrid = tuple(float(p) for p in self.pgrid)
        if self.mode not in ("simple", "advanced"):
            raise ValueError(f"mode must be 'simple' or 'advanced', got {self.mode!r}")
        if not self.pgrid or any(p < 1 for p in self.pgrid) or any(b <= a for a, b in zip(self.pgrid, self.pgrid[1:])):
            raise ValueError(f"pgrid must be strictly increasing values >= 1, got {self.pgrid}")
        kind, _ = parse_metric(self.metric)
        if kind == "cosine" and self.mode != "simple":
            raise ValueError("the cosine baseline is a grid-search method; use mode='simple'")

    @property
    def candidates(self) -> tuple[float, ...]:
        kind, p = parse_metric(self.metric)
        if kind == "adaptive":
            return self.pgrid
        if kind == "lp":
            return (p,)
        if kind == "mse":
            return (2.0,)
        return ()

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CandidateResult:
    p: float
    odol: float
    cls_term: float
    loc_term: float
    lp_loss: float
    act_scales: dict[str, float]
    seconds: float = 0.0


@dataclass
class BlockReport:
    name: str
    kind: str
    w_bits: int
    a_bits: int
    p_star: float | None
    candidates: list[CandidateResult]
    act_scales: dict[str, float]
    weight_scale_mean: dict[str, float]
    initial_loss: float | None = None
    final_loss: float | None = None
    kept_initial: bool = False
    warnings: list[str] = field(default_factory=list)


@dataclass
class QuantizationReport:
    config: dict
    blocks: list[BlockReport]
    map_fp: float | None = None
    map_q: float | None = None
    perf_loss: float | None = None
    seconds: float = 0.0

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d.pop("seconds")
        for b in d["blocks"]:
            for c in b["candidates"]:
                c.pop("seconds")
        return d

    def timings(self) -> list[dict]:
        rows = []
        for b in self.blocks:
            for c in b.candidates:
                rows.append({"block_id": b.name, "p": c.p, "odol": c.odol, "cls_term": c.cls_term,
                             "loc_term": c.loc_term, "final_lp_loss": c.lp_loss, "seconds": c.seconds})
        return rows


# block structure ----------------------------------------------------------

def partition_blocks(model) -> list[Block]:
    """Quantization units in execution order; head layers never belong to one."""
    blocks = list(model.blocks)
    for b in blocks:
        if b.kind not in BLOCK_KINDS:
            raise QuantizationError(f"unknown layer kind {b.kind!r} in block {b.name}")
        if any(layer.startswith("head.") for layer in b.layers):
            raise QuantizationError(f"block {b.name} contains head layers")
    return blocks


def block_bits(blocks: Sequence[Block], index: int, cfg: PTQConfig) -> tuple[int, int]:
    """The first block keeps ``edge_bits`` (the last layers live in the FP head)."""
    if index == 0 or (cfg.neck_edge and blocks[index].kind == "neck"):
        return cfg.edge_bits, cfg.edge_bits
    return cfg.w_bits, cfg.a_bits


# optimization contexts ------------------------------------------------------

class _SearchContext:
    """Grid-searches each activation point in order against an FP reference tensor."""

    def __init__(self, base, bits: int, p: float, refs: dict[str, np.ndarray], metric: str = "lp"):
        self.base, self.bits, self.p, self.refs, self.metric = base, bits, p, refs, metric
        self.found: dict[str, AffineQuantizer] = {}

    def weight(self, layer, w):
        return self.base.weight(layer, w)

    def act(self, point, x):
        q = search_scale(x.data, self.bits, False, metric=self.metric, p=self.p, ref=self.refs[point])
        self.found[point] = q
        return Tensor._result(fake_quantize(x.data, q), (), None, "fq")


class _MinMaxContext:
    def __init__(self, base, bits: int):
        self.base, self.bits = base, bits
        self.found: dict[str, AffineQuantizer] = {}

    def weight(self, layer, w):
        return self.base.weight(layer, w)

    def act(self, point, x):
        q = init_minmax(x.data, self.bits, False)
        self.found[point] = q
        return Tensor._result(fake_quantize(x.data, q), (), None, "fq")


class _TrainableContext:
    """Activation scales (and optionally rounding variables) as trainable tensors."""

    def __init__(self, acts: dict[str, AffineQuantizer], weights: dict[str, tuple[np.ndarray, AffineQuantizer]] | None,
                 fixed_weights: QuantState | None = None, qdrop_rng: np.random.Generator | None = None):
        self.acts = acts
        self.scales = {k: Tensor(q.scale, requires_grad=True, name=k) for k, q in acts.items()}
        self.weights = weights or {}
        self.v = {k: Tensor(init_rounding(w, q), requires_grad=True, name=k) for k, (w, q) in self.weights.items()}
        self.fixed = fixed_weights
        self.qdrop_rng = qdrop_rng

    def weight(self, layer, w):
        if layer in self.v:
            wq, q = self.weights[layer]
            return soft_round(wq, self.v[layer], q)
        if self.fixed is not None and layer in self.fixed.weight_q:
            return Tensor._result(self.fixed.quantized_weight(layer, w.data), (), None, "qweight")
        return w

    def act(self, point, x):
        q = self.acts[point]
        out = fake_quantize_ste(x, q, self.scales[point])
        if self.qdrop_rng is not None:
            keep_fp = self.qdrop_rng.random(x.shape) < 0.5
            out = T.add(T.mul(out, (~keep_fp).astype(np.float64)), T.mul(x, keep_fp.astype(np.float64)))
        return out

    def current_acts(self) -> dict[str, AffineQuantizer]:
        return {k: q.with_scale(np.maximum(self.scales[k].data, SCALE_EPS)) for k, q in self.acts.items()}


def _positive_scales(a: np.ndarray) -> np.ndarray:
    return np.maximum(a, SCALE_EPS)


# single block operations ----------------------------------------------------

def _block_loss(model: ToyDetector, block: Block, x_in: np.ndarray, target: np.ndarray, p: float, ctx) -> float:
    with T.no_grad():
        out = model.run_block(block, T.Tensor(x_in), ctx)
    return lp_power_sum(target, out.data, p) / len(x_in)


def minmax_act_scales(model: ToyDetector, block: Block, x_in: np.ndarray, bits: int, base=FP) -> dict[str, AffineQuantizer]:
    ctx = _MinMaxContext(base, bits)
    with T.no_grad():
        model.run_block(block, T.Tensor(x_in), ctx)
    return ctx.found


def grid_act_scales(model: ToyDetector, block: Block, x_in: np.ndarray, refs: dict[str, np.ndarray], p: float,
                    bits: int, base=FP, metric: str = "lp") -> dict[str, AffineQuantizer]:
    """Sequential per-point grid search (each point against its FP reference tensor)."""
    ctx = _SearchContext(base, bits, p, refs, metric)
    with T.no_grad():
        model.run_block(block, T.Tensor(x_in), ctx)
    return ctx.found


def optimize_act_scales(model: ToyDetector, block: Block, x_in: np.ndarray, target: np.ndarray, p: float,
                        bits: int, cfg: PTQConfig, refs: dict[str, np.ndarray] | None = None,
                        rng: np.random.Generator | None = None,
                        warnings: list[str] | None = None) -> dict[str, AffineQuantizer]:
    """Activation scales of ``block`` minimizing the un-rooted Lp error of its output; weights stay FP.

    Simple mode grid-searches every point. Advanced mode runs Adam from
    whichever of the Min-Max and grid-search scales has the lower block
    loss and returns the better of start and end point; a non-finite
    loss aborts the descent in favour of the grid-search result.
    """
    refs = refs or {}
    refs = {**refs, block.act_points[-1]: target}
    grid = grid_act_scales(model, block, x_in, refs, p, bits)
    if cfg.mode == "simple":
        return grid

    def full_loss(acts):
        return _block_loss(model, block, x_in, target, p, QuantizedContext(QuantState(act_q=acts)))

    rng = rng or np.random.default_rng(cfg.seed)
    minmax = minmax_act_scales(model, block, x_in, bits)
    # lr * iters is only a few percent of a scale at toy budgets, so start near the optimum
    init = min((minmax, grid), key=full_loss)
    ctx = _TrainableContext(init, None)
    opt = Adam(list(ctx.scales.values()), lr=cfg.act_lr, project=_positive_scales)
    n = len(x_in)
    for it in range(cfg.select_iters):
        idx = rng.choice(n, size=cfg.batch_size, replace=False) if cfg.batch_size < n else slice(None)
        opt.zero_grad()
        out = model.run_block(block, T.Tensor(x_in[idx]), ctx)
        loss = lp_objective(T.Tensor(target[idx]), out, p)
        if not np.isfinite(loss.item()):
            msg = f"{block.name}: non-finite activation loss at p={p}, iteration {it}; using grid search"
            log.warning(msg)
            if warnings is not None:
                warnings.append(msg)
            return grid
        T.backward(loss)
        opt.step()
    final = ctx.current_acts()
    return final if full_loss(final) <= full_loss(init) else init


def mse_weight_quantizers(model: ToyDetector, block: Block, bits: int) -> dict[str, AffineQuantizer]:
    """Per-output-channel symmetric weight quantizers from an MSE grid search."""
    out = {}
    for layer in block.layers:
        w = model.params[f"{layer}.weight"]
        out[layer] = search_scale(w, bits, True, metric="lp", p=2.0, channel_axis=0, symmetric=True)
    return out


def minmax_weight_quantizers(model: ToyDetector, block: Block, bits: int) -> dict[str, AffineQuantizer]:
    return {layer: init_minmax(model.params[f"{layer}.weight"], bits, True, 0, symmetric=True) for layer in block.layers}


@dataclass
class ReconstructionResult:
    weight_q: dict[str, AffineQuantizer]
    act_q: dict[str, AffineQuantizer]
    rounding: dict[str, np.ndarray]
    initial_loss: float
    final_loss: float
    kept_initial: bool = False


def reconstruct_block(model: ToyDetector, block: Block, x_in: np.ndarray, target: np.ndarray, p_star: float,
                      w_bits: int, a_bits: int, cfg: PTQConfig, start_acts: dict[str, AffineQuantizer],
                      refs: dict[str, np.ndarray] | None = None, metric: str = "lp",
                      rng: np.random.Generator | None = None) -> ReconstructionResult:
    """Quantize weights and activations of one block using ``p_star``.

    Weight scales always come from a per-channel MSE grid search. Simple
    mode then grid-searches activation scales with ``p_star``; advanced
    mode jointly trains activation scales and rounding variables and
    freezes the rounding afterwards.
    """
    refs = {**(refs or {}), block.act_points[-1]: target}
    wq = mse_weight_quantizers(model, block, w_bits)
    wstate = QuantState(weight_q=wq)
    if cfg.mode == "simple":
        acts = grid_act_scales(model, block, x_in, refs, p_star, a_bits, QuantizedContext(wstate), metric)
        loss = _block_loss(model, block, x_in, target, p_star, QuantizedContext(wstate.with_acts(acts)))
        return ReconstructionResult(wq, acts, {}, loss, loss)

    rng = rng or np.random.default_rng(cfg.seed)
    start_state = wstate.with_acts(start_acts)
    initial = _block_loss(model, block, x_in, target, p_star, QuantizedContext(start_state))
    weights = {layer: (model.params[f"{layer}.weight"], q) for layer, q in wq.items()}
    ctx = _TrainableContext(start_acts, weights, qdrop_rng=np.random.default_rng(rng.integers(2**32)) if cfg.qdrop else None)
    opt_s = Adam(list(ctx.scales.values()), lr=cfg.act_lr, project=_positive_scales)
    opt_v = Adam(list(ctx.v.values()), lr=cfg.round_lr)
    sched = RoundingSchedule(warmup=cfg.warmup)
    n = len(x_in)
    iters = max(cfg.recon_iters, 1)
    for it in range(cfg.recon_iters):
        progress = it / iters
        idx = rng.choice(n, size=cfg.batch_size, replace=False) if cfg.batch_size < n else slice(None)
        opt_s.zero_grad()
        opt_v.zero_grad()
        out = model.run_block(block, T.Tensor(x_in[idx]), ctx)
        loss = lp_objective(T.Tensor(target[idx]), out, p_star)
        for v in ctx.v.values():
            loss = T.add(loss, rounding_regularizer(v, progress, schedule=sched))
        if not np.isfinite(loss.item()):
            raise QuantizationError(f"{block.name}: non-finite reconstruction loss at iteration {it} (p={p_star})")
        T.backward(loss)
        opt_s.step()
        opt_v.step()

    rounding = {layer: rectified_sigmoid(ctx.v[layer].data) >= 0.5 for layer in wq}
    acts = ctx.current_acts()
    final_state = QuantState(wq, acts, rounding)
    final = _block_loss(model, block, x_in, target, p_star, QuantizedContext(final_state))
    if final > initial:
        # never hand back something worse than the starting point
        log.info("%s: learned rounding did not beat the start point (%.6g > %.6g)", block.name, final, initial)
        return ReconstructionResult(wq, dict(start_acts), {}, initial, initial, kept_initial=True)
    return ReconstructionResult(wq, acts, rounding, initial, final)


# network driver -------------------------------------------------------------

@dataclass
class _Calib:
    x: np.ndarray
    fp_outs: dict[str, np.ndarray]
    fp_acts: dict[str, np.ndarray]
    fp_det: DetectionOutput
    positives: PositiveSet
    odol_idx: np.ndarray


def _prepare(model: ToyDetector, calib: CalibrationSet, cfg: PTQConfig) -> _Calib:
    x = calib.inputs()
    rec = RecordingContext()
    with T.no_grad():
        outs = model.features(x, rec)
    fp_outs = {k: v.data for k, v in outs.items()}
    fp_det = model.output_from(outs)
    positives = select_positive_boxes(fp_det, cfg.odol)
    idx = np.arange(len(x))
    if cfg.odol_subset is not None and cfg.odol_subset < len(x):
        idx = idx[: cfg.odol_subset]
    return _Calib(x, fp_outs, rec.seen, fp_det, positives, idx)


def _odol_for(model: ToyDetector, cal: _Calib, q_outs: dict[str, np.ndarray], li: int, state: QuantState):
    idx = cal.odol_idx
    outs = {k: T.Tensor(v[idx]) for k, v in q_outs.items()}
    with T.no_grad():
        outs = model.run_from(outs, li, QuantizedContext(state))
        det = model.output_from(outs)
    return det


def select_p(model: ToyDetector, block: Block, li: int, cal: _Calib, q_outs: dict[str, np.ndarray],
             state: QuantState, a_bits: int, cfg: PTQConfig, pgrid: Sequence[float],
             rng: np.random.Generator, warnings: list[str]) -> tuple[float, list[CandidateResult], dict]:
    """Try every ``p``: fit activation scales, run the rest of the network FP, score with ODOL."""
    x_in = q_outs[block.source]
    target = cal.fp_outs[block.name]
    fp_det = cal.fp_det.select(cal.odol_idx)
    pos = cal.positives.select(cal.odol_idx)
    results, scales_by_p = [], {}
    for p in pgrid:
        t0 = time.perf_counter()
        acts = optimize_act_scales(model, block, x_in, target, p, a_bits, cfg, cal.fp_acts, rng, warnings)
        trial = state.with_acts(acts)
        det = _odol_for(model, cal, q_outs, li, trial)
        val = odol(fp_det, det, pos, cfg.odol)
        lp = _block_loss(model, block, x_in, target, p, QuantizedContext(trial))
        results.append(CandidateResult(p, val.total, val.cls_term, val.loc_term, lp,
                                       {k: float(q.scale[0]) for k, q in acts.items()}, time.perf_counter() - t0))
        scales_by_p[p] = acts
    finite = [r for r in results if np.isfinite(r.odol)]
    if not finite:
        diag = ", ".join(f"p={r.p}: odol={r.odol}" for r in results)
        raise QuantizationError(f"{block.name}: every candidate p gave a non-finite ODOL ({diag})")
    best = finite[0]
    for r in finite[1:]:
        if r.odol < best.odol - TIE_TOL:
            best = r
    return best.p, results, scales_by_p[best.p]


def _weight_scale_means(wq: dict[str, AffineQuantizer]) -> dict[str, float]:
    return {k: float(np.mean(q.scale)) for k, q in wq.items()}


def quantize_network(model: ToyDetector, calib: CalibrationSet, cfg: PTQConfig | None = None
                     ) -> tuple[QuantizedDetector, QuantizationReport]:
    """Quantize ``model`` block by block on unlabeled calibration images."""
    if not isinstance(calib, CalibrationSet):
        raise TypeError("quantize_network takes a CalibrationSet (images only)")
    cfg = cfg or PTQConfig()
    kind, _ = parse_metric(cfg.metric)
    t_start = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    blocks = partition_blocks(model)
    cal = _prepare(model, calib, cfg)
    state = QuantState()
    q_outs: dict[str, np.ndarray] = {"image": cal.x}
    reports = []
    for li, block in enumerate(blocks):
        w_bits, a_bits = block_bits(blocks, li, cfg)
        x_in = q_outs[block.source]
        target = cal.fp_outs[block.name]
        warnings: list[str] = []
        if kind in ("minmax", "cosine"):
            if kind == "minmax":
                wq = minmax_weight_quantizers(model, block, w_bits)
                acts = minmax_act_scales(model, block, x_in, a_bits, QuantizedContext(QuantState(weight_q=wq)))
                res = ReconstructionResult(wq, acts, {}, float("nan"), float("nan"))
            else:
                res = reconstruct_block(model, block, x_in, target, 2.0, w_bits, a_bits, cfg, {}, cal.fp_acts,
                                        metric="cosine", rng=rng)
            p_star, cands = None, []
        else:
            p_star, cands, start = select_p(model, block, li, cal, q_outs, state, a_bits, cfg, cfg.candidates, rng,
                                            warnings)
            log.info("%s: p*=%s  odol=%s", block.name, p_star, [round(c.odol, 6) for c in cands])
            res = reconstruct_block(model, block, x_in, target, p_star, w_bits, a_bits, cfg, start, cal.fp_acts,
                                    rng=rng)
        state.weight_q.update(res.weight_q)
        state.act_q.update(res.act_q)
        state.rounding.update(res.rounding)
        with T.no_grad():
            q_outs[block.name] = model.run_block(block, T.Tensor(x_in), QuantizedContext(state)).data
        reports.append(BlockReport(
            block.name, block.kind, w_bits, a_bits, p_star, cands,
            {k: float(q.scale[0]) for k, q in res.act_q.items()}, _weight_scale_means(res.weight_q),
            None if np.isnan(res.initial_loss) else res.initial_loss,
            None if np.isnan(res.final_loss) else res.final_loss, res.kept_initial, warnings,
        ))
    report = QuantizationReport(cfg.to_dict(), reports, seconds=time.perf_counter() - t_start)
    return QuantizedDetector(model, state), report


def baseline_quantize(model: ToyDetector, calib: CalibrationSet, metric: str, mode: str = "simple",
                      cfg: PTQConfig | None = None) -> tuple[QuantizedDetector, QuantizationReport]:
    """Fixed-metric pipeline: ``minmax``, ``mse``, ``cosine`` or ``lp:<p>``; no p selection."""
    if parse_metric(metric)[0] == "adaptive":
        raise ValueError("baseline_quantize needs a fixed metric")
    base = asdict(cfg) if cfg is not None else {}
    base.update(metric=metric, mode=mode)
    return quantize_network(model, calib, PTQConfig(**base))


# validation (labels) ----------------------------------------------------------

def evaluate(qmodel, dataset: SyntheticDataset, score_threshold: float = 0.05, nms_threshold: float = 0.5,
             iou_thresholds: Sequence[float] = (0.5,)) -> float:
    """mAP of a detector (``ToyDetector`` or ``QuantizedDetector``) on a labeled set."""
    if len(dataset) == 0:
        raise ValueError("empty validation set")
    if isinstance(qmodel, ToyDetector):
        qmodel = QuantizedDetector(qmodel)
    out = qmodel.forward(dataset.inputs())
    dets = postprocess(out, score_threshold, nms_threshold)
    return evaluate_map(dets, dataset.annotations, qmodel.model.config.num_classes, iou_thresholds)


def performance_loss(fp_model: ToyDetector, qmodel, val_set: SyntheticDataset, map_fp: float | None = None) -> float:
    """``mAP(FP) - mAP(quantized)`` on labeled validation data."""
    if len(val_set) == 0:
        raise ValueError("empty validation set")
    if map_fp is None:
        map_fp = evaluate(fp_model, val_set)
    return map_fp - evaluate(qmodel, val_set)
