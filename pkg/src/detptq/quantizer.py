"""Uniform affine fake quantization, Lp reconstruction losses and learned rounding."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

SCALE_EPS = 1e-8
GRID_POINTS = 100
GRID_LOW = 0.01

# learned-rounding stretch constants
ZETA = 1.1
GAMMA = -0.1


def qrange(bits: int, signed: bool) -> tuple[int, int]:
    if bits < 2:
        raise ValueError(f"bits must be >= 2, got {bits}")
    if signed:
        return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    return 0, 2**bits - 1


@dataclass
class AffineQuantizer:
    """Per-tensor (``channel_axis is None``) or per-channel affine quantizer.

    ``scale`` and ``zero_point`` are 1-d arrays; per-tensor quantizers
    hold a single entry.
    """

    scale: np.ndarray
    zero_point: np.ndarray
    bits: int
    signed: bool
    channel_axis: int | None = None

    def __post_init__(self):
        self.scale = np.atleast_1d(np.asarray(self.scale, dtype=np.float64)).copy()
        self.zero_point = np.atleast_1d(np.asarray(self.zero_point, dtype=np.float64)).copy()
        n, m = qrange(self.bits, self.signed)
        if self.scale.shape != self.zero_point.shape:
            raise ValueError("scale and zero_point must have the same shape")
        if np.any(~(self.scale > 0)):
            raise ValueError("scale must be positive")
        if np.any(self.zero_point < n) or np.any(self.zero_point > m):
            raise ValueError(f"zero_point outside [{n}, {m}]")
        if self.channel_axis is None and self.scale.size != 1:
            raise ValueError("per-tensor quantizer needs a single scale")

    @property
    def qmin(self) -> int:
        return qrange(self.bits, self.signed)[0]

    @property
    def qmax(self) -> int:
        return qrange(self.bits, self.signed)[1]

    @property
    def granularity(self) -> str:
        return "tensor" if self.channel_axis is None else "channel"

    def with_scale(self, scale) -> "AffineQuantizer":
        return AffineQuantizer(scale, self.zero_point, self.bits, self.signed, self.channel_axis)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel dequantized [low, high]."""
        return self.scale * (self.qmin - self.zero_point), self.scale * (self.qmax - self.zero_point)

    def to_record(self) -> dict:
        return {
            "granularity": self.granularity,
            "channel_axis": self.channel_axis,
            "bits": self.bits,
            "signed": self.signed,
            "s": [float(v) for v in self.scale],
            "z": [int(v) for v in self.zero_point],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "AffineQuantizer":
        return cls(
            np.array(rec["s"], dtype=np.float64),
            np.array(rec["z"], dtype=np.float64),
            int(rec["bits"]),
            bool(rec["signed"]),
            rec.get("channel_axis"),
        )


def _bcast(v: np.ndarray, ndim: int, axis: int | None) -> np.ndarray:
    if axis is None:
        return v.reshape(())
    shape = [1] * ndim
    shape[axis] = v.size
    return v.reshape(shape)


def _channel_view(x: np.ndarray, axis: int | None) -> np.ndarray:
    """(C, rest) view with channels first; per-tensor gives (1, size)."""
    if axis is None:
        return x.reshape(1, -1)
    return np.moveaxis(x, axis, 0).reshape(x.shape[axis], -1)


def _zero_point(xmin: np.ndarray, scale: np.ndarray, n: int, m: int) -> np.ndarray:
    return np.clip(np.round(n - xmin / scale), n, m)


def init_minmax(x, bits: int, signed: bool, channel_axis: int | None = None, symmetric: bool = False) -> AffineQuantizer:
    """Quantizer whose grid covers the observed range of ``x``.

    ``symmetric`` widens the range to ``[-max|x|, max|x|]`` (weights).
    Constant channels get ``scale = SCALE_EPS``.
    """
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("init_minmax: empty tensor")
    n, m = qrange(bits, signed)
    view = _channel_view(x, channel_axis)
    if view.shape[1] == 0:
        raise ValueError("init_minmax: empty channel")
    lo, hi = view.min(axis=1), view.max(axis=1)
    if symmetric:
        a = np.maximum(np.abs(lo), np.abs(hi))
        lo, hi = -a, a
    scale = (hi - lo) / (m - n)
    scale = np.where(scale > 0, scale, SCALE_EPS)
    zp = np.zeros_like(scale) if symmetric else _zero_point(lo, scale, n, m)
    return AffineQuantizer(scale, zp, bits, signed, channel_axis)


def quantize_int(x: np.ndarray, q: AffineQuantizer) -> np.ndarray:
    """Integer codes ``clip(round(x/s) + z, n, m)`` (round half to even)."""
    s = _bcast(q.scale, x.ndim, q.channel_axis)
    z = _bcast(q.zero_point, x.ndim, q.channel_axis)
    return np.clip(np.round(x / s) + z, q.qmin, q.qmax)


def dequantize(codes: np.ndarray, q: AffineQuantizer) -> np.ndarray:
    s = _bcast(q.scale, codes.ndim, q.channel_axis)
    z = _bcast(q.zero_point, codes.ndim, q.channel_axis)
    return (codes - z) * s


def fake_quantize(x, q: AffineQuantizer) -> np.ndarray:
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    return dequantize(quantize_int(x, q), q)


def fake_quantize_ste(x, q: AffineQuantizer, scale: Tensor | None = None) -> Tensor:
    """Differentiable fake quantization.

    Gradient to ``x`` is 1 where the code is not clipped and 0 elsewhere.
    If ``scale`` is given (a tensor shaped like ``q.scale``) it replaces
    ``q.scale`` and receives the LSQ-style gradient
    ``round(x/s) - x/s`` inside the range and ``n - z`` / ``m - z`` at
    clipped elements.
    """
    x = T.as_tensor(x)
    sv = q.scale if scale is None else scale.data
    nd = x.ndim
    s = _bcast(sv, nd, q.channel_axis)
    z = _bcast(q.zero_point, nd, q.channel_axis)
    n, m = q.qmin, q.qmax
    xs = x.data / s
    r = np.round(xs)
    codes = r + z
    low = codes < n
    high = codes > m
    inside = ~(low | high)
    out = (np.clip(codes, n, m) - z) * s

    parents = (x,) if scale is None else (x, scale)

    def bw(g):
        gx = g * inside
        if scale is None:
            return (gx,)
        ds = np.where(inside, r - xs, np.where(low, n - z, m - z))
        gs = g * ds
        if q.channel_axis is None:
            gs_red = np.atleast_1d(gs.sum())
        else:
            gs_red = _channel_view(gs, q.channel_axis).sum(axis=1)
        return (gx, gs_red.reshape(scale.shape))

    return Tensor._result(out, parents, bw, "fake_quantize_ste")


# Lp losses ----------------------------------------------------------------

def _arrays(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    b = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise T.ShapeError(f"lp_loss: shapes differ {a.shape} vs {b.shape}")
    return a, b


def lp_power_sum(o, oq, p: float) -> float:
    """Un-rooted ``sum |o - oq|^p``; the quantity minimized during calibration."""
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    a, b = _arrays(o, oq)
    d = np.abs(a - b)
    live = d >= 1e-12
    return float(np.sum(np.exp(p * np.log(d[live]))))


def lp_loss(o, oq, p: float) -> float:
    """``(sum |o - oq|^p)^(1/p)``."""
    return lp_power_sum(o, oq, p) ** (1.0 / p)


def lp_objective(o: Tensor, oq: Tensor, p: float, batch_axis: bool = True) -> Tensor:
    """Differentiable un-rooted Lp: sum over elements, averaged over the leading batch axis."""
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    d = T.abs_pow(T.sub(oq, o), p)
    total = T.sum(d)
    if batch_axis:
        total = T.mul(total, 1.0 / d.shape[0])
    return total


def cosine_similarity(a, b) -> float:
    a, b = _arrays(a, b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 1.0 if na == nb else 0.0
    return float(np.dot(a.ravel(), b.ravel()) / (na * nb))


# scale grid search --------------------------------------------------------

def scale_grid(q_max: AffineQuantizer, points: int = GRID_POINTS, low: float = GRID_LOW) -> np.ndarray:
    """Candidate scales, shape (points, C): linear from ``low`` to 1 times the Min-Max scale."""
    fr = np.linspace(low, 1.0, points)
    return fr[:, None] * q_max.scale[None, :]


def grid_losses(x: np.ndarray, ref: np.ndarray, q_max: AffineQuantizer, metric: str = "lp", p: float = 2.0,
                xmin: np.ndarray | None = None, points: int = GRID_POINTS) -> tuple[np.ndarray, np.ndarray]:
    """Loss of quantizing ``x`` (compared against ``ref``) for every grid scale.

    Returns ``(scales (points, C), losses (points, C))``. ``metric`` is
    ``"lp"`` (un-rooted power sum) or ``"cosine"`` (1 - cosine similarity,
    per-tensor only). Zero points are re-derived from ``xmin`` for every
    candidate unless the quantizer is symmetric (``xmin is None``).
    """
    scales = scale_grid(q_max, points)
    ax = q_max.channel_axis
    n, m = q_max.qmin, q_max.qmax
    xv = _channel_view(x, ax)
    rv = _channel_view(ref, ax)
    losses = np.empty_like(scales)
    for k in range(scales.shape[0]):
        s = scales[k]
        z = q_max.zero_point if xmin is None else _zero_point(xmin, s, n, m)
        xq = (np.clip(np.round(xv / s[:, None]) + z[:, None], n, m) - z[:, None]) * s[:, None]
        if metric == "lp":
            d = np.abs(rv - xq)
            live = d >= 1e-12
            e = np.zeros_like(d)
            e[live] = np.exp(p * np.log(d[live]))
            losses[k] = e.sum(axis=1)
        elif metric == "cosine":
            losses[k] = 1.0 - cosine_similarity(rv, xq)
        else:
            raise ValueError(f"unknown metric {metric!r}")
    return scales, losses


def pick_grid(losses: np.ndarray) -> np.ndarray:
    """Per-channel argmin index; exact ties go to the largest scale."""
    rev = losses[::-1]
    return losses.shape[0] - 1 - np.argmin(rev, axis=0)


def search_scale(x, bits: int, signed: bool, *, metric: str = "lp", p: float = 2.0, ref=None,
                 channel_axis: int | None = None, symmetric: bool = False,
                 points: int = GRID_POINTS) -> AffineQuantizer:
    """Grid-search quantizer for ``x`` minimizing the metric against ``ref`` (default ``x``)."""
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    ref = x if ref is None else (ref.data if isinstance(ref, Tensor) else np.asarray(ref, dtype=np.float64))
    q0 = init_minmax(x, bits, signed, channel_axis, symmetric=symmetric)
    xmin = None if symmetric else _channel_view(x, channel_axis).min(axis=1)
    scales, losses = grid_losses(x, ref, q0, metric, p, xmin, points)
    idx = pick_grid(losses)
    s = scales[idx, np.arange(scales.shape[1])]
    z = q0.zero_point if symmetric else _zero_point(xmin, s, q0.qmin, q0.qmax)
    return AffineQuantizer(s, z, bits, signed, channel_axis)


# perturbation -------------------------------------------------------------

@dataclass
class PerturbationReport:
    delta_round: np.ndarray
    delta_clip: np.ndarray
    delta_total: np.ndarray
    fraction_clipped: float


def perturbation(x, q: AffineQuantizer) -> PerturbationReport:
    """Split ``x - fake_quantize(x)`` into a clipping and a rounding part."""
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    s = _bcast(q.scale, x.ndim, q.channel_axis)
    z = _bcast(q.zero_point, x.ndim, q.channel_axis)
    codes = np.round(x / s) + z
    clipped = (codes < q.qmin) | (codes > q.qmax)
    xq = fake_quantize(x, q)
    # a clipped element carries no rounding error
    d_clip = np.where(clipped, x - xq, 0.0)
    d_total = x - xq
    d_round = d_total - d_clip
    return PerturbationReport(d_round, d_clip, d_total, float(clipped.mean()) if x.size else 0.0)


# learned rounding ---------------------------------------------------------

def rectified_sigmoid(v: np.ndarray) -> np.ndarray:
    return np.clip(T._sigmoid(v) * (ZETA - GAMMA) + GAMMA, 0.0, 1.0)


def init_rounding(w: np.ndarray, q: AffineQuantizer) -> np.ndarray:
    """Rounding variables whose soft value equals the fractional part of ``w/s``."""
    s = _bcast(q.scale, w.ndim, q.channel_axis)
    rest = w / s - np.floor(w / s)
    frac = (rest - GAMMA) / (ZETA - GAMMA)
    return np.log(frac / (1.0 - frac))


def soft_round(w, v: Tensor, q: AffineQuantizer) -> Tensor:
    """Weight fake-quantized as ``floor(w/s) + h(v)`` with ``h`` the rectified sigmoid."""
    w = w.data if isinstance(w, Tensor) else np.asarray(w, dtype=np.float64)
    v = T.as_tensor(v)
    if v.shape != w.shape:
        raise T.ShapeError(f"soft_round: v shape {v.shape} != w shape {w.shape}")
    s = _bcast(q.scale, w.ndim, q.channel_axis)
    z = _bcast(q.zero_point, w.ndim, q.channel_axis)
    sig = T._sigmoid(v.data)
    raw = sig * (ZETA - GAMMA) + GAMMA
    h = np.clip(raw, 0.0, 1.0)
    codes = np.floor(w / s) + h + z
    inside = (codes >= q.qmin) & (codes <= q.qmax)
    out = (np.clip(codes, q.qmin, q.qmax) - z) * s
    live = inside & (raw > 0.0) & (raw < 1.0)

    def bw(g):
        return (g * s * live * sig * (1.0 - sig) * (ZETA - GAMMA),)

    return Tensor._result(out, (v,), bw, "soft_round")


def hard_round(w: np.ndarray, v: np.ndarray, q: AffineQuantizer) -> np.ndarray:
    """Frozen rounding: ``h(v) >= 0.5`` rounds up."""
    return round_with_mask(w, rectified_sigmoid(v) >= 0.5, q)


def round_with_mask(w: np.ndarray, up: np.ndarray, q: AffineQuantizer) -> np.ndarray:
    s = _bcast(q.scale, w.ndim, q.channel_axis)
    z = _bcast(q.zero_point, w.ndim, q.channel_axis)
    codes = np.floor(w / s) + up.astype(np.float64) + z
    return (np.clip(codes, q.qmin, q.qmax) - z) * s


def nearest_round_mask(w: np.ndarray, q: AffineQuantizer) -> np.ndarray:
    """Round-up mask reproducing round-half-to-even."""
    s = _bcast(q.scale, w.ndim, q.channel_axis)
    return np.round(w / s) > np.floor(w / s)


def rounding_penalty(v: Tensor, beta: float) -> Tensor:
    """``sum(1 - |2 h(v) - 1|^beta)``."""
    v = T.as_tensor(v)
    sig = T._sigmoid(v.data)
    raw = sig * (ZETA - GAMMA) + GAMMA
    h = np.clip(raw, 0.0, 1.0)
    u = 2.0 * h - 1.0
    au = np.abs(u)
    out = np.asarray(np.sum(1.0 - au**beta))
    live = (raw > 0.0) & (raw < 1.0)

    def bw(g):
        du = -beta * np.where(au > 0, au ** (beta - 1.0), 0.0) * np.sign(u)
        dh = 2.0 * du * live
        return (float(g) * dh * sig * (1.0 - sig) * (ZETA - GAMMA),)

    return Tensor._result(out, (v,), bw, "rounding_penalty")


@dataclass(frozen=True)
class RoundingSchedule:
    warmup: float = 0.4
    weight: float = 0.01
    beta_start: float = 20.0
    beta_end: float = 2.0

    def _check(self, progress: float) -> None:
        if not 0.0 <= progress <= 1.0:
            raise ValueError(f"progress must lie in [0, 1], got {progress}")

    def reg_weight(self, progress: float) -> float:
        self._check(progress)
        return 0.0 if progress < self.warmup else self.weight

    def beta(self, progress: float) -> float:
        self._check(progress)
        if progress < self.warmup or self.warmup >= 1.0:
            return self.beta_start
        t = (progress - self.warmup) / (1.0 - self.warmup)
        return self.beta_end + (self.beta_start - self.beta_end) * max(0.0, 1.0 - t)


def rounding_regularizer(v: Tensor, progress: float, warmup: float = 0.4,
                         schedule: RoundingSchedule | None = None) -> Tensor:
    sched = schedule or RoundingSchedule(warmup=warmup)
    lam = sched.reg_weight(progress)
    if lam == 0.0:
        return Tensor(0.0)
    return T.mul(rounding_penalty(v, sched.beta(progress)), lam)


@dataclass
class RoundingVars:
    v: np.ndarray
    frozen: bool = False
    up: np.ndarray | None = field(default=None, repr=False)

    def soft(self) -> np.ndarray:
        if self.frozen:
            return self.up.astype(np.float64)
        return rectified_sigmoid(self.v)

    def freeze(self) -> None:
        self.up = rectified_sigmoid(self.v) >= 0.5
        self.frozen = True
