"""Quantization state attached to a detector and the contexts that apply it."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .quantizer import AffineQuantizer, fake_quantize, fake_quantize_ste, round_with_mask
from .tensor import Tensor
from .toydet.model import FP, DetectionOutput, ToyDetector


@dataclass
class QuantState:
    """Quantizers keyed by layer (weights) and activation point.

    ``rounding`` holds frozen round-up masks for layers whose rounding
    was learned; other quantized layers round to nearest.
    """

    weight_q: dict[str, AffineQuantizer] = field(default_factory=dict)
    act_q: dict[str, AffineQuantizer] = field(default_factory=dict)
    rounding: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "QuantState":
        return QuantState(dict(self.weight_q), dict(self.act_q), dict(self.rounding))

    def with_acts(self, acts: dict[str, AffineQuantizer]) -> "QuantState":
        st = self.copy()
        st.act_q.update(acts)
        return st

    def quantized_weight(self, layer: str, w: np.ndarray) -> np.ndarray:
        q = self.weight_q[layer]
        if layer in self.rounding:
            return round_with_mask(w, self.rounding[layer], q)
        return fake_quantize(w, q)

    def __bool__(self) -> bool:
        return bool(self.weight_q or self.act_q)


class QuantizedContext:
    """Applies a :class:`QuantState`; layers/points without a quantizer stay FP."""

    def __init__(self, state: QuantState, params: dict[str, np.ndarray] | None = None):
        self.state = state
        self._wcache: dict[str, Tensor] = {}
        self._params = params

    def weight(self, layer: str, w: Tensor) -> Tensor:
        if layer not in self.state.weight_q:
            return w
        hit = self._wcache.get(layer)
        if hit is None:
            hit = Tensor._result(self.state.quantized_weight(layer, w.data), (), None, "qweight")
            self._wcache[layer] = hit
        return hit

    def act(self, point: str, x: Tensor) -> Tensor:
        q = self.state.act_q.get(point)
        return x if q is None else fake_quantize_ste(x, q)


class RecordingContext:
    """Wraps another context and keeps the tensor seen at every activation point (pre-quantization)."""

    def __init__(self, inner=FP):
        self.inner = inner
        self.seen: dict[str, np.ndarray] = {}

    def weight(self, layer: str, w: Tensor) -> Tensor:
        return self.inner.weight(layer, w)

    def act(self, point: str, x: Tensor) -> Tensor:
        self.seen[point] = x.data
        return self.inner.act(point, x)


@dataclass
class QuantizedDetector:
    """A detector together with the quantizers to run it with."""

    model: ToyDetector
    state: QuantState = field(default_factory=QuantState)

    def context(self):
        return QuantizedContext(self.state) if self.state else FP

    def forward(self, images, batch_size: int = 64) -> DetectionOutput:
        return self.model.forward(images, self.context(), batch_size)

    def features(self, images) -> dict[str, Tensor]:
        with T.no_grad():
            return self.model.features(images, self.context())
