"""A small anchor-based single-stage detector built on :mod:`detptq.tensor`."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Protocol

import numpy as np

from .. import tensor as T
from ..tensor import Tensor
from .boxes import decode_boxes, generate_anchors, nms
from .metrics import Detections

BACKGROUND_PRIOR = 0.01


@dataclass
class ToyDetectorConfig:
    image_size: int = 64
    in_channels: int = 3
    stem_channels: int = 16
    stage_channels: tuple[int, ...] = (32, 64)
    blocks_per_stage: int = 2
    neck_channels: int = 32
    head_channels: int = 32
    strides: tuple[int, ...] = (8, 16)
    anchor_scales: tuple[float, ...] = (1.0, 2 ** (1 / 3), 2 ** (2 / 3))
    anchor_base: float = 2.0
    num_classes: int = 3

    def __post_init__(self):
        self.stage_channels = tuple(self.stage_channels)
        self.strides = tuple(self.strides)
        self.anchor_scales = tuple(self.anchor_scales)
        if len(self.strides) < 2:
            raise ValueError("need at least two detection levels")
        if len(self.strides) != len(self.stage_channels):
            raise ValueError("one detection level per backbone stage")
        for s in self.strides:
            if self.image_size % s:
                raise ValueError(f"stride {s} does not divide image size {self.image_size}")
        # stem reduces by 4, every stage halves
        expected = tuple(4 * 2 ** (i + 1) for i in range(len(self.stage_channels)))
        if self.strides != expected:
            raise ValueError(f"strides {self.strides} do not match the backbone ({expected})")

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_scales)

    @property
    def anchor_sizes(self) -> list[list[float]]:
        return [[self.anchor_base * s * k for k in self.anchor_scales] for s in self.strides]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ToyDetectorConfig":
        return cls(**d)


@dataclass(frozen=True)
class ConvSpec:
    name: str
    cin: int
    cout: int
    k: int
    stride: int = 1

    @property
    def padding(self) -> int:
        return self.k // 2


@dataclass(frozen=True)
class Block:
    """A quantization unit: one tensor in, one tensor out."""

    name: str
    kind: str  # "stem" | "residual" | "neck"
    source: str  # "image" or the name of the producing block
    convs: tuple[ConvSpec, ...]
    act_points: tuple[str, ...]

    @property
    def layers(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.convs)


class QuantContext(Protocol):
    def weight(self, layer: str, w: Tensor) -> Tensor: ...

    def act(self, point: str, x: Tensor) -> Tensor: ...


class FPContext:
    """Full precision: both hooks are identities."""

    def weight(self, layer: str, w: Tensor) -> Tensor:
        return w

    def act(self, point: str, x: Tensor) -> Tensor:
        return x


FP = FPContext()


@dataclass
class DetectionOutput:
    """Raw head outputs flattened level-major, then row, col, anchor."""

    cls_logits: np.ndarray  # (B, N, K+1), background last
    box_offsets: np.ndarray  # (B, N, 4)
    anchors: np.ndarray  # (N, 4)
    level_sizes: tuple[int, ...]
    image_size: int
    _probs: np.ndarray | None = field(default=None, repr=False)
    _boxes: np.ndarray | None = field(default=None, repr=False)

    @property
    def num_anchors(self) -> int:
        return self.anchors.shape[0]

    @property
    def probs(self) -> np.ndarray:
        if self._probs is None:
            z = self.cls_logits - self.cls_logits.max(axis=-1, keepdims=True)
            e = np.exp(z)
            self._probs = e / e.sum(axis=-1, keepdims=True)
        return self._probs

    @property
    def boxes(self) -> np.ndarray:
        if self._boxes is None:
            self._boxes = decode_boxes(self.box_offsets, self.anchors[None], self.image_size)
        return self._boxes

    def select(self, idx) -> "DetectionOutput":
        return DetectionOutput(self.cls_logits[idx], self.box_offsets[idx], self.anchors, self.level_sizes,
                               self.image_size)

    @staticmethod
    def stack(parts: list["DetectionOutput"]) -> "DetectionOutput":
        p0 = parts[0]
        return DetectionOutput(np.concatenate([p.cls_logits for p in parts]),
                               np.concatenate([p.box_offsets for p in parts]),
                               p0.anchors, p0.level_sizes, p0.image_size)


class ToyDetector:
    """Stem, residual stages, per-level neck convs and a shared head.

    ``params`` maps ``"<layer>.weight"`` / ``"<layer>.bias"`` to float64
    arrays. Head layers are never part of a :class:`Block`.
    """

    def __init__(self, config: ToyDetectorConfig | None = None, params: dict[str, np.ndarray] | None = None,
                 seed: int = 0):
        self.config = config or ToyDetectorConfig()
        self.blocks = self._build_blocks()
        self.head_convs = self._head_specs()
        levels = generate_anchors(self.config.image_size, self.config.strides, self.config.anchor_sizes)
        self.level_sizes = tuple(len(a) for a in levels)
        self.anchors = np.concatenate(levels)
        self.params = params if params is not None else self.init_params(seed)

    # structure ------------------------------------------------------------

    def _build_blocks(self) -> list[Block]:
        cfg = self.config
        blocks = [Block("stem", "stem", "image", (ConvSpec("stem.conv", cfg.in_channels, cfg.stem_channels, 3, 2),),
                        ("stem.act",))]
        cin, prev = cfg.stem_channels, "stem"
        stage_outputs = []
        for si, cout in enumerate(cfg.stage_channels, start=1):
            for bi in range(1, cfg.blocks_per_stage + 1):
                name = f"s{si}.b{bi}"
                stride = 2 if bi == 1 else 1
                convs = [ConvSpec(f"{name}.conv1", cin, cout, 3, stride), ConvSpec(f"{name}.conv2", cout, cout, 3)]
                if stride != 1 or cin != cout:
                    convs.append(ConvSpec(f"{name}.down", cin, cout, 1, stride))
                blocks.append(Block(name, "residual", prev, tuple(convs), (f"{name}.act1", f"{name}.act2")))
                cin, prev = cout, name
            stage_outputs.append((prev, cout))
        for li, (src, ch) in enumerate(stage_outputs):
            name = f"neck.l{li}"
            blocks.append(Block(name, "neck", src, (ConvSpec(f"{name}.conv", ch, cfg.neck_channels, 3),),
                                (f"{name}.act",)))
        return blocks

    def _head_specs(self) -> list[ConvSpec]:
        cfg = self.config
        a = cfg.num_anchors
        return [
            ConvSpec("head.cls_conv", cfg.neck_channels, cfg.head_channels, 3),
            ConvSpec("head.cls", cfg.head_channels, a * (cfg.num_classes + 1), 3),
            ConvSpec("head.box_conv", cfg.neck_channels, cfg.head_channels, 3),
            ConvSpec("head.box", cfg.head_channels, a * 4, 3),
        ]

    @property
    def neck_blocks(self) -> list[Block]:
        return [b for b in self.blocks if b.kind == "neck"]

    def block(self, name: str) -> Block:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(f"unknown block {name!r}")

    def conv_specs(self) -> list[ConvSpec]:
        return [c for b in self.blocks for c in b.convs] + list(self.head_convs)

    @property
    def act_points(self) -> list[str]:
        return [p for b in self.blocks for p in b.act_points]

    def init_params(self, seed: int) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(seed)
        params = {}
        for c in self.conv_specs():
            fan_in = c.cin * c.k * c.k
            std = np.sqrt(2.0 / fan_in)
            if c.name in ("head.cls", "head.box"):
                std = 0.01
            params[f"{c.name}.weight"] = rng.normal(0.0, std, (c.cout, c.cin, c.k, c.k))
            params[f"{c.name}.bias"] = np.zeros(c.cout)
        k = self.config.num_classes
        bg = np.log(k * (1 - BACKGROUND_PRIOR) / BACKGROUND_PRIOR)
        b = params["head.cls.bias"].reshape(self.config.num_anchors, k + 1)
        b[:, k] = bg
        # float32-representable so a saved model reloads bit-exactly
        return {k_: v.astype(np.float32).astype(np.float64) for k_, v in params.items()}

    def copy(self) -> "ToyDetector":
        return ToyDetector(self.config, {k: v.copy() for k, v in self.params.items()})

    # forward --------------------------------------------------------------

    def _conv(self, spec: ConvSpec, x: Tensor, ctx: QuantContext, tparams: dict | None) -> Tensor:
        src = tparams if tparams is not None else self.params
        w = T.as_tensor(src[f"{spec.name}.weight"])
        b = T.as_tensor(src[f"{spec.name}.bias"])
        return T.conv2d(x, ctx.weight(spec.name, w), b, spec.stride, spec.padding)

    def run_block(self, block: Block, x: Tensor, ctx: QuantContext = FP, tparams: dict | None = None) -> Tensor:
        """Forward one block; ``tparams`` may supply trainable tensors for its layers."""
        conv = {c.name.rsplit(".", 1)[1]: c for c in block.convs}
        if block.kind == "stem":
            y = T.relu(self._conv(conv["conv"], x, ctx, tparams))
            y = T.max_pool2d(y, 2, 2)
            return ctx.act(block.act_points[0], y)
        if block.kind == "residual":
            y = T.relu(self._conv(conv["conv1"], x, ctx, tparams))
            y = ctx.act(block.act_points[0], y)
            y = self._conv(conv["conv2"], y, ctx, tparams)
            short = self._conv(conv["down"], x, ctx, tparams) if "down" in conv else x
            y = T.relu(T.add(y, short))
            return ctx.act(block.act_points[1], y)
        if block.kind == "neck":
            y = T.relu(self._conv(conv["conv"], x, ctx, tparams))
            return ctx.act(block.act_points[0], y)
        raise ValueError(f"unknown block kind {block.kind!r}")

    def _check_images(self, images) -> Tensor:
        x = T.as_tensor(images)
        cfg = self.config
        want = (cfg.in_channels, cfg.image_size, cfg.image_size)
        if x.ndim != 4 or tuple(x.shape[1:]) != want:
            raise T.ShapeError(f"images must be (B, {want[0]}, {want[1]}, {want[2]}), got {x.shape}")
        return x

    def features(self, images, ctx: QuantContext = FP, tparams: dict | None = None) -> dict[str, Tensor]:
        """All block outputs keyed by block name (plus ``"image"``)."""
        outs = {"image": self._check_images(images)}
        for b in self.blocks:
            outs[b.name] = self.run_block(b, outs[b.source], ctx, tparams)
        return outs

    def run_from(self, outs: dict[str, Tensor], start: int, ctx: QuantContext = FP) -> dict[str, Tensor]:
        """Recompute blocks ``start..`` reusing cached outputs of earlier blocks."""
        outs = dict(outs)
        for b in self.blocks[start:]:
            outs[b.name] = self.run_block(b, outs[b.source], ctx)
        return outs

    def head(self, outs: dict[str, Tensor], tparams: dict | None = None) -> tuple[Tensor, Tensor]:
        """Flattened ``(cls_logits (B, N, K+1), box_offsets (B, N, 4))``; always full precision."""
        cfg = self.config
        k1 = cfg.num_classes + 1
        specs = {c.name: c for c in self.head_convs}
        cls_parts, box_parts = [], []
        for nb in self.neck_blocks:
            f = outs[nb.name]
            c = T.relu(self._conv(specs["head.cls_conv"], f, FP, tparams))
            c = self._conv(specs["head.cls"], c, FP, tparams)
            r = T.relu(self._conv(specs["head.box_conv"], f, FP, tparams))
            r = self._conv(specs["head.box"], r, FP, tparams)
            bsz, _, h, w = c.shape
            cls_parts.append(T.reshape(T.transpose(c, (0, 2, 3, 1)), (bsz, h * w * cfg.num_anchors, k1)))
            box_parts.append(T.reshape(T.transpose(r, (0, 2, 3, 1)), (bsz, h * w * cfg.num_anchors, 4)))
        return T.concat(cls_parts, axis=1), T.concat(box_parts, axis=1)

    def output_from(self, outs: dict[str, Tensor]) -> DetectionOutput:
        with T.no_grad():
            cls, box = self.head(outs)
        return DetectionOutput(cls.data, box.data, self.anchors, self.level_sizes, self.config.image_size)

    def forward(self, images, ctx: QuantContext = FP, batch_size: int = 64) -> DetectionOutput:
        images = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float64)
        parts = []
        with T.no_grad():
            for i in range(0, len(images), batch_size):
                parts.append(self.output_from(self.features(images[i : i + batch_size], ctx)))
        return DetectionOutput.stack(parts)


def postprocess(out: DetectionOutput, score_threshold: float = 0.05, nms_threshold: float = 0.5,
                max_per_image: int = 100) -> list[Detections]:
    """Per-class threshold + NMS, then keep the ``max_per_image`` best."""
    probs, boxes = out.probs, out.boxes
    k = probs.shape[-1] - 1
    results = []
    for i in range(probs.shape[0]):
        bx, sc, lb = [], [], []
        for c in range(k):
            sel = np.nonzero(probs[i, :, c] >= score_threshold)[0]
            if len(sel) == 0:
                continue
            keep = sel[nms(boxes[i, sel], probs[i, sel, c], nms_threshold)]
            bx.append(boxes[i, keep])
            sc.append(probs[i, keep, c])
            lb.append(np.full(len(keep), c, dtype=np.int64))
        if not sc:
            results.append(Detections.empty())
            continue
        bx, sc, lb = np.concatenate(bx), np.concatenate(sc), np.concatenate(lb)
        order = np.argsort(-sc, kind="stable")[:max_per_image]
        results.append(Detections(bx[order], sc[order], lb[order]))
    return results
