"""Independent reference implementations and check suites shared by unit and acceptance tests."""
from __future__ import annotations

import numpy as np

from detptq import tensor as T
from detptq.quantizer import (
    AffineQuantizer,
    fake_quantize_ste,
    lp_objective,
    rounding_penalty,
    soft_round,
)
from detptq.tensor import Tensor

GRAD_CASES = 100
GRAD_TOL = 1e-4


# finite differences ----------------------------------------------------------

def away_from_zero(rng, shape, lo=0.1, hi=2.0):
    return rng.uniform(lo, hi, shape) * rng.choice([-1.0, 1.0], shape)


def numeric_grad(f, arrays, i, h=1e-6):
    x = arrays[i]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        up = f(*arrays)
        x[idx] = old - h
        down = f(*arrays)
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(build, arrays, rng, wrt=None):
    """Max relative error between analytic and central-difference gradients of ``sum(build(...) * R)``."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt
    with T.no_grad():
        shape = build(*[Tensor(a) for a in arrays]).shape
    r = rng.normal(size=shape)

    def f(*arrs):
        with T.no_grad():
            return float(np.sum(build(*[Tensor(a) for a in arrs]).data * r))

    ts = [Tensor(a, requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
    out = build(*ts)
    T.backward(T.sum(T.mul(out, Tensor(r))))
    return max(rel_err(ts[i].grad, numeric_grad(f, arrays, i)) for i in wrt)


def _conv_case(rng):
    stride, padding = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    k = int(rng.choice([1, 3]))
    x = rng.normal(size=(2, 2, 5, 5))
    w = rng.normal(size=(3, 2, k, k))
    b = rng.normal(size=3)
    return (lambda x, w, b: T.conv2d(x, w, b, stride, padding)), [x, w, b]


def _pool_case(rng):
    x = rng.permutation(2 * 2 * 4 * 4).reshape(2, 2, 4, 4) * 0.1 + rng.normal(size=(2, 2, 4, 4)) * 0.01
    k = int(rng.choice([2, 3]))
    return (lambda x: T.max_pool2d(x, k, 1 if k == 3 else 2)), [x]


def _soft_round_case(rng):
    q = AffineQuantizer(rng.uniform(0.05, 0.2, 3), np.zeros(3), 8, True, 0)
    w = rng.normal(scale=0.3, size=(3, 4))
    v = rng.uniform(-2.0, 2.0, (3, 4))
    return (lambda v: soft_round(w, v, q)), [v]


def grad_cases():
    """Op name -> case factory ``rng -> (build, arrays)``."""
    axis = lambda rng: int(rng.integers(0, 2))  # noqa: E731
    return {
        "add": lambda rng: (T.add, [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]),
        "add_scalar": lambda rng: ((lambda a: T.add(a, 1.5)), [rng.normal(size=(3, 4))]),
        "sub": lambda rng: (T.sub, [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]),
        "mul": lambda rng: (T.mul, [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]),
        "mul_scalar": lambda rng: ((lambda a: T.mul(a, -0.7)), [rng.normal(size=(3, 4))]),
        "neg": lambda rng: (T.neg, [rng.normal(size=(3, 4))]),
        "relu": lambda rng: (T.relu, [away_from_zero(rng, (3, 4))]),
        "sigmoid": lambda rng: (T.sigmoid, [rng.normal(scale=3, size=(3, 4))]),
        "exp": lambda rng: (T.exp, [rng.normal(size=(3, 4))]),
        "log": lambda rng: (T.log, [rng.uniform(0.2, 3.0, (3, 4))]),
        "abs_pow": lambda rng: ((lambda a, p=float(rng.uniform(1, 4.5)): T.abs_pow(a, p)),
                                [away_from_zero(rng, (3, 4))]),
        "smooth_l1": lambda rng: ((lambda a: T.smooth_l1(a, 0.5)),
                                  [np.where(rng.random((3, 4)) < 0.5, rng.uniform(-0.4, 0.4, (3, 4)),
                                            away_from_zero(rng, (3, 4), 0.6, 2.0))]),
        "softmax": lambda rng: ((lambda a, ax=axis(rng): T.softmax(a, ax)), [rng.normal(size=(3, 4))]),
        "log_softmax": lambda rng: ((lambda a, ax=axis(rng): T.log_softmax(a, ax)), [rng.normal(size=(3, 4))]),
        "sum": lambda rng: ((lambda a, ax=[None, 0, 1][int(rng.integers(3))]: T.sum(a, ax)), [rng.normal(size=(3, 4))]),
        "mean": lambda rng: ((lambda a, ax=[None, 0, 1][int(rng.integers(3))]: T.mean(a, ax)),
                             [rng.normal(size=(3, 4))]),
        "reshape": lambda rng: ((lambda a: T.reshape(a, (2, 6))), [rng.normal(size=(3, 4))]),
        "transpose": lambda rng: ((lambda a: T.transpose(a, (2, 0, 1))), [rng.normal(size=(2, 3, 4))]),
        "concat": lambda rng: ((lambda a, b, ax=axis(rng): T.concat([a, b], ax)),
                               [rng.normal(size=(2, 3)), rng.normal(size=(2, 3))]),
        "conv2d": _conv_case,
        "max_pool2d": _pool_case,
        "linear": lambda rng: (T.linear, [rng.normal(size=(4, 5)), rng.normal(size=(3, 5)), rng.normal(size=3)]),
        "lp_objective": lambda rng: ((lambda a, b, p=float(rng.uniform(1, 4.5)): lp_objective(a, b, p)),
                                     [rng.normal(size=(2, 6)), rng.normal(size=(2, 6))]),
        "soft_round": _soft_round_case,
        "rounding_penalty": lambda rng: ((lambda v, beta=float(rng.uniform(2, 20)): rounding_penalty(v, beta)),
                                         [rng.uniform(-2.0, 2.0, (3, 4))]),
    }


def gradient_suite(cases: int = GRAD_CASES) -> dict[str, float]:
    """Worst relative error per op over ``cases`` seeded instances."""
    worst = {}
    for name, factory in grad_cases().items():
        err = 0.0
        for seed in range(cases):
            rng = np.random.default_rng(seed)
            build, arrays = factory(rng)
            err = max(err, gradcheck(build, arrays, rng))
        worst[name] = err
    return worst


def ste_reference(x, s, z, n, m, g):
    """Element-by-element straight-through gradients (input and per-tensor scale)."""
    gx = np.zeros_like(x)
    gs = 0.0
    for idx in np.ndindex(x.shape):
        v = x[idx] / s
        c = np.round(v) + z
        if c < n:
            gs += g[idx] * (n - z)
        elif c > m:
            gs += g[idx] * (m - z)
        else:
            gx[idx] = g[idx]
            gs += g[idx] * (np.round(v) - v)
    return gx, gs


def ste_suite(cases: int = 100) -> float:
    """Max abs deviation of the STE backward from the closed-form rule."""
    worst = 0.0
    for seed in range(cases):
        rng = np.random.default_rng(seed)
        bits = int(rng.integers(2, 9))
        signed = bool(rng.integers(2))
        q0 = AffineQuantizer(rng.uniform(0.05, 0.5), 0.0, bits, signed)
        n, m = q0.qmin, q0.qmax
        z = float(rng.integers(n, m + 1))
        q = AffineQuantizer(q0.scale, z, bits, signed)
        x = rng.normal(scale=(m - n) * q.scale[0] * 0.6, size=(4, 5))
        g = rng.normal(size=x.shape)
        xt = Tensor(x, requires_grad=True)
        st = Tensor(q.scale, requires_grad=True)
        out = fake_quantize_ste(xt, q, st)
        T.backward(T.sum(T.mul(out, Tensor(g))))
        gx, gs = ste_reference(x, q.scale[0], z, n, m, g)
        worst = max(worst, float(np.max(np.abs(xt.grad - gx))), abs(float(st.grad[0]) - gs))
    return worst


# geometry -------------------------------------------------------------------

def iou_ref(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def nms_ref(boxes, scores, thr) -> list[int]:
    """Greedy NMS: visit by descending score (stable), keep a box unless it overlaps a kept one by more than ``thr``."""
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    keep = []
    for i in order:
        if all(iou_ref(boxes[i], boxes[j]) <= thr for j in keep):
            keep.append(i)
    return keep


def random_boxes(rng, n, size=64.0):
    xy = rng.uniform(0, size * 0.8, (n, 2))
    wh = rng.uniform(2, size * 0.4, (n, 2))
    return np.concatenate([xy, xy + wh], axis=1)


def nms_suite(nms_fn, trials: int = 1000) -> int:
    """Number of random instances where ``nms_fn`` disagrees with the brute-force reference."""
    bad = 0
    for seed in range(trials):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(0, 51))
        boxes = random_boxes(rng, n)
        scores = np.round(rng.random(n), 2)  # coarse scores produce ties
        thr = float(rng.choice([0.3, 0.5, 0.7]))
        if list(nms_fn(boxes, scores, thr)) != nms_ref(boxes, scores, thr):
            bad += 1
    return bad


# convolution reference ------------------------------------------------------

def conv_loops(x, w, b, stride, padding):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for ni in range(n):
        for oi in range(o):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[ni, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[ni, oi, i, j] = np.sum(patch * w[oi]) + (b[oi] if b is not None else 0.0)
    return out


def maxpool_loops(x, k, stride):
    n, c, h, w = x.shape
    oh, ow = (h - k) // stride + 1, (w - k) // stride + 1
    out = np.zeros((n, c, oh, ow))
    for idx in np.ndindex(n, c, oh, ow):
        ni, ci, i, j = idx
        out[idx] = x[ni, ci, i * stride : i * stride + k, j * stride : j * stride + k].max()
    return out


# grid search reference ------------------------------------------------------

def exhaustive_scale(x, bits, signed, p, channel_axis=None, symmetric=False, points=100):
    """Brute-force 100-point sweep per channel; ties go to the larger scale."""
    n, m = (-(2 ** (bits - 1)), 2 ** (bits - 1) - 1) if signed else (0, 2**bits - 1)
    xs = x.reshape(1, -1) if channel_axis is None else np.moveaxis(x, channel_axis, 0).reshape(x.shape[channel_axis], -1)
    chosen = []
    for row in xs:
        lo, hi = row.min(), row.max()
        if symmetric:
            a = max(abs(lo), abs(hi))
            lo, hi = -a, a
        smax = (hi - lo) / (m - n) if hi > lo else 1e-8
        best, best_loss = None, np.inf
        for ratio in np.linspace(0.01, 1.0, points):
            s = ratio * smax
            z = 0.0 if symmetric else min(max(np.round(n - row.min() / s), n), m)
            xq = (np.clip(np.round(row / s) + z, n, m) - z) * s
            loss = float(np.sum(np.abs(row - xq) ** p))
            if loss <= best_loss:
                best, best_loss = s, loss
        chosen.append(best)
    return np.array(chosen)


# mAP staircases ------------------------------------------------------------------

def _box(x, y, w=10.0, h=10.0):
    return [x, y, x + w, y + h]


def map_scenarios():
    """Crafted scenarios with hand-computed 101-point interpolated AP.

    Each entry: (name, detections per image [(boxes, scores, labels)],
    ground truth per image [(boxes, labels)], num_classes, iou thresholds, expected mAP).
    """
    g = _box(10, 10)
    g2 = _box(40, 40)
    shifted = _box(12, 12)  # IoU 64/136 with g
    far = _box(30, 10)  # no overlap
    return [
        # TP, FP, TP over 2 GTs: precision 1 up to recall 1/2, then 2/3
        ("tp_fp_tp", [([g, far, g2], [0.9, 0.8, 0.7], [0, 0, 0])], [([g, g2], [0, 0])], 1, (0.5,),
         (51 + 50 * 2 / 3) / 101),
        ("perfect", [([g, g2], [0.9, 0.8], [0, 0])], [([g, g2], [0, 0])], 1, (0.5,), 1.0),
        ("all_false", [([far], [0.9], [0])], [([g], [0])], 1, (0.5,), 0.0),
        # class 0 perfect, class 1 finds one of two GTs: 51 of 101 recall points
        ("two_class_half", [([g, g2], [0.9, 0.9], [0, 1])], [([g, g2, far], [0, 1, 1])], 2, (0.5,),
         (1.0 + 51 / 101) / 2),
        # duplicate on the same GT is a false positive after the match
        ("duplicate", [([g, g], [0.9, 0.8], [0, 0])], [([g], [0])], 1, (0.5,), 1.0),
        # FP ranked above the only TP: precision 1/2 at full recall
        ("fp_first", [([far, g], [0.9, 0.8], [0, 0])], [([g], [0])], 1, (0.5,), 0.5),
        # detections of a class without GT do not enter the mean
        ("class_without_gt", [([g, far], [0.9, 0.95], [0, 2])], [([g], [0])], 3, (0.5,), 1.0),
        # IoU 0.47 fails 0.5 but passes 0.3
        ("threshold_mean", [([shifted], [0.9], [0])], [([g], [0])], 1, (0.3, 0.5), 0.5),
        # two images; ranking interleaves TP (img0), FP (img1), TP (img1)
        ("two_images", [([g], [0.9], [0]), ([far, g2], [0.8, 0.7], [0, 0])],
         [([g], [0]), ([g2], [0])], 1, (0.5,), (51 + 50 * 2 / 3) / 101),
    ]
