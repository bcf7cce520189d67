import numpy as np
import pytest

from detptq import tensor as T
from detptq.optim import Adam, AdamState, adam_step
from detptq.tensor import NonFiniteError, ShapeError, Tensor

from oracles import GRAD_TOL, conv_loops, grad_cases, gradcheck, maxpool_loops


@pytest.mark.parametrize("op", sorted(grad_cases()))
def test_gradcheck(op):
    factory = grad_cases()[op]
    for seed in range(20):
        rng = np.random.default_rng(seed)
        build, arrays = factory(rng)
        assert gradcheck(build, arrays, rng) < GRAD_TOL


@pytest.mark.parametrize("stride,padding,k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 1), (1, 2, 5)])
def test_conv2d_matches_loops(stride, padding, k):
    rng = np.random.default_rng(stride * 10 + padding)
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, k, k))
    b = rng.normal(size=4)
    out = T.conv2d(x, w, b, stride, padding).data
    np.testing.assert_allclose(out, conv_loops(x, w, b, stride, padding), atol=1e-12)


def test_conv2d_spec_example():
    x = np.zeros((1, 1, 5, 5))
    x[0, 0, 2, 2] = 1.0
    w = np.arange(9, dtype=float).reshape(1, 1, 3, 3)
    out = T.conv2d(x, w, None, 1, 1).data[0, 0]
    # a unit impulse reproduces the flipped kernel around the centre
    np.testing.assert_array_equal(out[1:4, 1:4], w[0, 0, ::-1, ::-1])


def test_conv2d_shape_errors():
    with pytest.raises(ShapeError):
        T.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((3, 1, 3, 3)))
    with pytest.raises(ShapeError):
        T.conv2d(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 3)))
    with pytest.raises(ShapeError):
        T.conv2d(np.zeros((1, 1, 4, 4)), np.zeros((2, 1, 3, 3)), np.zeros(3))


def test_max_pool_matches_loops_and_routes_ties_to_first():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 6, 6))
    np.testing.assert_array_equal(T.max_pool2d(x, 2, 2).data, maxpool_loops(x, 2, 2))
    t = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    T.backward(T.sum(T.max_pool2d(t, 2)))
    np.testing.assert_array_equal(t.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_broadcast_is_limited():
    with pytest.raises(ShapeError, match="broadcast mismatch"):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(3)))
    assert T.add(Tensor(np.ones(3)), 2.0).data.tolist() == [3.0, 3.0, 3.0]


def test_log_rejects_nonpositive():
    with pytest.raises(ValueError):
        T.log(Tensor([0.0]))


def test_nonfinite_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    T.set_debug(True)
    try:
        with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
            T.exp(Tensor([1000.0]))
    finally:
        T.set_debug(False)


def test_backward_requires_scalar_and_accumulates_shared_use():
    a = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        T.backward(T.mul(a, 2.0))
    T.backward(T.sum(T.add(T.mul(a, a), a)))
    np.testing.assert_array_equal(a.grad, [3.0, 5.0])


def test_unreached_param_gets_zero_grad():
    a = Tensor([1.0], requires_grad=True)
    b = Tensor([2.0, 3.0], requires_grad=True)
    b.grad = None
    T.backward(T.sum(a), params=[a, b])
    np.testing.assert_array_equal(b.grad, [0.0, 0.0])


def test_no_grad_builds_no_graph():
    a = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        out = T.mul(a, 3.0)
    assert not out.requires_grad and out.is_leaf
    assert T.is_grad_enabled()


def test_deep_chain_does_not_recurse():
    a = Tensor([1.0], requires_grad=True)
    x = a
    for _ in range(5000):
        x = T.add(x, 0.0)
    T.backward(T.sum(x))
    assert a.grad[0] == 1.0


def test_adam_matches_closed_form_first_step():
    st = AdamState.for_params([np.zeros(2)], lr=0.1)
    (p,) = adam_step([np.zeros(2)], [np.array([2.0, -0.5])], st)
    # bias-corrected first step moves every coordinate by lr against the gradient sign
    np.testing.assert_allclose(p, [-0.1, 0.1], rtol=1e-6)


def test_adam_minimizes_quadratic_with_projection():
    x = Tensor([3.0, -2.0], requires_grad=True)
    opt = Adam([x], lr=0.05, project=lambda a: np.maximum(a, 0.5))
    for _ in range(500):
        opt.zero_grad()
        T.backward(T.sum(T.mul(x, x)))
        opt.step()
    np.testing.assert_allclose(x.data, [0.5, 0.5], atol=1e-6)


def test_spec_forward_examples():
    assert T.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1)).data.item() == 9.0
    out = T.conv2d(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), np.full((1, 1, 1, 1), 2.0), np.ones(1)).data
    np.testing.assert_array_equal(out[0, 0], [[3.0, 5.0], [7.0, 9.0]])
    assert T.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    assert T.softmax(Tensor([0.0, 0.0])).data.tolist() == [0.5, 0.5]
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 1, 4, 4))
    np.testing.assert_array_equal(T.max_pool2d(x, 2, 2).data, maxpool_loops(x, 2, 2))


def test_spec_gradient_examples():
    x = Tensor([1.0, -2.0], requires_grad=True)
    T.backward(T.sum(T.mul(x, x)))
    assert x.grad.tolist() == [2.0, -4.0]
    x = Tensor([-1.0, 3.0], requires_grad=True)
    T.backward(T.sum(T.relu(x)))
    assert x.grad.tolist() == [0.0, 1.0]


def test_spec_adam_examples():
    st = AdamState.for_params([np.array([1.5])], lr=0.1)
    assert adam_step([np.array([1.5])], [np.zeros(1)], st)[0][0] == 1.5
    st = AdamState.for_params([np.zeros(1)], lr=0.1)
    assert abs(adam_step([np.zeros(1)], [np.ones(1)], st)[0][0] + 0.1) < 1e-6
    p = Tensor([0.0], requires_grad=True)
    opt = Adam([p], lr=0.1)
    for _ in range(100):
        opt.zero_grad()
        d = T.add(p, -3.0)
        T.backward(T.sum(T.mul(d, d)))
        opt.step()
    assert abs(p.data[0] - 3.0) < 0.5


def test_detector_loss_gradient_matches_finite_differences():
    from detptq.synthdata import SceneSpec, generate_dataset
    from detptq.toydet import ToyDetector, ToyDetectorConfig
    from detptq.train import assign_targets, detection_loss

    cfg = ToyDetectorConfig(image_size=32, stem_channels=4, stage_channels=(4, 4), blocks_per_stage=1,
                            neck_channels=4, head_channels=4)
    model = ToyDetector(cfg, seed=0)
    ds = generate_dataset(SceneSpec(canvas=32, size_range=(8, 20)), 2, seed=0)
    tgt = assign_targets(model.anchors, ds.annotations, cfg.num_classes)
    x = ds.inputs()
    rng = np.random.default_rng(0)

    def loss_at(params):
        with T.no_grad():
            return detection_loss(model, x, tgt, {k: Tensor(v) for k, v in params.items()}).item()

    tp = {k: Tensor(v, requires_grad=True) for k, v in model.params.items()}
    T.backward(detection_loss(model, x, tgt, tp))
    h = 1e-5
    for name in ("stem.conv.weight", "s2.b1.conv2.weight", "neck.l1.conv.bias", "head.cls.weight", "head.box.bias"):
        flat = [np.unravel_index(i, tp[name].shape) for i in rng.choice(tp[name].size, 4, replace=False)]
        for idx in flat:
            params = {k: v.copy() for k, v in model.params.items()}
            params[name][idx] += h
            up = loss_at(params)
            params[name][idx] -= 2 * h
            down = loss_at(params)
            num = (up - down) / (2 * h)
            ana = tp[name].grad[idx]
            assert abs(num - ana) <= 1e-4 * max(abs(num) + abs(ana), 1e-6), (name, idx, num, ana)
