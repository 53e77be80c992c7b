import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rhythmhead import numeric as nm
from rhythmhead.numeric import functional as F
from rhythmhead.numeric import layers as L
from rhythmhead.numeric import tensor as T
from rhythmhead.numeric.checkpoint import CheckpointError, dumps, loads


def conv2d_loops(x, w, b, stride, pad):
    """Direct nested-loop cross-correlation, the oracle for conv2d."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = b[oi]
                    for ci in range(c):
                        for a in range(kh):
                            for bb in range(kw):
                                acc += xp[ni, ci, i * stride + a, j * stride + bb] * w[oi, ci, a, bb]
                    out[ni, oi, i, j] = acc
    return out


def conv_transpose_loops(x, w, b, stride, pad):
    n, cin, h, wd = x.shape
    _, cout, kh, kw = w.shape
    full = np.zeros((n, cout, (h - 1) * stride + kh, (wd - 1) * stride + kw))
    for ni in range(n):
        for ci in range(cin):
            for i in range(h):
                for j in range(wd):
                    full[ni, :, i * stride : i * stride + kh, j * stride : j * stride + kw] += x[ni, ci, i, j] * w[ci]
    out = full[:, :, pad : full.shape[2] - pad, pad : full.shape[3] - pad]
    return out + b[None, :, None, None]


# -- forward examples -------------------------------------------------------


def test_linear_identity():
    layer = nm.LayerParams("linear", nm.Tensor(np.eye(3)), nm.Tensor(np.zeros(3)))
    out = nm.forward(layer, nm.Tensor([[1.0, 2.0, 3.0]]))
    np.testing.assert_array_equal(out.data, [[1.0, 2.0, 3.0]])


def test_conv_1x1_doubles():
    layer = nm.LayerParams("conv2d", nm.Tensor(np.full((1, 1, 1, 1), 2.0)), nm.Tensor(np.zeros(1)))
    out = nm.forward(layer, nm.Tensor(np.ones((1, 1, 4, 4))))
    np.testing.assert_array_equal(out.data, np.full((1, 1, 4, 4), 2.0))


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0), (2, 0)])
def test_conv2d_matches_nested_loops(stride, pad):
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 8, 8))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    got = F.conv2d(nm.Tensor(x), nm.Tensor(w), nm.Tensor(b), stride, pad).data
    np.testing.assert_allclose(got, conv2d_loops(x, w, b, stride, pad), atol=1e-5)
    with nm.precision(np.float64):
        got64 = F.conv2d(nm.Tensor(x), nm.Tensor(w), nm.Tensor(b), stride, pad).data
    np.testing.assert_allclose(got64, conv2d_loops(x, w, b, stride, pad), atol=1e-6)


def test_per_sample_conv_matches_loops():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 2, 6, 6))
    w = rng.normal(size=(2, 3, 2, 3, 3))
    got = F.conv2d(nm.Tensor(x), nm.Tensor(w), None, 1, 1).data
    for n in range(2):
        ref = conv2d_loops(x[n : n + 1], w[n], np.zeros(3), 1, 1)
        np.testing.assert_allclose(got[n : n + 1], ref, atol=1e-5)


def test_conv_transpose_matches_loops():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 3, 5, 5))
    w = rng.normal(size=(3, 2, 4, 4))
    b = rng.normal(size=2)
    got = F.conv_transpose2d(nm.Tensor(x), nm.Tensor(w), nm.Tensor(b), 2, 1).data
    assert got.shape == (1, 2, 10, 10)
    np.testing.assert_allclose(got, conv_transpose_loops(x, w, b, 2, 1), atol=1e-5)


def test_shape_mismatch_names_both_shapes():
    layer = L.linear(np.random.default_rng(0), 3, 2)
    with pytest.raises(ValueError, match=r"\(1, 4\).*\(2, 3\)"):
        nm.forward(layer, nm.Tensor(np.ones((1, 4))))
    conv = L.conv2d(np.random.default_rng(0), 3, 2)
    with pytest.raises(ValueError, match="channel mismatch"):
        nm.forward(conv, nm.Tensor(np.ones((1, 2, 5, 5))))


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        nm.LayerParams("conv3d", nm.Tensor(np.ones((1, 1, 1, 1, 1))))


def test_non_finite_is_an_error():
    with pytest.raises(nm.NonFiniteError):
        nm.Tensor([1.0, np.nan])
    with pytest.raises(nm.NonFiniteError):
        T.log(nm.Tensor([0.0]))


# -- backward -----------------------------------------------------------------


def test_sum_of_squares_grad():
    x = nm.Tensor([1.0, -2.0, 3.0], requires_grad=True)
    nm.backward((x * x).sum())
    np.testing.assert_array_equal(x.grad, [2.0, -4.0, 6.0])


def test_tanh_grad_at_zero():
    x = nm.Tensor([0.0], requires_grad=True)
    nm.backward(T.tanh(x).sum())
    assert x.grad[0] == 1.0


def test_backward_twice_raises():
    x = nm.Tensor([1.0, 2.0], requires_grad=True)
    y = (x * x).sum()
    nm.backward(y)
    with pytest.raises(nm.GraphError):
        nm.backward(y)


def test_seed_shape_checked():
    x = nm.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(nm.GraphError):
        nm.backward(x * 2.0, np.ones(3))


def test_fd_check_linear_function():
    assert nm.finite_difference_check(lambda x: x.sum(), nm.Tensor(np.arange(5.0))) < 1e-10


def test_fd_check_sigmoid_at_zero():
    with nm.precision(np.float64):
        x = nm.Tensor(np.zeros(4), requires_grad=True)
        nm.backward(T.sigmoid(x).sum())
        np.testing.assert_allclose(x.grad, 0.25)
        assert nm.finite_difference_check(lambda t: T.sigmoid(t).sum(), nm.Tensor(np.zeros(4))) < 1e-6


def test_fd_check_rejects_nonfinite():
    with pytest.raises(FloatingPointError):
        T._CHECK_FINITE = False
        try:
            nm.finite_difference_check(lambda t: T.log(t).sum(), nm.Tensor([-1.0]))
        finally:
            T._CHECK_FINITE = True


def test_fd_sum_exact_in_float64():
    with nm.precision(np.float64):
        err = nm.finite_difference_check(lambda x: x.sum(), nm.Tensor(np.random.default_rng(0).normal(size=6)))
    assert err < 1e-10


def _two_layer_net(rng):
    c1 = L.conv2d(rng, 2, 3, 3, stride=1)
    c2 = L.conv2d(rng, 3, 2, 3, stride=2)
    return c1, c2


@pytest.mark.parametrize("seed", range(10))
def test_two_layer_conv_net_grads(seed):
    rng = np.random.default_rng(seed)
    with nm.precision(np.float64):
        c1, c2 = _two_layer_net(rng)
        x = nm.Tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True)
        wsum = nm.Tensor(rng.normal(size=(1, 2, 3, 3)))

        def fn():
            return (nm.forward(c2, T.leaky_relu(nm.forward(c1, x))) * wsum).sum()

        errs = nm.gradient_errors(fn, [x, *c1.parameters(), *c2.parameters()], epsilon=1e-3)
    assert max(errs) < 1e-4


OP_CASES = {
    "add": (lambda a, b: T.add(a, b), [(3, 4), (4,)]),
    "sub": (lambda a, b: T.sub(a, b), [(3, 4), (3, 1)]),
    "mul": (lambda a, b: T.mul(a, b), [(3, 4), (1, 4)]),
    "div": (lambda a, b: T.div(a, T.exp(b)), [(3, 4), (3, 4)]),
    "matmul": (lambda a, b: T.matmul(a, b), [(3, 4), (4, 2)]),
    "batched_matmul": (lambda a, b: T.matmul(a, b), [(2, 3, 4), (2, 4, 2)]),
    "exp": (lambda a: T.exp(a), [(5,)]),
    "log": (lambda a: T.log(T.exp(a) + 1.0), [(5,)]),
    "tanh": (lambda a: T.tanh(a), [(5,)]),
    "sigmoid": (lambda a: T.sigmoid(a), [(5,)]),
    "leaky_relu": (lambda a: T.leaky_relu(a), [(5,)]),
    "sqrt": (lambda a: T.sqrt(T.square(a) + 1.0), [(5,)]),
    "power": (lambda a: T.power(T.exp(a), 1.5), [(5,)]),
    "softmax": (lambda a: T.softmax(a, axis=1), [(3, 4)]),
    "sum_axis": (lambda a: T.tsum(a, axis=1), [(3, 4)]),
    "mean": (lambda a: T.mean(a, axis=0, keepdims=True), [(3, 4)]),
    "reshape_transpose": (lambda a: T.transpose(T.reshape(a, (4, 3)), (1, 0)), [(3, 4)]),
    "getitem": (lambda a: a[1:, ::2], [(3, 4)]),
    "fancy_index": (lambda a: a[np.array([0, 2, 2])], [(3, 4)]),
    "concat": (lambda a, b: T.concat([a, b], axis=1), [(2, 3), (2, 2)]),
    "stack": (lambda a, b: T.stack([a, b], axis=0), [(2, 3), (2, 3)]),
    "sort": (lambda a: T.sort(a, axis=0), [(5, 3)]),
    "conv1d": (lambda a, w: F.conv1d(a, w, None, 2, 1), [(1, 2, 9), (3, 2, 3)]),
    "conv2d": (lambda a, w: F.conv2d(a, w, None, 2, 1), [(1, 2, 6, 6), (3, 2, 3, 3)]),
    "conv2d_per_sample": (lambda a, w: F.conv2d(a, w, None, 1, 1), [(2, 2, 4, 4), (2, 3, 2, 3, 3)]),
    "conv_transpose2d": (lambda a, w: F.conv_transpose2d(a, w, None, 2, 1), [(1, 2, 3, 3), (2, 3, 4, 4)]),
    "avg_pool2d": (lambda a: F.avg_pool2d(a, 2), [(1, 2, 4, 4)]),
    "instance_norm": (lambda a: F.instance_norm(a), [(2, 3, 4, 4)]),
    "layer_norm": (lambda a, w: F.layer_norm(a, w, None), [(3, 5), (5,)]),
    "upsample": (lambda a: F.upsample_nearest(a, 2), [(1, 2, 3, 3)]),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
@pytest.mark.parametrize("seed", range(10))
def test_every_op_passes_fd_check(name, seed):
    fn, shapes = OP_CASES[name]
    rng = np.random.default_rng(seed)
    with nm.precision(np.float64):
        args = [nm.Tensor(rng.normal(size=s), requires_grad=True) for s in shapes]
        out_shape = fn(*args).shape
        weights = nm.Tensor(rng.normal(size=out_shape))
        errs = nm.gradient_errors(lambda: (fn(*args) * weights).sum(), args, epsilon=1e-6)
    assert max(errs) < 1e-4, errs


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=st.floats(-50, 50)))
def test_softmax_is_a_distribution(x):
    y = T.softmax(nm.Tensor(x), axis=1).data
    assert (y >= 0).all()
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)


def test_wide_reductions_accumulate_in_float64():
    x = nm.Tensor(np.full(100_000, 0.1, dtype=np.float32))
    assert abs(x.sum().item() - 10_000.0) < 1e-3


# -- Adam ---------------------------------------------------------------------


def test_adam_first_step_moves_by_lr():
    p = nm.Tensor([1.0], requires_grad=True)
    p.grad = np.array([1.0], dtype=np.float32)
    nm.adam_step([p], lr=0.1, beta1=0.5, beta2=0.999)
    assert abs(p.data[0] - 0.9) < 1e-6


def test_adam_zero_grad_is_noop():
    p = nm.Tensor([1.5], requires_grad=True)
    p.grad = np.zeros(1, dtype=np.float32)
    nm.adam_step([p])
    assert p.data[0] == 1.5


def test_adam_missing_grad_raises():
    with pytest.raises(ValueError):
        nm.adam_step([nm.Tensor([1.0], requires_grad=True)])


def test_adam_converges_on_parabola():
    x = nm.Tensor([1.0], requires_grad=True)
    for _ in range(100):
        x.grad = None
        nm.backward((x * x).sum())
        nm.adam_step([x], lr=0.1, beta1=0.5, beta2=0.999)
    assert abs(x.data[0]) < 0.05


def test_adam_moments_persist():
    p = nm.Tensor([0.0], requires_grad=True)
    p.grad = np.ones(1, dtype=np.float32)
    nm.adam_step([p], lr=0.1)
    p.grad = np.ones(1, dtype=np.float32)
    nm.adam_step([p], lr=0.1)
    assert p.state["t"] == 2


# -- checkpoint + determinism ---------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    tensors = {"a.weight": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.float32([1.5]), "scalar": np.float32(2.0)}
    digest = nm.save_checkpoint(tmp_path / "m.hmkt", tensors)
    blob = (tmp_path / "m.hmkt").read_bytes()
    assert blob[:4] == b"HMKT"
    assert int.from_bytes(blob[4:8], "little") == 1
    assert int.from_bytes(blob[8:12], "little") == 3
    back = nm.load_checkpoint(tmp_path / "m.hmkt")
    assert list(back) == list(tensors)
    for k in tensors:
        np.testing.assert_array_equal(back[k], tensors[k])
    assert len(digest) == 64


def test_checkpoint_rejects_garbage():
    with pytest.raises(CheckpointError):
        loads(b"NOPE" + bytes(8))
    with pytest.raises(CheckpointError):
        loads(dumps({"x": np.ones(4, dtype=np.float32)})[:-3])


class _Tiny(nm.Module):
    def __init__(self, rng):
        self.conv = L.conv2d(rng, 1, 2)
        self.heads = [L.linear(rng, 8, 2), L.linear(rng, 2, 1)]


def test_module_state_dict_and_determinism():
    a = _Tiny(np.random.default_rng(11))
    b = _Tiny(np.random.default_rng(11))
    names = [n for n, _ in a.named_parameters()]
    assert names == ["conv.weight", "conv.bias", "heads.0.weight", "heads.0.bias", "heads.1.weight", "heads.1.bias"]
    for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert p.data.tobytes() == q.data.tobytes()
    c = _Tiny(np.random.default_rng(12))
    c.load_state_dict(a.state_dict())
    assert c.conv.weight.data.tobytes() == a.conv.weight.data.tobytes()
