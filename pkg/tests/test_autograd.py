import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fastadvprop.autograd import BackwardError, Graph, NonFiniteError, ShapeError, Tensor, sgd_momentum_update
from fastadvprop.nn import Route, StatsMode, backward_params, build_reference_cnn, network_forward

from oracles import central_diff, rel_error, straight_line_cnn_loss

F64 = np.float64
TOL = 1e-4


def vjp_check(build, arrays, seed=0):
    """Autodiff VJP against central differences of <R, build(...)> for every input."""
    leaves = [Tensor(np.asarray(a, dtype=F64), requires_grad=True) for a in arrays]
    g = Graph()
    out = build(g, *leaves)
    r = np.random.default_rng(seed).standard_normal(out.shape)
    g.backward(out, wrt=leaves, grad_output=r)
    errs = []
    for leaf in leaves:
        def f():
            return float((build(Graph(), *leaves).data * r).sum())
        errs.append(rel_error(leaf.grad, central_diff(f, leaf.data)))
    return errs


def rand(*shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


PRIMITIVES = {
    "dense": (lambda g, x, w, b: g.dense(x, w, b), lambda s: [rand(5, 4, seed=s), rand(3, 4, seed=s + 1), rand(3, seed=s + 2)]),
    "conv2d": (lambda g, x, w, b: g.conv2d(x, w, b), lambda s: [rand(2, 2, 5, 5, seed=s), rand(3, 2, 3, 3, seed=s + 1), rand(3, seed=s + 2)]),
    "relu": (lambda g, x: g.relu(x), lambda s: [rand(4, 6, seed=s)]),
    "add": (lambda g, a, b: g.add(a, b), lambda s: [rand(3, 4, seed=s), rand(3, 4, seed=s + 1)]),
    "scale": (lambda g, x: g.scale(x, -1.7), lambda s: [rand(3, 4, seed=s)]),
    "flatten": (lambda g, x: g.flatten(x), lambda s: [rand(2, 3, 2, 2, seed=s)]),
    "mean_pool": (lambda g, x: g.mean_pool(x, 2), lambda s: [rand(2, 3, 4, 4, seed=s)]),
    "batchnorm_batch": (lambda g, x, ga, be: g.batchnorm(x, ga, be, 1e-5)[0],
                        lambda s: [rand(6, 3, 2, 2, seed=s), rand(3, seed=s + 1), rand(3, seed=s + 2)]),
    "batchnorm_sharded": (lambda g, x, ga, be: g.batchnorm(x, ga, be, 1e-5, shards=2)[0],
                          lambda s: [rand(6, 3, 2, 2, seed=s), rand(3, seed=s + 1), rand(3, seed=s + 2)]),
    "batchnorm_running": (lambda g, x, ga, be: g.batchnorm(x, ga, be, 1e-5, running=(np.full(3, 0.2), np.full(3, 1.5)))[0],
                          lambda s: [rand(4, 3, 2, 2, seed=s), rand(3, seed=s + 1), rand(3, seed=s + 2)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@pytest.mark.parametrize("seed", [0, 10, 20])
def test_primitive_matches_finite_differences(name, seed):
    build, make = PRIMITIVES[name]
    assert max(vjp_check(build, make(seed), seed)) <= TOL


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_softmax_cross_entropy_matches_finite_differences(seed):
    y = np.random.default_rng(seed).integers(0, 5, 7)
    logits = Tensor(rand(7, 5, seed=seed), requires_grad=True)
    g = Graph()
    g.softmax_cross_entropy(logits, y)
    g.backward(wrt=[logits])

    def f():
        return float(Graph().softmax_cross_entropy(logits, y).data)

    assert rel_error(logits.grad, central_diff(f, logits.data)) <= TOL


def test_identity_dense_passes_input_through():
    v = rand(3, 4)
    out = Graph().dense(Tensor(v), Tensor(np.eye(4)), Tensor(np.zeros(4)))
    assert np.array_equal(out.data, v)


@pytest.mark.parametrize("classes", [2, 10, 37])
def test_uniform_logits_give_log_c(classes):
    loss = Graph().softmax_cross_entropy(Tensor(np.zeros((5, classes), F64)), np.zeros(5, dtype=int))
    assert float(loss.data) == pytest.approx(np.log(classes), abs=1e-12)


def test_bilinear_gradients():
    w = Tensor(rand(1, 6), requires_grad=True)
    x = Tensor(rand(1, 6, seed=4), requires_grad=True)
    g = Graph()
    out = g.dense(x, w)  # (1, 1) = sum(w * x)
    g.backward(out, wrt=[w, x], grad_output=np.ones((1, 1)))
    assert np.allclose(w.grad, x.data) and np.allclose(x.grad, w.data)


def test_reference_cnn_loss_matches_straight_line_forward(tiny_net64):
    x = np.random.default_rng(0).random((6, 1, 8, 8))
    y = np.array([0, 1, 2, 3, 0, 1])
    g = network_forward(tiny_net64, Tensor(x), labels=y)
    expected = straight_line_cnn_loss(tiny_net64.state_arrays(), x, y)
    assert float(g.loss.data) == pytest.approx(expected, rel=1e-10)


@pytest.mark.parametrize("route", [Route.MAIN, Route.AUX])
@pytest.mark.parametrize("shards", [1, 2])
def test_full_network_gradients_match_finite_differences(tiny_net64, route, shards):
    net = tiny_net64
    rng = np.random.default_rng(3)
    x = Tensor(rng.random((6, 1, 8, 8)), requires_grad=True)
    y = rng.integers(0, 4, 6)
    g = network_forward(net, x, route, StatsMode.BATCH, labels=y, shards=shards)
    grads = backward_params(g, net, extra=(x,))

    def f():
        return float(network_forward(net, x, route, StatsMode.BATCH, labels=y, shards=shards).loss.data)

    params = {name: p for name, p, _ in net.named_parameters()}
    for name, grad in grads.items():
        assert rel_error(grad, central_diff(f, params[name].data)) <= TOL, name
    assert rel_error(x.grad, central_diff(f, x.data)) <= TOL


def test_joint_backward_is_single_pass_and_bitwise_equal(tiny_net):
    x = np.random.default_rng(1).random((8, 1, 8, 8)).astype(np.float32)
    y = np.arange(8) % 4
    d = Tensor(np.zeros_like(x), requires_grad=True)

    def run(extra):
        g = Graph()
        network_forward(tiny_net, g.add(Tensor(x), d), Route.MAIN, labels=y, graph=g)
        grads = backward_params(g, tiny_net, extra=extra)
        return g, grads

    g_joint, joint = run((d,))
    _, alone = run(())
    assert g_joint.backward_passes == 1
    assert joint.keys() == alone.keys()
    for k in joint:
        assert np.array_equal(joint[k], alone[k]), k


def test_backward_errors():
    with pytest.raises(BackwardError):
        Graph().backward(wrt=[])
    g = Graph()
    a = Tensor(rand(2, 3), requires_grad=True)
    out = g.relu(a)
    with pytest.raises(BackwardError, match="not a leaf"):
        g.backward(out, wrt=[Tensor(rand(2, 3))], grad_output=np.ones((2, 3)))
    with pytest.raises(BackwardError, match="scalar"):
        g.backward(out, wrt=[a])


def test_shape_mismatch_names_the_node():
    g = Graph()
    g.relu(Tensor(rand(2, 3)))
    with pytest.raises(ShapeError, match=r"#1:dense\[fc\]"):
        g.dense(Tensor(rand(2, 3)), Tensor(rand(4, 5)), name="fc")
    with pytest.raises(ShapeError, match="no broadcasting"):
        g.add(Tensor(rand(2, 3)), Tensor(rand(3)))


def test_non_finite_activation_flagged_with_node_id():
    g = Graph()
    g.relu(Tensor(rand(2, 2)))
    bad = rand(2, 2)
    bad[0, 0] = np.inf
    with pytest.raises(NonFiniteError, match="#1:scale"):
        g.scale(Tensor(bad), 2.0)


def test_seeded_tensor_is_reproducible():
    a = Tensor.from_seed((3, 4), seed=9)
    b = Tensor.from_seed((3, 4), seed=9)
    assert a.data.tobytes() == b.data.tobytes()
    assert Tensor.from_seed((3, 4), seed=9, dtype=F64).dtype == F64


def test_forward_is_deterministic(tiny_ds):
    losses = []
    for _ in range(2):
        net = build_reference_cnn(in_shape=(1, 8, 8), classes=4, widths=(4, 6), seed=2)
        g = network_forward(net, Tensor(tiny_ds.images[:16]), labels=tiny_ds.labels[:16])
        losses.append(g.loss.data.tobytes())
    assert losses[0] == losses[1]


# -- SGD ----------------------------------------------------------------------

def _param(values):
    return Tensor(np.array(values, dtype=F64), requires_grad=True)


def test_sgd_plain_step():
    p, g = _param([1.0, -2.0]), np.array([0.5, 0.25])
    v = np.zeros(2)
    sgd_momentum_update([p], [g], [v], lr=0.1, momentum=0.0)
    assert np.allclose(p.data, [1.0 - 0.05, -2.0 - 0.025])


def test_sgd_zero_lr_leaves_params():
    p = _param([1.0, 2.0])
    sgd_momentum_update([p], [np.ones(2)], [np.zeros(2)], lr=0.0, momentum=0.9, weight_decay=0.1)
    assert np.array_equal(p.data, [1.0, 2.0])


def test_sgd_two_momentum_steps_unrolled():
    p, g, v = _param([0.0]), np.array([2.0]), np.zeros(1)
    for _ in range(2):
        sgd_momentum_update([p], [g], [v], lr=0.1, momentum=0.9)
    assert p.data[0] == pytest.approx(-0.1 * 2.0 * (1 + 1.9))


def test_sgd_non_finite_gradient_aborts_untouched():
    p, q = _param([1.0]), _param([2.0])
    vp, vq = np.zeros(1), np.zeros(1)
    with pytest.raises(NonFiniteError):
        sgd_momentum_update([p, q], [np.ones(1), np.array([np.nan])], [vp, vq], lr=0.1)
    assert p.data[0] == 1.0 and vp[0] == 0.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**16), st.floats(0.0, 0.99), st.floats(0.0, 1.0), st.floats(0.0, 0.1))
def test_sgd_matches_recursion(seed, mu, lr, wd):
    rng = np.random.default_rng(seed)
    p0, g, v0 = rng.standard_normal(5), rng.standard_normal(5), rng.standard_normal(5)
    p, v = _param(p0.copy()), v0.copy()
    sgd_momentum_update([p], [g], [v], lr, mu, wd)
    v_ref = mu * v0 + g + wd * p0
    assert np.allclose(v, v_ref) and np.allclose(p.data, p0 - lr * v_ref)
