import numpy as np
import pytest

from fastadvprop.autograd import BackwardError, Graph, Tensor
from fastadvprop.nn import (BatchNormState, CheckpointError, ParamRole, Route, StatsMode, backward_params,
                            batchnorm_forward, build_reference_cnn, decode_checkpoint, encode_checkpoint,
                            load_checkpoint, network_forward, param_roles, predict, save_checkpoint)


def _x(n=8, c=3, seed=0, shift=0.0):
    return Tensor(np.random.default_rng(seed).standard_normal((n, c, 4, 4)).astype(np.float32) * 2 + shift)


def test_batch_mode_normalizes_each_channel():
    state = BatchNormState.init(3, "bn")
    out = batchnorm_forward(Graph(), _x(shift=3.0), state, StatsMode.BATCH, update_running=False)
    assert np.allclose(out.data.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    assert np.allclose(out.data.var(axis=(0, 2, 3)), 1, atol=1e-4)


def test_running_update_rule():
    state = BatchNormState.init(1, "bn", momentum=0.1)
    x = Tensor(np.array([0.0, 2.0], dtype=np.float32).reshape(2, 1))  # batch mean 1
    batchnorm_forward(Graph(), x, state, StatsMode.BATCH, update_running=True)
    assert state.running_mean[0] == pytest.approx(0.1)
    assert state.running_var[0] == pytest.approx(0.9 * 1 + 0.1 * 1.0)


def test_running_mode_is_read_only():
    state = BatchNormState.init(3, "bn")
    state.running_mean[:] = [0.5, -0.2, 1.0]
    before = (state.running_mean.tobytes(), state.running_var.tobytes())
    batchnorm_forward(Graph(), _x(), state, StatsMode.RUNNING, update_running=True)
    assert (state.running_mean.tobytes(), state.running_var.tobytes()) == before


def test_batch_of_one_rejected():
    with pytest.raises(ValueError, match="at least 2"):
        batchnorm_forward(Graph(), _x(n=1), BatchNormState.init(3, "bn"), StatsMode.BATCH, False)


def test_fresh_net_routes_agree(tiny_net, tiny_ds):
    x = Tensor(tiny_ds.images[:16])
    for mode in StatsMode:
        a = network_forward(tiny_net, x, Route.MAIN, mode).logits.data
        b = network_forward(tiny_net, x, Route.AUX, mode).logits.data
        assert np.array_equal(a, b)


def _stats(net, branch):
    return {k: v.copy() for k, v in net.running_stats() if f".{branch}." in k}


def test_main_passes_leave_aux_untouched(tiny_net, tiny_ds):
    aux0 = _stats(tiny_net, "aux")
    for i in range(3):
        network_forward(tiny_net, Tensor(tiny_ds.images[i * 16:(i + 1) * 16]), Route.MAIN, update_running=True)
    assert all(np.array_equal(aux0[k], v) for k, v in _stats(tiny_net, "aux").items())


def test_aux_pass_moves_only_aux(tiny_net, tiny_ds):
    main0, aux0 = _stats(tiny_net, "main"), _stats(tiny_net, "aux")
    network_forward(tiny_net, Tensor(tiny_ds.images[:16]), Route.AUX, update_running=True)
    assert all(np.array_equal(main0[k], v) for k, v in _stats(tiny_net, "main").items())
    assert any(not np.array_equal(aux0[k], v) for k, v in _stats(tiny_net, "aux").items())


@pytest.mark.parametrize("route,other", [(Route.MAIN, ParamRole.AUX_BN), (Route.AUX, ParamRole.MAIN_BN)])
def test_branch_isolation_of_gradients(tiny_net, tiny_ds, route, other):
    g = network_forward(tiny_net, Tensor(tiny_ds.images[:16]), route, labels=tiny_ds.labels[:16])
    grads = backward_params(g, tiny_net)
    roles = param_roles(tiny_net)
    untouched = [k for k, r in roles.items() if r is other]
    assert untouched and not any(k in grads for k in untouched)
    # The other branch is not even part of the graph.
    names = {n: p for n, p, _ in tiny_net.named_parameters()}
    with pytest.raises(BackwardError, match="not a leaf"):
        g.backward(wrt=[names[untouched[0]]])


def test_param_roles_cover_registry(tiny_net):
    roles = param_roles(tiny_net)
    counts = {r: sum(int(np.prod(p.shape)) for n, p, rr in tiny_net.named_parameters() if rr is r)
              for r in ParamRole}
    total = sum(int(np.prod(p.shape)) for p in tiny_net.parameters())
    assert sum(counts.values()) == total
    assert len(roles) == len(list(tiny_net.parameters()))
    # widths (4, 6): each dual BN contributes 2C per branch.
    assert counts[ParamRole.MAIN_BN] == counts[ParamRole.AUX_BN] == 2 * (4 + 6)


def test_no_dual_bn_means_all_shared():
    net = build_reference_cnn(in_shape=(1, 8, 8), classes=3, widths=(2, 2), dual_bn=False)
    assert set(param_roles(net).values()) == {ParamRole.SHARED}


def test_main_and_aux_share_no_storage(tiny_net):
    for layer in tiny_net.bn_layers():
        for a, b in [(layer.main.scale.data, layer.aux.scale.data), (layer.main.running_mean, layer.aux.running_mean)]:
            assert not np.shares_memory(a, b)


def test_checkpoint_roundtrip(tmp_path, tiny_net, tiny_ds):
    network_forward(tiny_net, Tensor(tiny_ds.images[:16]), Route.AUX, update_running=True)
    path = tmp_path / "ck.bin"
    save_checkpoint(path, tiny_net, extra={"velocity/x": np.arange(3, dtype=np.float32)}, meta={"epoch": 4})
    net2, extra, meta = load_checkpoint(path)
    assert meta["epoch"] == 4 and np.array_equal(extra["velocity/x"], np.arange(3))
    for k, v in tiny_net.state_arrays().items():
        assert np.array_equal(v, net2.state_arrays()[k]), k
    assert np.array_equal(predict(tiny_net, tiny_ds.images), predict(net2, tiny_ds.images))


def test_checkpoint_header_and_version():
    blob = encode_checkpoint([("w", "Shared", np.ones((2, 2)))], {}, np.float64)
    records, _, dtype = decode_checkpoint(blob)
    assert dtype == np.float64 and records[0][1] == "Shared"
    bumped = blob[:8] + (99).to_bytes(4, "big") + blob[12:]
    with pytest.raises(CheckpointError, match="version 99"):
        decode_checkpoint(bumped)
    with pytest.raises(CheckpointError, match="truncated"):
        decode_checkpoint(blob[:-3])


def test_astype_clone_in_64_bit(tiny_net, tiny_ds):
    net64 = tiny_net.astype(np.float64)
    assert net64.dtype == np.float64
    a = predict(tiny_net, tiny_ds.images)
    b = predict(net64, tiny_ds.images.astype(np.float64))
    assert (a == b).mean() > 0.95
