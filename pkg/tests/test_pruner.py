import numpy as np
import pytest

from greedyprune.features import global_loss
from greedyprune.model import Layer, Network, PrunedLayer, random_network
from greedyprune.numeric import RngStream
from greedyprune.pruner import (LayerPruneError, choose_method, prune_layer, prune_network)


@pytest.fixture
def small():
    rng = RngStream(41)
    net = random_network(rng.child("net"), [4, 3, 1], [12, 8], "tanh")
    return net, rng.gauss((16, 4))


@pytest.mark.parametrize("args, want", [
    ((3, 0.1, 5, 0.0), "local"),
    ((6, 0.0, 4, 0.1), "global"),
    ((4, 0.2, 4, 0.1), "global"),
    ((4, 0.1, 4, 0.2), "local"),
    ((4, 0.1, 4, 0.1), "local"),
])
def test_choose_method(args, want):
    assert choose_method(*args) == want


def test_identical_neurons_prune_to_one():
    rng = RngStream(2)
    W = rng.gauss((3, 2))
    head = Layer(np.stack([W] * 6), np.full(6, 0.8), "relu")
    net = Network((head, Layer(rng.gauss((4, 2, 1)), rng.gauss(4), "tanh")))
    # the mean of six identical outputs differs from each by roundoff only
    res = prune_layer(net, 1, rng.gauss((10, 3)), eps=1e-30)
    assert res.method == "local" and res.support == 1 and res.final_global_loss <= 1e-30
    assert res.local.support_size == res.global_.support_size == 1


def test_rerun_is_deterministic(small):
    net, X = small
    a = prune_layer(net, 2, X, eps=1e-6)
    b = prune_layer(net, 2, X, eps=1e-6)
    assert a.method == b.method and np.array_equal(a.A, b.A)
    _, ra = prune_network(net, X, eps=1e-5)
    pa, _ = prune_network(net, X, eps=1e-5)
    pb, rb = prune_network(net, X, eps=1e-5)
    for la, lb in zip(pa.layers, pb.layers):
        assert np.array_equal(la.weights, lb.weights)
    assert [r.method for r in ra.layers] == [r.method for r in rb.layers]


def test_winner_matches_trace_audit(small):
    net, X = small
    res = prune_layer(net, 1, X, eps=1e-4)
    ls, gs = res.local.support_size, res.global_.support_size
    if ls != gs:
        assert res.method == ("local" if ls < gs else "global")
    assert res.support == np.count_nonzero(res.A)
    assert res.final_global_loss == pytest.approx(
        global_loss(net.replace(1, PrunedLayer(net.layers[0], res.A)), net, X), rel=1e-12)


def test_huge_eps_prunes_every_layer_to_one(small):
    net, X = small
    pruned, report = prune_network(net, X, eps=1e9)
    assert [r.support for r in report.layers] == [1, 1]
    assert all(isinstance(l, PrunedLayer) for l in pruned.layers)


def test_zero_eps_reaches_machine_floor():
    rng = RngStream(42)
    net = random_network(rng.child("net"), [4, 3, 1], [5, 4], "tanh")
    pruned, report = prune_network(net, rng.gauss((30, 4)), eps=0.0, max_iters=400)
    assert report.total_loss <= 1e-20
    assert [r.support for r in report.layers] == [5, 4]
    for layer in pruned.layers:
        assert abs(layer.weights.sum() - 1) <= 1e-12 and layer.weights.min() >= 0


def test_stage_losses_recompute_and_triangle(small):
    net, X = small
    pruned, report = prune_network(net, X, eps=1e-3)
    stage1 = global_loss(net.replace(1, pruned.layers[0]), net, X)
    stage2 = global_loss(pruned, net.replace(1, pruned.layers[0]), X)
    np.testing.assert_allclose(report.stage_losses, [stage1, stage2], rtol=1e-10, atol=1e-18)
    assert np.sqrt(global_loss(pruned, net, X)) <= np.sqrt(stage1) + np.sqrt(stage2) + 1e-8
    assert report.triangle_ok


def test_per_layer_eps_and_flags(small):
    net, X = small
    _, report = prune_network(net, X, eps=[1e9, 0.0], max_iters=3)
    assert report.layers[0].converged and not report.layers[1].converged
    assert not report.converged
    with pytest.raises(ValueError):
        prune_network(net, X, eps=[1e-3])


def test_max_support_cap(small):
    net, X = small
    res = prune_layer(net, 1, X, eps=0.0, max_support=3)
    assert res.support <= 3


def test_already_pruned_layer_is_rejected(small):
    net, X = small
    pruned, _ = prune_network(net, X, eps=1e9)
    with pytest.raises(ValueError):
        prune_layer(pruned, 1, X)


def test_failures_carry_layer_index(small):
    net, X = small
    with pytest.raises(LayerPruneError) as info:
        prune_network(net, X, eps=0.0, max_iters=5, k_tilde=0, top_m=0)
    assert info.value.index == 1

    partly = net.replace(2, PrunedLayer(net.layers[1], np.full(8, 1 / 8)))
    with pytest.raises(LayerPruneError) as info:
        prune_network(partly, X, eps=1e9)
    assert info.value.index == 2


def test_report_rows(small):
    net, X = small
    _, report = prune_network(net, X, eps=1e-4)
    rows = list(report.rows())
    assert [r["layer"] for r in rows] == [1, 2]
    assert set(rows[0]) == {"layer", "method", "support", "local_loss", "global_loss", "converged"}
