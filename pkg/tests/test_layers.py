import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meshcnn.hierarchy import pool_table
from meshcnn.nn.layers import (
    ConvFilter,
    LevelMismatch,
    MeshPool,
    ShapeMismatch,
    dense_softmax_ce,
    mesh_conv,
    mesh_conv_grad,
    mesh_pool,
    mesh_pool_grad,
    relu,
    relu_grad,
    softmax,
)
from meshcnn.ordering import build_gather_table
from oracles import direct_conv, neighbor_sets, omega_sets


def rel(a, b):
    return np.linalg.norm(np.ravel(a - b)) / max(np.linalg.norm(np.ravel(b)), 1e-300)


def central_diff(f, x, step=1e-6):
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + step
        fp = f()
        flat[k] = old - step
        fm = f()
        flat[k] = old
        gf[k] = (fp - fm) / (2 * step)
    return g


@pytest.fixture(scope="module")
def tables(ico):
    return {d: build_gather_table(ico(3).levels[d], 1) for d in (1, 2, 3)}


def pool_op(hier, level, stride=2):
    table, counts = pool_table(hier, level, stride)
    return MeshPool(table, counts, hier.levels[level + stride // 2].n_vertices)


def random_filter(rng, cin, cout, k=1, bias=True):
    s = 3 * k * (k + 1) + 1
    return ConvFilter(k, rng.standard_normal((s, cin, cout)), rng.standard_normal(cout) if bias else np.zeros(cout))


# -- convolution -----------------------------------------------------------


def test_conv_matches_direct_oracle(ico, tables, rng):
    m = ico(3).levels[2]
    for _ in range(5):
        x = rng.standard_normal((162, 3))
        f = random_filter(rng, 3, 4)
        out = mesh_conv(x, f, tables[2])
        assert rel(out, direct_conv(x, f.weights, f.bias, m.vertices, m.triangles)) <= 1e-12


def test_conv_on_642_vertices(ico, tables, rng):
    m = ico(3).levels[3]
    x = rng.standard_normal((642, 2))
    f = random_filter(rng, 2, 2)
    assert rel(mesh_conv(x, f, tables[3]), direct_conv(x, f.weights, f.bias, m.vertices, m.triangles)) <= 1e-12


def test_identity_filter_exact(tables, rng):
    w = np.zeros((7, 1, 1))
    w[0] = 1.0
    f = ConvFilter(1, w, np.zeros(1))
    x = rng.standard_normal((162, 1))
    assert np.array_equal(mesh_conv(x, f, tables[2]), x)
    up = rng.standard_normal((162, 1))
    gx, _, _ = mesh_conv_grad(up, x, f, tables[2])
    assert np.array_equal(gx, up)


def test_constant_signal_zero_padding(tables, rng):
    w = rng.standard_normal((7, 1, 1))
    f = ConvFilter(1, w, np.zeros(1))
    c = 1.5
    out = mesh_conv(np.full((162, 1), c), f, tables[2])
    s = w.sum()
    np.testing.assert_allclose(out[:12, 0], c * (s - w[6, 0, 0]), rtol=1e-14)
    np.testing.assert_allclose(out[12:, 0], c * s, rtol=1e-14)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_conv_linearity(tables, seed, a, b):
    r = np.random.default_rng(seed)
    f = random_filter(r, 2, 3, bias=False)
    x, y = r.standard_normal((2, 162, 2))
    lhs = mesh_conv(a * x + b * y, f, tables[2])
    rhs = a * mesh_conv(x, f, tables[2]) + b * mesh_conv(y, f, tables[2])
    assert np.linalg.norm(lhs - rhs) <= 1e-12 * max(np.linalg.norm(rhs), 1.0)


def test_conv_batch_matches_single(tables, rng):
    f = random_filter(rng, 2, 3)
    x = rng.standard_normal((4, 42, 2))
    out = mesh_conv(x, f, tables[1])
    for b in range(4):
        np.testing.assert_allclose(out[b], mesh_conv(x[b], f, tables[1]), rtol=0, atol=1e-13)


def test_conv_errors(tables, rng):
    f = random_filter(rng, 2, 3)
    with pytest.raises(LevelMismatch):
        mesh_conv(rng.standard_normal((162, 2)), f, tables[1])
    with pytest.raises(ShapeMismatch):
        mesh_conv(rng.standard_normal((42, 3)), f, tables[1])
    with pytest.raises(ShapeMismatch):
        mesh_conv(rng.standard_normal((42, 2)), random_filter(rng, 2, 3, k=2), tables[1])


def test_conv_grad_zero_upstream(tables, rng):
    f = random_filter(rng, 2, 3)
    x = rng.standard_normal((42, 2))
    gx, gw, gb = mesh_conv_grad(np.zeros((42, 3)), x, f, tables[1])
    assert not gx.any() and not gw.any() and not gb.any()


def test_conv_grad_finite_differences(tables, rng):
    f = random_filter(rng, 2, 3)
    x = rng.standard_normal((42, 2))
    up = rng.standard_normal((42, 3))

    def loss():
        return float((mesh_conv(x, f, tables[1]) * up).sum())

    gx, gw, gb = mesh_conv_grad(up, x, f, tables[1])
    assert rel(gx, central_diff(loss, x)) < 1e-6
    assert rel(gw, central_diff(loss, f.weights)) < 1e-6
    assert rel(gb, central_diff(loss, f.bias)) < 1e-6


def test_conv_weight_grad_formula(tables, rng):
    f = random_filter(rng, 1, 1)
    x = rng.standard_normal((42, 1))
    up = rng.standard_normal((42, 1))
    _, gw, gb = mesh_conv_grad(up, x, f, tables[1])
    rows = tables[1].rows
    for j in range(7):
        vals = np.where(rows[:, j] >= 0, x[np.maximum(rows[:, j], 0), 0], 0.0)
        assert abs(gw[j, 0, 0] - vals @ up[:, 0]) < 1e-12
    assert abs(gb[0] - up.sum()) < 1e-12


# -- relu ------------------------------------------------------------------


def test_relu():
    np.testing.assert_array_equal(relu(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    np.testing.assert_array_equal(relu_grad(np.ones(3), np.array([-1.0, 0.0, 2.0])), [0, 0, 1])
    neg = -np.abs(np.random.default_rng(0).standard_normal(10)) - 0.1
    assert not relu(neg).any() and not relu_grad(np.ones(10), neg).any()


def test_relu_finite_differences(rng):
    x = rng.standard_normal(50)
    x[np.abs(x) < 1e-3] = 0.5
    up = rng.standard_normal(50)
    num = central_diff(lambda: float((relu(x) * up).sum()), x)
    assert rel(relu_grad(up, x), num) < 1e-6


# -- pooling ---------------------------------------------------------------


@pytest.mark.parametrize("mode", ["mean", "max"])
def test_pool_constant_exact(ico, mode):
    h = ico(3)
    for j in range(3):
        p = pool_op(h, j)
        x = np.full((h.levels[j + 1].n_vertices, 2), 0.37)
        out = mesh_pool(x, p, mode)
        assert out.shape == (h.levels[j].n_vertices, 2)
        assert (out == 0.37).all()


def test_pool_reduction_ratio(ico):
    h = ico(4)
    for j in range(4):
        p = pool_op(h, j)
        assert p.n_coarse == 10 * 4 ** j + 2 and p.n_fine == 10 * 4 ** (j + 1) + 2
        assert 3.5 <= p.n_fine / p.n_coarse < 4


def test_mean_pool_oracle(ico, rng):
    h = ico(2)
    for j in (0, 1):
        fine = h.levels[j + 1]
        x = rng.standard_normal((fine.n_vertices, 3))
        out = mesh_pool(x, pool_op(h, j), "mean")
        for i, om in enumerate(omega_sets(h.levels[j].n_vertices, fine.triangles, fine.n_vertices)):
            assert np.abs(out[i] - x[om].mean(axis=0)).max() <= 1e-14


def test_max_pool_delta(ico):
    h = ico(2)
    fine = h.levels[2]
    oms = omega_sets(42, fine.triangles, fine.n_vertices)
    for c in (0, 20):
        x = np.zeros((fine.n_vertices, 1))
        x[c] = 1.0
        out = mesh_pool(x, pool_op(h, 1), "max")[:, 0]
        expect = np.array([1.0 if c in om else 0.0 for om in oms])
        np.testing.assert_array_equal(out, expect)
        assert out[c] == 1.0


def test_mean_pool_grad_membership(ico):
    h = ico(2)
    fine = h.levels[2]
    oms = omega_sets(42, fine.triangles, fine.n_vertices)
    expect = np.zeros(fine.n_vertices)
    for om in oms:
        expect[om] += 1.0 / len(om)
    g = mesh_pool_grad(np.ones((42, 1)), np.zeros((fine.n_vertices, 1)), pool_op(h, 1), "mean")
    np.testing.assert_allclose(g[:, 0], expect, rtol=0, atol=1e-15)


def test_max_pool_grad_routing(ico, rng):
    h = ico(2)
    p = pool_op(h, 1)
    x = rng.permutation(162).astype(float)[:, None]  # unique maxima
    up = rng.standard_normal((42, 1))
    g = mesh_pool_grad(up, x, p, "max")
    for i in range(42):
        members = p.table[i, : p.counts[i]]
        top = members[np.argmax(x[members, 0])]
        assert g[top, 0] != 0 or up[i, 0] == 0
    assert abs(g.sum() - up.sum()) < 1e-12


def test_max_pool_ties_go_to_smallest_index(ico):
    h = ico(1)
    p = pool_op(h, 0)
    x = np.ones((42, 1))
    g = mesh_pool_grad(np.ones((12, 1)), x, p, "max")
    for i in range(12):
        assert g[p.table[i, 0], 0] >= 1.0
    assert g.sum() == 12


@pytest.mark.parametrize("mode", ["mean", "max"])
def test_pool_grad_finite_differences(ico, rng, mode):
    h = ico(2)
    p = pool_op(h, 1)
    x = rng.standard_normal((162, 2))
    up = rng.standard_normal((42, 2))
    num = central_diff(lambda: float((mesh_pool(x, p, mode) * up).sum()), x)
    assert rel(mesh_pool_grad(up, x, p, mode), num) < 1e-6


def test_pool_errors(ico):
    p = pool_op(ico(2), 1)
    with pytest.raises(LevelMismatch):
        mesh_pool(np.zeros((42, 1)), p)
    with pytest.raises(ValueError):
        mesh_pool(np.zeros((162, 1)), p, "median")


# -- dense head --------------------------------------------------------------


def test_zero_head_gives_ln2():
    f = np.random.default_rng(1).standard_normal((3, 10))
    loss, probs, _ = dense_softmax_ce(f, np.zeros((10, 4)), np.zeros(4), np.zeros((4, 2)), np.zeros(2), [0, 1, 1])
    np.testing.assert_allclose(probs, 0.5)
    assert abs(loss - np.log(2)) < 1e-15


def test_softmax_stability():
    p = softmax(np.array([[1000.0, 0.0]]))
    assert np.isfinite(p).all()
    np.testing.assert_allclose(p, [[1.0, 0.0]], atol=1e-300)
    loss, _, _ = dense_softmax_ce(np.array([[1.0]]), np.array([[1.0]]), np.zeros(1),
                                  np.array([[1000.0, 0.0]]), np.zeros(2), [1], fc_relu=False)
    assert np.isfinite(loss) and abs(loss - 1000.0) < 1e-9


def test_softmax_sums_to_one(rng):
    p = softmax(rng.standard_normal((20, 5)) * 30)
    assert np.abs(p.sum(axis=1) - 1).max() <= 1e-12


@pytest.mark.parametrize("fc_relu", [True, False])
def test_dense_finite_differences(rng, fc_relu):
    feats = rng.standard_normal((4, 6))
    fw, fb = rng.standard_normal((6, 5)), rng.standard_normal(5) * 0.1
    ow, ob = rng.standard_normal((5, 3)), rng.standard_normal(3)
    labels = np.array([0, 2, 1, 2])

    def loss():
        return dense_softmax_ce(feats, fw, fb, ow, ob, labels, fc_l2=5e-4, fc_relu=fc_relu)[0]

    l0, _, g = dense_softmax_ce(feats, fw, fb, ow, ob, labels, fc_l2=5e-4, fc_relu=fc_relu)
    assert l0 >= 0
    for name, arr in (("features", feats), ("fc_weights", fw), ("fc_bias", fb), ("out_weights", ow), ("out_bias", ob)):
        assert rel(g[name], central_diff(loss, arr)) < 1e-6, name


def test_dense_l2_penalty():
    fw = np.full((2, 2), 0.5)
    l_pen, _, _ = dense_softmax_ce(np.zeros((1, 2)), fw, np.zeros(2), np.zeros((2, 2)), np.zeros(2), [0], fc_l2=0.1)
    assert abs(l_pen - (np.log(2) + 0.1 * 1.0)) < 1e-15


def test_dense_shape_errors():
    with pytest.raises(ShapeMismatch):
        dense_softmax_ce(np.zeros((2, 3)), np.zeros((4, 2)), np.zeros(2), np.zeros((2, 2)), np.zeros(2), [0, 1])
    with pytest.raises(ShapeMismatch):
        dense_softmax_ce(np.zeros((2, 4)), np.zeros((4, 2)), np.zeros(2), np.zeros((2, 2)), np.zeros(2), [0])
