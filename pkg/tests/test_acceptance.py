"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``. The synthetic benchmark
(criterion 11) trains the default architecture on ten folds at level 4 and
takes a few minutes on one core.
"""

import math
import time
from fractions import Fraction

import numpy as np
import pytest

from meshcnn.baseline import chebyshev_conv, chebyshev_conv_grad, graph_laplacian
from meshcnn.cli import EXIT_OK, main
from meshcnn.data import compute_metrics, gen_synthetic, grouped_kfold, summarize
from meshcnn.hierarchy import icosphere, pool_table
from meshcnn.nn.gradcheck import gradcheck, small_spec
from meshcnn.nn.layers import (
    ConvFilter,
    MeshPool,
    dense_softmax_ce,
    mesh_conv,
    mesh_conv_grad,
    mesh_pool,
    mesh_pool_grad,
    relu,
    relu_grad,
)
from meshcnn.nn.model import CHEBYSHEV, build_operators, default_spec
from meshcnn.nn.optim import AdamState, adam_step
from meshcnn.nn.train import TrainConfig, train
from meshcnn.ordering import build_gather_table, check_fan, order_one_ring, tangent_frame
from oracles import (
    cyclic_equal,
    dense_chebyshev,
    dense_normalized_laplacian,
    direct_conv,
    omega_sets,
)
from test_layers import central_diff, rel

BENCH_EPOCHS = 30


@pytest.fixture
def verdict(capsys):
    """Print one PASS/FAIL line straight to the terminal, then assert."""

    def emit(number, name, ok, detail=""):
        with capsys.disabled():
            print(f"\n[criterion {number:2d}] {'PASS' if ok else 'FAIL'}  {name}  {detail}")
        assert ok, f"criterion {number} failed: {detail}"

    return emit


def _pool(hier, level):
    table, counts = pool_table(hier, level, 2)
    return MeshPool(table, counts, hier.levels[level + 1].n_vertices)


def test_01_subdivision_counts(verdict):
    t0 = time.perf_counter()
    h = icosphere(5)
    elapsed = time.perf_counter() - t0
    nv = [m.n_vertices for m in h.levels]
    nf = [m.n_faces for m in h.levels]
    ok = nv == [12, 42, 162, 642, 2562, 10242] and nf == [20 * 4 ** j for j in range(6)] and elapsed < 5.0
    verdict(1, "subdivision counts", ok, f"vertices {nv} faces {nf} in {elapsed:.2f} s")


def test_02_support_size(verdict, ico):
    m = ico(3).levels[3]
    widths = [build_gather_table(m, k).rows.shape[1] for k in (1, 2, 3, 4)]
    verdict(2, "support-size formula", widths == [7, 19, 37, 61], f"widths {widths}")


def test_03_conv_oracle(verdict, ico):
    m = ico(2).levels[2]
    table = build_gather_table(m, 1)
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(20):
        cin, cout = rng.integers(1, 5, size=2)
        x = rng.standard_normal((162, cin))
        f = ConvFilter(1, rng.standard_normal((7, cin, cout)), rng.standard_normal(cout))
        worst = max(worst, rel(mesh_conv(x, f, table), direct_conv(x, f.weights, f.bias, m.vertices, m.triangles)))
    verdict(3, "convolution oracle", worst <= 1e-12, f"max relative error {worst:.2e} over 20 pairs")


def test_04_identity_filter(verdict, ico):
    rng = np.random.default_rng(4)
    ok = True
    for d in (1, 2, 3):
        table = build_gather_table(ico(3).levels[d], 1)
        for c in (1, 3):
            w = np.zeros((7, c, c))
            w[0] = np.eye(c)
            x = rng.standard_normal((2, table.n_vertices, c)) * 10.0 ** rng.integers(-5, 5)
            ok &= np.array_equal(mesh_conv(x, ConvFilter(1, w, np.zeros(c)), table), x)
    verdict(4, "identity filter", ok, "bit-exact on levels 1-3, 1 and 3 channels")


def test_05_ordering_soundness(verdict, ico):
    bad = []
    for d in (1, 2, 3):
        m = ico(3).levels[d]
        for i in range(m.n_vertices):
            ordered = order_one_ring(m, i)
            if sorted(ordered) != sorted(m.adjacency[i]):
                bad.append((d, i, "not a permutation"))
            try:
                check_fan(m, i, ordered)
            except Exception as exc:
                bad.append((d, i, str(exc)))
    rng = np.random.default_rng(5)
    for r in range(100):
        m = ico(3).levels[1 + r % 3]
        i = int(rng.integers(m.n_vertices))
        frame = tangent_frame(m, i)
        n = frame.normal
        ang = rng.uniform(0, 2 * np.pi)
        # Rodrigues rotation about the axis through vertex i along its normal
        kx = np.array([[0, -n[2], n[1]], [n[2], 0, -n[0]], [-n[1], n[0], 0]])
        rot = np.eye(3) + np.sin(ang) * kx + (1 - np.cos(ang)) * kx @ kx
        moved = m.with_vertices((m.vertices - m.vertices[i]) @ rot.T + m.vertices[i])
        if not cyclic_equal(order_one_ring(m, i), order_one_ring(moved, i)):
            bad.append((m.n_vertices, i, f"rotation {ang:.3f} changed cyclic order"))
    verdict(5, "ordering soundness", not bad, f"{len(bad)} violations; 100 rotations checked")


def test_06_gradient_checks(verdict, ico):
    t0 = time.perf_counter()
    h = ico(2)
    rng = np.random.default_rng(6)
    errs = {}

    table = build_gather_table(h.levels[2], 1)
    f = ConvFilter(1, rng.standard_normal((7, 2, 3)), rng.standard_normal(3))
    x = rng.standard_normal((162, 2))
    up = rng.standard_normal((162, 3))
    conv_loss = lambda: float((mesh_conv(x, f, table) * up).sum())  # noqa: E731
    gx, gw, gb = mesh_conv_grad(up, x, f, table)
    errs["mesh_conv"] = max(rel(gx, central_diff(conv_loss, x)), rel(gw, central_diff(conv_loss, f.weights)),
                            rel(gb, central_diff(conv_loss, f.bias)))

    z = rng.standard_normal((162, 3))
    errs["relu"] = rel(relu_grad(up, z), central_diff(lambda: float((relu(z) * up).sum()), z))

    p = _pool(h, 1)
    xf = rng.standard_normal((162, 2))
    upc = rng.standard_normal((42, 2))
    for mode in ("mean", "max"):
        num = central_diff(lambda: float((mesh_pool(xf, p, mode) * upc).sum()), xf)
        errs[f"{mode}_pool"] = rel(mesh_pool_grad(upc, xf, p, mode), num)

    feats = rng.standard_normal((4, 6))
    fw, fb = rng.standard_normal((6, 5)), rng.standard_normal(5) * 0.1
    ow, ob = rng.standard_normal((5, 2)), rng.standard_normal(2)
    labels = np.array([0, 1, 1, 0])
    head = lambda: dense_softmax_ce(feats, fw, fb, ow, ob, labels, fc_l2=5e-4)[0]  # noqa: E731
    g = dense_softmax_ce(feats, fw, fb, ow, ob, labels, fc_l2=5e-4)[2]
    errs["dense_softmax"] = max(rel(g[k], central_diff(head, a)) for k, a in
                                (("features", feats), ("fc_weights", fw), ("fc_bias", fb),
                                 ("out_weights", ow), ("out_bias", ob)))

    lap = graph_laplacian(h.levels[2])
    theta = rng.standard_normal((4, 2, 3))
    cheb_loss = lambda: float((chebyshev_conv(x, lap, theta) * up).sum())  # noqa: E731
    cx, ct, _ = chebyshev_conv_grad(up, x, lap, theta)
    errs["chebyshev_conv"] = max(rel(cx, central_diff(cheb_loss, x)), rel(ct, central_diff(cheb_loss, theta)))

    for kind in ("vertex", CHEBYSHEV):
        errs[f"model_{kind}"] = gradcheck(spec=small_spec(kind), hier=h).max_error
    elapsed = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    ok = all(e <= 1e-6 for e in errs.values()) and elapsed < 120
    verdict(6, "gradient checks", ok, f"worst {worst} {errs[worst]:.2e}; {len(errs)} checks in {elapsed:.1f} s")


def test_07_pooling_invariants(verdict, ico):
    h = ico(4)
    const_ok, ratios = True, []
    for j in range(4):
        p = _pool(h, j)
        x = np.full((h.levels[j + 1].n_vertices, 3), -2.71)
        for mode in ("mean", "max"):
            const_ok &= bool((mesh_pool(x, p, mode) == -2.71).all())
        ratios.append(p.n_fine / p.n_coarse)
    ratio_ok = all(3.5 <= r < 4.0 for r in ratios) and abs(ratios[-1] - 4) < 0.02
    rng = np.random.default_rng(7)
    worst = 0.0
    for j in (0, 1, 2):
        fine = h.levels[j + 1]
        x = rng.standard_normal((fine.n_vertices, 2))
        out = mesh_pool(x, _pool(h, j), "mean")
        for i, om in enumerate(omega_sets(h.levels[j].n_vertices, fine.triangles, fine.n_vertices)):
            worst = max(worst, float(np.abs(out[i] - x[om].mean(axis=0)).max()))
    ok = const_ok and ratio_ok and worst <= 1e-14
    verdict(7, "pooling invariants", ok,
            f"constants exact {const_ok}; ratios {[round(r, 3) for r in ratios]}; oracle error {worst:.1e}")


def test_08_chebyshev_oracle(verdict, ico):
    rng = np.random.default_rng(8)
    worst = 0.0
    for d in (1, 2):
        m = ico(2).levels[d]
        lap = graph_laplacian(m)
        dense = dense_normalized_laplacian(m.n_vertices, m.edges)
        for order in (1, 2, 3, 4, 5):
            x = rng.standard_normal((m.n_vertices, 2))
            theta = rng.standard_normal((order + 1, 2, 3))
            got = chebyshev_conv(x, lap, theta)
            worst = max(worst, rel(got, dense_chebyshev(x, dense, lap.lambda_max_estimate, theta)))
    lap = graph_laplacian(ico(2).levels[2])
    x = rng.standard_normal((162, 4))
    ident = np.array_equal(chebyshev_conv(x, lap, np.eye(4)[None]), x)
    verdict(8, "chebyshev oracle", worst <= 1e-10 and ident, f"max relative error {worst:.2e}; K=0 identity {ident}")


def test_09_adam_first_step(verdict):
    lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
    worst = 0.0
    for theta0, g in ((0.0, 1.0), (0.5, -0.3), (-2.0, 1e-4), (1.0, 37.0)):
        p = {"w.bias": np.array([theta0])}
        adam_step(p, {"w.bias": np.array([g])}, AdamState(), lr=lr, beta1=b1, beta2=b2, eps=eps)
        m, v = (1 - b1) * g, (1 - b2) * g * g
        want = theta0 - lr * (m / (1 - b1)) / (math.sqrt(v / (1 - b2)) + eps)
        worst = max(worst, abs(p["w.bias"][0] - want))
    verdict(9, "adam first step", worst <= 1e-12, f"max deviation {worst:.1e}")


def test_10_metric_identities(verdict):
    rng = np.random.default_rng(10)
    ok = True
    for _ in range(300):
        n = int(rng.integers(2, 120))
        lab = rng.integers(0, 2, size=n)
        lab[:2] = (0, 1)
        pred = rng.integers(0, 2, size=n)
        m = compute_metrics(pred, lab)
        (tn, fp), (fn, tp) = m.confusion
        sen, spe = Fraction(tp, tp + fn), Fraction(tn, tn + fp)
        prev = Fraction(tp + fn, n)
        ok &= m.gmean == math.sqrt(m.sen * m.spe)
        ok &= prev * sen + (1 - prev) * spe == Fraction(tp + tn, n)
        ok &= m.acc == (tp + tn) / n and m.sen == float(sen) and m.spe == float(spe)
    disjoint = True
    for n_subj in range(2, 16):
        ids = [f"s{v}" for v in rng.integers(0, n_subj, size=3 * n_subj)]
        for k in range(2, len(set(ids)) + 1):
            folds = grouped_kfold(ids, k, seed=k)
            sets = [set(f.test_subjects) for f in folds]
            disjoint &= all(not sets[a] & sets[b] for a in range(k) for b in range(a + 1, k))
            disjoint &= set().union(*sets) == set(ids)
            disjoint &= all({ids[i] for i in f.train}.isdisjoint(f.test_subjects) for f in folds)
    verdict(10, "metric identities", ok and disjoint, f"identities {ok}; fold disjointness {disjoint}")


def test_11_synthetic_benchmark(verdict):
    t0 = time.perf_counter()
    h = icosphere(4)
    ds = gen_synthetic(h, 4, 100, seed=0)
    folds = grouped_kfold(ds.subject_ids, 10, seed=0)
    spec = default_spec()
    results, _ = train(spec, TrainConfig(epochs=BENCH_EPOCHS, seed=0), build_operators(spec, h), h, ds, folds)
    final = summarize([r.final_metrics for r in results])
    elapsed = time.perf_counter() - t0
    acc, gm = final["acc"][0], final["gmean"][0]
    ok = len(ds) == 600 and acc >= 0.95 and gm >= 0.95 and elapsed < 15 * 60
    verdict(11, "synthetic benchmark", ok,
            f"final-epoch ACC {acc:.4f} GMean {gm:.4f} after {BENCH_EPOCHS} epochs, {elapsed:.0f} s")


def test_12_compare_harness(verdict, tmp_path):
    cfg = tmp_path / "cmp.toml"
    cfg.write_text("[mesh]\nlevel = 3\n[model]\nfilters = [8, 16, 32]\n"
                   "[train]\nepochs = 2\nfolds = 3\n[data]\nn_per_class = 6\n")
    out = tmp_path / "cmp"
    code = main(["--threads", "1", "compare", "--config", str(cfg), "--out", str(out)])
    lines = (out / "compare.tsv").read_text().splitlines() if code == EXIT_OK else []
    times = (out / "epoch_times.tsv").read_text().splitlines()[1:] if code == EXIT_OK else []
    kinds = {t.split("\t")[0] for t in times}
    ok = (
        code == EXIT_OK
        and lines[0].endswith("sec_per_epoch")
        and float(lines[1].split("\t")[-1]) > 0
        and lines[3].startswith("time ratio")
        and len(times) == 2 * 3 * 2
        and kinds == {"vertex", CHEBYSHEV}
    )
    detail = f"vertex {lines[1].split(chr(9))[-1]} s/epoch; {lines[3]}" if ok else f"exit {code}"
    verdict(12, "comparison harness", ok, detail.replace("\t", " "))


def test_13_determinism(verdict, tmp_path):
    cfg = tmp_path / "det.toml"
    cfg.write_text("[mesh]\nlevel = 3\n[model]\nfilters = [8, 16, 32]\n"
                   "[train]\nepochs = 3\nfolds = 3\n[data]\nn_per_class = 8\n")
    hist = []
    for run in ("a", "b"):
        out = tmp_path / run
        code = main(["--threads", "1", "train", "--config", str(cfg), "--seed", "13", "--out", str(out)])
        hist.append((out / "history.csv").read_bytes() if code == EXIT_OK else None)
    ok = hist[0] is not None and hist[0] == hist[1]
    verdict(13, "determinism", ok, f"history files identical: {ok}")
