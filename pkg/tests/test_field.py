"""Partition-of-unity field: blending, gradients, tape path."""

import numpy as np
import pytest

from octgen import autodiff as ad
from octgen import field as fld
from octgen import geometry as geo
from octgen.errors import OutOfDomain
from octgen.optim import ParameterStore

from helpers import rel_err


class ConstStub:
    def __init__(self, value):
        self.v = value

    def value(self, x, f):
        return np.full(len(x), self.v)

    def value_and_xgrad(self, x, f):
        return self.value(x, f), np.zeros_like(x)


class FeatureStub:
    """Patch value = first feature channel (leaf identity carrier)."""

    def value(self, x, f):
        return f[:, 0].astype(np.float64)

    def value_and_xgrad(self, x, f):
        return self.value(x, f), np.zeros_like(x)


class LinearStub:
    """Patch value = first local coordinate."""

    def value(self, x, f):
        return x[:, 0].copy()

    def value_and_xgrad(self, x, f):
        g = np.zeros_like(x)
        g[:, 0] = 1.0
        return self.value(x, f), g


def sphere_octree(max_depth=4, seed=0, n=600):
    rng = np.random.default_rng(seed)
    pts = rng.standard_normal((n, 3))
    pts = 0.5 * pts / np.linalg.norm(pts, axis=1, keepdims=True)
    return geo.build_from_points(pts, max_depth)


def leaf_geometry(tree):
    ds, cs = tree.leaves()
    centers = np.zeros((len(ds), 3))
    sizes = np.zeros(len(ds))
    for d in np.unique(ds):
        m = ds == d
        centers[m] = geo.cell_center(int(d), cs[m])
        sizes[m] = geo.cell_size(int(d))
    return centers, sizes


def naive_eval(tree, f, dec, points, shuffle_seed=None):
    """Direct blend looping over every leaf; independent of support search."""
    centers, sizes = leaf_geometry(tree)
    order = np.arange(len(sizes))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(order)
    out = np.zeros(len(points))
    for qi, p in enumerate(points):
        num = den = 0.0
        for i in order:
            x = (p - centers[i]) / sizes[i]
            w = fld.hat_weight(x)
            if w > 0:
                num += w * dec.value(x[None], f[i][None])[0]
                den += w
        out[qi] = num / den
    return out


def make_field(tree, feat_dim=6, seed=0):
    rng = np.random.default_rng(seed)
    f = rng.standard_normal((tree.num_leaves(), feat_dim)).astype(np.float32)
    return fld.LatentField(tree, f)


def test_constant_stub_partition_of_unity():
    tree = sphere_octree()
    field = make_field(tree)
    rng = np.random.default_rng(1)
    pts = rng.uniform(-1, 1, (500, 3))
    vals = fld.batched_eval(field, ConstStub(0.37), pts)
    assert np.allclose(vals, 0.37, atol=1e-12)


def test_two_equal_leaves_midpoint():
    # full depth-1 octree: 8 equal leaves; feature channel 0 encodes x-side
    tree = geo.octree_from_nonempty([[], np.arange(8)], max_depth=1)
    ds, cs = tree.leaves()
    x, _, _ = geo.morton_decode(cs, 1)
    f = x.astype(np.float32)[:, None]  # 0 on -x side, 1 on +x side
    field = fld.LatentField(tree, f)
    # equidistant in x from both centers, at a y/z cell center
    val = fld.mpu_eval(field, FeatureStub(), np.array([0.0, -0.5, -0.5]))
    assert val == pytest.approx(0.5, abs=1e-12)


def test_matches_naive_loop_oracle():
    tree = sphere_octree(max_depth=4)
    dec_store = ParameterStore(dtype=np.float64)
    dec = fld.FieldDecoder(dec_store, feat_dim=6, seed=3)
    field = make_field(tree, feat_dim=6, seed=4)
    rng = np.random.default_rng(5)
    pts = rng.uniform(-1, 1, (1000, 3))
    fast = fld.batched_eval(field, dec, pts)
    slow = naive_eval(tree, field.f, dec, pts)
    assert rel_err(fast, slow) < 1e-6


def test_invariant_to_leaf_enumeration_order():
    tree = sphere_octree(max_depth=3)
    dec = FeatureStub()
    field = make_field(tree, feat_dim=2, seed=6)
    rng = np.random.default_rng(7)
    pts = rng.uniform(-1, 1, (50, 3))
    a = naive_eval(tree, field.f, dec, pts, shuffle_seed=None)
    b = naive_eval(tree, field.f, dec, pts, shuffle_seed=123)
    fast = fld.batched_eval(field, dec, pts)
    assert rel_err(a, b) < 1e-9
    assert rel_err(fast, a) < 1e-6


def test_batched_matches_pointwise():
    tree = sphere_octree(max_depth=4)
    store = ParameterStore(dtype=np.float64)
    dec = fld.FieldDecoder(store, feat_dim=6, seed=8)
    field = make_field(tree, feat_dim=6, seed=9)
    rng = np.random.default_rng(10)
    pts = rng.uniform(-1, 1, (40, 3))
    batched = fld.batched_eval(field, dec, pts)
    single = np.array([fld.mpu_eval(field, dec, p) for p in pts])
    assert rel_err(batched, single) < 1e-6


def test_out_of_domain_raises():
    tree = sphere_octree(max_depth=3)
    field = make_field(tree)
    with pytest.raises(OutOfDomain):
        fld.mpu_eval(field, ConstStub(0.0), np.array([0.0, 0.0, 1.5]))


def test_partition_of_unity_normalized_weights():
    tree = sphere_octree(max_depth=5, n=2000)
    rng = np.random.default_rng(11)
    pts = rng.uniform(-1, 1, (10_000, 3))
    pairs = fld.support_pairs(tree, pts)
    den = pairs.qplan.reduce(pairs.w)
    assert np.all(den > 1e-6)
    norm_sum = pairs.qplan.reduce(pairs.w / den[pairs.query_idx])
    assert np.abs(norm_sum - 1.0).max() < 1e-6


def test_continuity_across_leaf_faces():
    tree = sphere_octree(max_depth=4)
    store = ParameterStore(dtype=np.float64)
    dec = fld.FieldDecoder(store, feat_dim=6, seed=12)
    field = make_field(tree, feat_dim=6, seed=13)
    rng = np.random.default_rng(14)
    # straddle points across x-faces of random depth-4 cells
    n = 1000
    k = rng.integers(1, 16, (n, 3))
    q = np.stack([-1 + k[:, 0] * (2 / 16), rng.uniform(-0.99, 0.99, n), rng.uniform(-0.99, 0.99, n)], 1)
    delta = np.array([1e-5, 0.0, 0.0])
    hi = fld.batched_eval(field, dec, np.clip(q + delta, -1, 1))
    lo = fld.batched_eval(field, dec, np.clip(q - delta, -1, 1))
    assert np.abs(hi - lo).max() <= 1e-3


def test_grad_constant_stub_zero():
    tree = sphere_octree(max_depth=3)
    field = make_field(tree)
    g = fld.mpu_grad(field, ConstStub(2.5), np.array([0.1, 0.2, -0.3]))
    assert np.allclose(g, 0.0, atol=1e-12)


def test_grad_linear_stub_single_leaf_scale():
    # single-leaf tree: root only (max_depth 0)
    tree = geo.Octree(max_depth=0, codes=[np.array([0], np.uint64)], nonempty=[np.array([True])])
    field = fld.LatentField(tree, np.zeros((1, 1), np.float32))
    r = geo.cell_size(0)  # edge length 2
    g = fld.mpu_grad(field, LinearStub(), np.array([0.3, -0.2, 0.5]))
    assert np.allclose(g, [1.0 / r, 0.0, 0.0], atol=1e-12)


def test_grad_matches_central_differences():
    tree = sphere_octree(max_depth=4)
    store = ParameterStore(dtype=np.float64)
    dec = fld.FieldDecoder(store, feat_dim=6, seed=15)
    field = fld.LatentField(tree, np.random.default_rng(16).standard_normal((tree.num_leaves(), 6)))
    rng = np.random.default_rng(17)
    h = 1e-4
    checked = 0
    while checked < 100:
        p = rng.uniform(-0.99, 0.99, 3)
        # keep away from support kinks: off cell-face planes at all depths
        u = (p + 1) / geo.cell_size(5)
        if np.any(np.abs(u - np.round(u)) < 0.02) or np.any(np.abs(u - np.round(u - 0.5) - 0.5) < 0.02):
            continue
        g = fld.mpu_grad(field, dec, p)
        num = np.zeros(3)
        for a in range(3):
            e = np.zeros(3)
            e[a] = h
            num[a] = (fld.mpu_eval(field, dec, p + e) - fld.mpu_eval(field, dec, p - e)) / (2 * h)
        assert rel_err(g, num) < 1e-4, f"point {p}"
        checked += 1


def test_color_eval_constant_and_range():
    tree = sphere_octree(max_depth=3)
    store = ParameterStore(dtype=np.float64)
    dec = fld.FieldDecoder(store, feat_dim=4, color_dim=4, seed=18)
    rng = np.random.default_rng(19)
    field = fld.LatentField(
        tree,
        rng.standard_normal((tree.num_leaves(), 4)).astype(np.float32),
        rng.standard_normal((tree.num_leaves(), 4)).astype(np.float32),
    )
    pts = rng.uniform(-1, 1, (200, 3))
    cols = fld.batched_eval_color(field, dec, pts)
    assert cols.shape == (200, 3)
    assert np.all((cols > 0) & (cols < 1))
    single = fld.mpu_eval_color(field, dec, pts[0])
    assert np.allclose(single, cols[0], atol=1e-6)


def test_color_matches_naive_blend():
    tree = sphere_octree(max_depth=3)
    store = ParameterStore(dtype=np.float64)
    dec = fld.FieldDecoder(store, feat_dim=4, color_dim=4, seed=20)
    rng = np.random.default_rng(21)
    field = fld.LatentField(
        tree,
        rng.standard_normal((tree.num_leaves(), 4)),
        rng.standard_normal((tree.num_leaves(), 4)),
    )
    pts = rng.uniform(-1, 1, (100, 3))
    fast = fld.batched_eval_color(field, dec, pts)
    centers, sizes = leaf_geometry(tree)
    slow = np.zeros_like(fast)
    for qi, p in enumerate(pts):
        num = np.zeros(3)
        den = 0.0
        for i in range(len(sizes)):
            x = (p - centers[i]) / sizes[i]
            w = fld.hat_weight(x)
            if w > 0:
                num += w * dec.color(x[None], field.c[i][None])[0]
                den += w
        slow[qi] = num / den
    assert rel_err(fast, slow) < 1e-6


def test_tape_eval_matches_numeric_and_gradchecks():
    tree = sphere_octree(max_depth=3)
    with ad.use_dtype(np.float64):
        store = ParameterStore(dtype=np.float64)
        dec = fld.FieldDecoder(store, feat_dim=5, color_dim=4, seed=22)
        rng = np.random.default_rng(23)
        f0 = rng.standard_normal((tree.num_leaves(), 5))
        c0 = rng.standard_normal((tree.num_leaves(), 4))
        pts = rng.uniform(-0.9, 0.9, (30, 3))
        pairs = fld.support_pairs(tree, pts)

        f_t = ad.Tensor(f0.copy(), requires_grad=True)
        c_t = ad.Tensor(c0.copy(), requires_grad=True)
        F, G, C = fld.eval_tape(pairs, f_t, dec, with_grad=True, with_color=True, c_tensor=c_t)

        field = fld.LatentField(tree, f0, c0)
        assert rel_err(F.data[:, 0], fld.batched_eval(field, dec, pts)) < 1e-12
        assert rel_err(G.data, fld.batched_grad(field, dec, pts)) < 1e-12
        assert rel_err(C.data, fld.batched_eval_color(field, dec, pts)) < 1e-12

        # gradcheck through values+grads into features and a decoder weight
        proj_f = rng.standard_normal(F.data.shape)
        proj_g = rng.standard_normal(G.data.shape)
        loss = ad.add(ad.sum_(ad.mul(F, proj_f)), ad.sum_(ad.mul(G, proj_g)))
        loss.backward()

        def loss_of_f(fv):
            fl = fld.LatentField(tree, fv)
            v = fld.batched_eval(fl, dec, pts)
            g = fld.batched_grad(fl, dec, pts)
            return float((v * proj_f[:, 0]).sum() + (g * proj_g).sum())

        h = 1e-6
        idx = [(0, 0), (3, 2), (7, 4)]
        for i, j in idx:
            fp = f0.copy()
            fp[i, j] += h
            fm = f0.copy()
            fm[i, j] -= h
            num = (loss_of_f(fp) - loss_of_f(fm)) / (2 * h)
            assert abs(f_t.grad[i, j] - num) / max(abs(num), 1e-9) < 1e-5

        w0 = dec.sdf_params[0]
        orig = w0.data.copy()
        for i, j in [(0, 0), (4, 10)]:
            w0.data = orig.copy()
            w0.data[i, j] += h
            fp = loss_of_f(f0)
            w0.data = orig.copy()
            w0.data[i, j] -= h
            fm = loss_of_f(f0)
            w0.data = orig
            num = (fp - fm) / (2 * h)
            assert abs(w0.grad[i, j] - num) / max(abs(num), 1e-9) < 1e-5
