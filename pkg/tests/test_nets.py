"""Graph pyramid plumbing, conv blocks, nested U-Net contracts."""

import numpy as np
import pytest

from octgen import autodiff as ad
from octgen import geometry as geo
from octgen import nets
from octgen.config import Config, StageCfg
from octgen.errors import NotFullGrid
from octgen.optim import ParameterStore

from helpers import rel_err


def small_tree(seed=0, max_depth=6, n=300):
    rng = np.random.default_rng(seed)
    pts = rng.standard_normal((n, 3))
    pts = 0.45 * pts / np.linalg.norm(pts, axis=1, keepdims=True)
    return geo.build_from_points(pts, max_depth)


def desk_config():
    cfg = Config()
    cfg.diffusion.stage_channels = [[16, 32], [8, 16]]
    cfg.diffusion.blocks = 1
    cfg.diffusion.n_labels = 2
    return cfg


def make_unet(cfg, dtype=np.float32, seed=0):
    store = ParameterStore(dtype=dtype)
    rng = np.random.default_rng(seed)
    return store, nets.DenoiseUNet(store, cfg.stage_cfgs(), rng)


def randomize_store(store, seed=0, scale=0.1):
    """Give every parameter weight so zero-initialized branches (residual
    second convs, embedding projections, output heads) carry signal."""
    rng = np.random.default_rng(seed)
    for _, t in store.items():
        t.data[:] = (rng.standard_normal(t.data.shape) * scale).astype(t.data.dtype)


def stage1_bundle(batch=1):
    fg = nets.full_grid_pyramid()
    return nets.batch_pyramids([fg] * batch, [4, 3])


def stage2_bundle(tree, batch=1):
    pyr = nets.build_pyramid(tree, [6, 5, 4, 3])
    bundle = nets.batch_pyramids([pyr] * batch, [6, 5, 4, 3])
    sig = geo.extract_split_signal(tree, 4)
    clean = np.tile(2.0 * sig.values - 1.0, (batch, 1))
    bundle.signals[4] = clean.astype(np.float32)
    return bundle


# -- pyramid plumbing ---------------------------------------------------------


def test_level_vertex_sets():
    tree = small_tree()
    pyr = nets.build_pyramid(tree, [6, 5, 4, 3])
    # level 4 and 3 are the full grids regardless of shape
    assert pyr.levels[4].n == 4096 and pyr.levels[3].n == 512
    lv6 = pyr.levels[6]
    # level-6 vertices = leaves shallower than 6 + all depth-6 nodes
    ds, _ = geo.truncate(tree, 6).leaves()
    assert lv6.n == len(ds)
    assert np.array_equal(lv6.depths, ds)


def test_pool_map_counts():
    tree = small_tree(1)
    pyr = nets.build_pyramid(tree, [6, 5])
    pm = pyr.pools[6]
    # every coarse vertex receives either 1 (identity) or 8 (children) rows
    counts = np.bincount(pm.parent_row, minlength=pm.n_coarse)
    assert set(np.unique(counts)) <= {1, 8}
    assert pm.n_coarse == pyr.levels[5].n
    lv6, lv5 = pyr.levels[6], pyr.levels[5]
    # identity-mapped vertices keep their key
    fine_leaf = lv6.depths < 6
    assert np.array_equal(lv5.codes[pm.parent_row[fine_leaf]], lv6.codes[fine_leaf])
    assert np.array_equal(lv5.depths[pm.parent_row[fine_leaf]], lv6.depths[fine_leaf])


def test_down_up_identity_at_init_on_constants():
    tree = small_tree(2)
    pyr = nets.build_pyramid(tree, [6, 5])
    store = ParameterStore()
    rng = np.random.default_rng(0)
    down = nets.Down(store, "d", 8, 12, rng)
    up = nets.Up(store, "u", 12, 8, rng)
    x = ad.Tensor(np.ones((pyr.levels[6].n, 8), np.float32))
    pooled = down(x, pyr.pools[6])
    back = up(pooled, pyr.pools[6])
    assert np.allclose(back.data, 1.0, atol=1e-6)


def test_batching_matches_single():
    tree = small_tree(3)
    pyr = nets.build_pyramid(tree, [6, 5])
    b2 = nets.batch_pyramids([pyr, pyr], [6, 5])
    assert b2.levels[6].n == 2 * pyr.levels[6].n
    assert np.array_equal(b2.levels[6].sample_idx[: pyr.levels[6].n], np.zeros(pyr.levels[6].n))
    store = ParameterStore()
    rng = np.random.default_rng(1)
    conv = nets.GraphConv(store, "c", 4, 4, rng)
    x1 = np.random.default_rng(2).standard_normal((pyr.levels[6].n, 4)).astype(np.float32)
    y1 = conv(ad.Tensor(x1), pyr.levels[6]).data
    y2 = conv(ad.Tensor(np.vstack([x1, x1])), b2.levels[6]).data
    assert rel_err(y2[: len(y1)], y1) < 1e-6
    assert rel_err(y2[len(y1) :], y1) < 1e-6


def test_graphconv_full_grid_is_6_neighbor_conv():
    # on the full 16^3 grid each vertex has one edge per present kind
    fg = nets.full_grid_pyramid().levels[4]
    store = ParameterStore()
    rng = np.random.default_rng(3)
    conv = nets.GraphConv(store, "c", 2, 3, rng)
    x = np.random.default_rng(4).standard_normal((fg.n, 2)).astype(np.float32)
    y = conv(ad.Tensor(x), fg).data
    # direct dense reference on the voxel grid
    X, Y, Z = geo.morton_decode(fg.codes, 4)
    vox = np.zeros((16, 16, 16, 2), np.float32)
    vox[X, Y, Z] = x
    W = conv.w.data
    ref = np.zeros((fg.n, 3), np.float32)
    coords = np.stack([X, Y, Z], 1)
    for k, off in [(0, (0, 0, 0)), (1, (1, 0, 0)), (2, (-1, 0, 0)), (3, (0, 1, 0)), (4, (0, -1, 0)), (5, (0, 0, 1)), (6, (0, 0, -1))]:
        nb = coords + off
        ok = np.all((nb >= 0) & (nb < 16), axis=1)
        feats = np.zeros((fg.n, 2), np.float32)
        feats[ok] = vox[nb[ok, 0], nb[ok, 1], nb[ok, 2]]
        ref += feats @ W[2 * k : 2 * (k + 1)]
    ref += conv.b.data
    assert rel_err(y, ref) < 1e-5


def test_graphconv_order_equivariance():
    tree = small_tree(4, max_depth=5)
    lg = nets.build_level_graph(tree, 5)
    store = ParameterStore()
    rng = np.random.default_rng(5)
    conv = nets.GraphConv(store, "c", 3, 3, rng)
    x = np.random.default_rng(6).standard_normal((lg.n, 3)).astype(np.float32)
    y = conv(ad.Tensor(x), lg).data
    # relabel vertices with a permutation and rebuild the aggregation plan
    perm = np.random.default_rng(7).permutation(lg.n)
    inv = np.argsort(perm)
    rows, cols, vals = lg.plan._coo
    kind = rows // lg.n
    recv = rows - kind * lg.n
    plan = ad.GraphPlan(lg.n, geo.N_KINDS, kind * lg.n + inv[recv], inv[cols], vals)
    lg_perm = nets.LevelGraph(
        depth=lg.depth, n=lg.n, depths=lg.depths[perm], codes=lg.codes[perm],
        plan=plan, node_rows=inv[lg.node_rows], sample_idx=lg.sample_idx,
    )
    y_perm = conv(ad.Tensor(x[perm]), lg_perm).data
    assert rel_err(y_perm[inv], y) < 1e-5


# -- U-Net contracts ---------------------------------------------------------


def test_stage1_shape_and_determinism():
    cfg = desk_config()
    _, unet = make_unet(cfg, seed=0)
    bundle = stage1_bundle()
    x = np.random.default_rng(0).standard_normal((4096, 8)).astype(np.float32)
    out1 = unet.forward(1, bundle, x, t=np.array([0.5]))
    out2 = unet.forward(1, bundle, x, t=np.array([0.5]))
    assert out1.data.shape == (4096, 8)
    assert np.array_equal(out1.data, out2.data)
    assert np.all(np.isfinite(out1.data))


def test_stage1_rejects_partial_grid():
    cfg = desk_config()
    _, unet = make_unet(cfg)
    tree = small_tree(8)
    pyr = nets.build_pyramid(tree, [6, 5])
    bundle = nets.batch_pyramids([pyr], [6, 5])
    bundle.levels[4] = bundle.levels[6]  # wrong vertex count
    bundle.pools[4] = bundle.pools[6]
    x = np.zeros((bundle.levels[4].n, 8), np.float32)
    with pytest.raises(NotFullGrid):
        unet.forward(1, bundle, x, t=np.array([0.5]))


def test_stage2_shapes_and_labels():
    cfg = desk_config()
    store, unet = make_unet(cfg, seed=1)
    randomize_store(store, seed=0)
    tree = small_tree(9)
    bundle = stage2_bundle(tree)
    n6 = bundle.levels[6].n
    x = np.random.default_rng(1).standard_normal((n6, 3)).astype(np.float32)
    out = unet.forward(2, bundle, x, t=np.array([0.3]), labels=np.array([1]))
    assert out.data.shape == (n6, 3)
    out_other = unet.forward(2, bundle, x, t=np.array([0.3]), labels=np.array([0]))
    assert not np.array_equal(out.data, out_other.data)


def test_weight_sharing_trunk_mutation_changes_stage2():
    cfg = desk_config()
    store, unet = make_unet(cfg, seed=2)
    randomize_store(store, seed=1)
    tree = small_tree(10)
    bundle = stage2_bundle(tree)
    x = np.random.default_rng(2).standard_normal((bundle.levels[6].n, 3)).astype(np.float32)
    base = unet.forward(2, bundle, x, t=np.array([0.7])).data.copy()
    # mutate a stage-1 tower weight through the stage-1 handle (non-uniform,
    # so normalization cannot cancel it)
    w = unet.stages[0].enc_top.blocks[0].conv1.w
    w.data += np.random.default_rng(5).standard_normal(w.data.shape).astype(w.data.dtype) * 0.5
    changed = unet.forward(2, bundle, x, t=np.array([0.7])).data
    assert not np.allclose(base, changed)


def test_frozen_trunk_receives_no_gradient():
    cfg = desk_config()
    store, unet = make_unet(cfg, seed=3)
    store.freeze("unet.stage1.")
    tree = small_tree(11)
    bundle = stage2_bundle(tree)
    rng = np.random.default_rng(3)
    x = rng.standard_normal((bundle.levels[6].n, 3)).astype(np.float32)
    out = unet.forward(2, bundle, x, t=np.array([0.4]))
    loss = ad.mean(ad.mul(out, out))
    loss.backward()
    for name, t in store.items():
        if name.startswith("unet.stage1."):
            assert t.grad is None, name
    # and stage-2 parameters do get gradients where used
    assert store["unet.stage2.in_head.w"].grad is not None
    assert store["unet.stage2.out_head.w"].grad is not None


def test_stage2_batch2_consistency():
    cfg = desk_config()
    _, unet = make_unet(cfg, seed=4)
    tree = small_tree(12)
    b1 = stage2_bundle(tree, batch=1)
    b2 = stage2_bundle(tree, batch=2)
    n = b1.levels[6].n
    rng = np.random.default_rng(4)
    x = rng.standard_normal((n, 3)).astype(np.float32)
    y1 = unet.forward(2, b1, x, t=np.array([0.2]), labels=np.array([0])).data
    y2 = unet.forward(2, b2, np.vstack([x, x]), t=np.array([0.2, 0.2]), labels=np.array([0, 0])).data
    assert rel_err(y2[:n], y1) < 2e-5
    assert rel_err(y2[n:], y1) < 2e-5


def test_timestep_embedding_shape_and_distinct():
    e = nets.timestep_embedding(np.array([0.0, 0.5, 1.0]))
    assert e.shape == (3, 128)
    assert not np.allclose(e[0], e[1])
    assert np.all(np.abs(e) <= 1.0)


def test_three_stage_configuration_builds():
    cfg = Config()
    cfg.octree.max_depth = 10
    cfg.octree.latent_depth = 8
    cfg.vae.channels = [16, 8, 8]
    cfg.diffusion.stage_channels = [[8, 16], [8, 8], [4, 8]]
    cfg.diffusion.blocks = 1
    cfg = Config.from_dict(cfg.to_dict())
    stages = cfg.stage_cfgs()
    assert [s.level for s in stages] == [4, 6, 8]
    assert [s.kind for s in stages] == ["split", "split", "latent"]
    store, unet = make_unet(cfg, seed=5)
    assert unet.stages[2].inner is unet.stages[1]
    assert unet.stages[1].inner is unet.stages[0]
