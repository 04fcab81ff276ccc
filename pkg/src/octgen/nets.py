"""Dual-octree-graph network blocks and the nested multiscale U-Net.

The "level-d graph" of an octree is the dual graph of the tree truncated at
depth d: vertices are [leaves shallower than d] + [all depth-d nodes], in
canonical (depth, morton) order.  Message passing applies seven per-kind
kernels (self + 6 face directions); per-kind neighbor means are computed
with one stacked sparse matmul per layer.  Moving between levels pools all
8 children onto their parent (or broadcasts back), identity for vertices
that exist on both levels.

The denoiser U-Net is built in nested stages.  Stage 1 owns the coarsest
two levels; stage i wraps stage i-1's body (shared parameter objects, not
copies) between a fresh pair of encoder/decoder towers, fusing its own
downsampled features with the inner stage's input head applied to the known
clean signal at that level.  Training stage i freezes every parameter of
stages < i.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from . import geometry as geo
from .autodiff import GraphPlan, SegPlan, Tensor
from .errors import MissingTrunk, NotFullGrid, OctgenError

EMB_DIM = 128


# -- graph containers ------------------------------------------------------------


@dataclass
class LevelGraph:
    depth: int
    n: int
    depths: np.ndarray  # (n,) vertex key depths
    codes: np.ndarray  # (n,) vertex key codes
    plan: GraphPlan  # stacked per-kind aggregation
    node_rows: np.ndarray  # rows with vertex depth == level depth
    sample_idx: np.ndarray  # (n,) batch element per vertex
    batch: int = 1
    emb_plan: SegPlan = None

    def __post_init__(self):
        if self.emb_plan is None:
            self.emb_plan = SegPlan(self.sample_idx, self.batch, assume_sorted=True)


class PoolLink:
    """Sparse fine<->coarse maps: ``down`` is the child-mean / identity
    matrix (n_coarse x n_fine), ``up`` the broadcast matrix (its binary
    transpose)."""

    __slots__ = ("parent_row", "n_fine", "n_coarse", "_mats")

    def __init__(self, parent_row, n_fine, n_coarse):
        self.parent_row = parent_row
        self.n_fine = int(n_fine)
        self.n_coarse = int(n_coarse)
        self._mats = {}

    def mats(self, dtype):
        key = np.dtype(dtype).name
        if key not in self._mats:
            counts = np.bincount(self.parent_row, minlength=self.n_coarse)
            vals = (1.0 / counts[self.parent_row]).astype(dtype)
            fine = np.arange(self.n_fine)
            down = sp.csr_matrix((vals, (self.parent_row, fine)), shape=(self.n_coarse, self.n_fine))
            down_t = sp.csr_matrix(down.T)
            ones = np.ones(self.n_fine, dtype)
            up = sp.csr_matrix((ones, (fine, self.parent_row)), shape=(self.n_fine, self.n_coarse))
            up_t = sp.csr_matrix(up.T)
            self._mats[key] = (down, down_t, up, up_t)
        return self._mats[key]


def build_level_graph(octree: geo.Octree, depth: int) -> LevelGraph:
    sub = geo.truncate(octree, depth) if depth < octree.max_depth else octree
    g = geo.dual_graph(sub)
    n = g.num_vertices
    # edge (i, j, kind): j lies on i's `kind` side; i receives mean of f_j
    counts = np.zeros((geo.N_KINDS, n), np.int64)
    np.add.at(counts, (g.kind, g.src), 1)
    vals = 1.0 / counts[g.kind, g.src]
    rows = g.kind.astype(np.int64) * n + g.src
    plan = GraphPlan(n, geo.N_KINDS, rows, g.dst, vals)
    node_rows = np.flatnonzero(g.depths == depth)
    return LevelGraph(
        depth=depth,
        n=n,
        depths=g.depths,
        codes=g.codes,
        plan=plan,
        node_rows=node_rows,
        sample_idx=np.zeros(n, np.int64),
    )


def build_pool_link(fine: LevelGraph, coarse: LevelGraph) -> PoolLink:
    parent_row = np.empty(fine.n, np.int64)
    is_node = fine.depths == fine.depth
    pcodes = fine.codes[is_node] >> np.uint64(3)
    parent_row[is_node] = _find_rows(coarse, fine.depth - 1, pcodes)
    for d in np.unique(fine.depths[~is_node]):
        m = ~is_node & (fine.depths == d)
        parent_row[m] = _find_rows(coarse, int(d), fine.codes[m])
    return PoolLink(parent_row, fine.n, coarse.n)


def _find_rows(lg: LevelGraph, depth: int, codes):
    lo = np.searchsorted(lg.depths, depth, side="left")
    hi = np.searchsorted(lg.depths, depth, side="right")
    pos = np.searchsorted(lg.codes[lo:hi], codes)
    if np.any(pos >= hi - lo) or np.any(lg.codes[lo:hi][pos] != codes):
        raise OctgenError("vertex lookup failed between levels")
    return lo + pos


@dataclass
class GraphPyramid:
    """Per-shape cache of level graphs and inter-level pool links."""

    octree: geo.Octree
    levels: dict  # depth -> LevelGraph
    pools: dict  # depth -> PoolLink (depth -> depth-1)


def build_pyramid(octree: geo.Octree, depths) -> GraphPyramid:
    depths = sorted(set(depths), reverse=True)
    levels = {d: build_level_graph(octree, d) for d in depths}
    pools = {}
    for d in depths:
        if d - 1 in levels:
            pools[d] = build_pool_link(levels[d], levels[d - 1])
    return GraphPyramid(octree=octree, levels=levels, pools=pools)


_FULL_GRID_CACHE: dict = {}


def full_grid_octree(depth: int = 4) -> geo.Octree:
    """Full octree to ``depth`` with every node nonempty (16^3 grid at 4)."""
    key = ("oct", depth)
    if key not in _FULL_GRID_CACHE:
        codes = [np.arange(8**d, dtype=np.uint64) for d in range(depth + 1)]
        flags = [np.ones(8**d, dtype=bool) for d in range(depth + 1)]
        _FULL_GRID_CACHE[key] = geo.Octree(max_depth=depth, codes=codes, nonempty=flags)
    return _FULL_GRID_CACHE[key]


def full_grid_pyramid(top: int = 4, bottom: int = 3) -> GraphPyramid:
    key = ("pyr", top, bottom)
    if key not in _FULL_GRID_CACHE:
        _FULL_GRID_CACHE[key] = build_pyramid(full_grid_octree(top), range(bottom, top + 1))
    return _FULL_GRID_CACHE[key]


# -- batching --------------------------------------------------------------------


def batch_level_graphs(graphs: list[LevelGraph]) -> LevelGraph:
    if len(graphs) == 1:
        return graphs[0]
    ns = np.array([g.n for g in graphs])
    v_off = np.concatenate([[0], np.cumsum(ns)[:-1]])
    n_total = int(ns.sum())
    rows, cols, vals = [], [], []
    for g, off in zip(graphs, v_off):
        r, c, v = g.plan._coo
        kind = r // g.n
        local = r - kind * g.n
        rows.append(kind * n_total + local + off)
        cols.append(c + off)
        vals.append(v)
    plan = GraphPlan(n_total, geo.N_KINDS, np.concatenate(rows), np.concatenate(cols), np.concatenate(vals))
    return LevelGraph(
        depth=graphs[0].depth,
        n=n_total,
        depths=np.concatenate([g.depths for g in graphs]),
        codes=np.concatenate([g.codes for g in graphs]),
        plan=plan,
        node_rows=np.concatenate([g.node_rows + o for g, o in zip(graphs, v_off)]),
        sample_idx=np.concatenate([np.full(g.n, i, np.int64) for i, g in enumerate(graphs)]),
        batch=len(graphs),
    )


def batch_pool_links(pools: list[PoolLink]) -> PoolLink:
    if len(pools) == 1:
        return pools[0]
    c_off = np.concatenate([[0], np.cumsum([p.n_coarse for p in pools])[:-1]])
    parent_row = np.concatenate([p.parent_row + o for p, o in zip(pools, c_off)])
    return PoolLink(parent_row, sum(p.n_fine for p in pools), sum(p.n_coarse for p in pools))


@dataclass
class Bundle:
    """Batched level graphs + pool links + per-level conditioning signals."""

    batch: int
    levels: dict  # depth -> LevelGraph (batched)
    pools: dict  # depth -> PoolLink
    signals: dict = field(default_factory=dict)  # depth -> raw clean signal (n, C)


def batch_pyramids(pyramids: list[GraphPyramid], depths) -> Bundle:
    depths = sorted(set(depths), reverse=True)
    levels = {}
    pools = {}
    for d in depths:
        levels[d] = batch_level_graphs([p.levels[d] for p in pyramids])
        if all(d in p.pools for p in pyramids):
            pools[d] = batch_pool_links([p.pools[d] for p in pyramids])
    return Bundle(batch=len(pyramids), levels=levels, pools=pools)


# -- neural blocks ------------------------------------------------------------


def _he(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def _eye(a, b):
    return np.eye(a, b)


class GraphConv:
    """Seven per-kind kernels; messages are per-kind means over incoming
    edges, so on a full grid this is a 6-neighbor + self convolution."""

    def __init__(self, store, name, c_in, c_out, rng, zero_init=False):
        w = np.zeros((geo.N_KINDS * c_in, c_out)) if zero_init else _he(rng, (geo.N_KINDS * c_in, c_out), geo.N_KINDS * c_in)
        self.w = store.param(f"{name}.w", w)
        self.b = store.param(f"{name}.b", np.zeros(c_out))
        self.c_in = c_in

    def __call__(self, x, lg: LevelGraph):
        return ad.add(ad.matmul(ad.graph_cat(x, lg.plan), self.w), self.b)


class Linear:
    def __init__(self, store, name, c_in, c_out, rng, init="he"):
        if init == "he":
            w = _he(rng, (c_in, c_out), c_in)
        elif init == "eye":
            w = _eye(c_in, c_out)
        elif init == "zero":
            w = np.zeros((c_in, c_out))
        else:
            raise OctgenError(f"unknown init {init}")
        self.w = store.param(f"{name}.w", w)
        self.b = store.param(f"{name}.b", np.zeros(c_out))

    def __call__(self, x):
        return ad.add(ad.matmul(x, self.w), self.b)


class Norm:
    def __init__(self, store, name, c, group_size=8):
        self.gamma = store.param(f"{name}.gamma", np.ones(c))
        self.beta = store.param(f"{name}.beta", np.zeros(c))
        self.group_size = group_size if c % group_size == 0 else c

    def __call__(self, x):
        return ad.group_norm(x, self.gamma, self.beta, group_size=self.group_size)


class ResBlock:
    """norm -> silu -> conv -> (+emb proj) -> norm -> silu -> conv, + skip."""

    def __init__(self, store, name, c_in, c_out, rng, emb_dim=EMB_DIM):
        self.norm1 = Norm(store, f"{name}.norm1", c_in)
        self.conv1 = GraphConv(store, f"{name}.conv1", c_in, c_out, rng)
        self.emb = Linear(store, f"{name}.emb", emb_dim, c_out, rng, init="zero") if emb_dim else None
        self.norm2 = Norm(store, f"{name}.norm2", c_out)
        self.conv2 = GraphConv(store, f"{name}.conv2", c_out, c_out, rng, zero_init=True)
        self.skip = Linear(store, f"{name}.skip", c_in, c_out, rng, init="eye") if c_in != c_out else None

    def __call__(self, x, lg: LevelGraph, emb=None):
        h = self.conv1(ad.silu(self.norm1(x)), lg)
        if emb is not None and self.emb is not None:
            proj = self.emb(ad.silu(emb))  # (B, C)
            h = ad.add(h, ad.gather(proj, lg.sample_idx, plan=lg.emb_plan))
        h = self.conv2(ad.silu(self.norm2(h)), lg)
        return ad.add(h, self.skip(x) if self.skip else x)


class Tower:
    def __init__(self, store, name, c_in, c_out, rng, n_blocks, emb_dim=EMB_DIM):
        self.blocks = [
            ResBlock(store, f"{name}.{i}", c_in if i == 0 else c_out, c_out, rng, emb_dim)
            for i in range(n_blocks)
        ]

    def __call__(self, x, lg, emb=None):
        for blk in self.blocks:
            x = blk(x, lg, emb)
        return x


class Down:
    """Child-to-parent mean pool followed by a linear (identity at init)."""

    def __init__(self, store, name, c_in, c_out, rng):
        self.lin = Linear(store, f"{name}.lin", c_in, c_out, rng, init="eye")

    def __call__(self, x, pool: PoolLink):
        down, down_t, _, _ = pool.mats(x.dtype.type)
        return self.lin(ad.spmm(down, down_t, x))


class Up:
    """Parent-to-child broadcast followed by a linear (identity at init)."""

    def __init__(self, store, name, c_in, c_out, rng):
        self.lin = Linear(store, f"{name}.lin", c_in, c_out, rng, init="eye")

    def __call__(self, x, pool: PoolLink):
        _, _, up, up_t = pool.mats(x.dtype.type)
        return self.lin(ad.spmm(up, up_t, x))


def timestep_embedding(t, dim=EMB_DIM, dtype=np.float32):
    """Sinusoidal embedding of t in [0,1]; frequencies 10000^(-k/half).

    t is scaled by 1000 so the finest frequency resolves the unit interval.
    """
    t = np.atleast_1d(np.asarray(t, np.float64))
    half = dim // 2
    freqs = 10000.0 ** (-np.arange(half) / half)
    ang = 1000.0 * t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(dtype)


class ConditionEmbedder:
    """Sinusoidal timestep embedding plus learned label embedding (added)."""

    def __init__(self, store, name, n_labels, rng, dim=EMB_DIM):
        self.dim = dim
        self.labels = (
            store.param(f"{name}.label", rng.standard_normal((n_labels, dim)) * 0.02)
            if n_labels
            else None
        )

    def __call__(self, t, labels=None, dtype=np.float32):
        emb = Tensor(timestep_embedding(t, self.dim, dtype))
        if labels is not None:
            if self.labels is None:
                raise OctgenError("label given but embedder has no label table")
            emb = ad.add(emb, ad.gather(self.labels, np.atleast_1d(labels)))
        return emb


# -- VAE networks ---------------------------------------------------------------


class VaeEncoder:
    """Downsamples level-D leaf features to latent statistics at the latent
    level: input head, resblock tower per level, pooling between levels."""

    def __init__(self, store, cfg, rng, name="vae.enc"):
        self.cfg = cfg
        chan = cfg.channels_by_depth()
        self.head = Linear(store, f"{name}.head", cfg.input_channels, chan[cfg.max_depth], rng)
        self.towers = {}
        self.downs = {}
        for d in range(cfg.max_depth, cfg.latent_depth - 1, -1):
            self.towers[d] = Tower(store, f"{name}.tower{d}", chan[d], chan[d], rng, cfg.blocks, emb_dim=None)
            if d > cfg.latent_depth:
                self.downs[d] = Down(store, f"{name}.down{d}", chan[d], chan[d - 1], rng)
        c_lat = chan[cfg.latent_depth]
        self.mu = Linear(store, f"{name}.mu", c_lat, cfg.latent_dim, rng)
        self.logvar = Linear(store, f"{name}.logvar", c_lat, cfg.latent_dim, rng, init="zero")

    def __call__(self, bundle: Bundle, feats):
        h = self.head(feats if isinstance(feats, Tensor) else Tensor(feats))
        for d in range(self.cfg.max_depth, self.cfg.latent_depth - 1, -1):
            h = self.towers[d](h, bundle.levels[d])
            if d > self.cfg.latent_depth:
                h = self.downs[d](h, bundle.pools[d])
        return self.mu(h), self.logvar(h)


class VaeDecoder:
    """Grows the latent octree back to depth D, predicting split logits on
    the way up and per-leaf field features at the finest level."""

    def __init__(self, store, cfg, rng, name="vae.dec"):
        self.cfg = cfg
        chan = cfg.channels_by_depth()
        self.head = Linear(store, f"{name}.head", cfg.latent_dim, chan[cfg.latent_depth], rng)
        self.towers = {}
        self.ups = {}
        self.split_heads = {}
        for d in range(cfg.latent_depth, cfg.max_depth + 1):
            self.towers[d] = Tower(store, f"{name}.tower{d}", chan[d], chan[d], rng, cfg.blocks, emb_dim=None)
            if d < cfg.max_depth:
                self.split_heads[d] = Linear(store, f"{name}.split{d}", chan[d], 1, rng, init="zero")
                self.ups[d + 1] = Up(store, f"{name}.up{d + 1}", chan[d], chan[d + 1], rng)
        c_top = chan[cfg.max_depth]
        self.feat_head = Linear(store, f"{name}.feat", c_top, cfg.feat_dim, rng)
        self.color_head = Linear(store, f"{name}.color", c_top, cfg.color_dim, rng) if cfg.color_dim else None

    def __call__(self, bundle: Bundle, z):
        """Teacher-forced decode on a known structure bundle.

        Returns (split_logits: {depth: (n_depth_nodes, 1)}, feats, colors).
        """
        h = self.head(z if isinstance(z, Tensor) else Tensor(z))
        split_logits = {}
        for d in range(self.cfg.latent_depth, self.cfg.max_depth + 1):
            lg = bundle.levels[d]
            h = self.towers[d](h, lg)
            if d < self.cfg.max_depth:
                split_logits[d] = self.split_heads[d](ad.gather(h, lg.node_rows))
                h = self.ups[d + 1](h, bundle.pools[d + 1])
        feats = self.feat_head(h)
        colors = self.color_head(h) if self.color_head else None
        return split_logits, feats, colors


# -- nested denoiser U-Net -----------------------------------------------------


class UNetStage:
    """One stage of the nested U-Net; ``inner`` is the previous stage (shared
    by reference) or None for the base stage."""

    def __init__(self, store, name, cfg, rng, inner=None):
        self.cfg = cfg  # StageCfg
        self.inner = inner
        c_top, c_mid = cfg.channels
        n = cfg.blocks
        self.in_head = Linear(store, f"{name}.in_head", cfg.raw_channels, c_top, rng)
        self.embedder = ConditionEmbedder(store, f"{name}.cond", cfg.n_labels, rng)
        self.enc_top = Tower(store, f"{name}.enc_top", c_top, c_top, rng, n)
        self.down_top = Down(store, f"{name}.down_top", c_top, c_mid, rng)
        self.enc_mid = Tower(store, f"{name}.enc_mid", c_mid, c_mid, rng, n)
        if inner is not None:
            c_inner = inner.cfg.channels[0]
            self.down_mid = Down(store, f"{name}.down_mid", c_mid, c_inner, rng)
            fusion = np.vstack([_eye(c_inner, c_inner), np.zeros((c_inner, c_inner))])
            self.fusion_w = store.param(f"{name}.fusion.w", fusion)
            self.fusion_b = store.param(f"{name}.fusion.b", np.zeros(c_inner))
            self.up_mid = Up(store, f"{name}.up_mid", c_inner, c_mid, rng)
            self.dec_mid = Tower(store, f"{name}.dec_mid", 2 * c_mid, c_mid, rng, n)
        self.up_top = Up(store, f"{name}.up_top", c_mid, c_top, rng)
        self.dec_top = Tower(store, f"{name}.dec_top", 2 * c_top, c_top, rng, n)
        self.out_norm = Norm(store, f"{name}.out_norm", c_top)
        self.out_head = Linear(store, f"{name}.out_head", c_top, cfg.raw_channels, rng, init="zero")

    def body(self, h, bundle: Bundle, emb):
        """c_top features at the stage's top level -> same shape."""
        top, mid = self.cfg.level, self.cfg.level - 1
        h = self.enc_top(h, bundle.levels[top], emb)
        s_top = h
        h = self.down_top(h, bundle.pools[top])
        h = self.enc_mid(h, bundle.levels[mid], emb)
        if self.inner is not None:
            s_mid = h
            h = self.down_mid(h, bundle.pools[mid])
            inner_lvl = self.inner.cfg.level
            cond = self.inner.in_head(Tensor(bundle.signals[inner_lvl]))
            h = ad.add(ad.matmul(ad.concat([h, cond], axis=1), self.fusion_w), self.fusion_b)
            h = self.inner.body(h, bundle, emb)
            h = self.up_mid(h, bundle.pools[mid])
            h = self.dec_mid(ad.concat([h, s_mid], axis=1), bundle.levels[mid], emb)
        h = self.up_top(h, bundle.pools[top])
        return self.dec_top(ad.concat([h, s_top], axis=1), bundle.levels[top], emb)

    def __call__(self, bundle: Bundle, x, t, labels=None):
        emb = self.embedder(t, labels, dtype=x.dtype.type if isinstance(x, Tensor) else np.float32)
        h = self.in_head(x if isinstance(x, Tensor) else Tensor(x))
        h = self.body(h, bundle, emb)
        return self.out_head(ad.silu(self.out_norm(h)))


class DenoiseUNet:
    """Stack of nested stages sharing trunk weights by reference."""

    def __init__(self, store, stage_cfgs, rng, name="unet"):
        self.stages = []
        inner = None
        for i, cfg in enumerate(stage_cfgs, start=1):
            stage = UNetStage(store, f"{name}.stage{i}", cfg, rng, inner=inner)
            self.stages.append(stage)
            inner = stage

    def forward(self, stage_idx: int, bundle: Bundle, x, t, labels=None):
        """Denoise with stage ``stage_idx`` (1-based)."""
        stage = self.stages[stage_idx - 1]
        top = stage.cfg.level
        lg = bundle.levels.get(top)
        if lg is None:
            raise OctgenError(f"bundle missing level {top}")
        if stage_idx == 1 and lg.n != bundle.batch * 8**top:
            raise NotFullGrid(f"stage 1 expects the full {2**top}^3 grid")
        if stage_idx > 1:
            inner_lvl = self.stages[stage_idx - 2].cfg.level
            if inner_lvl not in bundle.signals:
                raise MissingTrunk(f"bundle missing clean signal at level {inner_lvl}")
        xs = x if isinstance(x, Tensor) else Tensor(x)
        if xs.shape[0] != lg.n:
            raise OctgenError(f"input rows {xs.shape[0]} != level-{top} vertices {lg.n}")
        return stage(bundle, xs, t, labels)
