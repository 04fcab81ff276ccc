"""Continuous SDF/color fields blended over octree leaves.

Each leaf carries a feature vector; a shared MLP maps (local coordinates,
features) to a local field patch, and patches are blended with compactly
supported linear B-spline weights normalized to a partition of unity:

    F(p) = sum_i w_i(x_i) * Phi(x_i, f_i) / sum_i w_i(x_i)

with x_i = (p - o_i) / r_i, o_i the leaf center and r_i the leaf cell edge
length, and w_i(x) = prod_a max(0, 1 - |x_a|).  Supports of face-adjacent
leaves overlap, which makes F continuous across cells; the containing leaf
always contributes weight >= 1/8, so the denominator never degenerates.

Evaluation has a plain-numpy path (sampling, meshing) and a tape path that
also assembles the spatial gradient of F from primitive ops so training can
differentiate through it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import OutOfDomain
from .geometry import Octree, morton_encode

_W_FLOOR = 1e-30  # measure-zero guard; the containing leaf keeps w >= 1/8


@dataclass
class LatentField:
    """Octree plus per-leaf features, rows in canonical leaf order."""

    octree: Octree
    f: np.ndarray  # (n_leaves, F) geometry features
    c: np.ndarray | None = None  # (n_leaves, F_c) color features

    def __post_init__(self):
        n = self.octree.num_leaves()
        if self.f.shape[0] != n:
            raise ValueError(f"feature rows {self.f.shape[0]} != leaf count {n}")
        if not np.all(np.isfinite(self.f)):
            raise ValueError("non-finite leaf features")


def hat_weight(x):
    """w(x) = prod_a max(0, 1-|x_a|) for local coordinates x (..., 3)."""
    return np.prod(np.maximum(0.0, 1.0 - np.abs(x)), axis=-1)


@dataclass
class SupportPairs:
    """Expanded (query, leaf) pairs whose supports contain each query.

    Pairs are sorted by query index; ``qplan`` segments pair rows back onto
    queries.  All geometry here is parameter-independent, so tape evaluation
    treats these arrays as constants.
    """

    query_idx: np.ndarray  # (P,) int64, nondecreasing
    leaf_rows: np.ndarray  # (P,) int64 rows into the canonical leaf order
    x: np.ndarray  # (P,3) local coordinates in (-1,1)
    w: np.ndarray  # (P,) blend weights
    grad_w: np.ndarray  # (P,3) spatial gradient of w (d/dp)
    inv_r: np.ndarray  # (P,) 1 / leaf edge length
    n_queries: int
    qplan: ad.SegPlan


def support_pairs(octree: Octree, points) -> SupportPairs:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if np.any(np.abs(pts) > 1.0):
        raise OutOfDomain("query points must lie in [-1,1]^3")
    depths, codes = octree.leaves()
    # leaf codes and global row offsets per depth
    q_parts, row_parts, x_parts, r_parts = [], [], [], []
    offset = 0
    for d in range(octree.max_depth + 1):
        mask = depths == d
        cnt = int(mask.sum())
        if cnt == 0:
            continue
        leaf_codes = codes[mask]
        s = 2.0 / (1 << d)
        u = (pts + 1.0) / s
        base = np.floor(u - 0.5).astype(np.int64)
        lim = 1 << d
        for corner in range(8):
            off = np.array([(corner >> a) & 1 for a in range(3)])
            j = base + off
            ok = np.all((j >= 0) & (j < lim), axis=1)
            if not ok.any():
                continue
            cand = morton_encode(j[ok, 0], j[ok, 1], j[ok, 2], d)
            pos = np.searchsorted(leaf_codes, cand)
            hit = pos < cnt
            hit[hit] = leaf_codes[pos[hit]] == cand[hit]
            if not hit.any():
                continue
            qi = np.flatnonzero(ok)[hit]
            centers = (j[qi] + 0.5) * s - 1.0
            x_parts.append((pts[qi] - centers) / s)
            q_parts.append(qi)
            row_parts.append(offset + pos[hit])
            r_parts.append(np.full(len(qi), 1.0 / s))
        offset += cnt
    query_idx = np.concatenate(q_parts)
    order = np.argsort(query_idx, kind="stable")
    query_idx = query_idx[order]
    leaf_rows = np.concatenate(row_parts)[order]
    x = np.concatenate(x_parts)[order]
    inv_r = np.concatenate(r_parts)[order]
    hats = np.maximum(0.0, 1.0 - np.abs(x))
    w = hats.prod(axis=1)
    # d w / d p_a = -sign(x_a) * prod_{b != a} hat_b / r
    prod_excl = np.stack(
        [hats[:, 1] * hats[:, 2], hats[:, 0] * hats[:, 2], hats[:, 0] * hats[:, 1]], axis=1
    )
    grad_w = -np.sign(x) * prod_excl * (hats > 0) * inv_r[:, None]
    qplan = ad.SegPlan(query_idx, len(pts), assume_sorted=True)
    return SupportPairs(query_idx, leaf_rows, x, w, grad_w, inv_r, len(pts), qplan)


# -- decoder MLPs -------------------------------------------------------------


def _silu(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return z * s, s


class FieldDecoder:
    """Shared MLPs decoding (local coords, leaf features) to field values.

    The SDF head is 3+F -> hidden -> hidden -> 1 with silu activations and an
    unbounded output; the optional color head is 3+F_c -> ... -> 3 squashed
    through a sigmoid.  Parameters live in a ParameterStore.
    """

    def __init__(self, store, prefix="dec", feat_dim=32, color_dim=None, hidden=(64, 64), seed=0):
        self.store = store
        self.prefix = prefix
        self.feat_dim = feat_dim
        self.color_dim = color_dim
        self.hidden = tuple(hidden)
        rng = np.random.default_rng(seed)
        self.sdf_params = self._init_mlp(rng, f"{prefix}.sdf", 3 + feat_dim, 1)
        self.color_params = (
            self._init_mlp(rng, f"{prefix}.color", 3 + color_dim, 3) if color_dim else None
        )

    def _init_mlp(self, rng, name, d_in, d_out):
        h1, h2 = self.hidden
        dims = [(d_in, h1), (h1, h2), (h2, d_out)]
        params = []
        for i, (a, b) in enumerate(dims):
            w = rng.standard_normal((a, b)) * np.sqrt(2.0 / a)
            params.append(self.store.param(f"{name}.w{i}", w))
            params.append(self.store.param(f"{name}.b{i}", np.zeros(b)))
        return params

    @classmethod
    def attach(cls, store, prefix="dec", **kw):
        """Bind to parameters already present in ``store`` (checkpoint load)."""
        obj = cls.__new__(cls)
        obj.store = store
        obj.prefix = prefix
        obj.feat_dim = kw.get("feat_dim", 32)
        obj.color_dim = kw.get("color_dim")
        obj.hidden = tuple(kw.get("hidden", (64, 64)))
        obj.sdf_params = [store[f"{prefix}.sdf.{n}"] for n in ("w0", "b0", "w1", "b1", "w2", "b2")]
        obj.color_params = (
            [store[f"{prefix}.color.{n}"] for n in ("w0", "b0", "w1", "b1", "w2", "b2")]
            if obj.color_dim
            else None
        )
        return obj

    # numeric paths ---------------------------------------------------------
    def value(self, x, f):
        w0, b0, w1, b1, w2, b2 = (p.data for p in self.sdf_params)
        X = np.hstack([x, f])
        h1, _ = _silu(X @ w0 + b0)
        h2, _ = _silu(h1 @ w1 + b1)
        return (h2 @ w2 + b2)[:, 0]

    def value_and_xgrad(self, x, f):
        """Patch values and their gradients w.r.t. the local coordinates."""
        w0, b0, w1, b1, w2, b2 = (p.data for p in self.sdf_params)
        X = np.hstack([x, f])
        z1 = X @ w0 + b0
        h1, s1 = _silu(z1)
        z2 = h1 @ w1 + b1
        h2, s2 = _silu(z2)
        val = (h2 @ w2 + b2)[:, 0]
        d2 = s2 * (1.0 + z2 * (1.0 - s2))
        v2 = d2 * w2[:, 0][None, :]
        d1 = s1 * (1.0 + z1 * (1.0 - s1))
        v1 = d1 * (v2 @ w1.T)
        return val, v1 @ w0[:3, :].T

    def color(self, x, c):
        w0, b0, w1, b1, w2, b2 = (p.data for p in self.color_params)
        X = np.hstack([x, c])
        h1, _ = _silu(X @ w0 + b0)
        h2, _ = _silu(h1 @ w1 + b1)
        return 1.0 / (1.0 + np.exp(-(h2 @ w2 + b2)))

    # tape paths ------------------------------------------------------------
    def value_tape(self, X):
        w0, b0, w1, b1, w2, b2 = self.sdf_params
        z1 = ad.add(ad.matmul(X, w0), b0)
        s1 = ad.sigmoid(z1)
        z2 = ad.add(ad.matmul(ad.mul(z1, s1), w1), b1)
        s2 = ad.sigmoid(z2)
        val = ad.add(ad.matmul(ad.mul(z2, s2), w2), b2)
        return val, (z1, s1, z2, s2)

    def xgrad_tape(self, cache):
        z1, s1, z2, s2 = cache
        w0, _, w1, _, w2, _ = self.sdf_params
        d2 = ad.mul(s2, ad.add(1.0, ad.mul(z2, ad.sub(1.0, s2))))
        v2 = ad.mul(d2, ad.transpose(w2))
        d1 = ad.mul(s1, ad.add(1.0, ad.mul(z1, ad.sub(1.0, s1))))
        v1 = ad.mul(d1, ad.matmul(v2, ad.transpose(w1)))
        return ad.matmul(v1, ad.transpose(w0[:3, :]))

    def color_tape(self, X):
        w0, b0, w1, b1, w2, b2 = self.color_params
        h1 = ad.silu(ad.add(ad.matmul(X, w0), b0))
        h2 = ad.silu(ad.add(ad.matmul(h1, w1), b1))
        return ad.sigmoid(ad.add(ad.matmul(h2, w2), b2))


# -- evaluation --------------------------------------------------------------


def _blend(pairs: SupportPairs, patch_vals):
    """Normalized blend of per-pair patch values onto queries (numpy)."""
    den = pairs.qplan.reduce(pairs.w)
    num = pairs.qplan.reduce(pairs.w * patch_vals)
    return num / np.maximum(den, _W_FLOOR)


def batched_eval(field: LatentField, dec, points, pairs: SupportPairs | None = None):
    """Vectorized SDF evaluation at many points."""
    pairs = pairs or support_pairs(field.octree, points)
    vals = dec.value(pairs.x, field.f[pairs.leaf_rows])
    return _blend(pairs, vals)


def mpu_eval(field: LatentField, dec, p) -> float:
    """SDF at a single point (convenience wrapper over batched_eval)."""
    return float(batched_eval(field, dec, np.asarray(p, np.float64).reshape(1, 3))[0])


def batched_eval_color(field: LatentField, dec, points, pairs: SupportPairs | None = None):
    pairs = pairs or support_pairs(field.octree, points)
    vals = dec.color(pairs.x, field.c[pairs.leaf_rows])
    den = np.maximum(pairs.qplan.reduce(pairs.w), _W_FLOOR)
    num = pairs.qplan.reduce(pairs.w[:, None] * vals)
    return num / den[:, None]


def mpu_eval_color(field: LatentField, dec, p):
    return batched_eval_color(field, dec, np.asarray(p, np.float64).reshape(1, 3))[0]


def batched_grad(field: LatentField, dec, points, pairs: SupportPairs | None = None):
    """Analytic spatial gradient of the blended SDF.

    dF/dp = sum_i [ grad_w_i (Phi_i - F) + w_i dPhi_i/dp ] / sum_i w_i
    """
    pts = np.asarray(points, np.float64).reshape(-1, 3)
    pairs = pairs or support_pairs(field.octree, pts)
    vals, xg = dec.value_and_xgrad(pairs.x, field.f[pairs.leaf_rows])
    den = np.maximum(pairs.qplan.reduce(pairs.w), _W_FLOOR)
    F = pairs.qplan.reduce(pairs.w * vals) / den
    resid = vals - F[pairs.query_idx]
    term = pairs.grad_w * resid[:, None] + (pairs.w * pairs.inv_r)[:, None] * xg
    return pairs.qplan.reduce(term) / den[:, None]


def mpu_grad(field: LatentField, dec, p):
    return batched_grad(field, dec, np.asarray(p, np.float64).reshape(1, 3))[0]


def eval_tape(pairs: SupportPairs, f_tensor, dec: FieldDecoder, leaf_plan=None, with_grad=True, with_color=False, c_tensor=None):
    """Tape-mode field evaluation for training.

    Returns (values (N,1), grads (N,3) or None, colors (N,3) or None) as
    Tensors; gradients flow into ``f_tensor``/``c_tensor`` and the decoder.
    """
    x_const = ad.Tensor(pairs.x)
    w_col = ad.Tensor(pairs.w[:, None])
    den = ad.Tensor(1.0 / np.maximum(pairs.qplan.reduce(pairs.w), _W_FLOOR)[:, None])
    f_rows = ad.gather(f_tensor, pairs.leaf_rows, plan=leaf_plan)
    X = ad.concat([x_const, f_rows], axis=1)
    phi, cache = dec.value_tape(X)
    F = ad.mul(ad.segment_sum(ad.mul(w_col, phi), pairs.qplan), den)
    G = None
    if with_grad:
        xg = dec.xgrad_tape(cache)
        resid = ad.sub(phi, ad.gather(F, pairs.query_idx, plan=pairs.qplan))
        term = ad.add(
            ad.mul(ad.Tensor(pairs.grad_w), resid),
            ad.mul(ad.Tensor((pairs.w * pairs.inv_r)[:, None]), xg),
        )
        G = ad.mul(ad.segment_sum(term, pairs.qplan), den)
    C = None
    if with_color:
        c_rows = ad.gather(c_tensor, pairs.leaf_rows, plan=leaf_plan)
        Xc = ad.concat([x_const, c_rows], axis=1)
        col = dec.color_tape(Xc)
        C = ad.mul(ad.segment_sum(ad.mul(w_col, col), pairs.qplan), den)
    return F, G, C
