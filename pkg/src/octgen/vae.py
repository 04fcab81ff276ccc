"""Octree VAE: losses, training, and the encode/decode API.

The encoder compresses a depth-D shape octree (splatted point features on
its leaves) to per-leaf latent statistics at the latent depth; the decoder
grows the structure back out, predicting per-node split logits on the way,
and emits per-leaf features that the shared field MLPs blend into continuous
SDF/color fields.

Training teacher-forces the decoder on the ground-truth structure.  The loss
is

    L = L_sdf + lambda_c * L_color + L_octree + lambda_kl * L_KL

with L_sdf = mean[ lambda_s (F - D)^2 + |grad F - grad D|^2 ] over fresh
volume queries each step, L_octree the mean split BCE over the grown depths,
and L_KL the mean Gaussian KL to the standard normal.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import field as fld
from . import geometry as geo
from . import nets
from . import oracle as orc
from .autodiff import Tensor
from .config import Config
from .errors import CountMismatch, OctgenError
from .optim import AdamW, ParameterStore, load_checkpoint, lr_linear, save_checkpoint


# -- losses ------------------------------------------------------------------


def loss_sdf(F, G, gt_values, gt_grads, lambda_s=200.0):
    """mean over queries of lambda_s (F-D)^2 + |grad F - grad D|^2."""
    n = len(gt_values)
    if F.shape[0] != n or G.shape[0] != n:
        raise CountMismatch(f"{F.shape[0]} predictions vs {n} ground-truth values")
    dv = ad.sub(F, Tensor(np.asarray(gt_values, F.dtype.type).reshape(-1, 1)))
    dg = ad.sub(G, Tensor(np.asarray(gt_grads, G.dtype.type)))
    per_query = ad.add(
        ad.mul(ad.sum_(ad.mul(dv, dv), axis=1), lambda_s),
        ad.sum_(ad.mul(dg, dg), axis=1),
    )
    return ad.mean(per_query)


def loss_color(C, gt_colors):
    n = len(gt_colors)
    if C.shape[0] != n:
        raise CountMismatch(f"{C.shape[0]} color predictions vs {n} targets")
    dc = ad.sub(C, Tensor(np.asarray(gt_colors, C.dtype.type)))
    return ad.mean(ad.sum_(ad.mul(dc, dc), axis=1))


def loss_octree(split_logits: dict, targets: dict):
    """Mean binary cross-entropy over all nodes at the decoder-grown depths."""
    terms = []
    total = 0
    for d, logits in sorted(split_logits.items()):
        y = np.asarray(targets[d], logits.dtype.type).reshape(-1, 1)
        if logits.shape[0] != len(y):
            raise CountMismatch(f"depth {d}: {logits.shape[0]} logits vs {len(y)} targets")
        # BCE from logits: softplus(x) - x*y
        terms.append(ad.sum_(ad.sub(ad.softplus(logits), ad.mul(logits, y))))
        total += len(y)
    if not terms:
        raise OctgenError("no split logits given")
    acc = terms[0]
    for t in terms[1:]:
        acc = ad.add(acc, t)
    return ad.div(acc, float(total))


def loss_kl(mu, logvar):
    """(1/2N) sum(mu^2 + sigma^2 - log sigma^2 - 1), N = number of entries."""
    var = ad.exp(logvar)
    term = ad.sub(ad.add(ad.mul(mu, mu), var), ad.add(logvar, 1.0))
    return ad.mul(ad.mean(term), 0.5)


def loss_total(parts: dict, cfg):
    """Weighted sum; parts maps {"sdf","color","octree","kl"} to Tensors."""
    out = parts["sdf"]
    if "color" in parts and parts["color"] is not None:
        out = ad.add(out, ad.mul(parts["color"], cfg.lambda_c))
    out = ad.add(out, parts["octree"])
    return ad.add(out, ad.mul(parts["kl"], cfg.lambda_kl))


def reparameterize(mu, logvar, seed=None, rng=None):
    """z = mu + sigma * eps with eps ~ N(0, I); deterministic under seed."""
    rng = rng or np.random.default_rng(seed)
    if isinstance(mu, Tensor):
        eps = Tensor(rng.standard_normal(mu.shape).astype(mu.dtype.type))
        return ad.add(mu, ad.mul(ad.exp(ad.mul(logvar, 0.5)), eps))
    eps = rng.standard_normal(np.shape(mu))
    return mu + np.exp(0.5 * logvar) * eps


# -- data preparation -----------------------------------------------------------


@dataclass
class ShapeData:
    """Per-shape training cache: octree, graphs, input features, targets."""

    spec: orc.ShapeSpec | None
    octree: geo.Octree
    pyramid: nets.GraphPyramid
    splat: np.ndarray  # (n_leaves, 4) encoder input features
    split_targets: dict  # depth -> (n_depth_nodes,) float 0/1
    surface: np.ndarray  # (M, 3) surface bank for query enrichment


def splat_features(octree: geo.Octree, points, normals):
    """Average normal + log-normalized point count per finest leaf."""
    depths, codes = octree.leaves()
    n = len(codes)
    out = np.zeros((n, 4), np.float32)
    D = octree.max_depth
    res = 1 << D
    ijk = np.clip(((np.asarray(points) + 1.0) * 0.5 * res).astype(np.int64), 0, res - 1)
    pc = geo.morton_encode(ijk[:, 0], ijk[:, 1], ijk[:, 2], D)
    fine = depths == D
    fine_codes = codes[fine]
    rel = np.searchsorted(fine_codes, pc)
    if np.any(rel >= len(fine_codes)) or np.any(fine_codes[np.minimum(rel, len(fine_codes) - 1)] != pc):
        raise OctgenError("point fell outside the octree's finest leaves")
    rows = rel + int(np.argmax(fine))
    plan = ad.SegPlan(rows, n)
    counts = plan.reduce(np.ones((len(pc), 1), np.float32))[:, 0]
    nsum = plan.reduce(np.asarray(normals, np.float32))
    nz = counts > 0
    out[nz, :3] = nsum[nz] / np.linalg.norm(nsum[nz], axis=1, keepdims=True).clip(1e-9)
    if counts.max() > 0:
        out[:, 3] = np.log1p(counts) / np.log1p(counts.max())
    return out


def prepare_shape(spec, points, normals, cfg: Config, depths=None) -> ShapeData:
    o = cfg.octree
    octree = geo.build_from_points(points, o.max_depth)
    depths = depths if depths is not None else range(o.latent_depth, o.max_depth + 1)
    pyramid = nets.build_pyramid(octree, depths)
    splat = splat_features(octree, points, normals)
    targets = {}
    for d in range(o.latent_depth, o.max_depth):
        targets[d] = octree.nonempty[d].astype(np.float32)
    return ShapeData(
        spec=spec,
        octree=octree,
        pyramid=pyramid,
        splat=splat,
        split_targets=targets,
        surface=np.asarray(points),
    )


def sample_training_queries(data: ShapeData, n: int, rng):
    """Half uniform, half surface-bank points with Gaussian offsets."""
    n_near = n // 2
    uni = rng.uniform(-1.0, 1.0, (n - n_near, 3))
    bank = data.surface[rng.integers(0, len(data.surface), n_near)]
    near = np.clip(bank + rng.normal(0.0, 0.05, (n_near, 3)), -1.0, 1.0)
    return np.vstack([uni, near])


def concat_support_pairs(pairs_list, leaf_offsets):
    """Batch per-shape SupportPairs with row offsets into the batched
    feature matrix and query vector."""
    if len(pairs_list) == 1:
        return pairs_list[0]
    q_off = np.concatenate([[0], np.cumsum([p.n_queries for p in pairs_list])[:-1]])
    p_off = np.concatenate([[0], np.cumsum([len(p.query_idx) for p in pairs_list])[:-1]])
    out = fld.SupportPairs(
        query_idx=np.concatenate([p.query_idx + o for p, o in zip(pairs_list, q_off)]),
        leaf_rows=np.concatenate([p.leaf_rows + o for p, o in zip(pairs_list, leaf_offsets)]),
        x=np.concatenate([p.x for p in pairs_list]),
        w=np.concatenate([p.w for p in pairs_list]),
        grad_w=np.concatenate([p.grad_w for p in pairs_list]),
        inv_r=np.concatenate([p.inv_r for p in pairs_list]),
        n_queries=int(sum(p.n_queries for p in pairs_list)),
        qplan=nets._concat_plans([p.qplan for p in pairs_list], q_off, q_off, p_off),
    )
    out.qplan.n_out = out.n_queries
    return out


# -- the trained model handle --------------------------------------------------


class OctreeVae:
    """Encoder/decoder networks plus the shared field MLPs, one store."""

    def __init__(self, cfg: Config, store: ParameterStore | None = None, seed=None):
        self.cfg = cfg
        self.store = store or ParameterStore()
        rng = np.random.default_rng(cfg.vae.seed if seed is None else seed)
        self.encoder = nets.VaeEncoder(self.store, cfg.vae, rng)
        self.decoder = nets.VaeDecoder(self.store, cfg.vae, rng)
        self.phi = fld.FieldDecoder(
            self.store,
            prefix="dec",
            feat_dim=cfg.vae.feat_dim,
            color_dim=cfg.vae.color_dim or None,
            hidden=tuple(cfg.vae.hidden),
            seed=int(rng.integers(2**31)),
        )

    # -- encode -------------------------------------------------------------
    def encode_prepared(self, datas: list[ShapeData], sample=False, seed=0):
        bundle = nets.batch_pyramids([d.pyramid for d in datas], self._enc_depths())
        feats = np.concatenate([d.splat for d in datas], axis=0)
        with ad.no_grad():
            mu, logvar = self.encoder(bundle, Tensor(feats))
        if sample:
            z = reparameterize(mu.data, logvar.data, seed=seed)
        else:
            z = mu.data
        sizes = [d.pyramid.levels[self.cfg.octree.latent_depth].n for d in datas]
        split = np.cumsum(sizes)[:-1]
        return np.split(z, split), np.split(mu.data, split), np.split(logvar.data, split)

    def encode(self, points, normals=None):
        """Points (with normals) -> (latent octree, mu, logvar)."""
        if normals is None:
            normals = np.zeros_like(np.asarray(points))
        data = prepare_shape(None, points, normals, self.cfg)
        _, mus, logvars = self.encode_prepared([data])
        latent = geo.truncate(data.octree, self.cfg.octree.latent_depth)
        return latent, mus[0], logvars[0]

    def _enc_depths(self):
        o = self.cfg.octree
        return list(range(o.latent_depth, o.max_depth + 1))

    # -- decode -------------------------------------------------------------
    def decode(self, latent_octree: geo.Octree, z):
        """Latent features on the latent-level vertex set -> full-depth
        octree, per-leaf field features, and the shared field MLP handle."""
        o = self.cfg.octree
        chan = self.cfg.vae.channels_by_depth()
        with ad.no_grad():
            lg = nets.build_level_graph(latent_octree, o.latent_depth)
            if len(z) != lg.n:
                raise CountMismatch(f"{len(z)} latent rows vs {lg.n} latent vertices")
            h = self.decoder.head(Tensor(np.asarray(z, np.float32)))
            current = latent_octree
            for d in range(o.latent_depth, o.max_depth + 1):
                h = self.decoder.towers[d](h, lg)
                if d == o.max_depth:
                    break
                logits = self.decoder.split_heads[d](ad.gather(h, lg.node_rows))
                split = logits.data[:, 0] > 0.0
                current = _grow_one_level(current, d, split)
                lg_next = nets.build_level_graph(current, d + 1)
                pool = nets.build_pool_map(lg_next, lg)
                h = self.decoder.ups[d + 1](h, pool)
                lg = lg_next
            feats = self.decoder.feat_head(h).data
            colors = self.decoder.color_head(h).data if self.decoder.color_head else None
        field = fld.LatentField(current, feats, colors)
        return current, field, self.phi

    def decode_teacher_forced(self, bundle: nets.Bundle, z):
        return self.decoder(bundle, z)

    def save(self, path, step=0):
        meta = {"config": self.cfg.to_dict()}
        save_checkpoint(path, self.store, step=step, meta=meta)

    @classmethod
    def load(cls, path):
        _, step, meta = load_checkpoint(path)
        cfg = Config.from_dict(meta["config"])
        model = cls(cfg)
        load_checkpoint(path, model.store)
        return model


def _grow_one_level(octree: geo.Octree, depth: int, split_mask) -> geo.Octree:
    """New octree of max_depth depth+1: depth-d nonemptiness is the split
    decision, split nodes get all 8 children (provisionally nonempty)."""
    codes = [octree.codes[d] for d in range(depth + 1)]
    flags = [octree.nonempty[d].copy() for d in range(depth + 1)]
    flags[depth] = np.asarray(split_mask, dtype=bool)
    parents = codes[depth][flags[depth]]
    level = ((parents[:, None] << np.uint64(3)) | np.arange(8, dtype=np.uint64)[None, :]).ravel()
    codes.append(level)
    flags.append(np.ones(len(level), dtype=bool))
    return geo.Octree(max_depth=depth + 1, codes=codes, nonempty=flags, full_depth=octree.full_depth)


# -- training --------------------------------------------------------------------


def train_vae(datas: list[ShapeData], cfg: Config, steps=None, log_path=None, ckpt_path=None, progress=None):
    """Teacher-forced VAE training with AdamW and a linear LR ramp.

    Returns (model, history); history rows mirror the CSV log.
    """
    v = cfg.vae
    steps = steps if steps is not None else v.steps
    model = OctreeVae(cfg)
    opt = AdamW(model.store, lr=v.lr0)
    rng = np.random.default_rng(v.seed)
    history = []
    log_f = open(log_path, "w", newline="") if log_path else None
    writer = None
    if log_f:
        writer = csv.writer(log_f)
        writer.writerow(["step", "loss", "sdf", "color", "octree", "kl", "lr", "seconds"])
    t0 = time.time()
    order = rng.permutation(len(datas))
    cursor = 0
    for step in range(steps):
        batch_ids = []
        for _ in range(min(v.batch, len(datas))):
            if cursor >= len(order):
                order = rng.permutation(len(datas))
                cursor = 0
            batch_ids.append(int(order[cursor]))
            cursor += 1
        batch = [datas[i] for i in batch_ids]
        parts = _vae_step_losses(model, batch, cfg, rng)
        total = loss_total(parts, v)
        model.store.zero_grad()
        total.backward()
        lr = lr_linear(step, max(steps - 1, 1), v.lr0, v.lr1)
        opt.step(lr=lr)
        row = {
            "step": step,
            "loss": float(total.data),
            "sdf": float(parts["sdf"].data),
            "color": float(parts["color"].data) if parts.get("color") is not None else 0.0,
            "octree": float(parts["octree"].data),
            "kl": float(parts["kl"].data),
            "lr": lr,
        }
        history.append(row)
        if writer:
            writer.writerow([row[k] for k in ("step", "loss", "sdf", "color", "octree", "kl", "lr")] + [round(time.time() - t0, 2)])
            log_f.flush()
        if progress and (step % 50 == 0 or step == steps - 1):
            progress(row)
    if log_f:
        log_f.close()
    if ckpt_path:
        model.save(ckpt_path, step=steps)
    return model, history


def _vae_step_losses(model: OctreeVae, batch: list[ShapeData], cfg: Config, rng):
    o, v = cfg.octree, cfg.vae
    bundle = nets.batch_pyramids([d.pyramid for d in batch], model._enc_depths())
    feats = np.concatenate([d.splat for d in batch], axis=0)
    mu, logvar = model.encoder(bundle, Tensor(feats))
    z = reparameterize(mu, logvar, rng=rng)
    split_logits, f, c = model.decoder(bundle, z)

    # split targets, concatenated in bundle order
    targets = {}
    for d in range(o.latent_depth, o.max_depth):
        targets[d] = np.concatenate([s.split_targets[d] for s in batch])

    # field losses on fresh queries
    pairs_list, gtv, gtg, gtc = [], [], [], []
    for s in batch:
        q = sample_training_queries(s, v.n_queries, rng)
        val, grad = orc.sdf(s.spec, q)
        gtv.append(val)
        gtg.append(grad)
        if v.color_dim:
            gtc.append(orc.color_field(s.spec, q))
        pairs_list.append(fld.support_pairs(s.octree, q))
    leaf_offsets = np.concatenate([[0], np.cumsum([s.octree.num_leaves() for s in batch])[:-1]])
    pairs = concat_support_pairs(pairs_list, leaf_offsets)
    F, G, C = fld.eval_tape(
        pairs, f, model.phi, with_grad=True, with_color=bool(v.color_dim), c_tensor=c
    )
    parts = {
        "sdf": loss_sdf(F, G, np.concatenate(gtv), np.concatenate(gtg), v.lambda_s),
        "octree": loss_octree(split_logits, targets),
        "kl": loss_kl(mu, logvar),
    }
    if v.color_dim:
        parts["color"] = loss_color(C, np.concatenate(gtc))
    return parts


def split_accuracy(model: OctreeVae, datas: list[ShapeData]) -> float:
    """Teacher-forced split prediction accuracy over the grown depths."""
    o = model.cfg.octree
    correct = total = 0
    for s in datas:
        bundle = nets.batch_pyramids([s.pyramid], model._enc_depths())
        with ad.no_grad():
            mu, _ = model.encoder(bundle, Tensor(s.splat))
            split_logits, _, _ = model.decoder(bundle, mu)
        for d in range(o.latent_depth, o.max_depth):
            pred = split_logits[d].data[:, 0] > 0
            correct += int((pred == (s.split_targets[d] > 0.5)).sum())
            total += len(pred)
    return correct / max(total, 1)
