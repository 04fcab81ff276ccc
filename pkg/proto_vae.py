"""Prototype: VAE overfit dynamics on one small shape (throwaway)."""
import time

import numpy as np

from octgen import oracle as orc
from octgen import vae
from octgen.config import Config

cfg = Config()
cfg.octree.max_depth = 6
cfg.octree.latent_depth = 4
cfg.vae.channels = [16, 16, 8]
cfg.vae.n_queries = 512
cfg.vae.batch = 1
cfg.vae.feat_dim = 16
cfg.vae.color_dim = 0
cfg.diffusion.stage_channels = [[16, 32]]
cfg = Config.from_dict(cfg.to_dict())

spec = orc.ShapeSpec(orc.Sphere((0.0, 0.0, 0.0), 0.45))
pts, nrm = orc.sample_surface(spec, 10_000, seed=0)
t0 = time.time()
data = vae.prepare_shape(spec, pts, nrm, cfg)
print(f"prepare: {time.time()-t0:.2f}s; leaves={data.octree.num_leaves()}, lv{cfg.octree.latent_depth}={data.pyramid.levels[cfg.octree.latent_depth].n}")

t0 = time.time()
model, hist = vae.train_vae([data], cfg, steps=300, progress=lambda r: print(
    f"step {r['step']:4d} loss {r['loss']:8.4f} sdf {r['sdf']:8.4f} oct {r['octree']:6.4f} kl {r['kl']:6.4f} ({time.time()-t0:.1f}s)"))
print(f"train 300 steps: {time.time()-t0:.1f}s")
print("split acc:", vae.split_accuracy(model, [data]))
