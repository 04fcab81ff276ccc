"""Octree latent diffusion for 3D shape generation.

Library layout:
  geometry   linear octree, Morton codes, split signals, dual graphs
  field      partition-of-unity SDF/color fields over octree leaves
  oracle     procedural CSG shapes with exact SDF ground truth
  autodiff   reverse-mode tensor engine (numpy-backed)
  optim      parameter store, AdamW, LR schedules, OCKP checkpoints
  nets       dual-graph conv blocks, VAE nets, nested multiscale U-Net
  vae        octree VAE losses, training, encode/decode
  diffusion  noise schedule, denoising losses, stagewise training, sampling
  meshing    iso-surface extraction and OBJ/PLY export
  metrics    CD/EMD and COV/MMD/1-NNA point-set metrics
  cli        pipeline driver (gen-data / train / sample / extract / eval)
"""

__version__ = "0.1.0"
