"""JSON-backed configuration for the whole pipeline.

One config file drives every CLI command.  Defaults pin the fixed model
constants (sdf loss weight 200, KL weight 0.1, 3-dim latents, full depth 4,
octree depth 8, latent depth 6, 50 sampling steps); tests assert them.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ConfigError


@dataclass
class DataCfg:
    families: list = field(default_factory=lambda: [0, 1])
    shapes_per_family: int = 32
    seed: int = 7
    points_per_shape: int = 30_000
    holdout_per_family: int = 32  # evaluation shapes (fresh seeds)


@dataclass
class OctreeCfg:
    max_depth: int = 8  # D; leaf resolution 2^D per axis
    full_depth: int = 4  # forced-full region
    latent_depth: int = 6


@dataclass
class VaeCfg:
    latent_dim: int = 3
    feat_dim: int = 32
    color_dim: int = 32  # 0 disables the color branch
    hidden: tuple = (64, 64)  # decoder MLP widths
    channels: list = field(default_factory=lambda: [64, 32, 16])  # latent_depth..max_depth
    blocks: int = 1
    lambda_s: float = 200.0
    lambda_kl: float = 0.1
    lambda_c: float = 1.0
    n_queries: int = 4096
    lr0: float = 1e-3
    lr1: float = 1e-5
    steps: int = 2000
    batch: int = 4
    seed: int = 11
    input_channels: int = 4  # splat features on finest leaves
    # derived view used by the nets
    max_depth: int = 8
    latent_depth: int = 6

    def channels_by_depth(self):
        depths = range(self.latent_depth, self.max_depth + 1)
        if len(self.channels) != len(list(depths)):
            raise ConfigError(
                f"vae.channels needs {self.max_depth - self.latent_depth + 1} entries (latent..max depth)"
            )
        return {d: c for d, c in zip(depths, self.channels)}


@dataclass
class StageCfg:
    level: int  # top graph level this stage owns
    channels: tuple  # (c_top, c_mid)
    raw_channels: int  # signal channels at the top level
    kind: str  # "split" | "latent"
    blocks: int = 2
    n_labels: int = 2


@dataclass
class DiffusionCfg:
    steps: int = 50  # sampling steps
    schedule: str = "cosine"
    sampler: str = "ddim"  # ddim | ancestral
    x0_clamp: float = 3.0
    lr: float = 1e-4
    train_steps: list = field(default_factory=lambda: [3000, 3000])
    batch: int = 4
    seed: int = 13
    n_labels: int = 2
    blocks: int = 2
    # per-stage channel plan, outermost last: stage1 owns levels (4,3),
    # stage2 adds (6,5), a third stage would add (8,7)
    stage_channels: list = field(default_factory=lambda: [[64, 128], [32, 64]])


@dataclass
class MeshCfg:
    resolution: int = 64
    iso: float = 0.0


@dataclass
class EvalCfg:
    n_points: int = 2048
    seed: int = 17
    emd: bool = False
    emd_points: int = 256


@dataclass
class Config:
    data: DataCfg = field(default_factory=DataCfg)
    octree: OctreeCfg = field(default_factory=OctreeCfg)
    vae: VaeCfg = field(default_factory=VaeCfg)
    diffusion: DiffusionCfg = field(default_factory=DiffusionCfg)
    mesh: MeshCfg = field(default_factory=MeshCfg)
    eval: EvalCfg = field(default_factory=EvalCfg)
    seed: int = 0

    def __post_init__(self):
        # keep the derived VAE depth view in sync with the octree section
        self.vae.max_depth = self.octree.max_depth
        self.vae.latent_depth = self.octree.latent_depth
        self.validate()

    def validate(self):
        o = self.octree
        if not (0 < o.full_depth <= o.latent_depth <= o.max_depth):
            raise ConfigError("require 0 < full_depth <= latent_depth <= max_depth")
        if o.full_depth != min(4, o.max_depth):
            raise ConfigError("full_depth is fixed at min(4, max_depth)")
        if (o.latent_depth - o.full_depth) % 2 != 0:
            raise ConfigError("latent_depth must be full_depth plus a multiple of 2 (one split stage spans 2 levels)")
        self.vae.channels_by_depth()
        n_split_stages = (o.latent_depth - o.full_depth) // 2
        if len(self.diffusion.stage_channels) != n_split_stages + 1:
            raise ConfigError(
                f"diffusion.stage_channels needs {n_split_stages + 1} stages for latent depth {o.latent_depth}"
            )
        if self.diffusion.steps <= 0 or self.vae.n_queries <= 0:
            raise ConfigError("steps and query counts must be positive")

    def stage_cfgs(self):
        """StageCfg list, innermost (coarsest) first."""
        o = self.octree
        d = self.diffusion
        cfgs = []
        level = o.full_depth
        for i, chans in enumerate(d.stage_channels):
            last = i == len(d.stage_channels) - 1
            cfgs.append(
                StageCfg(
                    level=level,
                    channels=tuple(chans),
                    raw_channels=self.vae.latent_dim if last else 8,
                    kind="latent" if last else "split",
                    blocks=d.blocks,
                    n_labels=d.n_labels,
                )
            )
            level += 2
        return cfgs

    def graph_depths_for_stage(self, stage_idx: int):
        """Bundle levels stage ``stage_idx`` needs (its own + all inner)."""
        cfgs = self.stage_cfgs()[:stage_idx]
        depths = []
        for c in cfgs:
            depths += [c.level, c.level - 1]
        return sorted(depths, reverse=True)

    def to_dict(self):
        return dataclasses.asdict(self)

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1)

    @classmethod
    def from_dict(cls, doc: dict) -> "Config":
        sections = {
            "data": DataCfg,
            "octree": OctreeCfg,
            "vae": VaeCfg,
            "diffusion": DiffusionCfg,
            "mesh": MeshCfg,
            "eval": EvalCfg,
        }
        kwargs = {}
        for name, klass in sections.items():
            if name in doc:
                sub = dict(doc[name])
                if name == "vae":
                    # derived from the octree section, rewritten on construction
                    sub.pop("max_depth", None)
                    sub.pop("latent_depth", None)
                fields = {f_.name for f_ in dataclasses.fields(klass)}
                unknown = set(sub) - fields
                if unknown:
                    raise ConfigError(f"unknown keys in config section '{name}': {sorted(unknown)}")
                kwargs[name] = klass(**sub)
        if "seed" in doc:
            kwargs["seed"] = doc["seed"]
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "Config":
        with open(path) as f:
            return cls.from_dict(json.load(f))
