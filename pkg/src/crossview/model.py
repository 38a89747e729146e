"""Full retrieval model: frozen backbone + adapters + reallocation + aggregator.

Both views share every weight; an image batch goes patch-embedding ->
adapted transformer blocks -> multi-scale reallocation on the token grid ->
expert-routed query aggregation -> unit-norm descriptor.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .adapter import build_adapter_stack
from .aggregator import AggregatorConfig, QueryAggregator
from .autodiff import Tensor
from .backbone import Backbone, BackboneConfig
from .errors import ConfigError
from .losses import Temperature
from .mscr import MultiScaleReallocation, grid_to_tokens, tokens_to_grid
from .params import ParameterStore

NAMESPACES = ("backbone", "adapter", "mscr", "aggregator", "loss")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    depth: int = 4
    dim: int = 64
    heads: int = 4
    seed: int = 0
    use_adapter: bool = True
    adapter_reduction: int = 4
    use_mscr: bool = True
    mscr_dropout: float = 0.1
    use_moe: bool = True
    num_experts: int = 3
    num_queries: int = 32
    agg_heads: int = 4
    num_stages: int = 3
    out_dim: int = 256
    init_tau: float = 0.07

    def __post_init__(self):
        if self.use_mscr and self.dim % 4 != 0:
            raise ConfigError(f"dim {self.dim} must be divisible by 4 for reallocation")
        if not self.use_moe and self.num_experts != 1:
            raise ConfigError("a dense aggregator uses exactly one KV projection "
                              "(set num_experts=1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class CrossViewModel:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.store = ParameterStore()
        self.backbone = Backbone(
            BackboneConfig(cfg.image_size, cfg.patch_size, cfg.depth, cfg.dim,
                           cfg.heads, cfg.seed),
            store=self.store,
        )
        self.adapters = (
            build_adapter_stack(cfg.dim, cfg.depth, cfg.adapter_reduction,
                                self.store, cfg.seed)
            if cfg.use_adapter else None
        )
        self.mscr = (
            MultiScaleReallocation(cfg.dim, self.store, seed=cfg.seed,
                                   dropout_p=cfg.mscr_dropout)
            if cfg.use_mscr else None
        )
        self.aggregator = QueryAggregator(
            AggregatorConfig(cfg.num_queries, cfg.dim, cfg.num_experts,
                             cfg.agg_heads, cfg.num_stages, cfg.out_dim,
                             routing="sparse" if cfg.use_moe else "dense"),
            store=self.store, seed=cfg.seed,
        )
        self.temperature = Temperature(self.store, init_tau=cfg.init_tau)

    def encode(self, images, training: bool = False,
               rng: np.random.Generator | None = None,
               collect: dict | None = None) -> Tensor:
        """[B,3,H,W] images -> [B,out_dim] unit-norm descriptors."""
        if not isinstance(images, Tensor):
            images = Tensor(np.asarray(images, dtype=np.float64))
        grid = self.backbone.encode(images, self.adapters)
        x = tokens_to_grid(grid)
        if self.mscr is not None:
            x = self.mscr.forward(x, training=training, rng=rng)
        tokens = grid_to_tokens(x)
        return self.aggregator.aggregate(tokens, collect=collect)

    def trainable_count(self) -> int:
        return self.store.count_trainable()

    def frozen_count(self) -> int:
        return self.store.count() - self.store.count_trainable()
