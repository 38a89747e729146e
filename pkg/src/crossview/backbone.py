"""Small frozen transformer encoder with per-block hooks for parallel adapters.

The backbone is deterministically random-initialized and never trained; the
only trainable path through it is whatever gets added block-parallel via the
``adapters`` argument of :meth:`Backbone.encode`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .params import ParameterStore
from .rng import substream


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 64
    patch_size: int = 8
    depth: int = 4
    dim: int = 64
    heads: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid


@dataclass
class TokenGrid:
    """Token sequence plus its spatial factorization."""

    tokens: Tensor  # [B, N, D]
    grid_h: int
    grid_w: int
    has_cls: bool

    def __post_init__(self):
        if self.tokens.ndim != 3:
            raise ShapeError(f"tokens must be [B,N,D], got {self.tokens.shape}")
        expect = self.grid_h * self.grid_w + (1 if self.has_cls else 0)
        if self.tokens.shape[1] != expect:
            raise ShapeError(
                f"token count {self.tokens.shape[1]} != grid {self.grid_h}x{self.grid_w}"
                f" (+cls={self.has_cls})"
            )


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=(fan_in, fan_out))


class Backbone:
    """Frozen patch-embedding + pre-norm transformer stack."""

    def __init__(self, cfg: BackboneConfig, store: ParameterStore | None = None,
                 prefix: str = "backbone"):
        self.cfg = cfg
        self.store = store if store is not None else ParameterStore()
        self.prefix = prefix
        d = cfg.dim
        patch_dim = 3 * cfg.patch_size * cfg.patch_size
        n_tokens = cfg.num_patches + 1

        def p(name, data):
            return self.store.add(f"{prefix}/{name}", data, trainable=False)

        def init_rng(name):
            return substream(cfg.seed, "init", f"{prefix}/{name}")

        p("patch_embed.weight", _xavier(init_rng("patch_embed.weight"), patch_dim, d))
        p("patch_embed.bias", np.zeros(d))
        p("cls_token", init_rng("cls_token").normal(0.0, 0.02, size=d))
        p("pos_embed", init_rng("pos_embed").normal(0.0, 0.02, size=(n_tokens, d)))
        for i in range(cfg.depth):
            base = f"blocks.{i}"
            p(f"{base}.ln1.gain", np.ones(d))
            p(f"{base}.ln1.bias", np.zeros(d))
            for proj in ("wq", "wk", "wv", "wo"):
                p(f"{base}.attn.{proj}", _xavier(init_rng(f"{base}.attn.{proj}"), d, d))
                p(f"{base}.attn.b{proj[1]}", np.zeros(d))
            p(f"{base}.ln2.gain", np.ones(d))
            p(f"{base}.ln2.bias", np.zeros(d))
            p(f"{base}.ffn.w1", _xavier(init_rng(f"{base}.ffn.w1"), d, 4 * d))
            p(f"{base}.ffn.b1", np.zeros(4 * d))
            p(f"{base}.ffn.w2", _xavier(init_rng(f"{base}.ffn.w2"), 4 * d, d))
            p(f"{base}.ffn.b2", np.zeros(d))
        p("ln_final.gain", np.ones(d))
        p("ln_final.bias", np.zeros(d))

    def _p(self, name: str) -> Tensor:
        return self.store[f"{self.prefix}/{name}"]

    # -- pieces ------------------------------------------------------------

    def patchify(self, images: Tensor) -> Tensor:
        """[B,3,H,W] -> [B,N,3*P*P] with per-patch (c, py, px) feature order."""
        cfg = self.cfg
        b = images.shape[0]
        if images.ndim != 4 or images.shape[1] != 3 or images.shape[2] != cfg.image_size \
                or images.shape[3] != cfg.image_size:
            raise ShapeError(
                f"expected images [B,3,{cfg.image_size},{cfg.image_size}], got {images.shape}"
            )
        g, ps = cfg.grid, cfg.patch_size
        x = ad.reshape(images, (b, 3, g, ps, g, ps))
        x = ad.transpose(x, (0, 2, 4, 1, 3, 5))
        return ad.reshape(x, (b, g * g, 3 * ps * ps))

    def _attention(self, x: Tensor, base: str) -> Tensor:
        cfg = self.cfg
        b, n, d = x.shape
        h, dh = cfg.heads, d // cfg.heads
        q = ad.add(ad.matmul(x, self._p(f"{base}.attn.wq")), self._p(f"{base}.attn.bq"))
        k = ad.add(ad.matmul(x, self._p(f"{base}.attn.wk")), self._p(f"{base}.attn.bk"))
        v = ad.add(ad.matmul(x, self._p(f"{base}.attn.wv")), self._p(f"{base}.attn.bv"))

        def split(t):
            return ad.transpose(ad.reshape(t, (b, n, h, dh)), (0, 2, 1, 3))

        q, k, v = split(q), split(k), split(v)
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        ctx = ad.matmul(ad.softmax(scores), v)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, n, d))
        return ad.add(ad.matmul(ctx, self._p(f"{base}.attn.wo")), self._p(f"{base}.attn.bo"))

    def _ffn(self, x: Tensor, base: str) -> Tensor:
        hidden = ad.gelu(ad.add(ad.matmul(x, self._p(f"{base}.ffn.w1")),
                                self._p(f"{base}.ffn.b1")))
        return ad.add(ad.matmul(hidden, self._p(f"{base}.ffn.w2")),
                      self._p(f"{base}.ffn.b2"))

    def block_forward(self, z: TokenGrid, index: int) -> TokenGrid:
        """One pre-norm transformer block; token shape is preserved."""
        if not 0 <= index < self.cfg.depth:
            raise ConfigError(f"block index {index} out of range [0, {self.cfg.depth})")
        base = f"blocks.{index}"
        x = z.tokens
        ln1 = ad.layer_norm(x, self._p(f"{base}.ln1.gain"), self._p(f"{base}.ln1.bias"))
        x = ad.add(x, self._attention(ln1, base))
        ln2 = ad.layer_norm(x, self._p(f"{base}.ln2.gain"), self._p(f"{base}.ln2.bias"))
        x = ad.add(x, self._ffn(ln2, base))
        return TokenGrid(x, z.grid_h, z.grid_w, z.has_cls)

    def encode(self, images: Tensor, adapters=None) -> TokenGrid:
        """Patchify, embed, run all blocks (each with an optional parallel
        adapter branch), and apply the final layer norm."""
        cfg = self.cfg
        if adapters is not None and len(adapters) != cfg.depth:
            raise ConfigError(
                f"need one adapter per block ({cfg.depth}), got {len(adapters)}"
            )
        b = images.shape[0]
        tok = ad.add(ad.matmul(self.patchify(images), self._p("patch_embed.weight")),
                     self._p("patch_embed.bias"))
        cls = ad.tile_leading(ad.reshape(self._p("cls_token"), (1, cfg.dim)), b)
        z = TokenGrid(ad.add(ad.concat([cls, tok], axis=1), self._p("pos_embed")),
                      cfg.grid, cfg.grid, True)
        for i in range(cfg.depth):
            block_out = self.block_forward(z, i)
            if adapters is not None:
                z = adapters[i].adapted_combine(z, block_out)
            else:
                z = block_out
        tokens = ad.layer_norm(z.tokens, self._p("ln_final.gain"),
                               self._p("ln_final.bias"))
        return TokenGrid(tokens, z.grid_h, z.grid_w, z.has_cls)


def init_backbone(cfg: BackboneConfig, store: ParameterStore | None = None,
                  prefix: str = "backbone") -> Backbone:
    """Build a backbone with every parameter registered as frozen."""
    return Backbone(cfg, store=store, prefix=prefix)
