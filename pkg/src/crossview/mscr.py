"""Multi-scale channel reallocation block.

Four parallel branches (depthwise-separable 1x1 / 3x3 / 5x5 convolutions plus
a projected max-pool branch) each emit C/4 channels; their concatenation is
gated by a single-channel residual signal with a learnable per-channel scale,
and the result is added back onto the block input.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import TokenGrid, _xavier
from .errors import ConfigError, ShapeError
from .params import ParameterStore
from .rng import substream

BRANCH_KERNELS = (1, 3, 5)


def tokens_to_grid(z: TokenGrid) -> Tensor:
    """Reshape patch tokens to [B,C,H,W]; the CLS token (if any) is dropped."""
    toks = z.tokens
    if z.has_cls:
        toks = ad.index_range(toks, 1, 1, toks.shape[1])
    b, n, d = toks.shape
    if n != z.grid_h * z.grid_w:
        raise ShapeError(
            f"{n} patch tokens do not factor as {z.grid_h}x{z.grid_w}"
        )
    x = ad.reshape(toks, (b, z.grid_h, z.grid_w, d))
    return ad.transpose(x, (0, 3, 1, 2))


def grid_to_tokens(x: Tensor) -> Tensor:
    """Inverse of :func:`tokens_to_grid` on the patch tokens: [B,C,H,W] -> [B,HW,C]."""
    b, c, h, w = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 3, 1)), (b, h * w, c))


class MultiScaleReallocation:
    """Owns the branch, signal, and scale parameters for one reallocation block."""

    def __init__(self, channels: int, store: ParameterStore | None = None,
                 prefix: str = "mscr", seed: int = 0, dropout_p: float = 0.1):
        if channels % 4 != 0:
            raise ConfigError(f"channel count {channels} not divisible by 4")
        if not 0.0 <= dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {dropout_p}")
        self.channels = channels
        self.dropout_p = dropout_p
        self.store = store if store is not None else ParameterStore()
        self.prefix = prefix
        c4 = channels // 4

        def p(name, data):
            return self.store.add(f"{prefix}/{name}", data, trainable=True)

        def init_rng(name):
            return substream(seed, "init", f"{prefix}/{name}")

        for k in BRANCH_KERNELS:
            rng_dw = init_rng(f"branch{k}.depthwise")
            p(f"branch{k}.depthwise", rng_dw.normal(0.0, 1.0 / k, size=(channels, k, k)))
            p(f"branch{k}.depthwise_bias", np.zeros(channels))
            p(f"branch{k}.pointwise", _xavier(init_rng(f"branch{k}.pointwise"), c4, channels))
            p(f"branch{k}.pointwise_bias", np.zeros(c4))
        p("pool_proj", _xavier(init_rng("pool_proj"), c4, channels))
        p("pool_proj_bias", np.zeros(c4))
        # bias-free by design: keeps the all-zero-parameter case an exact identity
        p("signal_conv", _xavier(init_rng("signal_conv"), 1, channels))
        p("channel_scale", np.zeros(channels))

    def _p(self, name: str) -> Tensor:
        return self.store[f"{self.prefix}/{name}"]

    def forward(self, x: Tensor, training: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(
                f"expected [B,{self.channels},H,W], got {x.shape}"
            )
        branches = []
        for k in BRANCH_KERNELS:
            t = ad.depthwise_conv2d(x, self._p(f"branch{k}.depthwise"),
                                    self._p(f"branch{k}.depthwise_bias"))
            t = ad.pointwise_conv2d(t, self._p(f"branch{k}.pointwise"),
                                    self._p(f"branch{k}.pointwise_bias"))
            branches.append(t)
        pooled = ad.pointwise_conv2d(ad.maxpool2d(x, 3), self._p("pool_proj"),
                                     self._p("pool_proj_bias"))
        multi = ad.concat(branches + [pooled], axis=1)
        local = ad.dropout(ad.gelu(multi), self.dropout_p, training, rng)
        signal = ad.pointwise_conv2d(local, self._p("signal_conv"))  # [B,1,H,W]
        residual = ad.sub(local, signal)  # signal broadcasts across channels
        scale = ad.reshape(self._p("channel_scale"), (self.channels, 1, 1))
        adjusted = ad.add(local, ad.mul(scale, residual))
        return ad.add(x, adjusted)


def mscr_forward(x: Tensor, block: MultiScaleReallocation, training: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
    return block.forward(x, training=training, rng=rng)
