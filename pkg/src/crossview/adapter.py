"""Bottleneck convolutional adapters, attached in parallel to frozen blocks.

Each adapter is pointwise C->C/r, GELU, depthwise 3x3, GELU, pointwise C/r->C.
The final pointwise conv starts at exactly zero, so a freshly built adapted
network computes the same function as the frozen one.  The CLS token has no
grid position, so the adapter branch contributes nothing to it.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import Backbone, TokenGrid, _xavier
from .errors import ConfigError, ContractError
from .mscr import grid_to_tokens, tokens_to_grid
from .params import ParameterStore
from .rng import substream


class ConvAdapter:
    def __init__(self, channels: int, reduction: int = 4,
                 store: ParameterStore | None = None, prefix: str = "adapter/blocks.0",
                 seed: int = 0):
        if channels % reduction != 0:
            raise ConfigError(
                f"channels {channels} not divisible by reduction ratio {reduction}"
            )
        self.channels = channels
        self.reduction = reduction
        self.store = store if store is not None else ParameterStore()
        self.prefix = prefix
        hidden = channels // reduction

        def p(name, data):
            return self.store.add(f"{prefix}/{name}", data, trainable=True)

        def init_rng(name):
            return substream(seed, "init", f"{prefix}/{name}")

        p("down.weight", _xavier(init_rng("down.weight"), hidden, channels))
        p("down.bias", np.zeros(hidden))
        p("depthwise.weight", init_rng("depthwise.weight").normal(0.0, 1.0 / 3.0,
                                                                  size=(hidden, 3, 3)))
        p("depthwise.bias", np.zeros(hidden))
        p("up.weight", np.zeros((channels, hidden)))  # zero: adapted == frozen at init
        p("up.bias", np.zeros(channels))

    def _p(self, name: str) -> Tensor:
        return self.store[f"{self.prefix}/{name}"]

    def branch(self, z: TokenGrid) -> Tensor:
        """Adapter branch output on the patch tokens: [B, grid_h*grid_w, C]."""
        x = tokens_to_grid(z)
        x = ad.gelu(ad.pointwise_conv2d(x, self._p("down.weight"), self._p("down.bias")))
        x = ad.gelu(ad.depthwise_conv2d(x, self._p("depthwise.weight"),
                                        self._p("depthwise.bias")))
        x = ad.pointwise_conv2d(x, self._p("up.weight"), self._p("up.bias"))
        return grid_to_tokens(x)

    def forward(self, z: TokenGrid) -> TokenGrid:
        """Standalone adapter application; the CLS token passes through bit-unchanged."""
        out = self.branch(z)
        if z.has_cls:
            cls = ad.index_range(z.tokens, 1, 0, 1)
            out = ad.concat([cls, out], axis=1)
        return TokenGrid(out, z.grid_h, z.grid_w, z.has_cls)

    def adapted_combine(self, block_input: TokenGrid, block_output: TokenGrid) -> TokenGrid:
        """Parallel composition: frozen block output plus the adapter branch.

        The branch is computed from the block *input* and added elementwise;
        the CLS row receives no adapter contribution.
        """
        delta = self.branch(block_input)
        if block_input.has_cls:
            b = delta.shape[0]
            pad = Tensor(np.zeros((b, 1, self.channels)))
            delta = ad.concat([pad, delta], axis=1)
        if delta.shape != block_output.tokens.shape:
            raise ContractError(  # invariant breach, not a user error
                f"adapter branch shape {delta.shape} != block output "
                f"{block_output.tokens.shape}"
            )
        return TokenGrid(ad.add(block_output.tokens, delta),
                         block_output.grid_h, block_output.grid_w,
                         block_output.has_cls)


def adapter_forward(z: TokenGrid, adapter: ConvAdapter) -> TokenGrid:
    return adapter.forward(z)


def adapted_block(backbone: Backbone, z: TokenGrid, index: int,
                  adapter: ConvAdapter) -> TokenGrid:
    """One frozen block with its parallel adapter: T(z) + A(z)."""
    return adapter.adapted_combine(z, backbone.block_forward(z, index))


def build_adapter_stack(channels: int, depth: int, reduction: int,
                        store: ParameterStore, seed: int) -> list[ConvAdapter]:
    return [
        ConvAdapter(channels, reduction, store=store,
                    prefix=f"adapter/blocks.{i}", seed=seed)
        for i in range(depth)
    ]
