"""Symmetric InfoNCE with a learnable temperature.

The similarity matrix holds dot products between L2-normalized query and
reference descriptors with positives on the diagonal; each direction is a
row-wise (or column-wise) cross-entropy computed through log-sum-exp.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .params import ParameterStore

DIRECTIONS = ("q2r", "r2q")


class Temperature:
    """Trainable inverse-temperature stored in log space, so tau > 0 always."""

    def __init__(self, store: ParameterStore | None = None, init_tau: float = 0.07,
                 prefix: str = "loss", trainable: bool = True):
        if init_tau <= 0:
            raise ConfigError(f"temperature must be positive, got {init_tau}")
        store = store if store is not None else ParameterStore()
        self.store = store
        self.log_inv_tau = store.add(f"{prefix}/log_inv_tau",
                                     np.array([math.log(1.0 / init_tau)]), trainable)

    @property
    def tau(self) -> float:
        return float(np.exp(-self.log_inv_tau.data[0]))

    def inverse(self) -> Tensor:
        return ad.exp(self.log_inv_tau)


def similarity_matrix(query_desc: Tensor, ref_desc: Tensor) -> Tensor:
    """[B,D] x [B,D] -> [B,B] of dot products; row i, column i is the positive."""
    if query_desc.ndim != 2 or query_desc.shape != ref_desc.shape:
        raise ShapeError(
            f"need matching [B,D] descriptor stacks, got {query_desc.shape} and {ref_desc.shape}"
        )
    return ad.matmul(query_desc, ad.transpose(ref_desc))


def _inverse_tau(temperature) -> Tensor:
    if isinstance(temperature, Temperature):
        return temperature.inverse()
    tau = float(temperature)
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    return Tensor([1.0 / tau])


def info_nce(sim: Tensor, temperature, direction: str = "q2r") -> Tensor:
    """One direction of the contrastive loss over a [B,B] similarity matrix.

    "q2r" treats rows as queries; "r2q" treats columns as queries.  Diagonal
    entries are the positives.  Log-sum-exp keeps large logits stable.
    """
    if direction not in DIRECTIONS:
        raise ConfigError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ShapeError(f"similarity matrix must be square, got {sim.shape}")
    logits = ad.mul(sim, _inverse_tau(temperature))
    if direction == "r2q":
        logits = ad.transpose(logits)
    return ad.tensor_mean(ad.sub(ad.logsumexp(logits), ad.diag_part(logits)))


def symmetric_info_nce(sim: Tensor, temperature) -> Tensor:
    """Average of both retrieval directions."""
    both = ad.add(info_nce(sim, temperature, "q2r"),
                  info_nce(sim, temperature, "r2q"))
    return ad.mul(both, 0.5)
