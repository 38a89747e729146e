"""Learnable-query aggregation over expert-routed keys and values.

A fixed bank of learnable query vectors (independent of the input) is refined
by a three-stage attention pipeline against keys/values produced per token by
one of E expert projections.  A gating network picks each token's expert
(top-1); the surviving softmax weight scales that expert's K/V rows and keeps
the gate differentiable without straight-through tricks.  Stage outputs are
concatenated, projected, and L2-normalized into one global descriptor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import _xavier
from .errors import ConfigError, ShapeError
from .params import ParameterStore
from .rng import substream


@dataclass(frozen=True)
class AggregatorConfig:
    num_queries: int = 32
    dim: int = 64
    num_experts: int = 3
    heads: int = 4
    num_stages: int = 3
    out_dim: int = 256
    routing: str = "sparse"  # "sparse" (top-1 gate) or "dense" (single projection)

    def __post_init__(self):
        if self.num_experts < 1:
            raise ConfigError(f"need at least one expert, got {self.num_experts}")
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.routing not in ("sparse", "dense"):
            raise ConfigError(f"unknown routing mode {self.routing!r}")
        if self.routing == "dense" and self.num_experts != 1:
            raise ConfigError("dense routing uses exactly one KV projection")


class QueryAggregator:
    def __init__(self, cfg: AggregatorConfig, store: ParameterStore | None = None,
                 prefix: str = "aggregator", seed: int = 0):
        self.cfg = cfg
        self.store = store if store is not None else ParameterStore()
        self.prefix = prefix
        d = cfg.dim

        def p(name, data):
            return self.store.add(f"{prefix}/{name}", data, trainable=True)

        def init_rng(name):
            return substream(seed, "init", f"{prefix}/{name}")

        p("queries", init_rng("queries").normal(0.0, 0.02, size=(cfg.num_queries, d)))
        for e in range(cfg.num_experts):
            p(f"experts.{e}.wk", _xavier(init_rng(f"experts.{e}.wk"), d, d))
            p(f"experts.{e}.bk", np.zeros(d))
            p(f"experts.{e}.wv", _xavier(init_rng(f"experts.{e}.wv"), d, d))
            p(f"experts.{e}.bv", np.zeros(d))
        if cfg.routing == "sparse":
            p("gate.weight", _xavier(init_rng("gate.weight"), d, cfg.num_experts))
            p("gate.bias", np.zeros(cfg.num_experts))
        for s in range(cfg.num_stages):
            base = f"stages.{s}"
            for proj in ("wq", "wk", "wv", "wo"):
                p(f"{base}.self_attn.{proj}",
                  _xavier(init_rng(f"{base}.self_attn.{proj}"), d, d))
                p(f"{base}.self_attn.b{proj[1]}", np.zeros(d))
            p(f"{base}.cross.wq", _xavier(init_rng(f"{base}.cross.wq"), d, d))
            p(f"{base}.cross.bq", np.zeros(d))
            p(f"{base}.cross.wo", _xavier(init_rng(f"{base}.cross.wo"), d, d))
            p(f"{base}.cross.bo", np.zeros(d))
            p(f"{base}.ffn.w1", _xavier(init_rng(f"{base}.ffn.w1"), d, 4 * d))
            p(f"{base}.ffn.b1", np.zeros(4 * d))
            p(f"{base}.ffn.w2", _xavier(init_rng(f"{base}.ffn.w2"), 4 * d, d))
            p(f"{base}.ffn.b2", np.zeros(d))
            for norm in ("norm1", "norm2", "norm3"):
                p(f"{base}.{norm}.gain", np.ones(d))
                p(f"{base}.{norm}.bias", np.zeros(d))
        concat_dim = cfg.num_stages * cfg.num_queries * d
        p("head.weight", _xavier(init_rng("head.weight"), concat_dim, cfg.out_dim))
        p("head.bias", np.zeros(cfg.out_dim))

    def _p(self, name: str) -> Tensor:
        return self.store[f"{self.prefix}/{name}"]

    @property
    def queries(self) -> Tensor:
        return self._p("queries")

    # -- routing -------------------------------------------------------------

    def gate(self, x: Tensor) -> Tensor:
        """Per-token expert distribution, hard-masked to its top-1 entry.

        The surviving entry keeps its softmax value (no renormalization), so
        gradient reaches the gate weights.  Ties pick the lowest expert index.
        """
        if self.cfg.routing != "sparse":
            raise ConfigError("gate is only defined for sparse routing")
        logits = ad.add(ad.matmul(x, self._p("gate.weight")), self._p("gate.bias"))
        scores = ad.softmax(logits)
        assign = scores.data.argmax(axis=-1)  # first max wins on ties
        mask = np.zeros_like(scores.data)
        np.put_along_axis(mask, assign[..., None], 1.0, axis=-1)
        return ad.mul(scores, Tensor(mask))

    def expert_kv(self, x: Tensor) -> list[tuple[Tensor, Tensor]]:
        """Dense per-expert keys and values for every token."""
        lead = x.shape[:-1]
        flat = ad.reshape(x, (-1, self.cfg.dim))
        out = []
        for e in range(self.cfg.num_experts):
            k = ad.rowwise_linear(flat, self._p(f"experts.{e}.wk"), self._p(f"experts.{e}.bk"))
            v = ad.rowwise_linear(flat, self._p(f"experts.{e}.wv"), self._p(f"experts.{e}.bv"))
            out.append((ad.reshape(k, lead + (self.cfg.dim,)),
                        ad.reshape(v, lead + (self.cfg.dim,))))
        return out

    def route_kv(self, x: Tensor, gate_out: Tensor) -> tuple[Tensor, Tensor]:
        """Sparse mixture of expert K/V rows.

        Only the rows routed to each expert are projected through it (the
        top-1 efficiency contract); results land at their token positions
        scaled by the surviving gate value.
        """
        lead = x.shape[:-1]
        d = self.cfg.dim
        flat = ad.reshape(x, (-1, d))
        gate_flat = ad.reshape(gate_out, (-1, self.cfg.num_experts))
        assign = gate_flat.data.argmax(axis=-1)
        total = flat.shape[0]
        k_out = None
        v_out = None
        for e in range(self.cfg.num_experts):
            idx = np.nonzero(assign == e)[0]
            if idx.size == 0:
                continue
            rows = ad.gather_rows(flat, idx)
            weight = ad.gather_rows(
                ad.reshape(ad.select_last(gate_flat, e), (total, 1)), idx)
            k_e = ad.mul(ad.rowwise_linear(rows, self._p(f"experts.{e}.wk"),
                                           self._p(f"experts.{e}.bk")), weight)
            v_e = ad.mul(ad.rowwise_linear(rows, self._p(f"experts.{e}.wv"),
                                           self._p(f"experts.{e}.bv")), weight)
            k_scat = ad.scatter_rows(k_e, idx, total)
            v_scat = ad.scatter_rows(v_e, idx, total)
            k_out = k_scat if k_out is None else ad.add(k_out, k_scat)
            v_out = v_scat if v_out is None else ad.add(v_out, v_scat)
        return (ad.reshape(k_out, lead + (d,)), ad.reshape(v_out, lead + (d,)))

    def dense_kv(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Gate-free baseline: one shared KV projection for every token."""
        lead = x.shape[:-1]
        flat = ad.reshape(x, (-1, self.cfg.dim))
        k = ad.rowwise_linear(flat, self._p("experts.0.wk"), self._p("experts.0.bk"))
        v = ad.rowwise_linear(flat, self._p("experts.0.wv"), self._p("experts.0.bv"))
        return (ad.reshape(k, lead + (self.cfg.dim,)),
                ad.reshape(v, lead + (self.cfg.dim,)))

    # -- attention pipeline ---------------------------------------------------

    def _heads(self, t: Tensor) -> Tensor:
        b, n, d = t.shape
        h = self.cfg.heads
        return ad.transpose(ad.reshape(t, (b, n, h, d // h)), (0, 2, 1, 3))

    def _merge(self, t: Tensor) -> Tensor:
        b, h, n, dh = t.shape
        return ad.reshape(ad.transpose(t, (0, 2, 1, 3)), (b, n, h * dh))

    def _mha(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        dh = self.cfg.dim // self.cfg.heads
        scores = ad.mul(ad.matmul(self._heads(q), ad.transpose(self._heads(k), (0, 1, 3, 2))),
                        1.0 / math.sqrt(dh))
        return self._merge(ad.matmul(ad.softmax(scores), self._heads(v)))

    def stage_forward(self, queries: Tensor, k: Tensor, v: Tensor, stage: int) -> Tensor:
        """Refine queries: self-attention, cross-attention over (K, V), FFN,
        each followed by residual + layer norm."""
        base = f"stages.{stage}"

        def norm(t, which):
            return ad.layer_norm(t, self._p(f"{base}.{which}.gain"),
                                 self._p(f"{base}.{which}.bias"))

        sq = ad.add(ad.matmul(queries, self._p(f"{base}.self_attn.wq")),
                    self._p(f"{base}.self_attn.bq"))
        sk = ad.add(ad.matmul(queries, self._p(f"{base}.self_attn.wk")),
                    self._p(f"{base}.self_attn.bk"))
        sv = ad.add(ad.matmul(queries, self._p(f"{base}.self_attn.wv")),
                    self._p(f"{base}.self_attn.bv"))
        self_out = ad.add(ad.matmul(self._mha(sq, sk, sv), self._p(f"{base}.self_attn.wo")),
                          self._p(f"{base}.self_attn.bo"))
        q1 = norm(ad.add(queries, self_out), "norm1")

        cq = ad.add(ad.matmul(q1, self._p(f"{base}.cross.wq")), self._p(f"{base}.cross.bq"))
        cross_out = ad.add(ad.matmul(self._mha(cq, k, v), self._p(f"{base}.cross.wo")),
                           self._p(f"{base}.cross.bo"))
        q2 = norm(ad.add(q1, cross_out), "norm2")

        hidden = ad.gelu(ad.add(ad.matmul(q2, self._p(f"{base}.ffn.w1")),
                                self._p(f"{base}.ffn.b1")))
        ffn_out = ad.add(ad.matmul(hidden, self._p(f"{base}.ffn.w2")),
                         self._p(f"{base}.ffn.b2"))
        return norm(ad.add(q2, ffn_out), "norm3")

    # -- full aggregation -------------------------------------------------------

    def aggregate(self, x: Tensor, collect: dict | None = None) -> Tensor:
        """Tokens -> one unit-norm descriptor per input.

        Accepts [N,D] (returns [out_dim]) or [B,N,D] (returns [B,out_dim]).
        Routing is computed once on the input tokens and shared by all stages.
        """
        single = x.ndim == 2
        if single:
            x = ad.reshape(x, (1,) + x.shape)
        if x.ndim != 3 or x.shape[-1] != self.cfg.dim:
            raise ShapeError(f"expected tokens [B,N,{self.cfg.dim}], got {x.shape}")
        if x.shape[1] == 0:
            raise ShapeError("cannot aggregate an empty token set")
        b = x.shape[0]

        if self.cfg.routing == "sparse":
            g = self.gate(x)
            if collect is not None:
                assign = g.data.argmax(axis=-1).reshape(-1)
                counts = np.bincount(assign, minlength=self.cfg.num_experts)
                prev = collect.get("expert_counts", np.zeros(self.cfg.num_experts, dtype=np.int64))
                collect["expert_counts"] = prev + counts
            k, v = self.route_kv(x, g)
        else:
            k, v = self.dense_kv(x)

        q = ad.tile_leading(self.queries, b)
        stage_outs = []
        for s in range(self.cfg.num_stages):
            q = self.stage_forward(q, k, v, s)
            stage_outs.append(ad.reshape(q, (b, self.cfg.num_queries * self.cfg.dim)))
        merged = ad.concat(stage_outs, axis=1)
        desc = ad.add(ad.matmul(merged, self._p("head.weight")), self._p("head.bias"))
        desc = ad.l2_normalize(desc)
        if single:
            desc = ad.reshape(desc, (self.cfg.out_dim,))
        return desc
