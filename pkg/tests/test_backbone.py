"""Backbone tests: determinism, token arithmetic, freezing, block behaviour."""

import numpy as np
import pytest

from crossview import autodiff as ad
from crossview.backbone import Backbone, BackboneConfig, TokenGrid, init_backbone
from crossview.errors import ConfigError, ShapeError
from crossview.params import ParameterStore


def expected_param_count(cfg: BackboneConfig) -> int:
    """Independent enumeration of every array the encoder needs."""
    d = cfg.dim
    patch_dim = 3 * cfg.patch_size * cfg.patch_size
    n_tokens = (cfg.image_size // cfg.patch_size) ** 2 + 1
    total = patch_dim * d + d          # patch embedding
    total += d                         # cls token
    total += n_tokens * d              # position embedding
    per_block = (
        2 * d                          # ln1
        + 4 * (d * d + d)              # q,k,v,o projections
        + 2 * d                        # ln2
        + (d * 4 * d + 4 * d)          # ffn in
        + (4 * d * d + d)              # ffn out
    )
    total += cfg.depth * per_block
    total += 2 * d                     # final ln
    return total


@pytest.fixture
def cfg():
    return BackboneConfig(image_size=32, patch_size=8, depth=2, dim=16, heads=4, seed=7)


def make_images(rng, cfg, n=2):
    return ad.Tensor(rng.random((n, 3, cfg.image_size, cfg.image_size)))


class TestInit:
    def test_same_seed_is_bit_identical(self, cfg):
        a, b = Backbone(cfg), Backbone(cfg)
        for name, t in a.store.items():
            np.testing.assert_array_equal(t.data, b.store[name].data, err_msg=name)

    def test_different_seed_differs(self, cfg):
        other = BackboneConfig(cfg.image_size, cfg.patch_size, cfg.depth, cfg.dim,
                               cfg.heads, seed=cfg.seed + 1)
        a, b = Backbone(cfg), Backbone(other)
        assert not np.array_equal(a.store["backbone/patch_embed.weight"].data,
                                  b.store["backbone/patch_embed.weight"].data)

    def test_all_parameters_frozen(self, cfg):
        bb = init_backbone(cfg)
        assert len(bb.store) > 0
        assert all(not bb.store.is_trainable(n) for n in bb.store.names())

    def test_token_count(self, rng):
        cfg = BackboneConfig(64, 8, 4, 64, 4, seed=0)
        bb = Backbone(cfg)
        grid = bb.encode(make_images(rng, cfg, n=1))
        assert grid.tokens.shape == (1, 65, 64)  # 64 patches + 1 cls
        assert grid.grid_h == grid.grid_w == 8 and grid.has_cls

    def test_param_count_matches_enumeration(self, cfg):
        bb = Backbone(cfg)
        assert bb.store.count("backbone") == expected_param_count(cfg)

    def test_invalid_divisibility_rejected(self):
        with pytest.raises(ConfigError):
            BackboneConfig(image_size=30, patch_size=8)
        with pytest.raises(ConfigError):
            BackboneConfig(dim=30, heads=4)


class TestBlockForward:
    def test_preserves_shape(self, rng, cfg):
        bb = Backbone(cfg)
        z = bb.encode(make_images(rng, cfg))
        out = bb.block_forward(z, 0)
        assert out.tokens.shape == z.tokens.shape

    def test_zeroed_block_is_identity(self, rng, cfg):
        bb = Backbone(cfg)
        for proj in ("wq", "wk", "wv", "wo"):
            bb.store[f"backbone/blocks.0.attn.{proj}"].data[...] = 0.0
        bb.store["backbone/blocks.0.ffn.w1"].data[...] = 0.0
        bb.store["backbone/blocks.0.ffn.w2"].data[...] = 0.0
        toks = ad.Tensor(rng.standard_normal((2, 17, 16)))
        z = TokenGrid(toks, 4, 4, True)
        out = bb.block_forward(z, 0)
        np.testing.assert_array_equal(out.tokens.data, toks.data)

    def test_index_out_of_range(self, rng, cfg):
        bb = Backbone(cfg)
        z = TokenGrid(ad.Tensor(rng.standard_normal((1, 17, 16))), 4, 4, True)
        with pytest.raises(ConfigError):
            bb.block_forward(z, cfg.depth)

    def test_gradcheck_wrt_input(self, rng):
        cfg = BackboneConfig(16, 8, 1, 8, 2, seed=3)
        bb = Backbone(cfg)
        w = ad.Tensor(rng.standard_normal((1, 5, 8)))

        def fn(t):
            out = bb.block_forward(TokenGrid(t, 2, 2, True), 0)
            return ad.tensor_sum(ad.mul(out.tokens, w))

        err = ad.gradcheck(fn, ad.Tensor(rng.standard_normal((1, 5, 8))))
        assert err <= 1e-5


class TestEncode:
    def test_wrong_image_size_rejected(self, rng, cfg):
        bb = Backbone(cfg)
        with pytest.raises(ShapeError):
            bb.encode(ad.Tensor(rng.random((1, 3, 16, 16))))

    def test_deterministic(self, rng, cfg):
        bb = Backbone(cfg)
        imgs = make_images(rng, cfg)
        a = bb.encode(imgs).tokens.data
        b = bb.encode(imgs).tokens.data
        np.testing.assert_array_equal(a, b)

    def test_different_images_differ(self, rng, cfg):
        bb = Backbone(cfg)
        a = bb.encode(make_images(rng, cfg, n=1)).tokens.data
        b = bb.encode(make_images(rng, cfg, n=1)).tokens.data
        assert not np.array_equal(a, b)

    def test_frozen_params_receive_no_gradient(self, rng, cfg):
        bb = Backbone(cfg)
        imgs = make_images(rng, cfg)
        probe = ad.Tensor(np.zeros((1, 17, 16)), grad_tracked=True)
        with ad.Tape() as tape:
            grid = bb.encode(imgs)
            loss = ad.tensor_sum(ad.mul(ad.add(grid.tokens, probe), grid.tokens))
        tape.backward(loss)
        assert probe.grad is not None
        for name, t in bb.store.items():
            assert t.grad is None, f"frozen {name} got a gradient"

    def test_token_grid_invariant_enforced(self, rng):
        with pytest.raises(ShapeError):
            TokenGrid(ad.Tensor(rng.standard_normal((1, 10, 4))), 3, 3, False)
