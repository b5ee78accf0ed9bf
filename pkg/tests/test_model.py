"""Tests for the CNN branch, ViT backbone, fusion blocks and the full model."""
import numpy as np
import pytest

from densetok.cnn import FeatureCNN
from densetok.config import load_config
from densetok.defm import (
    DensityFusion,
    apply_focus,
    channel_split,
    masked_global_pool,
    train_modulate,
)
from densetok.density import RefinedMask, density_batch
from densetok.errors import ConfigError, DataError, ShapeError
from densetok.functional import layer_norm
from densetok.layers import Mode
from densetok.model import DenseTokModel
from densetok.tensor import Tensor, no_grad
from densetok.train import Trainer
from densetok.vit import (
    AttentionBlock,
    Backbone,
    ModelConfig,
    gather_tokens,
    hard_keep_mask,
    patchify,
    scatter_tokens,
    tokens_to_grid,
    unpatchify,
)


def _mask(values):
    values = Tensor(np.asarray(values, dtype=float))
    b, gh, gw = values.shape
    return RefinedMask(level=0, grid_h=gh, grid_w=gw, values=values, raw=values)


# ---------------------------------------------------------------------------
# Config tests
# ---------------------------------------------------------------------------

class TestModelConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert (cfg.grid_h, cfg.grid_w, cfg.num_tokens) == (8, 8, 64)
        assert cfg.fuse_level == 2

    def test_full_scale(self):
        cfg = ModelConfig.full_scale()
        assert cfg.num_tokens == 1024
        assert cfg.fuse_level == 3
        assert cfg.defm_layers == (3, 6, 9)

    def test_defm_level_capped_at_fuse_level(self):
        cfg = ModelConfig(patch_size=4, defm_layers=(0, 1, 2, 3))
        assert [cfg.defm_level(k) for k in range(4)] == [0, 1, 1, 1]

    @pytest.mark.parametrize("overrides", [
        {"patch_size": 3},
        {"defm_layers": (4,)},
        {"defm_layers": (2, 1)},
        {"embed_dim": 30, "num_heads": 4},
        {"keep_ratio": 0.0},
        {"image_size": (40, 40)},
    ])
    def test_invalid(self, overrides):
        with pytest.raises(ConfigError):
            ModelConfig(**overrides)

    def test_dict_round_trip(self):
        cfg = ModelConfig.tiny()
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            ModelConfig.from_dict({"depht": 3})


# ---------------------------------------------------------------------------
# CNN tests
# ---------------------------------------------------------------------------

class TestCNN:
    def test_pyramid_shapes(self, rng):
        features = FeatureCNN(rng, (2, 3, 4, 5))(Tensor(rng.uniform(size=(2, 1, 16, 16))))
        assert features.shapes() == [(2, 2, 8, 8), (2, 3, 4, 4), (2, 4, 2, 2), (2, 5, 1, 1)]

    def test_indivisible_input(self, rng):
        with pytest.raises(ShapeError):
            FeatureCNN(rng, (2, 2, 2, 2))(Tensor(np.zeros((1, 1, 24, 24))))


# ---------------------------------------------------------------------------
# Token layout tests
# ---------------------------------------------------------------------------

class TestTokens:
    def test_patch_order(self):
        patches = patchify(np.arange(16.0).reshape(1, 1, 4, 4), 2).data
        np.testing.assert_array_equal(patches[0, 0], [0, 1, 4, 5])
        np.testing.assert_array_equal(patches[0, 1], [2, 3, 6, 7])

    def test_unpatchify_inverts(self, rng):
        image = rng.normal(size=(2, 1, 8, 8))
        back = unpatchify(patchify(image, 4), 4, 2, 2).data
        np.testing.assert_array_equal(back, image)

    def test_tokens_to_grid(self):
        tokens = Tensor(np.arange(6.0).reshape(1, 6, 1))
        grid = tokens_to_grid(tokens, 2, 3).data
        assert grid[0, 0, 1, 2] == 5.0
        assert grid[0, 0, 0, 1] == 1.0

    def test_patchify_indivisible(self):
        with pytest.raises(ShapeError):
            patchify(np.zeros((1, 1, 6, 6)), 4)


# ---------------------------------------------------------------------------
# Attention tests
# ---------------------------------------------------------------------------

class TestAttention:
    def test_rows_sum_to_one(self, rng):
        block = AttentionBlock(rng, 8, 2, 2.0)
        weights = block.attention_weights(Tensor(rng.normal(size=(2, 5, 8)))).data
        assert weights.shape == (2, 2, 5, 5)
        np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-12)

    def test_masked_keys_get_no_weight(self, rng):
        block = AttentionBlock(rng, 8, 2, 2.0)
        key_mask = np.array([[True, False, True, False]])
        weights = block.attention_weights(Tensor(rng.normal(size=(1, 4, 8))), key_mask).data
        assert not weights[..., [1, 3]].any()
        np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-12)

    def test_permutation_equivariant(self, rng):
        block = AttentionBlock(rng, 8, 2, 2.0)
        z = rng.normal(size=(2, 6, 8))
        perm = rng.permutation(6)
        out = block(Tensor(z)).data
        np.testing.assert_allclose(block(Tensor(z[:, perm])).data, out[:, perm], atol=1e-12)

    def test_zero_weights_give_layer_norm(self, rng):
        block = AttentionBlock(rng, 8, 2, 2.0)
        for name, p in block.named_parameters():
            if not name.endswith("gamma"):
                p.data[...] = 0.0
        z = Tensor(rng.normal(size=(2, 3, 8)))
        np.testing.assert_allclose(block(z).data, layer_norm(z).data, atol=1e-12)

    def test_hard_keep_mask(self):
        o_hat = Tensor(np.array([[[0.9, 0.1], [0.1, 0.9], [0.5, 0.5], [0.7, 0.3]]]))
        np.testing.assert_array_equal(hard_keep_mask(o_hat, 0.5, None), [[True, False, False, True]])
        active = np.array([[False, True, True, True]])
        np.testing.assert_array_equal(hard_keep_mask(o_hat, 0.5, active),
                                      [[False, False, True, True]])


# ---------------------------------------------------------------------------
# Fusion block tests
# ---------------------------------------------------------------------------

class TestFusion:
    def test_focus_rows_are_distributions(self, rng):
        block = DensityFusion(rng, 8)
        out = block(Tensor(rng.normal(size=(2, 4, 8))), _mask(rng.uniform(size=(2, 2, 2))),
                    Mode.TRAINING)
        assert out.o_hat.shape == (2, 4, 2)
        np.testing.assert_allclose(out.o_hat.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_focus_scales_original_tokens(self, rng):
        block = DensityFusion(rng, 8)
        z = Tensor(rng.normal(size=(1, 4, 8)))
        out = block(z, _mask(rng.uniform(size=(1, 2, 2))), Mode.INFERRING)
        np.testing.assert_allclose(out.tokens.data, z.data * out.o_hat.data[..., :1])

    def test_pool_scale_invariant(self, rng):
        z = Tensor(rng.normal(size=(2, 4, 3)))
        w = rng.uniform(0.1, 1.0, size=(2, 4, 3))
        base = masked_global_pool(z, Tensor(w)).data
        for c in (1e-3, 7.0, 1e4):
            np.testing.assert_allclose(masked_global_pool(z, Tensor(w * c)).data, base, atol=1e-10)

    def test_unit_mask_gives_token_mean(self, rng):
        z = Tensor(rng.normal(size=(2, 5, 3)))
        pooled = masked_global_pool(z, Tensor(np.ones((2, 5, 3)))).data
        np.testing.assert_allclose(pooled, z.data.mean(axis=1), atol=1e-15)

    def test_zero_mask_is_finite(self, rng):
        pooled = masked_global_pool(Tensor(rng.normal(size=(1, 4, 2))), Tensor(np.zeros((1, 4, 2))))
        np.testing.assert_array_equal(pooled.data, 0.0)

    def test_modulation_only_when_training(self, rng):
        z = Tensor(rng.normal(size=(1, 2, 4)))
        mask = Tensor(np.array([[0.0, 1.0]]))
        assert train_modulate(z, mask, Mode.INFERRING) is z
        assert not train_modulate(z, mask, Mode.TRAINING).data[0, 0].any()

    def test_apply_focus_uses_keep_channel(self):
        z = Tensor(np.ones((1, 2, 3)))
        o_hat = Tensor(np.array([[[0.25, 0.75], [1.0, 0.0]]]))
        np.testing.assert_array_equal(apply_focus(z, o_hat).data[0, :, 0], [0.25, 1.0])

    def test_odd_channels_rejected(self):
        with pytest.raises(ShapeError):
            channel_split(Tensor(np.ones((1, 2, 3))))

    def test_mask_grid_mismatch(self, rng):
        block = DensityFusion(rng, 8)
        with pytest.raises(ShapeError):
            block(Tensor(np.ones((1, 4, 8))), _mask(np.ones((1, 3, 3))), Mode.TRAINING)


# ---------------------------------------------------------------------------
# Backbone tests
# ---------------------------------------------------------------------------

class TestBackbone:
    def test_no_gated_layers_matches_plain(self, rng):
        cfg = ModelConfig(image_size=(16, 16), patch_size=8, embed_dim=8, depth=2, num_heads=2,
                          defm_layers=(), cnn_channels=(2, 2, 2, 2))
        backbone = Backbone(rng, cfg)
        image = rng.uniform(size=(2, 1, 16, 16))
        out = backbone(image, [], Mode.INFERRING)
        np.testing.assert_array_equal(out.tokens.data, backbone.forward_plain(image).data)
        assert out.focus == []

    def test_mask_count_checked(self, rng, tiny_config):
        with pytest.raises(ShapeError):
            Backbone(rng, tiny_config)(np.zeros((1, 1, 16, 16)), [], Mode.INFERRING)

    def test_hard_keep_drops_tokens(self, rng, monkeypatch):
        cfg = ModelConfig(image_size=(16, 16), patch_size=4, embed_dim=8, depth=2, num_heads=2,
                          defm_layers=(0,), cnn_channels=(2, 2, 2, 2), hard_keep=True,
                          keep_ratio=0.5)
        backbone = Backbone(rng, cfg)
        seen = []
        call = AttentionBlock.__call__

        def recording_call(block, z, key_mask=None):
            seen.append(z.data.copy())
            return call(block, z, key_mask)

        monkeypatch.setattr(AttentionBlock, "__call__", recording_call)
        out = backbone(rng.uniform(size=(2, 1, 16, 16)), [_mask(rng.uniform(size=(2, 4, 4)))],
                       Mode.INFERRING)
        kept = out.key_mask
        np.testing.assert_array_equal(kept.sum(axis=1), [8, 8])
        # later blocks only see the kept tokens
        assert [s.shape for s in seen] == [(2, 8, 8), (2, 8, 8)]
        # kept tokens enter the first block still gated by their keep probability
        np.testing.assert_array_equal(seen[0],
                                      out.focus[0].tokens.data[kept].reshape(2, 8, 8))
        assert out.tokens.shape == (2, 16, 8)
        assert not out.tokens.data[~kept].any()
        assert np.abs(out.tokens.data[kept]).sum(axis=-1).min() > 0.0

    def test_hard_keep_full_ratio_matches_soft(self):
        soft_cfg = ModelConfig(image_size=(16, 16), patch_size=4, embed_dim=8, depth=3,
                               num_heads=2, defm_layers=(0, 2), cnn_channels=(2, 2, 2, 2))
        hard_cfg = ModelConfig(**{**soft_cfg.to_dict(), "hard_keep": True, "keep_ratio": 1.0})
        image = np.random.default_rng(1).uniform(size=(1, 1, 16, 16))
        masks = [_mask(np.random.default_rng(2).uniform(size=(1, 4, 4)))] * 2
        soft = Backbone(np.random.default_rng(0), soft_cfg)(image, masks, Mode.INFERRING)
        hard = Backbone(np.random.default_rng(0), hard_cfg)(image, masks, Mode.INFERRING)
        assert hard.key_mask.all()
        np.testing.assert_allclose(hard.tokens.data, soft.tokens.data, atol=1e-12)

    def test_gather_scatter_tokens(self, rng):
        tokens = Tensor(rng.normal(size=(2, 5, 3)))
        index = np.array([[0, 3], [1, 4]])
        picked = gather_tokens(tokens, index)
        np.testing.assert_array_equal(picked.data[1], tokens.data[1, [1, 4]])
        back = scatter_tokens(picked, index, 5).data
        np.testing.assert_array_equal(back[0, [0, 3]], tokens.data[0, [0, 3]])
        assert not back[0, [1, 2, 4]].any()

    def test_hard_keep_off_when_training(self, rng):
        cfg = ModelConfig(image_size=(16, 16), patch_size=8, embed_dim=8, depth=2, num_heads=2,
                          defm_layers=(1,), cnn_channels=(2, 2, 2, 2), hard_keep=True)
        out = Backbone(rng, cfg)(rng.uniform(size=(1, 1, 16, 16)),
                                 [_mask(rng.uniform(size=(1, 2, 2)))], Mode.TRAINING)
        assert out.key_mask is None


# ---------------------------------------------------------------------------
# Full model tests
# ---------------------------------------------------------------------------

class TestModel:
    def test_forward_shapes(self, tiny_config, tiny_boxes):
        model = DenseTokModel(tiny_config, seed=0)
        images = np.random.default_rng(0).uniform(size=(2, 1, 16, 16))
        out = model.forward(images, Mode.TRAINING, density_batch(tiny_boxes, 16, 16))
        assert out.head.objectness.shape == (2, 1, 2, 2)
        assert out.head.boxes.shape == (2, 5, 2, 2)
        assert len(out.masks) == len(out.focus_probs) == len(out.density_raw) == 1

    def test_training_needs_density(self, tiny_config):
        with pytest.raises(ShapeError):
            DenseTokModel(tiny_config).forward(np.zeros((1, 1, 16, 16)), Mode.TRAINING)

    def test_wrong_image_shape(self, tiny_config):
        with pytest.raises(ShapeError):
            DenseTokModel(tiny_config).detect(np.zeros((1, 1, 32, 32)), 0.5, 0.3)

    def test_inference_ignores_density(self, tiny_config, rng):
        model = DenseTokModel(tiny_config, seed=1)
        images = rng.uniform(size=(2, 1, 16, 16))
        with no_grad():
            a = model.forward(images, Mode.INFERRING)
            b = model.forward(images, Mode.INFERRING, rng.uniform(0, 9, size=(2, 16, 16)))
        np.testing.assert_array_equal(a.head.objectness.data, b.head.objectness.data)
        np.testing.assert_array_equal(a.head.boxes.data, b.head.boxes.data)

    def test_same_seed_same_weights(self, tiny_config):
        a, b = DenseTokModel(tiny_config, seed=5), DenseTokModel(tiny_config, seed=5)
        for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
            np.testing.assert_array_equal(p.data, q.data)

    def test_loss_backward_reaches_both_mask_branches(self, tiny_config, tiny_boxes, rng):
        model = DenseTokModel(tiny_config, seed=2)
        loss = model.training_step_loss(rng.uniform(size=(2, 1, 16, 16)), tiny_boxes)
        assert np.isfinite(loss.total.item())
        loss.total.backward()
        assert model.refiner.train_convs[0].weight.grad is not None
        assert model.refiner.infer_convs[0].weight.grad is not None
        assert model.backbone.fusions[0].fc2.weight.grad is not None

    def test_save_load_round_trip(self, tiny_config, tmp_path, rng):
        model = DenseTokModel(tiny_config, seed=3)
        path = model.save(tmp_path / "m.ckpt", {"iteration": 0})
        loaded = DenseTokModel.load(path, expected=tiny_config)
        assert loaded.meta == {"iteration": 0}
        images = rng.uniform(size=(1, 1, 16, 16))
        with no_grad():
            np.testing.assert_array_equal(
                model.forward(images, Mode.INFERRING).head.objectness.data,
                loaded.forward(images, Mode.INFERRING).head.objectness.data,
            )

    def test_load_config_mismatch(self, tiny_config, tmp_path):
        path = DenseTokModel(tiny_config).save(tmp_path / "m.ckpt")
        with pytest.raises(DataError):
            DenseTokModel.load(path, expected=ModelConfig())

    def test_detect_returns_per_image_lists(self, tiny_config, rng):
        dets = DenseTokModel(tiny_config).detect(rng.uniform(size=(3, 1, 16, 16)), 0.01, 0.3)
        assert len(dets) == 3
        assert all(d.box.score >= 0.01 for image in dets for d in image)


# ---------------------------------------------------------------------------
# Training loop tests
# ---------------------------------------------------------------------------

class TestTrainer:
    def test_loss_decreases_on_fixed_batch(self, tiny_run_config, tiny_scenes):
        run = load_config(tiny_run_config, **{
            "train.iters": 20, "train.flip_aug": False, "optim.lr_base": 2e-3,
        })
        result = Trainer(run, tiny_scenes[:2]).fit()
        totals = [row["total"] for row in result.losses]
        assert len(totals) == 20
        assert all(np.isfinite(totals))
        assert totals[-1] < totals[0]
        assert np.mean(totals[-5:]) < np.mean(totals[:5])
