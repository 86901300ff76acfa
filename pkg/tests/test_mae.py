import math

import numpy as np
import pytest
import torch
from scipy.special import erf

from affectkit.checkpoint import (
    load_checkpoint, load_state_dict, save_checkpoint, state_dict_tensors,
)
from affectkit.datamodel import Task, TaskSpec
from affectkit.mae import (
    MAEConfig, MaskedAutoencoder, MaskPlan, PatchGrid, attach_head, finetune,
    mae_forward, mae_loss, patchify, plans_to_mask, pretrain, sample_mask,
    sincos_pos_embed_2d, unpatchify,
)
from affectkit.optim import OptimizerSpec

# ---------------------------------------------------------------------------
# Plain-numpy transcription of the forward pass, driven by the state dict.
# ---------------------------------------------------------------------------


def np_linear(x, w, b):
    return x @ w.T + b


def np_gelu(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def np_softmax(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def np_layer_norm(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def np_attention(x, p, pre, n_heads):
    b, n, d = x.shape
    hd = d // n_heads
    qkv = np_linear(x, p[f"{pre}.qkv.weight"], p[f"{pre}.qkv.bias"])
    qkv = qkv.reshape(b, n, 3, n_heads, hd).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    attn = np_softmax(q @ k.transpose(0, 1, 3, 2) * hd ** -0.5)
    out = (attn @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
    return np_linear(out, p[f"{pre}.proj.weight"], p[f"{pre}.proj.bias"])


def np_block(x, p, pre, n_heads):
    h = np_layer_norm(x, p[f"{pre}.norm1.weight"], p[f"{pre}.norm1.bias"])
    x = x + np_attention(h, p, f"{pre}.attn", n_heads)
    h = np_layer_norm(x, p[f"{pre}.norm2.weight"], p[f"{pre}.norm2.bias"])
    h = np_gelu(np_linear(h, p[f"{pre}.mlp.fc1.weight"],
                          p[f"{pre}.mlp.fc1.bias"]))
    return x + np_linear(h, p[f"{pre}.mlp.fc2.weight"],
                         p[f"{pre}.mlp.fc2.bias"])


def np_patchify(images, grid):
    b, h, w, c = images.shape
    g, ps = grid.grid_size, grid.patch_size
    x = images.reshape(b, g, ps, g, ps, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, g * g, ps * ps * c)


def np_encoder(p, images, masked, config):
    patches = np_patchify(images, config.grid)
    pos = p["encoder.pos_embed"]
    if masked is None:
        x = np_linear(patches, p["encoder.patch_embed.weight"],
                      p["encoder.patch_embed.bias"]) + pos
    else:
        b = patches.shape[0]
        vis = np.stack([np.nonzero(~masked[i])[0] for i in range(b)])
        gathered = np.stack([patches[i, vis[i]] for i in range(b)])
        x = np_linear(gathered, p["encoder.patch_embed.weight"],
                      p["encoder.patch_embed.bias"]) + pos[vis]
    for i in range(config.encoder_depth):
        x = np_block(x, p, f"encoder.blocks.{i}", config.encoder_heads)
    x = np_layer_norm(x, p["encoder.norm.weight"], p["encoder.norm.bias"])
    return x, x.mean(axis=1)


def np_decoder(p, tokens, masked, config):
    b, n_vis, _ = tokens.shape
    n_patches = masked.shape[1]
    x = np_linear(tokens, p["decoder.embed.weight"], p["decoder.embed.bias"])
    full = np.tile(p["decoder.mask_token"].reshape(1, 1, -1),
                   (b, n_patches, 1)).astype(x.dtype)
    for i in range(b):
        full[i, np.nonzero(~masked[i])[0]] = x[i]
    x = full + p["decoder.pos_embed"]
    for i in range(config.decoder_depth):
        x = np_block(x, p, f"decoder.blocks.{i}", config.decoder_heads)
    x = np_layer_norm(x, p["decoder.norm.weight"], p["decoder.norm.bias"])
    return np_linear(x, p["decoder.pred.weight"], p["decoder.pred.bias"])


def params_as_numpy(model):
    return {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}


# ---------------------------------------------------------------------------


class TestPatchify:
    def test_pixel_positions_by_index_arithmetic(self):
        grid = PatchGrid(image_size=12, patch_size=3)
        rng = np.random.default_rng(70)
        images = torch.tensor(rng.normal(size=(2, 12, 12, 2)).astype(np.float32))
        patches = patchify(images, grid)
        g, ps, c = grid.grid_size, grid.patch_size, 2
        for b in (0, 1):
            for gr in range(g):
                for gc in range(g):
                    for pi in range(ps):
                        for pj in range(ps):
                            for ch in range(c):
                                flat = (pi * ps + pj) * c + ch
                                assert patches[b, gr * g + gc, flat] == \
                                    images[b, gr * ps + pi, gc * ps + pj, ch]

    def test_round_trip_bit_exact(self):
        grid = PatchGrid(image_size=32, patch_size=8)
        rng = np.random.default_rng(71)
        images = torch.tensor(rng.normal(size=(4, 32, 32, 3)).astype(np.float32))
        back = unpatchify(patchify(images, grid), grid, channels=3)
        assert torch.equal(back, images)

    def test_single_image_matches_batch(self):
        grid = PatchGrid(image_size=16, patch_size=4)
        rng = np.random.default_rng(72)
        img = torch.tensor(rng.normal(size=(16, 16, 1)).astype(np.float32))
        single = patchify(img, grid)
        batched = patchify(img.unsqueeze(0), grid)
        assert torch.equal(single, batched[0])

    def test_size_mismatch_rejected(self):
        grid = PatchGrid(image_size=16, patch_size=4)
        with pytest.raises(ValueError):
            patchify(torch.zeros(1, 12, 12, 1), grid)

    def test_grid_divisibility_enforced(self):
        with pytest.raises(ValueError):
            PatchGrid(image_size=30, patch_size=8)


class TestSampleMask:
    def test_masked_count_is_floor_of_product(self):
        rng = np.random.default_rng(73)
        for _ in range(500):
            size = int(rng.choice([2, 3, 4, 7, 14]))
            grid = PatchGrid(image_size=size * 4, patch_size=4)
            ratio = float(rng.uniform(0.05, 0.95))
            n = grid.n_patches
            expected = math.floor(ratio * n)
            if expected < 1 or expected > n - 1:
                continue
            plan = sample_mask(grid, ratio, int(rng.integers(0, 10 ** 6)))
            assert plan.n_masked == expected
            assert plan.n_visible == n - expected
            assert plan.masked.size == n

    def test_standard_grid_hand_value(self):
        grid = PatchGrid(image_size=224, patch_size=16)
        plan = sample_mask(grid, 0.75, seed=0)
        assert grid.n_patches == 196
        assert plan.n_masked == 147

    def test_deterministic_per_seed(self):
        grid = PatchGrid(image_size=32, patch_size=8)
        a = sample_mask(grid, 0.75, seed=5)
        b = sample_mask(grid, 0.75, seed=5)
        c = sample_mask(grid, 0.75, seed=6)
        np.testing.assert_array_equal(a.masked, b.masked)
        assert not np.array_equal(a.masked, c.masked)

    def test_extreme_ratios_rejected(self):
        grid = PatchGrid(image_size=32, patch_size=8)
        with pytest.raises(ValueError):
            sample_mask(grid, 0.01, seed=0)
        with pytest.raises(ValueError):
            sample_mask(grid, 1.0, seed=0)

    def test_plan_validation(self):
        with pytest.raises(ValueError):
            MaskPlan(masked=np.ones(4, dtype=bool), mask_ratio=1.0, seed=0)
        with pytest.raises(ValueError):
            MaskPlan(masked=np.zeros(4, dtype=bool), mask_ratio=0.0, seed=0)


class TestPosEmbed:
    def test_matches_direct_formula(self):
        dim, g = 16, 5
        table = sincos_pos_embed_2d(dim, g)
        assert table.shape == (g * g, dim)
        quarter = dim // 4
        omega = 1.0 / 10000.0 ** (np.arange(quarter) / quarter)
        for pos in range(g * g):
            r, c = divmod(pos, g)
            expected = np.concatenate([
                np.sin(r * omega), np.cos(r * omega),
                np.sin(c * omega), np.cos(c * omega)])
            np.testing.assert_allclose(table[pos], expected, atol=1e-12)

    def test_dim_must_divide_by_four(self):
        with pytest.raises(ValueError):
            sincos_pos_embed_2d(18, 4)

    def test_distinct_positions_distinct_rows(self):
        table = sincos_pos_embed_2d(32, 4)
        assert np.unique(table.round(9), axis=0).shape[0] == 16


class TestConfig:
    def test_round_trip(self):
        cfg = MAEConfig(image_size=64, patch_size=8, channels=3,
                        encoder_dim=96, encoder_depth=3, encoder_heads=6,
                        decoder_dim=48, decoder_depth=2, decoder_heads=4,
                        mask_ratio=0.6)
        assert MAEConfig.from_dict(cfg.to_dict()) == cfg

    def test_vit_base_preset(self):
        cfg = MAEConfig.vit_base()
        assert (cfg.image_size, cfg.patch_size, cfg.channels) == (224, 16, 3)
        assert (cfg.encoder_dim, cfg.encoder_depth, cfg.encoder_heads) == \
            (768, 12, 12)
        assert (cfg.decoder_dim, cfg.decoder_depth, cfg.decoder_heads) == \
            (512, 8, 16)
        assert cfg.mask_ratio == 0.75

    def test_dimension_checks(self):
        with pytest.raises(ValueError):
            MAEConfig(encoder_dim=65)
        with pytest.raises(ValueError):
            MAEConfig(encoder_dim=66, encoder_heads=4)
        with pytest.raises(ValueError):
            MAEConfig(mask_ratio=0.0)


class TestForwardOracle:
    """Double-precision forward pass against a from-scratch numpy mirror."""

    def setup_method(self):
        torch.manual_seed(99)
        self.config = MAEConfig()
        self.model = MaskedAutoencoder(self.config).double().eval()
        self.params = params_as_numpy(self.model)
        rng = np.random.default_rng(74)
        self.images = rng.uniform(size=(3, 32, 32, 1))
        self.plans = [sample_mask(self.config.grid, 0.75, seed=s)
                      for s in (1, 2, 3)]
        self.masked = np.stack([p.masked for p in self.plans])

    def test_full_model_matches_mirror(self):
        with torch.no_grad():
            out = mae_forward(self.model, torch.tensor(self.images),
                              self.plans)
        tokens, pooled = np_encoder(self.params, self.images, self.masked,
                                    self.config)
        recon = np_decoder(self.params, tokens, self.masked, self.config)
        np.testing.assert_allclose(out.pooled.numpy(), pooled,
                                   rtol=1e-9, atol=1e-10)
        np.testing.assert_allclose(out.reconstruction.numpy(), recon,
                                   rtol=1e-9, atol=1e-10)

    def test_unmasked_encoder_matches_mirror(self):
        with torch.no_grad():
            tokens_t, pooled_t = self.model.encoder(torch.tensor(self.images))
        tokens, pooled = np_encoder(self.params, self.images, None,
                                    self.config)
        np.testing.assert_allclose(tokens_t.numpy(), tokens,
                                   rtol=1e-9, atol=1e-10)
        np.testing.assert_allclose(pooled_t.numpy(), pooled,
                                   rtol=1e-9, atol=1e-10)


class TestVisibilityInvariant:
    def test_masked_pixels_cannot_reach_encoder(self):
        torch.manual_seed(7)
        config = MAEConfig()
        model = MaskedAutoencoder(config).eval()
        rng = np.random.default_rng(75)
        images = torch.tensor(rng.uniform(size=(2, 32, 32, 1)).astype(np.float32))
        plans = [sample_mask(config.grid, 0.75, seed=s) for s in (10, 11)]
        masked = plans_to_mask(plans)
        with torch.no_grad():
            _, pooled_a = model.encoder(images, masked)
        # Scribble over every masked patch and re-encode.
        corrupted = patchify(images, config.grid).clone()
        corrupted[masked] = torch.tensor(
            rng.normal(size=(int(masked.sum()), config.patch_dim)).astype(np.float32))
        images_b = unpatchify(corrupted, config.grid, config.channels)
        with torch.no_grad():
            _, pooled_b = model.encoder(images_b, masked)
        assert torch.equal(pooled_a, pooled_b)

    def test_unequal_visible_counts_rejected(self):
        config = MAEConfig()
        model = MaskedAutoencoder(config)
        masked = torch.zeros(2, config.grid.n_patches, dtype=torch.bool)
        masked[0, :4] = True
        masked[1, :5] = True
        with pytest.raises(ValueError):
            model.encoder(torch.zeros(2, 32, 32, 1), masked)


class TestMaeLoss:
    def test_masked_only_by_default(self):
        rng = np.random.default_rng(76)
        recon = torch.tensor(rng.normal(size=(2, 16, 64)))
        target = torch.tensor(rng.normal(size=(2, 16, 64)))
        masked = torch.zeros(2, 16, dtype=torch.bool)
        masked[:, :12] = True
        base = mae_loss(recon, target, masked)
        # Perturbing reconstructions of visible patches must not move the loss.
        recon2 = recon.clone()
        recon2[:, 12:] += 100.0
        assert mae_loss(recon2, target, masked).item() == base.item()
        assert mae_loss(recon2, target, masked,
                        loss_on_all_patches=True).item() != base.item()

    def test_matches_loop_reference(self):
        rng = np.random.default_rng(77)
        recon = rng.normal(size=(3, 8, 10))
        target = rng.normal(size=(3, 8, 10))
        masked = rng.uniform(size=(3, 8)) < 0.5
        masked[0, 0] = True
        vals = []
        for b in range(3):
            for p in range(8):
                if masked[b, p]:
                    vals.append(((recon[b, p] - target[b, p]) ** 2).mean())
        expected = float(np.mean(vals))
        got = mae_loss(torch.tensor(recon), torch.tensor(target),
                       torch.tensor(masked)).item()
        assert got == pytest.approx(expected, rel=1e-12)

    def test_no_masked_patches_rejected(self):
        with pytest.raises(ValueError):
            mae_loss(torch.zeros(1, 4, 8), torch.zeros(1, 4, 8),
                     torch.zeros(1, 4, dtype=torch.bool))


class TestPretrain:
    def test_deterministic_and_loss_falls(self):
        rng = np.random.default_rng(78)
        images = rng.uniform(size=(24, 32, 32, 1)).astype(np.float32)
        opt = OptimizerSpec(lr=2e-3, batch_size=8, steps=12, seed=3)
        model_a, hist_a = pretrain(images, MAEConfig(), opt)
        model_b, hist_b = pretrain(images, MAEConfig(), opt)
        assert hist_a == hist_b
        for k, v in model_a.state_dict().items():
            assert torch.equal(v, model_b.state_dict()[k]), k
        assert len(hist_a) == 12
        assert hist_a[0][0] == 1 and hist_a[-1][0] == 12
        assert hist_a[-1][1] < hist_a[0][1]

    def test_seed_changes_trajectory(self):
        rng = np.random.default_rng(79)
        images = rng.uniform(size=(12, 32, 32, 1)).astype(np.float32)
        _, h1 = pretrain(images, MAEConfig(),
                         OptimizerSpec(batch_size=8, steps=3, seed=1))
        _, h2 = pretrain(images, MAEConfig(),
                         OptimizerSpec(batch_size=8, steps=3, seed=2))
        assert h1 != h2

    def test_checkpoint_restores_identical_behaviour(self, tmp_path):
        rng = np.random.default_rng(80)
        images = rng.uniform(size=(10, 32, 32, 1)).astype(np.float32)
        model, _ = pretrain(images, MAEConfig(),
                            OptimizerSpec(batch_size=8, steps=4, seed=5))
        path = tmp_path / "mae.ckpt"
        save_checkpoint(path, kind="mae", config=model.config.to_dict(),
                        tensors=state_dict_tensors(model), step=4)
        ck = load_checkpoint(path)
        fresh = MaskedAutoencoder(MAEConfig.from_dict(ck.config))
        load_state_dict(fresh, ck.tensors)
        fresh.eval()
        model.eval()
        x = torch.tensor(images[:3])
        plans = [sample_mask(model.config.grid, 0.75, seed=9)] * 3
        with torch.no_grad():
            a = mae_forward(model, x, plans)
            b = mae_forward(fresh, x, plans)
        assert torch.equal(a.reconstruction, b.reconstruction)
        assert torch.equal(a.pooled, b.pooled)


class TestFineTune:
    def make_model(self, task=Task.VA, freeze=False):
        torch.manual_seed(1)
        model = MaskedAutoencoder(MAEConfig())
        return attach_head(model, TaskSpec.for_task(task),
                           freeze_encoder=freeze, seed=2)

    def test_head_shapes_per_task(self):
        for task, n_out in ((Task.AU, 12), (Task.EXPR, 8), (Task.VA, 2)):
            ft = self.make_model(task)
            logits = ft(torch.zeros(3, 32, 32, 1))
            assert logits.shape == (3, n_out)

    def test_decoder_not_carried_along(self):
        ft = self.make_model()
        names = [n for n, _ in ft.named_parameters()]
        assert all(not n.startswith("decoder") for n in names)
        assert any(n.startswith("encoder") for n in names)
        assert any(n.startswith("head") for n in names)

    def test_freeze_encoder_leaves_head_trainable(self):
        ft = self.make_model(freeze=True)
        frozen = {n for n, p in ft.named_parameters() if not p.requires_grad}
        live = {n for n, p in ft.named_parameters() if p.requires_grad}
        assert all(n.startswith("encoder") for n in frozen)
        assert live == {"head.weight", "head.bias"}

    def test_head_init_deterministic(self):
        a = self.make_model()
        b = self.make_model()
        assert torch.equal(a.head.weight, b.head.weight)

    def test_predict_applies_activation(self):
        ft = self.make_model(Task.VA)
        with torch.no_grad():
            out = ft.predict(torch.randn(4, 32, 32, 1))
        assert ((out >= -1) & (out <= 1)).all()

    def test_finetune_expr_indices_and_history(self):
        torch.manual_seed(3)
        ft = self.make_model(Task.EXPR, freeze=True)
        rng = np.random.default_rng(81)
        images = rng.uniform(size=(16, 32, 32, 1)).astype(np.float32)
        targets = rng.integers(0, 8, size=16)
        opt = OptimizerSpec(lr=1e-2, batch_size=8, epochs=3, seed=4)
        history = finetune(ft, images, targets, opt,
                           val=(images[:8], targets[:8]))
        assert len(history) == 3
        assert {"epoch", "train_loss", "val_metric"} <= set(history[0])
        assert history[-1]["train_loss"] < history[0]["train_loss"]

    def test_finetune_deterministic(self):
        rng = np.random.default_rng(82)
        images = rng.uniform(size=(12, 32, 32, 1)).astype(np.float32)
        targets = rng.uniform(-1, 1, size=(12, 2)).astype(np.float32)
        opt = OptimizerSpec(lr=1e-3, batch_size=6, epochs=2, seed=7)
        h1 = finetune(self.make_model(Task.VA), images, targets, opt)
        h2 = finetune(self.make_model(Task.VA), images, targets, opt)
        assert h1 == h2
