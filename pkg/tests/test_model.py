"""Encoder/decoder contracts: shapes, algebraic trivials, checkpoint
round-trips, and the frozen-probe guarantees."""

import numpy as np
import pytest

from dasmae import tensor as T
from dasmae.errors import ContractError, ShapeError
from dasmae.model import (Checkpoint, EncoderOutput, ModelConfig,
                          classify_finetune, classify_probe, decode, encode,
                          encode_patch_batch, forward_mae, head_logits,
                          init_params, load_checkpoint, make_classifier_head,
                          masked_mse, param_count, save_checkpoint)
from dasmae.patches import patchify, sample_mask
from dasmae.tensor import Tensor


MICRO = ModelConfig.tiny(patch_samples=16, max_patches=24)


@pytest.fixture(scope="module")
def micro_setup():
    params = init_params(MICRO, seed=1)
    rng = np.random.default_rng(7)
    x = rng.normal(size=(6, 64)).astype(np.float32)  # grid 6 rows x 4 cols
    _, grid = patchify(x, MICRO.patch_channels, MICRO.patch_samples)
    plan = sample_mask(grid, 0.5, "random", 3)
    return params, x, grid, plan


class TestModelConfig:
    def test_head_divisibility_enforced(self):
        with pytest.raises(ContractError):
            ModelConfig(embed_dim=65, enc_heads=4)

    def test_mask_ratio_bounds(self):
        with pytest.raises(ContractError):
            ModelConfig(mask_ratio=1.0)

    def test_presets(self):
        paper = ModelConfig.paper_scale()
        assert (paper.embed_dim, paper.enc_depth, paper.enc_heads) == (576, 6, 6)
        assert (paper.dec_dim, paper.dec_depth, paper.dec_heads) == (256, 2, 8)
        assert paper.patch_width == 624
        tiny = ModelConfig.tiny()
        assert (tiny.embed_dim, tiny.enc_depth) == (64, 2)

    def test_single_block_decoder_is_valid(self):
        cfg = ModelConfig.tiny(dec_depth=1)
        params = init_params(cfg, 0)
        assert "dec.b0.attn.wq" in params and "dec.b1.attn.wq" not in params


class TestPatchEmbed:
    def test_zero_weights_give_bias(self, micro_setup):
        params, x, grid, _ = micro_setup
        frozen = {k: Tensor(v.data.copy(), requires_grad=True)
                  for k, v in params.items()}
        frozen["enc.embed.w"].data[...] = 0.0
        bias = np.arange(MICRO.embed_dim, dtype=np.float32) / 100
        frozen["enc.embed.b"].data[...] = bias
        patches, _ = patchify(x, 1, 16)
        emb = T.matmul(Tensor(patches), frozen["enc.embed.w"])
        emb = T.add(emb, frozen["enc.embed.b"])
        np.testing.assert_allclose(emb.data, np.broadcast_to(bias, (24, 64)),
                                   atol=1e-7)

    def test_matches_flatten_affine_oracle(self, micro_setup, rng):
        params, x, _, _ = micro_setup
        patches, _ = patchify(x, 1, 16)
        w = params["enc.embed.w"].data.astype(np.float64)
        b = params["enc.embed.b"].data.astype(np.float64)
        expected = patches.astype(np.float64) @ w + b
        got = T.add(T.matmul(Tensor(patches), params["enc.embed.w"]),
                    params["enc.embed.b"]).data
        np.testing.assert_allclose(got, expected, atol=1e-6)

    def test_full_scale_token_shape(self):
        cfg = ModelConfig.paper_scale()
        params = {"enc.embed.w": Tensor(np.zeros((624, 576), np.float32)),
                  "enc.embed.b": Tensor(np.zeros(576, np.float32))}
        patches = np.zeros((192, 624), dtype=np.float32)
        out = T.add(T.matmul(Tensor(patches), params["enc.embed.w"]),
                    params["enc.embed.b"])
        assert out.shape == (192, 576)
        assert cfg.embed_dim == 576


class TestEncode:
    def test_masked_output_shapes(self, micro_setup):
        params, x, _, plan = micro_setup
        out = encode(x, plan, MICRO, params)
        assert isinstance(out, EncoderOutput)
        assert out.cls.shape == (1, 64)
        assert out.tokens.shape == (plan.n_visible, 64)

    def test_unmasked_output_shapes(self, micro_setup):
        params, x, _, _ = micro_setup
        out = encode(x, None, MICRO, params)
        assert out.tokens.shape == (24, 64)

    def test_geometry_mismatch_rejected(self, micro_setup):
        params, _, _, _ = micro_setup
        with pytest.raises(ContractError):
            encode(np.zeros((6, 32), dtype=np.float32), None, MICRO, params)

    def test_permutation_equivariance(self, micro_setup, rng):
        # permuting visible patches together with their position indices
        # permutes token rows identically and leaves CLS unchanged
        params, x, _, plan = micro_setup
        patches, _ = patchify(x, 1, 16)
        visible = patches[plan.visible]
        positions = plan.visible
        perm = rng.permutation(len(positions))
        with T.no_grad():
            base = encode_patch_batch(visible[None], positions[None], MICRO, params)
            shuffled = encode_patch_batch(visible[perm][None],
                                          positions[perm][None], MICRO, params)
        np.testing.assert_allclose(shuffled.data[0, 0], base.data[0, 0], atol=1e-5)
        np.testing.assert_allclose(shuffled.data[0, 1:], base.data[0, 1:][perm],
                                   atol=1e-5)


class TestDecode:
    def test_output_shape(self, micro_setup):
        params, x, _, plan = micro_setup
        enc = encode(x, plan, MICRO, params)
        out = decode(enc.tokens, plan, MICRO, params)
        assert out.shape == (24, 16)

    def test_zero_projection_gives_bias(self, micro_setup):
        params, x, _, plan = micro_setup
        frozen = {k: Tensor(v.data.copy(), requires_grad=True)
                  for k, v in params.items()}
        frozen["dec.out.w"].data[...] = 0.0
        frozen["dec.out.b"].data[...] = 2.5
        enc = encode(x, plan, MICRO, frozen)
        out = decode(enc.tokens, plan, MICRO, frozen)
        np.testing.assert_allclose(out.data, 2.5, atol=1e-6)

    def test_token_count_mismatch_rejected(self, micro_setup):
        params, x, _, plan = micro_setup
        with pytest.raises(ContractError):
            decode(np.zeros((plan.n_visible + 1, 64), dtype=np.float32),
                   plan, MICRO, params)

    def test_mask_token_shared_across_positions(self, micro_setup):
        # all masked positions receive the identical vector before
        # position embeddings: with decoder blocks and position table
        # zeroed, masked outputs must coincide exactly
        params, x, _, plan = micro_setup
        frozen = {k: Tensor(v.data.copy(), requires_grad=True)
                  for k, v in params.items()}
        frozen["dec.pos"].data[...] = 0.0
        for name in list(frozen):
            if name.startswith("dec.b"):
                leaf = name.rsplit(".", 1)[-1]
                if leaf.startswith("w"):
                    frozen[name].data[...] = 0.0
                if leaf.startswith("b") and leaf != "beta":
                    frozen[name].data[...] = 0.0
        enc = encode(x, plan, MICRO, frozen)
        out = decode(enc.tokens, plan, MICRO, frozen).data
        masked_rows = out[plan.masked]
        for row in masked_rows[1:]:
            np.testing.assert_array_equal(row, masked_rows[0])


class TestForwardMae:
    def test_loss_zero_when_prediction_equals_target(self, rng):
        pred_np = rng.normal(size=(1, 24, 16)).astype(np.float32)
        masked = np.arange(12)[None]
        loss = masked_mse(Tensor(pred_np), pred_np.copy(), masked, normalize=False)
        assert float(loss.data) == pytest.approx(0.0, abs=1e-12)

    def test_unit_loss_for_ones_vs_zeros(self):
        # normalization off, one masked patch, target all ones,
        # prediction all zeros -> per-element MSE 1.0
        pred = Tensor(np.zeros((1, 4, 8), np.float32))
        targets = np.ones((1, 4, 8), np.float32)
        loss = masked_mse(pred, targets, np.array([[2]]), normalize=False)
        assert float(loss.data) == pytest.approx(1.0)

    def test_loss_ignores_visible_positions(self, micro_setup, rng):
        params, x, _, plan = micro_setup
        patches, _ = patchify(x, 1, 16)
        pred = rng.normal(size=(1, 24, 16)).astype(np.float32)
        base = masked_mse(Tensor(pred), patches[None], plan.masked[None],
                          normalize=False)
        corrupted = pred.copy()
        corrupted[0, plan.visible] += 100.0
        changed = masked_mse(Tensor(corrupted), patches[None], plan.masked[None],
                             normalize=False)
        assert float(base.data) == pytest.approx(float(changed.data))

    def test_normalized_targets_standardized(self, rng):
        targets = rng.normal(loc=5.0, scale=3.0, size=(1, 4, 64)).astype(np.float32)
        pred = Tensor(np.zeros((1, 4, 64), np.float32))
        loss = masked_mse(pred, targets, np.array([[1, 3]]), normalize=True)
        # standardized targets have zero mean and unit variance, so the
        # zero prediction scores ~1.0
        assert float(loss.data) == pytest.approx(1.0, abs=1e-2)

    def test_empty_mask_rejected(self, micro_setup):
        params, x, grid, _ = micro_setup
        from dasmae.patches import MaskPlan
        empty = MaskPlan(grid=grid, masked=np.array([], dtype=np.int64),
                         strategy="random", seed=0, ratio=0.5)
        with pytest.raises(ContractError):
            forward_mae(x, empty, MICRO, params)

    def test_forward_returns_all_patches(self, micro_setup):
        params, x, _, plan = micro_setup
        pred, loss = forward_mae(x, plan, MICRO, params)
        assert pred.shape == (24, 16)
        assert loss.data.shape == ()
        assert np.isfinite(float(loss.data))

    def test_gradient_reaches_every_parameter(self, micro_setup):
        params, x, _, plan = micro_setup
        fresh = init_params(MICRO, seed=9)
        _, loss = forward_mae(x, plan, MICRO, fresh)
        T.backward(loss)
        for name, p in fresh.items():
            assert np.any(p.grad != 0), f"zero gradient for {name}"


class TestClassifiers:
    def test_zero_head_uniform_logits(self, micro_setup):
        params, x, _, _ = micro_setup
        head = make_classifier_head(MICRO)
        logits = classify_probe(x, MICRO, params, head)
        np.testing.assert_array_equal(logits.data, np.zeros(MICRO.num_classes))

    def test_probe_leaves_encoder_untouched(self, micro_setup):
        params, x, _, _ = micro_setup
        head = make_classifier_head(MICRO)
        before = {k: v.data.tobytes() for k, v in params.items()}
        logits = classify_probe(x, MICRO, params, head)
        loss = T.cross_entropy(T.reshape(logits, (1, MICRO.num_classes)),
                               np.array([2]))
        T.backward(loss)
        for name, p in params.items():
            assert np.all(p.grad == 0), f"probe backward touched {name}"
            assert p.data.tobytes() == before[name]
        assert np.any(head["head.w"].grad != 0)

    def test_probe_reads_only_cls(self, micro_setup):
        # classify_probe must equal a head applied to the CLS row alone
        params, x, _, _ = micro_setup
        head = make_classifier_head(MICRO)
        head["head.w"].data[...] = np.random.default_rng(0).normal(
            size=head["head.w"].data.shape).astype(np.float32)
        out = encode(x, None, MICRO, params)
        direct = head_logits(out.cls.data, head).data[0]
        probe = classify_probe(x, MICRO, params, head).data
        np.testing.assert_allclose(probe, direct, atol=1e-6)

    def test_finetune_pools_all_tokens(self, micro_setup):
        params, x, _, _ = micro_setup
        head = make_classifier_head(MICRO)
        head["head.w"].data[...] = np.random.default_rng(1).normal(
            size=head["head.w"].data.shape).astype(np.float32)
        out = encode(x, None, MICRO, params)
        pooled = out.tokens.data.mean(axis=0)
        expected = pooled @ head["head.w"].data + head["head.b"].data
        got = classify_finetune(x, MICRO, params, head).data
        np.testing.assert_allclose(got, expected, atol=1e-5)
        # and it differs from the probe path, which ignores non-CLS tokens
        probe = classify_probe(x, MICRO, params, head).data
        assert not np.allclose(got, probe, atol=1e-3)


class TestParamCount:
    def test_tiny_matches_closed_form(self):
        cfg = ModelConfig.tiny()
        d, h = cfg.embed_dim, cfg.mlp_ratio * cfg.embed_dim
        dd, dh = cfg.dec_dim, cfg.mlp_ratio * cfg.dec_dim
        block = lambda dim, hid: (2 * dim + 4 * (dim * dim + dim)
                                  + 2 * dim + dim * hid + hid + hid * dim + dim)
        expected = (
            624 * d + d                       # patch embedding
            + d                               # CLS
            + (cfg.max_patches + 1) * d       # encoder positions
            + cfg.enc_depth * block(d, h)
            + 2 * d                           # final norm
            + d * dd + dd                     # decoder embed
            + dd                              # mask token
            + cfg.max_patches * dd            # decoder positions
            + cfg.dec_depth * block(dd, dh)
            + dd * 624 + 624                  # output projection
        )
        assert param_count(cfg) == expected

    def test_matches_actual_parameters(self):
        cfg = ModelConfig.tiny(patch_samples=16, max_patches=8)
        params = init_params(cfg, 0)
        assert param_count(cfg) == sum(p.data.size for p in params.values())

    def test_depth_additivity(self):
        base = ModelConfig.tiny()
        doubled = ModelConfig.tiny(enc_depth=2 * base.enc_depth)
        per_block = (param_count(ModelConfig.tiny(enc_depth=base.enc_depth + 1))
                     - param_count(base))
        assert (param_count(doubled) - param_count(base)
                == base.enc_depth * per_block)

    def test_paper_scale_in_stated_band(self):
        count = param_count(ModelConfig.paper_scale())
        assert 25_000_000 <= count <= 31_000_000


class TestCheckpoint:
    def test_roundtrip_byte_identical(self, micro_setup, tmp_path):
        params, _, _, _ = micro_setup
        path1, path2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        rng_state = {"bit_generator": "PCG64",
                     "state": {"state": 12345678901234567890, "inc": 42},
                     "has_uint32": 0, "uinteger": 0}
        save_checkpoint(path1, MICRO, params, epoch=5, rng_state=rng_state)
        ckpt = load_checkpoint(path1)
        assert isinstance(ckpt, Checkpoint)
        assert ckpt.epoch == 5
        assert ckpt.rng_state == rng_state
        save_checkpoint(path2, ckpt.config, ckpt.params, epoch=ckpt.epoch,
                        rng_state=ckpt.rng_state)
        assert path1.read_bytes() == path2.read_bytes()

    def test_forward_bit_identical_after_reload(self, micro_setup, tmp_path):
        params, x, _, plan = micro_setup
        path = tmp_path / "c.ckpt"
        save_checkpoint(path, MICRO, params)
        ckpt = load_checkpoint(path)
        with T.no_grad():
            a = encode(x, plan, MICRO, params)
            b = encode(x, plan, ckpt.config, ckpt.params)
        assert a.cls.data.tobytes() == b.cls.data.tobytes()
        assert a.tokens.data.tobytes() == b.tokens.data.tobytes()

    def test_config_survives(self, micro_setup, tmp_path):
        params, _, _, _ = micro_setup
        save_checkpoint(tmp_path / "d.ckpt", MICRO, params)
        assert load_checkpoint(tmp_path / "d.ckpt").config == MICRO

    def test_truncated_blob_rejected(self, micro_setup, tmp_path):
        from dasmae.errors import FormatError
        params, _, _, _ = micro_setup
        path = tmp_path / "e.ckpt"
        save_checkpoint(path, MICRO, params)
        raw = path.read_bytes()
        path.write_bytes(raw[:-100])
        with pytest.raises(FormatError):
            load_checkpoint(path)


class TestShapeError:
    def test_bad_patch_width(self, micro_setup):
        params, _, _, _ = micro_setup
        with pytest.raises(ShapeError):
            encode_patch_batch(np.zeros((1, 4, 17), np.float32),
                               np.zeros((1, 4), np.int64), MICRO, params)
