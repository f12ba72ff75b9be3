import numpy as np
import pytest

from spikekit import tensor as T
from spikekit.architecture import ModelConfig, Spikformer
from spikekit.errors import ConfigError, LoadError, UnsupportedConfigurationError
from spikekit.pretrain import (Decoder, MaskedAutoencoder, MaskPyramid, decoder_param_count,
                               encode_visible, finetune_handoff, fit_pretrain, normalized_targets,
                               patchify, reconstruction_loss, sample_mask, unpatchify)
from spikekit.profiler import counting
from spikekit.tensor import Tensor

SCS64 = dict(stem="scs", img_size=64, patch_size=16, dim=16, heads=2, depth=1, time_steps=1)


def test_mask_counts():
    m = sample_mask(196, 0.75, seed=0)
    assert (m.num_masked, m.num_visible) == (147, 49)
    assert m.base.shape == (14, 14)


def test_mask_errors():
    with pytest.raises(ConfigError):
        sample_mask(196, 0.0, 0)
    with pytest.raises(ConfigError):
        sample_mask(196, 1.0, 0)
    with pytest.raises(ConfigError):
        sample_mask(4, 0.1, 0)  # rounds to zero masked
    with pytest.raises(ConfigError):
        sample_mask(4, 0.9, 0)  # rounds to zero visible
    with pytest.raises(ConfigError):
        sample_mask(10, 0.5, 0)


def test_mask_deterministic():
    a, b = sample_mask(64, 0.75, 7), sample_mask(64, 0.75, 7)
    assert np.array_equal(a.base, b.base)
    assert not np.array_equal(a.base, sample_mask(64, 0.75, 8).base)


def test_mask_uniform_frequency():
    rng = np.random.default_rng(0)
    hits = np.zeros(16)
    draws = 10_000
    for _ in range(draws):
        hits += ~sample_mask(16, 0.75, rng).base.reshape(-1)
    np.testing.assert_allclose(hits / draws, 0.75, atol=0.02)


def test_pyramid_levels_are_upsamplings():
    m = sample_mask(196, 0.75, 3)
    levels = m.levels(16)
    assert sorted(levels) == [1, 2, 4, 8]
    for f, lvl in levels.items():
        np.testing.assert_array_equal(lvl, np.kron(m.base, np.ones((f, f), bool)))
        assert lvl.shape == (14 * f, 14 * f)


def test_visible_indices_row_major():
    base = np.zeros((3, 3), bool)
    base[2, 0] = base[0, 2] = True
    np.testing.assert_array_equal(MaskPyramid(base).visible_indices(), [[2, 6]])


def test_encode_visible_rejects_sps():
    enc = Spikformer(ModelConfig(**{**SCS64, "stem": "sps"}))
    with pytest.raises(UnsupportedConfigurationError):
        encode_visible(np.zeros((1, 3, 64, 64)), sample_mask(16, 0.75, 0), enc)
    with pytest.raises(UnsupportedConfigurationError):
        MaskedAutoencoder(ModelConfig(**{**SCS64, "stem": "sps"}))


def test_encode_visible_token_count_and_all_visible(rng):
    enc = Spikformer(ModelConfig(**SCS64))
    x = rng.standard_normal((2, 3, 64, 64))
    out = encode_visible(x, sample_mask(16, 0.75, 0, batch=2), enc)
    assert out.shape == (1, 2, 4, 16)
    full = encode_visible(x, MaskPyramid(np.ones((4, 4), bool)), enc).data
    np.testing.assert_array_equal(full, enc.features(x, 1).data)


@pytest.mark.parametrize("batched", [False, True])
def test_no_leakage(rng, batched):
    enc = Spikformer(ModelConfig(**SCS64), seed=3)
    x = rng.standard_normal((3, 3, 64, 64))
    mask = sample_mask(16, 0.75, 5, batch=3 if batched else None)
    hidden = ~np.broadcast_to(mask.at_size(64)[..., None, :, :] if batched else mask.at_size(64),
                              x.shape)
    ref = encode_visible(x, mask, enc).data
    assert ref.any()
    for _ in range(3):
        x2 = x.copy()
        x2[hidden] = rng.standard_normal(hidden.sum()) * 10
        np.testing.assert_array_equal(encode_visible(x2, mask, enc).data, ref)


def test_encoder_sees_only_visible_tokens(rng):
    enc = Spikformer(ModelConfig(**{**SCS64, "img_size": 128}))
    x = rng.standard_normal((1, 3, 128, 128))
    mask = sample_mask(64, 0.75, 0)
    with T.no_grad(), counting() as led_mask:
        encode_visible(x, mask, enc)
    with T.no_grad(), counting() as led_full:
        enc.features(x, 1)
    masked_ops = sum(r.flops + r.sops for r in led_mask.find("blocks"))
    full_ops = sum(r.flops + r.sops for r in led_full.find("blocks"))
    assert masked_ops < full_ops
    lin = [r for r in led_mask.find("blocks.0.attn.q_linear")][0]
    assert lin.elements == 16 * 16  # N_v tokens x D


def test_decoder_shapes_and_params():
    assert abs(decoder_param_count(512, 16) / 3.41e6 - 1) <= 0.05
    dec = Decoder(512, (14, 14), 16)
    assert dec.num_parameters() == decoder_param_count(512, 16)
    small = Decoder(16, (4, 4), 4, rng=np.random.default_rng(0))
    mask = sample_mask(16, 0.75, 0)
    out = small(Tensor(np.zeros((1, 1, 4, 16))), mask)
    assert out.shape == (1, 16, 4 * 4 * 3) and np.all(np.isfinite(out.data))


def test_decoder_zero_latent_zero_token_is_bias_propagation():
    dec = Decoder(8, (2, 2), 2, dim=16, depth=1, heads=2, rng=np.random.default_rng(0))
    dec.mask_token.data[:] = 0
    dec.embed.bias.data[:] = 0
    mask = sample_mask(4, 0.5, 0)
    out = dec(Tensor(np.zeros((1, 2, 8))), mask).data
    # every position differs only through its position embedding
    assert np.all(np.isfinite(out))
    assert not np.allclose(out[0, 0], out[0, 1])


def test_patchify_roundtrip(rng):
    x = rng.standard_normal((2, 3, 8, 8))
    p = patchify(x, 4)
    assert p.shape == (2, 4, 48)
    np.testing.assert_array_equal(p[0, 1].reshape(4, 4, 3), x[0, :, :4, 4:].transpose(1, 2, 0))
    np.testing.assert_array_equal(unpatchify(p, 4, 3, (2, 2)), x)


def test_loss_zero_at_target_and_masked_only(rng):
    x = rng.standard_normal((2, 3, 8, 8))
    mask = sample_mask(4, 0.5, 1, batch=2)
    target = normalized_targets(x, 4)
    assert reconstruction_loss(target, x, mask, 4).item() == pytest.approx(0, abs=1e-10)
    pred = target + rng.standard_normal(target.shape)
    base = reconstruction_loss(pred, x, mask, 4).item()
    vis = ~mask.masked_flat().astype(bool)
    pred2 = pred.copy()
    pred2[vis] += 100
    assert reconstruction_loss(pred2, x, mask, 4).item() == pytest.approx(base)
    assert base > 0


def test_loss_hand_instance():
    # one-channel 4x4 image, 2x2 patches; only patch 0 masked
    img = np.zeros((1, 1, 4, 4))
    img[0, 0, :2, :2] = [[1, 2], [3, 4]]
    base = np.array([[False, True], [True, True]])
    mask = MaskPyramid(base)
    vals = np.array([1, 2, 3, 4.0])
    norm = (vals - 2.5) / np.sqrt(1.25 + 1e-6)
    pred = np.zeros((1, 4, 4))
    pred[0, 0] = [0.5, 0, 0, 0]
    expected = np.mean((pred[0, 0] - norm) ** 2)
    assert reconstruction_loss(pred, img, mask, 2).item() == pytest.approx(expected, rel=1e-6)


def test_constant_patch_guarded():
    img = np.ones((1, 3, 4, 4))
    t = normalized_targets(img, 2)
    assert np.all(np.isfinite(t)) and np.all(t == 0)


def test_finetune_handoff_roundtrip_and_inventory():
    cfg = ModelConfig(**SCS64)
    mae = MaskedAutoencoder(cfg, seed=1)
    state = {k: v.copy() for k, v in mae.state_dict().items()}
    cls = finetune_handoff(state, ModelConfig(**{**SCS64, "num_classes": 5}), cfg, seed=9)
    own = cls.state_dict()
    for k, v in own.items():
        if not k.startswith("head."):
            assert np.array_equal(v, state["encoder." + k]), k
    assert own["head.fc.weight"].shape == (16, 5)
    names = [n for n, _ in cls.named_modules()]
    assert not any("decoder" in n for n in names)
    from spikekit.nn import LayerNorm
    assert not any(isinstance(m, LayerNorm) for m in cls.modules())
    with T.no_grad():
        for t in (1, 2, 4):
            assert cls(np.zeros((1, 3, 64, 64)), t).shape == (1, 5)


def test_finetune_handoff_mismatch():
    cfg = ModelConfig(**SCS64)
    state = MaskedAutoencoder(cfg).state_dict()
    with pytest.raises(LoadError):
        finetune_handoff(state, ModelConfig(**{**SCS64, "dim": 32, "heads": 2}), cfg)
    with pytest.raises(LoadError):
        finetune_handoff(state, ModelConfig(**{**SCS64, "dim": 32, "heads": 2}))


def test_pretraining_reduces_loss():
    cfg = ModelConfig(stem="scs", img_size=16, patch_size=4, dim=16, heads=2, depth=1, time_steps=1)
    mae = MaskedAutoencoder(cfg, seed=0, decoder_dim=32, decoder_depth=1, decoder_heads=2)
    imgs = np.random.default_rng(0).standard_normal((8, 3, 16, 16)).astype(np.float32)
    hist = fit_pretrain(mae, imgs, 8, batch_size=8, lr=3e-3, seed=0)
    assert hist[-1]["train_loss"] < hist[0]["train_loss"]
