import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from multinet_vit import tensor as T
from multinet_vit.errors import ConfigError
from multinet_vit.nn.layers import Linear
from multinet_vit.tensor import Tensor, no_grad
from multinet_vit.vit import (
    MultiHeadAttention,
    PatchEmbedConfig,
    TokenSet,
    build_vit,
    deit_forward,
    embed,
    patchify,
    vit_forward,
)


def test_patchify_224_gives_196_patches():
    cfg = PatchEmbedConfig(224, 224, 16, 3, 8)
    out = patchify(Tensor(np.zeros((1, 3, 224, 224))), cfg)
    assert out.shape == (1, 196, 16 * 16 * 3)


def test_patch_equal_to_image_is_one_flat_row(rng):
    x = rng.normal(size=(1, 3, 16, 16)).astype(np.float32)
    out = patchify(Tensor(x), PatchEmbedConfig(16, 16, 16, 3, 8))
    assert out.shape == (1, 1, 768)
    assert_array_equal(out.data[0, 0], x[0].transpose(1, 2, 0).reshape(-1))


def test_patch_order_is_raster(rng):
    x = rng.normal(size=(1, 1, 4, 6)).astype(np.float32)
    out = patchify(Tensor(x), PatchEmbedConfig(4, 6, 2, 1, 4)).data[0]
    assert_array_equal(out[1], x[0, 0, 0:2, 2:4].reshape(-1))
    assert_array_equal(out[3], x[0, 0, 2:4, 0:2].reshape(-1))


def test_indivisible_image_raises_with_sizes():
    with pytest.raises(ConfigError, match="W=220"):
        PatchEmbedConfig(224, 220, 16)


def test_embed_zero_everything_is_zero(rng):
    tokens = TokenSet(4, 8, rng)
    tokens.class_token.data[...] = 0
    tokens.positional.data[...] = 0
    proj = Linear(12, 8, rng)
    out = embed(Tensor(np.zeros((2, 4, 12))), tokens, proj)
    assert_array_equal(out.data, 0)


@pytest.mark.parametrize("distilled,extra", [(False, 1), (True, 2)])
def test_embed_length_is_n_plus_t(rng, distilled, extra):
    for n in rng.integers(1, 30, size=5):
        tokens = TokenSet(int(n), 8, rng, distilled=distilled)
        out = embed(Tensor(np.zeros((1, int(n), 12))), tokens, Linear(12, 8, rng))
        assert out.shape == (1, n + extra, 8)
        assert tokens.num_special == extra


def test_attention_single_token_is_value_projection(f64, rng):
    mha = MultiHeadAttention(8, 2, rng)
    x = Tensor(rng.normal(size=(3, 1, 8)))
    out = mha(x).data
    assert_allclose(mha.last_attention, 1.0)
    v = (x.data @ mha.qkv.weight.data.T + mha.qkv.bias.data)[..., 16:]
    assert_allclose(out, v @ mha.proj.weight.data.T + mha.proj.bias.data, atol=1e-12)


def test_identical_tokens_attend_uniformly(f64, rng):
    mha = MultiHeadAttention(8, 4, rng)
    mha(Tensor(np.tile(rng.normal(size=(1, 1, 8)), (2, 5, 1))))
    assert_allclose(mha.last_attention, 1 / 5, atol=1e-12)


def test_attention_rows_are_stochastic(rng):
    mha = MultiHeadAttention(16, 4, rng)
    mha(Tensor(rng.normal(size=(2, 7, 16)) * 30))
    a = mha.last_attention
    assert np.all(a >= 0)
    assert_allclose(a.sum(axis=-1), 1.0, atol=1e-6)


def test_heads_must_divide_dim(rng):
    with pytest.raises(ConfigError):
        MultiHeadAttention(10, 4, rng)


def test_vit_output_shapes(rng):
    model = build_vit(rng, image_size=16, preset="micro", patch_size=4)
    out = vit_forward(Tensor(rng.normal(size=(3, 3, 16, 16))), model)
    assert out["logits"].shape == (3, 8)
    assert out["features"].shape == (3, 8)


def test_permuting_patches_without_positions_keeps_class_output(f64, rng):
    model = build_vit(rng, image_size=8, preset="micro", patch_size=4, dropout=0.0).eval()
    model.tokens.positional.data[...] = 0
    x = rng.normal(size=(1, 3, 8, 8))
    # swap the top-left and bottom-right 4x4 patches
    y = x.copy()
    y[..., :4, :4], y[..., 4:, 4:] = x[..., 4:, 4:], x[..., :4, :4]
    with no_grad():
        a = model(Tensor(x))["logits"].data
        b = model(Tensor(y))["logits"].data
    assert_allclose(a, b, atol=1e-5)


def test_identical_images_give_identical_rows(rng):
    model = build_vit(rng, image_size=8, preset="micro").eval()
    x = np.repeat(rng.normal(size=(1, 3, 8, 8)), 4, axis=0)
    logits = model(Tensor(x))["logits"].data
    for row in logits[1:]:
        assert_array_equal(row, logits[0])


def test_deit_sequence_and_outputs(rng):
    model = build_vit(rng, image_size=8, preset="micro", distilled=True).eval()
    out = deit_forward(Tensor(rng.normal(size=(2, 3, 8, 8))), model)
    assert model.tokens.positional.shape[1] == 4 + 2
    assert set(out) >= {"class_logits", "distill_logits", "combined", "logits", "features"}
    assert_allclose(out["combined"].sum(axis=1), 1.0, atol=1e-6)


def test_deit_symmetric_heads_agree(rng):
    model = build_vit(rng, image_size=8, preset="micro", distilled=True).eval()
    model.distill_head.weight.data[...] = model.head.weight.data
    model.distill_head.bias.data[...] = model.head.bias.data
    model.tokens.distillation_token.data[...] = model.tokens.class_token.data
    model.tokens.positional.data[:, 1] = model.tokens.positional.data[:, 0]
    out = model(Tensor(rng.normal(size=(2, 3, 8, 8))))
    assert_allclose(out["class_logits"].data, out["distill_logits"].data, atol=1e-5)


def test_deit_forward_rejects_plain_vit(rng):
    with pytest.raises(ConfigError):
        deit_forward(Tensor(np.zeros((1, 3, 8, 8))), build_vit(rng, image_size=8, preset="micro"))


def test_wrong_input_size_raises(rng):
    model = build_vit(rng, image_size=8, preset="micro")
    with pytest.raises(T.ShapeError):
        model(Tensor(np.zeros((1, 3, 12, 12))))
