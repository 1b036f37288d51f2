import numpy as np
import pytest

from retclip import tensor as T
from retclip.encoders import (
    ImageEncoderConfig,
    TextEncoderConfig,
    encode_image,
    encode_images,
    encode_text,
    encode_texts,
    pad_tokens,
    patchify,
)
from retclip.errors import ConfigError, DimensionError, VocabularyError
from retclip.model import RetClipConfig, init_params


@pytest.fixture(scope="module")
def desk():
    return init_params(RetClipConfig(), 11)


def test_patchify_counts():
    assert patchify(np.zeros((32, 32, 3)), 8).shape == (16, 192)


def test_patchify_constant_image():
    patches = patchify(np.full((32, 32, 3), 0.3), 8)
    assert np.all(patches == patches[0])


def test_patchify_single_pixel_lands_in_patch_zero():
    img = np.zeros((32, 32, 3))
    img[0, 0, 1] = 1.0
    patches = patchify(img, 8)
    assert patches[0].any() and not patches[1:].any()
    assert patches[0, 1] == 1.0  # channel-last flattening


def test_patchify_row_major_order():
    img = np.zeros((16, 16, 3))
    img[0, 8] = 1.0  # top-right patch of a 2x2 grid
    img[8, 0] = 2.0  # bottom-left
    patches = patchify(img, 8)
    assert patches[1].max() == 1.0 and patches[2].max() == 2.0


def test_patchify_wrong_size():
    with pytest.raises(DimensionError):
        patchify(np.zeros((30, 32, 3)), 8, image_size=32)


def test_image_config_requires_divisible_patch():
    with pytest.raises(ConfigError):
        ImageEncoderConfig(image_size=30, patch_size=8)


def test_text_config_reserved_ids():
    with pytest.raises(ConfigError):
        TextEncoderConfig(cls_id=1, pad_id=1)


def test_encode_image_shape_and_determinism(desk, rng):
    img = rng.random((32, 32, 3))
    a = encode_image(desk.params, desk.config.image, img).v
    b = encode_image(desk.params, desk.config.image, img).v
    assert a.shape == (64,)
    assert np.array_equal(a.data, b.data)


def test_distinct_images_give_distinct_features(desk, rng):
    a = encode_image(desk.params, desk.config.image, rng.random((32, 32, 3))).v
    b = encode_image(desk.params, desk.config.image, rng.random((32, 32, 3))).v
    assert not np.array_equal(a.data, b.data)


def test_left_and_right_share_the_encoder(desk, rng):
    img = rng.random((32, 32, 3))
    other = rng.random((32, 32, 3))
    both = encode_images(desk.params, desk.config.image, np.stack([img, other, other, img])).data
    assert np.array_equal(both[0], both[3])


def test_encode_image_finite_over_seeds(desk):
    for seed in range(100):
        img = np.random.default_rng(seed).random((32, 32, 3))
        v = encode_images(desk.params, desk.config.image, img[None]).data
        assert np.isfinite(v).all()


def test_empty_report_is_well_defined(desk):
    cfg = desk.config.text
    enc = encode_text(desk.params, cfg, [cfg.cls_id] + [cfg.pad_id] * (cfg.max_len - 1))
    assert enc.t_seq.shape == (16, 64)
    assert np.isfinite(enc.t0.data).all()
    assert np.array_equal(enc.t0.data, enc.t_seq.data[0])


def test_token_order_matters(desk):
    cfg = desk.config.text
    a = encode_text(desk.params, cfg, [0, 5, 9, 1]).t0.data
    b = encode_text(desk.params, cfg, [0, 9, 5, 1]).t0.data
    assert not np.array_equal(a, b)


def test_out_of_vocabulary_id(desk):
    with pytest.raises(VocabularyError):
        encode_text(desk.params, desk.config.text, [0, 999])


def test_overlength_is_truncated_then_padded():
    cfg = TextEncoderConfig(max_len=4)
    assert pad_tokens([0, 5, 6, 7, 8, 9], cfg).tolist() == [0, 5, 6, 1]
    assert pad_tokens([0, 5], cfg).tolist() == [0, 5, 1, 1]


def test_batched_text_matches_single(desk):
    cfg = desk.config.text
    _, t0 = encode_texts(desk.params, cfg, [[0, 4, 5], [0, 7]])
    single = encode_text(desk.params, cfg, [0, 7]).t0.data
    assert np.allclose(t0.data[1], single, atol=1e-12)


def test_gradient_reaches_patch_and_position_embeddings():
    cfg = RetClipConfig(image=ImageEncoderConfig(image_size=8, patch_size=4, d_model=8, n_blocks=1, n_heads=2),
                        text=TextEncoderConfig(vocab_size=16, max_len=4, d_model=8, n_blocks=1, n_heads=2))
    model = init_params(cfg, 0)
    img = np.random.default_rng(0).random((1, 8, 8, 3))
    w = T.Tensor(np.random.default_rng(1).normal(size=(1, 8)))
    params = [model.params["img_enc.patch_embed.weight"], model.params["img_enc.pos_embed"]]

    def f():
        return T.sum_all(T.mul(encode_images(model.params, cfg.image, img), w))

    assert T.finite_difference_check(f, params, eps=1e-6) <= 1e-4
    assert all(np.any(p.grad) for p in params)
