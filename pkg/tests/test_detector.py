import numpy as np
import pytest

from mpituning.autodiff import Tensor
from mpituning.detector import CATEGORIES, DetectorConfig, ToyGroundedDetector
from mpituning.errors import ContractError, DimensionError, VocabularyError
from mpituning.mhp import MHPEncoder


def small(**kw):
    base = dict(image_size=32, patch_size=8, d=16, heads=2, num_queries=6, ffn_hidden=16)
    base.update(kw)
    return DetectorConfig(**base)


@pytest.fixture(scope="module")
def det():
    return ToyGroundedDetector(small())


@pytest.fixture
def images(rng):
    return rng.uniform(0, 1, (2, 32, 32, 1))


def zero_embeddings(d):
    return {p.name: Tensor(np.zeros((p.tokens, p.dim))) for p in d.points}


# -- configuration ----------------------------------------------------------

@pytest.mark.parametrize("kw", [{"image_size": 30}, {"heads": 3}, {"num_queries": 17}])
def test_config_rejects_invalid(kw):
    with pytest.raises(ContractError):
        small(**kw)


def test_insertion_point_counts():
    assert DetectorConfig.full_depth().num_insertion_points == 26
    assert DetectorConfig().num_insertion_points == 10
    for fe, dec in ((1, 1), (3, 2), (0, 4)):
        assert ToyGroundedDetector(small(fe_blocks=fe, dec_blocks=dec)).N == 2 + 2 * fe + 2 * dec


def test_full_depth_registry_layout():
    names = [p.name for p in ToyGroundedDetector(DetectorConfig.full_depth(d=16, heads=2)).points]
    assert len(names) == 26
    assert sum(n.startswith("enhancer") for n in names) == 12
    assert sum(n.startswith("decoder") for n in names) == 12
    assert names[:2] == ["text-input", "image-input"]


def test_registry_token_counts(det):
    by_host = {p.name: p.tokens for p in det.points}
    assert by_host["text-input"] == len(CATEGORIES)
    assert by_host["image-input"] == det.cfg.num_tokens
    assert by_host["decoder1.text-cross-attn"] == det.cfg.num_queries


# -- encoders ---------------------------------------------------------------

def test_text_encoding_shape_and_determinism(det):
    a = det.encode_text(list(CATEGORIES))
    assert a.shape == (9, 16)
    assert np.array_equal(a.data, det.encode_text(list(CATEGORIES)).data)


def test_unknown_category(det):
    with pytest.raises(VocabularyError):
        det.encode_text(["disc", "zebra"])


def test_default_image_has_144_tokens():
    d = ToyGroundedDetector(DetectorConfig())
    assert d.encode_image(np.zeros((1, 96, 96, 1))).shape == (1, 144, 64)


def test_zero_image_is_finite(det):
    assert np.isfinite(det.encode_image(np.zeros((1, 32, 32, 1))).data).all()


def test_resolution_mismatch(det):
    with pytest.raises(DimensionError):
        det.encode_image(np.zeros((1, 24, 24, 1)))


def test_image_batch_equals_stacked_singles(det, images):
    both = det.encode_image(images).data
    singles = np.concatenate([det.encode_image(images[i:i + 1]).data for i in range(2)])
    np.testing.assert_allclose(both, singles, rtol=0, atol=1e-12)


# -- query selection --------------------------------------------------------

def test_selection_takes_k_largest(det, images):
    text = det.encode_text(list(CATEGORIES))
    image = det.encode_image(images)
    text_b = Tensor(np.stack([text.data] * 2))
    _, ref, idx, scores = det.select_queries(image, text_b)
    full = det.token_logits(image, text_b).data.max(axis=-1)
    for b in range(2):
        np.testing.assert_array_equal(np.sort(scores[b])[::-1], np.sort(full[b])[::-1][:6])
        assert list(scores[b]) == sorted(scores[b], reverse=True)
    assert np.all((ref >= 0) & (ref <= 1))


def test_selection_all_tokens_and_ties(det):
    image = Tensor(np.zeros((1, 16, 16)))
    text = Tensor(np.zeros((1, 9, 16)))
    _, _, idx, _ = det.select_queries(image, text, K=16)
    assert idx[0].tolist() == list(range(16))
    with pytest.raises(ContractError):
        det.select_queries(image, text, K=17)


# -- full forward -----------------------------------------------------------

def test_output_shapes_and_bounds(det, images):
    out = det.forward(images)
    assert out.boxes.shape == (2, 6, 4)
    assert out.logits.shape == (2, 6, 9)
    assert len(out.aux) == det.cfg.dec_blocks - 1
    assert np.all((out.boxes.data >= 0) & (out.boxes.data <= 1))
    assert np.isfinite(out.logits.data).all()


def test_forward_is_bit_deterministic(images):
    a = ToyGroundedDetector(small(seed=3)).forward(images)
    b = ToyGroundedDetector(small(seed=3)).forward(images)
    assert a.boxes.data.tobytes() == b.boxes.data.tobytes()
    assert a.logits.data.tobytes() == b.logits.data.tobytes()


def test_zero_embeddings_equal_no_insertion(det, images):
    plain = det.forward(images)
    zero = det.forward(images, mhp=zero_embeddings(det))
    assert np.abs(plain.boxes.data - zero.boxes.data).max() == 0.0
    assert np.abs(plain.logits.data - zero.logits.data).max() == 0.0


def test_fresh_encoder_equals_frozen(images):
    d = ToyGroundedDetector(small())
    plain = d.forward(images)
    for zero_mixer in (True, False):
        enc = MHPEncoder(d.store, d.points, M=3, D=8, prefix=f"mhp{int(zero_mixer)}",
                         zero_mixer=zero_mixer)
        out = d.forward(images, mhp=enc)
        assert np.abs(plain.boxes.data - out.boxes.data).max() == 0.0
        assert np.abs(plain.logits.data - out.logits.data).max() == 0.0


def test_nonzero_embedding_changes_output(det, images):
    emb = zero_embeddings(det)
    emb["decoder0.image-cross-attn"] = Tensor(np.ones((6, 16)))
    assert not np.array_equal(det.forward(images).logits.data,
                              det.forward(images, mhp=emb).logits.data)


def test_missing_embeddings_named(det, images):
    emb = zero_embeddings(det)
    del emb["enhancer1.image-self-attn"]
    with pytest.raises(ContractError, match="enhancer1.image-self-attn"):
        det.forward(images, mhp=emb)


def test_category_permutation_permutes_logits(det, images):
    perm = np.random.default_rng(5).permutation(9)
    cats = [CATEGORIES[i] for i in perm]
    base = det.forward(images)
    permuted = det.forward(images, categories=cats)
    np.testing.assert_allclose(permuted.logits.data, base.logits.data[..., perm], atol=1e-10)
    np.testing.assert_allclose(permuted.boxes.data, base.boxes.data, atol=1e-10)


def test_category_subset(det, images):
    out = det.forward(images, categories=["ring", "disc"])
    assert out.logits.shape == (2, 6, 2)
