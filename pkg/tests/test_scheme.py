import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from neurobf.container import decode_container, encode_container
from neurobf.errors import ConfigError, DomainError
from neurobf.nn import Rng, layer_norm, selu
from neurobf.scheme import (
    EncoderKey,
    IdentityScheme,
    KeyedObfuscationScheme,
    Obfuscator,
    SchemeConfig,
    Transformation,
    decode_labels,
    decode_predictions,
    encode_images,
    encode_labels,
    key_from_seed,
    patchify,
    sample_key,
    unpatchify,
)

SMALL = SchemeConfig(height=16, width=16, patch=8, blocks=2, dim=8, heads=2)


def _images(n, cfg=SMALL, seed=0):
    return np.random.default_rng(seed).random((n, cfg.height, cfg.width)).astype(np.float32)


def test_patch_grid_arithmetic():
    tokens = patchify(np.zeros((3, 32, 32)), 8)
    assert tokens.shape == (3, 16, 64)


def test_patchify_is_row_major():
    img = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
    tokens = patchify(img, 2)
    assert tokens[0, 0].tolist() == [0, 1, 4, 5]
    assert tokens[0, 1].tolist() == [2, 3, 6, 7]
    assert tokens[0, 2].tolist() == [8, 9, 12, 13]


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.sampled_from([1, 2, 4]), st.integers(0, 1000))
def test_patchify_round_trip_is_bit_exact(gh, gw, p, seed):
    x = torch.from_numpy(np.random.default_rng(seed).random((2, gh * p, gw * p)).astype(np.float32))
    assert torch.equal(unpatchify(patchify(x, p), gh * p, gw * p, p), x)


def test_constant_image_gives_identical_tokens():
    tokens = patchify(np.full((1, 16, 16), 0.3), 4)
    assert torch.equal(tokens[0], tokens[0, :1].expand(16, 16))


def test_patchify_rejects_indivisible_sizes():
    with pytest.raises(ConfigError):
        patchify(np.zeros((1, 10, 10)), 4)
    with pytest.raises(ConfigError):
        SchemeConfig(height=30, patch=8)
    with pytest.raises(ConfigError):
        SchemeConfig(blocks=0)


# --- keys --------------------------------------------------------------------


def test_key_regenerates_from_seed():
    k = sample_key(Rng(3), SMALL)
    again = key_from_seed(k.seed, SMALL)
    assert torch.equal(k.weights, again.weights)
    assert np.array_equal(k.perm, again.perm)
    assert k.weights.shape == (SMALL.blocks, SMALL.tokens, SMALL.dim, SMALL.dim)


def test_key_container_round_trip():
    k = sample_key(Rng(4), SMALL)
    tensors, _ = decode_container(encode_container(k.tensors()))
    back = EncoderKey.from_tensors(tensors)
    assert back.seed == k.seed and torch.equal(back.weights, k.weights) and np.array_equal(back.perm, k.perm)


def test_binary_permutation_is_fair():
    rng = Rng(0)
    swaps = sum(int(Rng(rng.next_seed()).fisher_yates(2)[0] == 1) for _ in range(10_000))
    # binomial(10^4, 1/2): sd 50
    assert abs(swaps - 5000) < 150


def test_key_weights_have_unit_variance():
    w = sample_key(Rng(5), SchemeConfig(dim=64, blocks=7, height=8, width=32, patch=8)).weights
    assert w.numel() >= 10**5
    assert abs(float(w.double().var()) - 1.0) < 0.05
    assert abs(float(w.double().mean())) < 0.01


# --- encoding ----------------------------------------------------------------


def test_encoding_is_deterministic_and_key_dependent():
    obf = Obfuscator(SMALL, Rng(0))
    x = _images(4)
    k1, k2 = sample_key(Rng(1), SMALL), sample_key(Rng(2), SMALL)
    z = encode_images(x, obf, k1)
    assert z.shape == (4, SMALL.tokens, SMALL.dim)
    assert torch.equal(z, encode_images(x, obf, k1))
    assert float((z - encode_images(x, obf, k2)).detach().abs().max()) > 0


def test_every_key_weight_matters():
    obf = Obfuscator(SMALL, Rng(0))
    x = _images(3)
    key = sample_key(Rng(1), SMALL)
    z = encode_images(x, obf, key)
    for idx in [(0, 0, 0, 0), (1, 3, 7, 2), (0, 2, 5, 5)]:
        w = key.weights.clone()
        w[idx] += 0.5
        assert not torch.equal(z, encode_images(x, obf, EncoderKey(key.seed, w, key.perm)))


def test_identity_residual_block_reduces_to_keyed_layer_of_normalised_patches():
    cfg = SchemeConfig(height=8, width=16, patch=8, blocks=1, dim=4, heads=1)
    obf = Obfuscator(cfg, Rng(0))
    layer = obf.blocks[0].layers[0]
    with torch.no_grad():
        layer.out.weight.zero_()
        layer.out.bias.zero_()
    key = sample_key(Rng(1), cfg)
    x = _images(2, cfg)
    # by hand: project, add positions, normalise with default running stats, then the keyed layer
    tokens = torch.from_numpy(x).reshape(2, 8, 2, 8).permute(0, 2, 1, 3).reshape(2, 2, 64)
    h = tokens @ obf.proj.weight.detach() + obf.proj.bias.detach() + obf.blocks[0].pos.detach()
    h = h / np.sqrt(1 + 1e-5)
    expected = torch.empty(2, 2, 4)
    for j in range(2):
        expected[:, j] = layer_norm(selu(h[:, j] @ key.weights[0, j]))
    with torch.no_grad():
        got = encode_images(x, obf, key)
    assert torch.allclose(got, expected, atol=1e-5)


def test_encode_rejects_bad_shapes():
    obf = Obfuscator(SMALL, Rng(0))
    key = sample_key(Rng(1), SMALL)
    with pytest.raises(ConfigError):
        encode_images(np.zeros((2, 8, 8)), obf, key)
    other = sample_key(Rng(1), SchemeConfig(height=16, width=16, patch=8, blocks=3, dim=8, heads=2))
    with pytest.raises(ConfigError):
        encode_images(_images(2), obf, other)


def test_public_checkpoint_never_contains_key_material():
    obf = Obfuscator(SMALL, Rng(0))
    key = sample_key(Rng(1), SMALL)
    public = obf.tensors()
    assert all(name.startswith("scheme/") for name in public)
    assert all(name.startswith("key/") for name in key.tensors())
    flat_key = key.weights.numpy().ravel()
    for arr in public.values():
        if arr.size >= 16:
            assert not np.isin(flat_key[:16], arr).all()


def test_obfuscator_container_round_trip():
    obf = Obfuscator(SMALL, Rng(0))
    tensors, meta = decode_container(encode_container(obf.tensors(), obf.metadata()))
    back = Obfuscator.from_tensors(tensors, meta)
    key = sample_key(Rng(1), SMALL)
    x = _images(3)
    assert torch.equal(encode_images(x, obf, key), encode_images(x, back, key))


# --- labels ------------------------------------------------------------------


def test_label_round_trip_for_many_keys():
    rng = Rng(0)
    for k in range(1, 11):
        y = np.arange(1, k + 1)
        for _ in range(100):
            key = EncoderKey(0, torch.zeros(0), rng.fisher_yates(k))
            enc = encode_labels(y, key)
            assert sorted(enc) == list(y)
            assert np.array_equal(decode_labels(enc, key), y)


def test_binary_swap_examples():
    swap = EncoderKey(0, torch.zeros(0), np.array([1, 0]))
    assert encode_labels([1], swap).tolist() == [2]
    assert decode_predictions(np.array([[0.8, 0.2]]), swap)[0, 0] == pytest.approx(0.2)


def test_decoded_predictions_follow_raw_classes():
    rng = Rng(2)
    key = EncoderKey(0, torch.zeros(0), rng.fisher_yates(5))
    raw = np.array([3, 1, 5])
    one_hot = np.eye(5)[encode_labels(raw, key) - 1]  # a perfect classifier on encoded labels
    assert np.array_equal(decode_predictions(one_hot, key).argmax(1) + 1, raw)


def test_label_range_errors():
    key = EncoderKey(0, torch.zeros(0), np.array([1, 0]))
    with pytest.raises(DomainError):
        encode_labels([0], key)
    with pytest.raises(DomainError):
        decode_labels([3], key)
    with pytest.raises(DomainError):
        decode_predictions(np.zeros((1, 3)), key)


def test_scheme_surface():
    obf = Obfuscator(SMALL, Rng(0))
    keyed = KeyedObfuscationScheme(obf)
    key = keyed.sample_key(Rng(1))
    x = _images(2)
    assert torch.equal(keyed.encode_images(x, key, None), Transformation(obf, key).encode_images(x))
    plain = KeyedObfuscationScheme(obf, label_encoding=False)
    assert plain.encode_labels([1, 2], key).tolist() == [1, 2]
    ident = IdentityScheme(SMALL)
    assert ident.sample_key(Rng(0)) is None
    assert torch.equal(ident.encode_images(x, None, None), patchify(x, 8))
    assert keyed.describe()["name"] == "obfuscator"
