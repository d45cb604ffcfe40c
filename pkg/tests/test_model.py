import numpy as np
import pytest
import torch

from cirlab.errors import CorruptCheckpoint, DimMismatch, EncoderNotLoaded
from cirlab.model import (EncoderBundle, MappingNetwork, ModelConfig, compose_query,
                          encoders_from_spec, load_checkpoint, map_image_to_tokens,
                          network_from_checkpoint, query_token_sequence, save_checkpoint,
                          tokenize, toy_encoder_bundle)


@pytest.fixture
def enc():
    return toy_encoder_bundle(seed=1, d_img=8, d_token=8, d_out=6)


def test_tokenize():
    assert tokenize("A photo of, a Dog!") == ["a", "photo", "of", ",", "a", "dog", "!"]


def test_toy_encoders_deterministic(enc):
    other = toy_encoder_bundle(seed=1, d_img=8, d_token=8, d_out=6)
    x = np.arange(8.0)
    assert torch.equal(enc.encode_image(x), other.encode_image(x))
    assert enc.snapshot() == other.snapshot()
    assert toy_encoder_bundle(seed=2, d_img=8, d_token=8, d_out=6).snapshot() != enc.snapshot()


def test_single_token_pooling_contract(enc):
    tok = torch.randn(1, 8, dtype=torch.float64)
    expected = torch.nn.functional.normalize(tok[0] @ enc.text_proj.T, dim=0)
    assert torch.allclose(enc.encode_text_tokens(tok), expected)


def test_spliced_tokens_change_output(enc):
    seq = enc.embed_ids(enc.token_ids(["a", "photo", "of", "x"])).clone()
    other = seq.clone()
    other[3] += 0.5
    assert not torch.allclose(enc.encode_text_tokens(seq), enc.encode_text_tokens(other))


def test_gradient_reaches_spliced_tokens(enc):
    tok = torch.randn(3, 8, dtype=torch.float64, requires_grad=True)
    w = torch.randn(6, dtype=torch.float64)
    f = lambda t: enc.encode_text_tokens(t) @ w  # noqa: E731
    f(tok).backward()
    h = 1e-6
    for i, j in [(0, 0), (1, 3), (2, 7)]:
        plus, minus = tok.detach().clone(), tok.detach().clone()
        plus[i, j] += h
        minus[i, j] -= h
        fd = (f(plus) - f(minus)).item() / (2 * h)
        assert tok.grad[i, j].item() == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_unknown_words_hash_to_buckets(enc):
    a, b = enc.token_ids(["zebra"]), enc.token_ids(["zebra"])
    assert a == b and a[0] >= len(enc.vocab)


def test_map_shapes():
    net = MappingNetwork(8, 5, ModelConfig(token_count=1))
    assert map_image_to_tokens(np.ones(8), net).shape == (1, 5)
    with pytest.raises(DimMismatch):
        map_image_to_tokens(np.ones(7), net)


def test_zero_network_gives_zero_tokens():
    net = MappingNetwork(8, 5, ModelConfig(token_count=3))
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
    assert torch.count_nonzero(map_image_to_tokens(np.ones(8), net)) == 0


def test_forward_matches_manual_oracle():
    rng = np.random.default_rng(0)
    net = MappingNetwork(4, 3, ModelConfig(token_count=2, activation="tanh"), seed=5)
    x = rng.standard_normal(4)
    Ws = [(l.weight.detach().numpy(), l.bias.detach().numpy())
          for l in net.layers if isinstance(l, torch.nn.Linear)]
    h = x
    for n, (W, b) in enumerate(Ws):
        h = W @ h + b
        if n < len(Ws) - 1:
            h = np.tanh(h)
    np.testing.assert_allclose(map_image_to_tokens(x, net).detach().numpy(),
                               h.reshape(2, 3), rtol=1e-12)


def test_compose_empty_query_sequence(enc):
    net = MappingNetwork(8, 8, ModelConfig(token_count=3))
    x = np.linspace(-1, 1, 8)
    seq = query_token_sequence(x, "", net, enc)
    prefix = enc.embed_ids(enc.token_ids(["a", "photo", "of"]))
    assert seq.shape == (6, 8)
    assert torch.equal(seq[:3], prefix)
    assert torch.allclose(seq[3:], net(torch.as_tensor(x).reshape(1, -1))[0])
    q = compose_query(x, "", net, enc)
    assert torch.allclose(q.composed_feature, enc.encode_text_tokens(seq))


def test_compose_with_query_text_appends_separator(enc):
    net = MappingNetwork(8, 8, ModelConfig(token_count=2))
    seq = query_token_sequence(np.ones(8), "make it red", net, enc)
    tail = enc.embed_ids(enc.token_ids([",", "make", "it", "red"]))
    assert seq.shape == (3 + 2 + 4, 8)
    assert torch.equal(seq[5:], tail)


def test_compose_differs_per_image_and_is_unit(enc):
    net = MappingNetwork(8, 8, ModelConfig(token_count=4), seed=3)
    a = compose_query(np.ones(8), "red", net, enc).composed_feature
    b = compose_query(-np.ones(8), "red", net, enc).composed_feature
    assert not torch.allclose(a, b)
    assert torch.linalg.norm(a).item() == pytest.approx(1.0)


@pytest.mark.parametrize("k", range(1, 9))
def test_shape_contract_all_token_counts(enc, k):
    net = MappingNetwork(8, 8, ModelConfig(token_count=k))
    f = compose_query(np.ones(8), "a query", net, enc).composed_feature
    assert f.shape == (6,) and torch.linalg.norm(f).item() == pytest.approx(1.0)


def test_token_dim_mismatch(enc):
    net = MappingNetwork(8, 5)
    with pytest.raises(DimMismatch):
        compose_query(np.ones(8), "", net, enc)


def test_unloaded_encoder():
    class Pending(EncoderBundle):
        d_img = d_token = d_out = 8

    net = MappingNetwork(8, 8)
    with pytest.raises(EncoderNotLoaded):
        compose_query(np.ones(8), "x", net, Pending())


def test_checkpoint_roundtrip(tmp_path, enc):
    net = MappingNetwork(8, 8, ModelConfig(token_count=2, hidden_dim=12), seed=4)
    path = tmp_path / "ck.pt"
    save_checkpoint(path, net, enc.spec(), "abc", step=7)
    payload = load_checkpoint(path)
    assert payload["step"] == 7 and payload["token_count"] == 2
    restored = network_from_checkpoint(payload)
    x = torch.ones(1, 8, dtype=torch.float64)
    assert torch.equal(restored(x), net(x))
    assert encoders_from_spec(payload["encoder_spec"]).snapshot() == enc.snapshot()


def test_corrupt_checkpoint(tmp_path):
    bad = tmp_path / "bad.pt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(bad)
    other = tmp_path / "other.pt"
    torch.save({"kind": "cirlab.checkpoint", "format_version": 99}, other)
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(other)
