import numpy as np
import numpy.testing as npt
import pytest

from videdit import tensor as T
from videdit.errors import InputError
from videdit.gradcheck import fd_check, weighted_scalar
from videdit.text import BOS, PAD, UNK, TextEncoder, Vocabulary, pad_batch


@pytest.fixture
def vocab():
    return Vocabulary(["replace", "the", "number", "with", "3", "7", "move"])


def test_reserved_ids_fixed(vocab):
    assert vocab.token_to_id["<pad>"] == PAD == 0
    assert vocab.token_to_id["<bos>"] == BOS == 1
    assert vocab.token_to_id["<unk>"] == UNK == 2


def test_tokenize_round_trip(vocab):
    ids = vocab.tokenize("Replace the number 3 with 7")
    assert ids[0] == BOS
    words = [vocab.id_to_token[i] for i in ids[1:]]
    assert words == ["replace", "the", "number", "3", "with", "7"]


def test_tokenize_empty_rejected(vocab):
    with pytest.raises(InputError):
        vocab.tokenize("   ")


def test_tokenize_unknown_maps_to_unk(vocab):
    ids = vocab.tokenize("replace the zebra")
    assert ids == [BOS, vocab.lookup("replace"), vocab.lookup("the"), UNK]


def test_vocabulary_bijective_over_real_tokens(vocab):
    for i, tok in enumerate(vocab.id_to_token):
        assert vocab.token_to_id[tok] == i


def test_vocabulary_save_load_round_trip(tmp_path, vocab):
    path = tmp_path / "vocab.txt"
    vocab.save(path)
    lines = path.read_text().splitlines()
    assert lines[:3] == ["<pad>", "<bos>", "<unk>"]
    assert lines[3:] == sorted(lines[3:])
    loaded = Vocabulary.load(path)
    assert loaded.id_to_token == vocab.id_to_token


def test_encode_shape_contract(vocab, rng):
    enc = TextEncoder(len(vocab), c_x=16, rng=rng)
    emb = enc.encode(vocab.tokenize("replace the number 3 with 7"))
    assert emb.e_w.shape == (6, 16)
    assert emb.e_x.shape == (16,)
    assert emb.length == 6
    assert np.all(np.isfinite(emb.e_w.data)) and np.all(np.isfinite(emb.e_x.data))


def test_encode_rejects_overlength(vocab, rng):
    enc = TextEncoder(len(vocab), c_x=16, max_len=4, rng=rng)
    with pytest.raises(InputError):
        enc.encode(vocab.tokenize("replace the number 3 with 7"))


def test_word_order_changes_sentence_embedding(vocab, rng):
    enc = TextEncoder(len(vocab), c_x=16, rng=rng)
    # make attention output projections non-zero so mixing is active
    for layer in enc.layers:
        layer.mha.wo.weight.data = rng.standard_normal(layer.mha.wo.weight.shape).astype(np.float32) * 0.3
    a = enc.encode(vocab.tokenize("replace 3 with 7")).e_x.data
    b = enc.encode(vocab.tokenize("replace 7 with 3")).e_x.data
    assert not np.allclose(a, b)


def test_encode_deterministic(vocab, rng):
    enc = TextEncoder(len(vocab), c_x=16, rng=rng)
    toks = vocab.tokenize("move the number 3")
    with T.no_grad():
        a = enc.encode(toks)
        b = enc.encode(toks)
    npt.assert_array_equal(a.e_x.data, b.e_x.data)
    npt.assert_array_equal(a.e_w.data, b.e_w.data)


def test_padding_does_not_change_real_positions(vocab, rng):
    enc = TextEncoder(len(vocab), c_x=16, rng=rng, dtype=np.float64)
    for layer in enc.layers:
        layer.mha.wo.weight.data = rng.standard_normal(layer.mha.wo.weight.shape) * 0.3
    toks = vocab.tokenize("replace the number 3")
    ids, lengths = pad_batch([toks, vocab.tokenize("move the number 3 with 7")])
    with T.no_grad():
        e_x, e_w, mask = enc.encode_ids(ids, lengths)
        single = enc.encode(toks)
    npt.assert_allclose(e_x.data[0], single.e_x.data, rtol=1e-10)
    npt.assert_allclose(e_w.data[0, :4], single.e_w.data, rtol=1e-10)
    assert mask[0].tolist() == [True] * 4 + [False] * 2


def test_encode_gradient_check(rng):
    vocab = Vocabulary(["a", "b", "c"])
    enc = TextEncoder(len(vocab), c_x=8, heads=2, rng=rng, dtype=np.float64)
    for layer in enc.layers:
        layer.mha.wo.weight.data = rng.standard_normal(layer.mha.wo.weight.shape) * 0.3
    toks = vocab.tokenize("a b c")

    def loss():
        emb = enc.encode(toks)
        return T.add(weighted_scalar(emb.e_w, np.random.default_rng(2)),
                     weighted_scalar(emb.e_x, np.random.default_rng(3)))

    err = fd_check(loss, [enc.embed, enc.layers[0].mha.wq.weight, enc.layers[1].ff1.weight], rng)
    assert err <= 1e-4


def test_gradient_reaches_embedding_rows_of_used_tokens(rng):
    vocab = Vocabulary(["a", "b", "c"])
    enc = TextEncoder(len(vocab), c_x=8, heads=2, rng=rng)
    for layer in enc.layers:
        layer.mha.wo.weight.data = rng.standard_normal(layer.mha.wo.weight.shape).astype(np.float32) * 0.3
    toks = vocab.tokenize("a c")
    emb = enc.encode(toks)
    T.backward(T.tsum(emb.e_x) + T.tsum(emb.e_w))
    g = enc.embed.grad
    assert g is not None
    assert np.abs(g[vocab.lookup("a")]).sum() > 0
    assert np.abs(g[vocab.lookup("c")]).sum() > 0
    assert np.abs(g[vocab.lookup("b")]).sum() == 0
