import numpy as np
import pytest

from hinrnn import wordvec as W
from hinrnn.corpus import SynthConfig, generate_synthetic


def _cosine(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def _synonym_corpus(seed=0):
    rng = np.random.default_rng(seed)
    pos_ctx = [["the", "food", "was"], ["service", "is"], ["what", "a"]]
    neg_ctx = [["the", "wait", "felt"], ["parking", "is"], ["how", "very"]]
    sents = []
    for _ in range(400):
        ctx = pos_ctx[rng.integers(3)]
        sents.append(ctx + [["good", "great"][rng.integers(2)], "today"])
        ctx = neg_ctx[rng.integers(3)]
        sents.append(ctx + ["terrible", "again"])
    return sents


def test_shared_contexts_give_close_vectors():
    table, _ = W.train_cbow(_synonym_corpus(), dim=20, epochs=10, seed=0)
    good, great, bad = table.lookup("good"), table.lookup("great"), table.lookup("terrible")
    assert _cosine(good, great) > _cosine(good, bad)


def test_default_dimension():
    table, _ = W.train_cbow([["a", "b", "c"]] * 5, epochs=1)
    assert table.dim == 100
    assert W.END in table


def test_same_seed_same_vectors():
    sents = _synonym_corpus()
    a, _ = W.train_cbow(sents, dim=10, epochs=2, seed=3)
    b, _ = W.train_cbow(sents, dim=10, epochs=2, seed=3)
    assert a.vectors.tobytes() == b.vectors.tobytes()


def test_loss_drops_on_synthetic_corpus():
    corp = generate_synthetic(SynthConfig(seed=0))
    _, losses = W.train_cbow([s for r in corp.reviews for s in r.sentences()], seed=0)
    assert losses[-1] <= 0.8 * losses[0]
    for prev, cur in zip(losses, losses[1:]):
        assert cur <= prev * 1.05


def test_empty_vocabulary():
    with pytest.raises(ValueError):
        W.train_cbow([[]])


def test_end_is_zero_and_table_is_read_only():
    table = W.EmbeddingTable({"a": 0}, np.ones((1, 3)))
    assert not table.lookup(W.END).any()
    with pytest.raises(ValueError):
        table.vectors[0, 0] = 2.0


def test_oov_fallback_is_deterministic_and_norm_matched():
    table = W.EmbeddingTable({"a": 0, "b": 1}, np.array([[3.0, 4.0, 0.0], [0.0, 0.0, 5.0]]))
    v = table.lookup("unseen")
    assert v.tobytes() == table.lookup("unseen").tobytes()
    other = W.EmbeddingTable({"a": 0, "b": 1}, np.array([[3.0, 4.0, 0.0], [0.0, 0.0, 5.0]]))
    assert other.lookup("unseen").tobytes() == v.tobytes()
    assert np.linalg.norm(v) == pytest.approx(5.0)
    assert "unseen" not in table


def test_load_two_words(tmp_path):
    path = tmp_path / "e.txt"
    path.write_text("dim=3\nfoo 1 2 3\nbar 4 5 6\n")
    table = W.load_embeddings(path)
    assert len(table) == 3
    assert table.lookup("bar").tolist() == [4.0, 5.0, 6.0]


def test_load_without_header(tmp_path):
    path = tmp_path / "e.txt"
    path.write_text("foo 1 2\nbar 3 4\n")
    assert W.load_embeddings(path).dim == 2


def test_duplicate_word_named(tmp_path):
    path = tmp_path / "e.txt"
    path.write_text("foo 1 2 3\nfoo 4 5 6\n")
    with pytest.raises(ValueError, match="foo"):
        W.load_embeddings(path)


def test_inconsistent_dims(tmp_path):
    path = tmp_path / "e.txt"
    path.write_text("foo 1 2 3\nbar 4 5\n")
    with pytest.raises(ValueError, match="bar"):
        W.load_embeddings(path)


def test_save_load_round_trip(tmp_path):
    table, _ = W.train_cbow(_synonym_corpus(), dim=8, epochs=1, seed=1)
    W.save_embeddings(table, tmp_path / "e.txt")
    again = W.load_embeddings(tmp_path / "e.txt")
    for word in table.vocab:
        assert again.lookup(word).tobytes() == table.lookup(word).tobytes()
