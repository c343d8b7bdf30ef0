import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hinrnn import graph_model as GM
from hinrnn import nn
from hinrnn.cogroups import CoReviewNetwork

import oracles


def net(edges, reviewers=None, gid="g"):
    reviewers = reviewers or sorted({r for e in edges for r in e})
    return CoReviewNetwork(gid, tuple(reviewers), frozenset(tuple(sorted(e)) for e in edges))


K3 = net([("r1", "r2"), ("r1", "r3"), ("r2", "r3")])
PATH = net([("a", "b"), ("b", "c")])


def small_config(**kw):
    base = dict(feature_dim=3, max_prev=4, graph_hidden=6, edge_hidden=4, input_embed=5)
    base.update(kw)
    return GM.HinRnnConfig(**base)


def vectors_for(network, dim=3, seed=0):
    rng = np.random.default_rng(seed)
    return {r: rng.normal(size=dim) for r in network.reviewers}


# --- ordering and codec ------------------------------------------------------

def test_order_examples():
    assert GM.order_nodes(PATH) == ["b", "a", "c"]
    assert GM.order_nodes(K3) == ["r1", "r2", "r3"]
    star = net([("s", "l3"), ("s", "l1"), ("s", "l2")])
    assert GM.order_nodes(star) == ["s", "l1", "l2", "l3"]


def test_order_rejects_unknown_policy():
    with pytest.raises(ValueError):
        GM.order_nodes(K3, policy="dfs")


def test_sequence_examples():
    assert [s.tolist() for s in GM.to_sequence(K3, GM.order_nodes(K3))] == [[1], [1, 1]]
    assert [s.tolist() for s in GM.to_sequence(PATH, ["b", "a", "c"])] == [[1], [1, 0]]
    assert [s.tolist() for s in GM.to_sequence(net([("x", "y")]), ["x", "y"])] == [[1]]


def test_from_sequence_examples():
    assert GM.from_sequence([[1]]).tolist() == [[0, 1], [1, 0]]
    assert not GM.from_sequence([[0], [0, 0]]).any()
    with pytest.raises(ValueError):
        GM.from_sequence([[1], [1]])
    with pytest.raises(ValueError):
        GM.from_sequence([[2]])


def test_to_sequence_rejects_bad_ordering():
    with pytest.raises(ValueError):
        GM.to_sequence(K3, ["r1", "r2"])


def _connected(n, edges):
    adj = {i: set() for i in range(n)}
    for a, b in edges:
        adj[a].add(b)
        adj[b].add(a)
    seen, stack = {0}, [0]
    while stack:
        for v in adj[stack.pop()]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return len(seen) == n


def test_round_trip_exhaustive_small():
    for n in range(2, 6):
        pairs = list(itertools.combinations(range(n), 2))
        for mask in range(1, 2 ** len(pairs)):
            edges = [p for k, p in enumerate(pairs) if mask >> k & 1]
            if not _connected(n, edges):
                continue
            g = net([(f"n{a}", f"n{b}") for a, b in edges], [f"n{i}" for i in range(n)])
            order = GM.order_nodes(g)
            adj = g.adjacency(order)
            assert (GM.from_sequence(GM.to_sequence(g, order)) == adj).all()


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2**32 - 1))
def test_round_trip_random(n, seed):
    rng = np.random.default_rng(seed)
    upper = np.triu(rng.random((n, n)) < rng.random(), 1).astype(np.int8)
    adj = upper + upper.T
    seq = GM.adjacency_to_sequence(adj)
    assert [len(s) for s in seq] == list(range(1, n))
    back = GM.from_sequence(seq)
    assert (back == adj).all()
    assert all((a == b).all() for a, b in zip(GM.adjacency_to_sequence(back), seq))


def test_collaboration_matrix_invariants():
    with pytest.raises(ValueError):
        GM.CollaborationMatrix(("a", "b"), np.array([[0, 1], [0, 0]]))
    with pytest.raises(ValueError):
        GM.CollaborationMatrix(("a", "b"), np.array([[1, 0], [0, 0]]))
    m = GM.CollaborationMatrix(("a", "b", "c"), np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]]))
    assert m.edges() == {("a", "b"), ("b", "c")}
    assert m.degrees() == {"a": 1, "b": 2, "c": 1}
    assert m.aligned(["c", "b", "a"]).edges() == m.edges()


# --- metrics -----------------------------------------------------------------

C4 = ("a", "b", "c", "d")
RING = np.array([[0, 1, 0, 1], [1, 0, 1, 0], [0, 1, 0, 1], [1, 0, 1, 0]])


def test_edge_accuracy_examples():
    gold = GM.CollaborationMatrix(C4, RING)
    assert GM.edge_accuracy(gold, gold) == 1.0
    assert GM.edge_accuracy(GM.CollaborationMatrix(C4, np.zeros((4, 4))), gold) == 0.0
    three = RING.copy()
    three[0, 3] = three[3, 0] = 0
    assert GM.edge_accuracy(GM.CollaborationMatrix(C4, three), gold) == 0.75


def test_edge_accuracy_ignores_ordering_and_checks_nodes():
    gold = GM.CollaborationMatrix(C4, RING)
    assert GM.edge_accuracy(gold.aligned(["d", "c", "b", "a"]), gold) == 1.0
    with pytest.raises(ValueError):
        GM.edge_accuracy(GM.CollaborationMatrix(("a", "b"), np.zeros((2, 2))), gold)


def test_node_accuracy_examples():
    assert GM.node_accuracy(GM.CollaborationMatrix(C4, RING), C4) == 1.0
    assert GM.node_accuracy(GM.CollaborationMatrix(C4, np.zeros((4, 4))), C4) == 0.0
    path = np.array([[0, 1, 0, 0], [1, 0, 1, 0], [0, 1, 0, 0], [0, 0, 0, 0]])
    assert GM.node_accuracy(GM.CollaborationMatrix(C4, path), C4) == 0.75


# --- model -------------------------------------------------------------------

def zero_model(config):
    model = GM.HinRnn(config)
    model.flat[:] = 0.0
    return model


def test_step_zero_params():
    model = zero_model(small_config())
    h = np.linspace(-0.5, 0.5, 6)
    out = model.step(h, np.ones(4), np.ones(3))
    np.testing.assert_array_equal(out, 0.5 * h)
    assert not model.step(np.zeros(6), np.ones(4), np.ones(3)).any()


def test_step_matches_gru_oracle():
    config = small_config()
    model = GM.HinRnn(config, seed=3)
    rng = np.random.default_rng(0)
    h, s, v = rng.uniform(-1, 1, 6), rng.integers(0, 2, 4).astype(float), rng.normal(size=3)
    e = np.maximum(np.concatenate([s, v]) @ model.params["in.W"] + model.params["in.b"], 0.0)
    graph = {k[6:]: p for k, p in model.params.items() if k.startswith("graph.")}
    expected = oracles.gru_step_loops(*oracles.cell_lists(graph), e.tolist(), h.tolist())
    np.testing.assert_allclose(model.step(h, s, v), expected, atol=1e-10)


def test_step_width_errors():
    model = GM.HinRnn(small_config())
    with pytest.raises(ValueError):
        model.step(np.zeros(6), np.ones(3), np.ones(3))
    with pytest.raises(ValueError):
        model.step(np.zeros(6), np.ones(4), np.ones(2))


def test_predict_edges_zero_params():
    model = zero_model(small_config())
    assert model.predict_edges(np.ones(6), 4).tolist() == [0.5, 0.5, 0.5]
    assert model.predict_edges(np.ones(6), 2).shape == (1,)
    with pytest.raises(ValueError):
        model.predict_edges(np.ones(6), 1)


@pytest.mark.parametrize("blind", [False, True])
def test_teacher_forced_probs_match_unrolled_oracle(blind):
    config = small_config(feature_blind=blind)
    model = GM.HinRnn(config, seed=5)
    g = net([("a", "b"), ("a", "c"), ("b", "d"), ("c", "d"), ("a", "d")])
    sample = GM.make_sample(g, vectors_for(g))
    expected = oracles.hinrnn_edge_probs(model.params, config.max_prev, sample.features.tolist(), sample.adjacency.tolist(), blind)
    h = np.zeros(config.graph_hidden)
    s_prev = np.ones(config.max_prev)
    total, count = 0.0, 0
    for i in range(sample.size):
        h = model.step(h, s_prev, sample.features[i])
        s_prev = np.zeros(config.max_prev)
        s_prev[:i] = sample.adjacency[:i, i]
        if i == 0:
            continue
        targets = sample.adjacency[:i, i]
        probs = model.predict_edges(h, i + 1, targets)
        np.testing.assert_allclose(probs, expected[i], atol=1e-10)
        total += float(nn.binary_cross_entropy(probs, targets).sum())
        count += i
    loss, _, stats = model.loss_and_grads([sample])
    assert stats["count"] == count
    assert loss == pytest.approx(total / count, abs=1e-10)


@pytest.mark.parametrize("seed", range(10))
def test_training_step_gradcheck(seed):
    rng = np.random.default_rng(seed)
    config = small_config(feature_blind=bool(seed % 2))
    model = GM.HinRnn(config, seed=seed)
    nets = [K3, PATH, net([("p", "q"), ("q", "r"), ("r", "s"), ("p", "s"), ("p", "r")])]
    samples = [GM.make_sample(g, vectors_for(g, seed=seed + k)) for k, g in enumerate(nets)]
    samples = [samples[i] for i in rng.permutation(3)]

    def f(params):
        loss, grads, _ = model.loss_and_grads(samples)
        return loss, {k: v.copy() for k, v in grads.items()}

    assert nn.grad_check(f, model.params, seed=seed, max_entries=8) < 1e-4


def test_feature_sensitivity():
    config = small_config()
    model = GM.HinRnn(config, seed=1)
    sample = GM.make_sample(K3, vectors_for(K3))
    base = model.loss_and_grads([sample])[0]
    swapped = GM.GraphSample(sample.group_id, sample.ordering, sample.adjacency, sample.features.copy())
    swapped.features[2] = -swapped.features[2]
    assert model.loss_and_grads([swapped])[0] != base
    blind = GM.HinRnn(small_config(feature_blind=True), params={k: v.copy() for k, v in model.params.items()})
    assert blind.loss_and_grads([swapped])[0] == blind.loss_and_grads([sample])[0]


def test_untrained_inference_is_refused():
    model = GM.HinRnn(small_config())
    with pytest.raises(RuntimeError):
        model.infer([GM.make_sample(K3, vectors_for(K3))])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6))
def test_generated_matrices_are_symmetric(seed):
    model = GM.HinRnn(small_config(max_prev=5), seed=seed)
    g = net([("a", "b"), ("b", "c"), ("c", "d"), ("d", "e"), ("e", "f")])
    for m in model.generate([GM.make_sample(g, vectors_for(g, seed=seed))], rng=np.random.default_rng(seed)):
        assert (m == m.T).all() and not m.diagonal().any()


def test_inference_is_pure_and_handles_pairs():
    model = GM.HinRnn(small_config(), seed=2)
    pair = net([("x", "y")])
    samples = [GM.make_sample(pair, vectors_for(pair)), GM.make_sample(K3, vectors_for(K3))]
    a = model.infer(samples, force=True)
    b = model.infer(samples, force=True)
    assert all((x.matrix == y.matrix).all() for x, y in zip(a, b))
    p = model.predict_edges(model.step(model.step(np.zeros(6), np.ones(4), samples[0].features[0]), np.zeros(4), samples[0].features[1]), 2)
    assert a[0].matrix[0, 1] == int(p[0] >= 0.5)


def test_oversized_inference_warns(caplog):
    model = GM.HinRnn(small_config(max_prev=2), seed=0)
    g = net([("a", "b"), ("b", "c"), ("c", "d"), ("d", "e")])
    (m,) = model.infer([GM.make_sample(g, vectors_for(g))], force=True)
    assert "exceed" in caplog.text
    assert m.matrix.shape == (5, 5)


def test_train_errors():
    with pytest.raises(ValueError):
        GM.train_hinrnn([], small_config())
    with pytest.raises(ValueError):
        GM.make_sample(K3, {"r1": np.zeros(3)})


def test_training_is_deterministic_and_reduces_loss():
    nets = [K3, PATH, net([("p", "q"), ("q", "r"), ("p", "r"), ("r", "s")])]
    samples = [GM.make_sample(g, vectors_for(g, seed=k)) for k, g in enumerate(nets)]
    a, hist = GM.train_hinrnn(samples, small_config(), epochs=300, seed=4)
    b, _ = GM.train_hinrnn(samples, small_config(), epochs=300, seed=4)
    assert a.flat.tobytes() == b.flat.tobytes()
    assert hist[-1]["loss"] <= 0.7 * hist[0]["loss"]


def test_checkpoint_round_trip(tmp_path):
    samples = [GM.make_sample(K3, vectors_for(K3))]
    model, _ = GM.train_hinrnn(samples, small_config(), epochs=5, seed=0)
    model.save(tmp_path / "m.json")
    again = GM.HinRnn.load(tmp_path / "m.json")
    assert again.trained and again.config == model.config
    assert again.flat.tobytes() == model.flat.tobytes()
    assert (again.infer(samples)[0].matrix == model.infer(samples)[0].matrix).all()
    assert again.feature_mean.tobytes() == model.feature_mean.tobytes()
    assert again.feature_scale.tobytes() == model.feature_scale.tobytes()


def test_training_standardizes_node_features():
    samples = [GM.make_sample(g, vectors_for(g, seed=k)) for k, g in enumerate([K3, PATH])]
    model, _ = GM.train_hinrnn(samples, small_config(), epochs=1, seed=0)
    z = model.standardize(np.concatenate([s.features for s in samples]))
    np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(z.std(axis=0), 1.0, atol=1e-12)


def test_constant_feature_keeps_unit_scale():
    vecs = {r: np.array([1.0, 2.0, 3.0]) for r in K3.reviewers}
    model = GM.HinRnn(small_config(), seed=0)
    model.fit_standardizer([GM.make_sample(K3, vecs)])
    assert model.feature_scale.tolist() == [1.0, 1.0, 1.0]
    assert not model.standardize(vecs["r1"]).any()
