import numpy as np
import pytest

from cgnnse import numerics as nx
from cgnnse.container import IntegrityError
from cgnnse.gnn import (Architecture, CgnnModel, GcnLayer, LinearHead, decode_weights, expected_activation,
                        gcn_forward, load_model, mhgat_forward, save_model)
from cgnnse.grid import adjacency_from_matrix
from oracles import (mc_expected_activation, random_graph, random_mask, random_mixture, random_model)


def _instance(rng, n=5, c=2, f_out=3):
    adj = random_graph(rng, n)
    logits, means, logvar = random_mixture(rng, n, c)
    return adj, rng.normal(size=(f_out, 2)), logits, means, logvar, rng.normal(size=(n, 2)), random_mask(rng, n)


class TestExpectedActivation:
    def test_monte_carlo_oracle(self):
        rng = np.random.default_rng(11)
        adj, w, logits, means, logvar, x, mask = _instance(rng)
        out = expected_activation(w, logits, means, logvar, adj.a_tilde, x, mask).value[0]
        mc, se = mc_expected_activation(w, logits, means, logvar, adj.a_tilde, x, mask, 1_000_000, rng)
        assert np.all(np.abs(out - mc) <= 3 * se + 1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_full_observability_is_gcn(self, seed):
        rng = np.random.default_rng(seed)
        adj, w, logits, means, logvar, x, _ = _instance(rng, n=6, c=3)
        mask = np.ones(6, bool)
        out = expected_activation(w, logits, means, logvar, adj.a_tilde, x, mask).value[0]
        assert np.array_equal(out, gcn_forward(w, adj.a_tilde, x).value)

    def test_continuity_at_variance_threshold(self):
        rng = np.random.default_rng(3)
        adj, w, logits, means, _, x, mask = _instance(rng)
        tiny = np.full(means.shape, np.log(1e-12))
        zero_var = np.full(means.shape, -np.inf)
        a = expected_activation(w, logits, means, tiny, adj.a_tilde, x, mask).value
        with np.errstate(divide="ignore"):
            b = expected_activation(w, logits, means, zero_var, adj.a_tilde, x, mask).value
        assert np.max(np.abs(a - b)) < 1e-6

    def test_observed_weights_are_uniform(self):
        logits = np.array([[5.0, -5.0], [5.0, -5.0]])
        pi = decode_weights(logits, np.array([True, False])).value
        assert np.allclose(pi[0], 0.5) and pi[1, 0] > 0.99

    def test_shape_errors(self):
        rng = np.random.default_rng(0)
        adj, w, logits, means, logvar, x, mask = _instance(rng)
        with pytest.raises(nx.ShapeError):
            expected_activation(w, logits, means, logvar, adj.a_tilde, x[:4], mask[:4])
        with pytest.raises(nx.ShapeError):
            expected_activation(np.ones((3, 5)), logits, means, logvar, adj.a_tilde, x, mask)


def test_gcn_node_wise_oracle():
    rng = np.random.default_rng(5)
    adj = random_graph(rng, 7)
    w, x = rng.normal(size=(4, 3)), rng.normal(size=(7, 3))
    ref = np.zeros((7, 4))
    for i in range(7):
        for o in range(4):
            s = 0.0
            for j in range(7):
                for f in range(3):
                    s += adj.a_tilde[i, j] * x[j, f] * w[o, f]
            ref[i, o] = max(s, 0.0)
    assert np.max(np.abs(gcn_forward(w, adj.a_tilde, x).value - ref)) < 1e-12


def test_mhgat_scalar_oracle():
    rng = np.random.default_rng(6)
    a = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], float)
    adj = adjacency_from_matrix(a)
    k, fo, fi = 2, 3, 4
    w, att, x = rng.normal(size=(k, fo, fi)), rng.normal(size=(k, 2 * fo)), rng.normal(size=(3, fi))
    out = mhgat_forward(w, att, adj.neighbours, x, slope=0.2).value
    ref = np.zeros((3, k * fo))
    for head in range(k):
        h = [w[head] @ x[j] for j in range(3)]
        for i in range(3):
            nbrs = [j for j in range(3) if a[i, j] or i == j]
            scores = []
            for j in nbrs:
                e = float(att[head, :fo] @ h[i] + att[head, fo:] @ h[j])
                scores.append(e if e > 0 else 0.2 * e)
            ex = np.exp(np.array(scores) - max(scores))
            alpha = ex / ex.sum()
            agg = sum(al * h[j] for al, j in zip(alpha, nbrs))
            ref[i, head * fo:(head + 1) * fo] = np.maximum(agg, 0)
    assert np.max(np.abs(out - ref)) < 1e-12


def test_attention_rows_normalize():
    rng = np.random.default_rng(7)
    model = random_model(rng, n=8, arch=Architecture(hidden=4, heads=3, components=2))
    alpha = model.attention(rng.normal(size=(2, 8, 2)))
    assert alpha.shape == (2, 3, 8, 8)
    assert np.max(np.abs(alpha.sum(-1) - 1)) < 1e-12
    assert np.all(alpha[..., ~model.adj.neighbours] == 0)


def test_permutation_equivariance():
    rng = np.random.default_rng(8)
    n = 6
    model = random_model(rng, n=n, arch=Architecture(hidden=4, heads=2, components=2))
    perm = rng.permutation(n)
    p = np.eye(n)[perm]
    first = model.layers[0].params
    layers = [type(model.layers[0])(first["weight"], first["logits"][perm], first["means"][:, perm],
                                    first["logvar"][:, perm])] + model.layers[1:]
    permuted = CgnnModel(layers, adjacency_from_matrix(p @ model.adj.a @ p.T), model.arch, model.mask[perm])
    x = rng.normal(size=(3, n, 2))
    assert np.max(np.abs(permuted.predict(x[:, perm]) - model.predict(x)[:, perm])) < 1e-12


class TestModel:
    def test_default_architecture(self):
        rng = np.random.default_rng(0)
        model = random_model(rng, n=14, arch=Architecture())
        kinds = [l.kind for l in model.layers]
        assert kinds == ["gmm_gcn", "mhgat", "linear"]
        assert model.layers[1].heads == 4 and model.layers[1].out_features == 200
        assert model.layers[0].params["weight"].shape == (50, 2)

    def test_extra_gcn_and_ablation(self):
        rng = np.random.default_rng(0)
        model = random_model(rng, n=5, arch=Architecture(hidden=4, heads=2, extra_gcn=1, attention=False))
        assert [l.kind for l in model.layers] == ["gmm_gcn", "gcn", "gcn", "linear"]
        assert model.layers[2].out_features == 8

    def test_rejects_bad_stacks(self):
        rng = np.random.default_rng(0)
        model = random_model(rng)
        with pytest.raises(ValueError):
            CgnnModel(model.layers[1:], model.adj, model.arch, model.mask)
        with pytest.raises(ValueError):
            CgnnModel(model.layers[:-1], model.adj, model.arch, model.mask)
        with pytest.raises(nx.ShapeError):
            CgnnModel([model.layers[0], GcnLayer(np.ones((4, 7))), LinearHead(np.ones((4, 2)), np.zeros(2))],
                      model.adj, model.arch, model.mask)
        with pytest.raises(ValueError):
            CgnnModel(model.layers, model.adj, model.arch, model.mask, scale=(1.0, 0.0))

    def test_standardization_round_trip(self):
        rng = np.random.default_rng(0)
        model = random_model(rng)
        model.center, model.scale = np.array([1.0, -0.2]), np.array([0.02, 0.1])
        y = rng.normal(size=(5, 2))
        assert np.allclose(model.destandardize(model.standardize(y)), y, rtol=0, atol=1e-15)

    def test_batched_equals_single(self):
        rng = np.random.default_rng(1)
        model = random_model(rng)
        x = rng.normal(size=(4, 5, 2))
        batch = model.predict(x)
        for i in range(4):
            assert np.allclose(model.predict(x[i]), batch[i], rtol=0, atol=1e-14)

    def test_outage_changes_output_but_stays_finite(self, small_model, small_dataset, case14):
        from cgnnse.grid import build_adjacency, perturb_topology
        adj2 = build_adjacency(perturb_topology(case14, [case14.find_branch(2, 3)]))
        x = small_dataset.features()[:5]
        a, b = small_model.predict(x), small_model.predict(x, adj=adj2)
        assert np.all(np.isfinite(b)) and not np.array_equal(a, b)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        rng = np.random.default_rng(2)
        model = random_model(rng, n=6, arch=Architecture(hidden=4, heads=2, components=3, extra_gcn=1))
        model.center, model.scale = np.array([1.0, -0.1]), np.array([0.03, 0.2])
        model.meta["note"] = "x"
        save_model(tmp_path / "m.ckpt", model)
        back = load_model(tmp_path / "m.ckpt")
        x = rng.normal(size=(3, 6, 2))
        assert np.array_equal(back.predict(x), model.predict(x))
        assert back.meta["note"] == "x" and back.arch == model.arch
        assert np.array_equal(back.mask, model.mask)

    def test_wrong_adjacency_size(self, tmp_path):
        rng = np.random.default_rng(2)
        save_model(tmp_path / "m.ckpt", random_model(rng, n=6))
        with pytest.raises(nx.ShapeError):
            load_model(tmp_path / "m.ckpt", adj=random_graph(rng, 7))

    def test_corrupt_checksum(self, tmp_path):
        rng = np.random.default_rng(2)
        p = tmp_path / "m.ckpt"
        save_model(p, random_model(rng, n=6))
        raw = bytearray(p.read_bytes())
        raw[-3] ^= 0x10
        p.write_bytes(bytes(raw))
        with pytest.raises(IntegrityError):
            load_model(p)
