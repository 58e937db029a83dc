import numpy as np
import pytest

from smecredit import autodiff as ad
from smecredit.autodiff import Tensor
from smecredit.gnn import (Adjacency, EncoderConfig, GatConfig, GinConfig, GraphBatch, encode_snapshots,
                           gat_attention, gat_forward, gin_aggregate, gin_forward, init_encoder, init_gat,
                           init_gin)

import oracles


def random_graph(rng, n, p=0.3):
    return [(u, v) for u in range(n) for v in range(u + 1, n) if rng.random() < p]


def gat_case(rng, n=4, d=3, D=2, heads=1, edges=None, directed=False, weighted=False):
    edges = edges if edges is not None else random_graph(rng, n)
    w = rng.uniform(0.5, 3.0, size=len(edges)) if weighted else None
    adj = Adjacency.from_pairs(n, edges, w, directed=directed, weighted=weighted)
    P = {}
    cfg = GatConfig(heads=heads, hidden=D)
    init_gat(P, "g", d, cfg, rng)
    H = rng.standard_normal((n, d))
    return H, adj, P, cfg, edges, w


def test_isolated_node_gets_own_projection():
    rng = np.random.default_rng(0)
    H, adj, P, cfg, _, _ = gat_case(rng, n=3, edges=[(0, 1)])
    Z = gat_forward(Tensor(H), adj, ad.detached(P), "g", cfg).values
    np.testing.assert_allclose(Z[2], H[2] @ P["g.W0"], rtol=0, atol=1e-15)


def test_symmetric_pair_zero_attention_vector():
    rng = np.random.default_rng(1)
    H, adj, P, cfg, _, _ = gat_case(rng, n=2, edges=[(0, 1)])
    H[1] = H[0]
    P["g.a0"][:] = 0.0
    _, alpha, _, _ = gat_attention(ad.detached(P), "g", Tensor(H), adj, 0, cfg)
    np.testing.assert_allclose(alpha.values, 0.5)


@pytest.mark.parametrize("directed,weighted", [(False, False), (True, False), (False, True), (True, True)])
def test_gat_matches_loop_oracle(directed, weighted):
    rng = np.random.default_rng(2)
    for _ in range(20):
        H, adj, P, cfg, edges, w = gat_case(rng, n=6, d=3, D=2, directed=directed, weighted=weighted)
        Z = gat_forward(Tensor(H), adj, ad.detached(P), "g", cfg).values
        ref, _ = oracles.gat_layer(H.tolist(), edges, P["g.W0"].tolist(), P["g.a0"].tolist(),
                                   weights=None if w is None else w.tolist(), directed=directed)
        np.testing.assert_allclose(Z, ref, rtol=0, atol=1e-12)


def test_path_graph_multi_head_concat_and_average():
    rng = np.random.default_rng(3)
    H, adj, P, cfg, edges, _ = gat_case(rng, n=4, heads=3, edges=[(0, 1), (1, 2), (2, 3)])
    heads = [oracles.gat_layer(H.tolist(), edges, P[f"g.W{h}"].tolist(), P[f"g.a{h}"].tolist())[0]
             for h in range(3)]
    cat = gat_forward(Tensor(H), adj, ad.detached(P), "g", cfg, combine="concat").values
    avg = gat_forward(Tensor(H), adj, ad.detached(P), "g", cfg, combine="average").values
    np.testing.assert_allclose(cat, np.concatenate(heads, axis=1), atol=1e-12)
    np.testing.assert_allclose(avg, np.mean(heads, axis=0), atol=1e-12)
    assert cat.shape == (4, 3 * 2) and avg.shape == (4, 2)


def test_attention_rows_normalized_and_nonnegative():
    rng = np.random.default_rng(4)
    for _ in range(20):
        H, adj, P, cfg, _, _ = gat_case(rng, n=8, weighted=True)
        _, alpha, _, dst = gat_attention(ad.detached(P), "g", Tensor(H), adj, 0, cfg)
        a = alpha.values
        assert np.all(a >= 0)
        np.testing.assert_allclose(np.bincount(dst, weights=a, minlength=8), 1.0, atol=1e-9)


def test_directed_uses_in_neighbours_only():
    rng = np.random.default_rng(5)
    # 0 -> 1: node 1 hears node 0, node 0 hears nobody
    H, adj, P, cfg, _, _ = gat_case(rng, n=2, edges=[(0, 1)], directed=True)
    Z = gat_forward(Tensor(H), adj, ad.detached(P), "g", cfg).values
    np.testing.assert_allclose(Z[0], H[0] @ P["g.W0"], atol=1e-15)
    assert not np.allclose(Z[1], H[1] @ P["g.W0"])


def test_locality_outside_neighbourhood():
    rng = np.random.default_rng(6)
    H, adj, P, cfg, edges, _ = gat_case(rng, n=5, edges=[(0, 1), (1, 2), (3, 4)])
    Z = gat_forward(Tensor(H), adj, ad.detached(P), "g", cfg).values
    H2 = H.copy()
    H2[3:] += 5.0
    Z2 = gat_forward(Tensor(H2), adj, ad.detached(P), "g", cfg).values
    assert np.array_equal(Z[:3], Z2[:3])


def gin_case(rng, n=6, d=3, hid=4, out=2, eps=0.3, edges=None, weighted=False, directed=False):
    edges = edges if edges is not None else random_graph(rng, n)
    w = rng.uniform(0.5, 3.0, size=len(edges)) if weighted else None
    adj = Adjacency.from_pairs(n, edges, w, directed=directed, weighted=weighted)
    cfg = GinConfig(hidden=out, mlp_hidden=hid, eps=eps, learn_eps=True)
    P = {}
    init_gin(P, "g", d, cfg, rng)
    P["g.mlp.b0"] = rng.standard_normal(hid) * 0.1
    P["g.eps"] = np.array(eps)
    return rng.standard_normal((n, d)), adj, P, cfg, edges, w


@pytest.mark.parametrize("weighted,directed", [(False, False), (True, False), (True, True)])
def test_gin_matches_loop_oracle(weighted, directed):
    rng = np.random.default_rng(7)
    for _ in range(20):
        H, adj, P, cfg, edges, w = gin_case(rng, weighted=weighted, directed=directed)
        Z = gin_forward(Tensor(H), adj, ad.detached(P), "g", cfg).values
        ref, _ = oracles.gin_layer(H.tolist(), edges, 0.3, P["g.mlp.W0"].tolist(), P["g.mlp.b0"].tolist(),
                                   P["g.mlp.W1"].tolist(), P["g.mlp.b1"].tolist(),
                                   weights=None if w is None else w.tolist(), directed=directed)
        np.testing.assert_allclose(Z, ref, atol=1e-12)


def test_gin_isolated_node_is_plain_mlp():
    rng = np.random.default_rng(8)
    H, adj, P, cfg, _, _ = gin_case(rng, n=3, eps=0.0, edges=[(0, 1)])
    Z = gin_forward(Tensor(H), adj, ad.detached(P), "g", cfg).values
    hidden = np.maximum(H[2] @ P["g.mlp.W0"] + P["g.mlp.b0"], 0)
    np.testing.assert_allclose(Z[2], hidden @ P["g.mlp.W1"] + P["g.mlp.b1"], atol=1e-15)


def test_gin_star_center_input():
    x = np.array([1.0, -2.0])
    hc = np.array([0.5, 0.25])
    H = np.vstack([hc, x, x, x])
    adj = Adjacency.from_pairs(4, [(0, 1), (0, 2), (0, 3)])
    agg = gin_aggregate(Tensor(H), adj, 0.2).values
    np.testing.assert_allclose(agg[0], 1.2 * hc + 3 * x)


def star_inputs(leaves):
    H = np.vstack([np.array([0.3, 0.7])] + [np.array([1.0, 2.0])] * leaves)
    return H, Adjacency.from_pairs(leaves + 1, [(0, k) for k in range(1, leaves + 1)])


def mean_aggregate(H, adj):
    src, dst, _ = adj.with_self_loops()
    out = np.zeros_like(H)
    np.add.at(out, dst, H[src])
    return out / np.bincount(dst, minlength=adj.n)[:, None]


def test_sum_aggregation_separates_stars_mean_does_not():
    H2, a2 = star_inputs(2)
    H3, a3 = star_inputs(3)
    # identical-feature leaves and the center features equal to the leaves
    H2[0] = H2[1]
    H3[0] = H3[1]
    g2 = gin_aggregate(Tensor(H2), a2, 0.0).values[0]
    g3 = gin_aggregate(Tensor(H3), a3, 0.0).values[0]
    assert not np.array_equal(g2, g3)
    assert np.array_equal(mean_aggregate(H2, a2)[0], mean_aggregate(H3, a3)[0])


def _permute(H, edges, w, perm):
    inv = np.argsort(perm)
    return H[perm], [(int(inv[u]), int(inv[v])) for u, v in edges], w


@pytest.mark.parametrize("kind", ["gat", "gin"])
def test_permutation_equivariance(kind):
    rng = np.random.default_rng(9)
    for _ in range(10):
        n = 20
        edges = random_graph(rng, n, 0.15)
        w = rng.uniform(0.5, 2.0, len(edges))
        P = {}
        if kind == "gat":
            cfg = GatConfig(heads=2, hidden=3)
            init_gat(P, "g", 4, cfg, rng)
            fwd = lambda H, adj: gat_forward(Tensor(H), adj, ad.detached(P), "g", cfg, "concat").values  # noqa
        else:
            cfg = GinConfig(hidden=3)
            init_gin(P, "g", 4, cfg, rng)
            fwd = lambda H, adj: gin_forward(Tensor(H), adj, ad.detached(P), "g", cfg).values  # noqa
        H = rng.standard_normal((n, 4))
        perm = rng.permutation(n)
        Hp, ep, wp = _permute(H, edges, w, perm)
        Z = fwd(H, Adjacency.from_pairs(n, edges, w, weighted=True))
        Zp = fwd(Hp, Adjacency.from_pairs(n, ep, wp, weighted=True))
        np.testing.assert_allclose(Zp, Z[perm], atol=1e-9)


def test_gat_and_gin_layers_pass_grad_check():
    rng = np.random.default_rng(10)
    H, adj, P, cfg, _, _ = gat_case(rng, n=5, d=3, D=2, heads=2, weighted=True)
    names = sorted(P)
    y = np.array([1.0, 0.0, 1.0, 0.0, 1.0])

    def gat_loss(ps):
        Pt = dict(zip(names, ps))
        Z = gat_forward(Tensor(H), adj, Pt, "g", cfg, "concat")
        p = ad.sigmoid(ad.total(Z, axis=1))
        return ad.scale(ad.total(ad.log(p) * y + ad.log(1.0 - p) * (1 - y)), -1 / 5)

    assert ad.grad_check(gat_loss, [P[k] for k in names]) < 1e-3

    H, adj, P, cfg, _, _ = gin_case(rng, weighted=True)
    names = sorted(P)

    def gin_loss(ps):
        Pt = dict(zip(names, ps))
        return ad.total(ad.tanh(gin_forward(Tensor(H), adj, Pt, "g", cfg)))

    assert ad.grad_check(gin_loss, [P[k] for k in names]) < 1e-3


def empty_adj(n):
    return Adjacency(n, np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0))


def test_encode_empty_snapshots_give_own_projections():
    rng = np.random.default_rng(11)
    cfg = EncoderConfig(kind="gat", depth=1, layers=("FT",), gat=GatConfig(heads=1, hidden=3))
    P = {}
    init_encoder(P, 4, cfg, rng)
    X = rng.standard_normal((5, 4))
    batch = GraphBatch(X, 3, [{"FT": empty_adj(5)} for _ in range(6)])
    out = encode_snapshots(batch, ad.detached(P), cfg)
    assert len(out) == 6
    for s, Z in enumerate(out):
        np.testing.assert_allclose(Z.values, X[:3] @ P[f"gnn{s}.l0.FT.W0"], atol=1e-15)


def test_encode_tied_instances_identical_outputs():
    rng = np.random.default_rng(12)
    cfg = EncoderConfig(kind="gin", depth=2, layers=("FT", "CO"), gin=GinConfig(hidden=3))
    P = {}
    init_encoder(P, 4, cfg, rng)
    for k in list(P):
        if not k.startswith("gnn0."):
            P[k] = P["gnn0." + k.split(".", 1)[1]].copy()
    adj = Adjacency.from_pairs(6, [(0, 3), (1, 4), (2, 5)])
    batch = GraphBatch(rng.standard_normal((6, 4)), 3, [{"FT": adj, "CO": adj} for _ in range(6)])
    out = [z.values for z in encode_snapshots(batch, ad.detached(P), cfg)]
    for z in out[1:]:
        assert np.array_equal(z, out[0])


def test_encode_toy_shape():
    rng = np.random.default_rng(13)
    cfg = EncoderConfig(kind="gat", depth=2, layers=("FT", "CO"), gat=GatConfig(heads=2, hidden=5))
    P = {}
    init_encoder(P, 7, cfg, rng)
    snaps = [{"FT": Adjacency.from_pairs(20, random_graph(rng, 20, 0.1)),
              "CO": Adjacency.from_pairs(20, random_graph(rng, 20, 0.05))} for _ in range(6)]
    out = encode_snapshots(GraphBatch(rng.standard_normal((20, 7)), 8, snaps), ad.detached(P), cfg)
    assert ad.concat_cols(out).shape == (8, 6 * 5)


def test_encoder_rejects_bad_depth():
    with pytest.raises(ValueError):
        init_encoder({}, 3, EncoderConfig(depth=3), np.random.default_rng(0))
