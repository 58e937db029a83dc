import itertools

import numpy as np
import pandas as pd
import pytest

from smecredit.graphs import (CO, FT, EmptyCohortError, LayerKind, build_snapshots, export_edges, ft_edge_weight,
                              neighbors, read_ownerships, read_transactions, supra_adjacency, write_ownerships,
                              write_transactions)
from smecredit.months import format_month, parse_month

FT_DW = LayerKind(FT, directed=True, weighted=True)
FT_U = LayerKind(FT)
CO_L = LayerKind(CO)


def loans_table(rows):
    return pd.DataFrame(rows, columns=["loan_id", "company_id", "origination_month"])


def test_month_parsing_roundtrip():
    assert format_month(parse_month("2019-07")) == "2019-07"
    assert parse_month("2019-07") - parse_month("2019-01") == 6
    with pytest.raises(ValueError):
        parse_month("2019-13")


def test_neighbour_loan_lands_in_first_snapshot_only():
    loans = loans_table([("T", "a", "2019-07"), ("N", "b", "2019-01")])
    tx = pd.DataFrame({"src_company": ["b"], "dst_company": ["a"], "month": ["2019-03"], "amount": [100.0]})
    sset = build_snapshots(loans, tx, None, "2019-07", [FT_DW])
    counts = [len(sset.snapshot(s).edges.get(FT, ())) for s in range(1, 7)]
    assert counts == [1, 0, 0, 0, 0, 0]
    assert sset.snapshot(1).month == parse_month("2019-01")
    e = sset.snapshot(1).edges[FT]
    assert sset.loan_ids[e.src[0]] == "N" and sset.loan_ids[e.dst[0]] == "T"  # payer -> payee


def test_no_relations_gives_six_empty_snapshots():
    loans = loans_table([("T1", "a", "2019-07"), ("T2", "b", "2019-07")])
    sset = build_snapshots(loans, None, None, "2019-07", [FT_DW, CO_L])
    assert len(sset.snapshots) == 6 and sset.n_nodes == 2 and sset.target_mask.all()
    assert all(len(ea) == 0 for snap in sset.snapshots for ea in snap.edges.values())


def test_empty_cohort_is_an_error():
    with pytest.raises(EmptyCohortError):
        build_snapshots(loans_table([("N", "b", "2019-01")]), None, None, "2019-07", [FT_U])


def random_world(rng, n_comp=8, months=range(10, 22)):
    rows = [(f"L{k}", f"c{int(rng.integers(n_comp))}", int(rng.choice(list(months)))) for k in range(30)]
    loans = loans_table(rows).drop_duplicates("loan_id")
    tx = pd.DataFrame({"src_company": [f"c{int(i)}" for i in rng.integers(0, n_comp, 25)],
                       "dst_company": [f"c{int(i)}" for i in rng.integers(0, n_comp, 25)],
                       "month": rng.integers(10, 22, 25), "amount": rng.uniform(0, 500, 25)})
    own = pd.DataFrame({"company_a": [f"c{int(i)}" for i in rng.integers(0, n_comp, 6)],
                        "company_b": [f"c{int(i)}" for i in rng.integers(0, n_comp, 6)],
                        "month": rng.integers(10, 22, 6)})
    return loans, tx, own


def brute_force_edges(loans, tx, own, c, directed):
    """Exhaustive pairing of every target loan with every neighbour loan."""
    found = set()
    targets = loans[loans.origination_month == c]
    hist = loans[(loans.origination_month >= c - 6) & (loans.origination_month <= c - 1)]
    win_tx = tx[(tx.month >= c - 6) & (tx.month <= c - 1) & (tx.src_company != tx.dst_company)]
    win_own = own[(own.month >= c - 6) & (own.month <= c - 1) & (own.company_a != own.company_b)]
    for (_, t), (_, u) in itertools.product(targets.iterrows(), hist.iterrows()):
        s = int(u.origination_month - c + 7)
        for _, r in win_tx.iterrows():
            if r.src_company == u.company_id and r.dst_company == t.company_id:
                found.add((s, FT, u.loan_id, t.loan_id) if directed else (s, FT, *sorted((u.loan_id, t.loan_id))))
            if r.src_company == t.company_id and r.dst_company == u.company_id:
                found.add((s, FT, t.loan_id, u.loan_id) if directed else (s, FT, *sorted((u.loan_id, t.loan_id))))
        for _, r in win_own.iterrows():
            if {r.company_a, r.company_b} == {t.company_id, u.company_id}:
                found.add((s, CO, *sorted((u.loan_id, t.loan_id))))
    return found


@pytest.mark.parametrize("directed", [True, False])
def test_edges_match_exhaustive_pairing(directed):
    rng = np.random.default_rng(0)
    for _ in range(10):
        loans, tx, own = random_world(rng)
        c = 18
        if not (loans.origination_month == c).any():
            continue
        ft = LayerKind(FT, directed=directed, weighted=False)
        sset = build_snapshots(loans, tx, own, c, [ft, CO_L])
        got = set()
        for s, e in sset.edges():
            a, b = sset.loan_ids[e.src], sset.loan_ids[e.dst]
            got.add((s, e.layer, a, b) if (directed and e.layer == FT) else (s, e.layer, *sorted((a, b))))
        assert got == brute_force_edges(loans, tx, own, c, directed)
        # never target-target
        for _, e in sset.edges():
            assert not (sset.target_mask[e.src] and sset.target_mask[e.dst])


def test_two_target_loans_share_a_neighbour():
    loans = loans_table([("T1", "a", 20), ("T2", "a", 20), ("N", "b", 19)])
    own = pd.DataFrame({"company_a": ["a"], "company_b": ["b"], "month": [15]})
    sset = build_snapshots(loans, None, own, 20, [CO_L])
    e = sset.snapshot(6).edges[CO]
    assert len(e) == 2
    assert {sset.loan_ids[i] for i in e.src} | {sset.loan_ids[i] for i in e.dst} == {"T1", "T2", "N"}


def test_unknown_companies_are_skipped_and_counted():
    loans = loans_table([("T", "a", 20), ("N", "b", 18)])
    tx = pd.DataFrame({"src_company": ["b", "zz"], "dst_company": ["a", "a"], "month": [17, 17],
                       "amount": [10.0, 10.0]})
    sset = build_snapshots(loans, tx, None, 20, [FT_DW])
    assert sset.skipped_relations == 1
    assert sum(len(s.edges[FT]) for s in sset.snapshots) == 1


def test_ft_edge_weight_examples():
    assert ft_edge_weight([100, 300]) == pytest.approx(np.log(201), abs=1e-12)
    assert ft_edge_weight([100, 300]) == pytest.approx(5.3033, abs=1e-4)
    assert ft_edge_weight([0]) is None
    assert ft_edge_weight([]) is None
    assert ft_edge_weight([5, 7], weighted=False) == 1.0
    with pytest.raises(ValueError):
        ft_edge_weight([-1])


def test_weighted_edges_use_mean_amount():
    loans = loans_table([("T", "a", 20), ("N", "b", 18)])
    tx = pd.DataFrame({"src_company": ["b", "b"], "dst_company": ["a", "a"], "month": [15, 16],
                       "amount": [100.0, 300.0]})
    sset = build_snapshots(loans, tx, None, 20, [FT_DW])
    assert sset.snapshot(5).edges[FT].weight[0] == pytest.approx(np.log(201))
    sset = build_snapshots(loans, tx.assign(amount=0.0), None, 20, [FT_DW])
    assert sum(len(s.edges[FT]) for s in sset.snapshots) == 0


def test_co_layer_rejects_direction():
    with pytest.raises(ValueError):
        LayerKind(CO, directed=True)


def small_sset(directed=True, weighted=True):
    loans = loans_table([("T1", "a", 20), ("T2", "b", 20), ("N1", "c", 18), ("N2", "d", 18)])
    tx = pd.DataFrame({"src_company": ["c", "a", "d"], "dst_company": ["a", "d", "b"],
                       "month": [15, 16, 17], "amount": [50.0, 80.0, 20.0]})
    own = pd.DataFrame({"company_a": ["b"], "company_b": ["c"], "month": [15]})
    return build_snapshots(loans, tx, own, 20, [LayerKind(FT, directed, weighted), CO_L])


def test_supra_adjacency_smallest_case():
    loans = loans_table([("T", "a", 20)])
    sset = build_snapshots(loans, None, None, 20, [FT_U, CO_L])
    np.testing.assert_array_equal(supra_adjacency(sset, 1), [[0, 1], [1, 0]])


def test_supra_adjacency_blocks():
    sset = small_sset()
    A = supra_adjacency(sset, 5)
    n = sset.n_nodes
    ft = sset.snapshot(5).edges[FT]
    for s, d, w in zip(ft.src, ft.dst, ft.weight):
        assert A[s, d] == w and A[d, s] == 0
    np.testing.assert_array_equal(A[:n, n:], np.eye(n))
    co = A[n:, n:]
    np.testing.assert_array_equal(co, co.T)
    with pytest.raises(ValueError, match="limit"):
        supra_adjacency(sset, 5, max_size=3)


def test_undirected_supra_is_symmetric_and_permutation_consistent():
    sset = small_sset(directed=False, weighted=False)
    A = supra_adjacency(sset, 5)
    np.testing.assert_array_equal(A, A.T)
    assert np.all(np.diag(A) == 0)
    # rebuild with shuffled loan ids; matrices agree up to the induced permutation
    loans = loans_table([("T2", "b", 20), ("T1", "a", 20), ("N2", "d", 18), ("N1", "c", 18)])
    tx = pd.DataFrame({"src_company": ["c", "a", "d"], "dst_company": ["a", "d", "b"],
                       "month": [15, 16, 17], "amount": [50.0, 80.0, 20.0]})
    own = pd.DataFrame({"company_a": ["b"], "company_b": ["c"], "month": [15]})
    other = build_snapshots(loans, tx, own, 20, [FT_U, CO_L])
    perm = [other.node_index[l] for l in sset.loan_ids]
    B = supra_adjacency(other, 5)
    n = sset.n_nodes
    full = np.r_[perm, np.asarray(perm) + n]
    np.testing.assert_array_equal(B[np.ix_(full, full)], A)


def test_neighbors_directions():
    sset = small_sset()
    t1, n1, n2, t2 = (sset.node_index[k] for k in ("T1", "N1", "N2", "T2"))
    assert neighbors(sset, 5, FT, t1, "in") == [(n1, pytest.approx(np.log(51)))]
    assert neighbors(sset, 5, FT, t1, "out") == [(n2, pytest.approx(np.log(81)))]
    assert neighbors(sset, 5, CO, t2, "in") == neighbors(sset, 5, CO, t2, "out") == [(n1, 1.0)]
    with pytest.raises(IndexError):
        neighbors(sset, 7, FT, t1)


def test_neighbors_match_linear_scan():
    rng = np.random.default_rng(1)
    for _ in range(5):
        loans, tx, own = random_world(rng)
        if not (loans.origination_month == 18).any():
            continue
        sset = build_snapshots(loans, tx, own, 18, [FT_DW, CO_L])
        for s in range(1, 7):
            ea = sset.snapshot(s).edges[FT]
            for v in range(sset.n_nodes):
                inn = sorted({int(a) for a, b in zip(ea.src, ea.dst) if b == v})
                out = sorted({int(b) for a, b in zip(ea.src, ea.dst) if a == v})
                assert [k for k, _ in neighbors(sset, s, FT, v, "in")] == inn
                assert [k for k, _ in neighbors(sset, s, FT, v, "out")] == out


def test_snapshot_partition_by_neighbour_month():
    rng = np.random.default_rng(2)
    loans, tx, own = random_world(rng)
    sset = build_snapshots(loans, tx, own, 18, [FT_DW, CO_L])
    month_of = dict(zip(loans.loan_id, loans.origination_month))
    for s, e in sset.edges():
        nbr = e.src if not sset.target_mask[e.src] else e.dst
        assert month_of[sset.loan_ids[nbr]] == 18 - 7 + s


def test_message_edges_double_undirected():
    sset = small_sset()
    co = sset.snapshot(5).edges[CO]
    msg = sset.message_edges(5, CO)
    assert len(msg) == 2 * len(co)
    assert len(sset.message_edges(5, FT)) == len(sset.snapshot(5).edges[FT])


def test_export_and_file_roundtrip(tmp_path):
    sset = small_sset()
    export_edges(sset, tmp_path / "edges.tsv")
    lines = (tmp_path / "edges.tsv").read_text().splitlines()
    assert len(lines) == sum(1 for _ in sset.edges())
    assert all(len(l.split("\t")) == 5 for l in lines)

    tx = pd.DataFrame({"src_company": ["a"], "dst_company": ["b"], "month": [parse_month("2020-02")],
                       "amount": [12.5]})
    write_transactions(tx, tmp_path / "tx.csv")
    assert (tmp_path / "tx.csv").read_text() == "src_company,dst_company,month,amount\na,b,2020-02,12.50\n"
    back = read_transactions(tmp_path / "tx.csv")
    assert back.month.tolist() == tx.month.tolist() and back.amount.tolist() == [12.5]
    own = pd.DataFrame({"company_a": ["a"], "company_b": ["b"], "month": [parse_month("2020-02")]})
    write_ownerships(own, tmp_path / "own.csv")
    assert read_ownerships(tmp_path / "own.csv").equals(own)
    (tmp_path / "bad.csv").write_text("src_company,dst_company,month,amount\na,b,2020-02,1\na,b,2020-2x,1\n")
    with pytest.raises(ValueError, match="bad.csv:3"):
        read_transactions(tmp_path / "bad.csv")
