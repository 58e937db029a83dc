import time

import numpy as np
import pytest

from smecredit import autodiff as ad
from smecredit.fusion import (Adam, History, LoanData, ModelSpec, SpecError, TrainingDiverged, assemble, attend,
                              bce_loss, cross_attention, init_attention, predict, train)
from smecredit.metrics import auc

import oracles
from toys import VARIANTS, full_loss_error, toy_inputs, variant_spec


def test_bce_hand_values():
    assert bce_loss(np.array([0.5]), np.array([1.0])).item() == pytest.approx(0.693147, abs=1e-6)
    assert bce_loss(np.array([0.9, 0.2]), np.array([1.0, 0.0])).item() == pytest.approx(0.164252, abs=1e-6)


def test_bce_clamps_extremes():
    v = bce_loss(np.array([0.0, 1.0]), np.array([1.0, 0.0])).item()
    assert np.isfinite(v) and v == pytest.approx(-np.log(1e-7), rel=1e-6)


def test_bce_matches_oracle_and_rejects_mismatch():
    rng = np.random.default_rng(0)
    for _ in range(50):
        p = rng.uniform(0, 1, 7)
        yy = (rng.random(7) < 0.5).astype(float)
        assert bce_loss(p, yy).item() == pytest.approx(oracles.bce(p.tolist(), yy.tolist()), abs=1e-12)
    with pytest.raises(ValueError, match="length"):
        bce_loss(np.ones(3) * 0.5, np.ones(2))


def test_cross_attention_matches_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        P = {}
        init_attention(P, "att", 3, 5, 4, rng)
        q, kv = rng.standard_normal((2, 3)), rng.standard_normal((6, 5))
        out = cross_attention(q, kv, ad.detached(P), "att").values
        Q, K, V = q @ P["att.Wq"], kv @ P["att.Wk"], kv @ P["att.Wv"]
        np.testing.assert_allclose(out, oracles.attention(Q.tolist(), K.tolist(), V.tolist()), atol=1e-12)


def test_zero_queries_attend_uniformly():
    rng = np.random.default_rng(2)
    V = rng.standard_normal((5, 3))
    out = attend(np.zeros((2, 4)), rng.standard_normal((5, 4)), V).values
    np.testing.assert_allclose(out, np.tile(V.mean(axis=0), (2, 1)), atol=1e-14)


def test_attend_rejects_zero_key_dim():
    with pytest.raises(ValueError):
        attend(np.zeros((2, 0)), np.zeros((3, 0)), np.zeros((3, 2)))


def test_logistic_regression_has_d_plus_one_zero_params():
    model = assemble(ModelSpec(mode="baseline-lr"), d_tab=7)
    assert model.n_params() == 8
    assert all(np.all(v == 0) for v in model.params.values())


def dense_count(d_in, sizes):
    total = 0
    for d in sizes:
        total += d_in * d + d
        d_in = d
    return total, d_in


def test_parameter_count_closed_form():
    d = 9
    dnn = assemble(ModelSpec(mode="baseline-dnn"), d_tab=d)
    n, last = dense_count(d, (64, 32))
    assert dnn.n_params() == n + last + 1

    spec = ModelSpec(mode="bimodal", gnn="gat", strategy="HybridConcat", heads=2, hidden=16)
    model = assemble(spec, d_tab=d)
    gat = 6 * 2 * 2 * (d * 16 + 2 * 16)          # snapshots x layers x heads
    a, da = dense_count(6 * 16, (32, 16))
    b, db = dense_count(d, (32, 16))
    f, df = dense_count(da + db, (16,))
    assert model.n_params() == gat + a + b + f + df + 1

    spec = ModelSpec(mode="unimodal", gnn="gin", layers=("FT",), hidden=5)
    model = assemble(spec, d_tab=d)
    gin = 6 * (d * 5 + 5 + 5 * 5 + 5 + 1)
    f, df = dense_count(6 * 5, (16,))
    assert model.n_params() == gin + f + df + 1


def test_token_count_must_divide_width():
    with pytest.raises(SpecError, match="network B"):
        assemble(ModelSpec(strategy="HybridConcatAtt", net_a=(8,), net_b=(6, 5), att_tokens=2), d_tab=3)


def test_spec_rejects_unknown_values():
    with pytest.raises(SpecError):
        ModelSpec(strategy="Late").validate()
    with pytest.raises(SpecError, match="unknown model key"):
        ModelSpec.from_dict({"widht": 3})
    with pytest.raises(SpecError):
        ModelSpec.from_dict({"depth": "3"})


def test_spec_roundtrip():
    spec = ModelSpec(gnn="gin", layers=("CO",), fnn=(8, 4), directed=False)
    assert ModelSpec.from_dict(spec.to_dict()) == spec


def test_input_dimension_mismatch_is_reported():
    x, _ = toy_inputs(d=3)
    model = assemble(variant_spec("bimodal", "gat", "HybridConcat"), d_tab=5)
    with pytest.raises(SpecError, match="features"):
        model.check_inputs(x)


def test_attended_shapes_and_directions():
    x, _ = toy_inputs()
    spec = variant_spec("bimodal", "gat", "HybridConcatAtt")
    parts = assemble(spec, d_tab=3).attended(x)
    assert parts["R_N"].shape == (4, 2, 2) and parts["R_T"].shape == (4, 2, 2)
    spec = variant_spec("bimodal", "gat", "SimpleConcatAtt", att_direction="tab_query")
    parts = assemble(spec, d_tab=3).attended(x)
    assert set(parts) == {"R_N"}


def tabular_data(n=400, d=4, seed=0, separable=True):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    y = (X[:, 0] + 0.5 * X[:, 1] > 0.3).astype(float) if separable else (rng.random(n) < 0.3).astype(float)
    return LoanData(X, y, np.zeros(n, np.int64), {}, np.full(n, -1), np.arange(n))


def test_logistic_regression_learns_separable_toy():
    data = tabular_data()
    model = assemble(ModelSpec(mode="baseline-lr", lr=0.1, epochs=60, batch_size=64), d_tab=4)
    train(model, data, np.arange(300), np.arange(300, 400))
    assert auc(predict(model, data, np.arange(300, 400)), data.labels[300:]) > 0.99


def test_zero_learning_rate_leaves_params():
    data = tabular_data()
    model = assemble(ModelSpec(mode="baseline-dnn", lr=0.0, epochs=2), d_tab=4)
    before = {k: v.copy() for k, v in model.params.items()}
    train(model, data, np.arange(300), np.arange(300, 400))
    assert all(np.array_equal(before[k], model.params[k]) for k in before)


def test_training_is_deterministic():
    data = tabular_data(separable=False)
    runs = []
    for _ in range(2):
        model = assemble(ModelSpec(mode="baseline-dnn", epochs=3, dropout=0.3, seed=5), d_tab=4)
        h = train(model, data, np.arange(300), np.arange(300, 400))
        runs.append((h.to_csv(), model.params))
    assert runs[0][0] == runs[1][0]
    assert all(np.array_equal(runs[0][1][k], runs[1][1][k]) for k in runs[0][1])


def test_early_stopping_restores_best():
    data = tabular_data(separable=False)
    model = assemble(ModelSpec(mode="baseline-dnn", epochs=30, patience=2, lr=0.05), d_tab=4)
    h = train(model, data, np.arange(300), np.arange(300, 400))
    assert len(h.epoch) <= 30
    assert h.best_epoch == h.epoch[int(np.argmax(h.val_auc))]
    assert auc(predict(model, data, np.arange(300, 400)), data.labels[300:]) == pytest.approx(max(h.val_auc))


def test_divergence_is_reported():
    data = tabular_data()
    data.features[5, 0] = np.nan
    model = assemble(ModelSpec(mode="baseline-lr", epochs=2), d_tab=4)
    with pytest.raises(TrainingDiverged, match="epoch 1"):
        train(model, data, np.arange(300), np.arange(300, 400))


def test_adam_single_step():
    P = {"w": np.array([1.0, -1.0])}
    Adam(lr=0.1).step(P, {"w": np.array([2.0, -3.0])})
    np.testing.assert_allclose(P["w"], [0.9, -0.9], atol=1e-7)


def test_history_csv_header():
    h = History([1], [0.5], [0.75], 1)
    assert h.to_csv() == "epoch,train_loss,val_auc\n1,0.5,0.75\n"


def test_dropout_off_at_inference():
    x, _ = toy_inputs()
    model = assemble(variant_spec("bimodal", "gat", "HybridConcatAtt", dropout=0.5), d_tab=3)
    P = ad.detached(model.params)
    a = model.forward(P, x).values
    b = model.forward(P, x).values
    assert np.array_equal(a, b)
    c = model.forward(P, x, train=True, rng=np.random.default_rng(0)).values
    assert not np.array_equal(a, c)


def test_every_variant_passes_grad_check_within_budget():
    x, y = toy_inputs()
    t = time.perf_counter()
    errors = {}
    for mode, gnn, strategy in VARIANTS:
        model = assemble(variant_spec(mode, gnn, strategy), d_tab=3)
        if mode == "baseline-lr":
            model.params["out.W"] = np.random.default_rng(0).standard_normal((3, 1))
        errors[(mode, gnn, strategy)] = full_loss_error(model, x, y)
    assert time.perf_counter() - t < 60
    assert max(errors.values()) < 1e-3, errors
