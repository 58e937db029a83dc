"""Unimodal, bimodal and tabular-baseline models plus the training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from typing import Iterator

import numpy as np
import pandas as pd

from . import autodiff as ad
from .autodiff import Tensor
from .gnn import EncoderConfig, GatConfig, GinConfig, GraphBatch, SnapshotIndex, encode_snapshots, \
    glorot, init_encoder
from .graphs import CO, FT, TAU, LayerKind, build_snapshots
from .metrics import auc

log = logging.getLogger(__name__)

MODES = ("unimodal", "bimodal", "baseline-lr", "baseline-dnn")
STRATEGIES = ("SimpleConcat", "SimpleConcatAtt", "HybridConcat", "HybridConcatAtt")
ATTENTION_STRATEGIES = ("SimpleConcatAtt", "HybridConcatAtt")
CLAMP = 1e-7


class SpecError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


def _sizes(text) -> tuple[int, ...]:
    if isinstance(text, (tuple, list)):
        return tuple(int(x) for x in text)
    text = str(text).strip()
    return tuple(int(x) for x in text.split(",") if x.strip()) if text else ()


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass
class ModelSpec:
    """Everything needed to build and train one model. All fields have defaults."""

    mode: str = "bimodal"
    gnn: str = "gat"
    strategy: str = "HybridConcatAtt"
    layers: tuple[str, ...] = (FT, CO)
    directed: bool = True
    weighted: bool = True
    depth: int = 1
    heads: int = 2
    hidden: int = 16
    gin_eps: float = 0.0
    learn_eps: bool = True
    share_gnn: bool = False
    net_a: tuple[int, ...] = (32, 16)
    net_b: tuple[int, ...] = (32, 16)
    fnn: tuple[int, ...] = (16,)
    dnn: tuple[int, ...] = (64, 32)
    att_dim: int = 8
    att_tokens: int = 4
    att_direction: str = "both"
    lr: float = 0.005
    l2: float = 0.0
    dropout: float = 0.1
    epochs: int = 100
    batch_size: int = 256
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        self.layers = tuple(self.layers.split(",")) if isinstance(self.layers, str) else tuple(self.layers)
        for name in ("net_a", "net_b", "fnn", "dnn"):
            setattr(self, name, _sizes(getattr(self, name)))

    @classmethod
    def from_dict(cls, values: dict) -> "ModelSpec":
        known = {f.name: f for f in fields(cls)}
        kw = {}
        for key, raw in values.items():
            if key not in known:
                raise SpecError(f"unknown model key {key!r}")
            default = known[key].default
            try:
                if isinstance(default, bool):
                    kw[key] = _bool(raw)
                elif isinstance(default, int):
                    kw[key] = int(raw)
                elif isinstance(default, float):
                    kw[key] = float(raw)
                else:
                    kw[key] = raw
            except ValueError as exc:
                raise SpecError(f"bad value for {key}: {exc}") from None
        spec = cls(**kw)
        spec.validate()
        return spec

    def to_dict(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            out[f.name] = str(v)
        return out

    @property
    def uses_graph(self) -> bool:
        return self.mode in ("unimodal", "bimodal")

    @property
    def uses_tabular(self) -> bool:
        return self.mode != "unimodal"

    def layer_kinds(self) -> tuple[LayerKind, ...]:
        return tuple(LayerKind(t, directed=self.directed and t == FT, weighted=self.weighted and t == FT)
                     for t in self.layers)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise SpecError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.strategy not in STRATEGIES:
            raise SpecError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.gnn not in ("gat", "gin"):
            raise SpecError(f"gnn must be gat or gin, got {self.gnn!r}")
        if not self.layers or any(t not in (FT, CO) for t in self.layers) or len(set(self.layers)) != len(self.layers):
            raise SpecError(f"layers must be FT, CO or FT,CO; got {','.join(self.layers)}")
        if self.depth not in (1, 2):
            raise SpecError(f"depth must be 1 or 2, got {self.depth}")
        if self.att_direction not in ("both", "net_query", "tab_query"):
            raise SpecError(f"att_direction must be both, net_query or tab_query; got {self.att_direction!r}")
        if self.att_dim <= 0:
            raise SpecError("att_dim must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise SpecError("dropout must be in [0, 1)")
        if self.mode == "bimodal" and (not self.net_a or not self.net_b):
            raise SpecError("bimodal models need non-empty net_a and net_b")
        if self.gnn == "gin" and self.mode in ("unimodal", "bimodal") and self.hidden <= 0:
            raise SpecError("GIN needs a hidden layer")

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(kind=self.gnn, depth=self.depth, layers=self.layers,
                             gat=GatConfig(heads=self.heads, hidden=self.hidden, dropout=self.dropout),
                             gin=GinConfig(hidden=self.hidden, eps=self.gin_eps, learn_eps=self.learn_eps,
                                           dropout=self.dropout),
                             share_params=self.share_gnn)


# ---------------------------------------------------------------- building blocks


def init_dense(params: dict, prefix: str, sizes: tuple[int, ...], d_in: int, rng) -> int:
    for k, d_out in enumerate(sizes):
        params[f"{prefix}.W{k}"] = glorot(rng, d_in, d_out)
        params[f"{prefix}.b{k}"] = np.zeros(d_out)
        d_in = d_out
    return d_in


def dense_stack(x: Tensor, P: dict, prefix: str, n: int, dropout: float, train: bool, rng) -> Tensor:
    """ReLU layers, each followed by dropout."""
    for k in range(n):
        x = ad.relu(ad.matmul(x, P[f"{prefix}.W{k}"]) + P[f"{prefix}.b{k}"])
        x = ad.dropout(x, dropout, train, rng)
    return x


def attend(Q: Tensor, K: Tensor, V: Tensor) -> Tensor:
    """``softmax(Q K^T / sqrt(d_k)) V`` over the last two axes."""
    Q, K, V = ad.as_tensor(Q), ad.as_tensor(K), ad.as_tensor(V)
    d_k = K.shape[-1]
    if d_k == 0:
        raise ValueError("key dimension must be positive")
    scores = ad.scale(ad.matmul(Q, ad.transpose(K)), 1.0 / np.sqrt(d_k))
    return ad.matmul(ad.softmax_rows(scores), V)


def init_attention(params: dict, prefix: str, d_query: int, d_kv: int, d_k: int, rng) -> None:
    params[f"{prefix}.Wq"] = glorot(rng, d_query, d_k)
    params[f"{prefix}.Wk"] = glorot(rng, d_kv, d_k)
    params[f"{prefix}.Wv"] = glorot(rng, d_kv, d_k)


def cross_attention(query_tokens, kv_tokens, P: dict, prefix: str) -> Tensor:
    """Project queries from one source and keys/values from the other, then attend."""
    Q = ad.matmul(query_tokens, P[f"{prefix}.Wq"])
    K = ad.matmul(kv_tokens, P[f"{prefix}.Wk"])
    V = ad.matmul(kv_tokens, P[f"{prefix}.Wv"])
    return attend(Q, K, V)


def bce_loss(pred, labels) -> Tensor:
    """Mean binary cross-entropy on probabilities clamped to ``[1e-7, 1 - 1e-7]``."""
    pred = ad.as_tensor(pred)
    y = np.asarray(labels, dtype=float)
    if pred.shape != y.shape:
        raise ValueError(f"bce_loss: predictions {pred.shape} and labels {y.shape} differ in length")
    p = ad.clip(pred, CLAMP, 1.0 - CLAMP)
    ll = ad.log(p) * y + ad.log(1.0 - p) * (1.0 - y)
    return ad.scale(ad.total(ll), -1.0 / max(len(y), 1))


# ---------------------------------------------------------------- model


@dataclass
class Inputs:
    tab: np.ndarray | None
    graph: GraphBatch | None

    @property
    def n(self) -> int:
        return self.tab.shape[0] if self.tab is not None else self.graph.n_targets


@dataclass
class Model:
    spec: ModelSpec
    d_tab: int
    d_node: int
    params: dict[str, np.ndarray] = field(default_factory=dict)

    # -- assembly

    def __post_init__(self):
        if not self.params:
            self.params = self.init_params(np.random.default_rng(self.spec.seed))

    def init_params(self, rng) -> dict[str, np.ndarray]:
        s = self.spec
        s.validate()
        P: dict[str, np.ndarray] = {}
        if s.mode == "baseline-lr":
            P["out.W"] = np.zeros((self.d_tab, 1))
            P["out.b"] = np.zeros(1)
            return P
        if s.mode == "baseline-dnn":
            d = init_dense(P, "dnn", s.dnn, self.d_tab, rng)
            P["out.W"] = glorot(rng, d, 1)
            P["out.b"] = np.zeros(1)
            return P
        enc = s.encoder_config()
        init_encoder(P, self.d_node, enc, rng)
        e = enc.out_dim
        if s.mode == "unimodal":
            d = init_dense(P, "fnn", s.fnn, TAU * e, rng)
        else:
            d_b = init_dense(P, "B", s.net_b, self.d_tab, rng)
            if s.strategy.startswith("Simple"):
                for t in range(TAU):
                    d_a = init_dense(P, f"A{t}", s.net_a, e, rng)
                n_net_tokens, d_net_tok = TAU, d_a
            else:
                d_a = init_dense(P, "A", s.net_a, TAU * e, rng)
                n_net_tokens, d_net_tok = s.att_tokens, self._token_dim(d_a, "network A")
            if s.strategy in ATTENTION_STRATEGIES:
                d_tab_tok = self._token_dim(d_b, "network B")
                d_fused = 0
                if s.att_direction in ("both", "tab_query"):
                    init_attention(P, "att_tq", d_tab_tok, d_net_tok, s.att_dim, rng)
                    d_fused += s.att_tokens * s.att_dim
                if s.att_direction in ("both", "net_query"):
                    init_attention(P, "att_nq", d_net_tok, d_tab_tok, s.att_dim, rng)
                    d_fused += n_net_tokens * s.att_dim
            else:
                d_fused = (TAU * d_a if s.strategy == "SimpleConcat" else d_a) + d_b
            d = init_dense(P, "fnn", s.fnn, d_fused, rng)
        P["out.W"] = glorot(rng, d, 1)
        P["out.b"] = np.zeros(1)
        return P

    def _token_dim(self, d: int, where: str) -> int:
        L = self.spec.att_tokens
        if L <= 0 or d % L:
            raise SpecError(f"{where} output (dim {d}) -> attention tokens: {L} tokens do not divide it")
        return d // L

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    # -- forward

    def check_inputs(self, x: Inputs) -> None:
        s = self.spec
        if s.uses_tabular and (x.tab is None or x.tab.shape[1] != self.d_tab):
            got = None if x.tab is None else x.tab.shape[1]
            raise SpecError(f"tabular input has {got} features, model expects {self.d_tab}")
        if s.uses_graph:
            if x.graph is None or x.graph.features.shape[1] != self.d_node:
                got = None if x.graph is None else x.graph.features.shape[1]
                raise SpecError(f"node features have dim {got}, model expects {self.d_node}")
            if s.uses_tabular and x.graph.n_targets != x.tab.shape[0]:
                raise SpecError("graph targets and tabular rows differ in count")

    def embeddings(self, P: dict, x: Inputs, train=False, rng=None) -> list[Tensor]:
        return encode_snapshots(x.graph, P, self.spec.encoder_config(), train, rng)

    def fused(self, P: dict, x: Inputs, train=False, rng=None, parts: dict | None = None,
              embs: list[Tensor] | None = None) -> Tensor:
        """Representation fed to the output unit.

        ``parts`` collects the attended outputs; ``embs`` replaces the GNN
        snapshot embeddings (used to freeze the network channel).
        """
        s = self.spec
        drop = s.dropout
        if s.mode == "baseline-lr":
            return Tensor(x.tab)
        if s.mode == "baseline-dnn":
            return dense_stack(Tensor(x.tab), P, "dnn", len(s.dnn), drop, train, rng)
        if embs is None:
            embs = self.embeddings(P, x, train, rng)
        if s.mode == "unimodal":
            return dense_stack(ad.concat_cols(embs), P, "fnn", len(s.fnn), drop, train, rng)
        b = dense_stack(Tensor(x.tab), P, "B", len(s.net_b), drop, train, rng)
        n = b.shape[0]
        if s.strategy.startswith("Simple"):
            a_parts = [dense_stack(e, P, f"A{t}", len(s.net_a), drop, train, rng) for t, e in enumerate(embs)]
        else:
            a = dense_stack(ad.concat_cols(embs), P, "A", len(s.net_a), drop, train, rng)
        if s.strategy == "SimpleConcat":
            z = ad.concat_cols(a_parts + [b])
        elif s.strategy == "HybridConcat":
            z = ad.concat_cols([a, b])
        else:
            L = s.att_tokens
            if s.strategy == "SimpleConcatAtt":
                net_tok = ad.reshape(ad.concat_cols(a_parts), (n, TAU, -1))
            else:
                net_tok = ad.reshape(a, (n, L, -1))
            tab_tok = ad.reshape(b, (n, L, -1))
            outs = []
            if s.att_direction in ("both", "tab_query"):
                r_n = cross_attention(tab_tok, net_tok, P, "att_tq")
                outs.append(ad.reshape(r_n, (n, -1)))
                if parts is not None:
                    parts["R_N"] = r_n
            if s.att_direction in ("both", "net_query"):
                r_t = cross_attention(net_tok, tab_tok, P, "att_nq")
                outs.append(ad.reshape(r_t, (n, -1)))
                if parts is not None:
                    parts["R_T"] = r_t
            z = ad.concat_cols(outs) if len(outs) > 1 else outs[0]
        return dense_stack(z, P, "fnn", len(s.fnn), drop, train, rng)

    def forward(self, P: dict, x: Inputs, train=False, rng=None, embs=None) -> Tensor:
        z = self.fused(P, x, train, rng, embs=embs)
        logit = ad.matmul(z, P["out.W"]) + P["out.b"]
        return ad.sigmoid(ad.reshape(logit, (-1,)))

    def loss(self, P: dict, x: Inputs, y, train=False, rng=None) -> Tensor:
        loss = bce_loss(self.forward(P, x, train, rng), y)
        if self.spec.l2 > 0:
            for name, p in P.items():
                if ".W" in name:
                    loss = loss + ad.scale(ad.total(p * p), 0.5 * self.spec.l2)
        return loss

    def attended(self, x: Inputs) -> dict[str, np.ndarray]:
        parts: dict = {}
        self.fused(ad.detached(self.params), x, parts=parts)
        return {k: v.values for k, v in parts.items()}


def assemble(spec: ModelSpec, d_tab: int, d_node: int | None = None) -> Model:
    spec.validate()
    return Model(spec, d_tab, d_tab if d_node is None else d_node)


# ---------------------------------------------------------------- data


@dataclass
class LoanData:
    """Scaled features for every loan plus per-cohort graph indices.

    Rows of ``features`` follow the loans table. ``node`` maps a loan row to
    its node id inside its own cohort's snapshot set.
    """

    features: np.ndarray
    labels: np.ndarray
    months: np.ndarray
    cohorts: dict[int, SnapshotIndex]
    node: np.ndarray
    loan_ids: np.ndarray

    @property
    def d(self) -> int:
        return self.features.shape[1]


def build_loan_data(loans: pd.DataFrame, features: np.ndarray, transactions, ownerships,
                    layers: tuple[LayerKind, ...] | None, months=None) -> LoanData:
    """Build snapshot sets for every cohort in ``months`` (default: all months present)."""
    months_all = loans["origination_month"].to_numpy()
    if months_all.dtype.kind not in "iu":
        from .months import parse_months
        months_all = parse_months(months_all)
    row_of = {lid: k for k, lid in enumerate(loans["loan_id"].tolist())}
    node = np.full(len(loans), -1, dtype=np.int64)
    cohorts: dict[int, SnapshotIndex] = {}
    if layers:
        base = loans[["loan_id", "company_id"]].assign(origination_month=months_all)
        wanted = sorted(set(months_all.tolist()) if months is None else set(int(m) for m in months))
        for c in wanted:
            if not np.any(months_all == c):
                continue
            sset = build_snapshots(base, transactions, ownerships, c, layers)
            rows = np.array([row_of[l] for l in sset.loan_ids], dtype=np.int64)
            cohorts[c] = SnapshotIndex(sset, rows)
            tgt = sset.targets
            node[rows[tgt]] = tgt
    return LoanData(np.asarray(features, dtype=float), loans["default"].to_numpy().astype(float),
                    months_all, cohorts, node, loans["loan_id"].to_numpy())


def iter_batches(model: Model, data: LoanData, rows: np.ndarray, batch_size: int,
                 rng: np.random.Generator | None = None) -> Iterator[tuple[np.ndarray, Inputs]]:
    """Batches never mix cohorts; with ``rng`` both batch order and membership are shuffled."""
    rows = np.asarray(rows, dtype=np.int64)
    spec = model.spec
    if not spec.uses_graph:
        order = rng.permutation(len(rows)) if rng is not None else np.arange(len(rows))
        for k in range(0, len(rows), batch_size):
            r = rows[order[k:k + batch_size]]
            yield r, Inputs(data.features[r], None)
        return
    chunks = []
    for c in sorted(set(data.months[rows].tolist())):
        r = rows[data.months[rows] == c]
        if rng is not None:
            r = r[rng.permutation(len(r))]
        for k in range(0, len(r), batch_size):
            chunks.append((c, r[k:k + batch_size]))
    order = rng.permutation(len(chunks)) if rng is not None else range(len(chunks))
    for i in order:
        c, r = chunks[i]
        if c not in data.cohorts:
            raise SpecError(f"no snapshot set built for cohort month {c}")
        gb = data.cohorts[c].batch(data.features, data.node[r], spec.depth)
        yield r, Inputs(data.features[r] if spec.uses_tabular else None, gb)


def predict(model: Model, data: LoanData, rows, batch_size: int = 1024) -> np.ndarray:
    """Default probability per row of ``rows``, in the given order, dropout off."""
    rows = np.asarray(rows, dtype=np.int64)
    out = np.empty(len(rows))
    pos = {int(r): k for k, r in enumerate(rows)}
    P = ad.detached(model.params)
    for r, x in iter_batches(model, data, rows, batch_size):
        model.check_inputs(x)
        out[[pos[int(i)] for i in r]] = model.forward(P, x).values
    return out


# ---------------------------------------------------------------- training


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for k, g in grads.items():
            m = self.m.get(k, 0.0) * self.beta1 + (1 - self.beta1) * g
            v = self.v.get(k, 0.0) * self.beta2 + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            mh = m / (1 - self.beta1 ** self.t)
            vh = v / (1 - self.beta2 ** self.t)
            params[k] = params[k] - self.lr * mh / (np.sqrt(vh) + self.eps)


@dataclass
class History:
    epoch: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_auc: list[float] = field(default_factory=list)
    best_epoch: int = 0

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_auc"]
        lines += [f"{e},{l:.10g},{a:.10g}" for e, l, a in zip(self.epoch, self.train_loss, self.val_auc)]
        return "\n".join(lines) + "\n"


def train_step(model: Model, x: Inputs, y: np.ndarray, opt: Adam, rng) -> float:
    tape = ad.Tape()
    W = ad.watch_all(tape, model.params)
    loss = model.loss(W, x, y, train=True, rng=rng)
    grads = ad.leaf_grads(ad.backward(loss), W)
    value = float(loss.values)
    if np.isfinite(value):
        opt.step(model.params, grads)
    return value


def train(model: Model, data: LoanData, train_rows, val_rows, epochs: int | None = None) -> History:
    """Adam on mini-batches with early stopping on validation AUC.

    The model keeps the best-validation parameters. Deterministic for a
    fixed ``spec.seed``.
    """
    s = model.spec
    epochs = s.epochs if epochs is None else epochs
    train_rows = np.asarray(train_rows, dtype=np.int64)
    val_rows = np.asarray(val_rows, dtype=np.int64)
    shuffle_rng = np.random.default_rng([s.seed, 1])
    drop_rng = np.random.default_rng([s.seed, 2])
    opt = Adam(s.lr)
    hist = History()
    best = (-np.inf, {k: v.copy() for k, v in model.params.items()})
    stale = 0
    y_val = data.labels[val_rows]
    for epoch in range(1, epochs + 1):
        losses, sizes = [], []
        for r, x in iter_batches(model, data, train_rows, s.batch_size, shuffle_rng):
            value = train_step(model, x, data.labels[r], opt, drop_rng)
            if not np.isfinite(value):
                last = hist.epoch[-1] if hist.epoch else 0
                raise TrainingDiverged(f"non-finite loss in epoch {epoch}; last finite epoch {last}")
            losses.append(value)
            sizes.append(len(r))
        val = auc(predict(model, data, val_rows), y_val) if len(np.unique(y_val)) == 2 else float("nan")
        hist.epoch.append(epoch)
        hist.train_loss.append(float(np.average(losses, weights=sizes)))
        hist.val_auc.append(val)
        log.debug("epoch %d loss %.5f val_auc %.4f", epoch, hist.train_loss[-1], val)
        if val > best[0]:
            best = (val, {k: v.copy() for k, v in model.params.items()})
            hist.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= s.patience:
                break
    if hist.best_epoch:
        model.params = best[1]
    return hist
