"""GAT and GIN message passing over snapshot graphs.

Parameters live in a flat ``dict[str, np.ndarray]``; forward functions take
the same names mapped to :class:`~smecredit.autodiff.Tensor` (watched on a
tape when training, plain otherwise). Edges are given in message form,
``src -> dst`` meaning ``dst`` aggregates from ``src``. Self-edges are
added inside the layers, never stored.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graphs import TAU, EdgeArrays, SnapshotSet


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape if shape is not None else (fan_in, fan_out))


@dataclass
class Adjacency:
    """Message edges of one relation layer over ``n`` nodes."""

    n: int
    src: np.ndarray
    dst: np.ndarray
    weight: np.ndarray
    weighted: bool = False

    @classmethod
    def from_pairs(cls, n: int, pairs: Sequence[tuple[int, int]], weights=None, directed=False,
                   weighted=False) -> "Adjacency":
        src = np.array([p[0] for p in pairs], dtype=np.int64)
        dst = np.array([p[1] for p in pairs], dtype=np.int64)
        w = np.ones(len(pairs)) if weights is None else np.asarray(weights, dtype=float)
        if not directed:
            src, dst, w = np.concatenate([src, dst]), np.concatenate([dst, src]), np.concatenate([w, w])
        return cls(n, src, dst, w, weighted)

    def with_self_loops(self):
        idx = np.arange(self.n, dtype=np.int64)
        return (np.concatenate([self.src, idx]), np.concatenate([self.dst, idx]),
                np.concatenate([self.weight, np.ones(self.n)]))


# ---------------------------------------------------------------- GAT


@dataclass
class GatConfig:
    heads: int = 2
    hidden: int = 16
    slope: float = ad.LEAKY_SLOPE
    dropout: float = 0.0


def init_gat(params: dict, prefix: str, d_in: int, cfg: GatConfig, rng: np.random.Generator) -> None:
    for h in range(cfg.heads):
        params[f"{prefix}.W{h}"] = glorot(rng, d_in, cfg.hidden)
        params[f"{prefix}.a{h}"] = glorot(rng, 2 * cfg.hidden, 1, shape=(2 * cfg.hidden,))


def gat_attention(P: dict[str, Tensor], prefix: str, H: Tensor, adj: Adjacency, head: int,
                  cfg: GatConfig, train: bool = False, rng=None):
    """One attention head. Returns ``(Wh, alpha, src, dst)`` over edges incl. self-loops."""
    W = P[f"{prefix}.W{head}"]
    a = P[f"{prefix}.a{head}"]
    D = W.shape[1]
    Wh = ad.matmul(H, W)
    # a^T [W h_i || W h_j]: first half scores the aggregating node, second half the neighbour
    s_self = ad.matmul(Wh, ad.take_cols(a, 0, D))
    s_nbr = ad.matmul(Wh, ad.take_cols(a, D, 2 * D))
    src, dst, w = adj.with_self_loops()
    logits = ad.leaky_relu(ad.gather_rows(s_self, dst) + ad.gather_rows(s_nbr, src), cfg.slope)
    if adj.weighted:
        # w * exp(logit) renormalised == softmax(logit + ln w)
        logits = logits + np.log(w)
    alpha = ad.segment_softmax(logits, dst, adj.n)
    alpha = ad.dropout(alpha, cfg.dropout, train, rng)
    return Wh, alpha, src, dst


def gat_forward(H: Tensor, adj: Adjacency, P: dict[str, Tensor], prefix: str, cfg: GatConfig,
                combine: str = "average", train: bool = False, rng=None) -> Tensor:
    """``Z_i = sum_j alpha_ij W h_j`` over ``N(i) + {i}``, heads concatenated or averaged."""
    outs = []
    for h in range(cfg.heads):
        Wh, alpha, src, dst = gat_attention(P, prefix, H, adj, h, cfg, train, rng)
        msg = ad.gather_rows(Wh, src) * ad.reshape(alpha, (-1, 1))
        outs.append(ad.segment_sum(msg, dst, adj.n))
    if combine == "concat":
        return ad.concat_cols(outs) if len(outs) > 1 else outs[0]
    if combine != "average":
        raise ValueError(f"unknown head combination {combine!r}")
    acc = outs[0]
    for o in outs[1:]:
        acc = acc + o
    return ad.scale(acc, 1.0 / len(outs)) if len(outs) > 1 else acc


# ---------------------------------------------------------------- GIN


@dataclass
class GinConfig:
    hidden: int = 16
    eps: float = 0.0
    learn_eps: bool = True
    mlp_hidden: int | None = None
    dropout: float = 0.0


def init_gin(params: dict, prefix: str, d_in: int, cfg: GinConfig, rng: np.random.Generator,
             d_out: int | None = None) -> None:
    hid = cfg.mlp_hidden or cfg.hidden
    d_out = d_out or cfg.hidden
    params[f"{prefix}.mlp.W0"] = glorot(rng, d_in, hid)
    params[f"{prefix}.mlp.b0"] = np.zeros(hid)
    params[f"{prefix}.mlp.W1"] = glorot(rng, hid, d_out)
    params[f"{prefix}.mlp.b1"] = np.zeros(d_out)
    if cfg.learn_eps:
        params[f"{prefix}.eps"] = np.array(cfg.eps)


def gin_aggregate(H: Tensor, adj: Adjacency, eps) -> Tensor:
    """``(1 + eps) h_i + sum_j w_ij h_j`` (unit weights unless the layer is weighted)."""
    nbr = ad.gather_rows(H, adj.src)
    if adj.weighted:
        nbr = nbr * adj.weight[:, None]
    agg = ad.segment_sum(nbr, adj.dst, adj.n)
    return H * (ad.as_tensor(eps) + 1.0) + agg


def gin_forward(H: Tensor, adj: Adjacency, P: dict[str, Tensor], prefix: str, cfg: GinConfig,
                train: bool = False, rng=None) -> Tensor:
    eps = P.get(f"{prefix}.eps", Tensor(cfg.eps))
    x = gin_aggregate(H, adj, eps)
    x = ad.relu(ad.matmul(x, P[f"{prefix}.mlp.W0"]) + P[f"{prefix}.mlp.b0"])
    x = ad.dropout(x, cfg.dropout, train, rng)
    return ad.matmul(x, P[f"{prefix}.mlp.W1"]) + P[f"{prefix}.mlp.b1"]


# ---------------------------------------------------------------- snapshot encoders


@dataclass
class GraphBatch:
    """Node features plus per-snapshot, per-layer message edges.

    The first ``n_targets`` rows of ``features`` are the loans being scored.
    """

    features: np.ndarray
    n_targets: int
    snapshots: list[dict[str, Adjacency]]

    @property
    def n_nodes(self) -> int:
        return self.features.shape[0]


@dataclass
class EncoderConfig:
    kind: str = "gat"
    depth: int = 1
    layers: tuple[str, ...] = ("FT",)
    gat: GatConfig = field(default_factory=GatConfig)
    gin: GinConfig = field(default_factory=GinConfig)
    share_params: bool = False
    tau: int = TAU

    @property
    def out_dim(self) -> int:
        return self.gat.hidden if self.kind == "gat" else self.gin.hidden


def _instance(cfg: EncoderConfig, s: int) -> str:
    return "gnn0" if cfg.share_params else f"gnn{s}"


def init_encoder(params: dict, d_in: int, cfg: EncoderConfig, rng: np.random.Generator) -> None:
    if cfg.depth not in (1, 2):
        raise ValueError(f"GNN depth must be 1 or 2, got {cfg.depth}")
    if cfg.kind not in ("gat", "gin"):
        raise ValueError(f"unknown GNN kind {cfg.kind!r}")
    for s in range(1 if cfg.share_params else cfg.tau):
        inst = _instance(cfg, s)
        d = d_in
        for depth in range(cfg.depth):
            for tag in cfg.layers:
                prefix = f"{inst}.l{depth}.{tag}"
                if cfg.kind == "gat":
                    init_gat(params, prefix, d, cfg.gat, rng)
                else:
                    init_gin(params, prefix, d, cfg.gin, rng)
            d = cfg.gat.heads * cfg.gat.hidden if cfg.kind == "gat" else cfg.gin.hidden


def encode_snapshots(batch: GraphBatch, P: dict[str, Tensor], cfg: EncoderConfig,
                     train: bool = False, rng=None) -> list[Tensor]:
    """One embedding matrix (targets x out_dim) per snapshot, each from its own GNN instance.

    With two relation layers each layer gets its own parameters and the
    outputs are summed.
    """
    H0 = Tensor(batch.features)
    out = []
    for s in range(cfg.tau):
        inst = _instance(cfg, s)
        adjs = batch.snapshots[s]
        H = H0
        for depth in range(cfg.depth):
            last = depth == cfg.depth - 1
            parts = []
            for tag in cfg.layers:
                adj = adjs.get(tag) or Adjacency(batch.n_nodes, np.zeros(0, np.int64),
                                                 np.zeros(0, np.int64), np.zeros(0))
                prefix = f"{inst}.l{depth}.{tag}"
                if cfg.kind == "gat":
                    parts.append(gat_forward(H, adj, P, prefix, cfg.gat,
                                             combine="average" if last else "concat",
                                             train=train, rng=rng))
                else:
                    parts.append(gin_forward(H, adj, P, prefix, cfg.gin, train=train, rng=rng))
            Z = parts[0]
            for p in parts[1:]:
                Z = Z + p
            H = Z if last else ad.relu(Z)
        out.append(H if batch.n_targets == batch.n_nodes else _rows(H, batch.n_targets))
    return out


def _rows(x: Tensor, n: int) -> Tensor:
    return ad.gather_rows(x, np.arange(n))


# ---------------------------------------------------------------- batching


class SnapshotIndex:
    """Per-cohort cache of message edges and k-hop neighbourhoods."""

    def __init__(self, sset: SnapshotSet, feature_rows: np.ndarray):
        self.sset = sset
        self.rows = np.asarray(feature_rows, dtype=np.int64)
        self.msg: list[dict[str, tuple[EdgeArrays, bool]]] = []
        und_src, und_dst = [], []
        for s in range(1, TAU + 1):
            per = {}
            for lk in sset.layers:
                ea = sset.message_edges(s, lk.tag)
                per[lk.tag] = (ea, lk.weighted)
                und_src.append(ea.src)
                und_dst.append(ea.dst)
            self.msg.append(per)
        n = sset.n_nodes
        src = np.concatenate(und_src + und_dst) if und_src else np.zeros(0, np.int64)
        dst = np.concatenate(und_dst + und_src) if und_src else np.zeros(0, np.int64)
        order = np.argsort(src, kind="stable")
        self._nbr = dst[order]
        self._ptr = np.searchsorted(src[order], np.arange(n + 1))

    def ball(self, seeds: np.ndarray, hops: int) -> np.ndarray:
        n = self.sset.n_nodes
        seen = np.zeros(n, dtype=bool)
        seen[seeds] = True
        frontier = np.asarray(seeds)
        for _ in range(hops):
            if frontier.size == 0:
                break
            nxt = np.concatenate([self._nbr[self._ptr[i]:self._ptr[i + 1]] for i in frontier]) \
                if frontier.size else np.zeros(0, np.int64)
            nxt = np.unique(nxt[~seen[nxt]]) if nxt.size else nxt
            seen[nxt] = True
            frontier = nxt
        rest = np.flatnonzero(seen)
        rest = rest[~np.isin(rest, seeds)]
        return np.concatenate([np.asarray(seeds, dtype=np.int64), rest])

    def batch(self, features: np.ndarray, targets: np.ndarray, depth: int) -> GraphBatch:
        nodes = self.ball(np.asarray(targets, dtype=np.int64), depth)
        local = np.full(self.sset.n_nodes, -1, dtype=np.int64)
        local[nodes] = np.arange(len(nodes))
        snaps = []
        for per in self.msg:
            adjs = {}
            for tag, (ea, weighted) in per.items():
                ls, ld = local[ea.src], local[ea.dst]
                keep = (ls >= 0) & (ld >= 0)
                adjs[tag] = Adjacency(len(nodes), ls[keep], ld[keep], ea.weight[keep], weighted)
            snaps.append(adjs)
        return GraphBatch(features[self.rows[nodes]], len(targets), snaps)
