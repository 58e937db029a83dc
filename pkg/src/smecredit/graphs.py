"""Multilayer loan networks: per-cohort snapshot sets over FT and CO layers.

For a cohort of loans originating in month ``c``, the neighbour pool of each
borrowing company is every company it had a relation with (a transaction or
an ownership record) during months ``c-6 .. c-1``. Snapshot ``s`` (1..6)
links the cohort's loans to neighbour-company loans originating in month
``c - 7 + s``. Cohort loans are never linked to each other.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np
import pandas as pd

from .months import format_month, parse_month, parse_months

log = logging.getLogger(__name__)

TAU = 6
FT, CO = "FT", "CO"
DEFAULT_SUPRA_LIMIT = 4096


class EmptyCohortError(ValueError):
    pass


@dataclass(frozen=True)
class LayerKind:
    tag: str
    directed: bool = False
    weighted: bool = False

    def __post_init__(self):
        if self.tag not in (FT, CO):
            raise ValueError(f"unknown layer tag {self.tag!r}")
        if self.tag == CO and (self.directed or self.weighted):
            raise ValueError("CO layer is always undirected with unit weights")


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    weight: float
    layer: str


class EdgeArrays(NamedTuple):
    src: np.ndarray
    dst: np.ndarray
    weight: np.ndarray

    @classmethod
    def empty(cls) -> "EdgeArrays":
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0))

    def __len__(self) -> int:  # type: ignore[override]
        return int(self.src.shape[0])


@dataclass(frozen=True)
class Snapshot:
    index: int
    month: int
    edges: dict[str, EdgeArrays]


@dataclass(frozen=True)
class SnapshotSet:
    origination_month: int
    layers: tuple[LayerKind, ...]
    loan_ids: tuple
    target_mask: np.ndarray
    snapshots: tuple[Snapshot, ...]
    skipped_relations: int = 0
    node_index: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.node_index:
            object.__setattr__(self, "node_index", {lid: i for i, lid in enumerate(self.loan_ids)})

    @property
    def n_nodes(self) -> int:
        return len(self.loan_ids)

    @property
    def targets(self) -> np.ndarray:
        return np.flatnonzero(self.target_mask)

    def layer(self, tag: str) -> LayerKind:
        for lk in self.layers:
            if lk.tag == tag:
                return lk
        raise KeyError(f"layer {tag} not in snapshot set")

    def snapshot(self, index: int) -> Snapshot:
        if not 1 <= index <= TAU:
            raise IndexError(f"snapshot index must be in 1..{TAU}, got {index}")
        return self.snapshots[index - 1]

    def edges(self) -> Iterator[tuple[int, Edge]]:
        for snap in self.snapshots:
            for tag, ea in snap.edges.items():
                for s, d, w in zip(ea.src.tolist(), ea.dst.tolist(), ea.weight.tolist()):
                    yield snap.index, Edge(s, d, w, tag)

    def message_edges(self, index: int, tag: str) -> EdgeArrays:
        """Edges as (src -> dst) messages; undirected layers are emitted both ways."""
        ea = self.snapshot(index).edges.get(tag, EdgeArrays.empty())
        if self.layer(tag).directed:
            return ea
        return EdgeArrays(np.concatenate([ea.src, ea.dst]), np.concatenate([ea.dst, ea.src]),
                          np.concatenate([ea.weight, ea.weight]))


def ft_edge_weight(amounts: Sequence[float], weighted: bool = True) -> float | None:
    """``ln(1 + mean amount)`` for a company pair, ``None`` when there is no edge."""
    amounts = np.asarray(amounts, dtype=float)
    if amounts.size == 0:
        return None
    if np.any(amounts < 0):
        raise ValueError("transaction amounts must be non-negative")
    if not weighted:
        return 1.0
    w = float(np.log1p(amounts.sum() / amounts.size))
    return w if w > 0 else None


def _normalize_months(df: pd.DataFrame, col: str) -> pd.DataFrame:
    if df[col].dtype.kind not in "iu":
        df = df.copy()
        df[col] = parse_months(df[col])
    return df


def build_snapshots(loans: pd.DataFrame, transactions: pd.DataFrame | None,
                    ownerships: pd.DataFrame | None, origination_month,
                    layers: Sequence[LayerKind]) -> SnapshotSet:
    """Snapshot set for one origination-month cohort.

    ``loans`` needs ``loan_id, company_id, origination_month``; transaction
    rows ``src_company, dst_company, month, amount``; ownership rows
    ``company_a, company_b, month``. Months may be ``YYYY-MM`` strings or
    month indices.
    """
    c = parse_month(origination_month)
    layers = tuple(layers)
    loans = _normalize_months(loans, "origination_month")
    lo, hi = c - TAU, c - 1
    tgt = loans[loans["origination_month"] == c]
    if tgt.empty:
        raise EmptyCohortError(f"no loans originate in {format_month(c)}")
    known = set(loans["company_id"].tolist())
    target_companies = set(tgt["company_id"].tolist())
    hist = loans[(loans["origination_month"] >= lo) & (loans["origination_month"] <= hi)]

    # (target company, neighbour company, orientation, weight); orientation is
    # +1 for neighbour -> target, -1 for target -> neighbour, 0 for undirected
    relations: dict[str, pd.DataFrame] = {}
    skipped = 0
    for lk in layers:
        if lk.tag == FT:
            rel, sk = _ft_relations(transactions, target_companies, known, lo, hi, lk)
        else:
            rel, sk = _co_relations(ownerships, target_companies, known, lo, hi)
        relations[lk.tag] = rel
        skipped += sk
    if skipped:
        log.info("cohort %s: skipped %d relation rows with unknown companies",
                    format_month(c), skipped)

    neighbour_companies = set()
    for rel in relations.values():
        neighbour_companies.update(rel["nbr"].tolist())
    nbr_loans = hist[hist["company_id"].isin(neighbour_companies)]

    loan_ids = tuple(tgt["loan_id"].tolist()) + tuple(nbr_loans["loan_id"].tolist())
    index = {lid: i for i, lid in enumerate(loan_ids)}
    if len(index) != len(loan_ids):
        raise ValueError("duplicate loan_id in loans table")
    mask = np.zeros(len(loan_ids), dtype=bool)
    mask[: len(tgt)] = True
    mask.setflags(write=False)

    tgt_tab = pd.DataFrame({"tc": tgt["company_id"].values, "t": np.arange(len(tgt))})
    nbr_tab = pd.DataFrame({"nc": nbr_loans["company_id"].values,
                            "u": np.arange(len(tgt), len(loan_ids)),
                            "m": nbr_loans["origination_month"].values})

    per_snap: list[dict[str, EdgeArrays]] = [dict() for _ in range(TAU)]
    for tag, rel in relations.items():
        joined = (rel.merge(tgt_tab, on="tc").merge(nbr_tab.rename(columns={"nc": "nbr"}), on="nbr"))
        joined = joined.sort_values(["m", "t", "u", "orient"], kind="mergesort")
        for s in range(1, TAU + 1):
            part = joined[joined["m"] == c - 7 + s]
            t = part["t"].to_numpy(np.int64)
            u = part["u"].to_numpy(np.int64)
            incoming = part["orient"].to_numpy() > 0
            src = np.where(incoming, u, t)
            dst = np.where(incoming, t, u)
            w = part["w"].to_numpy(float)
            for arr in (src, dst, w):
                arr.setflags(write=False)
            per_snap[s - 1][tag] = EdgeArrays(src, dst, w)

    snaps = tuple(Snapshot(s, c - 7 + s, per_snap[s - 1]) for s in range(1, TAU + 1))
    return SnapshotSet(c, layers, loan_ids, mask, snaps, skipped, index)


def _ft_relations(tx, targets, known, lo, hi, lk: LayerKind):
    cols = ["tc", "nbr", "orient", "w"]
    if tx is None or len(tx) == 0:
        return pd.DataFrame(columns=cols), 0
    tx = _normalize_months(tx, "month")
    win = tx[(tx["month"] >= lo) & (tx["month"] <= hi)]
    win = win[win["src_company"] != win["dst_company"]]
    unknown = ~(win["src_company"].isin(known) & win["dst_company"].isin(known))
    skipped = int(unknown.sum())
    win = win[~unknown]
    out_rows = win[win["src_company"].isin(targets)]
    in_rows = win[win["dst_company"].isin(targets)]
    parts = []
    if lk.directed:
        # target pays neighbour: edge target -> neighbour
        o = out_rows.groupby(["src_company", "dst_company"], sort=True)["amount"].agg(["sum", "count"])
        o = o.reset_index().rename(columns={"src_company": "tc", "dst_company": "nbr"})
        o["orient"] = -1
        i = in_rows.groupby(["dst_company", "src_company"], sort=True)["amount"].agg(["sum", "count"])
        i = i.reset_index().rename(columns={"dst_company": "tc", "src_company": "nbr"})
        i["orient"] = 1
        parts = [o, i]
    else:
        both = pd.concat([
            out_rows.rename(columns={"src_company": "tc", "dst_company": "nbr"})[["tc", "nbr", "amount"]],
            in_rows.rename(columns={"dst_company": "tc", "src_company": "nbr"})[["tc", "nbr", "amount"]],
        ])
        g = both.groupby(["tc", "nbr"], sort=True)["amount"].agg(["sum", "count"]).reset_index()
        g["orient"] = 0
        parts = [g]
    rel = pd.concat(parts, ignore_index=True)
    if rel.empty:
        return pd.DataFrame(columns=cols), skipped
    if lk.weighted:
        rel["w"] = np.log1p(rel["sum"].to_numpy(float) / rel["count"].to_numpy(float))
        rel = rel[rel["w"] > 0]
    else:
        rel["w"] = 1.0
    return rel[cols].reset_index(drop=True), skipped


def _co_relations(own, targets, known, lo, hi):
    cols = ["tc", "nbr", "orient", "w"]
    if own is None or len(own) == 0:
        return pd.DataFrame(columns=cols), 0
    own = _normalize_months(own, "month")
    win = own[(own["month"] >= lo) & (own["month"] <= hi)]
    win = win[win["company_a"] != win["company_b"]]
    unknown = ~(win["company_a"].isin(known) & win["company_b"].isin(known))
    skipped = int(unknown.sum())
    win = win[~unknown]
    sym = pd.concat([
        win.rename(columns={"company_a": "tc", "company_b": "nbr"})[["tc", "nbr"]],
        win.rename(columns={"company_b": "tc", "company_a": "nbr"})[["tc", "nbr"]],
    ])
    sym = sym[sym["tc"].isin(targets)].drop_duplicates().sort_values(["tc", "nbr"])
    sym["orient"] = 0
    sym["w"] = 1.0
    return sym[cols].reset_index(drop=True), skipped


def neighbors(sset: SnapshotSet, snapshot_index: int, layer: str, node: int,
              direction: str = "both") -> list[tuple[int, float]]:
    """Neighbours of ``node`` in ascending index order.

    For directed layers ``in`` returns sources of edges into ``node`` and
    ``out`` the destinations of its outgoing edges. Undirected layers ignore
    ``direction``.
    """
    if direction not in ("in", "out", "both"):
        raise ValueError(f"direction must be in/out/both, got {direction!r}")
    ea = sset.snapshot(snapshot_index).edges.get(layer, EdgeArrays.empty())
    if not 0 <= node < sset.n_nodes:
        raise IndexError(f"node {node} out of range")
    directed = sset.layer(layer).directed
    found: dict[int, float] = {}
    if not directed or direction in ("in", "both"):
        sel = ea.dst == node
        for s, w in zip(ea.src[sel].tolist(), ea.weight[sel].tolist()):
            found[s] = w
    if not directed or direction in ("out", "both"):
        sel = ea.src == node
        for d, w in zip(ea.dst[sel].tolist(), ea.weight[sel].tolist()):
            found.setdefault(d, w)
    return sorted(found.items())


def supra_adjacency(sset: SnapshotSet, snapshot_index: int,
                    max_size: int = DEFAULT_SUPRA_LIMIT) -> np.ndarray:
    """Dense (n*l) x (n*l) supra-adjacency; identity couplings between layers."""
    n, l = sset.n_nodes, len(sset.layers)
    size = n * l
    if size > max_size:
        raise ValueError(f"supra-adjacency would be {size}x{size}, above limit {max_size}")
    snap = sset.snapshot(snapshot_index)
    A = np.zeros((size, size))
    eye = np.eye(n)
    for k, lk in enumerate(sset.layers):
        ea = snap.edges.get(lk.tag, EdgeArrays.empty())
        block = np.zeros((n, n))
        block[ea.src, ea.dst] = ea.weight
        if not lk.directed:
            block[ea.dst, ea.src] = ea.weight
        A[k * n:(k + 1) * n, k * n:(k + 1) * n] = block
        for m in range(l):
            if m != k:
                A[k * n:(k + 1) * n, m * n:(m + 1) * n] = eye
    return A


def export_edges(sset: SnapshotSet, path: str | Path) -> None:
    """Tab-separated ``snapshot, layer, src_loan, dst_loan, weight`` lines."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for s, e in sset.edges():
            fh.write(f"{s}\t{e.layer}\t{sset.loan_ids[e.src]}\t{sset.loan_ids[e.dst]}\t{e.weight!r}\n")


# ---------------------------------------------------------------- file formats

TX_HEADER = ["src_company", "dst_company", "month", "amount"]
OWN_HEADER = ["company_a", "company_b", "month"]


def _read_rows(path: str | Path, header: list[str]) -> list[list[str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first != header:
            raise ValueError(f"{path}: expected header {','.join(header)}, got {first}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            rows.append(row)
    return rows


def read_transactions(path: str | Path) -> pd.DataFrame:
    rows = _read_rows(path, TX_HEADER)
    months, amounts = [], []
    for lineno, r in enumerate(rows, start=2):
        try:
            months.append(parse_month(r[2]))
            amt = float(r[3])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
        if amt < 0 or not np.isfinite(amt):
            raise ValueError(f"{path}:{lineno}: amount must be a non-negative number")
        amounts.append(amt)
    return pd.DataFrame({"src_company": [r[0] for r in rows], "dst_company": [r[1] for r in rows],
                         "month": np.array(months, dtype=np.int64), "amount": np.array(amounts)})


def read_ownerships(path: str | Path) -> pd.DataFrame:
    rows = _read_rows(path, OWN_HEADER)
    months = []
    for lineno, r in enumerate(rows, start=2):
        try:
            months.append(parse_month(r[2]))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    return pd.DataFrame({"company_a": [r[0] for r in rows], "company_b": [r[1] for r in rows],
                         "month": np.array(months, dtype=np.int64)})


def write_transactions(df: pd.DataFrame, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TX_HEADER)
        for s, d, m, a in zip(df["src_company"], df["dst_company"], df["month"], df["amount"]):
            w.writerow([s, d, format_month(m), f"{a:.2f}"])


def write_ownerships(df: pd.DataFrame, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(OWN_HEADER)
        for a, b, m in zip(df["company_a"], df["company_b"], df["month"]):
            w.writerow([a, b, format_month(m)])
