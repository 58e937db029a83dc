"""Modality contributions, Shapley attributions and exposure densities."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from itertools import combinations
from typing import Callable, Iterable, Mapping

import numpy as np
from scipy.stats import gaussian_kde

from .fusion import ATTENTION_STRATEGIES, Inputs, Model
from .graphs import FT, SnapshotSet

STAB = 1e-8
EXACT_LIMIT = 20


class ExplainError(ValueError):
    pass


# ---------------------------------------------------------------- modality contribution


@dataclass
class ContributionRecord:
    c_n: np.ndarray
    c_t: np.ndarray
    norm_n: np.ndarray
    norm_t: np.ndarray
    eps: float = STAB

    def summary(self, bins: int = 20) -> dict:
        edges = np.linspace(0.0, 1.0, bins + 1)
        return {"mean_c_n": float(self.c_n.mean()), "mean_c_t": float(self.c_t.mean()),
                "edges": edges,
                "hist_c_n": np.histogram(self.c_n, edges, density=True)[0],
                "hist_c_t": np.histogram(self.c_t, edges, density=True)[0]}

    def to_csv(self, bins: int = 20) -> str:
        s = self.summary(bins)
        mids = 0.5 * (s["edges"][1:] + s["edges"][:-1])
        lines = ["series,x,y"]
        for name, key in (("C_N", "hist_c_n"), ("C_T", "hist_c_t")):
            lines += [f"{name},{x:.4f},{y:.6f}" for x, y in zip(mids, s[key])]
        lines.append(f"mean_C_N,0,{s['mean_c_n']:.6f}")
        lines.append(f"mean_C_T,0,{s['mean_c_t']:.6f}")
        return "\n".join(lines) + "\n"


def contribution_from_outputs(r_n: np.ndarray, r_t: np.ndarray, eps: float = STAB) -> ContributionRecord:
    """Relative l2 norms of the two attended outputs, one row (instance) each."""
    n_n = np.sqrt((np.asarray(r_n).reshape(len(r_n), -1) ** 2).sum(axis=1))
    n_t = np.sqrt((np.asarray(r_t).reshape(len(r_t), -1) ** 2).sum(axis=1))
    denom = n_n + n_t + eps
    return ContributionRecord(n_n / denom, n_t / denom, n_n, n_t, eps)


def modality_contribution(model: Model, x: Inputs, eps: float = STAB) -> ContributionRecord:
    spec = model.spec
    if spec.mode != "bimodal" or spec.strategy not in ATTENTION_STRATEGIES:
        raise ExplainError(f"strategy {spec.strategy} ({spec.mode}) has no attention block; "
                           "modality contributions need SimpleConcatAtt or HybridConcatAtt")
    if spec.att_direction != "both":
        raise ExplainError("modality contributions need att_direction=both (two attended outputs)")
    parts = model.attended(x)
    return contribution_from_outputs(parts["R_N"], parts["R_T"], eps)


# ---------------------------------------------------------------- Shapley values


def _coalition_values(f: Callable, x: np.ndarray, background: np.ndarray) -> np.ndarray:
    """``v[mask]`` = mean over background rows of f with features in ``mask`` taken from ``x``."""
    d = len(x)
    masks = np.arange(2 ** d)
    bits = ((masks[:, None] >> np.arange(d)) & 1).astype(bool)
    m = len(background)
    rows = np.where(bits[:, None, :], x[None, None, :], background[None, :, :]).reshape(-1, d)
    return np.asarray(f(rows), dtype=float).reshape(2 ** d, m).mean(axis=1)


def shapley_exact(f: Callable, x, background) -> np.ndarray:
    """All ``2^d`` coalitions, absent features imputed from each background row."""
    x = np.asarray(x, dtype=float)
    bg = np.atleast_2d(np.asarray(background, dtype=float))
    d = len(x)
    if d > EXACT_LIMIT:
        raise ExplainError(f"exact Shapley enumeration refused for d={d} > {EXACT_LIMIT}")
    if len(bg) == 0:
        raise ExplainError("background must be non-empty")
    v = _coalition_values(f, x, bg)
    weight = [math.factorial(k) * math.factorial(d - k - 1) / math.factorial(d) for k in range(d)]
    phi = np.zeros(d)
    for i in range(d):
        others = [j for j in range(d) if j != i]
        for k in range(d):
            for S in combinations(others, k):
                mask = sum(1 << j for j in S)
                phi[i] += weight[k] * (v[mask | (1 << i)] - v[mask])
    return phi


def shapley_sampling(f: Callable, x, background, n_samples: int = 2000, seed: int = 0,
                     chunk: int = 200) -> np.ndarray:
    """Permutation sampling: each draw pairs a random order with one random background row."""
    x = np.asarray(x, dtype=float)
    bg = np.atleast_2d(np.asarray(background, dtype=float))
    d = len(x)
    if len(bg) == 0:
        raise ExplainError("background must be non-empty")
    if n_samples < d:
        warnings.warn(f"n_samples={n_samples} is below the feature count {d}", stacklevel=2)
    rng = np.random.default_rng(seed)
    phi = np.zeros(d)
    done = 0
    while done < n_samples:
        k = min(chunk, n_samples - done)
        perms = np.argsort(rng.random((k, d)), axis=1)
        base = bg[rng.integers(0, len(bg), k)]
        # row j of each block switches the first j permuted features to x
        rows = np.repeat(base[:, None, :], d + 1, axis=1)
        for j in range(1, d + 1):
            cols = perms[:, :j]
            r = rows[:, j]
            r[np.arange(k)[:, None], cols] = x[cols]
        vals = np.asarray(f(rows.reshape(-1, d)), dtype=float).reshape(k, d + 1)
        delta = np.diff(vals, axis=1)
        np.add.at(phi, perms.ravel(), delta.ravel())
        done += k
    return phi / n_samples


def shapley_attribution(f: Callable, x, background, n_samples: int = 2000, seed: int = 0,
                        exact: bool | None = None) -> np.ndarray:
    """Exact enumeration for up to 10 features unless told otherwise; sampling beyond."""
    d = len(np.asarray(x))
    if exact is None:
        exact = d <= 10
    if exact:
        return shapley_exact(f, x, background)
    return shapley_sampling(f, x, background, n_samples, seed)


def tabular_function(model: Model, x: Inputs, index: int) -> Callable[[np.ndarray], np.ndarray]:
    """Model output as a function of tabular features for one instance.

    The network channel is frozen at that instance's own embeddings.
    """
    from . import autodiff as ad

    P = ad.detached(model.params)
    if model.spec.uses_graph:
        embs = [e.values[index:index + 1] for e in model.embeddings(P, x)]
    else:
        embs = None

    def f(rows: np.ndarray) -> np.ndarray:
        rows = np.atleast_2d(rows)
        frozen = None if embs is None else [ad.Tensor(np.repeat(e, len(rows), axis=0)) for e in embs]
        return model.forward(P, Inputs(rows, None), embs=frozen).values

    return f


def rank_features(attributions: np.ndarray, names: list[str]) -> list[tuple[str, float]]:
    """Features by mean absolute attribution, largest first; ties by name."""
    imp = np.abs(np.atleast_2d(attributions)).mean(axis=0)
    return sorted(zip(names, imp.tolist()), key=lambda t: (-t[1], t[0]))


# ---------------------------------------------------------------- exposure density


@dataclass
class ExposureGroup:
    direction: str
    count: int
    mean: float
    x: np.ndarray
    y: np.ndarray
    loan_ids: tuple


def exposed_loans(sets: Iterable[SnapshotSet], defaulted: Mapping, direction: str,
                  weighted: bool = False) -> dict:
    """Target loan -> summed edge weight towards defaulted neighbour loans.

    ``in`` means the target received payments from a defaulter, ``out`` that
    it paid one. Needs a directed FT layer.
    """
    if direction not in ("in", "out"):
        raise ValueError(f"direction must be in or out, got {direction!r}")
    found: dict = {}
    for sset in sets:
        lk = sset.layer(FT)
        if not lk.directed:
            raise ExplainError("exposure analysis needs a directed FT layer")
        ids = sset.loan_ids
        for snap in sset.snapshots:
            ea = snap.edges.get(FT)
            if ea is None or len(ea) == 0:
                continue
            # stored edges run payer -> payee
            tgt, nbr = (ea.dst, ea.src) if direction == "in" else (ea.src, ea.dst)
            keep = sset.target_mask[tgt]
            for t, u, w in zip(tgt[keep].tolist(), nbr[keep].tolist(), ea.weight[keep].tolist()):
                if defaulted.get(ids[u], 0):
                    found[ids[t]] = found.get(ids[t], 0.0) + (w if weighted else 1.0)
    return found


def exposure_density(scores: Mapping, sets: Iterable[SnapshotSet], defaulted: Mapping, direction: str,
                     weighted: bool = False, grid: int = 200) -> ExposureGroup:
    """Gaussian KDE (Silverman bandwidth) of scores for loans exposed to defaulters.

    With ``weighted`` each loan counts in proportion to its exposure weight.
    Loans without a score are ignored; an empty group has count 0.
    """
    exposed = exposed_loans(sets, defaulted, direction, weighted)
    ids = tuple(sorted(l for l in exposed if l in scores))
    if not ids:
        return ExposureGroup(direction, 0, float("nan"), np.zeros(0), np.zeros(0), ())
    s = np.array([scores[l] for l in ids], dtype=float)
    w = np.array([exposed[l] for l in ids], dtype=float)
    mean = float(np.average(s, weights=w if weighted else None))
    if len(s) < 2 or np.ptp(s) == 0:
        return ExposureGroup(direction, len(s), mean, np.zeros(0), np.zeros(0), ids)
    kde = gaussian_kde(s, bw_method="silverman", weights=w if weighted else None)
    xs = np.linspace(0.0, 1.0, grid)
    return ExposureGroup(direction, len(s), mean, xs, kde(xs), ids)


def exposure_csv(groups: list[ExposureGroup]) -> str:
    lines = ["series,x,y"]
    for g in groups:
        lines.append(f"{g.direction}_count,0,{g.count}")
        if g.count:
            lines.append(f"{g.direction}_mean,0,{g.mean:.6f}")
        lines += [f"{g.direction},{x:.4f},{y:.6f}" for x, y in zip(g.x, g.y)]
    return "\n".join(lines) + "\n"
