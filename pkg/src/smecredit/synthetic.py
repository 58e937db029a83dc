"""Seeded synthetic SME loan book with planted network contagion.

Companies carry a latent health score. Tabular loan features are noisy,
partly missing views of it. Companies trade with each other (directed,
monthly transactions with pair-specific amounts) and some sit in small
common-ownership clusters. Loans are labelled month by month; a loan's
default logit adds, on top of its own risk,

* ``ft_coeff`` x strength-weighted count of defaulted loans of any
  transaction partner in the preceding six months,
* ``direction_asymmetry`` x the same count restricted to partners that *paid*
  the borrower (the receiving side of a defaulter's payments),
* ``co_coeff`` x count of defaulted loans of co-owned companies.

The intercept is bisected so the overall default rate hits
``base_default_rate``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from scipy import sparse

from .graphs import CO, FT, LayerKind, build_snapshots
from .months import parse_month

log = logging.getLogger(__name__)


@dataclass
class Contagion:
    ft_coeff: float = 0.1
    co_coeff: float = 0.6
    direction_asymmetry: float = 1.3


@dataclass
class SynthConfig:
    n_companies: int = 5000
    start_month: str = "2019-01"
    months: int = 34
    loans_per_company: float = 4.0
    base_default_rate: float = 0.0363
    contagion: Contagion = field(default_factory=Contagion)
    ft_partners: float = 16.0
    reciprocal_share: float = 0.0
    tx_activity: float = 0.6
    homophily: float = 2.0
    co_share: float = 0.6
    co_health_share: float = 0.5
    ft_candidates: int = 60
    seed: int = 42
    rate_tolerance: float = 0.005

    def to_dict(self) -> dict:
        return asdict(self)


class InfeasibleConfig(ValueError):
    pass


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _strength(w: np.ndarray) -> np.ndarray:
    # steep in the log-average amount so edge weights carry information
    return 2.0 * _sigmoid(1.5 * (w - 8.0))


def _companies(cfg: SynthConfig, rng: np.random.Generator) -> pd.DataFrame:
    n = cfg.n_companies
    health = rng.standard_normal(n)
    small = rng.random(n) < _sigmoid(0.6 - 0.6 * health)
    return pd.DataFrame({
        "company_id": [f"C{i:05d}" for i in range(n)],
        "health": health,
        "company_size": np.where(small, "small", "medium"),
    })


def _loans(cfg: SynthConfig, comp: pd.DataFrame, rng: np.random.Generator) -> pd.DataFrame:
    n, T = len(comp), cfg.months
    rows_c, rows_m = [], []
    # companies borrow in bursts; births before the first month and late entrants both occur
    births = rng.integers(-8, T, size=n)
    counts = 1 + rng.poisson(max(cfg.loans_per_company * 1.35 - 1, 0.0), size=n)
    for i in range(n):
        gaps = 1 + rng.poisson(2.0, size=counts[i])
        months = births[i] + np.cumsum(gaps) - gaps[0]
        months = months[(months >= 0) & (months < T)]
        rows_c.extend([i] * len(months))
        rows_m.extend(months.tolist())
    c = np.array(rows_c, dtype=np.int64)
    m = np.array(rows_m, dtype=np.int64)
    order = np.lexsort((c, m))
    c, m = c[order], m[order]
    start = parse_month(cfg.start_month)
    return pd.DataFrame({
        "loan_id": [f"L{k:06d}" for k in range(len(c))],
        "company_idx": c,
        "company_id": comp["company_id"].to_numpy()[c],
        "origination_month": m + start,
    })


def _trade_network(cfg: SynthConfig, comp: pd.DataFrame, rng: np.random.Generator) -> pd.DataFrame:
    n, T = len(comp), cfg.months
    health = comp["health"].to_numpy()
    pairs = set()
    n_out = rng.poisson(cfg.ft_partners / (1 + cfg.reciprocal_share) / 1.0, size=n)
    for i in range(n):
        if n_out[i] == 0:
            continue
        cand = rng.integers(0, n, size=cfg.ft_candidates)
        cand = cand[cand != i]
        logits = -cfg.homophily * np.abs(health[cand] - health[i])
        p = np.exp(logits - logits.max())
        p /= p.sum()
        k = min(n_out[i], len(cand))
        for j in rng.choice(cand, size=k, replace=False, p=p):
            pairs.add((i, int(j)))
            if rng.random() < cfg.reciprocal_share:
                pairs.add((int(j), i))
    pairs = sorted(pairs)
    src = np.array([p[0] for p in pairs], dtype=np.int64)
    dst = np.array([p[1] for p in pairs], dtype=np.int64)
    mu = rng.normal(8.0, 1.3, size=len(pairs))
    active = rng.random((len(pairs), T)) < cfg.tx_activity
    pi, mi = np.nonzero(active)
    amounts = np.exp(mu[pi] + 0.4 * rng.standard_normal(len(pi)))
    ids = comp["company_id"].to_numpy()
    start = parse_month(cfg.start_month)
    tx = pd.DataFrame({"src_company": ids[src[pi]], "dst_company": ids[dst[pi]],
                       "month": mi + start, "amount": np.round(amounts, 2)})
    return tx.sort_values(["month", "src_company", "dst_company"], kind="mergesort").reset_index(drop=True)


def _ownership(cfg: SynthConfig, comp: pd.DataFrame, rng: np.random.Generator):
    n, T = len(comp), cfg.months
    members = rng.permutation(n)[: int(cfg.co_share * n)]
    clusters, pos = [], 0
    while pos < len(members) - 1:
        size = int(rng.integers(2, 5))
        clusters.append(np.sort(members[pos:pos + size]))
        pos += size
    ids = comp["company_id"].to_numpy()
    start = parse_month(cfg.start_month)
    rows = []
    for cl in clusters:
        if len(cl) < 2:
            continue
        for a_i in range(len(cl)):
            for b_i in range(a_i + 1, len(cl)):
                for m in range(T):
                    rows.append((ids[cl[a_i]], ids[cl[b_i]], m + start))
    own = pd.DataFrame(rows, columns=["company_a", "company_b", "month"])
    own = own.sort_values(["month", "company_a", "company_b"], kind="mergesort").reset_index(drop=True)
    return own, clusters


def _share_group_health(cfg: SynthConfig, comp: pd.DataFrame, clusters, rng) -> None:
    """Co-owned firms share part of their health (variance stays 1)."""
    rho = cfg.co_health_share
    health = comp["health"].to_numpy().copy()
    for cl in clusters:
        g = rng.standard_normal()
        health[cl] = np.sqrt(1 - rho) * health[cl] + np.sqrt(rho) * g
    comp["health"] = health


def _exposure_matrices(loans: pd.DataFrame, tx: pd.DataFrame, own: pd.DataFrame):
    """Sparse (loan x earlier loan) matrices for symmetric FT, incoming FT and CO exposure."""
    n = len(loans)
    row_of = {lid: k for k, lid in enumerate(loans["loan_id"])}
    base = loans[["loan_id", "company_id", "origination_month"]]
    trip = {"ft": ([], [], []), "in": ([], [], []), "co": ([], [], [])}
    layers_und = [LayerKind(FT, directed=False, weighted=True), LayerKind(CO)]
    layers_dir = [LayerKind(FT, directed=True, weighted=True)]
    for c in sorted(set(base["origination_month"].tolist())):
        und = build_snapshots(base, tx, own, c, layers_und)
        drc = build_snapshots(base, tx, None, c, layers_dir)
        for sset, tag, key in ((und, FT, "ft"), (und, CO, "co"), (drc, FT, "in")):
            ids = np.array([row_of[l] for l in sset.loan_ids], dtype=np.int64)
            for snap in sset.snapshots:
                ea = snap.edges.get(tag)
                if ea is None or len(ea) == 0:
                    continue
                if key == "in":
                    keep = sset.target_mask[ea.dst]
                    tgt, nbr, w = ea.dst[keep], ea.src[keep], ea.weight[keep]
                else:
                    tgt, nbr, w = ea.src, ea.dst, ea.weight
                val = _strength(w) if key != "co" else np.ones(len(tgt))
                trip[key][0].append(ids[tgt])
                trip[key][1].append(ids[nbr])
                trip[key][2].append(val)
    mats = {}
    for key, (r, c_, v) in trip.items():
        if r:
            mats[key] = sparse.csr_matrix((np.concatenate(v), (np.concatenate(r), np.concatenate(c_))),
                                          shape=(n, n))
        else:
            mats[key] = sparse.csr_matrix((n, n))
    return mats


def _label(own_logit, month, E, uniforms, intercept):
    y = np.zeros(len(own_logit))
    for m in np.unique(month):
        sel = np.flatnonzero(month == m)
        z = intercept + own_logit[sel] + E[sel] @ y
        y[sel] = uniforms[sel] < _sigmoid(z)
    return y


NUMERIC_NAMED = ["avg_bal_lia", "mon_install_amt", "tot_rev_gen", "end_cur_year", "avg_bal_act",
                 "ent_own_equ", "cov_rat_tax", "adj_tot_rev_gen"]
FLAGS_NAMED = ["if_pre_app", "if_desc_gsi", "if_wel_dep_acc", "if_restruct", "if_bur_ind",
               "if_trans_ind"]
N_GENERIC_NUMERIC = 27
N_GENERIC_FLAGS = 8


def _features(loans: pd.DataFrame, comp: pd.DataFrame, distress: np.ndarray,
              rng: np.random.Generator) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Raw (uncleaned) features plus the own-risk logit component."""
    ci = loans["company_idx"].to_numpy()
    n = len(loans)
    h_c = comp["health"].to_numpy()[ci]
    # loan-level perturbation of health seen by the lender
    h = h_c + 0.6 * rng.standard_normal(n)
    small = (comp["company_size"].to_numpy()[ci] == "small").astype(float)
    dis = distress[ci]
    z = lambda: rng.standard_normal(n)  # noqa: E731

    f: dict[str, np.ndarray] = {}
    f["avg_bal_lia"] = np.exp(10.0 - 0.35 * h + 0.8 * z())
    f["mon_install_amt"] = np.exp(7.0 + 0.5 * (1 - small) + 0.25 * h + 0.6 * z())
    f["tot_rev_gen"] = np.exp(11.0 + 0.55 * h - 0.4 * small + 0.7 * z())
    f["end_cur_year"] = 0.4 * h + z()
    f["avg_bal_act"] = np.exp(10.5 + 0.35 * h + 0.7 * z())
    f["ent_own_equ"] = 0.5 * h + z()
    f["cov_rat_tax"] = 1.0 + 0.4 * h + rng.standard_t(3, size=n)
    f["adj_tot_rev_gen"] = f["tot_rev_gen"] * np.exp(0.25 * z())

    f["if_pre_app"] = (rng.random(n) < _sigmoid(0.3 + 1.1 * h)).astype(float)
    f["if_desc_gsi"] = (rng.random(n) < _sigmoid(-0.5 - 0.3 * h)).astype(float)
    f["if_wel_dep_acc"] = (rng.random(n) < _sigmoid(-0.8 + 0.2 * h)).astype(float)
    f["if_restruct"] = (rng.random(n) < _sigmoid(-3.2 - 0.7 * h + 3.5 * dis)).astype(float)
    f["if_bur_ind"] = (rng.random(n) < _sigmoid(-2.0 - 0.6 * h + 3.0 * dis)).astype(float)
    f["if_trans_ind"] = (rng.random(n) < _sigmoid(-1.0 + 0.4 * h)).astype(float)

    # generic financial ratios: weak, varied loadings on health
    loads = rng.uniform(0.05, 0.35, size=N_GENERIC_NUMERIC) * rng.choice([-1, 1], N_GENERIC_NUMERIC)
    for k in range(N_GENERIC_NUMERIC):
        x = loads[k] * h + z()
        if k % 3 == 0:
            x = np.exp(0.8 * x)
        f[f"fin_{k + 1:02d}"] = x
    for k in range(N_GENERIC_FLAGS):
        f[f"ind_{k + 1:02d}"] = (rng.random(n) < _sigmoid(rng.uniform(-1.5, 0.5) + 0.2 * h * (-1) ** k)).astype(float)

    # sparsely populated fields
    f["ext_score"] = 0.6 * h + z()
    f["legacy_rating"] = 0.3 * h + z()

    # categorical fields
    act = np.where(rng.random(n) < _sigmoid(1.2 + 0.5 * h), "Y", "N").astype(object)
    sector = rng.choice(np.array(["agri", "constr", "manuf", "retail", "services", "transport"]), n)
    region = rng.choice(np.array(["north", "south", "east", "west"]), n)

    def blank(name, frac, risk_tilt=0.0):
        p = _sigmoid(np.log(frac / (1 - frac)) - risk_tilt * h)
        f[name] = np.where(rng.random(n) < p, np.nan, f[name])

    blank("ent_own_equ", 0.12)
    blank("cov_rat_tax", 0.02)
    blank("fin_05", 0.20)
    blank("fin_11", 0.08)
    blank("ext_score", 0.55)
    blank("legacy_rating", 0.97)
    act = np.where(rng.random(n) < _sigmoid(-1.4 - 0.5 * h), None, act)
    sector = np.where(rng.random(n) < 0.02, None, sector.astype(object))
    f["act_flag"] = act
    f["sector"] = sector
    f["region"] = region.astype(object)

    own_logit = -1.1 * h + 0.35 * small + 1.8 * dis
    return f, own_logit


def generate_synthetic(cfg: SynthConfig | None = None):
    """Returns ``(loans, transactions, ownerships, info)`` data frames plus a summary dict."""
    cfg = cfg or SynthConfig()
    if cfg.n_companies < 10 or cfg.months < 8:
        raise InfeasibleConfig("need at least 10 companies and 8 months")
    if not 0.0 < cfg.base_default_rate < 1.0:
        raise InfeasibleConfig(f"base_default_rate {cfg.base_default_rate} outside (0, 1)")
    rng = np.random.default_rng(cfg.seed)
    comp = _companies(cfg, rng)
    own, clusters = _ownership(cfg, comp, rng)
    _share_group_health(cfg, comp, clusters, rng)
    distress = (comp["health"].to_numpy() + 0.6 * rng.standard_normal(len(comp)) < -1.6).astype(float)
    loans = _loans(cfg, comp, rng)
    tx = _trade_network(cfg, comp, rng)
    # companies that never borrow are invisible to the lender
    borrowers = set(loans["company_id"].tolist())
    tx = tx[tx["src_company"].isin(borrowers) & tx["dst_company"].isin(borrowers)].reset_index(drop=True)
    own = own[own["company_a"].isin(borrowers) & own["company_b"].isin(borrowers)].reset_index(drop=True)
    feats, own_logit = _features(loans, comp, distress, rng)
    uniforms = rng.random(len(loans))

    mats = _exposure_matrices(loans, tx, own)
    cg = cfg.contagion
    E = (cg.ft_coeff * mats["ft"] + cg.direction_asymmetry * mats["in"] + cg.co_coeff * mats["co"]).tocsr()
    month = loans["origination_month"].to_numpy()

    lo, hi = -20.0, 10.0
    rate = lambda b: _label(own_logit, month, E, uniforms, b).mean()  # noqa: E731
    r_lo, r_hi = rate(lo), rate(hi)
    target = cfg.base_default_rate
    if not r_lo <= target <= r_hi:
        achieved = r_lo if target < r_lo else r_hi
        raise InfeasibleConfig(f"default rate {target:.4f} unreachable; closest achievable {achieved:.4f}")
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if rate(mid) < target:
            lo = mid
        else:
            hi = mid
    intercept = 0.5 * (lo + hi)
    y = _label(own_logit, month, E, uniforms, intercept)
    achieved = float(y.mean())
    if abs(achieved - target) > cfg.rate_tolerance:
        raise InfeasibleConfig(f"achieved default rate {achieved:.4f} misses target {target:.4f}")

    out = pd.DataFrame({
        "loan_id": loans["loan_id"],
        "company_id": loans["company_id"],
        "origination_month": loans["origination_month"],
        "company_size": comp["company_size"].to_numpy()[loans["company_idx"].to_numpy()],
        "default": y.astype(np.int64),
    })
    for name, col in feats.items():
        out[name] = col
    info = {"intercept": intercept, "default_rate": achieved, "n_loans": len(out),
            "n_transactions": len(tx), "n_ownership_rows": len(own)}
    log.info("synthetic data: %s", info)
    return out, tx, own, info
