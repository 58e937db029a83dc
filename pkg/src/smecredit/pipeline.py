"""Loan table cleaning: outlier capping, null handling, min-max scaling,
correlation pruning, and the out-of-time split.

All statistics are fitted on the training split and stored in
:class:`PipelineStats`, which is then applied unchanged to other splits.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import pandas as pd

from .months import format_month, parse_month

log = logging.getLogger(__name__)

ID_COLUMNS = ["loan_id", "company_id", "origination_month", "company_size", "default"]
NA_LEVEL = "N/A"
PERCENTILE_METHOD = "linear"

# null-fraction bands, closed on the left
IMPUTE = "impute"
IMPUTE_DUMMY = "impute+dummy"
NA_CATEGORY = "na_category"
DROP_DUMMY = "drop+dummy"
DROP = "drop"


class SplitError(ValueError):
    pass


# ---------------------------------------------------------------- column operations


def percentile(values: np.ndarray, q: float) -> float:
    """Linear interpolation between order statistics (numpy's default)."""
    return float(np.percentile(values, q, method=PERCENTILE_METHOD))


def cap_outliers(column, stats: tuple[float, float] | None = None):
    """Clamp into [p1, p99]. Returns ``(capped, (p1, p99))``.

    With ``stats`` given the caps are reused rather than refitted.
    """
    x = np.asarray(column, dtype=float)
    if stats is None:
        present = x[~np.isnan(x)]
        if present.size == 0:
            log.warning("cap_outliers: all-null column left unchanged")
            return x.copy(), (math.nan, math.nan)
        stats = (percentile(present, 1), percentile(present, 99))
    lo, hi = stats
    if math.isnan(lo):
        return x.copy(), stats
    return np.clip(x, lo, hi), stats


def null_action(kind: str, null_fraction: float) -> str:
    if kind not in ("categorical", "numerical"):
        raise ValueError(f"unknown feature kind {kind!r}")
    if not 0.0 <= null_fraction <= 1.0:
        raise ValueError(f"null fraction {null_fraction} outside [0, 1]")
    if null_fraction < 0.05:
        return IMPUTE
    if null_fraction < 0.40:
        return NA_CATEGORY if kind == "categorical" else IMPUTE_DUMMY
    if null_fraction < 0.95:
        return DROP_DUMMY
    return DROP


def _is_null(column) -> np.ndarray:
    return pd.isna(pd.Series(column, dtype=object)).to_numpy()


def handle_nulls(column, kind: str, null_fraction: float, fill=None):
    """Apply the null-handling rule to one column.

    Returns ``(action, columns, fill)`` where ``columns`` maps output names
    (``""`` for the feature itself, ``"na"`` for the presence dummy) to arrays.
    ``fill`` is the median or mode fitted here unless passed in.
    """
    action = null_action(kind, null_fraction)
    nulls = _is_null(column)
    out: dict[str, np.ndarray] = {}
    if action in (IMPUTE, IMPUTE_DUMMY, NA_CATEGORY):
        if kind == "numerical":
            x = np.asarray(column, dtype=float)
            if fill is None:
                present = x[~nulls]
                fill = float(np.median(present)) if present.size else 0.0
            out[""] = np.where(nulls, fill, x)
        else:
            vals = np.asarray(column, dtype=object)
            if fill is None:
                if action == NA_CATEGORY:
                    fill = NA_LEVEL
                else:
                    present = pd.Series(vals[~nulls])
                    # ties broken by sorted level order
                    fill = sorted(present.value_counts().pipe(lambda s: s[s == s.max()]).index)[0] \
                        if len(present) else NA_LEVEL
            out[""] = np.where(nulls, fill, vals)
    if action in (IMPUTE_DUMMY, DROP_DUMMY):
        out["na"] = nulls.astype(float)
    return action, out, fill


def minmax_scale(column, stats: tuple[float, float] | None = None):
    """Scale to [0, 1] with fitted (min, max); out-of-range values are clamped."""
    x = np.asarray(column, dtype=float)
    if stats is None:
        stats = (float(np.min(x)), float(np.max(x))) if x.size else (0.0, 0.0)
    lo, hi = stats
    if hi <= lo:
        return np.zeros_like(x), stats
    return np.clip((x - lo) / (hi - lo), 0.0, 1.0), stats


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    sa, sb = a.std(), b.std()
    if sa == 0 or sb == 0:
        return 0.0
    return float(((a - a.mean()) * (b - b.mean())).mean() / (sa * sb))


def prune_correlated(features: np.ndarray, target: np.ndarray, threshold: float = 0.70,
                     names: Sequence[str] | None = None):
    """Greedy removal of one feature from each pair with |rho| above ``threshold``.

    Pairs are visited in descending |rho| (index order on ties); of each pair
    whose members are both still present, the one less correlated with the
    target is dropped (the later index on a tie). Returns ``(kept, dropped)``
    where ``dropped`` maps index -> (partner index, |rho|).
    """
    X = np.asarray(features, dtype=float)
    y = np.asarray(target, dtype=float)
    d = X.shape[1]
    std = X.std(axis=0)
    Xc = X - X.mean(axis=0)
    denom = np.outer(std, std)
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.where(denom > 0, (Xc.T @ Xc) / X.shape[0] / np.where(denom > 0, denom, 1), 0.0)
    tcorr = np.array([abs(_pearson(X[:, j], y)) for j in range(d)])
    iu, ju = np.triu_indices(d, k=1)
    rho = np.abs(corr[iu, ju])
    sel = rho > threshold
    pairs = sorted(zip(-rho[sel], iu[sel], ju[sel]))
    alive = np.ones(d, dtype=bool)
    dropped: dict[int, tuple[int, float]] = {}
    for neg_r, i, j in pairs:
        if not (alive[i] and alive[j]):
            continue
        loser, winner = (j, i) if tcorr[i] >= tcorr[j] else (i, j)
        alive[loser] = False
        dropped[int(loser)] = (int(winner), float(-neg_r))
    kept = [int(k) for k in np.flatnonzero(alive)]
    if names is not None:
        return [names[k] for k in kept], {names[k]: (names[w], r) for k, (w, r) in dropped.items()}
    return kept, dropped


# ---------------------------------------------------------------- loans table


def read_loans(path: str | Path) -> pd.DataFrame:
    """Read a loans CSV. Empty cells are nulls; a column with any
    non-numeric value is categorical."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:5] != ID_COLUMNS:
            raise ValueError(f"{path}:1: header must start with {','.join(ID_COLUMNS)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                parse_month(row[2])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            if row[4] not in ("0", "1"):
                raise ValueError(f"{path}:{lineno}: default must be 0 or 1, got {row[4]!r}")
            if row[3] not in ("small", "medium"):
                raise ValueError(f"{path}:{lineno}: company_size must be small|medium, got {row[3]!r}")
            rows.append(row)
    cols = list(zip(*rows)) if rows else [()] * len(header)
    data: dict[str, object] = {
        "loan_id": list(cols[0]),
        "company_id": list(cols[1]),
        "origination_month": np.array([parse_month(v) for v in cols[2]], dtype=np.int64),
        "company_size": list(cols[3]),
        "default": np.array([int(v) for v in cols[4]], dtype=np.int64),
    }
    for name, values in zip(header[5:], cols[5:]):
        data[name] = _parse_feature(values)
    df = pd.DataFrame(data)
    if df["loan_id"].duplicated().any():
        dup = df.loc[df["loan_id"].duplicated(), "loan_id"].iloc[0]
        raise ValueError(f"{path}: duplicate loan_id {dup!r}")
    return df


def _parse_feature(values: Sequence[str]):
    try:
        return np.array([float(v) if v != "" else np.nan for v in values])
    except ValueError:
        return np.array([v if v != "" else None for v in values], dtype=object)


def write_loans(df: pd.DataFrame, path: str | Path) -> None:
    feats = [c for c in df.columns if c not in ID_COLUMNS]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ID_COLUMNS + feats)
        cols = [df[c].to_numpy() for c in feats]
        for i, (lid, cid, m, size, y) in enumerate(zip(df["loan_id"], df["company_id"],
                                                      df["origination_month"], df["company_size"],
                                                      df["default"])):
            row = [lid, cid, format_month(m), size, int(y)]
            for col in cols:
                v = col[i]
                if v is None or (isinstance(v, float) and math.isnan(v)):
                    row.append("")
                elif isinstance(v, (float, np.floating)):
                    row.append(repr(round(float(v), 6)))
                else:
                    row.append(v)
            w.writerow(row)


def feature_kind(series: pd.Series) -> str:
    return "numerical" if series.dtype.kind in "fiu" else "categorical"


# ---------------------------------------------------------------- split


class Split(NamedTuple):
    train: pd.DataFrame
    validation: pd.DataFrame
    test: pd.DataFrame


def temporal_split(loans: pd.DataFrame, train_start=None, train_months: int = 18,
                   test_months: int = 10, val_fraction: float = 0.2, seed: int = 0,
                   lookback: int = 6) -> Split:
    """Out-of-time split with company-level hygiene.

    The training window opens ``lookback`` months after the first origination
    month unless ``train_start`` is given. A seeded random set of training
    companies holding about ``val_fraction`` of the window's loans forms the
    validation set. Test loans of any company seen in training or validation
    are removed.
    """
    months = loans["origination_month"].to_numpy()
    start = parse_month(train_start) if train_start is not None else int(months.min()) + lookback
    train_end = start + train_months - 1
    test_end = train_end + test_months
    in_train = (months >= start) & (months <= train_end)
    in_test = (months > train_end) & (months <= test_end)
    window = loans[in_train]
    companies = np.array(sorted(set(window["company_id"].tolist())), dtype=object)
    rng = np.random.default_rng(seed)
    order = companies[rng.permutation(len(companies))]
    counts = window.groupby("company_id").size()
    goal = val_fraction * len(window)
    val_companies, acc = set(), 0
    for comp in order:
        if acc >= goal:
            break
        val_companies.add(comp)
        acc += int(counts[comp])
    is_val = window["company_id"].isin(val_companies)
    train, val = window[~is_val], window[is_val]
    seen = set(window["company_id"].tolist())
    test = loans[in_test]
    test = test[~test["company_id"].isin(seen)]
    if test.empty:
        raise SplitError("test split is empty after excluding companies seen in training")
    return Split(train.copy(), val.copy(), test.copy())


# ---------------------------------------------------------------- fitted pipeline


@dataclass
class FeatureStats:
    kind: str
    null_fraction: float
    action: str
    caps: tuple[float, float] | None = None
    fill: object = None
    levels: tuple[str, ...] = ()


@dataclass
class PipelineStats:
    features: dict[str, FeatureStats] = field(default_factory=dict)
    scale: dict[str, tuple[float, float]] = field(default_factory=dict)
    columns: list[str] = field(default_factory=list)
    dropped: dict[str, str] = field(default_factory=dict)
    threshold: float = 0.70

    def to_text(self) -> str:
        lines = [f"pipeline.percentile = {PERCENTILE_METHOD}",
                 f"pipeline.correlation_threshold = {self.threshold!r}",
                 "pipeline.scaled_test_values = clamped to [0,1]"]
        for name, fs in self.features.items():
            lines.append(f"{name}.kind = {fs.kind}")
            lines.append(f"{name}.null_fraction = {fs.null_fraction!r}")
            lines.append(f"{name}.action = {fs.action}")
            if fs.caps is not None:
                lines.append(f"{name}.p1 = {fs.caps[0]!r}")
                lines.append(f"{name}.p99 = {fs.caps[1]!r}")
            if fs.fill is not None:
                key = "median" if fs.kind == "numerical" else "mode"
                lines.append(f"{name}.{key} = {fs.fill!r}" if fs.kind == "numerical"
                             else f"{name}.{key} = {fs.fill}")
            if fs.levels:
                lines.append(f"{name}.levels = {'|'.join(fs.levels)}")
        for col, (lo, hi) in self.scale.items():
            lines.append(f"{col}.min = {lo!r}")
            lines.append(f"{col}.max = {hi!r}")
        for col, why in self.dropped.items():
            lines.append(f"{col}.dropped = {why}")
        lines.append(f"pipeline.columns = {','.join(self.columns)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PipelineStats":
        kv: dict[str, str] = {}
        order: list[str] = []
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition(" = ")
            kv[key] = value
            order.append(key)
        stats = cls(threshold=float(kv.get("pipeline.correlation_threshold", "0.7")))
        for key in order:
            name, _, stat = key.rpartition(".")
            if stat == "kind":
                kind = kv[key]
                fs = FeatureStats(kind, float(kv[f"{name}.null_fraction"]), kv[f"{name}.action"])
                if f"{name}.p1" in kv:
                    fs.caps = (float(kv[f"{name}.p1"]), float(kv[f"{name}.p99"]))
                if f"{name}.median" in kv:
                    fs.fill = float(kv[f"{name}.median"])
                if f"{name}.mode" in kv:
                    fs.fill = kv[f"{name}.mode"]
                if f"{name}.levels" in kv:
                    fs.levels = tuple(kv[f"{name}.levels"].split("|"))
                stats.features[name] = fs
            elif stat == "min":
                stats.scale[name] = (float(kv[key]), float(kv[f"{name}.max"]))
            elif stat == "dropped":
                stats.dropped[name] = kv[key]
        cols = kv.get("pipeline.columns", "")
        stats.columns = cols.split(",") if cols else []
        return stats

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()


def _level_name(feature: str, level: str) -> str:
    tag = "na" if level == NA_LEVEL else str(level).strip().lower().replace(" ", "_")
    return f"{feature}_{tag}"


def _derive(df: pd.DataFrame, stats: PipelineStats, fit: bool) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for name, fs in stats.features.items():
        col = df[name].to_numpy() if name in df.columns else np.full(len(df), None, dtype=object)
        if fs.kind == "numerical":
            col = np.asarray(col, dtype=float)
            if fs.action in (IMPUTE, IMPUTE_DUMMY):
                col, caps = cap_outliers(col, None if fit else fs.caps)
                if fit:
                    fs.caps = caps
        action, parts, fill = handle_nulls(col, fs.kind, fs.null_fraction, None if fit else fs.fill)
        if fit:
            fs.fill = fill if "" in parts else None
        if "" in parts:
            if fs.kind == "numerical":
                out[name] = parts[""]
            else:
                vals = parts[""]
                if fit:
                    fs.levels = tuple(sorted({str(v) for v in vals}))
                for level in fs.levels:
                    out[_level_name(name, level)] = (vals == level).astype(float)
        if "na" in parts:
            out[f"{name}_na"] = parts["na"]
    return out


def fit_pipeline(train: pd.DataFrame, threshold: float = 0.70) -> PipelineStats:
    stats = PipelineStats(threshold=threshold)
    for name in train.columns:
        if name in ID_COLUMNS:
            continue
        series = train[name]
        kind = feature_kind(series)
        frac = float(pd.isna(series).mean()) if len(series) else 0.0
        stats.features[name] = FeatureStats(kind, frac, null_action(kind, frac))
    derived = _derive(train, stats, fit=True)
    names = list(derived)
    scaled = []
    for col in names:
        x, mm = minmax_scale(derived[col])
        stats.scale[col] = mm
        scaled.append(x)
    X = np.column_stack(scaled) if scaled else np.zeros((len(train), 0))
    y = train["default"].to_numpy(float)
    kept, dropped = prune_correlated(X, y, threshold, names=names)
    stats.columns = kept
    stats.dropped = {k: f"correlated with {w} (|rho|={r:.4f})" for k, (w, r) in dropped.items()}
    for name, fs in stats.features.items():
        if fs.action == DROP:
            stats.dropped[name] = f"null fraction {fs.null_fraction:.4f}"
    return stats


def transform(df: pd.DataFrame, stats: PipelineStats) -> np.ndarray:
    """Feature matrix (rows follow ``df``) with columns ``stats.columns``."""
    derived = _derive(df, stats, fit=False)
    cols = []
    for col in stats.columns:
        x, _ = minmax_scale(derived[col], stats.scale[col])
        cols.append(x)
    return np.column_stack(cols) if cols else np.zeros((len(df), 0))
