"""Library-level experiment steps shared by the command line and the tests."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .fusion import LoanData, Model, ModelSpec, assemble, build_loan_data, predict, train, History
from .graphs import FT, LayerKind, build_snapshots
from .months import parse_months
from .pipeline import PipelineStats, Split, fit_pipeline, temporal_split, transform

SPLITS = ("train", "validation", "test")


@dataclass
class Prepared:
    """Loans with their split, fitted pipeline and scaled feature matrix."""

    loans: pd.DataFrame
    transactions: pd.DataFrame
    ownerships: pd.DataFrame
    stats: PipelineStats
    features: np.ndarray
    rows: dict[str, np.ndarray]
    _graphs: dict = field(default_factory=dict, repr=False)

    @property
    def labels(self) -> np.ndarray:
        return self.loans["default"].to_numpy().astype(float)

    def split_table(self) -> pd.DataFrame:
        part = np.full(len(self.loans), "", dtype=object)
        for name, r in self.rows.items():
            part[r] = name
        keep = part != ""
        return pd.DataFrame({"loan_id": self.loans["loan_id"].to_numpy()[keep], "split": part[keep]})

    def loan_data(self, layers: tuple[LayerKind, ...] | None) -> LoanData:
        """Feature/graph bundle, cached per layer configuration."""
        key = tuple(layers) if layers else None
        if key not in self._graphs:
            wanted = np.concatenate(list(self.rows.values()))
            months = np.unique(self.loans["origination_month"].to_numpy()[wanted])
            self._graphs[key] = build_loan_data(self.loans, self.features, self.transactions,
                                                self.ownerships, key, months)
        return self._graphs[key]


def _months_as_int(loans: pd.DataFrame) -> pd.DataFrame:
    if loans["origination_month"].dtype.kind not in "iu":
        loans = loans.copy()
        loans["origination_month"] = parse_months(loans["origination_month"])
    return loans


def _rows_for(loans: pd.DataFrame, split: Split) -> dict[str, np.ndarray]:
    index = {lid: k for k, lid in enumerate(loans["loan_id"].tolist())}
    return {name: np.array([index[l] for l in part["loan_id"]], dtype=np.int64)
            for name, part in zip(SPLITS, split)}


def prepare(loans, transactions, ownerships, train_start=None, train_months=18, test_months=10,
            val_fraction=0.2, split_seed=0, lookback=6, threshold=0.70,
            stats: PipelineStats | None = None, split_table: pd.DataFrame | None = None) -> Prepared:
    """Split (or reuse a stored split), fit (or reuse) the pipeline, scale all loans."""
    loans = _months_as_int(loans).reset_index(drop=True)
    if split_table is not None:
        index = {lid: k for k, lid in enumerate(loans["loan_id"].tolist())}
        rows = {}
        for name in SPLITS:
            ids = split_table.loc[split_table["split"] == name, "loan_id"]
            missing = [l for l in ids if l not in index]
            if missing:
                raise ValueError(f"split table names unknown loan {missing[0]}")
            rows[name] = np.array([index[l] for l in ids], dtype=np.int64)
    else:
        rows = _rows_for(loans, temporal_split(loans, train_start, train_months, test_months,
                                               val_fraction, split_seed, lookback))
    if stats is None:
        stats = fit_pipeline(loans.iloc[rows["train"]], threshold)
    X = transform(loans, stats)
    return Prepared(loans, transactions, ownerships, stats, X, rows)


def fit(prep: Prepared, spec: ModelSpec, epochs: int | None = None) -> tuple[Model, History]:
    data = prep.loan_data(spec.layer_kinds() if spec.uses_graph else None)
    model = assemble(spec, prep.features.shape[1])
    hist = train(model, data, prep.rows["train"], prep.rows["validation"], epochs)
    return model, hist


def score(prep: Prepared, model: Model, split: str = "test") -> np.ndarray:
    data = prep.loan_data(model.spec.layer_kinds() if model.spec.uses_graph else None)
    return predict(model, data, prep.rows[split])


def cohort_sets(prep: Prepared, split: str, layers) -> list:
    """Snapshot sets for every cohort holding loans of ``split``."""
    loans = prep.loans
    months = np.unique(loans["origination_month"].to_numpy()[prep.rows[split]])
    base = loans[["loan_id", "company_id", "origination_month"]]
    return [build_snapshots(base, prep.transactions, prep.ownerships, int(c), layers) for c in months]


DIRECTED_FT = (LayerKind(FT, directed=True, weighted=True),)
