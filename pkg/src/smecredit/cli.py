"""Command-line driver: ``python3 -m smecredit <command> ...``."""

from __future__ import annotations

import argparse
import hashlib
import itertools
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from . import autodiff as ad
from .config import SPLIT_DEFAULTS, ConfigError, apply_overrides, dump_config, load_config, parse_config, \
    synth_config, SYNTH_KEYS
from .explain import ExplainError, exposure_csv, exposure_density, modality_contribution, rank_features, \
    shapley_attribution, tabular_function
from .fusion import Inputs, Model, ModelSpec, SpecError, TrainingDiverged, iter_batches
from .graphs import read_ownerships, read_transactions, write_ownerships, write_transactions
from .metrics import EvalReport
from .pipeline import PipelineStats, read_loans, write_loans
from .synthetic import generate_synthetic
from . import workflow

log = logging.getLogger("smecredit")

LOANS, TX, OWN = "loans.csv", "transactions.csv", "ownerships.csv"
MANIFEST = "manifest.txt"
GRID_CAP = 512
MODEL_KEYS = {f.name for f in fields(ModelSpec)}


class CliError(RuntimeError):
    pass


# ---------------------------------------------------------------- helpers


def digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def prepare_out(out: Path, force: bool) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise CliError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


class Manifest:
    def __init__(self, command: str, cfg: dict, seed: int):
        self.lines = {"tool_version": __version__, "command": command, "seed": str(seed)}
        self.cfg = dict(cfg)
        self.inputs: dict[str, str] = {}
        self.artifacts: dict[str, str] = {}
        self.timings: dict[str, float] = {}
        self._t = time.perf_counter()

    def input(self, path: Path) -> None:
        self.inputs[str(path)] = digest(path)

    def artifact(self, name: str, path: Path) -> None:
        self.artifacts[name] = str(path)

    def lap(self, phase: str) -> None:
        now = time.perf_counter()
        self.timings[phase] = now - self._t
        self._t = now

    def write(self, out: Path) -> None:
        rows = dict(self.lines)
        rows.update({f"config.{k}": v for k, v in self.cfg.items()})
        rows.update({f"digest.{k}": v for k, v in self.inputs.items()})
        rows.update({f"artifact.{k}": v for k, v in self.artifacts.items()})
        rows.update({f"timing.{k}": f"{v:.3f}" for k, v in self.timings.items()})
        (Path(out) / MANIFEST).write_text(dump_config(rows), encoding="utf-8")


def read_manifest(d: Path) -> dict[str, str]:
    p = Path(d) / MANIFEST
    if not p.exists():
        raise CliError(f"{d} has no {MANIFEST}")
    return parse_config(p.read_text(encoding="utf-8"), str(p))


def read_dataset(data: Path, man: Manifest | None = None):
    data = Path(data)
    paths = [data / LOANS, data / TX, data / OWN]
    for p in paths:
        if not p.exists():
            raise CliError(f"missing input file {p}")
        if man is not None:
            man.input(p)
    return read_loans(paths[0]), read_transactions(paths[1]), read_ownerships(paths[2])


def _split_kwargs(cfg: dict) -> dict:
    c = {**SPLIT_DEFAULTS, **{k: v for k, v in cfg.items() if k in SPLIT_DEFAULTS}}
    try:
        return dict(train_start=c["train_start"] or None, train_months=int(c["train_months"]),
                    test_months=int(c["test_months"]), val_fraction=float(c["val_fraction"]),
                    split_seed=int(c["split_seed"]), lookback=int(c["lookback"]),
                    threshold=float(c["correlation_threshold"]))
    except ValueError as exc:
        raise ConfigError(f"split settings: {exc}") from None


def model_spec(cfg: dict, seed: int | None) -> ModelSpec:
    values = {k: v for k, v in cfg.items() if k in MODEL_KEYS}
    if seed is not None:
        values["seed"] = str(seed)
    return ModelSpec.from_dict(values)


def _check_keys(cfg: dict, allowed: set, what: str) -> None:
    unknown = sorted(k for k in cfg if k not in allowed and not k.startswith("grid."))
    if unknown:
        raise ConfigError(f"unknown {what} key(s): {', '.join(unknown)}")


# ---------------------------------------------------------------- commands


def cmd_synth(args, cfg: dict) -> None:
    _check_keys(cfg, SYNTH_KEYS, "synth")
    if args.seed is not None:
        cfg["seed"] = str(args.seed)
    scfg = synth_config(cfg)
    out = prepare_out(args.out, args.force)
    man = Manifest("synth", cfg, scfg.seed)
    loans, tx, own, info = generate_synthetic(scfg)
    man.lap("generate")
    write_loans(loans, out / LOANS)
    write_transactions(tx, out / TX)
    write_ownerships(own, out / OWN)
    for name in (LOANS, TX, OWN):
        man.artifact(name, out / name)
        man.inputs[f"output.{name}"] = digest(out / name)
    man.lines.update({f"info.{k}": str(v) for k, v in info.items()})
    man.lap("write")
    man.write(out)
    print(f"wrote {len(loans)} loans, {len(tx)} transactions, {len(own)} ownership rows to {out}")


def _prepare(args, cfg, man) -> workflow.Prepared:
    loans, tx, own = read_dataset(args.data, man)
    return workflow.prepare(loans, tx, own, **_split_kwargs(cfg))


def _write_prep(prep: workflow.Prepared, out: Path, man: Manifest) -> None:
    (out / "pipeline_stats.txt").write_text(prep.stats.to_text(), encoding="utf-8")
    prep.split_table().to_csv(out / "split.csv", index=False)
    man.artifact("pipeline_stats", out / "pipeline_stats.txt")
    man.artifact("split", out / "split.csv")
    man.lines["pipeline_digest"] = prep.stats.digest()


def cmd_prep(args, cfg: dict) -> None:
    _check_keys(cfg, set(SPLIT_DEFAULTS), "prep")
    out = prepare_out(args.out, args.force)
    man = Manifest("prep", cfg, 0)
    prep = _prepare(args, cfg, man)
    man.lap("prepare")
    _write_prep(prep, out, man)
    man.write(out)
    sizes = ", ".join(f"{k}={len(v)}" for k, v in prep.rows.items())
    print(f"split {sizes}; {len(prep.stats.columns)} features kept, {len(prep.stats.dropped)} dropped")


def _save_model(out: Path, model: Model, hist, man: Manifest) -> None:
    ad.save_params(out / "params.bin", model.params)
    (out / "model.cfg").write_text(dump_config(model.spec.to_dict()), encoding="utf-8")
    (out / "history.csv").write_text(hist.to_csv(), encoding="utf-8")
    for name in ("params.bin", "model.cfg", "history.csv"):
        man.artifact(name, out / name)
    man.lines["best_epoch"] = str(hist.best_epoch)


def cmd_train(args, cfg: dict) -> None:
    _check_keys(cfg, MODEL_KEYS | set(SPLIT_DEFAULTS), "train")
    spec = model_spec(cfg, args.seed)
    out = prepare_out(args.out, args.force)
    man = Manifest("train", {**cfg, **{f"model.{k}": v for k, v in spec.to_dict().items()}}, spec.seed)
    prep = _prepare(args, cfg, man)
    man.lap("prepare")
    model, hist = workflow.fit(prep, spec)
    man.lap("train")
    _write_prep(prep, out, man)
    _save_model(out, model, hist, man)
    man.write(out)
    best = hist.val_auc[hist.best_epoch - 1] if hist.best_epoch else float("nan")
    print(f"trained {spec.mode} model: {len(hist.epoch)} epochs, best epoch {hist.best_epoch}, "
          f"validation AUC {best:.4f}")


def _grid_trials(cfg: dict) -> tuple[list[str], list[dict]]:
    grid = {k[5:]: v for k, v in cfg.items() if k.startswith("grid.")}
    bad = sorted(k for k in grid if k not in MODEL_KEYS)
    if bad:
        raise ConfigError(f"grid keys are not model keys: {', '.join(bad)}")
    keys = sorted(grid)
    values = [[v.strip() for v in grid[k].split("|")] for k in keys]
    return keys, [dict(zip(keys, combo)) for combo in itertools.product(*values)]


def _run_trial(payload):
    prep, base, trial, index = payload
    spec = ModelSpec.from_dict({**base, **trial})
    model, hist = workflow.fit(prep, spec)
    best = hist.val_auc[hist.best_epoch - 1] if hist.best_epoch else float("nan")
    return index, best, hist.best_epoch


def cmd_grid(args, cfg: dict) -> None:
    _check_keys(cfg, MODEL_KEYS | set(SPLIT_DEFAULTS), "grid")
    keys, trials = _grid_trials(cfg)
    if len(trials) > args.max_trials:
        raise CliError(f"grid has {len(trials)} trials, above the cap of {args.max_trials}")
    out = prepare_out(args.out, args.force)
    base = {k: v for k, v in cfg.items() if k in MODEL_KEYS}
    if args.seed is not None:
        base["seed"] = str(args.seed)
    for t in trials:
        ModelSpec.from_dict({**base, **t})  # reject bad trials before any training
    man = Manifest("grid", cfg, int(base.get("seed", 0)))
    prep = _prepare(args, cfg, man)
    man.lap("prepare")
    payloads = [(prep, base, t, i) for i, t in enumerate(trials)]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_run_trial, payloads))
    else:
        results = [_run_trial(p) for p in payloads]
    results.sort(key=lambda r: r[0])
    man.lap("trials")
    rows = []
    for index, val, best_epoch in results:
        label = dump_config(trials[index]).replace("\n", "; ").strip("; ")
        rows.append((index, val, best_epoch, label))
    # best validation AUC first, ties by config text
    rows.sort(key=lambda r: (-(r[1] if np.isfinite(r[1]) else -np.inf), r[3]))
    lines = ["rank,trial," + ",".join(keys) + ",val_auc,best_epoch"]
    for rank, (index, val, best_epoch, _) in enumerate(rows, start=1):
        vals = [f'"{trials[index][k]}"' if "," in trials[index][k] else trials[index][k] for k in keys]
        lines.append(f"{rank},{index}," + ",".join(vals) + f",{val:.6f},{best_epoch}")
    (out / "trials.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    best_cfg = {k: v for k, v in cfg.items() if not k.startswith("grid.")}
    best_cfg.update(trials[rows[0][0]])
    (out / "best.cfg").write_text(dump_config(best_cfg), encoding="utf-8")
    man.artifact("trials", out / "trials.csv")
    man.artifact("best", out / "best.cfg")
    man.lines["n_trials"] = str(len(trials))
    man.write(out)
    print(f"{len(trials)} trials; best validation AUC {rows[0][1]:.4f} (trial {rows[0][0]})")


def load_model(model_dir: Path, data: Path, man: Manifest) -> tuple[workflow.Prepared, Model]:
    model_dir = Path(model_dir)
    mman = read_manifest(model_dir)
    stats_path = model_dir / "pipeline_stats.txt"
    stats = PipelineStats.from_text(stats_path.read_text(encoding="utf-8"))
    if stats.digest() != mman.get("pipeline_digest"):
        raise CliError(f"pipeline stats in {model_dir} do not match the model manifest digest; "
                       "refusing to score with mismatched fitted statistics")
    spec = ModelSpec.from_dict(parse_config((model_dir / "model.cfg").read_text(encoding="utf-8")))
    params = ad.load_params(model_dir / "params.bin")
    for name in ("pipeline_stats.txt", "split.csv", "params.bin", "model.cfg"):
        man.input(model_dir / name)
    loans, tx, own = read_dataset(data, man)
    split = pd.read_csv(model_dir / "split.csv", dtype=str)
    prep = workflow.prepare(loans, tx, own, stats=stats, split_table=split)
    model = Model(spec, len(stats.columns), len(stats.columns), params)
    expected = Model(spec, len(stats.columns), len(stats.columns)).params
    if set(expected) != set(params) or any(expected[k].shape != params[k].shape for k in expected):
        raise CliError("stored parameters do not fit the stored model config and pipeline")
    return prep, model


LEAKAGE_BANNER = "WARNING: evaluating on the {split} split, which the model was fitted on; " \
                 "scores are optimistic\n"


def cmd_eval(args, cfg: dict) -> None:
    out = prepare_out(args.out, args.force)
    man = Manifest("eval", cfg, args.seed or 0)
    prep, model = load_model(args.model, args.data, man)
    man.lap("load")
    scores = workflow.score(prep, model, args.split)
    labels = prep.labels[prep.rows[args.split]]
    report = EvalReport.compute(scores, labels, B=args.bootstrap, seed=args.seed or 0)
    man.lap("evaluate")
    table = report.to_table()
    if args.split != "test":
        banner = LEAKAGE_BANNER.format(split=args.split)
        table = banner + table
        print(banner, file=sys.stderr, end="")
    (out / "metrics.csv").write_text(report.to_csv(), encoding="utf-8")
    (out / "metrics.txt").write_text(table, encoding="utf-8")
    ids = prep.loans["loan_id"].to_numpy()[prep.rows[args.split]]
    lines = ["loan_id,score,default"] + [f"{l},{s:.10f},{int(y)}" for l, s, y in zip(ids, scores, labels)]
    (out / "scores.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    for name in ("metrics.csv", "metrics.txt", "scores.csv"):
        man.artifact(name, out / name)
    man.lines["split"] = args.split
    man.write(out)
    print(table, end="")


def _split_inputs(prep, model, split):
    data = prep.loan_data(model.spec.layer_kinds() if model.spec.uses_graph else None)
    return iter_batches(model, data, prep.rows[split], 1024)


def cmd_contrib(args, cfg: dict) -> None:
    out = prepare_out(args.out, args.force)
    man = Manifest("contrib", cfg, args.seed or 0)
    prep, model = load_model(args.model, args.data, man)
    spec = model.spec
    if spec.mode != "bimodal" or spec.strategy not in ("SimpleConcatAtt", "HybridConcatAtt"):
        raise CliError(f"strategy {spec.strategy} ({spec.mode}) has no attention block; "
                       "contributions need SimpleConcatAtt or HybridConcatAtt")
    c_n, c_t = [], []
    for _, x in _split_inputs(prep, model, args.split):
        rec = modality_contribution(model, x)
        c_n.append(rec.c_n)
        c_t.append(rec.c_t)
    from .explain import ContributionRecord
    rec = ContributionRecord(np.concatenate(c_n), np.concatenate(c_t), np.zeros(0), np.zeros(0))
    (out / "contributions.csv").write_text(rec.to_csv(), encoding="utf-8")
    man.artifact("contributions", out / "contributions.csv")
    man.write(out)
    print(f"mean C_N {rec.c_n.mean():.4f}, mean C_T {rec.c_t.mean():.4f} over {len(rec.c_n)} loans")


def cmd_explain(args, cfg: dict) -> None:
    out = prepare_out(args.out, args.force)
    seed = args.seed or 0
    man = Manifest("explain", cfg, seed)
    prep, model = load_model(args.model, args.data, man)
    if not model.spec.uses_tabular:
        raise CliError("attributions are over tabular features; a unimodal model has no tabular channel")
    rng = np.random.default_rng(seed)
    train_rows = prep.rows["train"]
    background = prep.features[np.sort(rng.choice(train_rows, min(100, len(train_rows)), replace=False))]
    target_rows = prep.rows[args.split]
    chosen = np.sort(rng.choice(len(target_rows), min(args.instances, len(target_rows)), replace=False))
    rows = target_rows[chosen]
    data = prep.loan_data(model.spec.layer_kinds() if model.spec.uses_graph else None)
    attributions = []
    for k, (r, x) in enumerate(iter_batches(model, data, rows, 1)):
        f = tabular_function(model, x, 0)
        attributions.append(shapley_attribution(f, x.tab[0], background, args.samples, seed + k, exact=False))
    attributions = np.array(attributions)
    names = prep.stats.columns
    ranking = rank_features(attributions, names)
    lines = ["rank,feature,mean_abs_attribution"]
    lines += [f"{i},{n},{v:.8f}" for i, (n, v) in enumerate(ranking, start=1)]
    (out / "ranking.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    man.artifact("ranking", out / "ranking.csv")
    man.write(out)
    for i, (n, v) in enumerate(ranking[:10], start=1):
        print(f"{i:>2} {n:<20} {v:.5f}")


def cmd_exposure(args, cfg: dict) -> None:
    out = prepare_out(args.out, args.force)
    man = Manifest("exposure", cfg, args.seed or 0)
    prep, model = load_model(args.model, args.data, man)
    scores_arr = workflow.score(prep, model, args.split)
    ids = prep.loans["loan_id"].to_numpy()[prep.rows[args.split]]
    scores = dict(zip(ids.tolist(), scores_arr.tolist()))
    defaulted = dict(zip(prep.loans["loan_id"].tolist(), prep.loans["default"].tolist()))
    sets = workflow.cohort_sets(prep, args.split, workflow.DIRECTED_FT)
    groups = [exposure_density(scores, sets, defaulted, d, weighted=args.weighted) for d in ("in", "out")]
    (out / "exposure.csv").write_text(exposure_csv(groups), encoding="utf-8")
    man.artifact("exposure", out / "exposure.csv")
    man.write(out)
    for g in groups:
        print(f"{g.direction:>3}: {g.count} loans, mean score {g.mean:.4f}")


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed")
    common.add_argument("--jobs", type=int, default=1, help="parallel workers (grid)")
    common.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key; repeatable")
    common.add_argument("--config", type=Path, default=None, help="key = value config file")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="smecredit", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_synth)

    for name, func, helptext in (("prep", cmd_prep, "split and fit the feature pipeline"),
                                 ("train", cmd_train, "train one model"),
                                 ("grid", cmd_grid, "exhaustive grid search")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--data", type=Path, required=True)
        s.add_argument("--out", type=Path, required=True)
        if name == "grid":
            s.add_argument("--max-trials", type=int, default=GRID_CAP)
        s.set_defaults(func=func)

    for name, func, helptext in (("eval", cmd_eval, "metrics with bootstrap intervals"),
                                 ("contrib", cmd_contrib, "modality contributions"),
                                 ("explain", cmd_explain, "Shapley feature attributions"),
                                 ("exposure", cmd_exposure, "score densities by exposure direction")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--model", type=Path, required=True)
        s.add_argument("--data", type=Path, required=True)
        s.add_argument("--out", type=Path, required=True)
        s.add_argument("--split", choices=workflow.SPLITS, default="test")
        if name == "eval":
            s.add_argument("--bootstrap", type=int, default=1000)
        if name == "explain":
            s.add_argument("--instances", type=int, default=20)
            s.add_argument("--samples", type=int, default=500)
        if name == "exposure":
            s.add_argument("--weighted", action="store_true")
        s.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = apply_overrides(load_config(args.config), args.set)
        args.func(args, cfg)
    except (CliError, ConfigError, SpecError, ExplainError, TrainingDiverged, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0
