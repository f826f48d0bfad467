"""``cmprop`` command-line pipeline.

Stages share one run directory::

    featurize  CSV -> vocab.txt, features.txt, molecules.csv, split.txt,
               targets_trainval.csv, targets_test.csv
    stats      entropy / distribution reports, KDE curve
    select     forest importances + Top-N pooling -> select/selected.txt
    train      one model per CV fold + Table-2-style fold metrics
    predict    model + vocabulary -> predictions for a new CSV
    explain    Shapley ranking and beeswarm data
    report     parity / relative-error data and RAE threshold table

Exit codes: 0 ok, 2 input error, 3 numerical failure, 4 config error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import (DatasetError, SplitPlan, conditional_entropy, distribution_summary,
                      load_csv, make_split)
from .explain import explain_rows, make_background, summarize
from .featurize import (FeatureVocabulary, FormatError, build_feature_matrix,
                        build_vocabulary, load_feature_matrix, save_feature_matrix)
from .forest import (ForestConfig, feature_importances, fit_forest, grid_search,
                     predict as forest_predict, topn_select)
from .metrics import MetricError, metric_report, relative_errors, rape_fractions
from .models import (AnnConfig, GprConfig, NotPositiveDefinite, TrainingDiverged,
                     ann_predict, ann_train, gpr_predict, gpr_train)
from .persist import ModelFileError, load_model_with_meta, save_model
from .smiles import SmilesError, ValenceError, molecule_from_smiles

log = logging.getLogger("cmprop")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_CONFIG = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


DEFAULTS = {
    "run": {"seed": "0", "out_dir": "run"},
    "data": {"csv": "", "smiles_column": "smiles", "target_column": "y", "id_column": "",
             "units": "", "max_bad_fraction": "0.0"},
    "featurize": {"k_max": "4"},
    "split": {"test_frac": "0.05", "folds": "6", "seed": ""},
    "stats": {"kde_points": "256", "y_decimals": "6", "rows": "trainval"},
    "forest": {"n_estimators": "500", "max_depth": "30", "min_samples_split": "2",
               "min_samples_leaf": "2", "features_per_split": "all", "bootstrap": "true",
               "grid_search": "false", "grid_folds": "5", "grid_n_estimators": "100,300,500",
               "grid_max_depth": "10,20,30,none", "grid_min_samples_split": "2,5",
               "grid_min_samples_leaf": "1,2", "n_jobs": "1"},
    "select": {"enabled": "true", "mode": "joint", "start": "20", "step": "20",
               "trainer": "", "retain_all_first": "false", "folds": "6", "features": ""},
    "model": {"type": "ann"},
    "ann": {"hidden_layers": "500", "learning_rate": "1e-4", "l2_lambda": "1e-4",
            "batch_size": "32", "max_epochs": "2000", "patience": "100"},
    "gpr": {"length_scales": "0.5,1,2,5", "amplitudes": "1,1,1,1", "alpha": "1e-5",
            "restarts": "5", "seed": "19", "normalize_y": "true"},
    "explain": {"top_k": "20", "n_permutations": "2048", "background_cap": "200",
                "method": "auto", "fold": "1"},
    "report": {"svg": "true"},
}


# -- configuration --------------------------------------------------------

def load_config(path: str | None, overrides: list[str] = ()) -> configparser.ConfigParser:
    cfg = configparser.ConfigParser(interpolation=None)
    cfg.read_dict(DEFAULTS)
    if path:
        if not Path(path).is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            cfg.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
        base = Path(path).resolve().parent
        for sec, key in (("data", "csv"), ("run", "out_dir")):
            val = cfg.get(sec, key)
            if val and not Path(val).is_absolute():
                cfg.set(sec, key, str(base / val))
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value: {item!r}")
        lhs, value = item.split("=", 1)
        sec, key = lhs.split(".", 1)
        if not cfg.has_section(sec):
            cfg.add_section(sec)
        cfg.set(sec, key, value)
    return cfg


def _get(cfg, sec, key, kind=str):
    raw = cfg.get(sec, key, fallback="").strip()
    try:
        if kind is bool:
            return cfg.getboolean(sec, key)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"[{sec}] {key}={raw!r}: {exc}") from None
    return raw


def _floats(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def stage_seed(cfg, stage: str) -> int:
    """Seed for ``stage`` derived by hashing it with the run seed."""
    base = _get(cfg, "run", "seed", int)
    digest = hashlib.sha256(f"{base}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def forest_config(cfg) -> ForestConfig:
    depth = _get(cfg, "forest", "max_depth")
    fps = _get(cfg, "forest", "features_per_split")
    try:
        return ForestConfig(
            n_estimators=_get(cfg, "forest", "n_estimators", int),
            max_depth=None if depth.lower() in ("none", "") else int(depth),
            min_samples_split=_get(cfg, "forest", "min_samples_split", int),
            min_samples_leaf=_get(cfg, "forest", "min_samples_leaf", int),
            features_per_split=int(fps) if fps.isdigit() else fps,
            bootstrap=_get(cfg, "forest", "bootstrap", bool),
            seed=stage_seed(cfg, "forest"),
        )
    except ValueError as exc:
        raise ConfigError(f"[forest] {exc}") from None


def forest_grid(cfg) -> dict:
    grid = {}
    for key in ("n_estimators", "max_depth", "min_samples_split", "min_samples_leaf"):
        vals = []
        for v in _get(cfg, "forest", f"grid_{key}").split(","):
            v = v.strip()
            if v:
                vals.append(None if v.lower() == "none" else int(v))
        grid[key] = vals
    return grid


def ann_config(cfg, seed: int) -> AnnConfig:
    try:
        return AnnConfig(
            hidden_layers=tuple(int(w) for w in _get(cfg, "ann", "hidden_layers").split(",")),
            learning_rate=_get(cfg, "ann", "learning_rate", float),
            l2_lambda=_get(cfg, "ann", "l2_lambda", float),
            batch_size=_get(cfg, "ann", "batch_size", int),
            max_epochs=_get(cfg, "ann", "max_epochs", int),
            early_stop_patience=_get(cfg, "ann", "patience", int),
            seed=seed,
        )
    except ValueError as exc:
        raise ConfigError(f"[ann] {exc}") from None


def gpr_config(cfg) -> GprConfig:
    try:
        return GprConfig(
            length_scales=_floats(_get(cfg, "gpr", "length_scales")),
            amplitudes=_floats(_get(cfg, "gpr", "amplitudes")),
            alpha=_get(cfg, "gpr", "alpha", float),
            restarts=_get(cfg, "gpr", "restarts", int),
            seed=_get(cfg, "gpr", "seed", int),
            normalize_y=_get(cfg, "gpr", "normalize_y", bool),
        )
    except ValueError as exc:
        raise ConfigError(f"[gpr] {exc}") from None


def validate_config(cfg, need_csv: bool = False) -> None:
    if not cfg.get("run", "seed", fallback="").strip():
        raise ConfigError("[run] seed is required")
    _get(cfg, "run", "seed", int)
    if need_csv:
        path = cfg.get("data", "csv")
        if not path:
            raise ConfigError("[data] csv is required")
        if not Path(path).is_file():
            raise ConfigError(f"[data] csv does not exist: {path}")
    if _get(cfg, "model", "type") not in ("ann", "gpr", "rf"):
        raise ConfigError("[model] type must be ann, gpr or rf")
    if _get(cfg, "select", "mode") not in ("joint", "merged"):
        raise ConfigError("[select] mode must be joint or merged")
    k_max = _get(cfg, "featurize", "k_max", int)
    if not 1 <= k_max <= 4:
        raise ConfigError("[featurize] k_max must be in 1..4")


# -- run directory helpers ------------------------------------------------

def out_dir(cfg) -> Path:
    return Path(cfg.get("run", "out_dir"))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return path


def _write_config_snapshot(cfg, path: Path):
    buf = io.StringIO()
    cfg.write(buf)
    _write(path, buf.getvalue())


def update_manifest(run: Path, section: str, entries: dict, cfg=None) -> None:
    """Merge ``entries`` into ``manifest.txt`` and refresh artifact checksums."""
    man = configparser.ConfigParser(interpolation=None)
    man.optionxform = str
    path = run / "manifest.txt"
    if path.exists():
        man.read(path, encoding="utf-8")
    if not man.has_section("manifest"):
        man.add_section("manifest")
    man.set("manifest", "tool_version", __version__)
    if cfg is not None:
        for sec in cfg.sections():
            name = f"config.{sec}"
            if man.has_section(name):
                man.remove_section(name)
            man.add_section(name)
            for k, v in cfg.items(sec):
                man.set(name, k, v)
    if man.has_section(section):
        man.remove_section(section)
    man.add_section(section)
    for k, v in entries.items():
        man.set(section, str(k), str(v))
    # files untouched since the last manifest keep their recorded digest, so a
    # stage never opens artifacts it did not produce (e.g. held-out targets)
    known = dict(man.items("artifacts")) if man.has_section("artifacts") else {}
    stamp = path.stat().st_mtime_ns if path.exists() else -1
    if man.has_section("artifacts"):
        man.remove_section("artifacts")
    man.add_section("artifacts")
    for f in sorted(run.rglob("*")):
        if f.is_file() and f.name != "manifest.txt":
            rel = f.relative_to(run).as_posix()
            fresh = rel not in known or f.stat().st_mtime_ns >= stamp
            man.set("artifacts", rel, sha256_file(f) if fresh else known[rel])
    buf = io.StringIO()
    man.write(buf)
    _write(path, buf.getvalue())


def read_targets(path: Path) -> dict[int, float]:
    with open(path, newline="", encoding="utf-8") as fh:
        return {int(r["row"]): float(r["y"]) for r in csv.DictReader(fh)}


def read_molecules(run: Path) -> list[dict]:
    with open(run / "molecules.csv", newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def load_run(run: Path):
    if not (run / "features.txt").exists():
        raise InputError(f"{run}: no features.txt; run `cmprop featurize` first")
    vocab = FeatureVocabulary.load(run / "vocab.txt")
    X = load_feature_matrix(run / "features.txt")
    split = SplitPlan.loads((run / "split.txt").read_text(encoding="utf-8"))
    return vocab, X, split


def trainval_targets(run: Path, split: SplitPlan) -> np.ndarray:
    """Target vector aligned to ``split.trainval_indices``."""
    t = read_targets(run / "targets_trainval.csv")
    return np.array([t[int(i)] for i in split.trainval_indices])


def selected_columns(run: Path, vocab: FeatureVocabulary, cfg) -> list[int]:
    explicit = _get(cfg, "select", "features")
    path = run / "select" / "selected.txt"
    if explicit:
        labels = [s.strip() for s in explicit.split(",") if s.strip()]
    elif path.exists():
        labels = [s for s in path.read_text(encoding="utf-8").splitlines() if s]
    else:
        return list(range(len(vocab)))
    index = vocab.label_index()
    missing = [lab for lab in labels if lab not in index]
    if missing:
        raise InputError(f"selected features not in vocabulary: {missing[:5]}")
    return [index[lab] for lab in labels]


# -- model wiring -----------------------------------------------------------

def fit_model(kind: str, cfg, X_tr, y_tr, X_val=None, y_val=None, seed: int = 0):
    if kind == "ann":
        return ann_train(X_tr, y_tr, X_val, y_val, ann_config(cfg, seed))
    if kind == "gpr":
        return gpr_train(X_tr, y_tr, gpr_config(cfg))
    if kind == "rf":
        return fit_forest(X_tr, y_tr, replace(forest_config(cfg), seed=seed),
                          n_jobs=_get(cfg, "forest", "n_jobs", int))
    raise ConfigError(f"unknown model type {kind!r}")


def model_predict(model, X, with_variance=False):
    kind = type(model).__name__
    if kind == "AnnModel":
        out = ann_predict(model, X), None
    elif kind == "GprModel":
        pred = gpr_predict(model, X)
        out = pred.mean, pred.variance
    else:
        out = forest_predict(model, X), None
    return out if with_variance else out[0]


def make_trainer(kind: str, cfg, seed: int):
    """Fold trainer for Top-N pooling: ``(X_train, y_train, X_val) -> yhat``.

    ANN early stopping uses a seeded sixth of the training rows.
    """
    def trainer(X_tr, y_tr, X_val):
        if kind == "ann":
            rng = np.random.default_rng(seed)
            perm = rng.permutation(len(y_tr))
            n_es = max(1, len(y_tr) // 6)
            es, fit = perm[:n_es], perm[n_es:]
            model = fit_model("ann", cfg, X_tr[fit], y_tr[fit], X_tr[es], y_tr[es], seed)
        else:
            model = fit_model(kind, cfg, X_tr, y_tr, seed=seed)
        return model_predict(model, X_val)
    return trainer


# -- stages -----------------------------------------------------------------

def cmd_featurize(cfg) -> Path:
    validate_config(cfg, need_csv=True)
    run = out_dir(cfg)
    run.mkdir(parents=True, exist_ok=True)
    csv_path = cfg.get("data", "csv")
    table = load_csv(csv_path, _get(cfg, "data", "smiles_column"),
                     _get(cfg, "data", "target_column"),
                     _get(cfg, "data", "id_column") or None,
                     _get(cfg, "data", "units") or None)
    if table.skipped:
        log.info("skipped %d rows with blank targets", table.skipped)

    graphs, kept, bad = [], [], []
    for i, row in enumerate(table.rows):
        try:
            graphs.append(molecule_from_smiles(row.smiles))
            kept.append(i)
        except (SmilesError, ValenceError) as exc:
            bad.append((i, row.smiles, str(exc)))
    tolerance = _get(cfg, "data", "max_bad_fraction", float)
    if bad:
        for i, smi, msg in bad:
            log.error("row %d (%s): %s", i + 1, smi, msg)
        if len(bad) > tolerance * len(table.rows):
            rows = ", ".join(str(i + 1) for i, _, _ in bad)
            raise InputError(f"{len(bad)} unparseable SMILES (data rows {rows})")
    if not graphs:
        raise InputError("no parseable molecules")

    k_max = _get(cfg, "featurize", "k_max", int)
    vocab = build_vocabulary(graphs, k_max)
    X, _ = build_feature_matrix(graphs, vocab)
    log.info("vocabulary: %d first-order, %d higher-order categories",
             len(vocab.first_order), len(vocab.higher_order))

    split_seed = _get(cfg, "split", "seed")
    split = make_split(len(graphs), _get(cfg, "split", "test_frac", float),
                       _get(cfg, "split", "folds", int),
                       int(split_seed) if split_seed else stage_seed(cfg, "split"))
    vocab.save(run / "vocab.txt")
    save_feature_matrix(X, run / "features.txt")
    _write(run / "split.txt", split.dumps())
    ids = table.ids
    mol_lines = ["row,data_row,id,smiles"]
    mol_lines += [f"{r},{i + 1},{ids[i]},{table.rows[i].smiles}" for r, i in enumerate(kept)]
    _write(run / "molecules.csv", "\n".join(mol_lines) + "\n")
    test = set(int(i) for i in split.test_indices)
    tv_lines, te_lines = ["row,y"], ["row,y"]
    for r, i in enumerate(kept):
        (te_lines if r in test else tv_lines).append(f"{r},{table.rows[i].y!r}")
    _write(run / "targets_trainval.csv", "\n".join(tv_lines) + "\n")
    _write(run / "targets_test.csv", "\n".join(te_lines) + "\n")
    _write_config_snapshot(cfg, run / "config.ini")
    update_manifest(run, "featurize", {
        "input_csv": csv_path, "input_sha256": sha256_file(csv_path),
        "rows": len(graphs), "bad_rows": len(bad), "skipped_blank_targets": table.skipped,
        "first_order_categories": len(vocab.first_order),
        "higher_order_categories": len(vocab.higher_order),
        "property": table.property_name, "units": table.units,
    }, cfg)
    return run


def cmd_stats(cfg) -> Path:
    run = out_dir(cfg)
    _, X, split = load_run(run)
    which = _get(cfg, "stats", "rows")
    if which == "all":
        t = read_targets(run / "targets_trainval.csv")
        t.update(read_targets(run / "targets_test.csv"))
        idx = np.arange(X.shape[0])
    elif which == "trainval":
        t = read_targets(run / "targets_trainval.csv")
        idx = split.trainval_indices
    else:
        raise ConfigError("[stats] rows must be 'trainval' or 'all'")
    y = np.array([t[int(i)] for i in idx])
    Xs = X[idx]
    vocab = FeatureVocabulary.load(run / "vocab.txt")
    full = conditional_entropy(Xs, y, _get(cfg, "stats", "y_decimals", int))
    first = conditional_entropy(Xs[:, vocab.first_order], y, _get(cfg, "stats", "y_decimals", int))
    summary = distribution_summary(y, _get(cfg, "stats", "kde_points", int))
    out = run / "stats"
    _write(out / "entropy.txt", full.to_text() + f"h_bits_first_order_only={first.h_bits:.6f}\n")
    _write(out / "distribution.txt", summary.to_text())
    kde = ["x,density"] + [f"{float(x)!r},{float(d)!r}" for x, d in zip(summary.kde_x, summary.kde_density)]
    _write(out / "kde.csv", "\n".join(kde) + "\n")
    update_manifest(run, "stats", {"rows": which, "h_bits": f"{full.h_bits:.6f}",
                                   "collision_molecule_count": full.collision_molecule_count})
    return out


def cmd_select(cfg) -> Path:
    run = out_dir(cfg)
    vocab, X, split = load_run(run)
    idx = split.trainval_indices
    Xtv = X[idx].toarray().astype(float)
    y = trainval_targets(run, split)
    out = run / "select"
    if not _get(cfg, "select", "enabled", bool):
        _write(out / "selected.txt", "\n".join(vocab.labels) + "\n")
        update_manifest(run, "select", {"mode": "disabled", "n_selected": len(vocab)})
        return out
    fcfg = forest_config(cfg)
    n_jobs = _get(cfg, "forest", "n_jobs", int)
    if _get(cfg, "forest", "grid_search", bool):
        gs = grid_search(Xtv, y, forest_grid(cfg), _get(cfg, "forest", "grid_folds", int),
                         stage_seed(cfg, "grid"), base=fcfg, n_jobs=n_jobs)
        fcfg = gs.best
        _write(out / "grid_search.csv", gs.to_csv())
    forest = fit_forest(Xtv, y, fcfg, n_jobs=n_jobs)
    imp = feature_importances(forest, vocab.labels, vocab.first_order)
    _write(out / "importance.csv", imp.to_csv())

    first, higher = imp.first_order_ranking, imp.higher_order_ranking
    trainer_kind = _get(cfg, "select", "trainer") or _get(cfg, "model", "type")
    result = topn_select(
        Xtv[:, first], Xtv[:, higher], y,
        make_trainer(trainer_kind, cfg, stage_seed(cfg, "select")),
        start=_get(cfg, "select", "start", int), step=_get(cfg, "select", "step", int),
        mode=_get(cfg, "select", "mode"),
        labels1=[vocab.labels[j] for j in first], labels2=[vocab.labels[j] for j in higher],
        importances=np.concatenate([imp.importances[first], imp.importances[higher]]),
        retain_all_first=_get(cfg, "select", "retain_all_first", bool),
        folds=_get(cfg, "select", "folds", int), seed=stage_seed(cfg, "select-cv"),
    )
    _write(out / "trace.csv", result.trace_csv())
    _write(out / "selected.txt", "\n".join(result.selected_labels) + "\n")
    update_manifest(run, "select", {
        "mode": result.mode, "n_selected": result.n_selected,
        "best_m": result.best_m, "best_n": result.best_n,
        "features": ",".join(result.selected_labels),
    })
    return out


FOLD_COLUMNS = ("train_rmse", "val_rmse", "test_rmse", "train_mape", "val_mape", "test_mape")


def cmd_train(cfg) -> Path:
    run = out_dir(cfg)
    vocab, X, split = load_run(run)
    cols = selected_columns(run, vocab, cfg)
    kind = _get(cfg, "model", "type")
    Xd = X.toarray().astype(float)[:, cols]
    t_tv = read_targets(run / "targets_trainval.csv")
    out = run / "train"
    out.mkdir(parents=True, exist_ok=True)
    test_idx = split.test_indices
    fitted = {}
    failures = {}
    for fold in range(1, split.n_folds + 1):
        tr, va = split.train_indices(fold), split.fold_indices(fold)
        y_tr = np.array([t_tv[int(i)] for i in tr])
        y_va = np.array([t_tv[int(i)] for i in va])
        seed = stage_seed(cfg, f"train/fold{fold}")
        try:
            model = fit_model(kind, cfg, Xd[tr], y_tr, Xd[va], y_va, seed)
        except (TrainingDiverged, NotPositiveDefinite) as exc:
            log.error("fold %d aborted: %s", fold, exc)
            failures[fold] = str(exc)
            continue
        meta = {"fold": fold, "model_type": kind, "feature_labels": [vocab.labels[c] for c in cols],
                "feature_columns": cols, "vocab_sha256": vocab.sha256(), "k_max": vocab.k_max,
                "seed": seed}
        save_model(model, out / f"fold_{fold}.model", meta)
        if kind == "ann":
            _write(out / f"history_fold_{fold}.csv", model.history_csv())
        pred, var = model_predict(model, Xd, with_variance=True)
        lines = ["row,split,yhat" + (",variance" if var is not None else "")]
        labels = {int(i): "train" for i in tr} | {int(i): "val" for i in va} | \
            {int(i): "test" for i in test_idx}
        for i in range(Xd.shape[0]):
            line = f"{i},{labels[i]},{float(pred[i])!r}"
            if var is not None:
                line += f",{float(var[i])!r}"
            lines.append(line)
        _write(out / f"predictions_fold_{fold}.csv", "\n".join(lines) + "\n")
        fitted[fold] = (pred, tr, va, y_tr, y_va)

    if not fitted:
        raise TrainingDiverged(0, "every fold failed")
    # test targets are read only after every fold model is fixed
    t_te = read_targets(run / "targets_test.csv")
    y_te = np.array([t_te[int(i)] for i in test_idx])
    rows = ["fold," + ",".join(FOLD_COLUMNS)]
    reports = {}
    for fold, (pred, tr, va, y_tr, y_va) in fitted.items():
        parts = {"train": metric_report(y_tr, pred[tr], len(cols)),
                 "val": metric_report(y_va, pred[va], len(cols)),
                 "test": metric_report(y_te, pred[test_idx], len(cols))}
        for name, rep in parts.items():
            _write(out / f"metrics_fold_{fold}_{name}.txt", rep.to_text())
        reports[fold] = parts
        vals = [parts[s].rmse for s in ("train", "val", "test")] + \
               [parts[s].mape for s in ("train", "val", "test")]
        rows.append(f"{fold}," + ",".join(f"{v:.6g}" for v in vals))
    _write(out / "fold_metrics.csv", "\n".join(rows) + "\n")
    entries = {"model_type": kind, "n_features": len(cols)}
    for fold, parts in reports.items():
        entries[f"fold{fold}"] = " ".join(
            f"{s}_{m}={getattr(parts[s], m):.6g}" for s in ("train", "val", "test")
            for m in ("r2", "rmse", "mae", "mape"))
    for fold, msg in failures.items():
        entries[f"fold{fold}_failed"] = msg
    update_manifest(run, "train", entries)
    return out


def _model_context(model_path: Path, vocab_path: str | None):
    model, meta = load_model_with_meta(model_path)
    vpath = Path(vocab_path) if vocab_path else model_path.resolve().parent.parent / "vocab.txt"
    vocab = FeatureVocabulary.load(vpath)
    if meta.get("vocab_sha256") and meta["vocab_sha256"] != vocab.sha256():
        raise InputError(f"vocabulary {vpath} does not match the model (checksum differs)")
    return model, meta, vocab


def _featurize_input(csv_path, vocab, meta, smiles_column, id_column):
    table = load_csv(csv_path, smiles_column, None, id_column or None)
    graphs = []
    for i, row in enumerate(table.rows):
        try:
            graphs.append(molecule_from_smiles(row.smiles))
        except (SmilesError, ValenceError) as exc:
            raise InputError(f"{csv_path}: data row {i + 1}: {exc}") from exc
    X, dropped = build_feature_matrix(graphs, vocab)
    cols = meta.get("feature_columns", list(range(len(vocab))))
    return table, X.toarray().astype(float)[:, cols], dropped


def cmd_predict(model_path, input_csv, out_path, smiles_column="smiles", id_column="",
                vocab_path=None) -> Path:
    model_path = Path(model_path)
    model, meta, vocab = _model_context(model_path, vocab_path)
    table, Xs, dropped = _featurize_input(input_csv, vocab, meta, smiles_column, id_column)
    pred, var = model_predict(model, Xs, with_variance=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "smiles", "yhat"] + (["variance"] if var is not None else []) + ["dropped"])
    for i, row in enumerate(table.rows):
        rec = [table.ids[i], row.smiles, repr(float(pred[i]))]
        if var is not None:
            rec.append(repr(float(var[i])))
        rec.append(int(dropped[i]))
        w.writerow(rec)
    return _write(Path(out_path), buf.getvalue())


def cmd_explain(model_path, input_csv, cfg, out=None, smiles_column="smiles", id_column="",
                vocab_path=None) -> Path:
    model_path = Path(model_path)
    model, meta, vocab = _model_context(model_path, vocab_path)
    run = model_path.resolve().parent.parent
    _, Xrun, split = load_run(run)
    cols = meta.get("feature_columns", list(range(len(vocab))))
    fold = int(meta.get("fold", _get(cfg, "explain", "fold", int)))
    train_rows = split.train_indices(fold)
    background = make_background(Xrun.toarray().astype(float)[train_rows][:, cols],
                                 _get(cfg, "explain", "background_cap", int),
                                 stage_seed(cfg, "background"))
    table, Xs, _ = _featurize_input(input_csv, vocab, meta, smiles_column, id_column)
    method = _get(cfg, "explain", "method")
    atts = explain_rows(lambda Z: model_predict(model, Z), Xs, background,
                        _get(cfg, "explain", "n_permutations", int),
                        stage_seed(cfg, "explain"), method)
    summary = summarize(atts, Xs, meta.get("feature_labels"),
                        _get(cfg, "explain", "top_k", int), table.ids)
    out = Path(out) if out else run / "explain"
    _write(out / "ranking.csv", summary.ranking_csv())
    _write(out / "beeswarm.csv", summary.beeswarm_csv())
    _write(out / "explain.txt", f"method={atts[0].method}\nbase_value={atts[0].base_value!r}\n"
                                f"n_samples={len(atts)}\nfold={fold}\n")
    return out


def _svg_parity(y, yhat) -> str:
    lo = float(min(y.min(), yhat.min()))
    hi = float(max(y.max(), yhat.max()))
    span = (hi - lo) or 1.0
    size, pad = 400, 30

    def sx(v):
        return pad + (v - lo) / span * (size - 2 * pad)

    def sy(v):
        return size - pad - (v - lo) / span * (size - 2 * pad)

    dots = "".join(f'<circle cx="{sx(a):.2f}" cy="{sy(b):.2f}" r="3" fill="#1f77b4"/>'
                   for a, b in zip(y, yhat))
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">'
            f'<line x1="{sx(lo):.2f}" y1="{sy(lo):.2f}" x2="{sx(hi):.2f}" y2="{sy(hi):.2f}" '
            f'stroke="gray"/>{dots}</svg>\n')


def cmd_report(run_dir, svg: bool = True) -> Path:
    run = Path(run_dir)
    _, _, split = load_run(run)
    t_te = read_targets(run / "targets_test.csv")
    test_idx = [int(i) for i in split.test_indices]
    y = np.array([t_te[i] for i in test_idx])
    out = run / "report"
    rows = ["fold,rae_1,rae_5,rae_10,rae_15,mean_relative_error_pct,mean_abs_relative_error_pct"]
    found = 0
    for fold in range(1, split.n_folds + 1):
        path = run / "train" / f"predictions_fold_{fold}.csv"
        if not path.exists():
            continue
        found += 1
        with open(path, newline="", encoding="utf-8") as fh:
            pred = {int(r["row"]): float(r["yhat"]) for r in csv.DictReader(fh)}
        yhat = np.array([pred[i] for i in test_idx])
        rel = relative_errors(y, yhat)
        signed = 100.0 * (yhat - y) / y
        lines = ["row,y_true,y_pred,relative_error"]
        lines += [f"{i},{float(a)!r},{float(b)!r},{float(r)!r}"
                  for i, a, b, r in zip(test_idx, y, yhat, rel)]
        _write(out / f"parity_fold_{fold}.csv", "\n".join(lines) + "\n")
        if svg:
            _write(out / f"parity_fold_{fold}.svg", _svg_parity(y, yhat))
        fr = rape_fractions(y, yhat)
        rows.append(f"{fold}," + ",".join(f"{v:.6g}" for v in fr.values())
                    + f",{signed.mean():.6g},{rel.mean():.6g}")
    if not found:
        raise InputError(f"{run}: no fold predictions; run `cmprop train` first")
    _write(out / "rae_table.csv", "\n".join(rows) + "\n")
    update_manifest(run, "report", {"folds_reported": found, "test_rows": len(test_idx)})
    return out


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cmprop", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"cmprop {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("-c", "--config", help="run-config file (INI sections)")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config entry (repeatable)")
        sp.add_argument("-o", "--out-dir", help="run directory (overrides [run] out_dir)")
        return sp

    for name in ("featurize", "stats", "select", "train"):
        with_config(sub.add_parser(name))

    sp = sub.add_parser("predict")
    sp.add_argument("--model", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--smiles-column", default="smiles")
    sp.add_argument("--id-column", default="")
    sp.add_argument("--vocab")

    sp = with_config(sub.add_parser("explain"))
    sp.add_argument("--model", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--smiles-column", default="smiles")
    sp.add_argument("--id-column", default="")
    sp.add_argument("--vocab")

    sp = sub.add_parser("report")
    sp.add_argument("run_dir")
    sp.add_argument("--no-svg", action="store_true")
    return p


def _config_from_args(args):
    overrides = list(args.set)
    if args.out_dir:
        overrides.append(f"run.out_dir={Path(args.out_dir).resolve()}")
    cfg = load_config(args.config, overrides)
    validate_config(cfg)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "featurize":
            cmd_featurize(_config_from_args(args))
        elif args.command == "stats":
            cmd_stats(_config_from_args(args))
        elif args.command == "select":
            cmd_select(_config_from_args(args))
        elif args.command == "train":
            cmd_train(_config_from_args(args))
        elif args.command == "predict":
            cmd_predict(args.model, args.input, args.output, args.smiles_column,
                        args.id_column, args.vocab)
        elif args.command == "explain":
            out = Path(args.out_dir) / "explain" if args.out_dir else None
            cfg = load_config(args.config, args.set)
            cmd_explain(args.model, args.input, cfg, out, args.smiles_column,
                        args.id_column, args.vocab)
        elif args.command == "report":
            cmd_report(args.run_dir, svg=not args.no_svg)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (TrainingDiverged, NotPositiveDefinite, MetricError, np.linalg.LinAlgError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (InputError, DatasetError, SmilesError, ValenceError, FormatError,
            ModelFileError, FileNotFoundError, KeyError) as exc:
        log.error("input error: %s", exc)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
