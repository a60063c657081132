"""Error metrics, the multi-horizon experiment runner, and report files."""
from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .adapt import (ArchConfig, DomainDataset, Forecaster, HistoricalAverage, TrainConfig, adversarial_adapt,
                    assemble_predict, baseline_train, held_out_accuracy, parameter_transfer)
from .errors import EmptyBatch, FadacsError, InvalidConfig, ShapeMismatch
from .features import ContextChannels, Normalizer, OccupancyGrid, assemble_windows, temporal_split
from .neural.checkpoint import dumps_json, save_checkpoint


@dataclass
class EvaluationBatch:
    predictions: np.ndarray  # [T, L]
    truths: np.ndarray  # [T, L]
    horizon_minutes: int = 5

    def __post_init__(self):
        self.predictions = np.asarray(self.predictions, dtype=float)
        self.truths = np.asarray(self.truths, dtype=float)
        if self.predictions.shape != self.truths.shape:
            raise ShapeMismatch(f"predictions {self.predictions.shape} vs truths {self.truths.shape}")
        for name, arr in (("predictions", self.predictions), ("truths", self.truths)):
            if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
                raise ValueError(f"{name} must be occupancy rates in [0, 1]")


def _errors(batch):
    if batch.truths.size == 0:
        raise EmptyBatch("no cells to score")
    return batch.predictions - batch.truths


def mae(batch):
    """Mean absolute error over all ``T * L`` cells."""
    return float(np.mean(np.abs(_errors(batch))))


def rmse(batch):
    """Root mean squared error over all ``T * L`` cells."""
    return math.sqrt(float(np.mean(_errors(batch) ** 2)))


# --- data plumbing ------------------------------------------------------------

@dataclass
class DomainData:
    """A featurized domain: the occupancy grid and its per-step context channels."""

    grid: OccupancyGrid
    context: ContextChannels


@dataclass
class Prepared:
    X: object  # normalized FeatureTensor
    Y: object  # TargetGrid
    splits: tuple  # (train, val, test) index arrays

    def part(self, name):
        idx = self.splits[("train", "val", "test").index(name)]
        return DomainDataset(self.X.take(idx), self.Y.take(idx))

    def part_x(self, name, tag="Target"):
        idx = self.splits[("train", "val", "test").index(name)]
        return DomainDataset(self.X.take(idx), None, tag)


def prepare(domain, lookback, horizon, fractions=(0.7, 0.15, 0.15), normalizer=None):
    """Windows, a temporal split and min-max normalization.

    Without ``normalizer`` one is fitted on this domain's training split.
    """
    X, Y = assemble_windows(domain.grid, domain.context, lookback, horizon)
    splits = temporal_split(len(X), fractions)
    if normalizer is None:
        normalizer = Normalizer.fit(X.values[splits[0]], X.channel_names)
    return Prepared(X.normalized(normalizer), Y, splits), normalizer


# --- hyper-parameter grid ----------------------------------------------------------

DEFAULT_GRID = {"lr": (1e-2, 1e-3, 1e-4), "batch_size": (32, 64, 128)}


def _grid_point(args):
    kind, train, val, cfg, arch = args
    model = baseline_train(kind, train, cfg, arch, val)
    return model, min(row.get("val_rmse", math.inf) for row in model.curve) if model.curve else math.inf


def grid_search(kind, train, val, cfg, arch=None, grid=None, jobs=1):
    """Train one model per ``lr x batch_size`` pair; return the best by validation RMSE and the score table.

    Ties keep the earlier grid point, so the result does not depend on ``jobs``.
    """
    grid = grid or DEFAULT_GRID
    points = [TrainConfig(**{**asdict(cfg), "lr": lr, "batch_size": bs})
              for lr in grid["lr"] for bs in grid["batch_size"]]
    work = [(kind, train, val, p, arch) for p in points]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outs = list(pool.map(_grid_point, work))
    else:
        outs = [_grid_point(w) for w in work]
    table = [{"lr": p.lr, "batch_size": p.batch_size, "val_rmse": score} for p, (_, score) in zip(points, outs)]
    best = min(range(len(outs)), key=lambda n: (outs[n][1], n))
    return outs[best][0], table


# --- experiment ---------------------------------------------------------------

SOURCE_MODELS = ("HA", "MLP", "LSTM", "ConvLSTM")
TARGET_MODELS = ("HA", "ConvLSTM-source", "ConvLSTM-target", "ConvLSTM-transfer", "FADACS")
REGIMES = {
    "HA": "labeled",
    "MLP": "labeled",
    "LSTM": "labeled",
    "ConvLSTM": "labeled",
    "ConvLSTM-source": "source-only",
    "ConvLSTM-target": "labeled",
    "ConvLSTM-transfer": "labeled",
    "FADACS": "unlabeled",
}


@dataclass
class ExperimentConfig:
    seed: int = 0
    lookback: int = 6
    horizons: tuple = (1, 3, 6)
    source_models: tuple = SOURCE_MODELS
    target_models: tuple = TARGET_MODELS
    fractions: tuple = (0.7, 0.15, 0.15)
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    transfer_epochs: int = 10
    grid_search: bool = False  # pick lr x batch per neural model on validation RMSE

    def validate(self):
        unknown = [m for m in self.source_models if m not in SOURCE_MODELS]
        unknown += [m for m in self.target_models if m not in TARGET_MODELS]
        if unknown:
            raise InvalidConfig(f"unknown models {unknown}")
        if not self.horizons or min(self.horizons) < 1:
            raise InvalidConfig("horizons must be positive step counts")
        self.arch.validate()
        self.train.validate()

    def to_dict(self):
        d = asdict(self)
        d["horizons"] = list(self.horizons)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        arch = ArchConfig(**d.pop("arch", {}))
        train = TrainConfig(**d.pop("train", {}))
        for k in ("horizons", "source_models", "target_models", "fractions"):
            if k in d:
                d[k] = tuple(d[k])
        try:
            return cls(arch=arch, train=train, **d)
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from exc


@dataclass
class Report:
    meta: dict
    tables: dict  # domain -> list of rows
    per_lot: list = field(default_factory=list)
    curves: list = field(default_factory=list)

    def to_dict(self):
        return {"meta": self.meta, "tables": self.tables, "per_lot": self.per_lot, "curves": self.curves}

    @classmethod
    def from_dict(cls, d):
        return cls(d["meta"], d["tables"], d.get("per_lot", []), d.get("curves", []))

    def rmse(self, domain, model, horizon_minutes):
        for row in self.tables[domain]:
            if row["model"] == model:
                return row["results"].get(str(horizon_minutes), {}).get("RMSE")
        raise KeyError(model)


def _score(pred, truth, minutes):
    batch = EvaluationBatch(np.clip(pred, 0.0, 1.0), truth, minutes)
    return {"MAE": mae(batch), "RMSE": rmse(batch)}


def _per_lot(domain, model, minutes, lot_ids, pred, truth):
    err = pred - truth
    return [{"domain": domain, "model": model, "horizon_minutes": minutes, "lot_id": lot,
             "MAE": float(np.mean(np.abs(err[:, n]))), "RMSE": math.sqrt(float(np.mean(err[:, n] ** 2)))}
            for n, lot in enumerate(lot_ids)]


def _curve_rows(domain, model, minutes, stage, curve):
    return [{"domain": domain, "model": model, "horizon_minutes": minutes, "stage": stage, **row} for row in curve]


class _Horizon:
    """Everything computed for one horizon; rows fail independently."""

    def __init__(self, cfg, domains, horizon, checkpoint_dir):
        self.cfg, self.domains, self.h = cfg, domains, horizon
        self.minutes = horizon * domains["Source"].grid.interval_s // 60
        self.checkpoint_dir = checkpoint_dir
        self.results = {"Source": {}, "Target": {}}
        self.errors = {"Source": {}, "Target": {}}
        self.per_lot, self.curves, self.extra = [], [], {}
        self._cache = {}

    def run(self):
        cfg = self.cfg
        self.src, norm = prepare(self.domains["Source"], cfg.lookback, self.h, cfg.fractions)
        self.tgt = None
        if "Target" in self.domains:
            self.tgt, _ = prepare(self.domains["Target"], cfg.lookback, self.h, cfg.fractions, norm)
        for model in cfg.source_models:
            self._row("Source", model, self._source_row)
        if self.tgt is not None:
            for model in cfg.target_models:
                self._row("Target", model, self._target_row)
        return self

    def _row(self, domain, model, fn):
        try:
            pred, truth, lot_ids = fn(model)
        except FadacsError as exc:
            self.errors[domain][model] = f"{exc.code}: {exc}"
            return
        self.results[domain][model] = _score(pred, truth, self.minutes)
        self.per_lot.extend(_per_lot(domain, model, self.minutes, lot_ids, pred, truth))

    def _save(self, name, model):
        if not self.checkpoint_dir:
            return
        meta = {"model": name, "horizon_steps": self.h, "seed": self.cfg.seed, "arch": asdict(model.arch)}
        path = os.path.join(self.checkpoint_dir, f"{name}_h{self.h}.fdck")
        save_checkpoint(path, model.trees(), {"encoder": model.encoder.describe(),
                                              "regressor": model.regressor.describe()}, meta)

    def _trained(self, domain, kind):
        key = (domain, kind)
        if key not in self._cache:
            data = self.src if domain == "Source" else self.tgt
            if self.cfg.grid_search:
                model, table = grid_search(kind, data.part("train"), data.part("val"), self.cfg.train, self.cfg.arch)
                self.extra.setdefault("grid_search", {})[f"{domain}-{kind}"] = table
            else:
                model = baseline_train(kind, data.part("train"), self.cfg.train, self.cfg.arch, data.part("val"))
            self.curves.extend(_curve_rows(domain, kind, self.minutes, "train", model.curve))
            self._save(f"{domain}-{kind}", model)
            self._cache[key] = model
        return self._cache[key]

    def _ha(self, data, domain):
        grid = self.domains[domain].grid
        test = data.Y.take(data.splits[2])
        cutoff = data.Y.target_times[data.splits[1][-1]] if len(data.splits[1]) else data.Y.target_times[data.splits[0][-1]]
        history = OccupancyGrid(grid.lot_ids, grid.timestamps[grid.timestamps <= cutoff],
                                grid.values[:, grid.timestamps <= cutoff])
        return HistoricalAverage(history).predict(test.target_times), test.values, grid.lot_ids

    def _source_row(self, model):
        if model == "HA":
            return self._ha(self.src, "Source")
        fitted = self._trained("Source", model)
        test = self.src.part("test")
        return fitted.predict(test.X), test.Y.values, test.X.lot_ids

    def _target_row(self, model):
        tgt = self.tgt
        test = tgt.part("test")
        if model == "HA":
            return self._ha(tgt, "Target")
        if model == "ConvLSTM-source":
            return self._trained("Source", "ConvLSTM").predict(test.X), test.Y.values, test.X.lot_ids
        if model == "ConvLSTM-target":
            return self._trained("Target", "ConvLSTM").predict(test.X), test.Y.values, test.X.lot_ids
        source = self._trained("Source", "ConvLSTM")
        if model == "ConvLSTM-transfer":
            ft = TrainConfig(**{**asdict(self.cfg.train), "epochs": self.cfg.transfer_epochs})
            tuned = parameter_transfer(source, tgt.part("train"), ft, val=tgt.part("val"))
            self.curves.extend(_curve_rows("Target", model, self.minutes, "transfer", tuned.curve))
            self._save("Target-ConvLSTM-transfer", tuned)
            return tuned.predict(test.X), test.Y.values, test.X.lot_ids
        res = adversarial_adapt(source.encoder, self.src.part("train").X, tgt.part_x("train").X,
                                self.cfg.train, self.cfg.arch)
        self.curves.extend(_curve_rows("Target", model, self.minutes, "adapt", res.curves))
        acc = held_out_accuracy(source.encoder, res.target_encoder, res.discriminator,
                                self.src.part("test").X, test.X, self.cfg.arch)
        self.extra["d_accuracy"] = acc
        adapted = Forecaster(res.target_encoder, source.regressor, source.arch)
        self._save("Target-FADACS", adapted)
        return assemble_predict(res.target_encoder, source.regressor, test.X), test.Y.values, test.X.lot_ids


def _run_horizon(args):
    cfg, domains, h, checkpoint_dir = args
    hz = _Horizon(cfg, domains, h, checkpoint_dir).run()
    return {"h": h, "minutes": hz.minutes, "results": hz.results, "errors": hz.errors,
            "per_lot": hz.per_lot, "curves": hz.curves, "extra": hz.extra}


def run_experiment(config, domains, checkpoint_dir=None, jobs=1):
    """Train and score every configured model at every horizon.

    ``domains`` maps ``"Source"`` (required) and ``"Target"`` (optional) to
    :class:`DomainData`. Horizons are independent and may run in ``jobs``
    worker processes; the report does not depend on ``jobs``.
    """
    config.validate()
    if "Source" not in domains:
        raise InvalidConfig("a Source domain is required")
    if checkpoint_dir:
        os.makedirs(checkpoint_dir, exist_ok=True)
    work = [(config, domains, h, checkpoint_dir) for h in config.horizons]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(work))) as pool:
            outs = list(pool.map(_run_horizon, work))
    else:
        outs = [_run_horizon(w) for w in work]
    tables, per_lot, curves, extra = {}, [], [], {}
    for domain, models in (("Source", config.source_models), ("Target", config.target_models)):
        if domain not in domains:
            continue
        rows = []
        for model in models:
            row = {"model": model, "regime": REGIMES[model], "results": {}, "errors": {}}
            for out in outs:
                key = str(out["minutes"])
                if model in out["results"][domain]:
                    row["results"][key] = out["results"][domain][model]
                if model in out["errors"][domain]:
                    row["errors"][key] = out["errors"][domain][model]
            rows.append(row)
        tables[domain] = rows
    for out in outs:
        per_lot.extend(out["per_lot"])
        curves.extend(out["curves"])
        if out["extra"]:
            extra[str(out["minutes"])] = out["extra"]
    meta = {"config": config.to_dict(), "horizon_minutes": [o["minutes"] for o in outs],
            "strategy": "direct (one model per horizon)", "diagnostics": extra}
    return Report(meta, tables, per_lot, curves)


# --- report files -----------------------------------------------------------------

def save_report(report, out_dir):
    """``report.json``, one table CSV per domain, ``per_lot.csv`` and ``curves.csv``."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        fh.write(dumps_json(report.to_dict()))
    minutes = report.meta.get("horizon_minutes", [])
    for domain, rows in report.tables.items():
        with open(os.path.join(out_dir, f"table_{domain.lower()}.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["model", "regime"] + [f"{m}@{k}min" for k in minutes for m in ("MAE", "RMSE")] + ["errors"])
            for row in rows:
                cells = []
                for k in minutes:
                    got = row["results"].get(str(k))
                    cells += [repr(float(got["MAE"])), repr(float(got["RMSE"]))] if got else ["", ""]
                errs = "; ".join(f"{k}min {v}" for k, v in sorted(row["errors"].items()))
                w.writerow([row["model"], row["regime"]] + cells + [errs])
    _write_dicts(os.path.join(out_dir, "per_lot.csv"), report.per_lot)
    _write_dicts(os.path.join(out_dir, "curves.csv"), report.curves)
    for (domain, model, minutes, stage), rows in _group_curves(report.curves).items():
        path = os.path.join(out_dir, f"curve_{domain}_{model}_{minutes}min_{stage}.dat")
        with open(path, "w", encoding="utf-8") as fh:
            keys = [k for k in rows[0] if k not in ("domain", "model", "horizon_minutes", "stage")]
            fh.write("# " + " ".join(keys) + "\n")
            for r in rows:
                fh.write(" ".join(repr(r.get(k, float("nan"))) for k in keys) + "\n")


def _group_curves(curves):
    groups = {}
    for row in curves:
        groups.setdefault((row["domain"], row["model"], row["horizon_minutes"], row["stage"]), []).append(row)
    return groups


def _write_dicts(path, rows):
    keys = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(float(v)) if isinstance(v, float) else v for k, v in r.items()})


def load_report(path):
    with open(path, encoding="utf-8") as fh:
        return Report.from_dict(json.load(fh))
