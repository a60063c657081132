"""``fadacs`` command line: one subcommand per pipeline stage, files in between."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import platform
import sys
import time
from dataclasses import asdict, replace

import numpy as np

from . import __version__
from .adapt import (ArchConfig, Forecaster, HistoricalAverage, adversarial_adapt,
                    assemble_predict, baseline_train, forecaster_from_trees, held_out_accuracy)
from .config import config_hash, load_config, section
from .errors import FadacsError, InputMissing, UnparsableRow, UpstreamStageMissing
from .evaluation import (DomainData, ExperimentConfig, Report, _per_lot, _score, prepare, run_experiment,
                         save_report)
from .features import (ContextChannels, Normalizer, OccupancyGrid, build_context, occupancy_series,
                       order_lots_spatially, read_grid_csv, read_tensor, write_grid_csv, write_tensor)
from .ingest import (DAY_S, filter_anomalies, join_locations, parse_events, read_location_table, read_opening_hours,
                     read_polygon_table, read_pois, read_weather, rejection_summary, write_events_csv, write_pois,
                     write_rejections_csv, write_weather)
from .neural.checkpoint import dumps_json, load_checkpoint, save_checkpoint
from .spatial import (SlotGeometry, cluster_by_sector, cluster_slots, connection_threshold_m, lots_from_json,
                      read_slots_csv, write_lots_csv, write_lots_json, write_slots_csv)
from .stats import feature_screen, write_screen_csv, write_screen_json
from .synth import PRESETS, generate_domain

SCHEMA_ALIASES = {"rye": "RyeV1", "melbourne": "MelbourneV1", "RyeV1": "RyeV1", "MelbourneV1": "MelbourneV1"}


# --- helpers ------------------------------------------------------------------

def _need(path, what="input"):
    if not path or not os.path.exists(path):
        raise InputMissing(f"{what} not found: {path}")
    return path


def _digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _files_under(root):
    out = []
    for base, _, names in os.walk(root):
        for name in names:
            if name != "manifest.json":
                out.append(os.path.join(base, name))
    return sorted(out)


def write_manifest(out_dir, command, config, seed, inputs, decisions, started):
    """Manifest for a mutating subcommand: config hash, digests of every input and output, decisions."""
    manifest = {
        "command": command,
        "config_hash": config_hash(config),
        "config": config,
        "seed": seed,
        "versions": {"fadacs": __version__, "python": platform.python_version(), "numpy": np.__version__},
        "inputs": {p: _digest(p) for p in sorted({p for p in inputs if p}) if os.path.isfile(p)},
        "outputs": {os.path.relpath(p, out_dir): _digest(p) for p in _files_under(out_dir)},
        "decisions": decisions,
        "timings": {"wall_seconds": round(time.time() - started, 3)},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        fh.write(dumps_json(manifest))
    return manifest


def _jsonable(obj):
    return json.loads(json.dumps(obj, default=lambda o: asdict(o) if hasattr(o, "__dataclass_fields__") else str(o)))


def load_domain(path):
    """A featurized domain directory: ``grid.csv``, ``context.fdt`` and ``lots.json``."""
    _need(os.path.join(path, "grid.csv"), "occupancy grid (run `featurize` first)")
    _need(os.path.join(path, "context.fdt"), "context tensor (run `featurize` first)")
    grid = read_grid_csv(os.path.join(path, "grid.csv"))
    values, names, _ = read_tensor(os.path.join(path, "context.fdt"))
    return DomainData(grid, ContextChannels(names, values))


# --- subcommands ----------------------------------------------------------------

def cmd_synth(args, cfg):
    overrides = dict(PRESETS.get(args.preset, {})) if args.preset else {}
    overrides.update({k: v for k, v in {"seed": args.seed, "shift": args.shift, "days": args.days,
                                         "target_days": args.target_days, "n_lots": args.n_lots,
                                         "anomalies": args.anomalies}.items() if v is not None})
    scfg = section(cfg, "synth", overrides)
    os.makedirs(args.out, exist_ok=True)
    injected = {}
    for which in ("Source", "Target"):
        dom = generate_domain(scfg, which, mode="events")
        d = os.path.join(args.out, which)
        os.makedirs(d, exist_ok=True)
        write_events_csv(os.path.join(d, "events.csv"), dom.events)
        write_pois(os.path.join(d, "pois.csv"), dom.pois, os.path.join(d, "opening_hours.csv"))
        write_weather(os.path.join(d, "weather.csv"), dom.weather)
        write_grid_csv(os.path.join(d, "grid_direct.csv"), dom.grid)
        write_slots_csv(os.path.join(d, "slots.csv"), dom.slots)
        injected[which] = dom.injected
    return scfg.to_dict(), scfg.seed, [], {"injected_anomalies": injected, "prng": "splitmix64"}


def cmd_ingest(args, cfg):
    opts = section(cfg, "ingest", {"schema": args.schema, "tz": args.tz})
    schema = SCHEMA_ALIASES.get(opts["schema"], opts["schema"])
    try:
        events = parse_events(_need(args.events), schema, opts["tz"])
    except UnparsableRow as exc:
        if not args.skip_unparsable:
            raise
        events = exc.events
        print(json.dumps({"warning": exc.code, "problems": exc.problems[:50]}), file=sys.stderr)
    warnings = []
    if args.locations or args.polygons:
        locs = read_location_table(_need(args.locations)) if args.locations else {}
        polys = read_polygon_table(_need(args.polygons)) if args.polygons else {}
        events, warnings = join_locations(events, locs, polys)
    kept, rejected = filter_anomalies(events)
    os.makedirs(args.out, exist_ok=True)
    write_events_csv(os.path.join(args.out, "events_clean.csv"), kept)
    write_rejections_csv(os.path.join(args.out, "rejections.csv"), rejected)
    summary = {"kept": len(kept), "rejected": rejection_summary(rejected),
               "location_warnings": [asdict(w) for w in warnings]}
    with open(os.path.join(args.out, "summary.json"), "w", encoding="utf-8") as fh:
        fh.write(dumps_json(summary))
    inputs = [args.events, args.locations, args.polygons]
    return {"ingest": opts}, None, inputs, {"rejection_precedence": ["BothMidnight", "NonPositiveDuration",
                                                                     "CrossesMidnight", "Overlap"]}


def _slots_from_events(events, polygons=None, known=()):
    """One geometry per slot key; ``known`` slots (an inventory) take precedence over event metadata."""
    polygons = polygons or {}
    slots = {s.slot_key: replace(s, polygon=polygons.get(s.slot_key, s.polygon)) for s in known}
    for e in events:
        if e.slot_key in slots:
            continue
        poly = polygons.get(e.slot_key)
        slots[e.slot_key] = SlotGeometry(e.slot_key, e.lon, e.lat, e.restriction, poly, e.sector)
    return [slots[k] for k in sorted(slots)]


def cmd_cluster(args, cfg):
    opts = section(cfg, "cluster", {"method": args.method, "threshold_m": args.threshold_m})
    events = parse_events(_need(args.events), "RyeV1")
    polygons = read_polygon_table(_need(args.polygons)) if args.polygons else {}
    if polygons:
        events, _ = join_locations(events, {}, polygons)
    known = read_slots_csv(_need(args.slots)) if args.slots else ()
    slots = _slots_from_events(events, polygons, known)
    region = None
    if args.region:
        with open(_need(args.region), encoding="utf-8") as fh:
            region = [line.strip() for line in fh if line.strip()]
    threshold = opts["threshold_m"]
    if threshold is None:
        threshold = connection_threshold_m(slots, region)
    if opts["method"] == "sector":
        lots = cluster_by_sector(slots, threshold)
    else:
        lots = cluster_slots(slots, threshold)
    os.makedirs(args.out, exist_ok=True)
    write_lots_json(os.path.join(args.out, "lots.json"), lots)
    write_lots_csv(os.path.join(args.out, "lots.csv"), lots)
    decisions = {"method": opts["method"], "threshold_m": threshold, "threshold_region": region or "all slots"}
    return {"cluster": opts}, None, [args.events, args.polygons, args.region, args.slots], decisions


def cmd_featurize(args, cfg):
    opts = section(cfg, "featurize", {"interval_min": args.interval_min})
    events = parse_events(_need(args.events), "RyeV1")
    with open(_need(args.lots), encoding="utf-8") as fh:
        lots = lots_from_json(json.load(fh))
    lots = order_lots_spatially(lots)
    pois = read_pois(_need(args.pois), read_opening_hours(_need(args.hours)) if args.hours else None)
    weather = read_weather(_need(args.weather))
    if args.start is not None and args.end is not None:
        span = (int(args.start), int(args.end))
    else:
        first = min(e.arrival for e in events)
        last = max(e.departure for e in events)
        span = (first // DAY_S * DAY_S, -(-last // DAY_S) * DAY_S)
    grid = occupancy_series(events, lots, opts["interval_min"], span)
    context = build_context(grid, lots, pois, weather, month_of_year=bool(opts["month_of_year"]))
    os.makedirs(args.out, exist_ok=True)
    write_grid_csv(os.path.join(args.out, "grid.csv"), grid)
    write_tensor(os.path.join(args.out, "context.fdt"), context.values, context.channel_names,
                 {"axes": ["time", "lot", "channel"], "lot_ids": list(grid.lot_ids),
                  "start": int(grid.timestamps[0]) if len(grid.timestamps) else None,
                  "interval_min": opts["interval_min"]})
    write_lots_json(os.path.join(args.out, "lots.json"), lots)
    decisions = {"channels": context.channel_names, "spatial_ordering": "morton",
                 "lot_order": list(grid.lot_ids), "span": list(span)}
    return {"featurize": opts}, None, [args.events, args.lots, args.pois, args.hours, args.weather], decisions


def cmd_screen(args, cfg):
    dom = load_domain(args.features)
    names = dom.context.channel_names
    occ = dom.context.values[..., names.index("occupancy")].ravel()
    feats = {n: dom.context.values[..., i].ravel() for i, n in enumerate(names) if n != "occupancy"}
    rows = feature_screen(feats, occ, order=names)
    os.makedirs(args.out, exist_ok=True)
    write_screen_csv(os.path.join(args.out, "screen.csv"), rows)
    write_screen_json(os.path.join(args.out, "screen.json"), rows)
    return {}, None, [os.path.join(args.features, "context.fdt")], {"test": "simple linear regression F-test"}


def _train_opts(args, cfg):
    exp = section(cfg, "experiment", {"horizon": getattr(args, "horizon", None),
                                      "model": getattr(args, "model", None)})
    arch = section(cfg, "arch", {"hidden": getattr(args, "hidden", None), "code": getattr(args, "code", None)})
    train = section(cfg, "train", {"epochs": getattr(args, "epochs", None), "seed": getattr(args, "seed", None),
                                   "adapt_steps": getattr(args, "steps", None)})
    return exp, arch, train


def _save_model(path, model, meta):
    save_checkpoint(path, model.trees(), {"encoder": model.encoder.describe(),
                                          "regressor": model.regressor.describe()}, meta)


def _load_model(path):
    if not os.path.exists(path):
        raise UpstreamStageMissing(f"no checkpoint at {path}; run the upstream stage first")
    trees, _, meta = load_checkpoint(path)
    arch = ArchConfig(**meta["arch"])
    model = forecaster_from_trees(arch, tuple(meta["dims"]), trees, meta.get("calibrated", False))
    norm = Normalizer.from_dict(meta["normalizer"], meta["channels"])
    return model, norm, meta


def cmd_train(args, cfg):
    exp, arch, train = _train_opts(args, cfg)
    src = load_domain(args.source)
    data, norm = prepare(src, exp["lookback"], exp["horizon"], tuple(exp["fractions"]))
    model = baseline_train(exp["model"], data.part("train"), train, arch, data.part("val"))
    os.makedirs(args.out, exist_ok=True)
    T, L, C = data.X.values.shape[1:]
    meta = {"model": exp["model"], "horizon_steps": exp["horizon"], "lookback": exp["lookback"], "dims": [T, L, C],
            "arch": asdict(model.arch), "train": asdict(train), "normalizer": norm.to_dict(),
            "channels": data.X.channel_names, "seed": train.seed,
            "config_hash": config_hash({"exp": exp, "arch": asdict(arch), "train": asdict(train)})}
    _save_model(os.path.join(args.out, "model.fdck"), model, meta)
    _write_rows(os.path.join(args.out, "curve.csv"), model.curve)
    splits = {k: [int(v[0]), int(v[-1])] if len(v) else [] for k, v in zip(("train", "val", "test"), data.splits)}
    return ({"experiment": exp, "arch": asdict(arch), "train": asdict(train)}, train.seed,
            [os.path.join(args.source, f) for f in ("grid.csv", "context.fdt")],
            {"channels": data.X.channel_names, "split_boundaries": splits, "lot_order": list(data.X.lot_ids)})


def cmd_adapt(args, cfg):
    exp, arch_cfg, train = _train_opts(args, cfg)
    model, norm, meta = _load_model(os.path.join(args.train_dir, "model.fdck"))
    src, tgt = load_domain(args.source), load_domain(args.target)
    h, lookback = meta["horizon_steps"], meta["lookback"]
    s_data, _ = prepare(src, lookback, h, tuple(exp["fractions"]), norm)
    t_data, _ = prepare(tgt, lookback, h, tuple(exp["fractions"]), norm)
    arch = replace(model.arch, disc_head=arch_cfg.disc_head, disc_input=arch_cfg.disc_input,
                   disc_hidden=arch_cfg.disc_hidden)
    res = adversarial_adapt(model.encoder, s_data.part("train").X, t_data.part_x("train").X, train, arch)
    acc = held_out_accuracy(model.encoder, res.target_encoder, res.discriminator,
                            s_data.part("test").X, t_data.part("test").X, arch)
    adapted = Forecaster(res.target_encoder, model.regressor, model.arch)
    os.makedirs(args.out, exist_ok=True)
    ameta = dict(meta, stage="adapt", calibrated=train.adapt_scope != "all", adapt=asdict(train),
                 discriminator=asdict(arch), held_out_d_accuracy=acc)
    _save_model(os.path.join(args.out, "adapted.fdck"), adapted, ameta)
    save_checkpoint(os.path.join(args.out, "discriminator.fdck"), {"discriminator": res.discriminator.state()},
                    {"discriminator": res.discriminator.describe()})
    _write_rows(os.path.join(args.out, "curve.csv"), res.curves)
    inputs = [os.path.join(args.train_dir, "model.fdck")]
    inputs += [os.path.join(d, f) for d in (args.source, args.target) for f in ("grid.csv", "context.fdt")]
    return ({"train": asdict(train), "arch": asdict(arch)}, train.seed, inputs,
            {"discriminator_head": arch.disc_head, "discriminator_input": arch.disc_input,
             "target_init": "source encoder", "adapt_scope": train.adapt_scope, "warnings": res.warnings})


def cmd_evaluate(args, cfg):
    model, norm, meta = _load_model(os.path.join(args.train_dir, "model.fdck"))
    h, lookback = meta["horizon_steps"], meta["lookback"]
    exp = section(cfg, "experiment")
    fractions = tuple(exp["fractions"])
    domains = {"Source": load_domain(args.source)}
    if args.target:
        domains["Target"] = load_domain(args.target)
    minutes = h * domains["Source"].grid.interval_s // 60
    tables, per_lot = {}, []
    for name, dom in domains.items():
        data, _ = prepare(dom, lookback, h, fractions, norm)
        test = data.part("test")
        truth = test.Y.values
        rows = [("HA", "labeled", HistoricalAverage(_history(dom.grid, data)).predict(test.Y.target_times))]
        label = meta["model"] if name == "Source" else f"{meta['model']}-source"
        rows.append((label, "labeled" if name == "Source" else "source-only", model.predict(test.X)))
        if name == "Target" and args.adapt_dir:
            adapted, _, _ = _load_model(os.path.join(args.adapt_dir, "adapted.fdck"))
            rows.append(("FADACS", "unlabeled", assemble_predict(adapted.encoder, adapted.regressor, test.X)))
        for m, _, p in rows:
            per_lot.extend(_per_lot(name, m, minutes, test.X.lot_ids, p, truth))
        tables[name] = [{"model": m, "regime": r, "results": {str(minutes): _score(p, truth, minutes)}, "errors": {}}
                        for m, r, p in rows]
    report = Report({"horizon_minutes": [minutes], "checkpoint": meta.get("config_hash")}, tables, per_lot, [])
    save_report(report, args.out)
    inputs = [os.path.join(args.train_dir, "model.fdck")]
    if args.adapt_dir:
        inputs.append(os.path.join(args.adapt_dir, "adapted.fdck"))
    return {"experiment": exp}, meta.get("seed"), inputs, {"horizon_minutes": minutes}


def _history(grid, data):
    cutoff = data.Y.target_times[data.splits[1][-1] if len(data.splits[1]) else data.splits[0][-1]]
    keep = grid.timestamps <= cutoff
    return OccupancyGrid(grid.lot_ids, grid.timestamps[keep], grid.values[:, keep])


def cmd_report(args, cfg):
    if args.render:
        with open(_need(args.render), encoding="utf-8") as fh:
            report = Report.from_dict(json.load(fh))
        print(render_tables(report))
        return None
    exp_opts, arch, train = _train_opts(args, cfg)
    exp = ExperimentConfig(seed=train.seed, lookback=exp_opts["lookback"], horizons=tuple(exp_opts["horizons"]),
                           fractions=tuple(exp_opts["fractions"]), arch=arch, train=train,
                           transfer_epochs=exp_opts["transfer_epochs"], grid_search=bool(exp_opts["grid_search"]))
    domains = {"Source": load_domain(args.source)}
    if args.target:
        domains["Target"] = load_domain(args.target)
    report = run_experiment(exp, domains, os.path.join(args.out, "checkpoints"), jobs=args.jobs)
    save_report(report, args.out)
    print(render_tables(report))
    inputs = [os.path.join(d, f) for d in filter(None, (args.source, args.target)) for f in ("grid.csv", "context.fdt")]
    return exp.to_dict(), exp.seed, inputs, {"strategy": report.meta["strategy"],
                                              "ha_reporting": "per horizon"}


def render_tables(report):
    minutes = report.meta.get("horizon_minutes", [])
    lines = []
    for domain, rows in report.tables.items():
        lines.append(f"{domain}")
        head = f"{'model':<20}" + "".join(f"{'MAE@' + str(m):>10}{'RMSE@' + str(m):>10}" for m in minutes)
        lines.append(head)
        for row in rows:
            cells = ""
            for m in minutes:
                got = row["results"].get(str(m))
                cells += f"{got['MAE']:>10.4f}{got['RMSE']:>10.4f}" if got else f"{'-':>10}{'-':>10}"
            lines.append(f"{row['model']:<20}{cells}")
        lines.append("")
    return "\n".join(lines)


def _write_rows(path, rows):
    keys = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(float(v)) if isinstance(v, float) else v for k, v in r.items()})


# --- argument parsing -------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="fadacs", description=__doc__)
    p.add_argument("--config", help="TOML config file (default: $FADACS_CONFIG)")
    p.add_argument("--jobs", type=int, default=1, help="maximum worker processes")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic source/target pair as raw event logs")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--preset", choices=sorted(PRESETS))
    s.add_argument("--shift", type=float)
    s.add_argument("--days", type=float)
    s.add_argument("--target-days", type=float)
    s.add_argument("--n-lots", type=int)
    s.add_argument("--anomalies", type=int)

    s = sub.add_parser("ingest", help="parse, locate and clean an event log")
    s.add_argument("--events", required=True)
    s.add_argument("--schema", help="rye | melbourne")
    s.add_argument("--tz")
    s.add_argument("--locations", help="marker -> lon/lat table")
    s.add_argument("--polygons", help="marker -> WKT polygon table")
    s.add_argument("--skip-unparsable", action="store_true")
    s.add_argument("--out", required=True)

    s = sub.add_parser("cluster", help="group slots into parking lots")
    s.add_argument("--events", required=True, help="cleaned events (output of ingest)")
    s.add_argument("--method", choices=["sector", "polygon"])
    s.add_argument("--threshold-m", type=float)
    s.add_argument("--polygons")
    s.add_argument("--slots", help="slot inventory csv; covers slots that never appear in the events")
    s.add_argument("--region", help="file of slot keys the threshold is computed over")
    s.add_argument("--out", required=True)

    s = sub.add_parser("featurize", help="occupancy grid and context channels")
    s.add_argument("--events", required=True)
    s.add_argument("--lots", required=True)
    s.add_argument("--pois", required=True)
    s.add_argument("--hours")
    s.add_argument("--weather", required=True)
    s.add_argument("--interval-min", type=int)
    s.add_argument("--start", type=int, help="span start, seconds since 1970 (local time)")
    s.add_argument("--end", type=int)
    s.add_argument("--out", required=True)

    s = sub.add_parser("screen", help="PCC and F-test of every channel against occupancy")
    s.add_argument("--features", required=True)
    s.add_argument("--out", required=True)

    for name, text in (("train", "train a forecaster on the source domain"),
                       ("adapt", "adversarially adapt a trained encoder to the target domain"),
                       ("report", "train every model at every horizon and write comparison tables")):
        s = sub.add_parser(name, help=text)
        s.add_argument("--source", required=name != "report")
        s.add_argument("--out", required=name != "report")
        s.add_argument("--epochs", type=int)
        s.add_argument("--seed", type=int)
        s.add_argument("--hidden", type=int)
        s.add_argument("--code", type=int)
        if name == "train":
            s.add_argument("--model", choices=["ConvLSTM", "LSTM", "MLP"])
            s.add_argument("--horizon", type=int)
        if name == "adapt":
            s.add_argument("--target", required=True)
            s.add_argument("--train-dir", required=True)
            s.add_argument("--steps", type=int)
        if name == "report":
            s.add_argument("--target")
            s.add_argument("--steps", type=int)
            s.add_argument("--render", help="print the tables of an existing report.json and exit")

    s = sub.add_parser("evaluate", help="score trained (and adapted) checkpoints on the test splits")
    s.add_argument("--source", required=True)
    s.add_argument("--target")
    s.add_argument("--train-dir", required=True)
    s.add_argument("--adapt-dir")
    s.add_argument("--out", required=True)
    return p


COMMANDS = {
    "synth": cmd_synth, "ingest": cmd_ingest, "cluster": cmd_cluster, "featurize": cmd_featurize,
    "screen": cmd_screen, "train": cmd_train, "adapt": cmd_adapt, "evaluate": cmd_evaluate, "report": cmd_report,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    started = time.time()
    try:
        cfg = load_config(args.config)
        if args.command == "report" and not args.render and not (args.source and args.out):
            raise InputMissing("report needs --source and --out (or --render)")
        result = COMMANDS[args.command](args, cfg)
        if result is not None:
            config, seed, inputs, decisions = result
            write_manifest(args.out, args.command, _jsonable(config), seed, inputs, _jsonable(decisions), started)
    except FadacsError as exc:
        print(json.dumps(exc.to_dict()), file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
