"""``cstn`` command line: ingest, synth, train, predict, evaluate, baseline.

Settings come from a flat ``key = value`` file (``#`` starts a comment) and
``--set key=value`` overrides.  Unknown keys are rejected.  Every run
writes ``manifest-<command>.json`` into ``out_dir``.

Exit codes: 0 ok, 2 config error, 3 missing input, 4 corrupt artifact,
5 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import platform
import sys
from dataclasses import fields
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .container import canonical_json
from .data import DEFAULT_WEATHER_VOCAB, Dataset, GridSpec, read_meteo_csv, read_trips_csv
from .errors import ConfigError, CorruptArtifactError, CSTNError, MissingInputError
from .metrics import RegionSubset, evaluate, format_table, high_demand_subset, write_reports_csv
from .model import CSTN, CSTNConfig
from .pipeline import BASELINES, baseline_counts, predict_counts
from .synth import SynthParams, synth_generate
from .trainer import TrainConfig, load_checkpoint, lr_at, save_checkpoint, train

COMMANDS = ("ingest", "synth", "train", "predict", "evaluate", "baseline")


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _ints(v: str) -> tuple[int, ...]:
    return tuple(int(x) for x in v.split(",") if x.strip())


def _labels(v: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in v.split(",") if x.strip())


# key -> (parser, default)
SCHEMA: dict[str, tuple] = {
    # paths
    "trips_csv": (str, ""),
    "meteo_csv": (str, ""),
    "dataset": (str, "dataset.bin"),
    "checkpoint": (str, "checkpoint.bin"),
    "out_dir": (str, "."),
    # grid and intervals
    "lat_min": (float, 40.700),
    "lat_max": (float, 40.880),
    "lon_min": (float, -74.020),
    "lon_max": (float, -73.910),
    "grid_h": (int, 15),
    "grid_w": (int, 5),
    "interval_minutes": (int, 30),
    "utc_offset_hours": (float, 0.0),
    "test_days": (float, 60.0),
    "test_intervals": (int, 0),
    "weather_vocab": (_labels, DEFAULT_WEATHER_VOCAB),
    # synthetic data
    "synth_seed": (int, 0),
    "synth_intervals": (int, 2016),
    "synth_start": (str, "2014-01-06T00:00"),
    "synth_base_rate": (float, 8.0),
    "synth_rate_spread": (float, 0.8),
    "synth_daily_amplitude": (float, 0.6),
    "synth_day_sigma": (float, 0.1),
    "synth_weekend_factor": (float, 0.8),
    "synth_weather_effect": (float, 1.0),
    "synth_weather_lag": (int, 1),
    "synth_weather_persistence": (float, 0.92),
    "synth_noise": (_bool, True),
    "synth_shock_sigma": (float, 0.0),
    "synth_shock_persistence": (float, 0.9),
    # model
    "n": (int, 5),
    "m": (int, 1),
    "K": (int, 3),
    "lsc_channels": (int, 16),
    "fuse_channels": (int, 32),
    "lstm_channels": (int, 32),
    "c_lt": (int, 75),
    "c_s": (int, 64),
    "meteo_embed": (int, 8),
    "kernel": (int, 3),
    "tec_enabled": (_bool, True),
    "gcc_enabled": (_bool, True),
    "destination_view_enabled": (_bool, True),
    "meteo_enabled": (_bool, True),
    # training
    "batch_size": (int, 64),
    "base_lr": (float, 1e-4),
    "decay_factor": (float, 0.1),
    "decay_every": (int, 200),
    "epochs": (int, 700),
    "seed": (int, 0),
    "shuffle": (_bool, True),
    "log_every": (int, 10),
    # evaluation and baselines
    "threshold": (float, 5.0),
    "high_demand_k": (int, 20),
    "predict_intervals": (str, "test"),
    "baseline": (str, "ha_rec"),
    "olsr_jitter": (float, 1e-8),
    "mlp_hidden": (_ints, (128, 128, 64)),
}

REQUIRED_INPUTS = {
    "ingest": ("trips_csv", "meteo_csv"),
    "synth": (),
    "train": ("dataset",),
    "predict": ("dataset", "checkpoint"),
    "evaluate": ("dataset", "checkpoint"),
    "baseline": ("dataset",),
}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        raw[key] = value
    return raw


def resolve_config(raw: dict[str, str]) -> dict:
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = {k: default for k, (_, default) in SCHEMA.items()}
    for k, v in raw.items():
        parser = SCHEMA[k][0]
        try:
            cfg[k] = parser(v)
        except ValueError as exc:
            raise ConfigError(f"bad value for {k}: {exc}") from None
    return cfg


def bundled_config(name: str) -> str:
    try:
        return resources.files("cstn").joinpath("configs", f"{name}.cfg").read_text("utf-8")
    except FileNotFoundError:
        raise MissingInputError(f"no bundled config named {name!r}") from None


def load_config(path: str | None, overrides: list[str]) -> dict:
    raw: dict[str, str] = {}
    if path:
        if path.startswith("bundled:"):
            raw.update(parse_config_text(bundled_config(path.split(":", 1)[1]), path))
        else:
            p = Path(path)
            if not p.exists():
                raise MissingInputError(f"config file not found: {p}")
            raw.update(parse_config_text(p.read_text("utf-8"), str(p)))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        raw[k.strip()] = v.strip()
    return resolve_config(raw)


def _jsonable(cfg: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items()}


# ------------------------------------------------------------------ helpers


def grid_of(cfg) -> GridSpec:
    return GridSpec(cfg["lat_min"], cfg["lat_max"], cfg["lon_min"], cfg["lon_max"],
                    cfg["grid_h"], cfg["grid_w"])


def model_config(cfg, grid: GridSpec, meteo_dim: int) -> CSTNConfig:
    return CSTNConfig(
        H=grid.H, W=grid.W, n=cfg["n"], m=cfg["m"], K=cfg["K"],
        lsc_channels=cfg["lsc_channels"], fuse_channels=cfg["fuse_channels"],
        lstm_channels=cfg["lstm_channels"], c_lt=cfg["c_lt"], c_s=cfg["c_s"],
        meteo_dim=meteo_dim, meteo_embed=cfg["meteo_embed"], kernel=cfg["kernel"],
        tec_enabled=cfg["tec_enabled"], gcc_enabled=cfg["gcc_enabled"],
        destination_view_enabled=cfg["destination_view_enabled"],
        meteo_enabled=cfg["meteo_enabled"],
    )


def train_config(cfg) -> TrainConfig:
    return TrainConfig(**{f.name: cfg[f.name] for f in fields(TrainConfig)})


def split_index(cfg, T: int, slots_per_day: int) -> int:
    test = cfg["test_intervals"] or int(round(cfg["test_days"] * slots_per_day))
    if not 0 < test < T:
        raise ConfigError(f"test split of {test} intervals does not fit {T} intervals")
    return T - test


def _out(cfg, name: str) -> Path:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out / name


def _load_model(cfg, ds: Dataset):
    ck = load_checkpoint(cfg["checkpoint"])
    model = ck.build_model()
    if ck.model_config.get("kind") != "cstn":
        raise ConfigError("checkpoint does not hold a CSTN model")
    mc = model.cfg
    if (mc.H, mc.W) != (ds.grid.H, ds.grid.W):
        raise ConfigError(f"checkpoint grid {mc.H}x{mc.W} does not match dataset grid "
                          f"{ds.grid.H}x{ds.grid.W}")
    if mc.meteo_dim != len(ds.vocab) + 6:
        raise ConfigError("checkpoint weather encoding width does not match dataset vocabulary")
    return ck, model


def _high_demand(cfg, ds: Dataset) -> RegionSubset:
    k = cfg["high_demand_k"]
    if k > ds.grid.N:
        raise ConfigError(f"high_demand_k={k} exceeds region count {ds.grid.N}")
    return high_demand_subset(ds.counts[: ds.split], k)


def _step_reports(cfg, ds, preds, gts, times):
    """Reports for each decoded step; names get an ``h<k>:`` prefix when m > 1."""
    subset = _high_demand(cfg, ds)
    steps = preds.shape[1]
    out = []
    for s in range(steps):
        reps = evaluate(preds[:, s], gts[:, s], times[:, s], subset, cfg["threshold"])
        if steps > 1:
            reps = [type(r)(f"h{s + 1}:{r.subset}", r.od, r.origin, r.z) for r in reps]
        out += reps
    return out


# ----------------------------------------------------------------- commands


def cmd_ingest(cfg) -> list[Path]:
    grid = grid_of(cfg)
    ts, counts, stats = read_trips_csv(cfg["trips_csv"], grid, cfg["interval_minutes"],
                                       cfg["utc_offset_hours"])
    numeric, labels = read_meteo_csv(cfg["meteo_csv"], ts, cfg["interval_minutes"])
    split = split_index(cfg, len(ts), (24 * 60) // cfg["interval_minutes"])
    ds = Dataset(grid, cfg["interval_minutes"], ts, counts, numeric, labels, split,
                 vocab=cfg["weather_vocab"])
    ds.save(cfg["dataset"])
    print(f"ingested {stats['kept']} trips ({stats['out_of_bounds']} out of bounds, "
          f"{stats['rejected']} rejected) into {len(ts)} intervals")
    return [Path(cfg["dataset"])]


def cmd_synth(cfg) -> list[Path]:
    grid = grid_of(cfg)
    params = SynthParams(
        interval_minutes=cfg["interval_minutes"], base_rate=cfg["synth_base_rate"],
        rate_spread=cfg["synth_rate_spread"], daily_amplitude=cfg["synth_daily_amplitude"],
        day_sigma=cfg["synth_day_sigma"], weekend_factor=cfg["synth_weekend_factor"],
        weather_effect=cfg["synth_weather_effect"], weather_lag=cfg["synth_weather_lag"],
        weather_persistence=cfg["synth_weather_persistence"], noise=cfg["synth_noise"],
        shock_sigma=cfg["synth_shock_sigma"], shock_persistence=cfg["synth_shock_persistence"],
        start=cfg["synth_start"],
    )
    T = cfg["synth_intervals"]
    split = split_index(cfg, T, (24 * 60) // cfg["interval_minutes"])
    ds = synth_generate(cfg["synth_seed"], grid, T, params, split)
    ds.vocab = tuple(cfg["weather_vocab"])
    ds.save(cfg["dataset"])
    print(f"synthesised {T} intervals on a {grid.H}x{grid.W} grid (split at {split})")
    return [Path(cfg["dataset"])]


def cmd_train(cfg) -> list[Path]:
    ds = Dataset.load(cfg["dataset"])
    mc = model_config(cfg, ds.grid, len(ds.vocab) + 6)
    tc = train_config(cfg)
    windows = ds.windows(mc.n, mc.m, "train")
    if not windows:
        raise ConfigError("no training windows: dataset too short for n and m")
    model = CSTN(mc, seed=tc.seed)
    loss_path = _out(cfg, "train_loss.csv")
    rows = []
    last_lr = [None]

    def progress(epoch, lr, loss):
        rows.append((epoch, lr, loss))
        if lr != last_lr[0]:
            print(f"epoch {epoch}: lr {lr:.0e}")
            last_lr[0] = lr
        if cfg["log_every"] and (epoch % cfg["log_every"] == 0 or epoch == tc.epochs - 1):
            print(f"epoch {epoch:4d}  loss {loss:.6f}")

    ck = train(model, windows, tc, progress, ds.norm)
    save_checkpoint(ck, cfg["checkpoint"])
    with open(loss_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "lr", "loss"])
        w.writerows((e, repr(lr), repr(loss)) for e, lr, loss in rows)
    return [Path(cfg["checkpoint"]), loss_path]


def _requested_windows(cfg, ds: Dataset, n: int, m: int):
    spec = cfg["predict_intervals"].strip().lower()
    if spec in ("test", "train", "all"):
        return ds.windows(n, m, None if spec == "all" else spec)
    wanted = set(_ints(spec))
    # a requested index is the first target interval of the window
    chosen = [w for w in ds.windows(n, m) if w.anchor + 1 in wanted]
    missing = wanted - {w.anchor + 1 for w in chosen}
    if missing:
        raise ConfigError(f"no complete window predicts intervals {sorted(missing)}")
    return chosen


def cmd_predict(cfg) -> list[Path]:
    ds = Dataset.load(cfg["dataset"])
    ck, model = _load_model(cfg, ds)
    windows = _requested_windows(cfg, ds, model.cfg.n, model.cfg.m)
    preds, _, _ = predict_counts(model, windows, ck.norm)
    H, W = ds.grid.H, ds.grid.W
    path = _out(cfg, "predictions.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["interval", "origin_i", "origin_j", "dest_i", "dest_j", "value"])
        for win, pred in zip(windows, preds):
            for step, X in enumerate(pred):
                interval = win.anchor + 1 + step
                for d, oi, oj in zip(*np.nonzero(X)):
                    w.writerow([interval, oi, oj, d // W, d % W, repr(float(X[d, oi, oj]))])
    print(f"wrote predictions for {len(windows)} windows to {path}")
    return [path]


def cmd_evaluate(cfg) -> list[Path]:
    ds = Dataset.load(cfg["dataset"])
    ck, model = _load_model(cfg, ds)
    windows = ds.windows(model.cfg.n, model.cfg.m, "test")
    if not windows:
        raise ConfigError("no test windows")
    preds, gts, times = predict_counts(model, windows, ck.norm)
    reports = _step_reports(cfg, ds, preds, gts, times)
    path = _out(cfg, "evaluation.csv")
    write_reports_csv(reports, path)
    print(format_table(reports, "CSTN on test split"))
    return [path]


def cmd_baseline(cfg) -> list[Path]:
    name = cfg["baseline"]
    if name not in BASELINES:
        raise ConfigError(f"unknown baseline {name!r}; choose from {', '.join(BASELINES)}")
    ds = Dataset.load(cfg["dataset"])
    preds, gts, times = baseline_counts(name, ds, cfg["n"], train_config(cfg),
                                        cfg["olsr_jitter"], cfg["mlp_hidden"])
    reports = _step_reports(cfg, ds, preds, gts, times)
    path = _out(cfg, f"baseline_{name}.csv")
    write_reports_csv(reports, path)
    print(format_table(reports, f"{name} on test split"))
    return [path]


HANDLERS = {
    "ingest": cmd_ingest, "synth": cmd_synth, "train": cmd_train,
    "predict": cmd_predict, "evaluate": cmd_evaluate, "baseline": cmd_baseline,
}


def write_manifest(cfg, command: str, artifacts: list[Path]) -> Path:
    config = _jsonable(cfg)
    manifest = {
        "command": command,
        "config": config,
        "config_digest": __import__("hashlib").sha256(canonical_json(config)).hexdigest(),
        "seed": cfg["seed"],
        "synth_seed": cfg["synth_seed"],
        "versions": {"cstn": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
        "artifacts": [str(p) for p in artifacts],
    }
    path = _out(cfg, f"manifest-{command}.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cstn", description=__doc__.split("\n")[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("-c", "--config", help="key=value file, or bundled:<name> (e.g. bundled:small)")
    ap.add_argument("-s", "--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override a config value (repeatable)")
    return ap


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
        for key in REQUIRED_INPUTS[args.command]:
            if not cfg[key]:
                raise ConfigError(f"{args.command} needs '{key}' to be set")
            if not Path(cfg[key]).exists():
                raise MissingInputError(f"{key} not found: {cfg[key]}")
        artifacts = HANDLERS[args.command](cfg)
        write_manifest(cfg, args.command, artifacts)
    except CorruptArtifactError as exc:
        print(f"error: corrupt artifact: {exc}", file=sys.stderr)
        return exc.exit_code
    except CSTNError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return MissingInputError.exit_code
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    return 0


def main() -> None:
    sys.exit(run())
