"""Command-line interface: synth | train | tune | eval | memory | importance | solar.

Configuration is layered: built-in defaults, then a flat ``key = value``
file given with --config, then repeatable ``--set key=value`` overrides,
then dedicated flags — later layers win.  Every command writes its files
plus a ``manifest.json`` (command, resolved config, seed, input/output
hashes, version, timestamps) into --out; the manifest lands atomically at
run end.

Exit codes are a stable contract: 0 success, 2 config or validation
error, 3 numeric failure (divergence, non-finite values), 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import (
    DEFAULT_SPLIT,
    N_TOKEN,
    SampleSet,
    SplitSpec,
    SynthConfig,
    fit_norms,
    load_sites,
    make_windows,
    split,
    synth_write,
)
from .evaluation import (
    evaluate_report,
    memory_retention_curve,
    min_error_lag,
    modality_importance,
    write_curves_csv,
    write_importance_csv,
    write_report_csv,
    write_summary_json,
)
from .gradkit import GradkitError, NonFiniteError, no_grad
from .models import LstmConfig, MODEL_KINDS, TransformerConfig
from .solar import GeoLocation, rso_daily
from .training import (
    HyperbandConfig,
    TrainConfig,
    TrainingError,
    build_model,
    hyperband,
    load_checkpoint,
    save_checkpoint,
    train,
)

__all__ = ["main", "build_parser", "read_config", "ConfigError"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


class ConfigError(ValueError):
    """Malformed configuration file, key, or value."""


# ----------------------------------------------------------- configuration


def read_config(path) -> dict[str, str]:
    """Flat ``key = value`` file; '#' starts a comment, blank lines ignored."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _parse_overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set needs key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


class Conf:
    """Resolved configuration: file values overlaid with --set pairs."""

    def __init__(self, args):
        self.values: dict[str, str] = {}
        self.file_text = ""
        if args.config is not None:
            self.values.update(read_config(args.config))
            self.file_text = Path(args.config).read_text()
        self.values.update(_parse_overrides(args.overrides))
        self.used: dict = {}

    def pick(self, flag_value, key: str, cast, default):
        if flag_value is not None:
            value = flag_value
        elif key in self.values:
            try:
                value = cast(self.values[key])
            except (TypeError, ValueError) as e:
                raise ConfigError(f"config key {key!r}: {e}") from e
        else:
            value = default
        self.used[key] = _jsonable(value)
        return value


def _jsonable(v):
    if isinstance(v, frozenset):
        return sorted(v)
    if isinstance(v, tuple):
        return list(v)
    if isinstance(v, Path):
        return str(v)
    return v


def _years(text: str) -> frozenset[int]:
    text = text.strip()
    if not text:
        return frozenset()
    return frozenset(int(tok) for tok in text.split(","))


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(tok) for tok in text.split(","))


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in text.split(","))


def _opt_float(text: str) -> float | None:
    return None if text.lower() in ("none", "null", "") else float(text)


# --------------------------------------------------------------- manifest


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(
    out_dir: Path,
    command: str,
    argv: list[str],
    conf: Conf,
    seed: int,
    inputs: list[Path],
    outputs: list[Path],
    started: str,
) -> Path:
    payload = {
        "command": command,
        "argv": argv,
        "config": conf.used,
        "config_file": conf.file_text,
        "seed": seed,
        "inputs": {str(p): _sha256(Path(p)) for p in sorted(inputs, key=str)},
        "outputs": {str(p): _sha256(Path(p)) for p in sorted(outputs, key=str)},
        "version": __version__,
        "started": started,
        "finished": _now(),
    }
    path = out_dir / "manifest.json"
    tmp = out_dir / "manifest.json.tmp"
    tmp.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")
    os.replace(tmp, path)  # atomic: a manifest is either absent or complete
    return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])


# ------------------------------------------------------------ shared setup


def _seed_jobs(args, conf: Conf) -> tuple[int, int]:
    seed = conf.pick(args.seed, "seed", int, 0)
    jobs = conf.pick(args.jobs, "jobs", int, 1)
    if jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    return seed, jobs


def _split_spec(args, conf: Conf) -> SplitSpec:
    return SplitSpec(
        train_years=conf.pick(args.train_years, "train_years", _years, DEFAULT_SPLIT.train_years),
        validation_years=conf.pick(
            args.val_years, "val_years", _years, DEFAULT_SPLIT.validation_years
        ),
        test_years=conf.pick(args.test_years, "test_years", _years, DEFAULT_SPLIT.test_years),
    )


def _load_windows(args, conf: Conf):
    k = conf.pick(args.k, "k", int, 120)
    sites = load_sites(args.data)
    samples = SampleSet.concat([make_windows(s, k=k) for s in sites])
    return sites, samples, k


def _model_config(kind: str, args, conf: Conf, k: int):
    dropout = conf.pick(args.dropout, "dropout", float, 0.3)
    if kind == "lstm":
        return LstmConfig(
            hidden_size=conf.pick(args.hidden_size, "hidden_size", int, 64),
            num_layers=conf.pick(args.num_layers, "num_layers", int, 1),
            dropout=dropout,
            n_features=N_TOKEN,
        )
    model_dim = conf.pick(args.model_dim, "model_dim", int, 32)
    return TransformerConfig(
        model_dim=model_dim,
        ff_dim=conf.pick(args.ff_dim, "ff_dim", int, 4 * model_dim),
        num_heads=conf.pick(args.num_heads, "num_heads", int, 2),
        num_layers=conf.pick(args.num_layers, "num_layers", int, 1),
        dropout=dropout,
        max_positions=k,
        n_features=N_TOKEN,
    )


def _site_csvs(data_dir) -> list[Path]:
    return sorted(Path(data_dir).glob("*.csv"))


def _checkpoint_inputs(args, conf: Conf):
    """Load model, sites, and the requested evaluation subset."""
    ckpt = load_checkpoint(args.checkpoint)
    model = build_model(ckpt)
    sites, samples, k = _load_windows(args, conf)
    spec = _split_spec(args, conf)
    subset_name = conf.pick(args.split, "split", str, "test")
    try:
        parts = dict(zip(("train", "validation", "test"), split(samples, spec)))
        subset = parts[subset_name]
    except KeyError:
        raise ConfigError(f"--split must be train, validation, or test, got {subset_name!r}")
    missing = sorted(set(subset.site_ids.tolist()) - set(ckpt.norms))
    if missing:
        raise ConfigError(f"checkpoint has no normalization statistics for sites {missing}")
    if len(subset) == 0:
        raise ConfigError(f"the {subset_name} split is empty for these years")
    return ckpt, model, sites, subset, k


# ------------------------------------------------------------- subcommands


def cmd_synth(args, argv) -> int:
    started = _now()
    conf = Conf(args)
    seed, _ = _seed_jobs(args, conf)
    cfg = SynthConfig(
        n_sites=conf.pick(args.sites, "n_sites", int, 3),
        years=conf.pick(args.years, "years", _ints, (2016, 2017)),
        latitudes=conf.pick(None, "latitudes", _floats, None),
        lag_days=conf.pick(None, "lag_days", int, 30),
        w_rso=conf.pick(None, "w_rso", float, 0.8),
        cloudiness=conf.pick(None, "cloudiness", float, 0.7),
        stress_strength=conf.pick(None, "stress_strength", float, 0.6),
        lst_stress_coupling=conf.pick(None, "lst_stress_coupling", float, 1.5),
        s1_season_coupling=conf.pick(None, "s1_season_coupling", float, 0.0),
        noise=conf.pick(None, "noise", float, 0.05),
        amplitude=conf.pick(None, "amplitude", float, 12.0),
        spinup_days=conf.pick(None, "spinup_days", int, 150),
        qc_bad_frac=conf.pick(None, "qc_bad_frac", float, 0.02),
        missing_frac=conf.pick(None, "missing_frac", float, 0.01),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = synth_write(cfg, seed, out)
    inputs = [args.config] if args.config else []
    write_manifest(out, "synth", argv, conf, seed, inputs, files, started)
    print(f"wrote {len(files)} site files to {out}")
    return EXIT_OK


def cmd_train(args, argv) -> int:
    started = _now()
    conf = Conf(args)
    seed, _ = _seed_jobs(args, conf)
    sites, samples, k = _load_windows(args, conf)
    spec = _split_spec(args, conf)
    train_set, val_set, _ = split(samples, spec)
    norms = fit_norms(sites, spec.train_years)
    tc = TrainConfig(
        max_epochs=conf.pick(args.epochs, "epochs", int, 300),
        batch_size=conf.pick(args.batch_size, "batch_size", int, 64),
        learning_rate=conf.pick(args.lr, "learning_rate", float, 1e-3),
        seed=seed,
        dropout=conf.pick(args.dropout, "dropout", float, 0.3),
        clip_norm=conf.pick(args.clip_norm, "clip_norm", _opt_float, None),
        val_metric=conf.pick(args.val_metric, "val_metric", str, "raw"),
    )
    mc = _model_config(args.model, args, conf, k)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(args.model, mc, tc, train_set, val_set, norms)

    ckpt_path = out / "checkpoint.json"
    log_path = out / "train_log.csv"
    save_checkpoint(result.checkpoint, ckpt_path)
    _write_csv(
        log_path,
        ("epoch", "train_loss", "val_loss"),
        ((r["epoch"], r["train_loss"], r["val_loss"]) for r in result.history),
    )
    inputs = _site_csvs(args.data) + ([args.config] if args.config else [])
    write_manifest(out, "train", argv, conf, seed, inputs, [ckpt_path, log_path], started)
    if result.diverged:
        print(
            f"training diverged; best checkpoint (epoch {result.checkpoint.epoch}) saved",
            file=sys.stderr,
        )
        return EXIT_NUMERIC
    print(
        f"best epoch {result.checkpoint.epoch}: "
        f"validation loss {result.checkpoint.validation_loss:.6g}"
    )
    return EXIT_OK


_TUNE_KEYS = {
    "learning_rate": float,
    "batch_size": int,
    "dropout": float,
    "clip_norm": lambda v: v if v is None or isinstance(v, float) else float(v),
    "hidden_size": int,
    "num_layers": int,
    "model_dim": int,
    "ff_dim": int,
    "num_heads": int,
}


def _tune_space(conf: Conf, kind: str) -> tuple[tuple[str, tuple], ...]:
    space = []
    for key, raw in sorted(conf.values.items()):
        if not key.startswith("space."):
            continue
        name = key[len("space.") :]
        if name not in _TUNE_KEYS:
            raise ConfigError(f"unknown search dimension {name!r}")
        cast = _TUNE_KEYS[name]
        choices = tuple(
            cast(None if tok.strip().lower() == "none" else tok.strip())
            for tok in raw.split(",")
        )
        space.append((name, choices))
        conf.used[key] = list(choices)
    if not space:  # small built-in default per model family
        space = [("learning_rate", (1e-3, 3e-3, 1e-2)), ("dropout", (0.1, 0.3))]
        space.append(("hidden_size", (16, 32, 64)) if kind == "lstm" else ("model_dim", (16, 32, 48)))
        conf.used["space"] = {name: list(c) for name, c in space}
    return tuple(space)


def cmd_tune(args, argv) -> int:
    started = _now()
    conf = Conf(args)
    seed, _ = _seed_jobs(args, conf)
    sites, samples, k = _load_windows(args, conf)
    spec = _split_spec(args, conf)
    train_set, val_set, _ = split(samples, spec)
    norms = fit_norms(sites, spec.train_years)
    hb = HyperbandConfig(
        resource=conf.pick(args.resource, "resource", int, 27),
        eta=conf.pick(args.eta, "eta", int, 3),
        space=_tune_space(conf, args.model),
    )
    base = {
        "batch_size": conf.pick(args.batch_size, "batch_size", int, 64),
        "learning_rate": conf.pick(args.lr, "learning_rate", float, 1e-3),
        "dropout": conf.pick(args.dropout, "dropout", float, 0.3),
        "clip_norm": conf.pick(args.clip_norm, "clip_norm", _opt_float, None),
        "hidden_size": conf.pick(args.hidden_size, "hidden_size", int, 64),
        "num_layers": conf.pick(args.num_layers, "num_layers", int, 1),
        "model_dim": conf.pick(args.model_dim, "model_dim", int, 32),
        "num_heads": conf.pick(args.num_heads, "num_heads", int, 2),
    }
    base["ff_dim"] = conf.pick(args.ff_dim, "ff_dim", int, 4 * base["model_dim"])
    val_metric = conf.pick(args.val_metric, "val_metric", str, "raw")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    progress_path = out / "progress.csv"
    progress = open(progress_path, "w", newline="")
    progress_w = csv.writer(progress)
    progress_w.writerow(("config", "epochs", "loss"))

    def train_fn(sampled: dict, epochs: int):
        merged = {**base, **sampled}
        tc = TrainConfig(
            max_epochs=epochs,
            batch_size=merged["batch_size"],
            learning_rate=merged["learning_rate"],
            seed=seed,
            dropout=merged["dropout"],
            clip_norm=merged["clip_norm"],
            val_metric=val_metric,
        )
        if args.model == "lstm":
            mc = LstmConfig(
                hidden_size=merged["hidden_size"],
                num_layers=merged["num_layers"],
                dropout=merged["dropout"],
                n_features=N_TOKEN,
            )
        else:
            mc = TransformerConfig(
                model_dim=merged["model_dim"],
                ff_dim=merged["ff_dim"],
                num_heads=merged["num_heads"],
                num_layers=merged["num_layers"],
                dropout=merged["dropout"],
                max_positions=k,
                n_features=N_TOKEN,
            )
        result = train(args.model, mc, tc, train_set, val_set, norms)
        loss = float("inf") if result.diverged else result.checkpoint.validation_loss
        progress_w.writerow((json.dumps(sampled, sort_keys=True), epochs, repr(float(loss))))
        progress.flush()  # an interrupted search still leaves a valid log
        return loss, result

    try:
        hb_result = hyperband(hb, train_fn, seed=seed)
    finally:
        progress.close()

    best_path = out / "best_config.json"
    log_path = out / "search_log.csv"
    ckpt_path = out / "best_checkpoint.json"
    best_path.write_text(
        json.dumps(
            {
                "model": args.model,
                "config": hb_result.best_config,
                "validation_loss": hb_result.best_loss,
            },
            sort_keys=True,
            indent=1,
        )
        + "\n"
    )
    _write_csv(
        log_path,
        ("bracket", "rung", "epochs", "loss", "config"),
        (
            (r["bracket"], r["rung"], r["epochs"], r["loss"], json.dumps(r["config"], sort_keys=True))
            for r in hb_result.log
        ),
    )
    save_checkpoint(hb_result.best_payload.checkpoint, ckpt_path)
    inputs = _site_csvs(args.data) + ([args.config] if args.config else [])
    outputs = [best_path, log_path, ckpt_path, progress_path]
    write_manifest(out, "tune", argv, conf, seed, inputs, outputs, started)
    print(f"best config: {hb_result.best_config} (validation loss {hb_result.best_loss:.6g})")
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    started = _now()
    conf = Conf(args)
    seed, _ = _seed_jobs(args, conf)
    ckpt, model, sites, subset, _ = _checkpoint_inputs(args, conf)
    normalizer = conf.pick(args.normalizer, "normalizer", str, "mean")
    against = conf.pick(args.against, "against", str, "raw")
    report = evaluate_report(model, sites, subset, ckpt.norms, normalizer, against)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / "report.csv"
    summary_path = out / "summary.json"
    write_report_csv(report, report_path)
    write_summary_json(
        {
            "summary": report.summary,
            "normalizer": report.normalizer,
            "against": report.against,
            "model_kind": ckpt.model_kind,
            "n_samples": len(subset),
        },
        summary_path,
    )
    inputs = [args.checkpoint] + _site_csvs(args.data) + ([args.config] if args.config else [])
    write_manifest(out, "eval", argv, conf, seed, inputs, [report_path, summary_path], started)
    for entry in report.summary:
        print(f"{entry['condition']}: median NRMSE {entry['median']:.4f} over {entry['n_sites']} sites")
    return EXIT_OK


def _per_site(subset: SampleSet, minimum: int = 2):
    for site_id in sorted(set(subset.site_ids.tolist())):
        samples = subset.select(subset.site_ids == site_id)
        if len(samples) >= minimum:
            yield site_id, samples


def cmd_memory(args, argv) -> int:
    started = _now()
    conf = Conf(args)
    seed, jobs = _seed_jobs(args, conf)
    ckpt, model, sites, subset, k = _checkpoint_inputs(args, conf)
    repeats = conf.pick(args.repeats, "repeats", int, 20)
    stride = conf.pick(args.tau_stride, "tau_stride", int, 10)
    taus = conf.pick(args.taus, "taus", _ints, tuple(range(0, k, stride)))
    per_row = conf.pick(args.per_row or None, "per_row", lambda v: v.lower() == "true", False)
    normalizer = conf.pick(args.normalizer, "normalizer", str, "mean")
    against = conf.pick(args.against, "against", str, "raw")

    work = list(_per_site(subset))

    def one(item):
        site_id, samples = item
        return memory_retention_curve(
            model,
            samples,
            ckpt.norms,
            taus=taus,
            repeats=repeats,
            seed=seed,
            per_row=per_row,
            normalizer=normalizer,
            against=against,
        )

    with no_grad():  # keep the global autodiff switch off across worker threads
        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                curves = list(pool.map(one, work))
        else:
            curves = [one(item) for item in work]

    tau_star, nrmse_star = min_error_lag(curves)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    curves_path = out / "curves.csv"
    summary_path = out / "summary.json"
    write_curves_csv(curves, curves_path)
    write_summary_json(
        {
            "tau_star": tau_star,
            "nrmse_star": nrmse_star,
            "taus": list(taus),
            "repeats": repeats,
            "per_row": per_row,
            "normalizer": normalizer,
            "against": against,
            "model_kind": ckpt.model_kind,
            "per_site": {
                c.site_id: {
                    "tau_star": min_error_lag(c)[0],
                    "nrmse_star": min_error_lag(c)[1],
                }
                for c in curves
            },
        },
        summary_path,
    )
    inputs = [args.checkpoint] + _site_csvs(args.data) + ([args.config] if args.config else [])
    write_manifest(out, "memory", argv, conf, seed, inputs, [curves_path, summary_path], started)
    print(f"minimum median NRMSE {nrmse_star:.4f} at preserved lag {tau_star}")
    return EXIT_OK


def cmd_importance(args, argv) -> int:
    started = _now()
    conf = Conf(args)
    seed, jobs = _seed_jobs(args, conf)
    ckpt, model, sites, subset, _ = _checkpoint_inputs(args, conf)
    repeats = conf.pick(args.repeats, "repeats", int, 20)
    normalizer = conf.pick(args.normalizer, "normalizer", str, "mean")
    against = conf.pick(args.against, "against", str, "raw")

    def one(item):
        site_id, samples = item
        return site_id, modality_importance(
            model, samples, ckpt.norms, repeats=repeats, seed=seed,
            normalizer=normalizer, against=against,
        )

    work = [("pooled", subset)] + list(_per_site(subset))
    with no_grad():
        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                reports = list(pool.map(one, work))
        else:
            reports = [one(item) for item in work]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table_path = out / "importance.csv"
    summary_path = out / "summary.json"
    write_importance_csv(reports, table_path)
    pooled = reports[0][1]
    write_summary_json(
        {
            "fi": pooled.fi,
            "baseline_nrmse": pooled.baseline,
            "repeats": repeats,
            "normalizer": normalizer,
            "against": against,
            "model_kind": ckpt.model_kind,
            "per_site": {site_id: rep.fi for site_id, rep in reports[1:]},
        },
        summary_path,
    )
    inputs = [args.checkpoint] + _site_csvs(args.data) + ([args.config] if args.config else [])
    write_manifest(
        out, "importance", argv, conf, seed, inputs, [table_path, summary_path], started
    )
    ranked = sorted(pooled.fi.items(), key=lambda kv: -kv[1])
    print("FI ranking: " + ", ".join(f"{m}={v:.4f}" for m, v in ranked))
    return EXIT_OK


def cmd_solar(args, argv) -> int:
    started = _now()
    conf = Conf(args)
    seed, _ = _seed_jobs(args, conf)
    loc = GeoLocation(
        latitude=conf.pick(args.lat, "latitude", float, None),
        longitude=conf.pick(args.lon, "longitude", float, None),
        elevation=conf.pick(args.elev, "elevation", float, 0.0),
    )
    start = np.datetime64(conf.pick(args.start, "start", str, "2016-01-01"))
    end = np.datetime64(conf.pick(args.end, "end", str, "2016-12-31"))
    if end < start:
        raise ConfigError("end date precedes start date")
    dates = np.arange(start, end + 1)
    values = rso_daily(loc, dates)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table_path = out / "rso.csv"
    _write_csv(
        table_path, ("date", "rso_w_m2"), zip((str(d) for d in dates), values.astype(float))
    )
    inputs = [args.config] if args.config else []
    write_manifest(out, "solar", argv, conf, seed, inputs, [table_path], started)
    print(f"wrote {len(dates)} daily values to {table_path}")
    return EXIT_OK


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fluxgpp",
        description="Daily GPP pipeline: synthesize data, train, tune, and probe models.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="master seed for all sub-streams")
    common.add_argument("--jobs", type=int, help="parallel workers for independent units")
    common.add_argument("--config", type=Path, help="flat key=value configuration file")
    common.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="override one config value (repeatable; dedicated flags still win)",
    )
    common.add_argument("--out", type=Path, required=True, help="output directory")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", type=Path, required=True, help="directory of site CSVs")
    data.add_argument("--k", type=int, help="context window length (days)")
    data.add_argument("--train-years", type=_years)
    data.add_argument("--val-years", type=_years)
    data.add_argument("--test-years", type=_years)

    hyper = argparse.ArgumentParser(add_help=False)
    hyper.add_argument("--model", choices=MODEL_KINDS, required=True)
    hyper.add_argument("--batch-size", type=int)
    hyper.add_argument("--lr", type=float)
    hyper.add_argument("--dropout", type=float)
    hyper.add_argument("--clip-norm", type=_opt_float)
    hyper.add_argument("--val-metric", choices=("raw", "smoothed"))
    hyper.add_argument("--hidden-size", type=int)
    hyper.add_argument("--num-layers", type=int)
    hyper.add_argument("--model-dim", type=int)
    hyper.add_argument("--ff-dim", type=int)
    hyper.add_argument("--num-heads", type=int)

    ckpt = argparse.ArgumentParser(add_help=False)
    ckpt.add_argument("--checkpoint", type=Path, required=True)
    ckpt.add_argument("--split", choices=("train", "validation", "test"))
    ckpt.add_argument("--normalizer", choices=("mean", "range", "std"))
    ckpt.add_argument("--against", choices=("raw", "smoothed"))

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic site CSVs")
    p.add_argument("--sites", type=int, help="number of synthetic sites")
    p.add_argument("--years", type=_ints, help="consecutive years, e.g. 2016,2017")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common, data, hyper], help="fit one model")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("tune", parents=[common, data, hyper], help="HyperBand search")
    p.add_argument("--resource", type=int, help="max epochs per configuration (R)")
    p.add_argument("--eta", type=int, help="successive-halving ratio")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("eval", parents=[common, data, ckpt], help="condition-stratified NRMSE")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("memory", parents=[common, data, ckpt], help="memory-retention curves")
    p.add_argument("--repeats", type=int)
    p.add_argument("--tau-stride", type=int)
    p.add_argument("--taus", type=_ints, help="explicit comma-separated lag grid")
    p.add_argument("--per-row", action="store_true", help="independent permutation per row")
    p.set_defaults(func=cmd_memory)

    p = sub.add_parser("importance", parents=[common, data, ckpt], help="modality importance")
    p.add_argument("--repeats", type=int)
    p.set_defaults(func=cmd_importance)

    p = sub.add_parser("solar", parents=[common], help="daily clear-sky radiation table")
    p.add_argument("--lat", type=float, required=True)
    p.add_argument("--lon", type=float, required=True)
    p.add_argument("--elev", type=float)
    p.add_argument("--start", help="first date, ISO format")
    p.add_argument("--end", help="last date, ISO format (inclusive)")
    p.set_defaults(func=cmd_solar)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_CONFIG
    try:
        return args.func(args, argv)
    except NonFiniteError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except GradkitError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (TrainingError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
