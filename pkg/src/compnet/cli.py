"""Command-line entry point: generate | curate | train | eval | predict | export.

Every failure exits nonzero with a one-line diagnostic on stderr; the exit code
names the kind of failure (see ``EXIT_CODES``).
"""

from __future__ import annotations

import os

# must happen before numpy loads its BLAS
_threads = os.environ.get("ENGINE_THREADS")
if _threads and _threads.isdigit() and int(_threads) > 0:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import csv  # noqa: E402
import hashlib  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from dataclasses import asdict, fields  # noqa: E402
from pathlib import Path  # noqa: E402
from typing import Dict, List, Optional, Sequence  # noqa: E402

import numpy as np  # noqa: E402

from . import __version__, curation, data  # noqa: E402
from .config import read_toml  # noqa: E402
from .curation import CurationError  # noqa: E402
from .inference import (ClassifierBank, ClassifierSource, InferenceError, export_bank,  # noqa: E402
                        predict_shortlist, prediction_record, read_allow_list,
                        score_compositions, top_scores_truncate, write_predictions)
from .metrics import MetricReport  # noqa: E402
from .model import ModelConfig, ModelError  # noqa: E402
from .numerics import NumericsError  # noqa: E402
from .training import ConfigError, RunConfig, TrainedModel, evaluate, train  # noqa: E402

log = logging.getLogger("compnet")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_CONFIG = 4
EXIT_DATA = 5
EXIT_DIMENSION = 6
EXIT_DIVERGED = 7
EXIT_CODES = {
    EXIT_USAGE: "bad command line",
    EXIT_MISSING: "missing input file",
    EXIT_CONFIG: "invalid configuration",
    EXIT_DATA: "malformed input data",
    EXIT_DIMENSION: "dimension mismatch",
    EXIT_DIVERGED: "training diverged",
}

RUN_FORMAT = "compnet-run"
RUN_VERSION = 1

# config file section -> RunConfig fields it may set
SECTIONS = {
    "model": ("feature_dim", "encoder", "encoder_hidden", "dropout", "slope",
              "detach_composition_inputs"),
    "loss": ("loss_weights", "num_negatives", "negatives_from", "conditional",
             "conditional_support"),
    "train": ("baseline", "epochs", "epoch_budgets", "batch_size", "seed"),
    "schedule": ("base_rate", "warmup_fraction", "decay", "decay_factor", "decay_steps",
                 "momentum", "weight_decay", "clip_norm"),
    "inference": ("k_a", "k_o"),
}
CURATION_KEYS = ("threshold", "heldout_fraction", "top_k")
KNOWN_SECTIONS = set(SECTIONS) | {"data", "curation"}


class DimensionError(ValueError):
    pass


class MissingInput(FileNotFoundError):
    pass


# --- configuration -------------------------------------------------------------

def load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise MissingInput(f"config file {path} not found")
    try:
        raw = read_toml(p)
    except ValueError as exc:  # TOMLDecodeError
        raise ConfigError(f"{path}: {exc}") from None
    unknown = set(raw) - KNOWN_SECTIONS
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    for name, section in raw.items():
        if not isinstance(section, dict):
            raise ConfigError(f"{path}: [{name}] must be a table")
    return raw


def run_config(raw: dict, seed: Optional[int] = None) -> RunConfig:
    values = {}
    for section, keys in SECTIONS.items():
        table = dict(raw.get(section, {}))
        if section == "loss" and "weights" in table:
            table["loss_weights"] = table.pop("weights")
        bad = set(table) - set(keys)
        if bad:
            raise ConfigError(f"[{section}] has unknown keys {sorted(bad)}")
        values.update(table)
    if seed is not None:
        values["seed"] = seed
    try:
        cfg = RunConfig.from_dict(values)
        # model-level checks that do not depend on the data
        ModelConfig(cfg.feature_dim, cfg.feature_dim, 1, 1, cfg.encoder, list(cfg.encoder_hidden),
                    cfg.slope, cfg.dropout, cfg.detach_composition_inputs, cfg.seed)
    except (TypeError, ModelError, NumericsError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def world_config(raw: dict, seed: Optional[int] = None) -> data.SyntheticWorldConfig:
    table = {k: v for k, v in raw.get("data", {}).items() if k != "path"}
    known = {f.name for f in fields(data.SyntheticWorldConfig)}
    bad = set(table) - known
    if bad:
        raise ConfigError(f"[data] has unknown keys {sorted(bad)}")
    if seed is not None:
        table["seed"] = seed
    try:
        return data.SyntheticWorldConfig(**table)
    except (TypeError, data.DataError) as exc:
        raise ConfigError(f"[data]: {exc}") from None


def curation_settings(raw: dict) -> dict:
    table = dict(raw.get("curation", {}))
    bad = set(table) - set(CURATION_KEYS)
    if bad:
        raise ConfigError(f"[curation] has unknown keys {sorted(bad)}")
    out = {"threshold": 5, "heldout_fraction": 0.5, "top_k": 5, **table}
    if not 0 < out["heldout_fraction"] < 1 or out["top_k"] < 1 or out["threshold"] < 0:
        raise ConfigError("[curation] needs heldout_fraction in (0, 1), top_k >= 1, threshold >= 0")
    return out


# --- helpers ------------------------------------------------------------------------

def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise MissingInput(f"{what} {path} not found")
    return p


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_dataset(path) -> data.Dataset:
    return data.load(_require(path, "dataset"))


def _check_dims(trained: TrainedModel, dataset: data.Dataset):
    cfg = trained.model.cfg
    raw_dim = int(dataset.samples[0].feature.shape[0]) if dataset.samples else cfg.raw_dim
    if raw_dim != cfg.raw_dim:
        raise DimensionError(f"dataset features have {raw_dim} values, model expects {cfg.raw_dim}")
    if (len(dataset.attributes), len(dataset.objects)) != (cfg.num_attributes, cfg.num_objects):
        raise DimensionError(
            f"dataset vocabulary {len(dataset.attributes)}x{len(dataset.objects)} != model "
            f"{cfg.num_attributes}x{cfg.num_objects}")


def _load_checkpoint(path) -> TrainedModel:
    try:
        return TrainedModel.load(_require(path, "checkpoint"))
    except (ModelError, ConfigError, KeyError, TypeError) as exc:
        raise data.DataError(f"{path}: {exc}") from None


def _read_manifest(run_dir: Path) -> dict:
    path = _require(run_dir / "manifest.json", "run manifest")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise data.DataError(f"{path}: {exc}") from None
    if manifest.get("format") != RUN_FORMAT:
        raise data.DataError(f"{path}: not a run manifest")
    return manifest


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --- commands -----------------------------------------------------------------------

def cmd_generate(args) -> int:
    raw = load_config(args.config)
    cfg = world_config(raw, args.seed)
    ds = data.generate(cfg)
    out = _out_dir(args)
    path = out / "dataset.jsonl"
    data.save(ds, path)
    parts = {p: len(ds.partition(p)) for p in ("train", "test-seen", "test-unseen")}
    print(f"wrote {path}: {len(ds.samples)} images {parts}; "
          f"{len(ds.space.seen)} seen / {len(ds.space.unseen)} unseen compositions")
    return EXIT_OK


def cmd_curate(args) -> int:
    raw = load_config(args.config)
    settings = curation_settings(raw)
    if args.threshold is not None:
        settings["threshold"] = args.threshold
    synonyms = curation.SynonymMap.from_tsv(_require(args.synonyms, "synonym map")) \
        if args.synonyms else None
    if args.synthetic is not None:
        corpus = curation.synthetic_corpus(args.synthetic)
        table = corpus.table()
        vis = curation.corpus_visualness(corpus, settings["heldout_fraction"],
                                         args.seed or 0, settings["top_k"])
    else:
        if not args.cooccurrence:
            raise ConfigError("curate needs --cooccurrence (or --synthetic SEED)")
        table = curation.CooccurrenceTable.from_csv(_require(args.cooccurrence, "co-occurrence table"),
                                                    synonyms)
        if args.visualness:
            vis = curation.read_visualness(_require(args.visualness, "visualness table"))
            if synonyms:
                vis = {synonyms(a): v for a, v in vis.items()}
        elif args.features:
            vis = _visualness_from_features(args.features, synonyms, settings, args.seed or 0)
        else:
            raise ConfigError("curate needs --features or --visualness for the visualness scores")
    ranked = curation.score_attributes(table, vis, settings["threshold"])
    out = _out_dir(args)
    path = out / "ranking.csv"
    curation.write_ranking(path, ranked)
    width = max(len(s.attribute) for s in ranked)
    print(f"{'attribute'.ljust(width)}  visual  shared  product")
    for s in ranked:
        print(f"{s.attribute.ljust(width)}  {s.visualness:6.2f}  {s.sharedness:6.2f}  {s.product:7.3f}")
    print(f"wrote {path}")
    return EXIT_OK


def _visualness_from_features(path, synonyms, settings, seed) -> Dict[str, float]:
    """NPZ with ``features`` (N, d), ``labels`` (N, A) and ``attributes`` (A,)."""
    try:
        with np.load(_require(path, "feature file"), allow_pickle=False) as z:
            X, Y, names = z["features"], z["labels"].astype(bool), [str(a) for a in z["attributes"]]
    except (OSError, ValueError, KeyError) as exc:
        raise CurationError(f"{path}: {exc}") from None
    if X.ndim != 2 or Y.shape != (X.shape[0], len(names)):
        raise DimensionError(f"{path}: features {X.shape} and labels {Y.shape} do not line up "
                             f"with {len(names)} attributes")
    corpus = curation.CurationCorpus(X, Y, np.zeros(X.shape[0], dtype=int), names, ["-"])
    vis = curation.corpus_visualness(corpus, settings["heldout_fraction"], seed, settings["top_k"])
    if synonyms:
        merged: Dict[str, float] = {}
        for a, v in vis.items():
            merged[synonyms(a)] = max(v, merged.get(synonyms(a), 0.0))
        vis = merged
    return vis


def _dataset_for_run(raw: dict, args, out: Path):
    """Dataset from ``[data] path`` or generated from ``[data]``; returns (dataset, record)."""
    section = raw.get("data", {})
    if "path" in section:
        path = _require(section["path"], "dataset")
        return data.load(path), {"path": str(path), "sha256": _sha256(path)}
    cfg = world_config(raw, args.seed)
    ds = data.generate(cfg)
    path = out / "dataset.jsonl"
    data.save(ds, path)
    return ds, {"path": path.name, "sha256": _sha256(path), "generated": asdict(cfg)}


def cmd_train(args) -> int:
    raw = load_config(args.config)
    cfg = run_config(raw, args.seed)
    out = _out_dir(args)
    if args.config:
        (out / "config.toml").write_bytes(Path(args.config).read_bytes())
    ds, ds_record = _dataset_for_run(raw, args, out)
    budgets = list(cfg.epoch_budgets) or [cfg.epochs]
    manifest = {
        "format": RUN_FORMAT, "version": RUN_VERSION, "package_version": __version__,
        "checkpoint_format": "compnet-checkpoint/1", "dataset_format": f"{data.FORMAT}/{data.VERSION}",
        "config_file": "config.toml" if args.config else None,
        "config_sha256": _sha256(args.config) if args.config else None,
        "run_config": cfg.to_dict(), "dataset": ds_record,
        "metrics_log": "metrics.jsonl", "checkpoints": [], "evaluations": [],
    }
    log_path = out / "metrics.jsonl"
    log_path.write_text("")
    for budget in budgets:
        def record(entry, budget=budget):
            with open(log_path, "a") as fh:
                fh.write(json.dumps({"budget": budget, **entry}, sort_keys=True) + "\n")

        trained = train(ds, cfg, epochs=budget, callback=record)
        name = "checkpoint.npz" if len(budgets) == 1 else f"checkpoint_e{budget}.npz"
        trained.save(out / name)
        manifest["checkpoints"].append({"epochs": budget, "path": name,
                                        "sha256": _sha256(out / name)})
        last = trained.history[-1]
        print(f"trained {cfg.baseline} for {budget} epochs: loss {last['total']:.4f} -> {out / name}")
    _write_json(out / "manifest.json", manifest)
    return EXIT_OK


def _eval_one(trained, ds, k_a, k_o, out: Path, stem: str, render: bool) -> MetricReport:
    _check_dims(trained, ds)
    report = evaluate(trained, ds, k_a, k_o)
    _write_json(out / f"{stem}.json", report.to_dict())
    (out / f"{stem}.txt").write_text(report.to_text() + "\n")
    seen_keys = {f"{a},{o}" for a, o in ds.space.seen}
    with open(out / f"{stem}_ap.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["attribute", "object", "split", "ap"])
        for key, ap in report.ap.items():
            a, o = key.split(",")
            w.writerow([ds.attributes[int(a)], ds.objects[int(o)],
                        "seen" if key in seen_keys else "unseen", repr(ap)])
    if render:
        from . import plotting

        plotting.plot_ap_by_split(report.ap, seen_keys, out / f"{stem}_ap.png")
        if trained.history:
            plotting.plot_training_curves(trained.history, out / f"{stem}_training.png")
    return report


def cmd_eval(args) -> int:
    raw = load_config(args.config)
    inference = raw.get("inference", {})
    render = not args.no_figures
    if args.run:
        run_dir = Path(args.run)
        manifest = _read_manifest(run_dir)
        ds_path = Path(args.data) if args.data else run_dir / manifest["dataset"]["path"]
        if not ds_path.is_absolute() and not ds_path.exists():
            ds_path = Path(manifest["dataset"]["path"])
        ds = _load_dataset(ds_path)
        checkpoints = [(c["epochs"], run_dir / c["path"]) for c in manifest["checkpoints"]]
        out = Path(args.out) if args.out != "." else run_dir / "eval"
    else:
        if not args.checkpoint or not args.data:
            raise ConfigError("eval needs --run DIR or both --checkpoint and --data")
        manifest, run_dir = None, None
        ds = _load_dataset(args.data)
        checkpoints = [(None, Path(args.checkpoint))]
        out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = []
    for epochs, path in checkpoints:
        trained = _load_checkpoint(path)
        k_a = args.k_a or inference.get("k_a") or trained.config.k_a
        k_o = args.k_o or inference.get("k_o") or trained.config.k_o
        stem = "report" if len(checkpoints) == 1 else f"report_e{epochs}"
        report = _eval_one(trained, ds, k_a, k_o, out, stem, render)
        results.append((epochs, report))
        if len(checkpoints) > 1:
            print(f"epochs {epochs}:")
        print(report.to_text())
    if len(results) > 1:
        budgets = [e for e, _ in results]
        with open(out / "sweep.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epochs", "object_p1", "attribute_p1", "seen_map", "unseen_map"])
            for e, r in results:
                w.writerow([e, r.object_p1, r.attribute_p1, r.seen_map, r.unseen_map])
        if render:
            from . import plotting

            plotting.plot_metric_sweep(budgets, {"seen": [r.seen_map for _, r in results],
                                                 "unseen": [r.unseen_map for _, r in results]},
                                       "epoch budget", out / "sweep.png")
    if manifest is not None:
        # append-only: earlier evaluations are never rewritten
        manifest["evaluations"].append({
            "out": str(out), "k_a": results[0][1].k_a, "k_o": results[0][1].k_o,
            "reports": [{"epochs": e, "seen_map": r.seen_map, "unseen_map": r.unseen_map}
                        for e, r in results]})
        _write_json(run_dir / "manifest.json", manifest)
    return EXIT_OK


def _features_for_predict(path) -> tuple:
    """(ids, raw features, attribute names, object names) from a dataset or a .npy matrix."""
    p = _require(path, "feature file")
    if p.suffix == ".npy":
        try:
            X = np.load(p, allow_pickle=False)
        except (OSError, ValueError) as exc:
            raise data.DataError(f"{path}: {exc}") from None
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return list(range(X.shape[0])), X, None, None
    ds = data.load(p)
    samples = ds.partition("test-seen", "test-unseen") or ds.samples
    X, _, _ = ds.arrays(samples)
    return [s.id for s in samples], X, ds.attributes, ds.objects


def cmd_predict(args) -> int:
    raw = load_config(args.config)
    inference = raw.get("inference", {})
    trained = _load_checkpoint(args.checkpoint)
    model = trained.model.eval()
    ids, X, attr_names, obj_names = _features_for_predict(args.features)
    if X.shape[1] != model.cfg.raw_dim:
        raise DimensionError(f"features have {X.shape[1]} values, model expects {model.cfg.raw_dim}")
    if attr_names is not None and (len(attr_names), len(obj_names)) != (
            model.cfg.num_attributes, model.cfg.num_objects):
        raise DimensionError("feature file vocabulary does not match the model")
    if args.bank:
        source = ClassifierBank.load(_require(args.bank, "classifier bank"))
        if (source.D, source.num_attributes, source.num_objects) != (
                model.D, model.cfg.num_attributes, model.cfg.num_objects):
            raise DimensionError(f"bank is D={source.D} {source.num_attributes}x{source.num_objects}, "
                                 f"model is D={model.D} {model.cfg.num_attributes}x{model.cfg.num_objects}")
    else:
        source = ClassifierSource(model)
    k_a = args.k_a or inference.get("k_a") or trained.config.k_a
    k_o = args.k_o or inference.get("k_o") or trained.config.k_o
    F = model.encode(X)
    records = []
    for image_id, f in zip(ids, F):
        shortlist = predict_shortlist(model, f, k_a, k_o)
        scores = score_compositions(source, f, shortlist)
        if args.m:
            scores = top_scores_truncate(scores, args.m)
        records.append(prediction_record(image_id, scores, attr_names, obj_names))
    out = _out_dir(args)
    path = out / "predictions.jsonl"
    write_predictions(path, records)
    print(f"wrote {len(records)} predictions to {path}")
    return EXIT_OK


def cmd_export(args) -> int:
    trained = _load_checkpoint(args.checkpoint)
    model = trained.model.eval()
    if args.allow_list:
        pairs = read_allow_list(_require(args.allow_list, "allow-list"))
    else:
        A, O = model.cfg.num_attributes, model.cfg.num_objects
        pairs = [(a, o) for a in range(A) for o in range(O)]
    bank = export_bank(model, pairs)
    out = _out_dir(args)
    path = out / "bank.cnb"
    bank.save(path)
    print(f"wrote {len(bank)} composed classifiers (D={bank.D}) to {path}")
    return EXIT_OK


# --- entry point ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="TOML config file")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", metavar="DIR", default=".", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")

    parser = argparse.ArgumentParser(prog="compnet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("generate", parents=[common], help="write a synthetic dataset")

    p = sub.add_parser("curate", parents=[common], help="rank attributes by visualness x sharedness")
    p.add_argument("--cooccurrence", metavar="CSV", help="attribute,object,count rows")
    p.add_argument("--features", metavar="NPZ", help="features/labels/attributes arrays for probes")
    p.add_argument("--visualness", metavar="CSV", help="precomputed attribute,visualness rows")
    p.add_argument("--synonyms", metavar="TSV", help="raw<TAB>canonical label map")
    p.add_argument("--threshold", type=int, help="co-occurrence count an object must exceed")
    p.add_argument("--synthetic", type=int, metavar="SEED", help="use the built-in synthetic corpus")

    sub.add_parser("train", parents=[common], help="train and write a run directory")

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on the test partitions")
    p.add_argument("--run", metavar="DIR", help="run directory written by train")
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--data", metavar="PATH", help="dataset JSONL")
    p.add_argument("--k-a", dest="k_a", type=int)
    p.add_argument("--k-o", dest="k_o", type=int)
    p.add_argument("--no-figures", action="store_true", help="skip the PNG figures")

    p = sub.add_parser("predict", parents=[common], help="shortlist predictions as JSON lines")
    p.add_argument("--checkpoint", metavar="PATH", required=True)
    p.add_argument("--bank", metavar="PATH", help="score with an exported classifier bank")
    p.add_argument("--features", metavar="PATH", required=True, help="dataset JSONL or .npy matrix")
    p.add_argument("--k-a", dest="k_a", type=int)
    p.add_argument("--k-o", dest="k_o", type=int)
    p.add_argument("--m", type=int, help="keep the m most probable pairs per image")

    p = sub.add_parser("export", parents=[common], help="export composed classifiers to a bank")
    p.add_argument("--checkpoint", metavar="PATH", required=True)
    p.add_argument("--allow-list", dest="allow_list", metavar="CSV", help="attribute,object id pairs")
    return parser


COMMANDS = {"generate": cmd_generate, "curate": cmd_curate, "train": cmd_train, "eval": cmd_eval,
            "predict": cmd_predict, "export": cmd_export}


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, FileNotFoundError):
        return EXIT_MISSING
    if isinstance(exc, DimensionError):
        return EXIT_DIMENSION
    if isinstance(exc, FloatingPointError):
        return EXIT_DIVERGED
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (data.DataError, CurationError, InferenceError, ModelError, NumericsError)):
        return EXIT_DATA
    return EXIT_INTERNAL


def main(argv: Optional[Sequence[str]] = None) -> int:
    threads = os.environ.get("ENGINE_THREADS")
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if threads is not None and not (threads.isdigit() and int(threads) > 0):
        print(f"compnet: error: ENGINE_THREADS must be a positive integer, got {threads!r}",
              file=sys.stderr)
        return EXIT_CONFIG
    for name in ("k_a", "k_o", "m"):
        v = getattr(args, name, None)
        if v is not None and v < 1:
            print(f"compnet: error: --{name.replace('_', '-')} must be >= 1", file=sys.stderr)
            return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - mapped to an exit code
        code = exit_code_for(exc)
        if code == EXIT_INTERNAL:
            raise
        print(f"compnet: error ({EXIT_CODES[code]}): {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
