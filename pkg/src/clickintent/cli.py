"""Command-line entry point: generate, prepare, train, evaluate and analyse."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import experiments as ex
from .evalx import evaluate, run_baselines, select_threshold
from .exceptions import ConfigError, DataError, NumericError
from .nncore import SCHEMA_VERSION, params_from_dict, params_to_dict
from .sessions import PurchaseMatcher, label_and_censor, parse_click_log, sessionize
from .synthgen import PURCHASE_MATCHER, DEMOGRAPHY_SCHEMA, GenConfig, config_dict, generate

log = logging.getLogger("clickintent")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = ("generate", "prepare", "train", "evaluate", "gridsearch", "ablate",
            "shuffle-test", "resample-test", "report")
TRAIN_FAMILY = ("prepare", "train", "evaluate", "gridsearch", "ablate", "shuffle-test",
                "resample-test")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="clickintent", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path)
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path, default=Path("."))
        if name == "evaluate":
            p.add_argument("--model", type=Path, required=True)
        if name == "report":
            p.add_argument("inputs", nargs="+", type=Path)
    return parser


# ----------------------------------------------------------------- file io


class ArtifactWriter:
    """Collects outputs and moves them into place only when every one was written."""

    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.pending = []

    def text(self, name, content):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=self.out_dir, prefix=f".{name}.", suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(content)
        self.pending.append((tmp, self.out_dir / name))

    def json(self, name, doc):
        self.text(name, json.dumps(doc, sort_keys=True, indent=1) + "\n")

    def commit(self):
        for tmp, final in self.pending:
            os.replace(tmp, final)
        written = [str(final) for _, final in self.pending]
        self.pending = []
        return written

    def discard(self):
        for tmp, _ in self.pending:
            try:
                os.unlink(tmp)
            except FileNotFoundError:
                pass
        self.pending = []


def _read_text(path: Path):
    try:
        return path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise DataError(f"missing input file: {path}") from exc


def load_config(args):
    if args.config is None:
        if args.command in TRAIN_FAMILY:
            raise UsageError(f"{args.command} requires --config")
        return {}, Path(".")
    cfg = ex.parse_config(_read_text(args.config))
    return cfg, args.config.parent


def _path(cfg, base, key, default=None):
    value = cfg.get(key, default)
    if value is None:
        raise ConfigError(f"config is missing '{key}'")
    p = Path(value)
    return p if p.is_absolute() else base / p


def _stamp(doc, seed, cfg):
    doc.update({"schema_version": SCHEMA_VERSION, "seed": seed,
                "config_hash": ex.digest(json.dumps(cfg, sort_keys=True))})
    return doc


# ----------------------------------------------------------- data pipeline


def load_prepared(cfg, base):
    """Parse, sessionize, label and encode the inputs named in the config."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        events = parse_click_log(_read_text(_path(cfg, base, "clicks")))
        matcher = PurchaseMatcher.parse(cfg.get("purchase_matcher", PURCHASE_MATCHER))
        sessions = label_and_censor(sessionize(events), matcher)
        users = None
        if "demographics" in cfg:
            users = {}
            for line in _read_text(_path(cfg, base, "demographics")).splitlines():
                if line.strip():
                    rec = json.loads(line)
                    users[rec["user_id"]] = rec
        schema = (_read_text(_path(cfg, base, "schema")) if "schema" in cfg
                  else DEMOGRAPHY_SCHEMA)
        try:
            spec = ex.SplitSpec(*(float(x) for x in cfg.get("split", "0.8,0.1,0.1").split(",")))
        except TypeError as exc:
            raise ConfigError("split needs three comma-separated fractions") from exc
        data = ex.prepare(sessions, users, spec, T=int(cfg.get("T", 30)),
                          min_fraction=float(cfg.get("min_fraction", 0.01)), schema=schema)
    return data


def train_config(cfg, seed):
    tc = ex.TrainConfig.from_mapping(cfg)
    return replace(tc, seed=seed) if seed is not None else tc


# ---------------------------------------------------------------- commands


def cmd_generate(args, cfg, base, out):
    keys = {k: v for k, v in cfg.items() if k in GenConfig.__dataclass_fields__}
    gen = GenConfig()
    for k, v in keys.items():
        default = getattr(gen, k)
        if isinstance(default, tuple):
            v = tuple(float(x) for x in v.split(","))
        else:
            v = type(default)(v)
        setattr(gen, k, v)
    if args.seed is not None:
        gen.seed = args.seed
    corpus = generate(gen)
    out.text("clicks.jsonl", corpus.click_log)
    out.text("demographics.jsonl", corpus.demographics)
    out.text("labels.jsonl", corpus.labels)
    out.text("schema.txt", DEMOGRAPHY_SCHEMA)
    out.json("manifest.json", _stamp({"generator": config_dict(gen)}, gen.seed, config_dict(gen)))
    z = [json.loads(l)["z"] for l in corpus.labels.splitlines()]
    return ex.format_table(["sessions", "positive_rate", "seed"],
                           [[len(z), float(np.mean(z)), gen.seed]])


def cmd_prepare(args, cfg, base, out):
    data = load_prepared(cfg, base)
    doc = {
        "fingerprint": data.fingerprint(),
        "vocab": data.encoder.vocab_.to_dict(),
        "time_scaler": data.encoder.scaler_.to_dict(),
        "engineered_scaler": data.featurizer.scaler_.to_dict(),
        "demography": data.demo_encoder.prep_.to_dict() if data.demo_encoder else None,
        "splits": {name: part.ds.session_ids for name, part in data.splits().items()},
    }
    out.json("encoders.json", _stamp(doc, args.seed, cfg))
    rows = [[name, len(part), float(part.y.mean())] for name, part in data.splits().items()]
    return ex.format_table(["split", "sessions", "positive_rate"], rows)


def _model_doc(record, data, cfg):
    return params_to_dict(record.model.params_, config=record.config.to_dict(),
                          seed=record.seed,
                          extra={"config_hash": record.config.config_hash(),
                                 "encoder_fingerprint": data.fingerprint(),
                                 "target_rate": record.target_rate})


def cmd_train(args, cfg, base, out):
    data = load_prepared(cfg, base)
    tc = train_config(cfg, args.seed)
    rec = ex.train_with_early_stopping(tc, data)
    out.json("model.json", _model_doc(rec, data, cfg))
    run = rec.to_dict()
    run["encoder_fingerprint"] = data.fingerprint()
    out.json("run.json", _stamp(run, tc.seed, cfg))
    out.text("roc_test.csv", rec.reports["test"].roc_csv())
    return ex.format_table(["model", "AUC", "BA", "precision", "recall"],
                           ex.results_rows({tc.model: rec}))


def cmd_evaluate(args, cfg, base, out):
    doc = json.loads(_read_text(args.model))
    data = load_prepared(cfg, base)
    if doc.get("encoder_fingerprint") != data.fingerprint():
        raise DataError(
            f"vocab-hash mismatch: model was trained with encoders {doc.get('encoder_fingerprint')}, "
            f"current data encodes as {data.fingerprint()}")
    tc = ex.TrainConfig(**doc["config"])
    model = ex.model_from_params(tc, params_from_dict(doc))
    target_rate = doc["target_rate"]
    reports = {}
    for name, part in data.splits().items():
        scores = model.decision_scores(ex.model_inputs(tc.model, part))
        reports[name] = evaluate(scores, part.y, target_rate)
    base_reports = run_baselines(data.train.y, data.test.y, data.train.ds.lengths,
                                 data.test.ds.lengths, target_rate, seed=tc.seed)
    result = {"model": tc.model, "reports": {k: r.to_dict() for k, r in reports.items()},
              "baselines": {k: r.to_dict() for k, r in base_reports.items()},
              "encoder_fingerprint": data.fingerprint()}
    out.json("eval.json", _stamp(result, doc.get("seed"), cfg))
    out.text("roc_test.csv", reports["test"].roc_csv())
    rows = ex.results_rows({tc.model: reports["test"], **base_reports})
    return ex.format_table(["model", "AUC", "BA", "precision", "recall"], rows)


def _grid_axis(cfg, key, cast, default):
    raw = cfg.get(f"grid_{key}")
    return [cast(x) for x in raw.split(",")] if raw else default


def cmd_gridsearch(args, cfg, base, out):
    data = load_prepared(cfg, base)
    tc = train_config(cfg, args.seed)
    grid = {
        "hidden_units": _grid_axis(cfg, "hidden_units", int, [32, 64, 128]),
        "batch_size": _grid_axis(cfg, "batch_size", int, [32, 64, 128]),
        "dropout": _grid_axis(cfg, "dropout", float, [0.2, 0.3, 0.4]),
    }
    result = ex.grid_search(tc, grid, data)
    out.json("grid.json", _stamp(result.to_dict(), tc.seed, cfg))
    rows = [[H, b, p, auc] for (H, b, p), auc in sorted(result.matrix.items())]
    table = ex.format_table(["units", "batch", "dropout", "val AUC"], rows)
    best = result.best
    return table + (f"\nbest: units {best.hidden_units}, batch {best.batch_size}, "
                    f"dropout {best.dropout}")


def cmd_ablate(args, cfg, base, out):
    data = load_prepared(cfg, base)
    tc = train_config(cfg, args.seed)
    groups = [g.strip() for g in cfg["groups"].split(",")] if cfg.get("groups") else None
    result = ex.ablate_and_report(tc, data, groups)
    out.json("ablation.json", _stamp(result.to_dict(), tc.seed, cfg))
    return ablation_table(result.to_dict())


def cmd_shuffle_test(args, cfg, base, out):
    data = load_prepared(cfg, base)
    tc = train_config(cfg, args.seed)
    n = int(cfg.get("n_shuffles", 5))
    base_rec = ex.train_with_early_stopping(tc, data)
    base_auc = base_rec.reports["test"].auc
    runs = []
    for k in range(n):
        shuffled = ex.shuffle_prepared(data, tc.seed * 1000 + k)
        rec = ex.train_with_early_stopping(tc, shuffled)
        auc = rec.reports["test"].auc
        runs.append({"shuffle": k, "auc": auc, "change": ex.relative_change(auc, base_auc)})
    mean = float(np.mean([r["change"] for r in runs]))
    doc = {"model": tc.model, "base_auc": base_auc, "runs": runs, "mean_change": mean}
    out.json("temporal.json", _stamp(doc, tc.seed, cfg))
    return temporal_table(doc)


def cmd_resample_test(args, cfg, base, out):
    data = load_prepared(cfg, base)
    tc = train_config(cfg, args.seed)
    rows = {}
    for mode in ("none", "RUS", "ROS"):
        rec = ex.train_with_early_stopping(replace(tc, resample=mode), data)
        rows[mode] = rec.reports["test"]
    doc = {"model": tc.model, "reports": {k: r.to_dict() for k, r in rows.items()}}
    out.json("resample.json", _stamp(doc, tc.seed, cfg))
    return ex.format_table(["sampling", "AUC", "BA", "precision", "recall"],
                           ex.results_rows(rows))


# ------------------------------------------------------------------ report


def ablation_table(doc):
    runs = doc["runs"]
    base_auc = runs["base"]["reports"]["test"]["auc"]
    rows = []
    for name, run in runs.items():
        rep = run["reports"]["test"]
        rows.append([name, rep["auc"], rep["balanced_accuracy"], rep["precision"],
                     rep["recall"], ex.relative_change(rep["auc"], base_auc)])
    parts = [ex.format_table(["run", "AUC", "BA", "precision", "recall", "AUC change"], rows)]
    for key, title in (("by_length", "session length"), ("by_os", "operating system")):
        parts.append(ex.format_table([title, "n", "positives", "AUC"],
                                     [[r["group"], r["n"], r["n_pos"], r["auc"]] for r in doc[key]]))
    return "\n\n".join(parts)


def temporal_table(doc):
    rows = [[r["shuffle"] + 1, r["auc"], r["change"]] for r in doc["runs"]]
    rows.append(["mean", float(np.mean([r["auc"] for r in doc["runs"]])), doc["mean_change"]])
    return ex.format_table(["shuffle", "AUC", "relative change"], rows)


def render(doc):
    if "runs" in doc and "by_length" in doc:
        return ablation_table(doc)
    if "mean_change" in doc:
        return temporal_table(doc)
    if "cells" in doc:
        rows = [[c["hidden_units"], c["batch_size"], c["dropout"], c["val_auc"]]
                for c in doc["cells"]]
        return ex.format_table(["units", "batch", "dropout", "val AUC"], rows)
    if "reports" in doc and "history" in doc:
        rep = doc["reports"]["test"]
        return ex.format_table(["model", "AUC", "BA", "precision", "recall"],
                               [[doc["config"]["model"], rep["auc"], rep["balanced_accuracy"],
                                 rep["precision"], rep["recall"]]])
    if "reports" in doc:
        rows = [[name, r["auc"], r["balanced_accuracy"], r["precision"], r["recall"]]
                for name, r in {**doc["reports"], **doc.get("baselines", {})}.items()]
        return ex.format_table(["model", "AUC", "BA", "precision", "recall"], rows)
    raise DataError("unrecognised artifact: expected a run, grid, ablation, temporal or evaluation JSON")


def cmd_report(args, cfg, base, out):
    tables = []
    for path in args.inputs:
        try:
            doc = json.loads(_read_text(path))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: not valid JSON ({exc})") from exc
        tables.append(f"{path.name}\n{render(doc)}")
    return "\n\n".join(tables)


HANDLERS = {
    "generate": cmd_generate, "prepare": cmd_prepare, "train": cmd_train,
    "evaluate": cmd_evaluate, "gridsearch": cmd_gridsearch, "ablate": cmd_ablate,
    "shuffle-test": cmd_shuffle_test, "resample-test": cmd_resample_test, "report": cmd_report,
}


def run(argv=None, stdout=None, stderr=None):
    """Run one command; returns the exit code."""
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    handler = logging.StreamHandler(stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("clickintent")
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    writer = None
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError(f"expected a subcommand: {', '.join(COMMANDS)}")
        cfg, base = load_config(args)
        if args.command in TRAIN_FAMILY[1:]:
            train_config(cfg, args.seed)  # reject a bad config before reading any data
        writer = ArtifactWriter(args.out)
        summary = HANDLERS[args.command](args, cfg, base, writer)
        written = writer.commit()
        for path in written:
            log.info("wrote %s", path)
        print(summary, file=stdout)
        return EXIT_OK
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=stderr)
        return EXIT_NUMERIC
    except (DataError, ValueError, KeyError, OSError) as exc:
        print(f"data error: {exc}", file=stderr)
        return EXIT_DATA
    finally:
        if writer is not None:
            writer.discard()
        root.removeHandler(handler)


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
