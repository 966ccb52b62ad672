"""Stage-by-stage command line driver.

    python -m progkt synth --students 50 --seed 7 --data data/
    python -m progkt ingest --data data/ --work run/
    python -m progkt embed-problems --data data/ --work run/
    python -m progkt pretrain-code --data data/ --work run/
    python -m progkt train --data data/ --work run/
    python -m progkt eval --data data/ --work run/
    python -m progkt ablate --data data/ --work run/ --variants full,no_code
    python -m progkt sweep --data data/ --work run/ --lambdas 0,0.3,0.6,1,2,30

Every stage reads a flat JSON config (``--config``) merged with ``--set key=value``
and the explicit flags; flags win. ``PROGKT_DATA`` sets the default data directory.
Exit codes: 0 ok, 1 usage or config, 2 data, 3 numerical divergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import fields

import numpy as np

from . import datamodel as dm
from . import graphembed as ge
from . import trainer as tr

log = logging.getLogger("progkt")

ARTIFACT_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

SYNTH_KEYS = {f.name for f in fields(dm.SynthConfig)}
TRAIN_KEYS = {f.name for f in fields(tr.TrainConfig)}
RUN_KEYS = {"data_dir", "work_dir", "synth_seed", "variants", "lambdas"}
assert not (SYNTH_KEYS & TRAIN_KEYS), "config namespaces must stay disjoint"


class StageError(dm.DataError):
    """An upstream artifact is missing."""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- config

def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_run_config(path=None, overrides=None):
    """Flat dict: config file (a report's embedded ``config`` also works),
    then overrides on top. Unknown keys raise ConfigError."""
    cfg = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise dm.ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            loaded = json.loads(text)
        except json.JSONDecodeError:
            # a JSONL report: take the config of its first record
            loaded = json.loads(text.splitlines()[0])
        if not isinstance(loaded, dict):
            raise dm.ConfigError(f"{path}: config must be a JSON object")
        cfg.update(loaded.get("config", loaded))
    cfg.update({k: v for k, v in (overrides or {}).items() if v is not None})
    unknown = set(cfg) - SYNTH_KEYS - TRAIN_KEYS - RUN_KEYS
    if unknown:
        raise dm.ConfigError(f"unknown config keys: {sorted(unknown)}")
    return cfg


def synth_config(run):
    d = {k: v for k, v in run.items() if k in SYNTH_KEYS}
    if "noise_statements" in d:
        d["noise_statements"] = tuple(d["noise_statements"])
    try:
        cfg = dm.SynthConfig(**d)
    except TypeError as exc:
        raise dm.ConfigError(str(exc)) from exc
    cfg.validate()
    return cfg


def train_config(run):
    return tr.TrainConfig.from_dict({k: v for k, v in run.items() if k in TRAIN_KEYS})


def effective(run):
    """Full flattened config as echoed into reports."""
    out = {"data_dir": run["data_dir"], "work_dir": run["work_dir"]}
    out.update(train_config(run).as_dict())
    for k in ("variants", "lambdas"):
        if k in run:
            out[k] = run[k]
    return out


# ---------------------------------------------------------------- artifacts

def _work(run, name):
    return os.path.join(run["work_dir"], name)


def _require(path, stage):
    if not os.path.exists(path):
        raise StageError(f"missing {path}; run `{stage}` first")
    return path


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _read_artifact(path, kind):
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    if obj.get("version") != ARTIFACT_VERSION or obj.get("kind") != kind:
        raise dm.FormatError(f"{path}: expected {kind} artifact version {ARTIFACT_VERSION}")
    return obj


def _append_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _prepare(run, need_split=True):
    cfg = train_config(run)
    kb, events, roles, _ = dm.read_corpus(run["data_dir"])
    prepared = tr.Prepared(kb, events, roles, cfg)
    if need_split:
        split = _read_artifact(_require(_work(run, "ingest.json"), "ingest"), "ingest")
        if split["train_users"] != prepared.train_users or split["test_users"] != prepared.test_users:
            raise dm.IntegrityError("data or split settings changed since `ingest`; re-run it")
    return cfg, prepared


def _attach_upstream(run, cfg, prepared):
    if not (cfg.no_code and not cfg.finetune_code):
        for name in tr.CODE_FILES.values():
            _require(_work(run, name), "pretrain-code")
        tr.load_code_assets(run["work_dir"], prepared, cfg)
    if cfg.node2vec and not cfg.no_problem:
        path = _require(_work(run, "problem_embeddings.npz"), "embed-problems")
        with np.load(path) as z:
            if int(z["version"]) != ARTIFACT_VERSION or str(z["kind"]) != "problem_embeddings":
                raise dm.FormatError(f"{path}: expected problem_embeddings version {ARTIFACT_VERSION}")
            table = z["node2vec"].copy()
        wcfg = cfg.walk_config()
        prepared._cache[("n2v", wcfg.walks_per_node, wcfg.walk_length, wcfg.window, wcfg.p, wcfg.q,
                         wcfg.dim, cfg.pretrain_seed)] = table


# ---------------------------------------------------------------- commands

def cmd_synth(run):
    scfg = synth_config(run)
    seed = int(run.get("synth_seed", 0))
    kb, events, roles, behaviors = dm.synth_generate(scfg, seed)
    dm.write_corpus(run["data_dir"], kb, events, roles, behaviors)
    _write_json(os.path.join(run["data_dir"], "synth_config.json"),
                {"version": ARTIFACT_VERSION, "kind": "synth", "seed": seed, "config": dm.config_dict(scfg)})
    print(f"wrote {len(events)} submissions from {scfg.n_students} students to {run['data_dir']}")


def cmd_ingest(run):
    cfg, prepared = _prepare(run, need_split=False)
    counts = {"students": len(prepared.sequences), "train_students": len(prepared.train_users),
              "test_students": len(prepared.test_users), "train_windows": len(prepared.train),
              "test_windows": len(prepared.test), "submissions": int(len(prepared.submission_ids))}
    _write_json(_work(run, "ingest.json"), {
        "version": ARTIFACT_VERSION, "kind": "ingest", "config": effective(run), "counts": counts,
        "train_users": prepared.train_users, "test_users": prepared.test_users})
    print("kept " + ", ".join(f"{k}={v}" for k, v in counts.items()))


def cmd_embed_problems(run):
    cfg, prepared = _prepare(run)
    table = prepared.node2vec_table(cfg)
    np.savez(_work(run, "problem_embeddings.npz"), version=ARTIFACT_VERSION, kind="problem_embeddings",
             node2vec=table, edges=np.array(prepared.graph.edges, dtype=np.int64).reshape(-1, 2),
             config=json.dumps(effective(run), sort_keys=True))
    ge.export_embeddings(table, _work(run, "problem_embeddings.txt"))
    print(f"node2vec table {table.shape} for {prepared.graph.n_problems} problems, "
          f"{len(prepared.graph.edges)} problem-concept edges")


def cmd_pretrain_code(run):
    cfg, prepared = _prepare(run)
    assets = tr.save_code_assets(run["work_dir"], prepared, cfg)
    rep = assets["report"]
    _append_jsonl(_work(run, "pretrain_code.jsonl"), [{
        "config": effective(run), "accuracy": rep.accuracy, "majority_baseline": rep.majority_baseline,
        "n_classes": rep.n_classes, "losses": rep.losses}])
    print(f"code classifier: {rep.n_classes}-class held-out accuracy {rep.accuracy:.4f} "
          f"(majority {rep.majority_baseline:.4f})")


def _summary_line(report):
    seeds = " ".join(f"{a:.4f}" for a in report.per_seed_auc)
    return f"{report.variant:>20s}  mean AUC {report.mean_auc:.4f}  per seed [{seeds}]"


def cmd_train(run):
    cfg, prepared = _prepare(run)
    _attach_upstream(run, cfg, prepared)
    models, results = [], []
    for seed in cfg.seeds:
        model, res = tr.train_seed(cfg, prepared, seed)
        tr.save_model(_work(run, f"model_seed{seed}.npz"), model, seed, res)
        models.append(model)
        results.append(res)
    records = [{"config": effective(run), "seed": r.seed, "auc": r.auc, "best_auc": r.best_auc,
                "best_epoch": r.best_epoch, "losses": r.losses, "aucs": r.aucs} for r in results]
    _append_jsonl(_work(run, "train_report.jsonl"), records)
    print(f"trained {len(results)} seed(s): mean final test AUC "
          f"{np.mean([r.auc for r in results]):.4f}")


def cmd_eval(run):
    cfg, prepared = _prepare(run)
    _attach_upstream(run, cfg, prepared)
    records = []
    for seed in cfg.seeds:
        model, meta = tr.load_model(_require(_work(run, f"model_seed{seed}.npz"), "train"))
        value = tr.evaluate(model, prepared, batch_size=cfg.eval_batch_size)
        trained = (meta.get("result") or {}).get("auc")
        records.append({"config": effective(run), "seed": seed, "auc": value, "trained_auc": trained,
                        "matches_training": trained == value})
        print(f"seed {seed}: test AUC {value:.6f}" + ("" if trained is None else
                                                       f" (training run {trained:.6f})"))
    _append_jsonl(_work(run, "eval_report.jsonl"), records)


def cmd_ablate(run):
    cfg, prepared = _prepare(run)
    variants = run.get("variants") or ["full"] + list(tr.ABLATIONS)
    if isinstance(variants, str):
        variants = [v for v in variants.split(",") if v]
    reports = {}
    for name in variants:
        vcfg = cfg.variant(name)
        _attach_upstream(run, vcfg, prepared)
        _, reports[name] = tr.train(vcfg, prepared, variant=name)
        print(_summary_line(reports[name]))
    _append_jsonl(_work(run, "ablation_report.jsonl"),
                  [dict(reports[n].to_dict(), config=effective(run)) for n in variants])


def cmd_sweep(run):
    cfg, prepared = _prepare(run)
    _attach_upstream(run, cfg, prepared)
    lambdas = run.get("lambdas") or [0.0, 0.3, 0.6, 1.0, 2.0, 30.0]
    if isinstance(lambdas, str):
        lambdas = [float(x) for x in lambdas.split(",") if x]
    rows = tr.sweep_lambda(cfg, prepared, grid=[float(x) for x in lambdas])
    with open(_work(run, "sweep.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["lambda", "mode", "seed", "auc"])
        w.writeheader()
        w.writerows(rows)
    _append_jsonl(_work(run, "sweep_report.jsonl"), [dict(r, config=effective(run)) for r in rows])
    print(f"{'lambda':>8s} {'attention':>10s} {'decay_only':>10s}")
    means = tr.summarize_sweep(rows)
    for lam in lambdas:
        print(f"{float(lam):8.2f} {means[(float(lam), 'attention')]:10.4f} "
              f"{means[(float(lam), 'decay_only')]:10.4f}")


COMMANDS = {
    "synth": cmd_synth, "ingest": cmd_ingest, "embed-problems": cmd_embed_problems,
    "pretrain-code": cmd_pretrain_code, "train": cmd_train, "eval": cmd_eval,
    "ablate": cmd_ablate, "sweep": cmd_sweep,
}


def build_parser():
    p = _Parser(prog="progkt", description="programming knowledge tracing pipeline")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="flat JSON config (or a report that embeds one)")
        s.add_argument("--data", dest="data_dir", help="data directory (default $PROGKT_DATA or ./data)")
        s.add_argument("--work", dest="work_dir", help="artifact directory (default <data>/run)")
        s.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="any config key; repeatable")
        s.add_argument("--seeds", help="comma-separated model seeds")
        s.add_argument("--epochs", type=int)
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "synth":
            s.add_argument("--students", type=int, dest="n_students")
            s.add_argument("--seed", type=int, dest="synth_seed")
        if name == "ablate":
            s.add_argument("--variants", help="comma-separated, from: full," + ",".join(tr.ABLATIONS))
        if name == "sweep":
            s.add_argument("--lambdas", help="comma-separated decay grid")
    return p


def _overrides(args):
    out = {}
    for item in args.overrides:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = _parse_value(v)
    for k in ("data_dir", "work_dir", "n_students", "synth_seed", "epochs", "variants", "lambdas"):
        if getattr(args, k, None) is not None:
            out[k] = getattr(args, k)
    if args.seeds is not None:
        out["seeds"] = [int(s) for s in args.seeds.split(",") if s]
    return out


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required: " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(name)s: %(message)s")
        run = load_run_config(args.config, _overrides(args))
        run.setdefault("data_dir", os.environ.get("PROGKT_DATA", "data"))
        run.setdefault("work_dir", os.path.join(run["data_dir"], "run"))
        if args.command == "synth":
            synth_config(run)       # validate before touching the filesystem
        else:
            train_config(run)
        os.makedirs(run["work_dir"] if args.command != "synth" else run["data_dir"], exist_ok=True)
        COMMANDS[args.command](run)
        return EXIT_OK
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (dm.ConfigError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except tr.DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (dm.DataError, FileNotFoundError, tr.MetricError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
