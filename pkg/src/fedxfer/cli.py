"""Command line entry point: ``fedxfer <subcommand> [options]``.

Exit status is 0 on success, 1 on a usage error and 2 when the run itself
fails. Every output file goes under ``--out``; nothing machine-readable is
printed to stdout. ``FEDXFER_LOG`` (error, info, debug) sets log verbosity.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from .errors import FedXferError
from .eval import (
    SIG_LEVELS,
    ExperimentConfig,
    SignificanceReport,
    SignificanceRow,
    auc_score,
    hyper_params,
    make_party_a,
    make_party_b,
    prepare_run,
    run_experiment,
)

log = logging.getLogger("fedxfer")

DEFAULTS = {
    "seed": 0,
    "overlap": None,
    "runs": 30,
    "workers": 1,
    "methods": "FTL,UDL",
    "lr": 2e-4,
    "gamma": 1.0,
    "lam": 0.001,
    "max_iter": 200,
    "tol": 1e-6,
    "warmup": 10,
    "alignment": "squared_distance",
    "faithful_exchange": False,
    "hidden": "64",
    "latent_dim": 32,
    "ae_epochs": 200,
    "ae_lr": 1e-3,
    "ae_batch": 32,
    "timeout": 30.0,
}

TRACE_HEADER = ["run", "iteration", "j_b", "j_ab", "j_a_reg", "j_b_reg", "total"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _add_source(p):
    p.add_argument("--synthetic", choices=sorted(data_mod.SYNTHETIC_PRESETS), help="synthetic preset")
    p.add_argument("--data", help="CSV file; raw with --schema, or encoded output of gen-data")
    p.add_argument("--schema", help="schema JSON path or bundled name (kdd, nslkdd, unsw, nbaiot)")
    p.add_argument("--case", choices=sorted(data_mod.CASE_PRESETS), help="named split size preset (CASE1, CASE2)")
    p.add_argument("--n-labeled", type=int)
    p.add_argument("--n-unlabeled", type=int)
    p.add_argument("--overlap", type=float, help="overlap fraction (default 0.10)")


def _add_model(p):
    p.add_argument("--hidden", help="comma-separated hidden sizes, '' for none")
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--lam", type=float)
    p.add_argument("--max-iter", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--warmup", type=int)
    p.add_argument("--alignment", choices=["squared_distance", "negative_inner_product"])
    p.add_argument("--faithful-exchange", action="store_true",
                   help="also ship raw gradient frames each iteration (ignored by the receiver)")


def _add_ae(p):
    p.add_argument("--ae-epochs", type=int)
    p.add_argument("--ae-lr", type=float)
    p.add_argument("--ae-batch", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fedxfer", description=__doc__.splitlines()[0],
                     argument_default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def cmd(name, help_):
        p = sub.add_parser(name, help=help_, argument_default=argparse.SUPPRESS)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--config", help="JSON file of option defaults; flags override it")
        return p

    p = cmd("gen-data", "write a synthetic dataset as CSV")
    p.add_argument("--synthetic", required=True, choices=sorted(data_mod.SYNTHETIC_PRESETS))

    p = cmd("split", "vertical split: party views, sealed labels, index plan")
    _add_source(p)

    p = cmd("train-ftl", "train both parties in one process")
    _add_source(p)
    _add_model(p)

    p = cmd("train-udl", "train the autoencoder + 2-means baseline on party B's view")
    _add_source(p)
    _add_ae(p)

    for name, flag, help_ in (("serve-a", "--listen", "run party A; listens on HOST:PORT"),
                              ("serve-b", "--peer", "run party B; dials HOST:PORT")):
        p = cmd(name, help_)
        p.add_argument(flag, required=True, metavar="HOST:PORT")
        p.add_argument("--timeout", type=float)
        _add_source(p)
        _add_model(p)

    p = cmd("experiment", "repeated runs and significance report")
    _add_source(p)
    _add_model(p)
    _add_ae(p)
    p.add_argument("--runs", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--methods", help="comma-separated subset of FTL,UDL")

    p = cmd("report", "re-render report.csv from report.json and print a table")
    p.add_argument("--in", dest="input", required=True, help="experiment output directory")
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Built-in defaults, then ``--config`` JSON, then explicit flags."""
    opts = dict(DEFAULTS)
    given = vars(args)
    if "config" in given:
        with open(given["config"]) as f:
            cfg = json.load(f)
        opts.update({k.replace("-", "_"): v for k, v in cfg.items()})
    opts.update(given)
    return opts


def experiment_config(o: dict) -> ExperimentConfig:
    source_count = (o.get("synthetic") is not None) + (o.get("data") is not None)
    if source_count != 1:
        raise UsageError("choose exactly one dataset source: --synthetic or --data")
    hidden = tuple(int(h) for h in str(o["hidden"]).split(",") if h.strip())
    return ExperimentConfig(
        synthetic=o.get("synthetic"),
        csv=o.get("data"),
        schema=o.get("schema"),
        case=o.get("case"),
        n_labeled=o.get("n_labeled"),
        n_unlabeled=o.get("n_unlabeled"),
        overlap_frac=o.get("overlap"),
        methods=tuple(m.strip().upper() for m in str(o["methods"]).split(",") if m.strip()),
        runs=int(o["runs"]),
        seed=int(o["seed"]),
        hidden=hidden,
        latent_dim=int(o["latent_dim"]),
        ftl={
            "lr": float(o["lr"]), "gamma": float(o["gamma"]), "lam": float(o["lam"]),
            "max_iter": int(o["max_iter"]), "tol": float(o["tol"]), "warmup": int(o["warmup"]),
            "alignment": o["alignment"], "faithful_exchange": bool(o["faithful_exchange"]),
        },
        ae_epochs=int(o["ae_epochs"]),
        ae_lr=float(o["ae_lr"]),
        ae_batch=int(o["ae_batch"]),
        workers=int(o["workers"]),
    )


def _pool(cfg: ExperimentConfig):
    """Dataset for csv sources; None for synthetic ones (generated per seed)."""
    if cfg.csv is None:
        return None
    if cfg.schema is None:
        return data_mod.EncodedDataset.from_csv(cfg.csv, Path(cfg.csv).stem)
    return data_mod.encode_features(data_mod.load_csv(cfg.csv, data_mod.load_schema(cfg.schema)))


def _run_data(cfg: ExperimentConfig):
    pool = _pool(cfg)
    if cfg.csv is not None and cfg.schema is None:
        # encoded csv: skip the schema requirement of the harness
        cfg.schema = "<encoded>"
    cfg.validate()
    return prepare_run(cfg, cfg.seed, pool), pool


def _write(path: Path, text: str) -> None:
    path.write_text(text)


def _trace_csv(trace, run=0, first=1) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_HEADER)
    for i, row in enumerate(trace, start=first):
        vals = row.as_tuple() if hasattr(row, "as_tuple") else row
        w.writerow([run, i, *("" if v is None else repr(float(v)) for v in vals)])
    return buf.getvalue()


def _vector_csv(name, values, extra=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = [name] + ([extra[0]] if extra else [])
    w.writerow(cols)
    for i, v in enumerate(values):
        w.writerow([repr(float(v))] + ([int(extra[1][i])] if extra else []))
    return buf.getvalue()


def _matrix_csv(x, y=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"f{j}" for j in range(x.shape[1])] + (["label"] if y is not None else []))
    for i, row in enumerate(x):
        w.writerow([repr(float(v)) for v in row] + ([int(y[i])] if y is not None else []))
    return buf.getvalue()


# -- subcommands --------------------------------------------------------------


def cmd_gen_data(o, out: Path):
    ds = data_mod.gen_synthetic(data_mod.SYNTHETIC_PRESETS[o["synthetic"]], int(o["seed"]))
    ds.to_csv(out / "dataset.csv")


def cmd_split(o, out: Path):
    cfg = experiment_config(o)
    rd, _ = _run_data(cfg)
    plan = rd.plan
    _write(out / "party_a.csv", _matrix_csv(rd.x_a, rd.y_a))
    _write(out / "party_b.csv", _matrix_csv(rd.x_b))
    _write(out / "sealed_b_labels.csv", "label\n" + "".join(
        f"{int(v)}\n" for v in rd.sealed_b))
    _write(out / "split.json", json.dumps({
        "seed": plan.seed,
        "features_a": plan.features_a.tolist(),
        "features_b": plan.features_b.tolist(),
        "samples_a": plan.samples_a.tolist(),
        "samples_b": plan.samples_b.tolist(),
        "overlap_a": plan.overlap_a.tolist(),
        "overlap_b": plan.overlap_b.tolist(),
    }) + "\n")


def _summary(path: Path, d: dict):
    _write(path, json.dumps(d, indent=2, sort_keys=True) + "\n")


def cmd_train_ftl(o, out: Path):
    from .ftl import train_ftl

    cfg = experiment_config(o)
    rd, _ = _run_data(cfg)
    a, b = make_party_a(cfg, rd), make_party_b(cfg, rd)
    res = train_ftl(a, b, hyper_params(cfg), x_eval=rd.x_eval, timeout=float(o["timeout"]))
    _write(out / "trace.csv", _trace_csv(res.trace))
    _write(out / "model_a.json", a.model.to_json() + "\n")
    _write(out / "model_b.json", b.model.to_json() + "\n")
    _write(out / "predictions.csv", _vector_csv("score", res.scores, ("label", res.labels)))
    _summary(out / "summary.json", {"iterations": len(res.trace), "auc": auc_score(res.scores, rd.truth)})


def cmd_train_udl(o, out: Path):
    from .udl import run_udl

    cfg = experiment_config(o)
    rd, _ = _run_data(cfg)
    res = run_udl(rd.x_b, rd.x_eval, epochs=cfg.ae_epochs, lr=cfg.ae_lr, seed=rd.seed,
                  batch_size=cfg.ae_batch)
    _write(out / "trace.csv", _trace_csv([(None, None, None, None, e) for e in res.trace], first=0))
    _write(out / "autoencoder.json", json.dumps({
        "encoder": res.autoencoder.encoder.to_dict(),
        "decoder": res.autoencoder.decoder.to_dict(),
        "centroids": res.kmeans.centroids.tolist(),
    }) + "\n")
    _write(out / "scores.csv", _vector_csv("score", res.scores))
    _summary(out / "summary.json", {
        "auc_orientation_free": auc_score(res.scores, rd.truth, orientation_free=True),
        "epochs": len(res.trace) - 1,
    })


def cmd_serve_a(o, out: Path):
    from .ftl import session_a
    from .transport import TcpListener, parse_endpoint

    cfg = experiment_config(o)
    rd, _ = _run_data(cfg)
    party = make_party_a(cfg, rd)
    host, port = parse_endpoint(o["listen"])
    listener = TcpListener(host, port)
    log.info("party A listening on %s:%d", listener.host, listener.port)
    ch = listener.accept(float(o["timeout"]))
    with ch:
        trace = session_a(party, ch, hyper_params(cfg))
    _write(out / "trace.csv", _trace_csv(trace))
    _write(out / "model_a.json", party.model.to_json() + "\n")


def cmd_serve_b(o, out: Path):
    from .ftl import session_b
    from .transport import dial, parse_endpoint

    cfg = experiment_config(o)
    rd, _ = _run_data(cfg)
    party = make_party_b(cfg, rd)
    host, port = parse_endpoint(o["peer"])
    with dial(host, port, float(o["timeout"])) as ch:
        trace, scores, labels = session_b(party, ch, hyper_params(cfg), rd.x_eval)
    _write(out / "trace.csv", _trace_csv(trace))
    _write(out / "model_b.json", party.model.to_json() + "\n")
    _write(out / "predictions.csv", _vector_csv("score", scores, ("label", labels)))
    # party B never reads the sealed labels itself; the harness side scores here
    _summary(out / "summary.json", {"iterations": len(trace), "auc": auc_score(scores, rd.truth)})


def cmd_experiment(o, out: Path):
    cfg = experiment_config(o)
    if cfg.csv is not None and cfg.schema is None:
        raise UsageError("experiment on --data needs --schema")
    res = run_experiment(cfg)
    _write(out / "report.csv", res.report.to_csv())
    _write(out / "report.json", res.report.to_json())
    for m in cfg.methods:
        _write(out / f"traces_{m.lower()}.csv", res.traces_csv(m))


def _load_report(path: Path) -> SignificanceReport:
    d = json.loads(path.read_text())
    rows = []
    for r in d["report"]:
        rows.append(SignificanceRow(
            r["dataset"], r["method"], [a / 100.0 for a in r["aucs_percent"]],
            r["mean_auc_percent"] / 100.0,
            r["std_auc_percent"] / 100.0 if "std_auc_percent" in r else None,
            {int(p): s / 100.0 for p, s in r.get("significance_percent", {}).items()},
        ))
    return SignificanceReport(rows, d.get("failures", []))


def cmd_report(o, out: Path):
    rep = _load_report(Path(o["input"]) / "report.json")
    _write(out / "report.csv", rep.to_csv())
    levels = sorted({p for r in rep.rows for p in r.sig}) or list(SIG_LEVELS)
    print(f"{'dataset':<14}{'method':<8}" + "".join(f"{'Sig p=' + str(p):>12}" for p in levels)
          + f"{'mean AUC':>12}")
    for r in rep.rows:
        sigs = "".join(f"{100 * r.sig[p]:>12.3f}" if p in r.sig else f"{'-':>12}" for p in levels)
        print(f"{r.dataset:<14}{r.method:<8}{sigs}{100 * r.mean:>12.3f}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "split": cmd_split,
    "train-ftl": cmd_train_ftl,
    "train-udl": cmd_train_udl,
    "serve-a": cmd_serve_a,
    "serve-b": cmd_serve_b,
    "experiment": cmd_experiment,
    "report": cmd_report,
}


def _setup_logging():
    level = os.environ.get("FEDXFER_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        opts = resolve(args)
        out = Path(opts["out"])
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[opts["command"]](opts, out)
        return 0
    except UsageError as e:
        print(str(e).rstrip(), file=sys.stderr)
        return 1
    except (FedXferError, OSError, ValueError, KeyError) as e:
        print(f"fedxfer: error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
