"""Command-line interface: ``civrep <command> ...`` or ``python -m civrep``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure. Failures print one JSON object on standard error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import estimators as E
from . import harness as H
from . import model as M
from .data import SynthConfig, generate_synthetic, load_csv, read_schema, write_csv, write_schema
from .errors import CivrepError, ConfigError, UsageError
from .graph import d_connecting_path, is_valid_civ, parse_dag


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _names(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()] if text else []


def _read_json(path, what: str) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read {what} {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON: {exc}") from exc


def _read_dag(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read DAG file {path}: {exc}") from exc
    return parse_dag(text)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# --------------------------------------------------------------------------
# commands

def cmd_gen(args) -> int:
    ds = generate_synthetic(SynthConfig(n=args.n, seed=args.seed))
    out = Path(args.out)
    schema = write_csv(ds, out)
    schema_path = Path(args.schema_out) if args.schema_out else out.with_suffix(".schema.json")
    write_schema(schema, schema_path)
    print(f"wrote {ds.n} rows to {out} (schema {schema_path})")
    return 0


def cmd_dsep(args) -> int:
    g = _read_dag(args.dag)
    path = d_connecting_path(g, args.a, args.b, _names(args.given))
    if path is None:
        print("d-separated")
    else:
        print("d-connected")
        print("path: " + " - ".join(path))
    return 0


def cmd_civ_check(args) -> int:
    g = _read_dag(args.dag)
    iv = _names(args.iv)
    if not iv:
        raise UsageError("--iv needs at least one node")
    verdict = is_valid_civ(g, iv[0] if len(iv) == 1 else set(iv), _names(args.cond),
                           args.treatment, args.outcome)
    _emit(verdict.to_dict())
    return 0


def cmd_train(args) -> int:
    cfg = M.ModelConfig.from_dict(_read_json(args.config, "model config")) if args.config else M.ModelConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    ds = load_csv(args.data, read_schema(args.schema))
    params, hist = M.train(ds, cfg)
    out = Path(args.out)
    M.save_checkpoint(params, out)
    history_path = out.with_suffix(".history.json")
    history_path.write_text(json.dumps(hist.to_dict(), indent=1) + "\n", encoding="utf-8")
    print(f"checkpoint {out}, history {history_path}")
    return 0


def cmd_estimate(args) -> int:
    names = _names(args.estimators)
    unknown = set(names) - set(H.ESTIMATORS)
    if unknown or not names:
        raise UsageError(f"--estimators must list some of {','.join(H.ESTIMATORS)}")
    if "dvae_civ" in names and not args.checkpoint:
        raise UsageError("dvae_civ needs --checkpoint")
    ds = load_csv(args.data, read_schema(args.schema))
    params = M.load_checkpoint(args.checkpoint) if args.checkpoint else None
    ts_cfg = E.TwoStageConfig.from_dict(_read_json(args.two_stage_config, "two-stage config")) \
        if args.two_stage_config else E.TwoStageConfig()
    fitted = H.fit_estimators(ds, names, params, ts_cfg)
    truth = H.true_ace(ds)
    rows, estimates = [], {}
    for name in names:
        est = fitted[name](ds)
        rows.append({"replication": 0, "seed": ts_cfg.seed, "estimator": name, "fold": "within",
                     **H.fold_metrics(est, ds, truth)})
        estimates[name] = est.to_dict()
    report = {"schema_version": H.SCHEMA_VERSION, "data": str(args.data), "replications": rows,
              "aggregates": H.aggregate(rows), "estimates": estimates}
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def cmd_experiment(args) -> int:
    cfg = H.ExperimentConfig.load(args.config)
    if args.workers is not None:
        cfg.workers = args.workers
    report = H.run_experiment(cfg, args.out)
    out = Path(args.out) if args.out else cfg.resolved_output_dir()
    for key, agg in report["aggregates"].items():
        err, pehe = agg["ace_error"], agg["pehe"]
        fmt = lambda s: "n/a" if s["mean"] is None else (  # noqa: E731
            f"{s['mean']:.3f}" + ("" if s["std"] is None else f" +/- {s['std']:.3f}"))
        print(f"{key:20s} eps_ACE {fmt(err):18s} sqrt(PEHE) {fmt(pehe)}")
    if report["failures"]:
        print(f"{len(report['failures'])} replication(s) failed; see report.json", file=sys.stderr)
    print(f"report: {out / 'report.json'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="civrep", description="Conditional-IV representation learning experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="write a synthetic dataset as CSV plus schema sidecar")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--schema-out", help="default: <out>.schema.json")
    g.set_defaults(func=cmd_gen)

    d = sub.add_parser("dsep", help="d-separation query on a DAG file")
    d.add_argument("--dag", required=True)
    d.add_argument("--a", required=True)
    d.add_argument("--b", required=True)
    d.add_argument("--given", default="", help="comma-separated conditioning nodes")
    d.set_defaults(func=cmd_dsep)

    c = sub.add_parser("civ-check", help="check the conditional-IV conditions on a DAG file")
    c.add_argument("--dag", required=True)
    c.add_argument("--iv", required=True, help="instrument node (comma-separated for a set)")
    c.add_argument("--cond", default="", help="comma-separated conditioning set")
    c.add_argument("--treatment", default="W")
    c.add_argument("--outcome", default="Y")
    c.set_defaults(func=cmd_civ_check)

    t = sub.add_parser("train", help="train the representation model on a CSV")
    t.add_argument("--data", required=True)
    t.add_argument("--schema", required=True)
    t.add_argument("--config", help="JSON model config")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True, help="checkpoint path (.npz)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("estimate", help="fit estimators on a CSV and report effects")
    e.add_argument("--data", required=True)
    e.add_argument("--schema", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--estimators", default="dvae_civ,naive")
    e.add_argument("--two-stage-config", help="JSON two-stage config")
    e.add_argument("--out")
    e.set_defaults(func=cmd_estimate)

    x = sub.add_parser("experiment", help="replicated experiment from a JSON config")
    x.add_argument("--config", required=True)
    x.add_argument("--out", help=f"output directory (else ${H.OUTPUT_DIR_ENV}, else the config's)")
    x.add_argument("--workers", type=int)
    x.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except CivrepError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc),
                          "exit_code": exc.exit_code}), file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
