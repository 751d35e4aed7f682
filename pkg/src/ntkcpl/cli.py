"""Command-line client.

Runs the operations in-process by default; with ``--server URL`` every
subcommand is sent to a running service instead. Exit codes: 0 ok,
2 config, 3 data, 4 numerical rank, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import pydantic

from . import __version__
from .errors import ConfigError, NTKCPLError
from .harness import load_config
from .schemas import (DiagnoseRequest, IngestRequest, ReportRequest, RoundOptions, RunRequest, SelectRequest,
                      StateSpec)
from .strategies import STRATEGIES, StrategySpec, write_selection_csv

EXIT_OK, EXIT_OTHER, EXIT_CONFIG = 0, 1, 2


def _read_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc


def _strategy(args) -> StrategySpec:
    kw = {"name": args.strategy, "feature_source": args.feature_source}
    if args.ridge is not None:
        kw["ridge"] = args.ridge
    if args.time is not None:
        kw["time"] = args.time
    return StrategySpec(**kw)


def _state(args) -> StateSpec:
    data = _read_json(args.state)
    for key in ("round", "seed", "classifier_path"):
        val = getattr(args, key)
        if val is not None:
            data[key] = val
    return StateSpec.model_validate(data)


def _options(args) -> RoundOptions:
    data = _read_json(args.options) if args.options else {}
    if args.candidate_size is not None:
        data["candidate_size"] = args.candidate_size
    if args.n_clusters is not None:
        data["n_clusters"] = args.n_clusters
    return RoundOptions.model_validate(data)


def build_request(args):
    """(route, pydantic request) for a parsed command line."""
    if args.command == "ingest":
        return "ingest", IngestRequest(input_path=args.input, output_path=args.output,
                                       input_format=args.input_format, output_format=args.output_format,
                                       num_classes=args.num_classes)
    if args.command == "run":
        cfg = load_config(args.config)
        update = {}
        if args.output_dir:
            update["output_dir"] = args.output_dir
        if args.seed_workers:
            update["seed_workers"] = args.seed_workers
        if update:
            cfg = cfg.model_validate({**cfg.model_dump(), **update})
        return "run", RunRequest(config=cfg)
    if args.command == "select":
        return "select", SelectRequest(state=_state(args), budget=args.budget, strategy=_strategy(args),
                                       options=_options(args))
    if args.command == "diagnose":
        return "diagnose", DiagnoseRequest(state=_state(args), strategy=_strategy(args), options=_options(args))
    if args.command == "report":
        return "report", ReportRequest(records_paths=args.records, output_dir=args.output_dir,
                                       baseline=args.baseline)
    raise ConfigError(f"unknown command {args.command!r}")


def call_local(route: str, req):
    from . import operations

    return getattr(operations, route)(req).model_dump(mode="json")


def call_remote(server: str, route: str, req, timeout: float):
    import httpx

    try:
        resp = httpx.post(f"{server.rstrip('/')}/{route}", content=req.model_dump_json(),
                          headers={"content-type": "application/json"}, timeout=timeout)
    except httpx.HTTPError as exc:
        raise RemoteError(f"cannot reach {server}: {exc}", EXIT_OTHER) from exc
    if resp.status_code == 200:
        return resp.json()
    try:
        body = resp.json()
        raise RemoteError(body["error"], int(body["exit_code"]))
    except (ValueError, KeyError, TypeError):
        raise RemoteError(f"server answered {resp.status_code}: {resp.text[:200]}", EXIT_OTHER) from None


class RemoteError(Exception):
    def __init__(self, message, exit_code):
        super().__init__(message)
        self.exit_code = exit_code


def _emit(route: str, result: dict, args) -> None:
    if route == "select" and args.selection_csv:
        rows = [(result["round"], step, sid, result["strategy"]) for step, sid in enumerate(result["selected"])]
        write_selection_csv(rows, args.selection_csv)
    if route == "select" and args.ids_only:
        for i in result["selected"]:
            print(i)
        return
    text = json.dumps(result, indent=2, sort_keys=True)
    out = getattr(args, "out", None)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _add_round_args(p, with_budget: bool):
    p.add_argument("state", help="JSON file with pool_path, labeled, labels, round, seed, ...")
    if with_budget:
        p.add_argument("--budget", "-b", type=int, required=True)
    p.add_argument("--strategy", "-s", choices=STRATEGIES, default="ntkcpl")
    p.add_argument("--feature-source", choices=["self_supervised", "active_learning"], default="active_learning")
    p.add_argument("--ridge", type=float)
    p.add_argument("--time", type=float)
    p.add_argument("--round", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--classifier", dest="classifier_path", help="MLP checkpoint trained on the labeled set")
    p.add_argument("--options", help="JSON file with round options (candidate_size, c_max, ntk, train, ...)")
    p.add_argument("--candidate-size", type=int)
    p.add_argument("--n-clusters", type=int)


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ntkcpl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--server", help="service base URL; default runs in-process")
    parser.add_argument("--timeout", type=float, default=3600.0, help="seconds, remote calls only")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="convert feature files between CSV and FEATv1 binary")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--input-format", choices=["binary", "csv"])
    p.add_argument("--output-format", choices=["binary", "csv"])
    p.add_argument("--num-classes", type=int, default=0)

    p = sub.add_parser("run", help="execute an experiment config")
    p.add_argument("config")
    p.add_argument("--output-dir")
    p.add_argument("--seed-workers", type=int)
    p.add_argument("--out", help="write the JSON response here instead of stdout")

    p = sub.add_parser("select", help="one-shot selection; prints the chosen sample ids")
    _add_round_args(p, with_budget=True)
    p.add_argument("--ids-only", action="store_true", help="one id per line instead of JSON")
    p.add_argument("--selection-csv", help="also write round,step,sample_id,strategy rows here")

    p = sub.add_parser("diagnose", help="error decomposition and coverage for a labeled state")
    _add_round_args(p, with_budget=False)
    p.add_argument("--out", help="write the JSON report here instead of stdout")

    p = sub.add_parser("report", help="aggregate records CSVs into summary, plot data and ratio table")
    p.add_argument("records", nargs="+")
    p.add_argument("--output-dir", "-o", required=True)
    p.add_argument("--baseline", default="random")

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors, which is also the config exit code
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "serve":
        import uvicorn

        uvicorn.run("ntkcpl.service:app", host=args.host, port=args.port)
        return EXIT_OK
    try:
        route, req = build_request(args)
        if args.server:
            result = call_remote(args.server, route, req, args.timeout)
        else:
            result = call_local(route, req)
    except pydantic.ValidationError as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NTKCPLError, RemoteError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    _emit(route, result, args)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
