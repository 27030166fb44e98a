"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or validation error,
3 external-service error. Diagnostics go to stderr; results go to the
``--output`` file or stdout.

Option precedence is command-line flag, then ``--config`` JSON file, then the
built-in default.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .aggregator import BoqConfig, BoqParams, aggregate_feature_map
from .dataset import (
    PartitionParams,
    build_ground_truth,
    group_classes,
    load_manifest,
    select_text_queries,
)
from .errors import ConfigurationError, FilterError, LlmError, PlaceTextError
from .evaluation import EvalConfig, run_pipeline
from .featuremap import read_feature_map, write_feature_map
from .fusion import ACTIVATIONS, BridgeParams, Region, spot_fuse
from .loss import LossHyperparams, ms_loss_grad_raw, ms_loss_raw, relative_gradient_error
from .numerics import finite_diff_grad, make_rng
from .retrieval import (
    RetrievalResult,
    build_index,
    knn_batch,
    load_index,
    read_descriptors,
    save_index,
    write_descriptors,
)
from .textverify import DEFAULT_CONF_THRESHOLD, annotation_strings, load_annotations, rerank

log = logging.getLogger("placetext")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_SERVICE = 0, 1, 2, 3
GRAD_TOLERANCE = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_help()}\n{self.prog}: error: {message}")


class InputMissing(ConfigurationError):
    pass


def _require_files(*paths) -> None:
    missing = [str(p) for p in paths if p is not None and not Path(p).is_file()]
    if missing:
        raise InputMissing("missing input file(s): " + ", ".join(missing))


def _emit(obj, output: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    if output:
        Path(output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _emit_lines(objs, output: str | None) -> None:
    text = "".join(json.dumps(o, ensure_ascii=False) + "\n" for o in objs)
    if output:
        Path(output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _threads(args) -> int:
    return args.threads or os.cpu_count() or 1


def _llm_client(args, needed: bool):
    if not needed:
        return None
    from .llm import client_from_args

    mode = "fallback-to-rule" if args.llm_fallback else "live"
    return client_from_args(
        mode=mode,
        endpoint=args.llm_endpoint,
        model=args.llm_model,
        mock_table=args.llm_mock,
        cache_path=args.llm_cache,
        timeout=args.llm_timeout,
        max_retries=args.llm_retries,
    )


def _check_llm_flags(args) -> None:
    if args.filter == "llm" and not (args.llm_mock or args.llm_endpoint or args.llm_fallback):
        env = "OPENAI_API_KEY"
        if not os.environ.get(env):
            raise UsageError(f"--filter llm needs --llm-mock, --llm-fallback, or {env} in the environment")


def _manifest_descriptors(args):
    _require_files(args.manifest, args.descriptors)
    manifest = load_manifest(args.manifest)
    vectors = read_descriptors(args.descriptors, len(manifest))
    return manifest, vectors


# -- subcommands -----------------------------------------------------------


def cmd_build_index(args) -> int:
    manifest, vectors = _manifest_descriptors(args)
    rows = [(r.id, vectors[i]) for i, r in enumerate(manifest.records) if args.split == "all" or r.split == args.split]
    index = build_index(rows)
    save_index(index, args.output)
    log.info("wrote %d descriptors of dim %d to %s", len(index), index.dim, args.output)
    return EXIT_OK


def cmd_retrieve(args) -> int:
    _require_files(args.index)
    manifest, vectors = _manifest_descriptors(args)
    index = load_index(args.index)
    picked = [(i, r.id) for i, r in enumerate(manifest.records) if r.split == "query"]
    queries = vectors[[i for i, _ in picked]] if picked else np.zeros((0, index.dim))
    results = knn_batch(index, queries, args.k, [rid for _, rid in picked], threads=_threads(args))
    _emit_lines((r.to_json() for r in results), args.output)
    return EXIT_OK


def cmd_rerank(args) -> int:
    _check_llm_flags(args)
    _require_files(args.retrievals, args.annotations)
    annotations = load_annotations(args.annotations)
    texts = annotation_strings(annotations, args.conf_threshold)
    client = _llm_client(args, args.filter == "llm")
    out = []
    with open(args.retrievals, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                res = RetrievalResult.from_json(json.loads(line))
                out.append(rerank(res, texts.get(res.query_id, []), texts, args.filter, client).to_json())
    _emit_lines(out, args.output)
    return EXIT_OK


def cmd_partition(args) -> int:
    _require_files(args.manifest)
    manifest = load_manifest(args.manifest)
    params = PartitionParams(args.M, args.alpha)
    part = group_classes(manifest.records, params, args.min_images)
    obj = {"M": params.M, "alpha": params.alpha, "heading_classes": params.heading_classes, **part.to_json()}
    _emit(obj, args.output)
    return EXIT_OK


def cmd_ground_truth(args) -> int:
    _require_files(args.manifest)
    manifest = load_manifest(args.manifest)
    gt = build_ground_truth(manifest.queries, manifest.database, args.radius)
    _emit(gt.to_json(), args.output)
    return EXIT_OK


def cmd_select_queries(args) -> int:
    _require_files(args.manifest, args.annotations)
    manifest = load_manifest(args.manifest)
    annotations = load_annotations(args.annotations)
    records = manifest.records if args.all_splits else manifest.queries
    _emit({"conf_threshold": args.conf_threshold, "ids": select_text_queries(records, annotations, args.conf_threshold)}, args.output)
    return EXIT_OK


def cmd_eval(args) -> int:
    _check_llm_flags(args)
    if (args.rerank or args.ablation) and not args.annotations:
        raise UsageError("--rerank and --ablation need --annotations")
    _require_files(args.manifest, args.descriptors, args.annotations)
    config = EvalConfig(
        ks=tuple(args.ks),
        radius=args.radius,
        top_k=args.top_k,
        filter=args.filter,
        rerank=args.rerank,
        ablation=args.ablation,
        conf_threshold=args.conf_threshold,
        threads=_threads(args),
        trace=args.trace,
    )
    manifest, vectors = _manifest_descriptors(args)
    annotations = load_annotations(args.annotations) if args.annotations else None
    client = _llm_client(args, config.rerank and args.filter == "llm")
    report = run_pipeline(manifest, vectors, annotations, config, client)
    text = report.dumps(include_latency=not args.no_latency) + "\n"
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    if args.csv:
        Path(args.csv).write_text(report.to_csv(), encoding="utf-8")
    # keep stdout machine-readable when it carries the JSON
    print(report.to_table(), file=sys.stdout if args.output else sys.stderr)
    if not report.ok:
        failed = [k for k, v in report.consistency.items() if not v]
        print(f"consistency check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def cmd_aggregate(args) -> int:
    _require_files(*args.feature_map, args.params)
    maps = [read_feature_map(p) for p in args.feature_map]
    if args.params:
        params = BoqParams.load(args.params)
    else:
        config = BoqConfig(args.blocks, args.queries, maps[0].channels, args.heads, args.output_dim, args.ff_dim)
        params = BoqParams.seeded(config, args.seed)
    if args.save_params:
        params.save(args.save_params)
    descs = np.stack([aggregate_feature_map(fm, params) for fm in maps])
    if args.output:
        write_descriptors(args.output, descs)
    else:
        _emit({"dim": int(descs.shape[1]), "descriptors": descs.tolist()}, None)
    return EXIT_OK


def cmd_fuse(args) -> int:
    _require_files(args.feature_map, args.rec_map)
    f_sts = read_feature_map(args.feature_map)
    f_rec = read_feature_map(args.rec_map)
    region = Region(*args.region)
    params = BridgeParams.seeded(
        f_sts.channels, f_rec.channels, args.model_dim, args.heads, activation=args.activation, seed=args.seed
    )
    fused = spot_fuse(f_sts, region, f_rec, params, use_adapter=not args.no_adapter)
    write_feature_map(fused, args.output)
    log.info("wrote fused %dx%dx%d map to %s", *fused.shape, args.output)
    return EXIT_OK


def cmd_loss_check(args) -> int:
    rng = make_rng(args.seed)
    classes = args.classes or max(1, args.n // 2)
    labels = np.arange(args.n) % classes
    x = rng.standard_normal((args.n, args.dim))
    h = LossHyperparams(args.alpha, args.beta, args.lam)
    analytic = ms_loss_grad_raw(x, labels, h)
    numeric = finite_diff_grad(lambda v: ms_loss_raw(v, labels, h), x, args.step)
    err = relative_gradient_error(analytic, numeric)
    print(f"loss {ms_loss_raw(x, labels, h):.10f}")
    print(f"max absolute difference {np.abs(analytic - numeric).max():.3e}")
    print(f"max relative error {err:.3e} (tolerance {GRAD_TOLERANCE:g}, absolute floor 1e-07)")
    for step in range(args.steps):
        x = x - args.lr * ms_loss_grad_raw(x, labels, h)
        print(f"step {step + 1} loss {ms_loss_raw(x, labels, h):.10f}")
    if err >= GRAD_TOLERANCE:
        print("gradient check FAILED", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


# -- parser ----------------------------------------------------------------


def _add_llm(p) -> None:
    g = p.add_argument_group("language-model filter")
    g.add_argument("--llm-endpoint", help="chat-completions URL")
    g.add_argument("--llm-model", help="model name (default gpt-4o-mini)")
    g.add_argument("--llm-mock", metavar="TABLE.json", help="offline decision table; no network access")
    g.add_argument("--llm-cache", metavar="PATH", help="JSON-lines exchange cache")
    g.add_argument("--llm-fallback", action="store_true", help="fall back to the rule filter when the remote call fails")
    g.add_argument("--llm-timeout", type=float, default=30.0, help="request timeout in seconds")
    g.add_argument("--llm-retries", type=int, default=2, help="retries after a failed request")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="FILE.json", help="JSON file of option defaults for this subcommand")
    common.add_argument("--seed", type=int, default=0, help="seed for every stochastic choice")
    common.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")
    common.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")

    parser = _Parser(prog="placetext", description="Place recognition with scene-text re-ranking.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, func, help_):
        p = sub.add_parser(name, parents=[common], help=help_, description=help_)
        p.set_defaults(func=func)
        return p

    p = add("build-index", cmd_build_index, "Build a descriptor index file from ingested descriptors.")
    p.add_argument("--manifest", required=True, help="JSON-lines image manifest")
    p.add_argument("--descriptors", required=True, help="raw float32 rows, one per manifest line")
    p.add_argument("--output", required=True, help="index file to write")
    p.add_argument("--split", choices=("db", "query", "all"), default="db", help="which records to index")

    p = add("retrieve", cmd_retrieve, "Exact k-nearest-neighbour retrieval for every query image.")
    p.add_argument("--index", required=True, help="index file from build-index")
    p.add_argument("--manifest", required=True, help="JSON-lines image manifest")
    p.add_argument("--descriptors", required=True, help="raw float32 rows, one per manifest line")
    p.add_argument("--k", type=int, default=100, help="neighbours per query")
    p.add_argument("--output", help="JSON-lines results (default: stdout)")

    p = add("rerank", cmd_rerank, "Re-rank retrieval results by scene-text similarity.")
    p.add_argument("--retrievals", required=True, help="JSON lines written by retrieve")
    p.add_argument("--annotations", required=True, help="JSON-lines text annotations")
    p.add_argument("--filter", choices=("rule", "llm"), default="rule", help="discriminative-text filter")
    p.add_argument("--conf-threshold", type=float, default=DEFAULT_CONF_THRESHOLD, help="minimum recognition confidence")
    p.add_argument("--output", help="result file (default: stdout)")
    _add_llm(p)

    p = add("partition", cmd_partition, "Assign images to position/heading classes.")
    p.add_argument("--manifest", required=True, help="JSON-lines image manifest")
    p.add_argument("--M", type=float, default=2.0, help="cell side in metres")
    p.add_argument("--alpha", type=float, default=3.0, help="heading slice in degrees")
    p.add_argument("--min-images", type=int, default=4, help="classes smaller than this are flagged")
    p.add_argument("--output", help="result file (default: stdout)")

    p = add("ground-truth", cmd_ground_truth, "List same-floor database positives within a radius of each query.")
    p.add_argument("--manifest", required=True, help="JSON-lines image manifest")
    p.add_argument("--radius", type=float, default=5.0, help="positive radius in metres")
    p.add_argument("--output", help="result file (default: stdout)")

    p = add("select-queries", cmd_select_queries, "Pick images with at least one confident text string.")
    p.add_argument("--manifest", required=True, help="JSON-lines image manifest")
    p.add_argument("--annotations", required=True, help="JSON-lines text annotations")
    p.add_argument("--conf-threshold", type=float, default=DEFAULT_CONF_THRESHOLD, help="minimum recognition confidence")
    p.add_argument("--all-splits", action="store_true", help="consider database images too")
    p.add_argument("--output", help="result file (default: stdout)")

    p = add("eval", cmd_eval, "Run retrieval (and optionally re-ranking) and report Recall@K and latency.")
    p.add_argument("--manifest", required=True, help="JSON-lines image manifest")
    p.add_argument("--descriptors", required=True, help="raw float32 rows, one per manifest line")
    p.add_argument("--annotations", help="JSON-lines text annotations")
    p.add_argument("--rerank", action="store_true", help="re-rank the top-K by text similarity")
    p.add_argument("--ablation", action="store_true", help="report recalls with and without re-ranking")
    p.add_argument("--filter", choices=("rule", "llm"), default="rule", help="discriminative-text filter")
    p.add_argument("--ks", type=int, nargs="+", default=[1, 5], help="recall cut-offs")
    p.add_argument("--top-k", type=int, default=100, help="retrieval window that re-ranking reorders")
    p.add_argument("--radius", type=float, default=5.0, help="positive radius in metres")
    p.add_argument("--conf-threshold", type=float, default=DEFAULT_CONF_THRESHOLD, help="minimum recognition confidence")
    p.add_argument("--trace", action="store_true", help="include per-query traces")
    p.add_argument("--no-latency", action="store_true", help="omit timing fields from the JSON report")
    p.add_argument("--output", help="JSON report (default: stdout)")
    p.add_argument("--csv", help="also write the recall curve as CSV")
    _add_llm(p)

    p = add("aggregate", cmd_aggregate, "Aggregate feature-map files into global descriptors.")
    p.add_argument("--feature-map", required=True, nargs="+", help="feature-map files")
    p.add_argument("--params", help="saved aggregator parameters (.npz)")
    p.add_argument("--save-params", help="write the parameters used")
    p.add_argument("--blocks", type=int, default=2, help="aggregation blocks")
    p.add_argument("--queries", type=int, default=8, help="learnable queries per block")
    p.add_argument("--heads", type=int, default=2, help="attention heads")
    p.add_argument("--output-dim", type=int, default=64, help="descriptor length")
    p.add_argument("--ff-dim", type=int, default=None, help="encoder feed-forward width (default 2 x channels)")
    p.add_argument("--output", help="raw float32 descriptor rows (default: JSON on stdout)")

    p = add("fuse", cmd_fuse, "Crop a detector region and bridge it into recogniser features.")
    p.add_argument("--feature-map", required=True, help="detector feature map")
    p.add_argument("--rec-map", required=True, help="recogniser features for the region")
    p.add_argument("--region", required=True, type=int, nargs=4, metavar=("X0", "Y0", "X1", "Y1"), help="half-open cell window")
    p.add_argument("--model-dim", type=int, default=16, help="bridge attention width")
    p.add_argument("--heads", type=int, default=2, help="attention heads")
    p.add_argument("--activation", choices=sorted(ACTIVATIONS), default="relu", help="adapter activation")
    p.add_argument("--no-adapter", action="store_true", help="bridge the raw crop")
    p.add_argument("--output", required=True, help="fused feature map to write")

    p = add("loss-check", cmd_loss_check, "Compare the analytic loss gradient with finite differences.")
    p.add_argument("--n", type=int, default=8, help="batch size")
    p.add_argument("--dim", type=int, default=16, help="descriptor length")
    p.add_argument("--classes", type=int, default=None, help="label count (default n/2)")
    p.add_argument("--alpha", type=float, default=1.0, help="positive-pair weight scale")
    p.add_argument("--beta", type=float, default=50.0, help="negative-pair weight scale")
    p.add_argument("--lambda", dest="lam", type=float, default=0.5, help="similarity margin")
    p.add_argument("--step", type=float, default=1e-5, help="finite-difference step")
    p.add_argument("--steps", type=int, default=0, help="gradient-descent demo steps")
    p.add_argument("--lr", type=float, default=0.1, help="demo step size")

    return parser


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _parse(parser, argv):
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file {args.config}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
        sp = _subparser(parser, args.command)
        known = {a.dest for a in sp._actions}
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        unknown = sorted(set(cfg) - known)
        if unknown:
            raise UsageError(f"unknown config keys for {args.command}: {', '.join(unknown)}")
        sp.set_defaults(**cfg)
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _parse(parser, argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0)

    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"placetext {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (LlmError, FilterError) as exc:
        print(f"placetext {args.command}: external service error: {exc}", file=sys.stderr)
        return EXIT_SERVICE
    except (PlaceTextError, OSError, ValueError) as exc:
        print(f"placetext {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
