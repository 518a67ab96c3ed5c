"""
Command-line interface.

    ktm train | eval-perplexity | predict | bridge-check | export-topic-series | generate-synthetic

Exit codes: 0 success, 1 runtime error (JSON error document on stderr),
2 argument error (usage on stderr).
"""

import argparse
import contextlib
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd
from pydantic import ValidationError

from ktm.core.config import settings, resolve_threads
from ktm.core.errors import KtmError, InvalidArgumentError, UnsupportedQueryError
from ktm.core.logging import setup_logging
from ktm.models.schemas import FeatureKind, Hyperparameters, KernelSpec, KernelVariant, TrainConfig
from ktm.services import engine, oracle
from ktm.services.corpus import (
    AUTHOR_COLUMN,
    NODE_COLUMN,
    read_metadata,
    read_uci_corpus,
    split_heldout,
    write_uci_corpus,
)
from ktm.services.kernels import FeatureSpace, UNKNOWN_AUTHOR, default_graph_scales
from ktm.services.persistence import load_model, save_model
from ktm.services.synthetic import generate_ktm_corpus


logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
KERNELS = {
    "rq": KernelVariant.RATIONAL_QUADRATIC_TIME_AUTHOR,
    "graph": KernelVariant.GRAPH_EMBEDDING,
    "constant": KernelVariant.CONSTANT,
}


class ArgumentError(Exception):
    def __init__(self, code: int):
        self.code = code


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage errors without exiting the interpreter"""

    def exit(self, status=0, message=None):
        if message:
            self._print_message(message, sys.stderr)
        raise ArgumentError(status)


def _at_least(minimum: int):
    def parse(text: str) -> int:
        value = int(text)
        if value < minimum:
            raise argparse.ArgumentTypeError(f"must be at least {minimum}, got {value}")
        return value

    parse.__name__ = "integer"
    return parse


def _positive(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return value


def _fraction(text: str) -> float:
    value = float(text)
    if not 0 <= value < 1:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1), got {text}")
    return value


@contextlib.contextmanager
def _output(target: Optional[str]):
    if target in (None, "-"):
        yield sys.stdout
    else:
        Path(target).parent.mkdir(parents=True, exist_ok=True)
        with open(target, "w", encoding="utf-8", newline="\n") as f:
            yield f


def _write_frame(frame: pd.DataFrame, target: Optional[str], comment: Optional[str] = None):
    with _output(target) as out:
        if comment:
            out.write(f"# {comment}\n")
        frame.to_csv(out, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def _common(parser: argparse.ArgumentParser, output: bool = True):
    parser.add_argument("--threads", type=_at_least(1), default=None, help="worker cap (default: available parallelism)")
    parser.add_argument("--log-level", default=None, choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    if output:
        parser.add_argument("--output", default=None, help="output file (default: stdout)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ktm", description=f"{settings.app_name} v{settings.version}")
    commands = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    commands.required = True

    train = commands.add_parser("train", help="train a model and write its directory")
    train.add_argument("--corpus", required=True, help="UCI bag-of-words file")
    train.add_argument("--vocab", default=None, help="vocabulary file, one token per line")
    train.add_argument("--meta", required=True, help="metadata CSV with a doc_id column")
    train.add_argument("--edges", default=None, help="edge list for graph metadata")
    train.add_argument("--kernel", choices=sorted(KERNELS), default="rq")
    train.add_argument("--topics", type=_at_least(3), default=settings.default_topics)
    train.add_argument("--sweeps", type=_at_least(0), default=50)
    train.add_argument("--hyperopt-every", type=_at_least(1), default=settings.default_hyperopt_every)
    train.add_argument("--hyperopt-steps", type=_at_least(1), default=settings.default_hyperopt_steps)
    train.add_argument("--beta", type=_positive, default=settings.default_beta)
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--heldout-fraction", type=_fraction, default=0.0)
    train.add_argument("--no-gp", action="store_true", help="fixed symmetric prior (plain LDA)")
    train.add_argument("--no-hyperopt", action="store_true")
    train.add_argument("--snapshot", action="store_true", help="parallel document sweeps over frozen counts")
    train.add_argument("--out", required=True, help="model directory")
    _common(train, output=False)

    evaluate = commands.add_parser("eval-perplexity", help="perplexity of a corpus under a trained model")
    evaluate.add_argument("--model", required=True)
    evaluate.add_argument("--corpus", required=True)
    evaluate.add_argument("--trace", default=None, help="write the per-sweep training trace CSV here")
    _common(evaluate)

    predict = commands.add_parser("predict", help="topic proportions at one metadata point")
    predict.add_argument("--model", required=True)
    predict.add_argument("--at", required=True, nargs="+", metavar="KEY=VALUE",
                         help="feature values (column=value, author=name) or node=name")
    _common(predict)

    check = commands.add_parser("bridge-check", help="compare the Laplace bridge with elliptical slice sampling")
    check.add_argument("--topics", type=_at_least(3), default=10)
    check.add_argument("--grid", default="0,10,50,100,200", help="comma-separated observation counts")
    check.add_argument("--repetitions", type=_at_least(1), default=settings.oracle_repetitions)
    check.add_argument("--samples", type=_at_least(1000), default=settings.mcmc_samples)
    check.add_argument("--burn-in", type=_at_least(0), default=settings.mcmc_burn_in)
    check.add_argument("--dof", type=_positive, default=None, help="inverse Wishart degrees of freedom (default K+2)")
    check.add_argument("--seed", type=int, default=0)
    _common(check)

    series = commands.add_parser("export-topic-series", help="topic proportions along a metadata grid")
    series.add_argument("--model", required=True)
    series.add_argument("--grid", required=True, help="metadata CSV of query points")
    _common(series)

    synthetic = commands.add_parser("generate-synthetic", help="sample a corpus from the generative model")
    synthetic.add_argument("--out", required=True, help="directory for corpus.txt, vocab.txt, meta.csv")
    synthetic.add_argument("--docs", type=_at_least(1), default=60)
    synthetic.add_argument("--topics", type=_at_least(3), default=3)
    synthetic.add_argument("--vocab", type=_at_least(1), default=50)
    synthetic.add_argument("--doc-length", type=_at_least(1), default=40)
    synthetic.add_argument("--seed", type=int, default=0)
    _common(synthetic, output=False)
    return parser


def _kernel_for(name: str, features: FeatureSpace) -> KernelSpec:
    variant = KERNELS[name]
    if variant == KernelVariant.GRAPH_EMBEDDING:
        if features.kind != FeatureKind.GRAPH:
            raise InvalidArgumentError("--kernel graph needs metadata with a node column and --edges")
        return KernelSpec(variant=variant, scales=default_graph_scales(features.values.shape[1]))
    if variant == KernelVariant.RATIONAL_QUADRATIC_TIME_AUTHOR and features.kind != FeatureKind.EUCLIDEAN:
        raise InvalidArgumentError("--kernel rq needs numeric metadata columns")
    return KernelSpec(variant=variant)


def cmd_train(args) -> int:
    corpus = read_uci_corpus(args.corpus, args.vocab)
    features = read_metadata(args.meta, corpus.doc_ids, args.edges)
    kernel = _kernel_for(args.kernel, features)
    config = TrainConfig(
        n_topics=args.topics,
        max_sweeps=args.sweeps,
        hyperopt_every=args.hyperopt_every,
        hyperopt_steps=args.hyperopt_steps,
        beta=args.beta,
        seed=args.seed,
        use_gp=not args.no_gp,
        optimize_hypers=not args.no_hyperopt and args.kernel != "constant",
        snapshot=args.snapshot,
        threads=args.threads,
    )
    train_corpus, heldout = corpus, None
    if args.heldout_fraction > 0:
        train_corpus, heldout = split_heldout(corpus, args.heldout_fraction)

    state = engine.train(train_corpus, features, kernel, config, Hyperparameters(kernel=kernel))
    if heldout is not None and heldout.total_tokens > 0:
        state.heldout_perplexity = engine.evaluate_heldout(state, heldout)
        logger.info(f"Held-out perplexity {state.heldout_perplexity:.4f}")
    save_model(state, args.out)
    return 0


def cmd_eval_perplexity(args) -> int:
    state = load_model(args.model)
    corpus = read_uci_corpus(args.corpus)
    value = engine.evaluate_heldout(state, corpus)
    with _output(args.output) as out:
        out.write(f"{value:.17g}\n")
    if args.trace:
        trace = pd.DataFrame({
            "sweep": np.arange(1, len(state.perplexity_trace) + 1),
            "perplexity": state.perplexity_trace,
        })
        _write_frame(trace, args.trace)
    return 0


def _parse_pairs(items: List[str]) -> dict:
    pairs = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise InvalidArgumentError(f"--at expects KEY=VALUE, got {item!r}")
        pairs[key.strip()] = value.strip()
    return pairs


def _query_from_pairs(state: engine.ModelState, pairs: dict) -> FeatureSpace:
    features = state.features
    if features.kind == FeatureKind.GRAPH:
        if set(pairs) != {NODE_COLUMN}:
            raise UnsupportedQueryError("graph models are queried with node=<name>")
        return engine.node_queries(state, [pairs[NODE_COLUMN]])
    columns = list(features.columns) or [f"x{i}" for i in range(features.values.shape[1])]
    unknown = set(pairs) - set(columns) - {AUTHOR_COLUMN}
    missing = [c for c in columns if c not in pairs]
    if unknown or missing:
        raise InvalidArgumentError(f"query needs exactly the columns {columns} (+ author); "
                                   f"unknown {sorted(unknown)}, missing {missing}")
    try:
        values = np.array([[float(pairs[c]) for c in columns]])
    except ValueError as e:
        raise InvalidArgumentError(f"feature values must be numeric: {e}")
    authors = None
    if features.authors is not None:
        authors = [pairs.get(AUTHOR_COLUMN, UNKNOWN_AUTHOR)]
    return FeatureSpace.euclidean(values, authors=authors, columns=columns)


def cmd_predict(args) -> int:
    state = load_model(args.model)
    query = _query_from_pairs(state, _parse_pairs(args.at))
    result = engine.predict_topics(state, query)
    frame = pd.DataFrame({
        "topic": np.arange(state.n_topics),
        "probability": result.probabilities,
        "y_variance": result.y_variances,
    })
    _write_frame(frame, args.output)
    return 0


def cmd_bridge_check(args) -> int:
    try:
        grid = [int(n) for n in args.grid.split(",") if n.strip()]
    except ValueError:
        raise InvalidArgumentError(f"--grid must be comma-separated integers, got {args.grid!r}")
    dof = args.dof if args.dof is not None else args.topics + 2
    table = oracle.run_repeated_comparison(
        K=args.topics,
        n_obs_grid=grid,
        repetitions=args.repetitions,
        n_mcmc=args.samples,
        seed=args.seed,
        burn_in=args.burn_in,
        dof=dof,
        workers=resolve_threads(args.threads),
    )
    comment = (f"inverse-Wishart degrees of freedom {dof:g}, K={args.topics}, "
               f"repetitions {args.repetitions}, samples {args.samples}, burn-in {args.burn_in}")
    _write_frame(table, args.output, comment=comment)
    return 0


def _grid_features(state: engine.ModelState, path: str) -> FeatureSpace:
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    if state.features.kind == FeatureKind.GRAPH:
        if NODE_COLUMN not in frame.columns:
            raise InvalidArgumentError(f"{path}: graph models need a '{NODE_COLUMN}' column")
        return engine.node_queries(state, frame[NODE_COLUMN].tolist())
    columns = list(state.features.columns) or [f"x{i}" for i in range(state.features.values.shape[1])]
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise InvalidArgumentError(f"{path}: grid is missing columns {missing}")
    try:
        values = frame[columns].astype(float).to_numpy()
    except ValueError as e:
        raise InvalidArgumentError(f"{path}: grid values must be numeric: {e}")
    authors = None
    if state.features.authors is not None:
        if AUTHOR_COLUMN in frame.columns:
            authors = frame[AUTHOR_COLUMN].replace("", UNKNOWN_AUTHOR).tolist()
        else:
            authors = [UNKNOWN_AUTHOR] * len(frame)
    return FeatureSpace.euclidean(values, authors=authors, columns=columns)


def cmd_export_topic_series(args) -> int:
    state = load_model(args.model)
    queries = _grid_features(state, args.grid)
    result = engine.predict_topic_series(state, queries)
    n, K = result.probabilities.shape
    frame = pd.DataFrame({
        "grid_point": np.repeat(np.arange(n), K),
        "topic": np.tile(np.arange(K), n),
        "probability": result.probabilities.ravel(),
    })
    _write_frame(frame, args.output)
    return 0


def cmd_generate_synthetic(args) -> int:
    sample = generate_ktm_corpus(
        n_docs=args.docs, n_topics=args.topics, vocab_size=args.vocab,
        doc_length=args.doc_length, seed=args.seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_uci_corpus(sample.corpus, out / "corpus.txt", out / "vocab.txt")
    meta = pd.DataFrame({"doc_id": sample.corpus.doc_ids, "time": sample.features.values[:, 0]})
    meta.to_csv(out / "meta.csv", index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    logger.info(f"Wrote synthetic corpus to {out}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval-perplexity": cmd_eval_perplexity,
    "predict": cmd_predict,
    "bridge-check": cmd_bridge_check,
    "export-topic-series": cmd_export_topic_series,
    "generate-synthetic": cmd_generate_synthetic,
}


def _report_error(exc: Exception):
    document = {
        "error": {
            "code": 1,
            "type": type(exc).__name__,
            "message": str(exc),
            "timestamp": datetime.now(timezone.utc).isoformat(),
        }
    }
    sys.stderr.write(json.dumps(document) + "\n")


def run(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ArgumentError as e:
        return e.code

    setup_logging(level=args.log_level)
    try:
        return COMMANDS[args.command](args)
    except (KtmError, ValidationError, ValueError, OSError) as e:
        logger.debug("Command failed", exc_info=True)
        _report_error(e)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
