import argparse
import json
import logging
import sys
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import httpx
import numpy as np

UTC = timezone.utc

from nbfa import __version__
from nbfa.config import DEFAULTS, load_config_file, resolve, settings
from nbfa.core import checkpoint
from nbfa.core.chain import (
    ChainConfig,
    ChainMetrics,
    ChainTrace,
    feature_stream,
    run_chain,
    split_stream,
)
from nbfa.core.corpus import (
    CORPUS_FORMATS,
    SparseCountMatrix,
    corpus_hash,
    prune_vocabulary,
    split_heldout,
    write_bow,
)
from nbfa.core.distributions import RngStream
from nbfa.core.evaluation import (
    PerplexityAccumulator,
    accumulate,
    diagnostics,
    extract_features,
    merge_accumulators,
    op_count_ratio,
    perplexity,
    plot_traces,
    posterior_draw,
    write_diagnostics_csv,
)
from nbfa.core.fetcher import load_corpus
from nbfa.core.model import MODEL_KINDS, SAMPLER_KINDS, Hyperparams, ModelState, latent_marginals
from nbfa.errors import (
    CapabilityError,
    ConfigError,
    CorpusParseError,
    EmptyVocabularyError,
    ParameterError,
    SchemaError,
)

NOTICE_LEVEL = settings.notice_level
logging.addLevelName(NOTICE_LEVEL, "NOTICE")

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_CAPABILITY = 4
EXIT_SCHEMA = 5

SAMPLE_ETA = "sample"


def _now() -> str:
    return datetime.now(UTC).isoformat(timespec="seconds")


def parse_eta(value: str | float) -> tuple[float, bool]:
    """'sample' turns on eta inference from the default starting value."""
    if isinstance(value, str) and value.strip().lower() == SAMPLE_ETA:
        return float(DEFAULTS["eta"]), True
    try:
        return float(value), False
    except ValueError:
        raise ConfigError(
            f"--eta must be a positive number or '{SAMPLE_ETA}', got {value!r}"
        ) from None


def chain_config(values: dict[str, Any]) -> ChainConfig:
    eta, sample = parse_eta(values["eta"])
    try:
        return ChainConfig(
            model=values["model"],
            sampler=values["sampler"],
            iterations=int(values["iters"]),
            burn_in=int(values["burnin"]),
            collect_every=int(values["thin"]),
            K_init=int(values["K_init"]),
            K_star=int(values["K_star"]),
            truncation=values["truncation"],
            seed=int(values["seed"]),
            hyper=Hyperparams(
                a0=float(values["a0"]),
                b0=float(values["b0"]),
                e0=float(values["e0"]),
                f0=float(values["f0"]),
                eta=eta,
                sample_eta=sample,
            ),
        )
    except (ConfigError, ParameterError):
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid configuration value: {e}") from e


@dataclass(frozen=True, eq=False)
class TrainJob:
    config: ChainConfig
    train: SparseCountMatrix
    test: SparseCountMatrix | None
    split: int
    chain_id: int
    out_dir: Path
    label: str
    checkpoint_every: int
    metadata: dict[str, Any]
    resume: checkpoint.LoadedCheckpoint | None = None


@dataclass(eq=False)
class TrainOutcome:
    split: int
    chain_id: int
    label: str
    trace: ChainTrace
    metrics: ChainMetrics
    accumulator: PerplexityAccumulator | None
    K_sum: int
    collected: int


def _accumulator_arrays(acc: PerplexityAccumulator | None, K_sum: int) -> dict[str, np.ndarray]:
    arrays = {"collected_K_sum": np.array([K_sum], dtype=np.int64)}
    if acc is not None:
        arrays["perplexity_numerators"] = acc.numerators.copy()
        arrays["perplexity_normalizers"] = acc.normalizers.copy()
        arrays["perplexity_S"] = np.array([acc.S], dtype=np.int64)
    return arrays


def run_train_job(job: TrainJob) -> TrainOutcome:
    config = job.config
    acc = PerplexityAccumulator.create(job.test, job.train) if job.test is not None else None
    tally = {"K_sum": 0, "collected": 0}

    state: ModelState | None = None
    rng: RngStream | None = None
    if job.resume is not None:
        state = job.resume.state
        rng = job.resume.restore_rng()
        extras = job.resume.extras
        if "collected_K_sum" in extras:
            tally["K_sum"] = int(extras["collected_K_sum"][0])
        if acc is not None and "perplexity_S" in extras:
            acc.numerators += extras["perplexity_numerators"]
            acc.normalizers += extras["perplexity_normalizers"]
            acc.S = int(extras["perplexity_S"][0])
        tally["collected"] = sum(
            1 for it in range(1, state.iteration + 1) if config.is_collection(it)
        )
        logger.log(NOTICE_LEVEL, "Resuming %s at iteration %d", job.label, state.iteration)

    def collect(current: ModelState, eval_rng: RngStream) -> None:
        tally["K_sum"] += current.measure.K_active
        tally["collected"] += 1
        if acc is not None:
            draw = posterior_draw(current, job.train, eval_rng)
            accumulate(acc, current.kind, draw, job.train)

    def extras(current: ModelState) -> dict[str, np.ndarray]:
        return {
            "word_factor": latent_marginals(current, job.train).word_factor,
            **_accumulator_arrays(acc, tally["K_sum"]),
        }

    result = run_chain(
        config,
        job.train,
        collector=collect,
        state=state,
        rng=rng,
        chain_id=job.chain_id,
        checkpoint_dir=job.out_dir,
        checkpoint_every=job.checkpoint_every,
        metadata={**job.metadata, "split": job.split},
        checkpoint_extras=extras,
    )
    suffix = f"-{job.label}" if job.label else ""
    result.trace.write_csv(job.out_dir / f"trace{suffix}.csv")
    checkpoint.save(
        result.state,
        job.out_dir / f"checkpoint-final{suffix}.pb",
        result.rng,
        {"config": config.to_dict(), "chain_id": job.chain_id, "split": job.split, **job.metadata},
        extras(result.state),
    )
    return TrainOutcome(
        job.split,
        job.chain_id,
        job.label,
        result.trace,
        result.metrics,
        acc,
        tally["K_sum"],
        tally["collected"],
    )


def _write_json(path: Path, payload: dict[str, Any]) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_ingest(args: argparse.Namespace) -> int:
    fmt = args.format or DEFAULTS["format"]
    min_doc_freq = args.min_doc_freq if args.min_doc_freq is not None else DEFAULTS["min_doc_freq"]
    vocab, matrix = load_corpus(args.input, fmt, args.num_docs)
    vocab, matrix = prune_vocabulary(vocab, matrix, min_doc_freq)
    out = Path(args.out)
    write_bow(vocab, matrix, out)
    logger.log(
        NOTICE_LEVEL,
        "Wrote %s: V=%d, J=%d, tokens=%d, sha256=%s",
        out,
        matrix.V,
        matrix.J,
        matrix.total,
        corpus_hash(matrix),
    )
    return EXIT_OK


def _flag_values(args: argparse.Namespace) -> dict[str, Any]:
    return {key: getattr(args, key, None) for key in DEFAULTS}


def cmd_train(args: argparse.Namespace) -> int:
    started = _now()
    file_values = load_config_file(args.config) if args.config else None
    values = resolve(_flag_values(args), file_values)
    # Validate the whole configuration before touching the corpus.
    config = chain_config(values)
    chains = int(values["chains"])
    splits = int(values["splits"])
    fraction = float(values["train_fraction"])
    if chains < 1 or splits < 1:
        raise ConfigError(f"--chains and --splits must be at least 1, got {chains}, {splits}")
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"--train-fraction must lie in (0, 1], got {fraction}")
    if fraction == 1.0 and splits > 1:
        raise ConfigError("--splits needs --train-fraction below 1")
    every = settings.checkpoint_every
    if args.checkpoint_every is not None:
        every = args.checkpoint_every

    resume = None
    if args.resume:
        if chains > 1 or splits > 1:
            raise ConfigError("--resume continues a single chain; drop --chains and --splits")
        resume = checkpoint.load(args.resume)
        if (resume.state.kind, resume.state.sampler) != (config.model, config.sampler):
            raise ConfigError(
                f"Checkpoint holds a {resume.state.kind}/{resume.state.sampler} chain, "
                f"not {config.model}/{config.sampler}"
            )

    _, matrix = load_corpus(args.corpus, values["format"])
    digest = corpus_hash(matrix)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    metadata = {"corpus_hash": digest, "version": __version__}

    jobs: list[TrainJob] = []
    for s in range(splits):
        if fraction < 1.0:
            split = split_heldout(matrix, fraction, split_stream(config.seed, s))
            train, test = split.train, split.test
        else:
            train, test = matrix, None
        for c in range(chains):
            chain_id = s * chains + c
            label = "" if chains == 1 and splits == 1 else f"split{s}-chain{c}"
            jobs.append(
                TrainJob(config, train, test, s, chain_id, out_dir, label, every, metadata, resume)
            )

    workers = min(settings.threads, len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run_train_job, jobs))
    else:
        outcomes = [run_train_job(job) for job in jobs]

    collected = sum(o.collected for o in outcomes)
    wall_minutes = sum(o.metrics.wall_seconds for o in outcomes) / 60.0
    report: dict[str, Any] = {
        "model": config.model,
        "sampler": config.sampler,
        "eta": values["eta"],
        "train_fraction": fraction,
        "seed": config.seed,
        "S": collected,
        "K_active_mean": sum(o.K_sum for o in outcomes) / collected if collected else None,
        "wall_minutes": round(wall_minutes, 4),
        "chains": [
            {"split": o.split, "chain": o.chain_id, **o.metrics.to_dict()} for o in outcomes
        ],
    }
    if fraction < 1.0:
        per_split = []
        for s in range(splits):
            accs = [o.accumulator for o in outcomes if o.split == s and o.accumulator is not None]
            merged = merge_accumulators(accs)
            per_split.append({"split": s, "S": merged.S, "perplexity": perplexity(merged)})
        report["splits"] = per_split
        # Arithmetic mean of the per-split perplexities.
        report["perplexity"] = float(np.mean([row["perplexity"] for row in per_split]))
        logger.log(NOTICE_LEVEL, "Heldout perplexity %.4f", report["perplexity"])
    _write_json(out_dir / "report.json", report)

    outputs = sorted(p.name for p in out_dir.iterdir() if p.is_file()) + ["manifest.json"]
    manifest = {
        "config": {**values, "resume": args.resume, "checkpoint_every": every},
        "chain_config": config.to_dict(),
        "corpus": str(args.corpus),
        "corpus_hash": digest,
        "seed": config.seed,
        "version": __version__,
        "threads": settings.threads,
        "started_at": started,
        "finished_at": _now(),
        "outputs": sorted(set(outputs)),
    }
    _write_json(out_dir / "manifest.json", manifest)
    return EXIT_OK


def cmd_features(args: argparse.Namespace) -> int:
    post_iters = args.post_iters if args.post_iters is not None else DEFAULTS["post_iters"]
    post_collect = args.post_collect if args.post_collect is not None else DEFAULTS["post_collect"]
    seed = args.seed if args.seed is not None else DEFAULTS["seed"]
    loaded = checkpoint.load(args.checkpoint)
    if loaded.state.kind == "dcmlda":
        raise CapabilityError(
            "GNBP-DCMLDA does not provide sample-specific feature vectors; "
            "train a pfa or nbfa model for feature extraction"
        )
    if "word_factor" not in loaded.extras:
        raise SchemaError(f"{args.checkpoint} carries no word-factor counts")
    _, matrix = load_corpus(args.corpus, args.format or DEFAULTS["format"])
    features = extract_features(
        loaded.state,
        loaded.extras["word_factor"],
        matrix,
        feature_stream(seed),
        iterations=post_iters,
        collect=post_collect,
    )
    features.write_csv(args.out)
    K, J = features.shape
    logger.log(NOTICE_LEVEL, "Wrote %d x %d feature matrix to %s", J, K, args.out)
    return EXIT_OK


def _labels(paths: list[str], labels: list[str] | None) -> list[str]:
    if labels:
        if len(labels) != len(paths):
            raise ConfigError(f"Got {len(labels)} labels for {len(paths)} traces")
        return labels
    stems = [Path(p).stem for p in paths]
    if len(set(stems)) == len(stems):
        return stems
    return [str(Path(p).with_suffix("")) for p in paths]


def cmd_diagnose(args: argparse.Namespace) -> int:
    labels = _labels(args.traces, args.labels.split(",") if args.labels else None)
    traces = {
        label: ChainTrace.read_csv(path)
        for label, path in zip(labels, args.traces, strict=True)
    }
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    window = args.window

    write_diagnostics_csv(traces, out_dir / "diagnostics.csv", window)
    reference = labels[0]
    summary: dict[str, Any] = {}
    for label, trace in traces.items():
        row = diagnostics(trace, window).to_dict()
        if trace.records and traces[reference].records:
            row["op_ratio_vs_" + reference] = op_count_ratio(trace, traces[reference])
        summary[label] = row
    _write_json(out_dir / "diagnostics.json", summary)
    if not args.no_plot:
        plot_traces(traces, out_dir / "k_trace.png")
    logger.log(NOTICE_LEVEL, "Diagnosed %d trace(s) into %s", len(traces), out_dir)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nbfa", description="Negative binomial factor analysis of count matrices"
    )
    parser.add_argument("--version", action="version", version=f"nbfa {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    ingest = sub.add_parser("ingest", help="Canonicalize and prune a bag-of-words corpus")
    ingest.add_argument("input", help="Corpus path or http(s) URL")
    ingest.add_argument("--format", choices=CORPUS_FORMATS)
    ingest.add_argument("--min-doc-freq", dest="min_doc_freq", type=int)
    ingest.add_argument(
        "--num-docs", dest="num_docs", type=int, help="Document count J, keeps trailing empty ones"
    )
    ingest.add_argument("--out", required=True, help="Canonical uci-bow output path")
    ingest.set_defaults(handler=cmd_ingest)

    train = sub.add_parser("train", help="Run Gibbs chains and report heldout perplexity")
    train.add_argument("corpus", help="Corpus path or http(s) URL")
    train.add_argument("--config", help="TOML file of defaults; flags override it")
    train.add_argument("--format", choices=CORPUS_FORMATS)
    train.add_argument("--model", choices=MODEL_KINDS)
    train.add_argument("--sampler", choices=SAMPLER_KINDS)
    train.add_argument("--iters", type=int)
    train.add_argument("--burnin", type=int)
    train.add_argument("--thin", type=int)
    train.add_argument("--K-init", dest="K_init", type=int)
    train.add_argument("--K-star", dest="K_star", type=int)
    train.add_argument("--eta", help=f"Dirichlet smoothing value, or '{SAMPLE_ETA}'")
    train.add_argument("--truncation", choices=("adaptive", "fixed"))
    train.add_argument("--train-fraction", dest="train_fraction", type=float)
    train.add_argument("--seed", type=int)
    train.add_argument("--chains", type=int)
    train.add_argument("--splits", type=int)
    for name in ("a0", "b0", "e0", "f0"):
        train.add_argument(f"--{name}", type=float)
    train.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    train.add_argument("--resume", help="Checkpoint to continue from")
    train.add_argument("--out", required=True, help="Output directory")
    train.set_defaults(handler=cmd_train)

    features = sub.add_parser("features", help="Export per-sample factor proportions")
    features.add_argument("corpus", help="Corpus path or http(s) URL")
    features.add_argument("--checkpoint", required=True)
    features.add_argument("--format", choices=CORPUS_FORMATS)
    features.add_argument("--post-iters", dest="post_iters", type=int)
    features.add_argument("--post-collect", dest="post_collect", type=int)
    features.add_argument("--seed", type=int)
    features.add_argument("--out", required=True, help="Feature CSV path")
    features.set_defaults(handler=cmd_features)

    diagnose = sub.add_parser("diagnose", help="Compare K+ traces, op counts and timing")
    diagnose.add_argument("traces", nargs="+")
    diagnose.add_argument("--labels", help="Comma-separated series labels")
    diagnose.add_argument("--window", type=int, default=50)
    diagnose.add_argument("--no-plot", dest="no_plot", action="store_true")
    diagnose.add_argument("--out", required=True, help="Output directory")
    diagnose.set_defaults(handler=cmd_diagnose)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=settings.log_level, stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE

    try:
        code: int = args.handler(args)
        return code
    except (CorpusParseError, EmptyVocabularyError, OSError, httpx.HTTPError) as e:
        logger.error("%s", e)
        return EXIT_USAGE
    except (ConfigError, ParameterError) as e:
        logger.error("%s", e)
        return EXIT_CONFIG
    except CapabilityError as e:
        logger.error("%s", e)
        return EXIT_CAPABILITY
    except SchemaError as e:
        logger.error("%s", e)
        return EXIT_SCHEMA


if __name__ == "__main__":
    sys.exit(main())
