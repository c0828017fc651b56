import csv
import logging
import time
from collections.abc import Callable
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from nbfa.config import settings
from nbfa.core import checkpoint
from nbfa.core.blocked import BlockedSampler, CompoundPoissonSampler
from nbfa.core.collapsed import collapsed_sampler
from nbfa.core.corpus import SparseCountMatrix
from nbfa.core.distributions import RngStream, guard
from nbfa.core.model import (
    SUPPORTED,
    Hyperparams,
    ModelKind,
    ModelState,
    SamplerKind,
    TruncationKind,
    check_invariants,
    init_state,
)
from nbfa.core.sampler import Sampler
from nbfa.errors import ConfigError, SchemaError

NOTICE_LEVEL = settings.notice_level

logger = logging.getLogger(__name__)
logging.addLevelName(NOTICE_LEVEL, "NOTICE")

TRACE_COLUMNS = ("iteration", "K_active", "log_joint_surrogate", "wall_ms", "assign_ops")

# Called at every collection event with the state and a per-event stream.
Collector = Callable[[ModelState, RngStream], None]


@dataclass(frozen=True)
class ChainConfig:
    model: ModelKind = "nbfa"
    sampler: SamplerKind = "cp"
    iterations: int = 5000
    burn_in: int = 2500
    collect_every: int = 5
    K_init: int = 400
    K_star: int = 20
    truncation: TruncationKind = "adaptive"
    seed: int = 0
    hyper: Hyperparams = field(default_factory=Hyperparams)

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ConfigError(f"iterations must be positive, got {self.iterations}")
        if not 0 <= self.burn_in < self.iterations:
            raise ConfigError(
                f"burn_in must lie in [0, iterations), got {self.burn_in} of {self.iterations}"
            )
        if self.collect_every < 1:
            raise ConfigError(f"collect_every must be at least 1, got {self.collect_every}")
        if self.K_star < 0:
            raise ConfigError(f"K_star must be nonnegative, got {self.K_star}")
        if self.truncation == "adaptive" and self.K_star < 1:
            raise ConfigError(f"Adaptive truncation needs K_star >= 1, got {self.K_star}")
        if self.model not in SUPPORTED.get(self.sampler, frozenset()):
            raise ConfigError(f"The {self.sampler} sampler does not support the {self.model} model")

    def is_collection(self, iteration: int) -> bool:
        return iteration > self.burn_in and (iteration - self.burn_in) % self.collect_every == 0

    @property
    def expected_collections(self) -> int:
        return (self.iterations - self.burn_in) // self.collect_every

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def make_sampler(config: ChainConfig, threads: int | None = None) -> Sampler:
    if config.sampler == "blocked":
        return BlockedSampler(config.model, config.K_star, threads)
    if config.sampler == "cp":
        return CompoundPoissonSampler(config.model, config.K_star, threads)
    return collapsed_sampler(config.model, config.K_star)


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    K_active: int
    log_joint_surrogate: float
    wall_ms: float
    assign_ops: int


@dataclass
class ChainTrace:
    records: list[TraceRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: TraceRecord) -> None:
        self.records.append(record)

    @property
    def K_active(self) -> list[int]:
        return [r.K_active for r in self.records]

    @property
    def assign_ops(self) -> list[int]:
        return [r.assign_ops for r in self.records]

    @property
    def wall_ms(self) -> list[float]:
        return [r.wall_ms for r in self.records]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(TRACE_COLUMNS)
            for r in self.records:
                writer.writerow(
                    [
                        r.iteration,
                        r.K_active,
                        repr(r.log_joint_surrogate),
                        f"{r.wall_ms:.3f}",
                        r.assign_ops,
                    ]
                )

    @classmethod
    def read_csv(cls, path: str | Path) -> "ChainTrace":
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header is None or tuple(header) != TRACE_COLUMNS:
                raise SchemaError(f"{path}: expected columns {','.join(TRACE_COLUMNS)}")
            trace = cls()
            for line_number, row in enumerate(reader, start=2):
                if len(row) != len(TRACE_COLUMNS):
                    raise SchemaError(
                        f"{path}:{line_number}: expected {len(TRACE_COLUMNS)} fields"
                    )
                try:
                    trace.append(
                        TraceRecord(
                            int(row[0]), int(row[1]), float(row[2]), float(row[3]), int(row[4])
                        )
                    )
                except ValueError as e:
                    raise SchemaError(f"{path}:{line_number}: {e}") from e
        return trace


@dataclass
class ChainMetrics:
    iterations_run: int = 0
    samples_collected: int = 0
    checkpoints_written: int = 0
    wall_seconds: float = 0.0
    p_clamps: int = 0
    shape_floors: int = 0

    def to_dict(self) -> dict[str, int | float]:
        return {
            "iterations_run": self.iterations_run,
            "samples_collected": self.samples_collected,
            "checkpoints_written": self.checkpoints_written,
            "wall_seconds": round(self.wall_seconds, 3),
            "p_clamps": self.p_clamps,
            "shape_floors": self.shape_floors,
        }


@dataclass(eq=False)
class ChainResult:
    state: ModelState
    trace: ChainTrace
    metrics: ChainMetrics
    rng: RngStream


# Top-level stream namespaces under a run seed.
CHAIN_STREAMS = 0
SPLIT_STREAMS = 1
FEATURE_STREAMS = 2


def chain_streams(seed: int, chain_id: int = 0) -> tuple[RngStream, RngStream]:
    """(sampler stream, evaluation stream) for one chain of a run."""
    base = RngStream(seed, chain_id, (CHAIN_STREAMS,))
    return base.derive(0), base.derive(1)


def split_stream(seed: int, split: int) -> RngStream:
    return RngStream(seed, split, (SPLIT_STREAMS,))


def feature_stream(seed: int) -> RngStream:
    return RngStream(seed, 0, (FEATURE_STREAMS,))


def run_chain(
    config: ChainConfig,
    corpus: SparseCountMatrix,
    collector: Collector | None = None,
    state: ModelState | None = None,
    rng: RngStream | None = None,
    chain_id: int = 0,
    checkpoint_dir: str | Path | None = None,
    checkpoint_every: int | None = None,
    metadata: dict[str, Any] | None = None,
    checkpoint_extras: Callable[[ModelState], dict[str, np.ndarray]] | None = None,
) -> ChainResult:
    """Run (or resume) one Gibbs chain.

    A resumed chain continues at state.iteration + 1; pass the stream restored from the
    same checkpoint to reproduce the uninterrupted run.
    """
    sampler = make_sampler(config)
    chain_rng, eval_rng = chain_streams(config.seed, chain_id)
    if state is None:
        state = init_state(
            config.model,
            config.sampler,
            config.K_init,
            config.hyper,
            corpus,
            chain_rng.derive(0),
            K_star=config.K_star,
            truncation=config.truncation,
        )
    elif rng is not None:
        chain_rng = rng
    sampler.check_state(state)

    every = settings.checkpoint_every if checkpoint_every is None else checkpoint_every
    progress_every = max(1, config.iterations // 20)
    check_every = settings.invariant_check_every
    trace = ChainTrace()
    metrics = ChainMetrics()
    guard.reset()
    start = time.perf_counter()

    for it in range(state.iteration + 1, config.iterations + 1):
        state.iteration = it
        t0 = time.perf_counter()
        ops = sampler.step(state, corpus, chain_rng)
        wall_ms = (time.perf_counter() - t0) * 1000.0
        if it % check_every == 0:
            check_invariants(state, corpus)
        trace.append(
            TraceRecord(
                it,
                state.measure.K_active,
                sampler.log_joint(state, corpus),
                wall_ms,
                ops,
            )
        )
        metrics.iterations_run += 1

        if config.is_collection(it):
            metrics.samples_collected += 1
            if collector is not None:
                collector(state, eval_rng.derive(it))

        if it % progress_every == 0:
            logger.log(
                NOTICE_LEVEL,
                "%s/%s chain %d: iteration %d K+=%d eta=%.4g",
                config.model,
                config.sampler,
                chain_id,
                it,
                state.measure.K_active,
                state.eta,
            )

        if checkpoint_dir is not None and every > 0 and it % every == 0:
            path = Path(checkpoint_dir) / f"checkpoint-{chain_id}-{it:06d}.pb"
            checkpoint.save(
                state,
                path,
                chain_rng,
                {"config": config.to_dict(), "chain_id": chain_id, **(metadata or {})},
                checkpoint_extras(state) if checkpoint_extras is not None else None,
            )
            metrics.checkpoints_written += 1

    metrics.wall_seconds = time.perf_counter() - start
    metrics.p_clamps = guard.p_clamps
    metrics.shape_floors = guard.shape_floors
    if metrics.p_clamps or metrics.shape_floors:
        logger.warning("Numeric guards fired: %s", guard.to_dict())
    logger.info("Chain %d finished: %s", chain_id, metrics.to_dict())
    return ChainResult(state, trace, metrics, chain_rng)
