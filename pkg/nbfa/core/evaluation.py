"""Posterior draws, heldout perplexity, feature extraction and chain diagnostics."""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from nbfa.config import settings
from nbfa.core.chain import ChainTrace
from nbfa.core.corpus import SparseCountMatrix
from nbfa.core.distributions import (
    RngStream,
    beta_array,
    clamp_probability,
    crt_array,
    dirichlet_columns,
    gamma_array,
    normalize_rows,
)
from nbfa.core.model import (
    FloatArray,
    IntArray,
    ModelKind,
    ModelState,
    PosteriorDraw,
    global_rate,
    latent_marginals,
)
from nbfa.errors import CapabilityError, ConfigError, DomainError, InvariantError

NOTICE_LEVEL = settings.notice_level

logger = logging.getLogger(__name__)

MOVING_AVERAGE_WINDOW = 50


def posterior_draw(
    state: ModelState, corpus: SparseCountMatrix, rng: RngStream
) -> PosteriorDraw:
    """Draw (Phi, scores, p) over the active factors plus K_star reserve slots.

    Reserve slots carry zero latent counts; their weight is gamma0/K_star (r_star/K_star
    for PFA). Fixed truncation draws over every slot instead.
    """
    gen = rng.generator
    marg = latent_marginals(state, corpus)
    measure = state.measure
    scores = state.scores
    p = scores.p
    q = global_rate(state)

    if measure.truncation == "fixed":
        active = np.ones(state.K, dtype=bool)
        n_reserve = 0
    else:
        active = marg.factor_total > 0
        n_reserve = measure.K_star
    word = np.concatenate(
        [marg.word_factor[:, active], np.zeros((corpus.V, n_reserve), dtype=np.int64)], axis=1
    )
    doc = np.concatenate(
        [marg.doc_factor[:, active], np.zeros((corpus.J, n_reserve), dtype=np.int64)], axis=1
    )
    phi = dirichlet_columns(state.eta + word, gen)

    if state.kind == "dcmlda":
        totals = word.sum(axis=0).astype(np.float64)
        if measure.truncation == "fixed":
            totals = totals + measure.gamma0 / state.K
        else:
            totals[totals.size - n_reserve :] = measure.gamma0 / max(measure.K_star, 1)
        r = gamma_array(totals, 1.0 / (measure.c0 + q), gen)
        return PosteriorDraw(phi, r, p)

    assert measure.r is not None
    reserve = (
        measure.r_star / max(measure.K_star, 1)
        if state.kind == "pfa"
        else measure.gamma0 / max(measure.K_star, 1)
    )
    r = np.concatenate([measure.r[active], np.full(n_reserve, reserve)])
    if state.kind == "pfa":
        # Gamma(n_jk + r_k, p_j): the scale is p_j itself.
        theta = gamma_array(r[:, None] + doc.T, p[None, :], gen)
    else:
        assert scores.c is not None
        rate = scores.c - np.log1p(-p)
        theta = gamma_array(r[:, None] + doc.T, 1.0 / rate[None, :], gen)
    return PosteriorDraw(phi, theta, p)


def cell_base_rates(draw: PosteriorDraw, v: IntArray, j: IntArray) -> FloatArray:
    """sum_k phi_vk theta_kj (or phi_vk r_k) at the given cells."""
    if draw.scores.ndim == 1:
        return np.asarray(draw.phi[v] @ draw.scores, dtype=np.float64)
    return np.asarray(np.einsum("ck,kc->c", draw.phi[v], draw.scores[:, j]), dtype=np.float64)


def poisson_rates(
    kind: ModelKind,
    draw: PosteriorDraw,
    train: SparseCountMatrix,
    v: IntArray,
    j: IntArray,
) -> tuple[FloatArray, FloatArray]:
    """Estimated Poisson rates at cells (v, j) and their per-document totals over all V.

    PFA: sum_k phi_vk theta_kj. DCMLDA: (n_vj + sum_k phi_vk r_k) p_j.
    NBFA: (n_vj + sum_k phi_vk theta_kj) p_j. Columns of Phi sum to one, so the dense
    total collapses to the score sums.
    """
    base = cell_base_rates(draw, v, j)
    if kind == "pfa":
        return base, np.asarray(draw.scores.sum(axis=0), dtype=np.float64)
    p = draw.p
    n_train = train.lookup(v, j)
    rates = (n_train + base) * p[j]
    score_mass = draw.scores.sum() if kind == "dcmlda" else draw.scores.sum(axis=0)
    totals = (train.col_sums + score_mass) * p
    return np.asarray(rates, dtype=np.float64), np.asarray(totals, dtype=np.float64)


@dataclass(eq=False)
class PerplexityAccumulator:
    """Running sums over collected samples for the heldout cells."""

    test_v: IntArray
    test_j: IntArray
    test_counts: IntArray
    numerators: FloatArray
    normalizers: FloatArray
    S: int = 0

    @classmethod
    def create(cls, test: SparseCountMatrix, train: SparseCountMatrix) -> "PerplexityAccumulator":
        if test.V != train.V or test.J != train.J:
            raise InvariantError("Train and test matrices must have the same shape")
        keep = train.col_sums[test.cell_j] > 0
        dropped = int(test.counts[~keep].sum())
        if dropped:
            logger.info("Skipping %d heldout tokens from samples with no training tokens", dropped)
        return cls(
            test.indices[keep].copy(),
            test.cell_j[keep].copy(),
            test.counts[keep].copy(),
            np.zeros(int(keep.sum())),
            np.zeros(test.J),
        )

    @property
    def m_total(self) -> int:
        return int(self.test_counts.sum())


def accumulate_rates(
    acc: PerplexityAccumulator, cell_rates: FloatArray, doc_totals: FloatArray
) -> PerplexityAccumulator:
    if cell_rates.shape != acc.numerators.shape or doc_totals.shape != acc.normalizers.shape:
        raise InvariantError(
            f"Rate shapes {cell_rates.shape}/{doc_totals.shape} do not match the accumulator"
        )
    acc.numerators += cell_rates
    acc.normalizers += doc_totals
    acc.S += 1
    return acc


def accumulate(
    acc: PerplexityAccumulator, kind: ModelKind, draw: PosteriorDraw, train: SparseCountMatrix
) -> PerplexityAccumulator:
    rates, totals = poisson_rates(kind, draw, train, acc.test_v, acc.test_j)
    return accumulate_rates(acc, rates, totals)


def merge_accumulators(accs: list[PerplexityAccumulator]) -> PerplexityAccumulator:
    """Pool the collected samples of several chains over the same heldout cells."""
    if not accs:
        raise InvariantError("Nothing to merge")
    first = accs[0]
    merged = PerplexityAccumulator(
        first.test_v,
        first.test_j,
        first.test_counts,
        first.numerators.copy(),
        first.normalizers.copy(),
        first.S,
    )
    for acc in accs[1:]:
        if not np.array_equal(acc.test_v, first.test_v) or not np.array_equal(
            acc.test_j, first.test_j
        ):
            raise InvariantError("Accumulators cover different heldout cells")
        merged.numerators += acc.numerators
        merged.normalizers += acc.normalizers
        merged.S += acc.S
    return merged


def perplexity(acc: PerplexityAccumulator) -> float:
    if acc.S < 1 or acc.m_total < 1:
        raise DomainError("Perplexity needs at least one collected sample and one heldout token")
    norm = acc.normalizers[acc.test_j]
    if np.any(norm <= 0) or np.any(acc.numerators <= 0):
        raise DomainError("Perplexity normalizer or rate is not positive")
    log_pred = np.log(acc.numerators) - np.log(norm)
    return float(np.exp(-np.sum(acc.test_counts * log_pred) / acc.m_total))


@dataclass(eq=False)
class FeatureMatrix:
    """K x J posterior means of theta_j / theta_.j."""

    values: FloatArray

    @property
    def shape(self) -> tuple[int, int]:
        K, J = self.values.shape
        return K, J

    def write_csv(self, path: str | Path) -> None:
        """J rows, K columns."""
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow([f"factor_{k}" for k in range(self.values.shape[0])])
            for row in self.values.T:
                writer.writerow([repr(float(x)) for x in row])


def frozen_factors(
    state: ModelState, word_factor: IntArray
) -> tuple[FloatArray, FloatArray]:
    """Posterior-mean loadings (eta + l_vk) / (V eta + l_k) and weights r of the active factors."""
    if state.kind == "dcmlda":
        raise CapabilityError(
            "DCMLDA shares one weight vector r across samples and has no sample-specific features"
        )
    r = state.measure.r
    if r is None or word_factor.shape[1] != r.size:
        raise ConfigError("The word-factor marginal does not match the checkpoint's factors")
    active = word_factor.sum(axis=0) > 0
    if not active.any():
        raise ConfigError("The trained state has no active factors")
    counts = word_factor[:, active].astype(np.float64)
    V = counts.shape[0]
    phi = (state.eta + counts) / (V * state.eta + counts.sum(axis=0))
    return phi, r[active].copy()


def extract_features(
    state: ModelState,
    word_factor: IntArray,
    corpus: SparseCountMatrix,
    rng: RngStream,
    iterations: int = 1000,
    collect: int = 500,
) -> FeatureMatrix:
    """Blocked Gibbs over the scores of new samples with Phi and r frozen.

    The last `collect` of `iterations` sweeps contribute to the mean of theta_j / theta_.j.
    """
    if not 0 < collect <= iterations:
        raise ConfigError(f"Need 0 < collect <= iterations, got {collect} of {iterations}")
    phi, r = frozen_factors(state, word_factor)
    if phi.shape[0] != corpus.V:
        raise ConfigError(f"Corpus has V={corpus.V} but the factors have V={phi.shape[0]}")
    gen = rng.generator
    hyper = state.hyper
    K = r.size
    J = corpus.J
    G = float(r.sum())
    n_j = corpus.col_sums
    rows = corpus.indices
    cols = corpus.cell_j

    p = np.full(J, 0.5)
    c = np.ones(J)
    theta = gamma_array(np.repeat(r[:, None], J, axis=1), 1.0, gen)
    total = np.zeros((K, J))

    for it in range(1, iterations + 1):
        weights = phi[rows] * theta[:, cols].T
        if state.kind == "nbfa":
            counts = crt_array(corpus.counts, weights.sum(axis=1), gen)
        else:
            counts = corpus.counts
        split = gen.multinomial(counts, normalize_rows(weights))
        doc_factor = np.zeros((J, K), dtype=np.int64)
        np.add.at(doc_factor, cols, split)

        if state.kind == "nbfa":
            theta_sum = theta.sum(axis=0)
            p = clamp_probability(beta_array(hyper.a0 + n_j, hyper.b0 + theta_sum, gen))
            c = gamma_array(np.full(J, hyper.e0 + G), 1.0 / (hyper.f0 + theta_sum), gen)
            theta = gamma_array(
                r[:, None] + doc_factor.T, 1.0 / (c - np.log1p(-p))[None, :], gen
            )
        else:
            p = clamp_probability(beta_array(hyper.a0 + n_j, hyper.b0 + G, gen))
            theta = gamma_array(r[:, None] + doc_factor.T, p[None, :], gen)

        if it > iterations - collect:
            total += theta / theta.sum(axis=0, keepdims=True)
        if it % max(1, iterations // 10) == 0:
            logger.log(NOTICE_LEVEL, "feature extraction: iteration %d of %d", it, iterations)

    return FeatureMatrix(total / collect)


@dataclass
class DiagnosticsReport:
    iterations: int
    K_mean: float
    K_variance: float
    K_final: int
    settle_iteration: int | None
    total_ops: int
    mean_ops: float
    mean_wall_ms: float
    moving_average: list[float] = field(repr=False, default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "iterations": self.iterations,
            "K_mean": self.K_mean,
            "K_variance": self.K_variance,
            "K_final": self.K_final,
            "settle_iteration": self.settle_iteration,
            "total_ops": self.total_ops,
            "mean_ops": self.mean_ops,
            "mean_wall_ms": self.mean_wall_ms,
        }


def moving_average(
    values: list[int] | FloatArray, window: int = MOVING_AVERAGE_WINDOW
) -> FloatArray:
    """Trailing mean over up to `window` points; the first entries average what exists."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return arr
    csum = np.concatenate([[0.0], np.cumsum(arr)])
    idx = np.arange(1, arr.size + 1)
    lo = np.maximum(0, idx - window)
    return np.asarray((csum[idx] - csum[lo]) / (idx - lo), dtype=np.float64)


def settle_iteration(
    trace: ChainTrace, tolerance: float = 0.1, window: int = MOVING_AVERAGE_WINDOW
) -> int | None:
    """First iteration whose moving-average K+ lies within `tolerance` of the second-half mean."""
    K = np.asarray(trace.K_active, dtype=np.float64)
    if K.size == 0:
        return None
    reference = float(K[K.size // 2 :].mean())
    close = np.abs(moving_average(K, window) - reference) <= tolerance * max(reference, 1.0)
    hits = np.flatnonzero(close)
    return int(trace.records[hits[0]].iteration) if hits.size else None


def diagnostics(trace: ChainTrace, window: int = MOVING_AVERAGE_WINDOW) -> DiagnosticsReport:
    K = np.asarray(trace.K_active, dtype=np.float64)
    ops = np.asarray(trace.assign_ops, dtype=np.int64)
    wall = np.asarray(trace.wall_ms, dtype=np.float64)
    n = len(trace)
    return DiagnosticsReport(
        iterations=n,
        K_mean=float(K.mean()) if n else 0.0,
        K_variance=float(K.var()) if n else 0.0,
        K_final=int(K[-1]) if n else 0,
        settle_iteration=settle_iteration(trace, window=window),
        total_ops=int(ops.sum()),
        mean_ops=float(ops.mean()) if n else 0.0,
        mean_wall_ms=float(wall.mean()) if n else 0.0,
        moving_average=moving_average(K, window).tolist(),
    )


def op_count_ratio(numerator: ChainTrace, denominator: ChainTrace) -> float:
    """Mean per-iteration assignment operations of one trace relative to another."""
    den = float(np.mean(denominator.assign_ops))
    if den <= 0:
        raise DomainError("Reference trace recorded no assignment operations")
    return float(np.mean(numerator.assign_ops)) / den


DIAGNOSTICS_COLUMNS = (
    "label",
    "iteration",
    "K_active",
    "K_moving_average",
    "log_joint_surrogate",
    "wall_ms",
    "assign_ops",
)


def write_diagnostics_csv(
    traces: dict[str, ChainTrace], path: str | Path, window: int = MOVING_AVERAGE_WINDOW
) -> None:
    """Merged per-iteration rows of every trace, one labeled series each."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(DIAGNOSTICS_COLUMNS)
        for label, trace in traces.items():
            smoothed = moving_average(trace.K_active, window)
            for record, avg in zip(trace.records, smoothed, strict=True):
                writer.writerow(
                    [
                        label,
                        record.iteration,
                        record.K_active,
                        f"{avg:.6g}",
                        repr(record.log_joint_surrogate),
                        f"{record.wall_ms:.3f}",
                        record.assign_ops,
                    ]
                )


def plot_traces(traces: dict[str, ChainTrace], path: str | Path) -> None:
    """Static K+ versus iteration plot, one labeled series per trace."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(8, 4.5))
    for label, trace in traces.items():
        ax.plot([r.iteration for r in trace.records], trace.K_active, label=label, linewidth=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("active factors K+")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    logger.info("Wrote trace plot %s", path)
