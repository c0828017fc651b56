"""End-to-end behaviour of the samplers on synthetic corpora."""

from dataclasses import replace

import numpy as np
import pytest

from nbfa.core.chain import ChainConfig, run_chain, split_stream
from nbfa.core.corpus import HeldoutSplit, SparseCountMatrix, split_heldout
from nbfa.core.distributions import RngStream
from nbfa.core.evaluation import (
    PerplexityAccumulator,
    accumulate,
    merge_accumulators,
    op_count_ratio,
    perplexity,
    posterior_draw,
    settle_iteration,
)
from nbfa.core.model import ModelState
from nbfa.core.synthetic import bursty_corpus, nbfa_corpus, poisson_corpus


def _evaluate(config: ChainConfig, split: HeldoutSplit, chains: int) -> tuple[float, float]:
    """Pooled heldout perplexity and mean collected K+ over independent chains."""
    accs: list[PerplexityAccumulator] = []
    K_active: list[int] = []
    for chain_id in range(chains):
        acc = PerplexityAccumulator.create(split.test, split.train)

        def collect(state: ModelState, rng: RngStream, acc: PerplexityAccumulator = acc) -> None:
            K_active.append(state.measure.K_active)
            accumulate(acc, state.kind, posterior_draw(state, split.train, rng), split.train)

        run_chain(config, split.train, collector=collect, chain_id=chain_id)
        accs.append(acc)
    return perplexity(merge_accumulators(accs)), float(np.mean(K_active))


def test_cp_sampler_needs_fewer_operations_and_less_time() -> None:
    gen = RngStream(40).generator
    # Dense 10 x 10 corpus with mean cell count 20
    corpus = SparseCountMatrix.from_dense(gen.poisson(20.0, size=(10, 10)) + 1)
    base = ChainConfig(
        sampler="cp",
        iterations=30,
        burn_in=10,
        collect_every=5,
        K_init=20,
        truncation="fixed",
        seed=41,
    )

    cp = run_chain(base, corpus).trace
    blocked = run_chain(replace(base, sampler="blocked"), corpus).trace

    assert op_count_ratio(cp, blocked) < 0.5
    # Skip warm-up iterations before comparing timings
    assert np.median(cp.wall_ms[5:]) < np.median(blocked.wall_ms[5:])


@pytest.mark.slow
def test_samplers_agree_on_a_synthetic_corpus() -> None:
    corpus = nbfa_corpus(50, 40, 5, 100, RngStream(50, 99)).matrix
    split = split_heldout(corpus, 0.8, split_stream(50, 0))
    base = ChainConfig(iterations=3000, burn_in=1500, collect_every=5, K_init=50, seed=51)

    results = {
        sampler: _evaluate(replace(base, sampler=sampler), split, chains=3)
        for sampler in ("cp", "blocked", "collapsed")
    }

    K_means = [K for _, K in results.values()]
    perplexities = [ppl for ppl, _ in results.values()]
    assert max(K_means) - min(K_means) <= 2.0
    assert max(perplexities) / min(perplexities) - 1.0 < 0.02


@pytest.mark.slow
def test_cp_sampler_settles_before_blocked() -> None:
    corpus = nbfa_corpus(300, 150, 10, 50, RngStream(60, 99)).matrix
    base = ChainConfig(iterations=1500, burn_in=750, collect_every=5, K_init=500, seed=61)

    cp = run_chain(base, corpus).trace
    blocked = run_chain(replace(base, sampler="blocked"), corpus).trace

    cp_settle = settle_iteration(cp)
    blocked_settle = settle_iteration(blocked)
    assert cp_settle is not None and blocked_settle is not None
    assert cp_settle < blocked_settle


def _paired_gaps(corpus: SparseCountMatrix, seed: int) -> list[float]:
    """Relative perplexity gap (PFA - NBFA) / PFA over five heldout splits."""
    nbfa = ChainConfig(iterations=400, burn_in=200, collect_every=5, K_init=50, seed=seed)
    pfa = replace(nbfa, model="pfa", sampler="collapsed")
    gaps = []
    for s in range(5):
        split = split_heldout(corpus, 0.8, split_stream(seed, s))
        nbfa_ppl, _ = _evaluate(nbfa, split, chains=1)
        pfa_ppl, _ = _evaluate(pfa, split, chains=1)
        gaps.append((pfa_ppl - nbfa_ppl) / pfa_ppl)
    return gaps


@pytest.mark.slow
def test_nbfa_wins_on_bursty_corpus() -> None:
    bursty = bursty_corpus(100, 60, 5, 80, RngStream(70, 99)).matrix
    plain = poisson_corpus(100, 60, 5, 80, RngStream(71, 99)).matrix

    bursty_gaps = _paired_gaps(bursty, seed=72)
    plain_gaps = _paired_gaps(plain, seed=73)

    assert sum(g > 0 for g in bursty_gaps) >= 4
    assert np.mean(bursty_gaps) > 0
    assert abs(np.mean(plain_gaps)) < 0.03
    assert abs(np.mean(plain_gaps)) < np.mean(bursty_gaps)
