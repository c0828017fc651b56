import copy

import numpy as np
import pytest

from nbfa.core.blocked import BlockedSampler, CompoundPoissonSampler, cp_blocked_step
from nbfa.core.collapsed import (
    CollapsedDCMLDASampler,
    CollapsedNBFASampler,
    CollapsedPFASampler,
    collapsed_sampler,
    collapsed_step,
)
from nbfa.core.corpus import SparseCountMatrix
from nbfa.core.distributions import RngStream
from nbfa.core.model import Hyperparams, ModelState, check_invariants, init_state
from nbfa.core.sampler import Sampler
from nbfa.errors import ConfigError


def _corpus(seed: int = 0, V: int = 12, J: int = 6) -> SparseCountMatrix:
    dense = np.random.default_rng(seed).poisson(1.2, size=(V, J))
    dense[0] += 1  # no empty documents
    return SparseCountMatrix.from_dense(dense)


def _sampler(model: str, sampler: str, K_star: int = 5) -> Sampler:
    if sampler == "blocked":
        return BlockedSampler(model, K_star)  # type: ignore[arg-type]
    if sampler == "cp":
        return CompoundPoissonSampler(model, K_star)  # type: ignore[arg-type]
    return collapsed_sampler(model, K_star)  # type: ignore[arg-type]


def _assert_tables_conserve_tokens(state: ModelState, corpus: SparseCountMatrix) -> None:
    tables = state.latent.tables
    assert tables is not None
    for cell, by_factor in enumerate(tables):
        assert sum(sum(occ) for occ in by_factor.values()) == corpus.counts[cell]
        assert all(min(occ) >= 1 for occ in by_factor.values())


@pytest.mark.parametrize(
    "model,sampler",
    [
        ("nbfa", "blocked"),
        ("nbfa", "cp"),
        ("nbfa", "collapsed"),
        ("dcmlda", "blocked"),
        ("dcmlda", "cp"),
        ("dcmlda", "collapsed"),
        ("pfa", "collapsed"),
    ],
)
def test_steps_preserve_invariants(model: str, sampler: str) -> None:
    corpus = _corpus()
    K_init = 0 if sampler == "collapsed" else 8
    state = init_state(
        model,  # type: ignore[arg-type]
        sampler,  # type: ignore[arg-type]
        K_init,
        Hyperparams(sample_eta=True),
        corpus,
        RngStream(1),
        K_star=5,
    )
    step = _sampler(model, sampler)
    rng = RngStream(2)

    for it in range(1, 6):
        state.iteration = it
        ops = step.step(state, corpus, rng)
        assert ops > 0
        check_invariants(state, corpus)
        assert state.eta > 0
        if sampler == "collapsed" and model != "pfa":
            _assert_tables_conserve_tokens(state, corpus)
        if sampler != "collapsed":
            assert state.K == state.measure.K_active + 5


def test_sampler_rejects_foreign_state() -> None:
    corpus = _corpus()
    state = init_state("nbfa", "cp", 4, Hyperparams(), corpus, RngStream(0))

    with pytest.raises(ConfigError):
        BlockedSampler("nbfa").step(state, corpus, RngStream(1))
    with pytest.raises(ConfigError):
        CompoundPoissonSampler("pfa")  # type: ignore[arg-type]
    with pytest.raises(ConfigError):
        collapsed_sampler("lda")  # type: ignore[arg-type]


def test_cp_single_token_cells_get_one_table() -> None:
    dense = np.eye(5, dtype=np.int64)
    corpus = SparseCountMatrix.from_dense(dense)
    state = init_state("nbfa", "cp", 3, Hyperparams(), corpus, RngStream(3))

    ops = CompoundPoissonSampler("nbfa").step(state, corpus, RngStream(4))

    assert state.latent.ell_vj is not None
    assert np.all(state.latent.ell_vj == 1)
    assert ops == corpus.total + corpus.nnz


def test_cp_op_count_tracks_tables() -> None:
    corpus = SparseCountMatrix.from_dense(np.full((6, 4), 20))
    state = init_state("dcmlda", "cp", 10, Hyperparams(), corpus, RngStream(5))

    ops = CompoundPoissonSampler("dcmlda").step(state, corpus, RngStream(6))

    assert state.latent.ell_vj is not None
    assert ops == corpus.total + int(state.latent.ell_vj.sum())
    assert np.all((state.latent.ell_vj >= 1) & (state.latent.ell_vj <= 20))


def test_blocked_op_count_is_tokens_times_factors() -> None:
    corpus = _corpus(1)
    state = init_state("nbfa", "blocked", 7, Hyperparams(), corpus, RngStream(7))

    ops = BlockedSampler("nbfa").step(state, corpus, RngStream(8))

    assert ops == corpus.total * 7


def test_blocked_result_does_not_depend_on_threads() -> None:
    corpus = _corpus(2)
    first = init_state("nbfa", "blocked", 6, Hyperparams(), corpus, RngStream(9))
    second = copy.deepcopy(first)

    for it in range(1, 4):
        first.iteration = second.iteration = it
        BlockedSampler("nbfa", 5, threads=1).step(first, corpus, RngStream(10))
        BlockedSampler("nbfa", 5, threads=3).step(second, corpus, RngStream(10))

    assert first.latent.z is not None and second.latent.z is not None
    assert np.array_equal(first.latent.z, second.latent.z)
    assert np.array_equal(first.scores.p, second.scores.p)


def test_step_functions_advance_state() -> None:
    corpus = _corpus(3)
    state = init_state("nbfa", "cp", 5, Hyperparams(), corpus, RngStream(11))
    assert cp_blocked_step(state, corpus, RngStream(12)) is state

    collapsed = init_state("nbfa", "collapsed", 0, Hyperparams(), corpus, RngStream(13))
    collapsed_step(collapsed, corpus, RngStream(14))
    assert collapsed.measure.K_active >= 1


def test_first_token_opens_factor_zero_at_table_zero() -> None:
    corpus = SparseCountMatrix.from_dense(np.array([[1], [0]]))
    state = init_state("nbfa", "collapsed", 0, Hyperparams(), corpus, RngStream(15))
    sampler = CollapsedNBFASampler("nbfa")

    sampler.step(state, corpus, RngStream(16))

    assert state.latent.z is not None and state.latent.b is not None
    assert state.latent.z.tolist() == [0]
    assert state.latent.b.tolist() == [0]
    assert state.latent.tables == [{0: [1]}]
    assert state.measure.K_active == 1
    assert state.measure.r is not None and state.measure.r.size == 1


def test_remove_then_add_restores_statistics() -> None:
    corpus = SparseCountMatrix.from_dense(np.array([[5, 2], [3, 0], [1, 4]]))
    state = init_state("nbfa", "collapsed", 3, Hyperparams(), corpus, RngStream(17))
    sampler = CollapsedNBFASampler("nbfa")
    ws = sampler._workspace(state, corpus)
    latent = state.latent
    assert latent.z is not None and latent.b is not None and latent.tables is not None

    word, doc, total = ws.word_factor.copy(), ws.doc_factor.copy(), ws.factor_total.copy()
    before = [
        {k: sorted(occ) for k, occ in by_factor.items()} for by_factor in latent.tables
    ]
    token = 3
    cell = int(corpus.token_cell[token])
    k = int(latent.z[token])
    t = int(latent.b[token])
    alone = latent.tables[cell][k][t] == 1

    sampler.remove_token(state, corpus, ws, token)
    assert latent.z[token] == -1
    sampler.add_token(state, corpus, ws, token, k, None if alone else t)

    after = [{k: sorted(occ) for k, occ in by_factor.items()} for by_factor in latent.tables]
    assert after == before
    assert np.array_equal(ws.word_factor, word)
    assert np.array_equal(ws.doc_factor, doc)
    assert np.array_equal(ws.factor_total, total)
    # every token still points at a live table of its factor
    for tok in range(corpus.total):
        c = int(corpus.token_cell[tok])
        assert int(latent.b[tok]) < len(latent.tables[c][int(latent.z[tok])])


def test_collapsed_dcmlda_keeps_no_weights() -> None:
    corpus = _corpus(4)
    state = init_state("dcmlda", "collapsed", 0, Hyperparams(), corpus, RngStream(18))
    sampler = CollapsedDCMLDASampler("dcmlda")

    for it in range(1, 4):
        state.iteration = it
        sampler.step(state, corpus, RngStream(19))

    assert state.measure.r is None
    assert state.scores.theta is None and state.scores.theta_sum is None
    assert state.measure.K_active >= 1


def test_pfa_new_factor_versus_existing_weight() -> None:
    corpus = SparseCountMatrix.from_dense(np.array([[1], [0], [0]]))
    state = init_state("pfa", "collapsed", 1, Hyperparams(eta=0.05), corpus, RngStream(20))
    sampler = CollapsedPFASampler("pfa")
    ws = sampler._workspace(state, corpus)
    ws.remove(0, 0, 0)
    assert state.measure.r is not None

    weights = sampler.token_weights(state, ws, 0, 0, corpus.V)

    V, eta = 3, 0.05
    existing = (eta / (V * eta)) * state.measure.r[0]
    new = state.measure.r_star / V
    assert weights.size == 2
    assert weights[0] == pytest.approx(existing)
    assert weights[1] / weights[0] == pytest.approx(new / existing)
