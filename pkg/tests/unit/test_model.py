import numpy as np
import pytest
from pytest_mock import MockerFixture

from nbfa.core.corpus import SparseCountMatrix
from nbfa.core.distributions import RngStream
from nbfa.core.model import (
    Hyperparams,
    PosteriorDraw,
    SparseTriples,
    check_invariants,
    estimated_poisson_rate,
    init_state,
    relabel_and_truncate,
    tables_to_triples,
    variance_to_mean,
)
from nbfa.core.updates import sample_eta, sample_p, update_global_measure
from nbfa.errors import ConfigError, InvariantError, ParameterError


def _corpus() -> SparseCountMatrix:
    dense = np.array([[3, 0, 1], [1, 2, 0], [0, 4, 1], [2, 1, 1]])
    return SparseCountMatrix.from_dense(dense)


def test_hyperparams_must_be_positive() -> None:
    with pytest.raises(ParameterError):
        Hyperparams(a0=0.0)
    with pytest.raises(ParameterError):
        Hyperparams(eta=float("nan"))


@pytest.mark.parametrize(
    "kind,sampler,K_init,truncation",
    [
        ("pfa", "cp", 10, "adaptive"),
        ("pfa", "blocked", 10, "adaptive"),
        ("nbfa", "blocked", 0, "adaptive"),
        ("nbfa", "collapsed", 5, "fixed"),
        ("nbfa", "cp", -1, "adaptive"),
    ],
)
def test_init_state_rejects_unsupported_combinations(
    kind: str, sampler: str, K_init: int, truncation: str
) -> None:
    with pytest.raises(ConfigError):
        init_state(
            kind,  # type: ignore[arg-type]
            sampler,  # type: ignore[arg-type]
            K_init,
            Hyperparams(),
            _corpus(),
            RngStream(0),
            truncation=truncation,  # type: ignore[arg-type]
        )


def test_init_state_blocked_nbfa() -> None:
    corpus = _corpus()
    state = init_state("nbfa", "blocked", 6, Hyperparams(), corpus, RngStream(1))

    assert state.K == 6
    assert state.factors.phi is not None and state.factors.phi.shape == (4, 6)
    assert state.scores.theta is not None and state.scores.theta.shape == (6, 3)
    assert state.latent.z is not None and state.latent.z.size == corpus.total
    assert state.measure.r_star == 0.0
    check_invariants(state, corpus)


def test_init_state_collapsed_starts_empty() -> None:
    corpus = _corpus()
    state = init_state("dcmlda", "collapsed", 0, Hyperparams(), corpus, RngStream(2))

    assert state.measure.r is None
    assert state.measure.K_active == 0
    assert state.measure.r_star > 0
    assert state.latent.z is not None and np.all(state.latent.z == -1)
    assert state.latent.tables == [{} for _ in range(corpus.nnz)]
    assert state.latent.ell_vjk is not None and state.latent.ell_vjk.size == 0


def test_init_state_collapsed_seats_tables() -> None:
    corpus = _corpus()
    state = init_state("nbfa", "collapsed", 3, Hyperparams(), corpus, RngStream(3))
    latent = state.latent
    assert latent.tables is not None and latent.b is not None and latent.z is not None

    for cell, by_factor in enumerate(latent.tables):
        seated = sum(sum(occ) for occ in by_factor.values())
        assert seated == corpus.counts[cell]
    assert state.scores.theta_sum is not None and state.scores.theta_sum.shape == (3,)
    ell = tables_to_triples(latent.tables, 3)
    assert latent.ell_vjk is not None
    assert np.array_equal(ell.cell_totals(corpus.nnz), latent.ell_vjk.cell_totals(corpus.nnz))


def test_sparse_triples_marginals_and_remap() -> None:
    corpus = _corpus()
    # cells are ordered (j, v): cell 0 is (v=0, j=0), cell 1 is (v=1, j=0)
    triples = SparseTriples.from_keys(
        np.array([0, 0, 1, 0]), np.array([2, 0, 2, 2]), np.array([1, 2, 1, 1]), 3
    )
    assert triples.cell.tolist() == [0, 0, 1]
    assert triples.k.tolist() == [0, 2, 2]
    assert triples.count.tolist() == [2, 2, 1]
    assert triples.factor_totals(3).tolist() == [2, 0, 3]
    assert triples.word_factor(corpus, 3)[0].tolist() == [2, 0, 2]
    assert triples.doc_factor(corpus, 3)[0].tolist() == [2, 0, 3]

    remapped = triples.remap(np.array([1, -1, 0]))
    assert remapped.cell.tolist() == [0, 0, 1]
    assert remapped.k.tolist() == [0, 1, 0]
    assert remapped.count.tolist() == [2, 2, 1]


def test_relabel_and_truncate_keeps_active_factors() -> None:
    corpus = _corpus()
    state = init_state("nbfa", "cp", 30, Hyperparams(), corpus, RngStream(4))
    assert state.latent.ell_vjk is not None
    active = np.flatnonzero(state.latent.ell_vjk.factor_totals(30))
    kept_r = state.measure.r[active].copy()  # type: ignore[index]

    relabel_and_truncate(state, corpus, 5, RngStream(5))

    assert state.K == active.size + 5
    assert state.measure.K_active == active.size
    assert np.array_equal(state.measure.r[: active.size], kept_r)  # type: ignore[index]
    assert state.latent.ell_vjk.factor_totals(state.K)[active.size :].sum() == 0
    check_invariants(state, corpus)


def test_relabel_and_truncate_without_reserve_is_rejected() -> None:
    corpus = _corpus()
    state = init_state("nbfa", "cp", 4, Hyperparams(), corpus, RngStream(4))

    with pytest.raises(ConfigError, match="K_star"):
        relabel_and_truncate(state, corpus, 0, RngStream(5))


def test_check_invariants_detects_broken_simplex() -> None:
    corpus = _corpus()
    state = init_state("dcmlda", "cp", 4, Hyperparams(), corpus, RngStream(6))
    check_invariants(state, corpus)

    assert state.factors.phi is not None
    state.factors.phi[0, 0] += 0.5
    with pytest.raises(InvariantError):
        check_invariants(state, corpus)


def test_estimated_poisson_rate() -> None:
    corpus = _corpus()
    phi = np.full((4, 2), 0.25)
    theta = np.array([[2.0, 1.0, 4.0], [2.0, 3.0, 0.0]])
    p = np.array([0.5, 0.25, 0.1])
    draw = PosteriorDraw(phi, theta, p)

    assert estimated_poisson_rate("pfa", 0, 0, draw, corpus) == pytest.approx(1.0)
    # n_00 = 3 in training
    assert estimated_poisson_rate("nbfa", 0, 0, draw, corpus) == pytest.approx((3 + 1.0) * 0.5)
    # A covariate unseen in training keeps only the factor part
    assert estimated_poisson_rate("nbfa", 0, 1, draw, corpus) == pytest.approx(1.0 * 0.25)
    r_draw = PosteriorDraw(phi, np.array([1.0, 3.0]), p)
    assert estimated_poisson_rate("dcmlda", 1, 2, r_draw, corpus) == pytest.approx(0.1)


def test_sample_p_conditions_on_counts_and_mass() -> None:
    gen = np.random.default_rng(0)
    hyper = Hyperparams(a0=2.0, b0=3.0)
    draws = sample_p(np.full(50_000, 10), 4.0, hyper, gen)
    assert draws.mean() == pytest.approx(12.0 / 19.0, abs=0.01)


def test_eta_bookkeeping_with_unit_counts() -> None:
    # With every l_v.k in {0, 1} each CRT table count equals the count itself.
    word_factor = np.array([[1, 0], [0, 1], [1, 1], [0, 0]])
    hyper = Hyperparams(a0=2.0, b0=3.0)
    eta, aux = sample_eta(word_factor, 0.5, hyper, np.random.default_rng(1))

    assert np.array_equal(aux.t, word_factor)
    assert aux.q.shape == (2,)
    assert eta > 0


def test_eta_posterior_parameters(mocker: MockerFixture) -> None:
    word_factor = np.array([[1, 0], [0, 1], [1, 1], [0, 0]])
    hyper = Hyperparams(a0=2.0, b0=3.0)
    gamma = mocker.patch("nbfa.core.updates.gamma_array", return_value=np.float64(0.7))

    eta, aux = sample_eta(word_factor, 0.5, hyper, np.random.default_rng(2))

    shape, scale, _ = gamma.call_args.args
    assert eta == pytest.approx(0.7)
    assert shape == pytest.approx(2.0 + 4)
    assert scale == pytest.approx(1.0 / (3.0 - 4 * np.sum(np.log1p(-aux.q))))


def test_eta_without_active_factors_uses_prior() -> None:
    eta, aux = sample_eta(
        np.zeros((3, 2), dtype=np.int64), 0.5, Hyperparams(), np.random.default_rng(3)
    )
    assert eta > 0
    assert aux.q.size == 0


def test_update_global_measure_adaptive_keeps_inactive_weights() -> None:
    corpus = _corpus()
    state = init_state("nbfa", "cp", 4, Hyperparams(), corpus, RngStream(7))
    measure = state.measure
    before = measure.r.copy()  # type: ignore[union-attr]
    counts = np.array([3, 0, 1, 0])

    update_global_measure(measure, counts, 2.0, state.hyper, np.random.default_rng(4))

    assert measure.K_active == 2
    assert measure.r[1] == before[1] and measure.r[3] == before[3]  # type: ignore[index]
    assert measure.gamma0 > 0 and measure.c0 > 0


def test_variance_to_mean_closed_form() -> None:
    assert variance_to_mean(2.0, 0.5) == pytest.approx(2.5)
    assert variance_to_mean(1e9, 0.2) == pytest.approx(1.25)
    with pytest.raises(ParameterError):
        variance_to_mean(0.0, 0.5)
    with pytest.raises(ParameterError):
        variance_to_mean(1.0, 1.0)
