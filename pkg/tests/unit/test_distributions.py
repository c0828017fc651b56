import itertools
import math

import numpy as np
import pytest
from numpy.typing import NDArray
from scipy import special, stats

from nbfa.core.distributions import (
    RngStream,
    categorical,
    categorical_rows,
    clamp_probability,
    crt_array,
    crt_log_pmf,
    digamma,
    gamma_array,
    guard,
    log_gamma,
    logarithmic_array,
    nb_log_pmf,
    normalize_rows,
    poisson_logarithmic_log_pmf,
    sample_crp_partition_counts,
    sample_crt,
    sample_dirichlet,
    sample_gamma,
    sample_logarithmic,
    sample_multinomial,
    sample_sumlog,
    stirling_table,
    sumlog_log_pmf,
)
from nbfa.errors import DomainError, ParameterError


def test_stirling_numbers_match_known_values() -> None:
    table = stirling_table(6)
    # |s(4, 2)| = 11, |s(5, 3)| = 35, |s(6, 1)| = 5!
    assert math.exp(table.log_abs(4, 2)) == pytest.approx(11.0)
    assert math.exp(table.log_abs(5, 3)) == pytest.approx(35.0)
    assert math.exp(table.log_abs(6, 1)) == pytest.approx(120.0)
    assert table.log_abs(0, 0) == 0.0
    assert table.log_abs(3, 0) == -math.inf


def test_stirling_index_out_of_range() -> None:
    with pytest.raises(DomainError):
        stirling_table(4).log_abs(5, 1)


def test_crt_pmf_sums_to_one() -> None:
    table = stirling_table(7)
    total = sum(math.exp(crt_log_pmf(ell, 7, 1.3, table)) for ell in range(0, 8))
    assert total == pytest.approx(1.0, abs=1e-12)
    assert crt_log_pmf(0, 7, 1.3, table) == -math.inf


def test_crt_edge_cases() -> None:
    rng = RngStream(1)
    assert sample_crt(0, 2.0, rng) == 0
    assert sample_crt(1, 1e-8, rng) == 1

    with pytest.raises(ParameterError):
        sample_crt(-1, 1.0, rng)
    with pytest.raises(ParameterError):
        sample_crt(3, 0.0, rng)


def test_crt_array_bounds() -> None:
    gen = RngStream(2).generator
    n = np.array([[0, 1, 5], [40, 2, 9]])
    draws = crt_array(np.broadcast_to(n, (200, 2, 3)), 0.7, gen)
    assert draws.shape == (200, 2, 3)
    assert np.all(draws[:, 0, 0] == 0)
    assert np.all(draws[:, 0, 1] == 1)
    assert np.all((draws >= np.minimum(n, 1)) & (draws <= n))


def test_nb_crt_joint_equals_poisson_logarithmic() -> None:
    # NB(n; r, p) CRT(l; n, r) == PoisLog(n, l; r, p) for every 0 <= l <= n <= 8
    table = stirling_table(8)
    for r, p in [(0.1, 0.2), (1.0, 0.5), (3.7, 0.9)]:
        for n in range(0, 9):
            for ell in range(1 if n else 0, n + 1):
                lhs = float(nb_log_pmf(n, r, p)) + crt_log_pmf(ell, n, r, table)
                rhs = poisson_logarithmic_log_pmf(n, ell, r, p, table)
                assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10)


def _dirichlet_multinomial_log_pmf(counts: tuple[int, ...], r: np.ndarray) -> float:
    n = sum(counts)
    x = np.asarray(counts, dtype=np.float64)
    return float(
        special.gammaln(n + 1)
        - special.gammaln(x + 1).sum()
        + special.gammaln(r.sum())
        - special.gammaln(n + r.sum())
        + (special.gammaln(x + r) - special.gammaln(r)).sum()
    )


def _compositions(total: int, parts: int) -> list[tuple[int, ...]]:
    return [c for c in itertools.product(range(total + 1), repeat=parts) if sum(c) == total]


def test_crt_of_dirichlet_multinomial_equals_multinomial_of_crt() -> None:
    # Splitting n customers by DirMult(r) then seating each group with CRT(n_k, r_k)
    # gives the same table counts as CRT(n, sum r) split by Mult(r / sum r).
    r = np.array([0.4, 1.5, 2.2])
    table = stirling_table(6)
    for n in range(1, 7):
        via_groups: dict[tuple[int, ...], float] = {}
        for n_k in _compositions(n, 3):
            weight = math.exp(_dirichlet_multinomial_log_pmf(n_k, r))
            per_factor = [
                {ell: math.exp(crt_log_pmf(ell, m, float(rk), table)) for ell in range(m + 1)}
                for m, rk in zip(n_k, r, strict=True)
            ]
            for ells in itertools.product(*(d.keys() for d in per_factor)):
                prob = weight * math.prod(d[e] for d, e in zip(per_factor, ells, strict=True))
                via_groups[ells] = via_groups.get(ells, 0.0) + prob

        via_tables: dict[tuple[int, ...], float] = {}
        for ell in range(1, n + 1):
            p_ell = math.exp(crt_log_pmf(ell, n, float(r.sum()), table))
            for split in _compositions(ell, 3):
                via_tables[split] = p_ell * float(stats.multinomial.pmf(split, ell, r / r.sum()))

        for key in set(via_groups) | set(via_tables):
            assert via_groups.get(key, 0.0) == pytest.approx(via_tables.get(key, 0.0), abs=1e-12)


def test_sumlog_pmf_sums_to_one() -> None:
    table = stirling_table(120)
    for ell in (1, 3):
        total = sum(math.exp(sumlog_log_pmf(n, ell, 0.2, table)) for n in range(ell, 121))
        assert total == pytest.approx(1.0, abs=1e-9)
    assert sumlog_log_pmf(0, 0, 0.2, table) == 0.0
    assert sumlog_log_pmf(2, 3, 0.2, table) == -math.inf


def test_logarithmic_mean() -> None:
    gen = RngStream(3).generator
    for p in (0.3, 0.97):
        draws = logarithmic_array(p, 200_000, gen)
        expected = -p / ((1 - p) * math.log1p(-p))
        se = draws.std() / math.sqrt(draws.size)
        assert draws.min() >= 1
        assert abs(draws.mean() - expected) < 5 * se


def test_sumlog_and_logarithmic_domains() -> None:
    rng = RngStream(4)
    assert sample_sumlog(0, 0.5, rng) == 0
    assert sample_sumlog(4, 0.5, rng) >= 4
    assert sample_logarithmic(0.5, rng) >= 1

    with pytest.raises(ParameterError):
        sample_logarithmic(1.0, rng)
    with pytest.raises(ParameterError):
        sample_sumlog(-1, 0.5, rng)


def test_streams_are_reproducible_and_independent() -> None:
    a = RngStream(7, 3).derive(1).generator.random(5)
    b = RngStream(7, 3).derive(1).generator.random(5)
    c = RngStream(7, 3).derive(2).generator.random(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)

    with pytest.raises(ParameterError):
        RngStream(-1)


def test_stream_state_round_trip() -> None:
    rng = RngStream(11)
    rng.generator.random(10)
    saved = rng.get_state()
    expected = rng.generator.random(3)

    restored = RngStream(11)
    restored.set_state(saved)
    assert np.array_equal(restored.generator.random(3), expected)


def test_small_gamma_shapes_do_not_underflow() -> None:
    gen = RngStream(5).generator
    draws = gamma_array(np.full(10_000, 1e-3), 1.0, gen)
    assert np.all(draws > 0)
    assert np.all(np.isfinite(draws))


def test_sample_gamma_rejects_bad_parameters() -> None:
    with pytest.raises(ParameterError):
        sample_gamma(0.0, 1.0, RngStream(0))
    with pytest.raises(ParameterError):
        sample_gamma(1.0, math.inf, RngStream(0))


def test_dirichlet_and_multinomial() -> None:
    rng = RngStream(6)
    draw = sample_dirichlet([1e-4, 1e-4, 1e-4], rng)
    assert draw.sum() == pytest.approx(1.0)
    assert np.all(draw >= 0)

    assert sample_multinomial(10, [0.2, 0.3, 0.5], rng).sum() == 10
    with pytest.raises(ParameterError):
        sample_multinomial(10, [0.2, 0.2], rng)
    with pytest.raises(ParameterError):
        sample_dirichlet([], rng)


def test_crp_partition_sizes() -> None:
    sizes = sample_crp_partition_counts(25, 1.0, RngStream(8))
    assert sizes.sum() == 25
    assert np.all(sizes >= 1)
    assert sample_crp_partition_counts(0, 1.0, RngStream(8)).size == 0


def _chisquare_pvalue(draws: NDArray[np.int64], pmf: NDArray[np.float64], offset: int) -> float:
    """Goodness of fit of integer draws to pmf over offset, offset + 1, ...

    Values with expected count below 5, and anything past the pmf, pool into the last
    well-populated bin.
    """
    n = draws.size
    values = offset + np.flatnonzero(n * pmf >= 5)
    observed = np.array([np.count_nonzero(draws == v) for v in values], dtype=np.float64)
    expected = n * pmf[values - offset]
    observed[-1] += n - observed.sum()
    expected[-1] += n - expected.sum()
    return float(stats.chisquare(observed, expected).pvalue)


def test_dirichlet_marginal_law() -> None:
    rng = RngStream(30)
    draws = np.array([sample_dirichlet([2.0, 3.0, 5.0], rng) for _ in range(20_000)])

    assert stats.kstest(draws[:, 0], stats.beta(2.0, 8.0).cdf).pvalue > 1e-3
    assert stats.kstest(draws[:, 2], stats.beta(5.0, 5.0).cdf).pvalue > 1e-3


def test_multinomial_cell_frequency() -> None:
    rng = RngStream(31)
    draws = np.array([sample_multinomial(4, [0.5, 0.5], rng) for _ in range(40_000)])

    hit = np.mean(np.all(draws == [2, 2], axis=1))
    se = math.sqrt(6 / 16 * 10 / 16 / draws.shape[0])
    assert abs(hit - 6 / 16) < 4 * se


def test_logarithmic_probability_of_one() -> None:
    rng = RngStream(32)
    draws = np.array([sample_logarithmic(0.5, rng) for _ in range(40_000)])
    expected = 0.5 / math.log(2.0)

    se = math.sqrt(expected * (1 - expected) / draws.size)
    assert abs(np.mean(draws == 1) - expected) < 4 * se

    # P(u = 1) = p / -ln(1 - p) tends to one as p -> 0
    tiny = logarithmic_array(1e-6, 10_000, rng.generator)
    assert np.mean(tiny == 1) > 0.999


def test_sumlog_sampler_matches_stirling_pmf() -> None:
    ell, p = 3, 0.4
    table = stirling_table(250)
    rng = RngStream(33)
    draws = np.array([sample_sumlog(ell, p, rng) for _ in range(40_000)], dtype=np.int64)

    pmf = np.exp([sumlog_log_pmf(n, ell, p, table) for n in range(ell, 251)])

    assert _chisquare_pvalue(draws, pmf, ell) > 1e-3


def test_crp_table_count_matches_crt_pmf() -> None:
    n, r = 12, 1.5
    table = stirling_table(n)
    rng = RngStream(34)
    draws = np.array(
        [sample_crp_partition_counts(n, r, rng).size for _ in range(40_000)], dtype=np.int64
    )

    pmf = np.exp([crt_log_pmf(ell, n, r, table) for ell in range(1, n + 1)])

    assert _chisquare_pvalue(draws, pmf, 1) > 1e-3


def test_special_function_domains() -> None:
    assert digamma(1.0) == pytest.approx(-np.euler_gamma)
    assert log_gamma(5.0) == pytest.approx(math.log(24.0))
    with pytest.raises(DomainError):
        digamma(0.0)
    with pytest.raises(DomainError):
        log_gamma(-1.0)


def test_categorical_draws() -> None:
    weights = np.array([0.0, 2.0, 0.0])
    assert categorical(weights, 0.0) == 1
    assert categorical(weights, 0.999) == 1
    # No positive mass: uniform over the slots
    assert categorical(np.zeros(4), 0.6) == 2

    gen = RngStream(9).generator
    rows = categorical_rows(np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 0.0]]), gen)
    assert rows[0] == 2
    assert 0 <= rows[1] < 3


def test_normalize_rows_falls_back_to_uniform() -> None:
    out = normalize_rows(np.array([[1.0, 3.0], [0.0, 0.0]]))
    assert np.allclose(out, [[0.25, 0.75], [0.5, 0.5]])


def test_clamp_probability_counts_clamps() -> None:
    guard.reset()
    out = clamp_probability(np.array([0.0, 0.5, 1.0]))
    assert np.all((out > 0) & (out < 1))
    assert guard.p_clamps == 2
    guard.reset()
