import logging
import math
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Any

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import special

from nbfa.errors import DomainError, ParameterError

logger = logging.getLogger(__name__)

TINY = float(np.finfo(np.float64).tiny)
SHAPE_FLOOR = 1e-300
P_MIN = 1e-12
P_MAX = 1.0 - 1e-12

# Above this p the inversion table gets long; hand off to numpy's Kemp sampler.
LOGARITHMIC_INVERSION_MAX_P = 0.95

FloatArray = NDArray[np.float64]
IntArray = NDArray[np.int64]


@dataclass
class NumericGuard:
    shape_floors: int = 0
    p_clamps: int = 0

    def to_dict(self) -> dict[str, int]:
        return {"shape_floors": self.shape_floors, "p_clamps": self.p_clamps}

    def reset(self) -> None:
        self.shape_floors = 0
        self.p_clamps = 0


guard = NumericGuard()


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream keyed by (seed, stream_id).

    Derived streams extend the spawn key, so a per-document stream depends only on
    the seed and its position in the derivation tree, never on scheduling.
    """

    seed: int
    stream_id: int = 0
    parent: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not 0 <= self.seed < 2**64:
            raise ParameterError(f"Seed must be a 64-bit unsigned integer, got {self.seed}")
        if self.stream_id < 0:
            raise ParameterError(f"Stream id must be nonnegative, got {self.stream_id}")

    @property
    def spawn_key(self) -> tuple[int, ...]:
        return (*self.parent, self.stream_id)

    @cached_property
    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(self.seed, spawn_key=self.spawn_key)
        return np.random.Generator(np.random.PCG64(seq))

    def derive(self, stream_id: int) -> "RngStream":
        return RngStream(self.seed, stream_id, self.spawn_key)

    def get_state(self) -> dict[str, Any]:
        state: dict[str, Any] = self.generator.bit_generator.state
        return state

    def set_state(self, state: dict[str, Any]) -> None:
        self.generator.bit_generator.state = state


class StirlingTable:
    """log |s(n, l)| for 0 <= l <= n <= max_n, unsigned Stirling numbers of the first kind."""

    def __init__(self, max_n: int) -> None:
        if max_n < 0:
            raise ParameterError(f"max_n must be nonnegative, got {max_n}")
        self.max_n = max_n
        table = np.full((max_n + 1, max_n + 1), -np.inf)
        table[0, 0] = 0.0
        for n in range(max_n):
            row = table[n]
            nxt = table[n + 1]
            # |s(n+1, l)| = n |s(n, l)| + |s(n, l-1)|
            scaled = row + math.log(n) if n > 0 else np.full_like(row, -np.inf)
            nxt[0] = scaled[0]
            nxt[1:] = np.logaddexp(scaled[1:], row[:-1])
        table.flags.writeable = False
        self.entries = table

    def log_abs(self, n: int, ell: int) -> float:
        if not 0 <= ell <= n <= self.max_n:
            raise DomainError(f"Stirling index out of range: n={n}, l={ell}, max_n={self.max_n}")
        return float(self.entries[n, ell])


@lru_cache(maxsize=8)
def stirling_table(max_n: int) -> StirlingTable:
    return StirlingTable(max_n)


def _check_positive(name: str, value: ArrayLike) -> FloatArray:
    arr = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise ParameterError(f"{name} must be finite and positive, got {value!r}")
    return arr


def clamp_probability(p: ArrayLike) -> FloatArray:
    arr = np.asarray(p, dtype=np.float64)
    clamped = np.clip(arr, P_MIN, P_MAX)
    n_clamped = int(np.count_nonzero(clamped != arr))
    if n_clamped:
        guard.p_clamps += n_clamped
        logger.warning("Clamped %d probabilities into [%g, %g]", n_clamped, P_MIN, P_MAX)
    return clamped


def log_gamma_variates(shape: ArrayLike, gen: np.random.Generator) -> FloatArray:
    """log of Gamma(shape, 1) draws, boosting shape < 1 so small shapes never underflow."""
    a = np.asarray(shape, dtype=np.float64)
    floored = a < SHAPE_FLOOR
    if np.any(floored):
        guard.shape_floors += int(np.count_nonzero(floored))
        a = np.maximum(a, SHAPE_FLOOR)
    boosted = a < 1.0
    base = gen.standard_gamma(np.where(boosted, a + 1.0, a))
    logs = np.log(np.maximum(base, TINY))
    if np.any(boosted):
        # 1 - U lies in (0, 1], so its log is finite.
        u = 1.0 - gen.random(a.shape)
        logs = np.where(boosted, logs + np.log(u) / a, logs)
    return np.asarray(logs, dtype=np.float64)


def gamma_array(shape: ArrayLike, scale: ArrayLike, gen: np.random.Generator) -> FloatArray:
    """Vectorized Gamma(shape, scale) draws floored at the smallest positive double."""
    logs = log_gamma_variates(shape, gen)
    draws = np.exp(logs) * np.asarray(scale, dtype=np.float64)
    return np.asarray(np.maximum(draws, TINY), dtype=np.float64)


def sample_gamma(shape: float, scale: float, rng: RngStream) -> float:
    _check_positive("shape", shape)
    _check_positive("scale", scale)
    return float(gamma_array(shape, scale, rng.generator))


def beta_array(a: ArrayLike, b: ArrayLike, gen: np.random.Generator) -> FloatArray:
    la = log_gamma_variates(a, gen)
    lb = log_gamma_variates(np.broadcast_to(np.asarray(b, dtype=np.float64), la.shape), gen)
    # x = ga / (ga + gb) computed in log space
    return np.asarray(special.expit(la - lb), dtype=np.float64)


def crt_array(n: ArrayLike, r: ArrayLike, gen: np.random.Generator) -> IntArray:
    """Vectorized exact CRT draws: l = sum_i Bernoulli(r / (r + i)), i = 0..n-1."""
    counts = np.asarray(n, dtype=np.int64)
    flat = counts.ravel()
    rates = np.maximum(np.broadcast_to(np.asarray(r, dtype=np.float64), counts.shape).ravel(), TINY)
    total = int(flat.sum())
    if total == 0:
        return np.zeros(counts.shape, dtype=np.int64)
    owner = np.repeat(np.arange(flat.size), flat)
    starts = np.cumsum(flat) - flat
    offsets = np.arange(total) - np.repeat(starts, flat)
    owner_rates = rates[owner]
    hits = gen.random(total) < owner_rates / (owner_rates + offsets)
    tables = np.bincount(owner, weights=hits, minlength=flat.size)
    return tables.astype(np.int64).reshape(counts.shape)


def sample_crt(n: int, r: float, rng: RngStream) -> int:
    if n < 0:
        raise ParameterError(f"CRT customer count must be nonnegative, got {n}")
    _check_positive("r", r)
    if n == 0:
        return 0
    probs = r / (r + np.arange(n))
    return int(np.count_nonzero(rng.generator.random(n) < probs))


def crt_log_pmf(ell: int, n: int, r: float, table: StirlingTable) -> float:
    _check_positive("r", r)
    if not 0 <= ell <= n <= table.max_n:
        raise DomainError(f"CRT pmf undefined at l={ell}, n={n} (table max_n={table.max_n})")
    if n == 0:
        return 0.0
    return float(
        special.gammaln(r) + ell * math.log(r) - special.gammaln(n + r) + table.log_abs(n, ell)
    )


def _check_unit_interval(p: float) -> None:
    if not (math.isfinite(p) and 0.0 < p < 1.0):
        raise ParameterError(f"p must lie in the open interval (0, 1), got {p}")


def _logarithmic_cdf(p: float) -> FloatArray:
    log_norm = -math.log1p(-p)
    # Truncate once the tail mass is below double precision.
    max_u = max(1, math.ceil(math.log(1e-17) / math.log(p)) + 1)
    u = np.arange(1, max_u + 1, dtype=np.float64)
    pmf = np.exp(u * math.log(p) - np.log(u)) / log_norm
    return np.asarray(np.cumsum(pmf), dtype=np.float64)


def logarithmic_array(p: float, size: int, gen: np.random.Generator) -> IntArray:
    if size == 0:
        return np.zeros(0, dtype=np.int64)
    if p > LOGARITHMIC_INVERSION_MAX_P:
        return np.asarray(gen.logseries(p, size=size), dtype=np.int64)
    cdf = _logarithmic_cdf(p)
    idx = np.searchsorted(cdf, gen.random(size), side="right")
    return np.minimum(idx, cdf.size - 1).astype(np.int64) + 1


def sample_logarithmic(p: float, rng: RngStream) -> int:
    _check_unit_interval(p)
    return int(logarithmic_array(p, 1, rng.generator)[0])


def sample_sumlog(ell: int, p: float, rng: RngStream) -> int:
    if ell < 0:
        raise ParameterError(f"SumLog table count must be nonnegative, got {ell}")
    _check_unit_interval(p)
    if ell == 0:
        return 0
    return int(logarithmic_array(p, ell, rng.generator).sum())


def dirichlet_columns(concentrations: ArrayLike, gen: np.random.Generator) -> FloatArray:
    """One Dirichlet draw per column of a (V, K) concentration matrix."""
    logs = log_gamma_variates(concentrations, gen)
    return np.asarray(special.softmax(logs, axis=0), dtype=np.float64)


def sample_dirichlet(concentrations: ArrayLike, rng: RngStream) -> FloatArray:
    alpha = _check_positive("concentrations", concentrations)
    if alpha.ndim != 1 or alpha.size == 0:
        raise ParameterError("Dirichlet concentrations must be a nonempty vector")
    return dirichlet_columns(alpha, rng.generator)


def sample_multinomial(n: int, probs: ArrayLike, rng: RngStream) -> IntArray:
    if n < 0:
        raise ParameterError(f"Multinomial trial count must be nonnegative, got {n}")
    pvals = np.asarray(probs, dtype=np.float64)
    if np.any(pvals < 0) or abs(pvals.sum() - 1.0) > 1e-9:
        raise ParameterError("Multinomial probabilities must be nonnegative and sum to 1")
    return np.asarray(rng.generator.multinomial(n, pvals / pvals.sum()), dtype=np.int64)


def sample_crp_partition_counts(n: int, r: float, rng: RngStream) -> IntArray:
    if n < 0:
        raise ParameterError(f"CRP customer count must be nonnegative, got {n}")
    _check_positive("r", r)
    return crp_partition(n, r, rng.generator)


def crp_partition(n: int, r: float, gen: np.random.Generator) -> IntArray:
    sizes: list[int] = []
    u = gen.random(n)
    for i in range(n):
        x = u[i] * (i + r)
        if x < r or not sizes:
            sizes.append(1)
            continue
        x -= r
        for t, size in enumerate(sizes):
            if x < size:
                sizes[t] += 1
                break
            x -= size
        else:
            sizes[-1] += 1
    return np.asarray(sizes, dtype=np.int64)


def digamma(x: float) -> float:
    if not x > 0:
        raise DomainError(f"digamma is evaluated on positive reals only, got {x}")
    return float(special.digamma(x))


def log_gamma(x: float) -> float:
    if not x > 0:
        raise DomainError(f"log_gamma is evaluated on positive reals only, got {x}")
    return float(special.gammaln(x))


def nb_log_pmf(n: ArrayLike, r: ArrayLike, p: ArrayLike) -> FloatArray:
    n_arr = np.asarray(n, dtype=np.float64)
    r_arr = np.asarray(r, dtype=np.float64)
    p_arr = np.asarray(p, dtype=np.float64)
    return np.asarray(
        special.gammaln(n_arr + r_arr)
        - special.gammaln(r_arr)
        - special.gammaln(n_arr + 1)
        + n_arr * np.log(p_arr)
        + r_arr * np.log1p(-p_arr),
        dtype=np.float64,
    )


def sumlog_log_pmf(n: int, ell: int, p: float, table: StirlingTable) -> float:
    if ell == 0:
        return 0.0 if n == 0 else -math.inf
    if n < ell:
        return -math.inf
    return (
        n * math.log(p)
        + float(special.gammaln(ell + 1))
        + table.log_abs(n, ell)
        - float(special.gammaln(n + 1))
        - ell * math.log(-math.log1p(-p))
    )


def poisson_logarithmic_log_pmf(
    n: int, ell: int, r: float, p: float, table: StirlingTable
) -> float:
    """Joint pmf of the NB count and its CRT table count."""
    return (
        table.log_abs(n, ell)
        + ell * math.log(r)
        + n * math.log(p)
        + r * math.log1p(-p)
        - float(special.gammaln(n + 1))
    )


def categorical(weights: FloatArray, u: float) -> int:
    """Index drawn proportionally to nonnegative weights using a uniform u in [0, 1)."""
    cum = np.cumsum(weights)
    total = cum[-1]
    if not total > 0 or not math.isfinite(total):
        return min(int(u * weights.size), weights.size - 1)
    return min(int(np.searchsorted(cum, u * total, side="right")), weights.size - 1)


def categorical_rows(weights: FloatArray, gen: np.random.Generator) -> IntArray:
    """One categorical draw per row; rows without positive mass fall back to uniform."""
    cum = np.cumsum(weights, axis=1)
    total = cum[:, -1]
    u = gen.random(weights.shape[0])
    bad = ~(total > 0) | ~np.isfinite(total)
    if np.any(bad):
        cum[bad] = np.arange(1, weights.shape[1] + 1, dtype=np.float64)
        total = np.where(bad, float(weights.shape[1]), total)
    idx = (cum < (u * total)[:, None]).sum(axis=1)
    return np.minimum(idx, weights.shape[1] - 1).astype(np.int64)


def normalize_rows(weights: FloatArray) -> FloatArray:
    totals = weights.sum(axis=1, keepdims=True)
    bad = ~(totals[:, 0] > 0) | ~np.isfinite(totals[:, 0])
    out = np.divide(weights, totals, out=np.zeros_like(weights), where=~bad[:, None])
    if np.any(bad):
        out[bad] = 1.0 / weights.shape[1]
    return out
