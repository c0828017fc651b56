import logging
from dataclasses import dataclass
from typing import Literal

import numpy as np
from numpy.typing import NDArray

from nbfa.core.corpus import SparseCountMatrix
from nbfa.core.distributions import (
    RngStream,
    beta_array,
    clamp_probability,
    crp_partition,
    crt_array,
    dirichlet_columns,
    gamma_array,
)
from nbfa.errors import ConfigError, InvariantError, ParameterError

ModelKind = Literal["pfa", "dcmlda", "nbfa"]
SamplerKind = Literal["blocked", "collapsed", "cp"]
TruncationKind = Literal["adaptive", "fixed"]

MODEL_KINDS: tuple[ModelKind, ...] = ("pfa", "dcmlda", "nbfa")
SAMPLER_KINDS: tuple[SamplerKind, ...] = ("blocked", "collapsed", "cp")

# Which samplers exist for which model.
SUPPORTED: dict[SamplerKind, frozenset[ModelKind]] = {
    "blocked": frozenset({"nbfa", "dcmlda"}),
    "cp": frozenset({"nbfa", "dcmlda"}),
    "collapsed": frozenset({"nbfa", "dcmlda", "pfa"}),
}

logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]
IntArray = NDArray[np.int64]


@dataclass(frozen=True)
class Hyperparams:
    a0: float = 0.01
    b0: float = 0.01
    e0: float = 1.0
    f0: float = 1.0
    eta: float = 0.05
    sample_eta: bool = False

    def __post_init__(self) -> None:
        for name in ("a0", "b0", "e0", "f0", "eta"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ParameterError(f"Hyperparameter {name} must be positive, got {value}")


@dataclass(eq=False)
class SparseTriples:
    """(cell, k, count) triples with count > 0, sorted by (cell, k)."""

    cell: IntArray
    k: IntArray
    count: IntArray

    @classmethod
    def empty(cls) -> "SparseTriples":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), z.copy())

    @classmethod
    def from_keys(cls, cell: IntArray, k: IntArray, count: IntArray, K: int) -> "SparseTriples":
        keep = count > 0
        keys = cell[keep] * max(K, 1) + k[keep]
        uniq, inverse = np.unique(keys, return_inverse=True)
        summed = np.bincount(inverse, weights=count[keep], minlength=uniq.size).astype(np.int64)
        width = max(K, 1)
        return cls(uniq // width, uniq % width, summed)

    @classmethod
    def from_assignments(cls, token_cell: IntArray, z: IntArray, K: int) -> "SparseTriples":
        assigned = z >= 0
        return cls.from_keys(
            token_cell[assigned], z[assigned], np.ones(int(assigned.sum()), dtype=np.int64), K
        )

    @classmethod
    def from_dense(cls, counts: IntArray) -> "SparseTriples":
        cell, k = np.nonzero(counts)
        return cls(cell.astype(np.int64), k.astype(np.int64), counts[cell, k].astype(np.int64))

    @property
    def size(self) -> int:
        return int(self.count.size)

    def copy(self) -> "SparseTriples":
        return SparseTriples(self.cell.copy(), self.k.copy(), self.count.copy())

    def cell_totals(self, nnz: int) -> IntArray:
        return np.bincount(self.cell, weights=self.count, minlength=nnz).astype(np.int64)

    def factor_totals(self, K: int) -> IntArray:
        return np.bincount(self.k, weights=self.count, minlength=K).astype(np.int64)

    def word_factor(self, corpus: SparseCountMatrix, K: int) -> IntArray:
        out = np.zeros((corpus.V, K), dtype=np.int64)
        np.add.at(out, (corpus.indices[self.cell], self.k), self.count)
        return out

    def doc_factor(self, corpus: SparseCountMatrix, K: int) -> IntArray:
        out = np.zeros((corpus.J, K), dtype=np.int64)
        np.add.at(out, (corpus.cell_j[self.cell], self.k), self.count)
        return out

    def remap(self, mapping: IntArray) -> "SparseTriples":
        """Relabel factors by mapping[old] (dropping entries mapped to -1)."""
        new_k = mapping[self.k]
        keep = new_k >= 0
        cell, k, count = self.cell[keep], new_k[keep], self.count[keep]
        order = np.lexsort((k, cell))
        return SparseTriples(cell[order], k[order], count[order])


@dataclass(eq=False)
class LatentCountState:
    z: IntArray | None = None
    b: IntArray | None = None
    n_vjk: SparseTriples | None = None
    ell_vjk: SparseTriples | None = None
    ell_vj: IntArray | None = None
    ell_tilde_jk: IntArray | None = None
    # Collapsed samplers: per cell, factor -> table occupancies (b indexes into the list).
    tables: list[dict[int, list[int]]] | None = None


@dataclass(eq=False)
class GlobalMeasureState:
    r: FloatArray | None
    r_star: float
    gamma0: float
    c0: float
    K_active: int
    K_star: int
    truncation: TruncationKind = "adaptive"

    @property
    def G_total(self) -> float:
        active = float(self.r.sum()) if self.r is not None else 0.0
        return active + self.r_star


@dataclass(eq=False)
class FactorState:
    phi: FloatArray | None


@dataclass(eq=False)
class SampleState:
    theta: FloatArray | None
    theta_sum: FloatArray | None
    p: FloatArray
    c: FloatArray | None

    @property
    def p_tilde(self) -> FloatArray:
        if self.c is None:
            raise ConfigError("p_tilde requires per-sample scales c_j")
        neg_log = -np.log1p(-self.p)
        return np.asarray(neg_log / (self.c + neg_log), dtype=np.float64)

    @property
    def theta_col_sums(self) -> FloatArray:
        if self.theta is None:
            if self.theta_sum is None:
                raise ConfigError("This state carries no sample scores")
            return self.theta_sum
        return np.asarray(self.theta.sum(axis=0), dtype=np.float64)


@dataclass(eq=False)
class EtaAuxState:
    q: FloatArray
    t: IntArray


@dataclass(eq=False)
class ModelState:
    kind: ModelKind
    sampler: SamplerKind
    hyper: Hyperparams
    eta: float
    measure: GlobalMeasureState
    factors: FactorState
    scores: SampleState
    latent: LatentCountState
    eta_aux: EtaAuxState | None = None
    iteration: int = 0

    @property
    def K(self) -> int:
        if self.measure.r is not None:
            return int(self.measure.r.size)
        if self.factors.phi is not None:
            return int(self.factors.phi.shape[1])
        counts = self.latent.ell_vjk
        return int(counts.k.max()) + 1 if counts is not None and counts.size else 0

    def p_tilde_tilde(self) -> float:
        if self.scores.c is None:
            raise ConfigError("p_tilde_tilde is defined for NBFA states only")
        q = q_nbfa(self.scores.p, self.scores.c)
        return q / (self.measure.c0 + q)


@dataclass(eq=False)
class Marginals:
    """Latent count marginals: table counts for NBFA and DCMLDA, token counts for PFA."""

    word_factor: IntArray
    doc_factor: IntArray
    factor_total: IntArray


@dataclass(eq=False)
class PosteriorDraw:
    phi: FloatArray
    # K x J scores for PFA and NBFA, a length-K weight vector for DCMLDA.
    scores: FloatArray
    p: FloatArray


def factor_counts(state: ModelState) -> SparseTriples:
    triples = state.latent.n_vjk if state.kind == "pfa" else state.latent.ell_vjk
    if triples is None:
        raise InvariantError(f"{state.kind} state has no latent counts")
    return triples


def latent_marginals(state: ModelState, corpus: SparseCountMatrix) -> Marginals:
    triples = factor_counts(state)
    K = state.K
    return Marginals(
        triples.word_factor(corpus, K),
        triples.doc_factor(corpus, K),
        triples.factor_totals(K),
    )


def q_nbfa(p: FloatArray, c: FloatArray) -> float:
    """-sum_j ln(1 - p_tilde_j)."""
    return float(np.sum(np.log1p(-np.log1p(-p) / c)))


def q_direct(p: FloatArray) -> float:
    """-sum_j ln(1 - p_j)."""
    return float(-np.sum(np.log1p(-p)))


def global_rate(state: ModelState) -> float:
    if state.kind == "nbfa":
        assert state.scores.c is not None
        return q_nbfa(state.scores.p, state.scores.c)
    return q_direct(state.scores.p)


def variance_to_mean(c: float, p: float) -> float:
    """Prior variance-to-mean ratio of n_jk for theta_kj ~ Gamma(r_k, 1/c), n ~ NB(theta, p).

    Does not depend on r_k: 1/(1 - p) + p/(c(1 - p)).
    """
    if not (c > 0 and 0.0 < p < 1.0):
        raise ParameterError(f"variance_to_mean needs c > 0 and 0 < p < 1, got c={c}, p={p}")
    return 1.0 / (1.0 - p) + p / (c * (1.0 - p))


def _seat_tables(
    corpus: SparseCountMatrix, z: IntArray, gen: np.random.Generator
) -> tuple[IntArray, list[dict[int, list[int]]]]:
    b = np.full(z.size, -1, dtype=np.int64)
    tables: list[dict[int, list[int]]] = [{} for _ in range(corpus.nnz)]
    ptr = corpus.token_ptr
    for cell in range(corpus.nnz):
        lo, hi = int(ptr[cell]), int(ptr[cell + 1])
        cell_z = z[lo:hi]
        for k in np.unique(cell_z[cell_z >= 0]):
            members = lo + np.flatnonzero(cell_z == k)
            sizes = crp_partition(members.size, 1.0, gen)
            b[members] = np.repeat(np.arange(sizes.size), sizes)
            tables[cell][int(k)] = [int(s) for s in sizes]
    return b, tables


def init_state(
    kind: ModelKind,
    sampler: SamplerKind,
    K_init: int,
    hyper: Hyperparams,
    corpus: SparseCountMatrix,
    rng: RngStream,
    K_star: int = 20,
    truncation: TruncationKind = "adaptive",
) -> ModelState:
    """Draw an initial state from the priors with uniformly random token assignments."""
    if kind not in SUPPORTED.get(sampler, frozenset()):
        raise ConfigError(f"The {sampler} sampler does not support the {kind} model")
    if K_init < 0:
        raise ConfigError(f"K_init must be nonnegative, got {K_init}")
    if K_init == 0 and sampler != "collapsed":
        raise ConfigError("K_init=0 is only valid for the collapsed sampler")
    if truncation == "fixed" and (K_init == 0 or sampler == "collapsed"):
        raise ConfigError(f"Fixed truncation is not available for {kind}/{sampler} at K={K_init}")

    gen = rng.generator
    J = corpus.J
    V = corpus.V
    gamma0 = float(gamma_array(hyper.a0, 1.0 / hyper.b0, gen))
    c0 = float(gamma_array(hyper.e0, 1.0 / hyper.f0, gen))
    p = clamp_probability(beta_array(np.full(J, hyper.a0), hyper.b0, gen))
    c = gamma_array(np.full(J, hyper.e0), 1.0 / hyper.f0, gen) if kind == "nbfa" else None

    r = gamma_array(np.full(K_init, gamma0 / max(K_init, 1)), 1.0 / c0, gen)
    collapsed = sampler == "collapsed"
    r_star = float(gamma_array(gamma0, 1.0 / c0, gen)) if collapsed else 0.0

    z = (
        gen.integers(0, K_init, size=corpus.total).astype(np.int64)
        if K_init
        else np.full(corpus.total, -1, dtype=np.int64)
    )
    latent = LatentCountState()
    phi: FloatArray | None = None
    theta: FloatArray | None = None
    theta_sum: FloatArray | None = None

    if collapsed:
        if kind == "nbfa":
            assert c is not None
            theta_sum = gamma_array(np.full(J, r.sum() + r_star), 1.0 / c, gen)
        latent.z = z
        latent.n_vjk = SparseTriples.from_assignments(corpus.token_cell, z, K_init)
        if kind != "pfa":
            latent.b, latent.tables = _seat_tables(corpus, z, gen)
            latent.ell_vjk = tables_to_triples(latent.tables, K_init)
    else:
        phi = dirichlet_columns(np.full((V, K_init), hyper.eta), gen)
        if kind == "nbfa":
            assert c is not None
            theta = gamma_array(np.repeat(r[:, None], J, axis=1), 1.0 / c[None, :], gen)
            theta_sum = theta.sum(axis=0)
        n_vjk = SparseTriples.from_assignments(corpus.token_cell, z, K_init)
        weights = phi[corpus.indices[n_vjk.cell], n_vjk.k] * (
            theta[n_vjk.k, corpus.cell_j[n_vjk.cell]] if theta is not None else r[n_vjk.k]
        )
        ell = SparseTriples(n_vjk.cell, n_vjk.k, crt_array(n_vjk.count, weights, gen))
        latent.ell_vjk = ell
        latent.ell_vj = ell.cell_totals(corpus.nnz)
        if sampler == "blocked":
            latent.z = z
            latent.n_vjk = n_vjk

    if collapsed and kind == "dcmlda":
        r_vec: FloatArray | None = None
    else:
        r_vec = r
    counts = latent.n_vjk if kind == "pfa" else latent.ell_vjk
    assert counts is not None
    K_active = int(np.count_nonzero(counts.factor_totals(K_init)))

    state = ModelState(
        kind=kind,
        sampler=sampler,
        hyper=hyper,
        eta=hyper.eta,
        measure=GlobalMeasureState(r_vec, r_star, gamma0, c0, K_active, K_star, truncation),
        factors=FactorState(phi),
        scores=SampleState(theta, theta_sum, p, c),
        latent=latent,
    )
    logger.info(
        "Initialized %s/%s state: K=%d, K_active=%d, J=%d, V=%d",
        kind,
        sampler,
        K_init,
        K_active,
        J,
        V,
    )
    return state


def tables_to_triples(tables: list[dict[int, list[int]]], K: int) -> SparseTriples:
    cells: list[int] = []
    ks: list[int] = []
    counts: list[int] = []
    for cell, by_factor in enumerate(tables):
        for k, occupancies in by_factor.items():
            cells.append(cell)
            ks.append(k)
            counts.append(len(occupancies))
    return SparseTriples.from_keys(
        np.asarray(cells, dtype=np.int64),
        np.asarray(ks, dtype=np.int64),
        np.asarray(counts, dtype=np.int64),
        K,
    )


def relabel_and_truncate(
    state: ModelState, corpus: SparseCountMatrix, K_star: int, rng: RngStream
) -> ModelState:
    """Keep factors with nonzero latent count, relabel them 0..K+-1, append K_star fresh atoms."""
    if state.factors.phi is None or state.measure.r is None:
        raise ConfigError("relabel_and_truncate applies to blocked representations only")
    if K_star < 1:
        raise ConfigError(f"Adaptive truncation needs K_star >= 1, got {K_star}")
    gen = rng.generator
    triples = factor_counts(state)
    K = state.K
    keep = triples.factor_totals(K) > 0
    K_active = int(keep.sum())
    mapping = np.where(keep, np.cumsum(keep) - 1, -1).astype(np.int64)

    latent = state.latent
    latent.ell_vjk = latent.ell_vjk.remap(mapping) if latent.ell_vjk is not None else None
    if latent.n_vjk is not None:
        latent.n_vjk = latent.n_vjk.remap(mapping)
    if latent.z is not None:
        latent.z = mapping[latent.z]
    if latent.ell_tilde_jk is not None:
        latent.ell_tilde_jk = latent.ell_tilde_jk[:, keep]

    q = global_rate(state)
    measure = state.measure
    new_r = gamma_array(np.full(K_star, measure.gamma0 / K_star), 1.0 / (measure.c0 + q), gen)
    new_phi = dirichlet_columns(np.full((corpus.V, K_star), state.eta), gen)
    measure.r = np.concatenate([measure.r[keep], new_r])
    measure.K_active = K_active
    measure.K_star = K_star
    state.factors.phi = np.concatenate([state.factors.phi[:, keep], new_phi], axis=1)

    scores = state.scores
    if scores.theta is not None:
        assert scores.c is not None
        rate = scores.c - np.log1p(-scores.p)
        new_theta = gamma_array(
            np.repeat(new_r[:, None], corpus.J, axis=1), 1.0 / rate[None, :], gen
        )
        scores.theta = np.concatenate([scores.theta[keep], new_theta], axis=0)
        scores.theta_sum = scores.theta.sum(axis=0)
    return state


def estimated_poisson_rate(
    kind: ModelKind, v: int, j: int, draw: PosteriorDraw, train: SparseCountMatrix
) -> float:
    """Poisson rate of n_vj under one posterior draw."""
    if kind == "pfa":
        return float(draw.phi[v] @ draw.scores[:, j])
    n_vj = int(train.lookup(np.array([v]), np.array([j]))[0])
    if kind == "dcmlda":
        return float((n_vj + draw.phi[v] @ draw.scores) * draw.p[j])
    if kind == "nbfa":
        return float((n_vj + draw.phi[v] @ draw.scores[:, j]) * draw.p[j])
    raise ConfigError(f"Unknown model kind: {kind}")


def check_invariants(state: ModelState, corpus: SparseCountMatrix) -> None:
    latent = state.latent
    counts = corpus.counts
    if latent.n_vjk is not None and latent.z is not None and np.all(latent.z >= 0):
        if not np.array_equal(latent.n_vjk.cell_totals(corpus.nnz), counts):
            raise InvariantError("Token conservation violated: sum_k n_vjk != n_vj")
    if latent.ell_vjk is not None and state.kind != "pfa" and state.sampler != "collapsed":
        ell_vj = latent.ell_vjk.cell_totals(corpus.nnz)
        if latent.ell_vj is not None and not np.array_equal(ell_vj, latent.ell_vj):
            raise InvariantError("sum_k l_vjk != l_vj")
        if np.any(ell_vj < 1) or np.any(ell_vj > counts):
            raise InvariantError("Table counts must satisfy 1 <= l_vj <= n_vj")
        if np.any(ell_vj[counts == 1] != 1):
            raise InvariantError("l_vj must equal n_vj when n_vj == 1")
    phi = state.factors.phi
    if phi is not None:
        if np.any(phi < 0) or not np.allclose(phi.sum(axis=0), 1.0, atol=1e-9):
            raise InvariantError("Factor loadings left the simplex")
    scores = state.scores
    if np.any(scores.p <= 0) or np.any(scores.p >= 1):
        raise InvariantError("p_j left (0, 1)")
    if scores.theta is not None:
        if np.any(scores.theta < 0):
            raise InvariantError("Negative factor score")
        if scores.theta_sum is not None and not np.allclose(
            scores.theta.sum(axis=0), scores.theta_sum, rtol=1e-9
        ):
            raise InvariantError("theta_sum out of sync with theta")
    triples = factor_counts(state)
    active = int(np.count_nonzero(triples.factor_totals(state.K)))
    if state.measure.truncation == "adaptive" and active != state.measure.K_active:
        raise InvariantError(f"K_active={state.measure.K_active} but {active} factors are used")

