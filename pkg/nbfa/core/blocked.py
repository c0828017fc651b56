import logging
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy import special

from nbfa.core.corpus import SparseCountMatrix
from nbfa.core.distributions import (
    RngStream,
    categorical,
    categorical_rows,
    crt_array,
    normalize_rows,
)
from nbfa.core.model import (
    FloatArray,
    ModelKind,
    ModelState,
    SamplerKind,
    SparseTriples,
    q_direct,
    q_nbfa,
    relabel_and_truncate,
)
from nbfa.core.sampler import Sampler
from nbfa.core.updates import (
    sample_c,
    sample_eta,
    sample_p,
    sample_phi,
    sample_theta,
    second_layer_tables,
    update_global_measure,
)

logger = logging.getLogger(__name__)

# Upper bound on cells x factors materialized at once by the table step.
CHUNK_ENTRIES = 1 << 20


class TruncatedSampler(Sampler):
    """Samplers that keep explicit factors Phi and scores (Theta, or r for DCMLDA)."""

    models: frozenset[ModelKind] = frozenset({"nbfa", "dcmlda"})

    def _scores_for(
        self, state: ModelState, cells: np.ndarray, corpus: SparseCountMatrix
    ) -> FloatArray:
        """Per-cell factor weights, cells x K: theta_.j for NBFA, r for DCMLDA."""
        if state.kind == "nbfa":
            assert state.scores.theta is not None
            return np.asarray(state.scores.theta[:, corpus.cell_j[cells]].T, dtype=np.float64)
        assert state.measure.r is not None
        return np.broadcast_to(state.measure.r, (cells.size, state.K))

    def cell_rates(self, state: ModelState, corpus: SparseCountMatrix) -> FloatArray:
        """sum_k phi_vk theta_kj for every stored cell."""
        phi = state.factors.phi
        assert phi is not None
        rates = np.empty(corpus.nnz)
        step = max(1, CHUNK_ENTRIES // max(state.K, 1))
        for lo in range(0, corpus.nnz, step):
            cells = np.arange(lo, min(lo + step, corpus.nnz))
            weights = phi[corpus.indices[cells]] * self._scores_for(state, cells, corpus)
            rates[cells] = weights.sum(axis=1)
        return rates

    def shared_updates(
        self, state: ModelState, corpus: SparseCountMatrix, rng: RngStream
    ) -> None:
        """p, c, hierarchy, eta, Phi, Theta and truncation, given fresh table counts."""
        gen = rng.generator
        hyper = state.hyper
        measure = state.measure
        scores = state.scores
        ell = state.latent.ell_vjk
        assert ell is not None and measure.r is not None
        K = state.K
        doc_factor = ell.doc_factor(corpus, K)
        word_factor = ell.word_factor(corpus, K)
        n_j = corpus.col_sums

        if state.kind == "nbfa":
            theta_sum = scores.theta_col_sums
            scores.p = sample_p(n_j, theta_sum, hyper, gen)
            scores.c = sample_c(measure.G_total, theta_sum, hyper, gen)
            ell_tilde = second_layer_tables(doc_factor, measure.r, gen)
            state.latent.ell_tilde_jk = ell_tilde
            q = q_nbfa(scores.p, scores.c)
            update_global_measure(measure, ell_tilde.sum(axis=0), q, hyper, gen)
        else:
            scores.p = sample_p(n_j, measure.G_total, hyper, gen)
            update_global_measure(measure, word_factor.sum(axis=0), q_direct(scores.p), hyper, gen)

        if hyper.sample_eta:
            state.eta, state.eta_aux = sample_eta(word_factor, state.eta, hyper, gen)
        state.factors.phi = sample_phi(word_factor, state.eta, gen)
        if state.kind == "nbfa":
            assert scores.c is not None
            scores.theta = sample_theta(measure.r, doc_factor, scores.p, scores.c, gen)
            scores.theta_sum = scores.theta.sum(axis=0)

        if measure.truncation == "adaptive":
            relabel_and_truncate(state, corpus, self.K_star, rng)

    def log_joint(self, state: ModelState, corpus: SparseCountMatrix) -> float:
        """NB likelihood of the observed counts given Phi, the scores and p."""
        rates = self.cell_rates(state, corpus)
        p = state.scores.p
        n = corpus.counts
        p_cell = p[corpus.cell_j]
        nonzero = np.sum(
            special.gammaln(n + rates) - special.gammaln(rates) - special.gammaln(n + 1)
            + n * np.log(p_cell)
        )
        if state.kind == "nbfa":
            mass = state.scores.theta_col_sums
        else:
            mass = np.full(corpus.J, state.measure.G_total)
        return float(nonzero + np.sum(mass * np.log1p(-p)))


class BlockedSampler(TruncatedSampler):
    """Token-level blocked Gibbs: resample every z_ji, then draw tables per (v, j, k)."""

    kind: SamplerKind = "blocked"

    def _resample_document(
        self, state: ModelState, corpus: SparseCountMatrix, rng: RngStream, j: int
    ) -> None:
        lo, hi = int(corpus.indptr[j]), int(corpus.indptr[j + 1])
        if lo == hi:
            return
        z = state.latent.z
        phi = state.factors.phi
        assert z is not None and phi is not None
        gen = rng.derive(j).generator
        K = state.K
        cells = np.arange(lo, hi)
        base = phi[corpus.indices[cells]] * self._scores_for(state, cells, corpus)
        counts = corpus.counts[lo:hi]
        ptr = corpus.token_ptr

        single = np.flatnonzero(counts == 1)
        if single.size:
            z[ptr[lo + single]] = categorical_rows(base[single], gen)
        for i in np.flatnonzero(counts > 1):
            t0, t1 = int(ptr[lo + i]), int(ptr[lo + i + 1])
            local = np.bincount(z[t0:t1], minlength=K).astype(np.float64)
            u = gen.random(t1 - t0)
            for t in range(t0, t1):
                local[z[t]] -= 1.0
                k = categorical(local + base[i], float(u[t - t0]))
                z[t] = k
                local[k] += 1.0

    def step(self, state: ModelState, corpus: SparseCountMatrix, rng: RngStream) -> int:
        self.check_state(state)
        latent = state.latent
        assert latent.z is not None and state.factors.phi is not None
        K = state.K
        doc_rng = rng.derive(state.iteration)

        if self.threads > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                list(
                    pool.map(
                        lambda j: self._resample_document(state, corpus, doc_rng, j),
                        range(corpus.J),
                    )
                )
        else:
            for j in range(corpus.J):
                self._resample_document(state, corpus, doc_rng, j)

        n_vjk = SparseTriples.from_assignments(corpus.token_cell, latent.z, K)
        rates = state.factors.phi[corpus.indices[n_vjk.cell], n_vjk.k]
        if state.kind == "nbfa":
            assert state.scores.theta is not None
            rates = rates * state.scores.theta[n_vjk.k, corpus.cell_j[n_vjk.cell]]
        else:
            assert state.measure.r is not None
            rates = rates * state.measure.r[n_vjk.k]
        ell = SparseTriples(n_vjk.cell, n_vjk.k, crt_array(n_vjk.count, rates, rng.generator))
        latent.n_vjk = n_vjk
        latent.ell_vjk = ell
        latent.ell_vj = ell.cell_totals(corpus.nnz)

        self.shared_updates(state, corpus, rng)
        return corpus.total * K


class CompoundPoissonSampler(TruncatedSampler):
    """Blocked Gibbs on the compound Poisson representation.

    Skips token assignments entirely: l_vj ~ CRT(n_vj, sum_k phi_vk theta_kj), then
    (l_vj1..l_vjK) ~ Mult(l_vj, phi_vk theta_kj / sum).
    """

    kind: SamplerKind = "cp"

    def step(self, state: ModelState, corpus: SparseCountMatrix, rng: RngStream) -> int:
        self.check_state(state)
        phi = state.factors.phi
        assert phi is not None
        gen = rng.generator
        K = state.K
        ell_vj = np.zeros(corpus.nnz, dtype=np.int64)
        cells_out: list[np.ndarray] = []
        k_out: list[np.ndarray] = []
        counts_out: list[np.ndarray] = []

        step = max(1, CHUNK_ENTRIES // max(K, 1))
        for lo in range(0, corpus.nnz, step):
            cells = np.arange(lo, min(lo + step, corpus.nnz))
            weights = phi[corpus.indices[cells]] * self._scores_for(state, cells, corpus)
            tables = crt_array(corpus.counts[cells], weights.sum(axis=1), gen)
            split = gen.multinomial(tables, normalize_rows(weights))
            ell_vj[cells] = tables
            rows, ks = np.nonzero(split)
            cells_out.append(cells[rows])
            k_out.append(ks.astype(np.int64))
            counts_out.append(split[rows, ks].astype(np.int64))

        latent = state.latent
        if cells_out:
            latent.ell_vjk = SparseTriples(
                np.concatenate(cells_out), np.concatenate(k_out), np.concatenate(counts_out)
            )
        else:
            latent.ell_vjk = SparseTriples.empty()
        latent.ell_vj = ell_vj

        self.shared_updates(state, corpus, rng)
        return corpus.total + int(ell_vj.sum())


def blocked_step(state: ModelState, corpus: SparseCountMatrix, rng: RngStream) -> ModelState:
    BlockedSampler(state.kind, state.measure.K_star).step(state, corpus, rng)
    return state


def cp_blocked_step(state: ModelState, corpus: SparseCountMatrix, rng: RngStream) -> ModelState:
    CompoundPoissonSampler(state.kind, state.measure.K_star).step(state, corpus, rng)
    return state

