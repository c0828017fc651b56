import logging
from dataclasses import dataclass

import numpy as np
from scipy import special

from nbfa.core.corpus import SparseCountMatrix
from nbfa.core.distributions import RngStream, beta_array, categorical, gamma_array
from nbfa.core.model import (
    FloatArray,
    IntArray,
    ModelKind,
    ModelState,
    SamplerKind,
    SparseTriples,
    factor_counts,
    q_direct,
    q_nbfa,
    tables_to_triples,
)
from nbfa.core.sampler import Sampler
from nbfa.core.updates import (
    sample_c,
    sample_eta,
    sample_p,
    second_layer_tables,
    update_global_measure,
)
from nbfa.errors import ConfigError, InvariantError

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class CountWorkspace:
    """Mutable V x K, J x K and K count marginals with room for new factors."""

    word_factor: IntArray
    doc_factor: IntArray
    factor_total: IntArray
    r: FloatArray
    K: int

    @classmethod
    def from_triples(
        cls, triples: SparseTriples, corpus: SparseCountMatrix, K: int, r: FloatArray | None
    ) -> "CountWorkspace":
        capacity = max(8, 2 * K)
        word = np.zeros((corpus.V, capacity), dtype=np.int64)
        doc = np.zeros((corpus.J, capacity), dtype=np.int64)
        word[:, :K] = triples.word_factor(corpus, K)
        doc[:, :K] = triples.doc_factor(corpus, K)
        total = word.sum(axis=0)
        weights = np.zeros(capacity)
        if r is not None:
            weights[:K] = r
        return cls(word, doc, total, weights, K)

    def new_slot(self, r_value: float) -> int:
        if self.K == self.factor_total.size:
            grow = self.K
            self.word_factor = np.pad(self.word_factor, ((0, 0), (0, grow)))
            self.doc_factor = np.pad(self.doc_factor, ((0, 0), (0, grow)))
            self.factor_total = np.pad(self.factor_total, (0, grow))
            self.r = np.pad(self.r, (0, grow))
        k = self.K
        self.r[k] = r_value
        self.K += 1
        return k

    def add(self, v: int, j: int, k: int) -> None:
        self.word_factor[v, k] += 1
        self.doc_factor[j, k] += 1
        self.factor_total[k] += 1

    def remove(self, v: int, j: int, k: int) -> None:
        self.word_factor[v, k] -= 1
        self.doc_factor[j, k] -= 1
        self.factor_total[k] -= 1

    def compact(self) -> tuple[IntArray, FloatArray]:
        """Drop empty slots; returns the old -> new factor mapping and the dropped weights."""
        used = self.factor_total[: self.K] > 0
        mapping = np.where(used, np.cumsum(used) - 1, -1).astype(np.int64)
        dropped = self.r[: self.K][~used].copy()
        keep = np.flatnonzero(used)
        self.word_factor = self.word_factor[:, keep]
        self.doc_factor = self.doc_factor[:, keep]
        self.factor_total = self.factor_total[keep]
        self.r = self.r[keep]
        self.K = keep.size
        return mapping, dropped


class CollapsedSampler(Sampler):
    kind: SamplerKind = "collapsed"

    def _workspace(self, state: ModelState, corpus: SparseCountMatrix) -> CountWorkspace:
        r = state.measure.r
        K = state.K
        return CountWorkspace.from_triples(factor_counts(state), corpus, K, r)

    def _stick_break(self, state: ModelState, gen: np.random.Generator) -> float:
        """Split a new atom off the residual mass: r_new = beta r*, r* <- (1 - beta) r*."""
        beta = float(beta_array(1.0, state.measure.gamma0, gen))
        r_new = beta * state.measure.r_star
        state.measure.r_star *= 1.0 - beta
        return r_new

    def _finish_sweep(
        self, state: ModelState, corpus: SparseCountMatrix, ws: CountWorkspace
    ) -> None:
        mapping, dropped = ws.compact()
        latent = state.latent
        assert latent.z is not None
        if state.measure.r is not None:
            # Weights of emptied factors return to the residual mass.
            state.measure.r_star += float(dropped.sum())
            state.measure.r = ws.r[: ws.K].copy()
        assigned = latent.z >= 0
        latent.z[assigned] = mapping[latent.z[assigned]]
        if latent.tables is not None:
            latent.tables = [
                {int(mapping[k]): occ for k, occ in by_factor.items()}
                for by_factor in latent.tables
            ]
            latent.ell_vjk = tables_to_triples(latent.tables, ws.K)
        latent.n_vjk = SparseTriples.from_assignments(corpus.token_cell, latent.z, ws.K)
        state.measure.K_active = ws.K
        if np.any(latent.z < 0):
            raise InvariantError("Collapsed sweep left unassigned tokens")

    def _word_log_likelihood(self, ws: CountWorkspace, eta: float) -> float:
        V = ws.word_factor.shape[0]
        wf = ws.word_factor[:, : ws.K]
        ft = ws.factor_total[: ws.K]
        return float(
            ws.K * special.gammaln(V * eta)
            - special.gammaln(ft + V * eta).sum()
            + (special.gammaln(wf + eta) - special.gammaln(eta)).sum()
        )


class TableCollapsedSampler(CollapsedSampler):
    """Joint (z, b) resampling over tables for the NB-based models (NBFA, DCMLDA)."""

    def denominators(self, state: ModelState) -> FloatArray:
        """Per-sample rate denominators of the table weights."""
        raise NotImplementedError

    def _new_table_weights(
        self, state: ModelState, ws: CountWorkspace, v: int, j: int, denom: FloatArray
    ) -> FloatArray:
        raise NotImplementedError

    def _new_factor_weight(self, state: ModelState, j: int, V: int, denom: FloatArray) -> float:
        raise NotImplementedError

    def _open_factor(self, state: ModelState, ws: CountWorkspace, gen: np.random.Generator) -> int:
        raise NotImplementedError

    def remove_token(
        self, state: ModelState, corpus: SparseCountMatrix, ws: CountWorkspace, token: int
    ) -> None:
        latent = state.latent
        z, b, tables = latent.z, latent.b, latent.tables
        assert z is not None and b is not None and tables is not None
        k = int(z[token])
        if k < 0:
            return
        cell = int(corpus.token_cell[token])
        t = int(b[token])
        by_factor = tables[cell]
        occupancies = by_factor[k]
        occupancies[t] -= 1
        if occupancies[t] == 0:
            ws.remove(int(corpus.indices[cell]), int(corpus.cell_j[cell]), k)
            last = len(occupancies) - 1
            if t != last:
                # Keep table indices dense: the last table takes over slot t.
                occupancies[t] = occupancies[last]
                lo, hi = int(corpus.token_ptr[cell]), int(corpus.token_ptr[cell + 1])
                cell_b = b[lo:hi]
                cell_b[(z[lo:hi] == k) & (cell_b == last)] = t
            occupancies.pop()
            if not occupancies:
                del by_factor[k]
        z[token] = -1
        b[token] = -1

    def add_token(
        self,
        state: ModelState,
        corpus: SparseCountMatrix,
        ws: CountWorkspace,
        token: int,
        k: int,
        t: int | None,
    ) -> None:
        """Seat a token at table t of factor k, or at a new table when t is None."""
        latent = state.latent
        z, b, tables = latent.z, latent.b, latent.tables
        assert z is not None and b is not None and tables is not None
        cell = int(corpus.token_cell[token])
        occupancies = tables[cell].setdefault(k, [])
        if t is None:
            occupancies.append(1)
            t = len(occupancies) - 1
            ws.add(int(corpus.indices[cell]), int(corpus.cell_j[cell]), k)
        else:
            occupancies[t] += 1
        z[token] = k
        b[token] = t

    def seat_weights(
        self,
        state: ModelState,
        corpus: SparseCountMatrix,
        ws: CountWorkspace,
        cell: int,
        denom: FloatArray,
    ) -> tuple[list[tuple[int, int]], FloatArray]:
        """Occupied (factor, table) seats of a cell and the unnormalized weights of
        joining each, then a new table at every factor, then a new factor.
        """
        tables = state.latent.tables
        assert tables is not None
        v = int(corpus.indices[cell])
        j = int(corpus.cell_j[cell])
        by_factor = tables[cell]
        seats = [(k, t) for k, occ in by_factor.items() for t in range(len(occ))]
        existing = np.array([by_factor[k][t] for k, t in seats], dtype=np.float64)
        weights = np.concatenate(
            [
                existing,
                self._new_table_weights(state, ws, v, j, denom),
                [self._new_factor_weight(state, j, corpus.V, denom)],
            ]
        )
        return seats, weights

    def sweep(
        self, state: ModelState, corpus: SparseCountMatrix, ws: CountWorkspace, rng: RngStream
    ) -> int:
        gen = rng.generator
        denom = self.denominators(state)
        ptr = corpus.token_ptr
        u = gen.random(corpus.total)
        ops = 0
        for cell in range(corpus.nnz):
            for token in range(int(ptr[cell]), int(ptr[cell + 1])):
                self.remove_token(state, corpus, ws, token)
                seats, weights = self.seat_weights(state, corpus, ws, cell, denom)
                ops += weights.size
                idx = categorical(weights, float(u[token]))
                if idx < len(seats):
                    k, t = seats[idx]
                    self.add_token(state, corpus, ws, token, k, t)
                elif idx < len(seats) + ws.K:
                    self.add_token(state, corpus, ws, token, idx - len(seats), None)
                else:
                    k = self._open_factor(state, ws, gen)
                    self.add_token(state, corpus, ws, token, k, None)
        return ops


class CollapsedNBFASampler(TableCollapsedSampler):
    """Collapsed Gibbs for hGNBP-NBFA: Phi and Theta integrated out, theta_.j kept."""

    models: frozenset[ModelKind] = frozenset({"nbfa"})

    def denominators(self, state: ModelState) -> FloatArray:
        assert state.scores.c is not None
        return np.asarray(state.scores.c - np.log1p(-state.scores.p), dtype=np.float64)

    def _new_table_weights(
        self, state: ModelState, ws: CountWorkspace, v: int, j: int, denom: FloatArray
    ) -> FloatArray:
        K = ws.K
        V_eta = ws.word_factor.shape[0] * state.eta
        word = (ws.word_factor[v, :K] + state.eta) / (ws.factor_total[:K] + V_eta)
        return np.asarray(word * (ws.r[:K] + ws.doc_factor[j, :K]) / denom[j], dtype=np.float64)

    def _new_factor_weight(self, state: ModelState, j: int, V: int, denom: FloatArray) -> float:
        return float(state.measure.r_star / (V * denom[j]))

    def _open_factor(self, state: ModelState, ws: CountWorkspace, gen: np.random.Generator) -> int:
        return ws.new_slot(self._stick_break(state, gen))

    def _sample_theta_sum(
        self, state: ModelState, ws: CountWorkspace, gen: np.random.Generator
    ) -> None:
        scores = state.scores
        tables_per_doc = ws.doc_factor[:, : ws.K].sum(axis=1)
        scores.theta_sum = gamma_array(
            state.measure.G_total + tables_per_doc, 1.0 / self.denominators(state), gen
        )

    def step(self, state: ModelState, corpus: SparseCountMatrix, rng: RngStream) -> int:
        self.check_state(state)
        gen = rng.generator
        ws = self._workspace(state, corpus)
        ops = self.sweep(state, corpus, ws, rng)
        self._finish_sweep(state, corpus, ws)

        hyper = state.hyper
        scores = state.scores
        measure = state.measure
        assert measure.r is not None
        doc_factor = ws.doc_factor[:, : ws.K]

        self._sample_theta_sum(state, ws, gen)
        assert scores.theta_sum is not None
        scores.p = sample_p(corpus.col_sums, scores.theta_sum, hyper, gen)
        scores.c = sample_c(measure.G_total, scores.theta_sum, hyper, gen)
        ell_tilde = second_layer_tables(doc_factor, measure.r, gen)
        state.latent.ell_tilde_jk = ell_tilde
        q = q_nbfa(scores.p, scores.c)
        update_global_measure(measure, ell_tilde.sum(axis=0), q, hyper, gen, collapsed=True)
        if hyper.sample_eta:
            state.eta, state.eta_aux = sample_eta(ws.word_factor[:, : ws.K], state.eta, hyper, gen)
        self._sample_theta_sum(state, ws, gen)
        return ops

    def log_joint(self, state: ModelState, corpus: SparseCountMatrix) -> float:
        ws = self._workspace(state, corpus)
        r = ws.r[: ws.K]
        ell = ws.doc_factor[:, : ws.K]
        p_tilde = state.scores.p_tilde
        doc = (
            special.gammaln(ell + r) - special.gammaln(r)
            + ell * np.log(p_tilde)[:, None] + r * np.log1p(-p_tilde)[:, None]
        ).sum()
        return float(doc) + self._word_log_likelihood(ws, state.eta)


class CollapsedDCMLDASampler(TableCollapsedSampler):
    """Collapsed Gibbs for GNBP-DCMLDA with the gamma process G fully marginalized."""

    models: frozenset[ModelKind] = frozenset({"dcmlda"})

    def denominators(self, state: ModelState) -> FloatArray:
        return np.array([state.measure.c0 + q_direct(state.scores.p)])

    def _new_table_weights(
        self, state: ModelState, ws: CountWorkspace, v: int, j: int, denom: FloatArray
    ) -> FloatArray:
        K = ws.K
        V_eta = ws.word_factor.shape[0] * state.eta
        total = ws.factor_total[:K]
        word = (ws.word_factor[v, :K] + state.eta) / (total + V_eta)
        return np.asarray(word * total / denom[0], dtype=np.float64)

    def _new_factor_weight(self, state: ModelState, j: int, V: int, denom: FloatArray) -> float:
        return float(state.measure.gamma0 / (V * denom[0]))

    def _open_factor(self, state: ModelState, ws: CountWorkspace, gen: np.random.Generator) -> int:
        return ws.new_slot(0.0)

    def step(self, state: ModelState, corpus: SparseCountMatrix, rng: RngStream) -> int:
        self.check_state(state)
        gen = rng.generator
        ws = self._workspace(state, corpus)
        ops = self.sweep(state, corpus, ws, rng)
        self._finish_sweep(state, corpus, ws)

        hyper = state.hyper
        measure = state.measure
        scores = state.scores
        # G is drawn only for the p_j and c0 updates and then discarded.
        total_tables = int(ws.factor_total[: ws.K].sum())
        q = q_direct(scores.p)
        G = float(gamma_array(measure.gamma0 + total_tables, 1.0 / (measure.c0 + q), gen))
        scores.p = sample_p(corpus.col_sums, G, hyper, gen)
        measure.c0 = float(gamma_array(hyper.e0 + measure.gamma0, 1.0 / (hyper.f0 + G), gen))
        q = q_direct(scores.p)
        measure.gamma0 = float(
            gamma_array(
                hyper.a0 + measure.K_active, 1.0 / (hyper.b0 + np.log1p(q / measure.c0)), gen
            )
        )
        if hyper.sample_eta:
            state.eta, state.eta_aux = sample_eta(ws.word_factor[:, : ws.K], state.eta, hyper, gen)
        return ops

    def log_joint(self, state: ModelState, corpus: SparseCountMatrix) -> float:
        ws = self._workspace(state, corpus)
        measure = state.measure
        q = q_direct(state.scores.p)
        totals = ws.factor_total[: ws.K]
        # Table counts with G integrated out (negative binomial process partition).
        tables = (
            ws.K * np.log(measure.gamma0)
            + special.gammaln(totals).sum()
            + measure.gamma0 * np.log(measure.c0 / (measure.c0 + q))
            + totals.sum() * np.log(q / (measure.c0 + q))
        )
        return float(tables) + self._word_log_likelihood(ws, state.eta)


class CollapsedPFASampler(CollapsedSampler):
    """Collapsed Gibbs for GNBP-PFA: z_ji only, no tables."""

    models: frozenset[ModelKind] = frozenset({"pfa"})

    def token_weights(
        self, state: ModelState, ws: CountWorkspace, v: int, j: int, V: int
    ) -> FloatArray:
        """Unnormalized weights over the K active factors followed by a new factor."""
        K = ws.K
        eta = state.eta
        weights = np.empty(K + 1)
        weights[:K] = (
            (ws.word_factor[v, :K] + eta)
            / (ws.factor_total[:K] + V * eta)
            * (ws.doc_factor[j, :K] + ws.r[:K])
        )
        weights[K] = state.measure.r_star / V
        return weights

    def sweep(
        self, state: ModelState, corpus: SparseCountMatrix, ws: CountWorkspace, rng: RngStream
    ) -> int:
        z = state.latent.z
        assert z is not None
        gen = rng.generator
        V = corpus.V
        ptr = corpus.token_ptr
        u = gen.random(corpus.total)
        ops = 0
        for cell in range(corpus.nnz):
            v = int(corpus.indices[cell])
            j = int(corpus.cell_j[cell])
            for token in range(int(ptr[cell]), int(ptr[cell + 1])):
                if z[token] >= 0:
                    ws.remove(v, j, int(z[token]))
                K = ws.K
                weights = self.token_weights(state, ws, v, j, V)
                ops += K + 1
                k = categorical(weights, float(u[token]))
                if k == K:
                    k = ws.new_slot(self._stick_break(state, gen))
                ws.add(v, j, k)
                z[token] = k
        return ops

    def step(self, state: ModelState, corpus: SparseCountMatrix, rng: RngStream) -> int:
        self.check_state(state)
        gen = rng.generator
        ws = self._workspace(state, corpus)
        ops = self.sweep(state, corpus, ws, rng)
        self._finish_sweep(state, corpus, ws)

        hyper = state.hyper
        measure = state.measure
        assert measure.r is not None
        state.scores.p = sample_p(corpus.col_sums, measure.G_total, hyper, gen)
        tables = second_layer_tables(ws.doc_factor[:, : ws.K], measure.r, gen)
        state.latent.ell_tilde_jk = tables
        q = q_direct(state.scores.p)
        update_global_measure(measure, tables.sum(axis=0), q, hyper, gen, collapsed=True)
        if hyper.sample_eta:
            state.eta, state.eta_aux = sample_eta(ws.word_factor[:, : ws.K], state.eta, hyper, gen)
        return ops

    def log_joint(self, state: ModelState, corpus: SparseCountMatrix) -> float:
        ws = self._workspace(state, corpus)
        r = ws.r[: ws.K]
        n = ws.doc_factor[:, : ws.K]
        p = state.scores.p
        doc = (
            special.gammaln(n + r) - special.gammaln(r)
            + n * np.log(p)[:, None] + r * np.log1p(-p)[:, None]
        ).sum()
        return float(doc) + self._word_log_likelihood(ws, state.eta)


COLLAPSED_SAMPLERS: dict[ModelKind, type[CollapsedSampler]] = {
    "nbfa": CollapsedNBFASampler,
    "dcmlda": CollapsedDCMLDASampler,
    "pfa": CollapsedPFASampler,
}


def collapsed_sampler(model: ModelKind, K_star: int = 20) -> CollapsedSampler:
    try:
        return COLLAPSED_SAMPLERS[model](model, K_star)
    except KeyError:
        raise ConfigError(f"No collapsed sampler for model {model}") from None


def collapsed_step(state: ModelState, corpus: SparseCountMatrix, rng: RngStream) -> ModelState:
    CollapsedNBFASampler("nbfa", state.measure.K_star).step(state, corpus, rng)
    return state


def pfa_collapsed_step(state: ModelState, corpus: SparseCountMatrix, rng: RngStream) -> ModelState:
    CollapsedPFASampler("pfa", state.measure.K_star).step(state, corpus, rng)
    return state


def dcmlda_collapsed_step(
    state: ModelState, corpus: SparseCountMatrix, rng: RngStream
) -> ModelState:
    CollapsedDCMLDASampler("dcmlda", state.measure.K_star).step(state, corpus, rng)
    return state
