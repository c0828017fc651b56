"""Synthetic corpora with known generating factors, for tests and sampler comparisons."""

import logging
from dataclasses import dataclass

import numpy as np

from nbfa.core.corpus import SparseCountMatrix, Vocabulary
from nbfa.core.distributions import RngStream, dirichlet_columns, gamma_array
from nbfa.core.model import FloatArray, IntArray
from nbfa.errors import ParameterError

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class SyntheticCorpus:
    vocab: Vocabulary
    matrix: SparseCountMatrix
    phi: FloatArray
    # K x J factor scores or proportions used to generate each sample
    scores: FloatArray

    @property
    def K(self) -> int:
        return int(self.phi.shape[1])


def _check_sizes(V: int, J: int, K: int, tokens_per_doc: float) -> None:
    if min(V, J, K) < 1:
        raise ParameterError(f"V, J and K must be positive, got {V}, {J}, {K}")
    if not tokens_per_doc > 0:
        raise ParameterError(f"tokens_per_doc must be positive, got {tokens_per_doc}")


def _factors(V: int, K: int, concentration: float, gen: np.random.Generator) -> FloatArray:
    return dirichlet_columns(np.full((V, K), concentration), gen)


def _build(phi: FloatArray, scores: FloatArray, dense: IntArray) -> SyntheticCorpus:
    matrix = SparseCountMatrix.from_dense(dense)
    logger.info(
        "Generated corpus: V=%d, J=%d, K=%d, tokens=%d, nnz=%d",
        matrix.V,
        matrix.J,
        phi.shape[1],
        matrix.total,
        matrix.nnz,
    )
    return SyntheticCorpus(Vocabulary.numbered(matrix.V), matrix, phi, scores)


def nbfa_corpus(
    V: int,
    J: int,
    K: int,
    tokens_per_doc: float,
    rng: RngStream,
    p: float = 0.5,
    phi_concentration: float = 0.1,
) -> SyntheticCorpus:
    """n_vj ~ NB(sum_k phi_vk theta_kj, p), theta_kj ~ Gamma(1, 1/c) with c set so that
    E[n_j] = tokens_per_doc."""
    _check_sizes(V, J, K, tokens_per_doc)
    gen = rng.generator
    phi = _factors(V, K, phi_concentration, gen)
    odds = p / (1.0 - p)
    c = K * odds / tokens_per_doc
    theta = gamma_array(np.ones((K, J)), 1.0 / c, gen)
    shape = phi @ theta
    # NB(r, p) as a gamma mixture of Poissons
    dense = gen.poisson(gen.gamma(shape, odds)).astype(np.int64)
    return _build(phi, theta, dense)


def bursty_corpus(
    V: int,
    J: int,
    K: int,
    tokens_per_doc: int,
    rng: RngStream,
    concentration: float = 0.1,
    doc_concentration: float = 0.5,
    phi_concentration: float = 0.1,
) -> SyntheticCorpus:
    """Dirichlet-multinomial factors: each (sample, factor) pair draws its own word
    distribution from Dir(concentration * V * phi_k) before emitting its tokens."""
    _check_sizes(V, J, K, tokens_per_doc)
    gen = rng.generator
    phi = _factors(V, K, phi_concentration, gen)
    props = dirichlet_columns(np.full((K, J), doc_concentration), gen)
    dense = np.zeros((V, J), dtype=np.int64)
    alpha = concentration * V * phi
    for j in range(J):
        n_jk = gen.multinomial(tokens_per_doc, props[:, j])
        local = dirichlet_columns(alpha, gen)
        for k in np.flatnonzero(n_jk):
            dense[:, j] += gen.multinomial(int(n_jk[k]), local[:, k])
    return _build(phi, props, dense)


def poisson_corpus(
    V: int,
    J: int,
    K: int,
    tokens_per_doc: float,
    rng: RngStream,
    phi_concentration: float = 0.1,
) -> SyntheticCorpus:
    """n_vj ~ Pois(sum_k phi_vk theta_kj), theta_kj ~ Gamma(1, tokens_per_doc / K)."""
    _check_sizes(V, J, K, tokens_per_doc)
    gen = rng.generator
    phi = _factors(V, K, phi_concentration, gen)
    theta = gamma_array(np.ones((K, J)), tokens_per_doc / K, gen)
    dense = gen.poisson(phi @ theta).astype(np.int64)
    return _build(phi, theta, dense)
