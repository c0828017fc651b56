"""Conditional updates shared by every sampler.

Each function draws one block of variables from its full conditional given the rest of
the state. The hierarchy is updated as (gamma0 with r integrated out, then r, then c0),
so that c0 always conditions on weights drawn under the current gamma0.
"""

import logging

import numpy as np

from nbfa.core.distributions import (
    beta_array,
    clamp_probability,
    crt_array,
    dirichlet_columns,
    gamma_array,
)
from nbfa.core.model import (
    EtaAuxState,
    FloatArray,
    GlobalMeasureState,
    Hyperparams,
    IntArray,
)

logger = logging.getLogger(__name__)


def sample_p(
    n_j: IntArray, mass: FloatArray | float, hyper: Hyperparams, gen: np.random.Generator
) -> FloatArray:
    """p_j ~ Beta(a0 + n_j, b0 + mass_j), mass being theta_.j (NBFA) or G (DCMLDA, PFA)."""
    mass_arr = np.broadcast_to(np.asarray(mass, dtype=np.float64), n_j.shape)
    return clamp_probability(beta_array(hyper.a0 + n_j, hyper.b0 + mass_arr, gen))


def sample_c(
    G: float, theta_sum: FloatArray, hyper: Hyperparams, gen: np.random.Generator
) -> FloatArray:
    """c_j ~ Gamma(e0 + G, 1 / (f0 + theta_.j))."""
    return gamma_array(np.full(theta_sum.shape, hyper.e0 + G), 1.0 / (hyper.f0 + theta_sum), gen)


def sample_theta(
    r: FloatArray,
    doc_factor: IntArray,
    p: FloatArray,
    c: FloatArray,
    gen: np.random.Generator,
) -> FloatArray:
    """theta_kj ~ Gamma(r_k + l_.jk, 1 / (c_j - ln(1 - p_j))), returned as K x J."""
    rate = c - np.log1p(-p)
    return gamma_array(r[:, None] + doc_factor.T, 1.0 / rate[None, :], gen)


def sample_phi(word_factor: IntArray, eta: float, gen: np.random.Generator) -> FloatArray:
    return dirichlet_columns(eta + word_factor, gen)


def second_layer_tables(
    doc_factor: IntArray, r: FloatArray, gen: np.random.Generator
) -> IntArray:
    """l~_jk ~ CRT(l_.jk, r_k), J x K."""
    return crt_array(doc_factor, np.broadcast_to(r[None, :], doc_factor.shape), gen)


def update_global_measure(
    measure: GlobalMeasureState,
    counts: IntArray,
    q: float,
    hyper: Hyperparams,
    gen: np.random.Generator,
    collapsed: bool = False,
) -> None:
    """Resample gamma0, the atom weights r and c0.

    counts[k] ~ Pois(r_k * q) given r; q is the sample-summed rate, -sum ln(1 - p~_j)
    for NBFA and -sum ln(1 - p_j) for DCMLDA and PFA.
    """
    assert measure.r is not None
    K = counts.size
    c0 = measure.c0
    log_term = float(np.log1p(q / c0))
    scale = 1.0 / (c0 + q)
    measure.K_active = int(np.count_nonzero(counts))

    if measure.truncation == "fixed":
        shape = measure.gamma0 / K
        tables = crt_array(counts, np.full(K, shape), gen)
        measure.gamma0 = float(
            gamma_array(hyper.a0 + tables.sum(), 1.0 / (hyper.b0 + log_term), gen)
        )
        measure.r = gamma_array(measure.gamma0 / K + counts, scale, gen)
    else:
        active = counts > 0
        measure.gamma0 = float(
            gamma_array(hyper.a0 + measure.K_active, 1.0 / (hyper.b0 + log_term), gen)
        )
        r = measure.r.copy()
        r[active] = gamma_array(counts[active], scale, gen)
        measure.r = r
        if collapsed:
            measure.r_star = float(gamma_array(measure.gamma0, scale, gen))

    measure.c0 = float(
        gamma_array(hyper.e0 + measure.gamma0, 1.0 / (hyper.f0 + measure.G_total), gen)
    )


def sample_eta(
    word_factor: IntArray,
    eta: float,
    hyper: Hyperparams,
    gen: np.random.Generator,
) -> tuple[float, EtaAuxState]:
    """Resample the Dirichlet smoothing eta from the V x K count marginal.

    q_k ~ Beta(l_..k, V eta), t_vk ~ CRT(l_v.k, eta),
    eta ~ Gamma(a0 + sum t, 1 / (b0 - V sum_k ln(1 - q_k))), over active factors only.
    """
    V = word_factor.shape[0]
    totals = word_factor.sum(axis=0)
    active = totals > 0
    if not active.any():
        logger.info("No active factors; eta drawn from its prior")
        new_eta = float(gamma_array(hyper.a0, 1.0 / hyper.b0, gen))
        return new_eta, EtaAuxState(np.zeros(0), np.zeros((V, 0), dtype=np.int64))

    counts = word_factor[:, active]
    # q_k == 1 in floating point would send eta to zero
    q = np.minimum(beta_array(totals[active].astype(np.float64), V * eta, gen), 1.0 - 1e-16)
    t = crt_array(counts, np.full(counts.shape, eta), gen)
    rate = hyper.b0 - V * float(np.sum(np.log1p(-q)))
    new_eta = float(gamma_array(hyper.a0 + t.sum(), 1.0 / rate, gen))
    return new_eta, EtaAuxState(q, t)
