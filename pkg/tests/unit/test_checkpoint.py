from pathlib import Path

import numpy as np
import pytest
from google.protobuf import json_format

from nbfa.core import checkpoint
from nbfa.core.blocked import CompoundPoissonSampler
from nbfa.core.collapsed import CollapsedNBFASampler
from nbfa.core.corpus import SparseCountMatrix
from nbfa.core.distributions import RngStream
from nbfa.core.model import Hyperparams, ModelState, init_state
from nbfa.errors import SchemaError


def _corpus() -> SparseCountMatrix:
    return SparseCountMatrix.from_dense(np.random.default_rng(0).poisson(1.5, size=(8, 5)))


def _assert_states_equal(a: ModelState, b: ModelState) -> None:
    assert (a.kind, a.sampler, a.iteration, a.eta) == (b.kind, b.sampler, b.iteration, b.eta)
    assert a.hyper == b.hyper
    for name in ("r_star", "gamma0", "c0", "K_active", "K_star", "truncation"):
        assert getattr(a.measure, name) == getattr(b.measure, name)
    for x, y in [
        (a.measure.r, b.measure.r),
        (a.factors.phi, b.factors.phi),
        (a.scores.theta, b.scores.theta),
        (a.scores.theta_sum, b.scores.theta_sum),
        (a.scores.p, b.scores.p),
        (a.scores.c, b.scores.c),
        (a.latent.z, b.latent.z),
        (a.latent.b, b.latent.b),
        (a.latent.ell_vj, b.latent.ell_vj),
    ]:
        if x is None:
            assert y is None
        else:
            assert y is not None and np.array_equal(x, y)
    for t1, t2 in [(a.latent.ell_vjk, b.latent.ell_vjk), (a.latent.n_vjk, b.latent.n_vjk)]:
        if t1 is None:
            assert t2 is None
        else:
            assert t2 is not None
            assert np.array_equal(t1.cell, t2.cell)
            assert np.array_equal(t1.k, t2.k)
            assert np.array_equal(t1.count, t2.count)
    assert a.latent.tables == b.latent.tables


@pytest.mark.parametrize("suffix", [".pb", ".json"])
def test_cp_state_round_trip(tmp_path: Path, suffix: str) -> None:
    corpus = _corpus()
    state = init_state("nbfa", "cp", 6, Hyperparams(sample_eta=True), corpus, RngStream(1))
    state.iteration = 1
    CompoundPoissonSampler("nbfa", 4).step(state, corpus, RngStream(2))
    path = tmp_path / f"state{suffix}"

    checkpoint.save(state, path, metadata={"note": "unit"})
    loaded = checkpoint.load(path)

    _assert_states_equal(state, loaded.state)
    assert loaded.metadata["note"] == "unit"
    assert loaded.restore_rng() is None
    assert not (tmp_path / f"state{suffix}.tmp").exists()


def test_collapsed_state_round_trip_keeps_table_order(tmp_path: Path) -> None:
    corpus = _corpus()
    state = init_state("nbfa", "collapsed", 0, Hyperparams(), corpus, RngStream(3))
    sampler = CollapsedNBFASampler("nbfa")
    for it in range(1, 4):
        state.iteration = it
        sampler.step(state, corpus, RngStream(4))

    checkpoint.save(state, tmp_path / "collapsed.pb")
    loaded = checkpoint.load(tmp_path / "collapsed.pb")

    _assert_states_equal(state, loaded.state)


def test_rng_and_extras_round_trip(tmp_path: Path) -> None:
    corpus = _corpus()
    state = init_state("dcmlda", "cp", 3, Hyperparams(), corpus, RngStream(5))
    rng = RngStream(42, 0, (0, 0))
    rng.generator.random(17)
    extras = {"word_factor": np.arange(6).reshape(3, 2), "sums": np.array([0.5, 1.5])}

    checkpoint.save(state, tmp_path / "c.pb", rng, extra_arrays=extras)
    loaded = checkpoint.load(tmp_path / "c.pb")
    restored = loaded.restore_rng()

    assert restored is not None
    assert restored.spawn_key == rng.spawn_key
    assert np.array_equal(restored.generator.random(4), rng.generator.random(4))
    assert np.array_equal(loaded.extras["word_factor"], extras["word_factor"])
    assert np.array_equal(loaded.extras["sums"], extras["sums"])


@pytest.mark.parametrize("suffix", [".pb", ".json"])
def test_empty_extras_keep_their_dtype(tmp_path: Path, suffix: str) -> None:
    corpus = _corpus()
    state = init_state("nbfa", "cp", 3, Hyperparams(), corpus, RngStream(6))
    extras = {
        "no_sums": np.zeros((0, 2), dtype=np.float64),
        "no_counts": np.zeros(0, dtype=np.int64),
    }
    path = tmp_path / f"c{suffix}"

    checkpoint.save(state, path, extra_arrays=extras)
    loaded = checkpoint.load(path)

    assert loaded.extras["no_sums"].dtype == np.float64
    assert loaded.extras["no_sums"].shape == (0, 2)
    assert loaded.extras["no_counts"].dtype == np.int64


def test_version_mismatch_is_a_schema_error(tmp_path: Path) -> None:
    corpus = _corpus()
    state = init_state("nbfa", "cp", 3, Hyperparams(), corpus, RngStream(6))
    msg = checkpoint.to_message(state)
    msg.version = checkpoint.CHECKPOINT_VERSION + 1  # type: ignore[attr-defined]
    path = tmp_path / "future.json"
    path.write_text(json_format.MessageToJson(msg))

    with pytest.raises(SchemaError):
        checkpoint.load(path)


def test_unreadable_checkpoint(tmp_path: Path) -> None:
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(SchemaError):
        checkpoint.load(path)

    empty = checkpoint.CheckpointMessage(version=checkpoint.CHECKPOINT_VERSION, metadata="{}")
    with pytest.raises(SchemaError):
        checkpoint.from_message(empty)


def test_checkpoint_format_by_extension() -> None:
    assert checkpoint.checkpoint_format("a/b.json") == "json"
    assert checkpoint.checkpoint_format("a/b.pb") == "pb"
    assert checkpoint.checkpoint_format("a/b.ckpt") == "pb"
