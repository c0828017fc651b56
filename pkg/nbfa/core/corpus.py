import csv
import hashlib
import io
import logging
from collections.abc import Sequence
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Literal

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import sparse

from nbfa.core.distributions import RngStream
from nbfa.errors import CorpusParseError, EmptyVocabularyError, ParameterError

CorpusFormat = Literal["uci-bow", "term-doc-triples"]
CORPUS_FORMATS: tuple[CorpusFormat, ...] = ("uci-bow", "term-doc-triples")

logger = logging.getLogger(__name__)

IntArray = NDArray[np.int64]


@dataclass(frozen=True)
class Vocabulary:
    terms: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(set(self.terms)) != len(self.terms):
            raise CorpusParseError("Vocabulary terms must be unique")

    @property
    def size(self) -> int:
        return len(self.terms)

    @classmethod
    def numbered(cls, size: int) -> "Vocabulary":
        return cls(tuple(str(v + 1) for v in range(size)))

    def subset(self, keep: NDArray[np.bool_]) -> "Vocabulary":
        return Vocabulary(tuple(t for t, k in zip(self.terms, keep, strict=True) if k))


def _readonly(values: ArrayLike) -> IntArray:
    arr = np.array(values, dtype=np.int64)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class SparseCountMatrix:
    """V x J covariate-sample counts, stored column-compressed (one column per sample).

    Cells are ordered by (j, v) and tokens by cell, so every per-cell and per-token
    array below is laid out document by document.
    """

    V: int
    J: int
    indptr: IntArray
    indices: IntArray
    counts: IntArray

    def __post_init__(self) -> None:
        if self.indptr.shape != (self.J + 1,) or self.indptr[0] != 0:
            raise ParameterError("indptr must have J + 1 entries starting at 0")
        if self.indptr[-1] != self.indices.size or self.indices.size != self.counts.size:
            raise ParameterError("indices and counts must match indptr[-1]")
        if np.any(self.counts <= 0):
            raise ParameterError("Stored counts must be strictly positive")
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= self.V):
            raise ParameterError("Covariate index out of range")
        keys = self.cell_j * self.V + self.indices
        if np.any(np.diff(keys) <= 0):
            raise ParameterError("Cells must be sorted and unique within each column")

    @classmethod
    def from_triples(
        cls, V: int, J: int, v: ArrayLike, j: ArrayLike, n: ArrayLike
    ) -> "SparseCountMatrix":
        v_arr = np.asarray(v, dtype=np.int64)
        j_arr = np.asarray(j, dtype=np.int64)
        n_arr = np.asarray(n, dtype=np.int64)
        keep = n_arr != 0
        v_arr, j_arr, n_arr = v_arr[keep], j_arr[keep], n_arr[keep]
        width = max(V, 1)
        keys = j_arr * width + v_arr
        uniq, inverse = np.unique(keys, return_inverse=True)
        if uniq.size != keys.size:
            logger.warning("Merged %d duplicate (v, j) cells", keys.size - uniq.size)
        merged = np.bincount(inverse, weights=n_arr, minlength=uniq.size).astype(np.int64)
        cell_j = uniq // width
        indptr = np.zeros(J + 1, dtype=np.int64)
        np.cumsum(np.bincount(cell_j, minlength=J), out=indptr[1:])
        return cls(V, J, _readonly(indptr), _readonly(uniq % width), _readonly(merged))

    @classmethod
    def from_dense(cls, dense: ArrayLike) -> "SparseCountMatrix":
        mat = np.asarray(dense, dtype=np.int64)
        j, v = np.nonzero(mat.T)
        return cls.from_triples(mat.shape[0], mat.shape[1], v, j, mat[v, j])

    @property
    def nnz(self) -> int:
        return int(self.counts.size)

    @cached_property
    def col_sums(self) -> IntArray:
        return _readonly(np.bincount(self.cell_j, weights=self.counts, minlength=self.J))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @cached_property
    def cell_j(self) -> IntArray:
        return _readonly(np.repeat(np.arange(self.J), np.diff(self.indptr)))

    @property
    def cell_v(self) -> IntArray:
        return self.indices

    @cached_property
    def token_ptr(self) -> IntArray:
        ptr = np.zeros(self.nnz + 1, dtype=np.int64)
        np.cumsum(self.counts, out=ptr[1:])
        return _readonly(ptr)

    @cached_property
    def token_cell(self) -> IntArray:
        return _readonly(np.repeat(np.arange(self.nnz), self.counts))

    @cached_property
    def doc_token_ptr(self) -> IntArray:
        return _readonly(self.token_ptr[self.indptr])

    @cached_property
    def doc_freq(self) -> IntArray:
        return _readonly(np.bincount(self.indices, minlength=self.V))

    def column(self, j: int) -> tuple[IntArray, IntArray]:
        lo, hi = self.indptr[j], self.indptr[j + 1]
        return self.indices[lo:hi], self.counts[lo:hi]

    def lookup(self, v: ArrayLike, j: ArrayLike) -> IntArray:
        """Counts at arbitrary (v, j) positions, zero where no cell is stored."""
        query = np.asarray(j, dtype=np.int64) * self.V + np.asarray(v, dtype=np.int64)
        if not self.nnz:
            return np.zeros(query.shape, dtype=np.int64)
        keys = self.cell_j * self.V + self.indices
        pos = np.minimum(np.searchsorted(keys, query), self.nnz - 1)
        return np.where(keys[pos] == query, self.counts[pos], 0).astype(np.int64)

    def to_csc(self) -> sparse.csc_array:
        return sparse.csc_array(
            (self.counts, self.indices, self.indptr), shape=(self.V, self.J), dtype=np.int64
        )

    def to_dense(self) -> IntArray:
        dense = np.zeros((self.V, self.J), dtype=np.int64)
        dense[self.indices, self.cell_j] = self.counts
        return dense

    def same_cells(self, other: "SparseCountMatrix") -> bool:
        return (
            self.V == other.V
            and self.J == other.J
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.counts, other.counts)
        )

    def select_rows(self, keep: NDArray[np.bool_]) -> "SparseCountMatrix":
        new_index = np.cumsum(keep) - 1
        mask = keep[self.indices]
        return SparseCountMatrix.from_triples(
            int(keep.sum()),
            self.J,
            new_index[self.indices[mask]],
            self.cell_j[mask],
            self.counts[mask],
        )


@dataclass(frozen=True, eq=False)
class HeldoutSplit:
    train: SparseCountMatrix
    test: SparseCountMatrix
    fraction: float
    seed: int

    @property
    def degenerate(self) -> IntArray:
        """Samples with an empty training column; excluded from perplexity."""
        return np.flatnonzero(self.train.col_sums == 0).astype(np.int64)


def _parse_int(field: str, line_number: int) -> int:
    try:
        return int(field)
    except ValueError:
        raise CorpusParseError(f"Expected an integer, got {field!r}", line_number) from None


def _parse_uci(text: str) -> tuple[int, int, IntArray, IntArray, IntArray]:
    lines = text.splitlines()
    if len(lines) < 3:
        raise CorpusParseError("uci-bow files need three header lines (D, W, NNZ)", len(lines))
    J = _parse_int(lines[0].strip(), 1)
    V = _parse_int(lines[1].strip(), 2)
    nnz = _parse_int(lines[2].strip(), 3)
    vs: list[int] = []
    js: list[int] = []
    ns: list[int] = []
    for line_number, line in enumerate(lines[3:], start=4):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 3:
            raise CorpusParseError(f"Expected 'docID wordID count', got {line!r}", line_number)
        doc, term, count = (_parse_int(f, line_number) for f in fields)
        _check_triple(term, doc, count, V, J, line_number)
        vs.append(term - 1)
        js.append(doc - 1)
        ns.append(count)
    if len(ns) != nnz:
        logger.warning("uci-bow header declares NNZ=%d but %d triples were read", nnz, len(ns))
    return V, J, np.array(vs, dtype=np.int64), np.array(js, dtype=np.int64), np.array(ns)


def _check_triple(term: int, doc: int, count: int, V: int, J: int, line_number: int) -> None:
    if not 1 <= term <= V:
        raise CorpusParseError(f"Term index {term} outside 1..{V}", line_number)
    if not 1 <= doc <= J:
        raise CorpusParseError(f"Document index {doc} outside 1..{J}", line_number)
    if count < 0:
        raise CorpusParseError(f"Negative count {count}", line_number)


def _parse_triples(
    text: str, V: int | None, J: int | None = None
) -> tuple[int, int, IntArray, IntArray, IntArray]:
    rows: list[tuple[int, int, int, int]] = []
    for line_number, fields in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not fields or all(not f.strip() for f in fields):
            continue
        if line_number == 1 and not fields[0].strip().lstrip("-").isdigit():
            continue  # header row
        if len(fields) != 3:
            raise CorpusParseError(f"Expected 'term,doc,count', got {fields!r}", line_number)
        term, doc, count = (_parse_int(f.strip(), line_number) for f in fields)
        rows.append((term, doc, count, line_number))
    n_terms = V if V is not None else max((r[0] for r in rows), default=0)
    # Without an explicit J, trailing empty samples cannot be seen.
    n_docs = J if J is not None else max((r[1] for r in rows), default=0)
    for term, doc, count, line_number in rows:
        _check_triple(term, doc, count, n_terms, n_docs, line_number)
    vs = np.array([r[0] - 1 for r in rows], dtype=np.int64)
    js = np.array([r[1] - 1 for r in rows], dtype=np.int64)
    ns = np.array([r[2] for r in rows], dtype=np.int64)
    return n_terms, n_docs, vs, js, ns


def vocab_sidecar(path: str | Path) -> Path:
    return Path(f"{path}.vocab")


def parse_bow(
    text: str,
    fmt: CorpusFormat,
    vocab_terms: Sequence[str] | None = None,
    n_docs: int | None = None,
) -> tuple[Vocabulary, SparseCountMatrix]:
    """Parse a corpus; `n_docs` fixes J, else it comes from the header or the largest index."""
    if n_docs is not None and n_docs < 1:
        raise CorpusParseError(f"Document count must be positive, got {n_docs}")
    if fmt == "uci-bow":
        V, J, vs, js, ns = _parse_uci(text)
        if n_docs is not None and n_docs != J:
            raise CorpusParseError(f"uci-bow header declares D={J} but {n_docs} were expected")
    elif fmt == "term-doc-triples":
        n_terms = len(vocab_terms) if vocab_terms else None
        V, J, vs, js, ns = _parse_triples(text, n_terms, n_docs)
    else:
        raise CorpusParseError(f"Unsupported corpus format: {fmt}")

    if vocab_terms is None:
        vocab = Vocabulary.numbered(V)
    else:
        vocab = Vocabulary(tuple(vocab_terms))
        if vocab.size != V:
            raise CorpusParseError(f"Vocabulary has {vocab.size} terms but the corpus has {V}")
    return vocab, SparseCountMatrix.from_triples(V, J, vs, js, ns)


def read_vocab(path: str | Path) -> list[str]:
    with open(path, encoding="utf-8") as f:
        return [line.rstrip("\n") for line in f if line.strip()]


def load_bow(
    path: str | Path, fmt: CorpusFormat, n_docs: int | None = None
) -> tuple[Vocabulary, SparseCountMatrix]:
    sidecar = vocab_sidecar(path)
    terms = read_vocab(sidecar) if sidecar.exists() else None
    with open(path, encoding="utf-8") as f:
        text = f.read()
    vocab, matrix = parse_bow(text, fmt, terms, n_docs)
    logger.info(
        "Loaded %s: V=%d, J=%d, tokens=%d", path, matrix.V, matrix.J, matrix.total
    )
    return vocab, matrix


def canonical_bytes(matrix: SparseCountMatrix) -> bytes:
    buf = io.StringIO()
    buf.write(f"{matrix.J}\n{matrix.V}\n{matrix.nnz}\n")
    for j, v, n in zip(matrix.cell_j, matrix.indices, matrix.counts, strict=True):
        buf.write(f"{j + 1} {v + 1} {n}\n")
    return buf.getvalue().encode("utf-8")


def corpus_hash(matrix: SparseCountMatrix) -> str:
    return hashlib.sha256(canonical_bytes(matrix)).hexdigest()


def write_bow(vocab: Vocabulary, matrix: SparseCountMatrix, path: str | Path) -> None:
    """Write the canonical uci-bow file and its vocabulary sidecar."""
    if vocab.size != matrix.V:
        raise ParameterError(f"Vocabulary size {vocab.size} does not match V={matrix.V}")
    Path(path).write_bytes(canonical_bytes(matrix))
    vocab_sidecar(path).write_text("".join(f"{t}\n" for t in vocab.terms), encoding="utf-8")


def prune_vocabulary(
    vocab: Vocabulary, matrix: SparseCountMatrix, min_doc_freq: int
) -> tuple[Vocabulary, SparseCountMatrix]:
    if min_doc_freq < 1:
        raise ParameterError(f"min_doc_freq must be at least 1, got {min_doc_freq}")
    keep = matrix.doc_freq >= min_doc_freq
    if not keep.any():
        raise EmptyVocabularyError(f"No covariate occurs in {min_doc_freq} or more samples")
    if keep.all():
        return vocab, matrix
    logger.info("Pruned %d of %d covariates", int((~keep).sum()), matrix.V)
    return vocab.subset(keep), matrix.select_rows(keep)


def heldout_size(n_j: int, fraction: float) -> int:
    """Training tokens kept for a sample: round half up, at least one when n_j >= 1."""
    if n_j == 0:
        return 0
    return min(n_j, max(1, int(np.floor(fraction * n_j + 0.5))))


def split_heldout(matrix: SparseCountMatrix, fraction: float, rng: RngStream) -> HeldoutSplit:
    if not 0.0 < fraction < 1.0:
        raise ParameterError(f"Training fraction must lie in (0, 1), got {fraction}")

    train_counts = np.zeros(matrix.nnz, dtype=np.int64)
    for j in range(matrix.J):
        lo, hi = int(matrix.indptr[j]), int(matrix.indptr[j + 1])
        n_j = int(matrix.counts[lo:hi].sum())
        m = heldout_size(n_j, fraction)
        if m == 0:
            continue
        gen = rng.derive(j).generator
        tokens = np.repeat(np.arange(lo, hi), matrix.counts[lo:hi])
        chosen = tokens[gen.choice(n_j, size=m, replace=False)]
        train_counts[lo:hi] = np.bincount(chosen - lo, minlength=hi - lo)

    test_counts = matrix.counts - train_counts
    v, j = matrix.indices, matrix.cell_j
    train = SparseCountMatrix.from_triples(matrix.V, matrix.J, v, j, train_counts)
    test = SparseCountMatrix.from_triples(matrix.V, matrix.J, v, j, test_counts)
    return HeldoutSplit(train, test, fraction, rng.seed)
