import logging

import httpx

from nbfa.core.corpus import CorpusFormat, SparseCountMatrix, Vocabulary, load_bow, parse_bow

logger = logging.getLogger(__name__)


def is_remote(source: str) -> bool:
    return source.startswith("http://") or source.startswith("https://")


def fetch_corpus(
    url: str,
    fmt: CorpusFormat,
    client: httpx.Client | None = None,
    n_docs: int | None = None,
) -> tuple[Vocabulary, SparseCountMatrix]:
    """Download a corpus and, when present, its `.vocab` sidecar."""
    if not is_remote(url):
        raise ValueError(f"Invalid corpus URL: {url}")

    own_client = client is None
    http = client or httpx.Client(follow_redirects=True, timeout=60.0)
    try:
        resp = http.get(url)
        resp.raise_for_status()
        text = resp.text

        terms: list[str] | None = None
        vocab_resp = http.get(f"{url}.vocab")
        if vocab_resp.status_code == 404:
            logger.info("No vocabulary sidecar at %s.vocab, numbering terms", url)
        else:
            vocab_resp.raise_for_status()
            terms = [line for line in vocab_resp.text.splitlines() if line.strip()]
    finally:
        if own_client:
            http.close()

    vocab, matrix = parse_bow(text, fmt, terms, n_docs)
    logger.info("Fetched %s: V=%d, J=%d, tokens=%d", url, matrix.V, matrix.J, matrix.total)
    return vocab, matrix


def load_corpus(
    source: str, fmt: CorpusFormat, n_docs: int | None = None
) -> tuple[Vocabulary, SparseCountMatrix]:
    if is_remote(source):
        return fetch_corpus(source, fmt, n_docs=n_docs)
    return load_bow(source, fmt, n_docs)
