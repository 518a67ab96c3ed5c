"""
Corpus and metadata files.

UCI bag-of-words: three header lines D, V, NNZ followed by one
"docId wordId count" triple per line, ids 1-indexed.
"""

import hashlib
import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import sparse

from ktm.core.errors import CorpusFormatError, InvalidArgumentError
from ktm.services.kernels import FeatureSpace
from ktm.services.vlda import Corpus


logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
AUTHOR_COLUMN = "author"
NODE_COLUMN = "node"
DOC_ID_COLUMN = "doc_id"


def _read_header(path: Path) -> Tuple[int, int, int]:
    values = []
    with open(path, "r", encoding="utf-8") as f:
        for line_number in range(1, 4):
            line = f.readline()
            try:
                values.append(int(line.strip()))
            except ValueError:
                raise CorpusFormatError(f"{path}:{line_number}: expected an integer header line, got {line.strip()!r}")
    D, V, nnz = values
    if D < 1 or V < 1 or nnz < 0:
        raise CorpusFormatError(f"{path}: invalid header D={D} V={V} NNZ={nnz}")
    return D, V, nnz


def read_vocab(path: PathLike) -> List[str]:
    vocab = pd.read_csv(path, header=None, names=["token"], dtype=str, keep_default_na=False,
                        skip_blank_lines=False, sep="\t", quoting=3)
    return vocab["token"].str.strip().tolist()


def read_uci_corpus(path: PathLike, vocab_path: Optional[PathLike] = None) -> Corpus:
    """
    Load a UCI bag-of-words file. Repeated (doc, word) triples are summed
    and document ids become "1".."D".
    """
    path = Path(path)
    D, V, nnz = _read_header(path)
    if nnz:
        try:
            triples = pd.read_csv(path, sep=r"\s+", header=None, skiprows=3,
                                  names=["doc", "word", "count"], engine="python")
        except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            raise CorpusFormatError(f"{path}: malformed triples: {e}")
    else:
        triples = pd.DataFrame(columns=["doc", "word", "count"])

    if len(triples) != nnz:
        logger.warning(f"{path}: header announces {nnz} triples, found {len(triples)}")
    for column in ("doc", "word", "count"):
        numeric = pd.to_numeric(triples[column], errors="coerce")
        bad = numeric.isna() | (numeric != numeric.round())
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise CorpusFormatError(f"{path}:{row + 4}: non-integer {column} value {triples[column].iloc[row]!r}")
        triples[column] = numeric.astype(np.int64)

    checks = [
        (triples["doc"] < 1) | (triples["doc"] > D), "document id outside [1, D]",
        (triples["word"] < 1) | (triples["word"] > V), "word id outside [1, V]",
        triples["count"] < 1, "count must be a positive integer",
    ]
    for mask, message in zip(checks[::2], checks[1::2]):
        if mask.any():
            row = int(np.flatnonzero(mask.to_numpy())[0])
            raise CorpusFormatError(f"{path}:{row + 4}: {message}")

    counts = sparse.coo_matrix(
        (triples["count"].to_numpy(dtype=float), (triples["doc"].to_numpy() - 1, triples["word"].to_numpy() - 1)),
        shape=(D, V),
    ).tocsr()
    vocab = None
    if vocab_path is not None:
        vocab = read_vocab(vocab_path)
        if len(vocab) != V:
            raise CorpusFormatError(f"{vocab_path}: {len(vocab)} tokens but the corpus declares V={V}")
    try:
        corpus = Corpus(counts=counts, doc_ids=[str(d + 1) for d in range(D)], vocab=vocab)
    except InvalidArgumentError as e:
        raise CorpusFormatError(f"{path}: {e}")
    logger.info(f"Loaded corpus {path.name}: D={D}, V={V}, tokens={int(corpus.total_tokens)}")
    return corpus


def write_uci_corpus(corpus: Corpus, path: PathLike, vocab_path: Optional[PathLike] = None):
    coo = corpus.counts.tocoo()
    order = np.lexsort((coo.col, coo.row))
    triples = pd.DataFrame({
        "doc": coo.row[order] + 1,
        "word": coo.col[order] + 1,
        "count": coo.data[order].astype(np.int64),
    })
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"{corpus.n_docs}\n{corpus.vocab_size}\n{len(triples)}\n")
        triples.to_csv(f, sep=" ", header=False, index=False, lineterminator="\n")
    if vocab_path is not None:
        vocab = corpus.vocab or [f"w{v}" for v in range(corpus.vocab_size)]
        with open(vocab_path, "w", encoding="utf-8", newline="\n") as f:
            f.writelines(f"{token}\n" for token in vocab)


def read_edges(path: PathLike) -> List[Tuple[str, str]]:
    """Whitespace-separated "nodeA nodeB" pairs, one per line"""
    try:
        frame = pd.read_csv(path, sep=r"\s+", header=None, dtype=str, engine="python", comment="#")
    except pd.errors.EmptyDataError:
        return []
    if frame.shape[1] != 2:
        raise CorpusFormatError(f"{path}: edge lines need exactly two node names")
    return list(zip(frame[0].tolist(), frame[1].tolist()))


def _align(frame: pd.DataFrame, doc_ids: Optional[Sequence[str]], path) -> pd.DataFrame:
    if DOC_ID_COLUMN not in frame.columns:
        raise CorpusFormatError(f"{path}: metadata needs a '{DOC_ID_COLUMN}' column")
    frame[DOC_ID_COLUMN] = frame[DOC_ID_COLUMN].astype(str).str.strip()
    if frame[DOC_ID_COLUMN].duplicated().any():
        raise CorpusFormatError(f"{path}: duplicate doc_id values")
    if doc_ids is None:
        return frame
    indexed = frame.set_index(DOC_ID_COLUMN)
    missing = [d for d in doc_ids if d not in indexed.index]
    if missing:
        raise CorpusFormatError(f"{path}: no metadata for documents {missing[:5]}")
    return indexed.loc[list(doc_ids)].reset_index()


def read_metadata(path: PathLike, doc_ids: Optional[Sequence[str]] = None,
                  edges_path: Optional[PathLike] = None) -> FeatureSpace:
    """
    Metadata CSV aligned to ``doc_ids``.

    With a "node" column and an edge file the result is a graph feature
    space over the documents' nodes; otherwise every column except doc_id
    and author must be numeric.
    """
    frame = pd.read_csv(path, dtype={DOC_ID_COLUMN: str})
    frame = _align(frame, doc_ids, path)

    if NODE_COLUMN in frame.columns:
        if edges_path is None:
            raise CorpusFormatError(f"{path}: a '{NODE_COLUMN}' column needs an edge file")
        nodes = frame[NODE_COLUMN].astype(str).tolist()
        try:
            return FeatureSpace.graph(nodes, read_edges(edges_path))
        except InvalidArgumentError as e:
            raise CorpusFormatError(f"{edges_path}: {e}")

    authors = frame[AUTHOR_COLUMN].astype(str).to_numpy() if AUTHOR_COLUMN in frame.columns else None
    numeric = frame.drop(columns=[c for c in (DOC_ID_COLUMN, AUTHOR_COLUMN) if c in frame.columns])
    if numeric.shape[1] == 0:
        raise CorpusFormatError(f"{path}: no numeric feature columns")
    try:
        values = numeric.apply(pd.to_numeric, errors="raise").to_numpy(dtype=float)
    except (ValueError, TypeError) as e:
        raise CorpusFormatError(f"{path}: feature columns must be numeric: {e}")
    if not np.all(np.isfinite(values)):
        raise CorpusFormatError(f"{path}: feature values must be finite")
    return FeatureSpace.euclidean(values, authors=authors, columns=list(numeric.columns))


def _token_fraction(doc_id: str, token: int) -> float:
    digest = hashlib.sha256(f"{doc_id}:{token}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") / 2.0 ** 64


def split_heldout(corpus: Corpus, fraction: float = 0.1) -> Tuple[Corpus, Corpus]:
    """
    Hold out token i of document d when a hash of (doc_id, i) falls below
    ``fraction``. Tokens are enumerated in word-id order; every held-in
    document keeps at least one token.
    """
    if not 0.0 <= fraction < 1.0:
        raise InvalidArgumentError(f"held-out fraction must be in [0, 1), got {fraction}")
    held_in = corpus.counts.copy().astype(float).tolil()
    held_out = sparse.lil_matrix(corpus.counts.shape)
    for d in range(corpus.n_docs):
        words, counts = corpus.document(d)
        tokens = np.repeat(words, counts.astype(int))
        out_mask = np.array([_token_fraction(corpus.doc_ids[d], i) < fraction for i in range(tokens.size)],
                            dtype=bool)
        if out_mask.all():
            out_mask[0] = False
        if not out_mask.any():
            continue
        removed = np.bincount(tokens[out_mask], minlength=corpus.vocab_size)
        for v in np.flatnonzero(removed):
            held_in[d, v] -= removed[v]
            held_out[d, v] = removed[v]
    kwargs = dict(doc_ids=list(corpus.doc_ids), vocab=corpus.vocab)
    train = Corpus(counts=held_in.tocsr(), **kwargs)
    test = Corpus(counts=held_out.tocsr(), allow_empty=True, **kwargs)
    logger.info(f"Held out {int(test.total_tokens)} of {int(corpus.total_tokens)} tokens")
    return train, test
