import numpy as np
import pytest

from ktm.core.errors import CorpusFormatError, InvalidArgumentError
from ktm.models.schemas import FeatureKind
from ktm.services.corpus import (
    read_edges,
    read_metadata,
    read_uci_corpus,
    read_vocab,
    split_heldout,
    write_uci_corpus,
)
from ktm.services.synthetic import generate_ktm_corpus
from ktm.services.vlda import Corpus


@pytest.fixture
def uci_file(tmp_path):
    path = tmp_path / "docword.txt"
    path.write_text("3\n4\n6\n1 1 2\n1 3 1\n2 2 4\n3 4 1\n3 1 1\n1 1 1\n")
    return path


@pytest.fixture
def vocab_file(tmp_path):
    path = tmp_path / "vocab.txt"
    path.write_text("apple\nbanana\ncherry\ndate\n")
    return path


class TestReadUciCorpus:
    def test_reads_counts(self, uci_file, vocab_file):
        """Test triples land in the right cells and duplicates are summed"""
        corpus = read_uci_corpus(uci_file, vocab_file)
        dense = corpus.counts.toarray()
        np.testing.assert_array_equal(dense, [[3, 0, 1, 0], [0, 4, 0, 0], [1, 0, 0, 1]])
        assert corpus.doc_ids == ["1", "2", "3"]
        assert corpus.vocab == ["apple", "banana", "cherry", "date"]

    def test_round_trip(self, tmp_path):
        """Test a written corpus reads back unchanged"""
        corpus = generate_ktm_corpus(n_docs=12, n_topics=3, vocab_size=15, doc_length=20, seed=1).corpus
        write_uci_corpus(corpus, tmp_path / "out.txt", tmp_path / "vocab.txt")
        back = read_uci_corpus(tmp_path / "out.txt", tmp_path / "vocab.txt")
        assert (back.counts != corpus.counts).nnz == 0
        assert back.vocab == corpus.vocab

    def test_bad_header(self, tmp_path):
        """Test a non-integer header line is reported with its line number"""
        path = tmp_path / "bad.txt"
        path.write_text("3\nfour\n1\n1 1 1\n")
        with pytest.raises(CorpusFormatError, match=":2:"):
            read_uci_corpus(path)

    def test_word_out_of_range(self, tmp_path):
        """Test word ids above V are rejected"""
        path = tmp_path / "bad.txt"
        path.write_text("1\n2\n2\n1 1 1\n1 3 1\n")
        with pytest.raises(CorpusFormatError, match=":5: word id"):
            read_uci_corpus(path)

    def test_non_integer_count(self, tmp_path):
        """Test fractional counts are rejected"""
        path = tmp_path / "bad.txt"
        path.write_text("1\n2\n1\n1 1 1.5\n")
        with pytest.raises(CorpusFormatError, match="non-integer count"):
            read_uci_corpus(path)

    def test_empty_document(self, tmp_path):
        """Test a document without triples is an error"""
        path = tmp_path / "bad.txt"
        path.write_text("2\n2\n1\n1 1 1\n")
        with pytest.raises(CorpusFormatError, match="no tokens"):
            read_uci_corpus(path)

    def test_vocab_size_mismatch(self, uci_file, tmp_path):
        """Test the vocabulary must have V entries"""
        vocab = tmp_path / "short.txt"
        vocab.write_text("a\nb\n")
        with pytest.raises(CorpusFormatError):
            read_uci_corpus(uci_file, vocab)

    def test_vocab_keeps_odd_tokens(self, tmp_path):
        """Test tokens with commas and quotes are read verbatim"""
        path = tmp_path / "vocab.txt"
        path.write_text('a,b\n"q"\nnull\n')
        assert read_vocab(path) == ["a,b", '"q"', "null"]


class TestReadMetadata:
    def test_euclidean_with_author(self, tmp_path):
        """Test numeric columns become features aligned to the doc ids"""
        path = tmp_path / "meta.csv"
        path.write_text("doc_id,year,author\n2,1999,smith\n1,1987,jones\n")
        features = read_metadata(path, doc_ids=["1", "2"])
        assert features.kind == FeatureKind.EUCLIDEAN
        np.testing.assert_array_equal(features.values[:, 0], [1987.0, 1999.0])
        assert list(features.authors) == ["jones", "smith"]
        assert features.columns == ("year",)

    def test_missing_document(self, tmp_path):
        """Test every corpus document needs a metadata row"""
        path = tmp_path / "meta.csv"
        path.write_text("doc_id,year\n1,1990\n")
        with pytest.raises(CorpusFormatError, match="no metadata"):
            read_metadata(path, doc_ids=["1", "2"])

    def test_non_numeric_feature(self, tmp_path):
        """Test text in a feature column is rejected"""
        path = tmp_path / "meta.csv"
        path.write_text("doc_id,year\n1,recent\n")
        with pytest.raises(CorpusFormatError):
            read_metadata(path)

    def test_graph_metadata(self, tmp_path):
        """Test a node column with an edge file gives graph features"""
        meta = tmp_path / "meta.csv"
        meta.write_text("doc_id,node\n1,p1\n2,p2\n3,p3\n")
        edges = tmp_path / "edges.txt"
        edges.write_text("p1 p2\np2 p3\n")
        features = read_metadata(meta, doc_ids=["1", "2", "3"], edges_path=edges)
        assert features.kind == FeatureKind.GRAPH
        assert features.values[0, 2] == 2.0
        assert read_edges(edges) == [("p1", "p2"), ("p2", "p3")]

    def test_graph_needs_edges(self, tmp_path):
        """Test a node column without an edge file is an error"""
        meta = tmp_path / "meta.csv"
        meta.write_text("doc_id,node\n1,p1\n")
        with pytest.raises(CorpusFormatError):
            read_metadata(meta)

    def test_edge_to_unknown_node(self, tmp_path):
        """Test edges must stay inside the documents' nodes"""
        meta = tmp_path / "meta.csv"
        meta.write_text("doc_id,node\n1,p1\n2,p2\n")
        edges = tmp_path / "edges.txt"
        edges.write_text("p1 p9\n")
        with pytest.raises(CorpusFormatError, match="unknown node"):
            read_metadata(meta, edges_path=edges)


class TestSplitHeldout:
    @pytest.fixture
    def corpus(self):
        return generate_ktm_corpus(n_docs=20, n_topics=3, vocab_size=30, doc_length=25, seed=4).corpus

    def test_tokens_conserved(self, corpus):
        """Test held-in plus held-out equals the original counts"""
        train, test = split_heldout(corpus, 0.2)
        np.testing.assert_array_equal((train.counts + test.counts).toarray(), corpus.counts.toarray())
        assert 0 < test.total_tokens < corpus.total_tokens

    def test_every_document_keeps_a_token(self):
        """Test a held-out fraction near one still leaves one token per document"""
        corpus = Corpus.from_documents([{0: 1}, {1: 2}, {0: 1, 2: 1}], vocab_size=3)
        train, _ = split_heldout(corpus, 0.999)
        assert np.all(train.doc_lengths >= 1)

    def test_deterministic(self, corpus):
        """Test the split depends only on the corpus"""
        a, _ = split_heldout(corpus, 0.3)
        b, _ = split_heldout(corpus, 0.3)
        assert (a.counts != b.counts).nnz == 0

    def test_zero_fraction(self, corpus):
        """Test holding out nothing returns the full corpus"""
        train, test = split_heldout(corpus, 0.0)
        assert train.total_tokens == corpus.total_tokens
        assert test.total_tokens == 0

    def test_fraction_range(self, corpus):
        """Test fractions outside [0, 1) are rejected"""
        with pytest.raises(InvalidArgumentError):
            split_heldout(corpus, 1.0)
