"""Corpus and embedding I/O contracts."""

import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import build_corpus, embeddings_for
from ecr.corpus import (
    Corpus,
    CorpusError,
    CorpusHeader,
    CorpusRecord,
    EmbeddingMatrix,
    load_corpus,
    load_embeddings,
    normalize,
    save_corpus,
    save_embeddings,
)


def test_round_trip(tmp_path, tiny_corpus):
    path = str(tmp_path / "c.jsonl")
    save_corpus(tiny_corpus, path)
    loaded = load_corpus(path)
    assert loaded.header == tiny_corpus.header
    assert loaded.records == tiny_corpus.records


def test_save_is_deterministic(tmp_path, tiny_corpus):
    p1 = str(tmp_path / "a.jsonl")
    p2 = str(tmp_path / "b.jsonl")
    save_corpus(tiny_corpus, p1)
    save_corpus(tiny_corpus, p2)
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_header_inventories(tiny_corpus):
    assert tiny_corpus.header.inventory("task") == ("booking", "support")
    assert tiny_corpus.header.inventory("language") == ("en", "zh", "hi")
    with pytest.raises(CorpusError):
        tiny_corpus.header.inventory("flavor")


def test_get_by_dialog_id(tiny_corpus):
    assert tiny_corpus.get("d001").language == "zh"
    with pytest.raises(CorpusError, match="d999"):
        tiny_corpus.get("d999")


def test_counts_by_factor(tiny_corpus):
    assert tiny_corpus.counts_by("task") == {"booking": 2, "support": 2}
    assert tiny_corpus.counts_by("language") == {"en": 2, "hi": 1, "zh": 1}


def test_duplicate_dialog_id_rejected(tmp_path, tiny_corpus):
    path = str(tmp_path / "c.jsonl")
    save_corpus(tiny_corpus, path)
    lines = open(path).read().splitlines()
    lines.append(lines[1])
    open(path, "w").write("\n".join(lines) + "\n")
    with pytest.raises(CorpusError, match="duplicate"):
        load_corpus(path)


def test_unknown_label_rejected(tmp_path, tiny_corpus):
    path = str(tmp_path / "c.jsonl")
    save_corpus(tiny_corpus, path)
    lines = open(path).read().splitlines()
    rec = json.loads(lines[1])
    rec["task"] = "smalltalk"
    lines[1] = json.dumps(rec)
    open(path, "w").write("\n".join(lines) + "\n")
    with pytest.raises(CorpusError, match="smalltalk"):
        load_corpus(path)


def test_empty_query_rejected(tmp_path, tiny_corpus):
    path = str(tmp_path / "c.jsonl")
    save_corpus(tiny_corpus, path)
    lines = open(path).read().splitlines()
    rec = json.loads(lines[1])
    rec["zh_q"] = "   "
    lines[1] = json.dumps(rec)
    open(path, "w").write("\n".join(lines) + "\n")
    with pytest.raises(CorpusError, match="zh_q"):
        load_corpus(path)


def test_missing_field_names_line(tmp_path, tiny_corpus):
    path = str(tmp_path / "c.jsonl")
    save_corpus(tiny_corpus, path)
    lines = open(path).read().splitlines()
    rec = json.loads(lines[2])
    del rec["intent"]
    lines[2] = json.dumps(rec)
    open(path, "w").write("\n".join(lines) + "\n")
    with pytest.raises(CorpusError, match=":3"):
        load_corpus(path)


def test_malformed_json_names_line(tmp_path):
    path = str(tmp_path / "c.jsonl")
    open(path, "w").write('{"tasks": ["a"], "languages": ["en", "zh", "hi"], '
                          '"emotions": ["x"], "intents": ["y"]}\n{oops\n')
    with pytest.raises(CorpusError, match=":2"):
        load_corpus(path)


def test_empty_file_rejected(tmp_path):
    path = str(tmp_path / "c.jsonl")
    open(path, "w").write("")
    with pytest.raises(CorpusError):
        load_corpus(path)


def test_record_query_answer_accessors(tiny_corpus):
    rec = tiny_corpus.get("d000")
    assert rec.query("zh") == "ding zuo"
    assert rec.answer("hi") == "ho gaya"
    with pytest.raises(CorpusError):
        rec.query("fr")


# ---------------------------------------------------------------------------
# Embeddings


def test_embeddings_round_trip(tmp_path):
    m = embeddings_for(["a", "b", "c"], d=5, seed=1)
    path = str(tmp_path / "e.bin")
    save_embeddings(m, path)
    loaded = load_embeddings(path)
    assert loaded.ids == m.ids
    assert loaded.data.dtype == np.float32
    assert np.array_equal(loaded.data, m.data)


def test_embeddings_row_lookup():
    m = embeddings_for(["a", "b"], d=4)
    assert np.array_equal(m.row("b"), m.data[1])
    with pytest.raises(CorpusError, match="zz"):
        m.row("zz")


def test_embeddings_non_finite_rejected(tmp_path):
    data = np.zeros((2, 3), dtype=np.float32)
    data[1, 2] = np.inf
    m = EmbeddingMatrix(data=data, ids=["a", "b"])
    path = str(tmp_path / "e.bin")
    save_embeddings(m, path)
    with pytest.raises(CorpusError, match="row 1"):
        load_embeddings(path)


def test_embeddings_id_count_mismatch():
    with pytest.raises(CorpusError):
        EmbeddingMatrix(data=np.zeros((2, 3), dtype=np.float32), ids=["only"])


# ---------------------------------------------------------------------------
# normalize


def test_normalize_three_four_five():
    out = normalize(np.array([3.0, 4.0]))
    assert np.allclose(out, [0.6, 0.8], atol=1e-12)


def test_normalize_zero_vector_rejected():
    with pytest.raises(ValueError, match="zero vector"):
        normalize(np.zeros(4))


@given(
    st.lists(
        st.floats(min_value=-1e6, max_value=1e6, allow_nan=False),
        min_size=1,
        max_size=16,
    ).filter(lambda v: any(abs(x) > 1e-6 for x in v))
)
def test_normalize_unit_norm(vec):
    out = normalize(np.array(vec, dtype=np.float64))
    assert abs(float(np.linalg.norm(out)) - 1.0) < 1e-9


def test_corpus_header_rejects_empty_inventory():
    with pytest.raises(CorpusError):
        CorpusHeader(tasks=(), languages=("en", "zh", "hi"), emotions=("x",), intents=("y",))


def test_corpus_rejects_bad_record_language():
    rec = CorpusRecord(
        dialog_id="d0", task="t", language="fr", emotion="e", intent="i",
        en_q="q", zh_q="q", hi_q="q", en_a="a", zh_a="a", hi_a="a",
    )
    header = CorpusHeader(tasks=("t",), languages=("en", "zh", "hi"),
                          emotions=("e",), intents=("i",))
    with pytest.raises(CorpusError, match="language"):
        Corpus(header=header, records=[rec])
