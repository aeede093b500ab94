"""Multilingual instruction corpus and embedding matrix I/O.

A corpus file is UTF-8 JSON lines.  Line 1 is a header object declaring the
factor label inventories; every following line is one record:

    {"tasks": [...], "languages": [...], "emotions": [...], "intents": [...]}
    {"dialog_id": "d0", "task": "faq", "language": "en", "emotion": "neutral",
     "intent": "inquiry", "en_q": "...", "zh_q": "...", "hi_q": "...",
     "en_a": "...", "zh_a": "...", "hi_a": "..."}

Records are aligned triplets: the three query fields must be non-empty,
dialog ids unique, and factor labels drawn from the header inventories.

Embedding matrices live in a small binary format (magic ``ECRE``) holding
little-endian float32 data plus the row id table; round trips are bit-exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields

import numpy as np

from .binio import ByteReader, ByteWriter, atomic_write_text, read_envelope, write_envelope

EMBEDDING_MAGIC = b"ECRE"
EMBEDDING_VERSION = 1

LANGUAGES = ("en", "zh", "hi")

# Factor code -> record field carrying its label.  "P" (tone/strategy) has no
# corpus field; it is only derivable by clustering.
FACTOR_FIELDS = {"T": "task", "L": "language", "E": "emotion", "I": "intent"}

QUERY_FIELDS = ("en_q", "zh_q", "hi_q")


class CorpusError(ValueError):
    """Raised on malformed corpus files or invariant violations."""


@dataclass(frozen=True)
class CorpusRecord:
    dialog_id: str
    task: str
    language: str
    emotion: str
    intent: str
    en_q: str
    zh_q: str
    hi_q: str
    en_a: str
    zh_a: str
    hi_a: str

    def query(self, language: str) -> str:
        if language not in LANGUAGES:
            raise CorpusError(f"unknown language {language!r}")
        return getattr(self, f"{language}_q")

    def answer(self, language: str) -> str:
        if language not in LANGUAGES:
            raise CorpusError(f"unknown language {language!r}")
        return getattr(self, f"{language}_a")


RECORD_FIELDS = tuple(f.name for f in fields(CorpusRecord))


@dataclass(frozen=True)
class CorpusHeader:
    """Finite label inventories for the four labeled factors."""

    tasks: tuple[str, ...]
    languages: tuple[str, ...]
    emotions: tuple[str, ...]
    intents: tuple[str, ...]

    def __post_init__(self) -> None:
        for name in ("tasks", "languages", "emotions", "intents"):
            values = getattr(self, name)
            if not values:
                raise CorpusError(f"header inventory {name!r} is empty")
            if len(set(values)) != len(values):
                raise CorpusError(f"header inventory {name!r} has duplicates")
        unknown = [l for l in self.languages if l not in LANGUAGES]
        if unknown:
            raise CorpusError(f"unsupported language {unknown[0]!r} in header")

    def inventory(self, factor_field: str) -> tuple[str, ...]:
        try:
            return {
                "task": self.tasks,
                "language": self.languages,
                "emotion": self.emotions,
                "intent": self.intents,
            }[factor_field]
        except KeyError:
            raise CorpusError(f"unknown factor field {factor_field!r}") from None


@dataclass
class Corpus:
    """Validated, immutable-after-load record collection."""

    header: CorpusHeader
    records: list[CorpusRecord]
    _by_id: dict[str, CorpusRecord] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        if not self._by_id:
            for rec in self.records:
                if rec.dialog_id in self._by_id:
                    raise CorpusError(f"duplicate dialog_id {rec.dialog_id!r}")
                validate_record(rec, self.header)
                self._by_id[rec.dialog_id] = rec

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def get(self, dialog_id: str) -> CorpusRecord:
        try:
            return self._by_id[dialog_id]
        except KeyError:
            raise CorpusError(f"unknown dialog_id {dialog_id!r}") from None

    def counts_by(self, field_name: str) -> dict[str, int]:
        counts: dict[str, int] = {}
        for rec in self.records:
            label = getattr(rec, field_name)
            counts[label] = counts.get(label, 0) + 1
        return counts

    def factor_counts(self) -> dict[str, dict[str, int]]:
        """Per-factor label counts, the summary reported after loading."""
        return {f: self.counts_by(f) for f in ("language", "task", "emotion", "intent")}


def validate_record(rec: CorpusRecord, header: CorpusHeader, where: str = "") -> None:
    ctx = f" ({where})" if where else ""
    for name in QUERY_FIELDS:
        if not getattr(rec, name).strip():
            raise CorpusError(f"record {rec.dialog_id!r}{ctx}: field {name!r} is empty")
    for field_name in ("task", "language", "emotion", "intent"):
        label = getattr(rec, field_name)
        if label not in header.inventory(field_name):
            raise CorpusError(
                f"record {rec.dialog_id!r}{ctx}: {field_name} label {label!r} "
                f"not in header inventory"
            )


def _parse_header(obj: dict) -> CorpusHeader:
    missing = [k for k in ("tasks", "languages", "emotions", "intents") if k not in obj]
    if missing:
        raise CorpusError(f"header line missing inventories: {missing}")
    return CorpusHeader(
        tasks=tuple(obj["tasks"]),
        languages=tuple(obj["languages"]),
        emotions=tuple(obj["emotions"]),
        intents=tuple(obj["intents"]),
    )


def load_corpus(path: str) -> Corpus:
    """Parse and validate a corpus file.

    Raises :class:`CorpusError` naming the offending line on malformed JSON,
    missing/empty fields, unknown labels, or duplicate dialog ids.
    """
    records: list[CorpusRecord] = []
    header: CorpusHeader | None = None
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: malformed line: {exc.msg}") from exc
            if header is None:
                header = _parse_header(obj)
                continue
            missing = [k for k in RECORD_FIELDS if k not in obj]
            if missing:
                raise CorpusError(f"{path}:{lineno}: record missing field {missing[0]!r}")
            rec = CorpusRecord(**{k: str(obj[k]) for k in RECORD_FIELDS})
            if rec.dialog_id in seen:
                raise CorpusError(f"{path}:{lineno}: duplicate dialog_id {rec.dialog_id!r}")
            seen.add(rec.dialog_id)
            validate_record(rec, header, where=f"{path}:{lineno}")
            records.append(rec)
    if header is None:
        raise CorpusError(f"{path}: empty file, expected a header line")
    return Corpus(header=header, records=records)


def save_corpus(corpus: Corpus, path: str) -> None:
    lines = [
        json.dumps(
            {
                "tasks": list(corpus.header.tasks),
                "languages": list(corpus.header.languages),
                "emotions": list(corpus.header.emotions),
                "intents": list(corpus.header.intents),
            },
            ensure_ascii=False,
        )
    ]
    for rec in corpus.records:
        lines.append(
            json.dumps({k: getattr(rec, k) for k in RECORD_FIELDS}, ensure_ascii=False)
        )
    atomic_write_text(path, "\n".join(lines) + "\n")


@dataclass
class EmbeddingMatrix:
    """n x d float32 matrix with row ids aligned to row order."""

    data: np.ndarray
    ids: list[str]
    _row_of: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise CorpusError("embedding data must be 2-dimensional")
        if len(self.ids) != self.data.shape[0]:
            raise CorpusError(
                f"id count {len(self.ids)} does not match row count {self.data.shape[0]}"
            )
        if not self._row_of:
            self._row_of = {i: r for r, i in enumerate(self.ids)}

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]

    def row(self, sample_id: str) -> np.ndarray:
        try:
            return self.data[self._row_of[sample_id]]
        except KeyError:
            raise CorpusError(f"unknown sample id {sample_id!r}") from None


def save_embeddings(matrix: EmbeddingMatrix, path: str) -> None:
    w = ByteWriter()
    w.u64(matrix.n)
    w.u64(matrix.d)
    w.array(matrix.data, "float32")
    w.text_list(matrix.ids)
    write_envelope(path, EMBEDDING_MAGIC, EMBEDDING_VERSION, w.getvalue())


def load_embeddings(path: str) -> EmbeddingMatrix:
    """Load a matrix, rejecting truncated data and non-finite values."""
    r = ByteReader(read_envelope(path, EMBEDDING_MAGIC, EMBEDDING_VERSION))
    n = r.u64()
    d = r.u64()
    data = r.array("float32")
    if data.shape != (n, d):
        raise CorpusError(
            f"{path}: declared shape ({n}, {d}) does not match stored data {data.shape}"
        )
    ids = r.text_list()
    if len(ids) != n:
        raise CorpusError(f"{path}: id table has {len(ids)} entries for {n} rows")
    bad = np.where(~np.isfinite(data).all(axis=1))[0]
    if bad.size:
        raise CorpusError(f"{path}: non-finite value in row {int(bad[0])}")
    return EmbeddingMatrix(data=data, ids=ids)


def normalize(vec: np.ndarray) -> np.ndarray:
    """Scale ``vec`` to unit L2 norm.  Zero vectors are a domain error."""
    arr = np.asarray(vec, dtype=np.float64)
    norm = math.sqrt(float(np.dot(arr.ravel(), arr.ravel())))
    if norm == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return arr / norm
