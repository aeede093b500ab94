"""Control-token codec: cosine projection, quantization, prefix assembly.

Given an utterance embedding h and a frozen anchor set, the codec computes
the cosine affinity between normalized h and every normalized anchor,
discretizes each affinity into one of B equal-width bins over [-1, 1], and
renders the result as control tokens such as ``<L0:3>``.  Prepending those
tokens to the input ids realizes the conditioned sequence x' = [t, x].

Everything here is a pure read of the anchor set: no operation writes to
it, so anchor checksums are stable across any amount of encoding.  Token
ids live in a dedicated vocabulary block of size total_k * B appended
after a base vocabulary, with id = base + (flat anchor index) * B + bin.

Two emission modes exist: global (every anchor contributes a token) and
retrieval-guided (only the top-k strongest anchors contribute, either per
factor or over the whole set).  Selected tokens always render in canonical
order: factors T, L, E, I, P, then ascending anchor index.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .anchors import AnchorSet
from .corpus import normalize


class CodecError(ValueError):
    """Raised on invalid codec inputs or malformed token text."""


@dataclass(frozen=True)
class ControlToken:
    """One quantized affinity: factor code, anchor index within factor, bin."""

    factor: str
    anchor: int
    bin: int

    def render(self) -> str:
        return f"<{self.factor}{self.anchor}:{self.bin}>"


_TOKEN_RE = re.compile(r"^<([TLEIP])(\d+):(\d+)>$")


def parse_token(text: str) -> ControlToken:
    m = _TOKEN_RE.match(text)
    if m is None:
        raise CodecError(f"malformed control token {text!r}")
    return ControlToken(factor=m.group(1), anchor=int(m.group(2)), bin=int(m.group(3)))


@dataclass(frozen=True)
class AffinityVector:
    """Cosine affinities of one embedding against every anchor, flat order."""

    values: np.ndarray  # (total_k,) float64 in [-1, 1]
    factors: tuple[str, ...]
    group_sizes: tuple[int, ...]
    anchor_ref: str  # checksum of the anchor set the values came from

    @property
    def k(self) -> int:
        return self.values.shape[0]

    def group_slice(self, factor: str) -> slice:
        pos = 0
        for f, size in zip(self.factors, self.group_sizes):
            if f == factor:
                return slice(pos, pos + size)
            pos += size
        raise CodecError(f"no factor {factor!r} in affinity vector")


@dataclass(frozen=True)
class ControlCode:
    """Quantized affinities: one bin per anchor, flat canonical order."""

    bins: np.ndarray  # (total_k,) int64 in [0, n_bins)
    n_bins: int
    factors: tuple[str, ...]
    group_sizes: tuple[int, ...]

    @property
    def k(self) -> int:
        return self.bins.shape[0]


@dataclass(frozen=True)
class ControlPrefix:
    """Rendered prefix: token objects, their vocabulary ids, and text form."""

    tokens: tuple[ControlToken, ...]
    token_ids: tuple[int, ...]
    text: str

    def __len__(self) -> int:
        return len(self.tokens)


def project(h: np.ndarray, anchors: AnchorSet) -> AffinityVector:
    """Cosine affinity of h against every anchor (cost O(Kd)).

    Both sides are unit-normalized, so each component is a cosine in
    [-1, 1]; values are clipped to that range to absorb rounding.
    """
    h = np.asarray(h, dtype=np.float64).ravel()
    if h.shape[0] != anchors.d:
        raise CodecError(
            f"embedding dimension {h.shape[0]} does not match anchors d={anchors.d}"
        )
    values = anchors.stacked_unit() @ normalize(h)
    np.clip(values, -1.0, 1.0, out=values)
    return AffinityVector(
        values=values,
        factors=anchors.factors,
        group_sizes=anchors.group_sizes,
        anchor_ref=anchors.checksum(),
    )


def quantize_value(c: float, n_bins: int) -> int:
    """Map one affinity in [-1, 1] to bin = clamp(floor((c+1)/2 * B), 0, B-1).

    Equal-width bins over [-1, 1]; the right edge c = 1.0 folds into the
    top bin, so the output covers exactly {0, ..., n_bins - 1}.
    """
    if n_bins < 2:
        raise CodecError(f"n_bins must be at least 2, got {n_bins}")
    if not -1.0 <= c <= 1.0:
        raise CodecError(f"affinity {c} outside [-1, 1]")
    b = int(np.floor((c + 1.0) / 2.0 * n_bins))
    return min(max(b, 0), n_bins - 1)


def quantize(affinity: AffinityVector, n_bins: int) -> ControlCode:
    if n_bins < 2:
        raise CodecError(f"n_bins must be at least 2, got {n_bins}")
    scaled = np.floor((affinity.values + 1.0) / 2.0 * n_bins)
    bins = np.clip(scaled.astype(np.int64), 0, n_bins - 1)
    return ControlCode(
        bins=bins,
        n_bins=n_bins,
        factors=affinity.factors,
        group_sizes=affinity.group_sizes,
    )


@dataclass(frozen=True)
class TokenVocabulary:
    """Bijection between control tokens and a contiguous id block.

    Ids start at ``base_size`` (the underlying text vocabulary size) and
    cover exactly total_k * n_bins entries.
    """

    base_size: int
    n_bins: int
    factors: tuple[str, ...]
    group_sizes: tuple[int, ...]

    @property
    def total_k(self) -> int:
        return sum(self.group_sizes)

    @property
    def size(self) -> int:
        return self.total_k * self.n_bins

    def _group_bounds(self, factor: str) -> tuple[int, int]:
        pos = 0
        for f, k in zip(self.factors, self.group_sizes):
            if f == factor:
                return pos, k
            pos += k
        raise CodecError(f"no factor {factor!r} in vocabulary")

    def token_id(self, token: ControlToken) -> int:
        offset, k = self._group_bounds(token.factor)
        if not 0 <= token.anchor < k:
            raise CodecError(
                f"anchor index {token.anchor} out of range for factor "
                f"{token.factor} with {k} anchors"
            )
        if not 0 <= token.bin < self.n_bins:
            raise CodecError(f"bin {token.bin} out of range for n_bins={self.n_bins}")
        return self.base_size + (offset + token.anchor) * self.n_bins + token.bin

    def token_of(self, token_id: int) -> ControlToken:
        offset = token_id - self.base_size
        if not 0 <= offset < self.size:
            raise CodecError(f"token id {token_id} outside control block")
        flat, bin_ = divmod(offset, self.n_bins)
        pos = 0
        for f, k in zip(self.factors, self.group_sizes):
            if flat < pos + k:
                return ControlToken(factor=f, anchor=flat - pos, bin=bin_)
            pos += k
        raise CodecError(f"token id {token_id} outside control block")

    def is_control_id(self, token_id: int) -> bool:
        return self.base_size <= token_id < self.base_size + self.size


def token_vocabulary(anchors: AnchorSet, n_bins: int, base_size: int) -> TokenVocabulary:
    if n_bins < 2:
        raise CodecError(f"n_bins must be at least 2, got {n_bins}")
    if base_size < 0:
        raise CodecError(f"base_size must be non-negative, got {base_size}")
    return TokenVocabulary(
        base_size=base_size,
        n_bins=n_bins,
        factors=anchors.factors,
        group_sizes=anchors.group_sizes,
    )


def _render(tokens: list[ControlToken], vocab: TokenVocabulary | None) -> ControlPrefix:
    ids: tuple[int, ...] = ()
    if vocab is not None:
        ids = tuple(vocab.token_id(t) for t in tokens)
    return ControlPrefix(
        tokens=tuple(tokens),
        token_ids=ids,
        text="".join(t.render() for t in tokens),
    )


def emit_tokens(
    code: ControlCode,
    anchors: AnchorSet,
    vocab: TokenVocabulary | None = None,
) -> ControlPrefix:
    """Render a full control code as one token per anchor, canonical order."""
    if code.k != anchors.total_k:
        raise CodecError(
            f"code length {code.k} does not match anchor count {anchors.total_k}"
        )
    if code.factors != anchors.factors or code.group_sizes != anchors.group_sizes:
        raise CodecError("code factor layout does not match the anchor set")
    if np.any((code.bins < 0) | (code.bins >= code.n_bins)):
        raise CodecError(f"bin out of range for n_bins={code.n_bins}")
    tokens: list[ControlToken] = []
    pos = 0
    for factor, k in zip(code.factors, code.group_sizes):
        for a in range(k):
            tokens.append(ControlToken(factor=factor, anchor=a, bin=int(code.bins[pos + a])))
        pos += k
    return _render(tokens, vocab)


def decode_tokens(tokens: tuple[ControlToken, ...] | list[ControlToken], anchors: AnchorSet, n_bins: int) -> ControlCode:
    """Inverse of :func:`emit_tokens` for full prefixes."""
    if len(tokens) != anchors.total_k:
        raise CodecError(
            f"{len(tokens)} tokens cannot decode against {anchors.total_k} anchors"
        )
    offsets = anchors.group_offsets()
    bins = np.full(anchors.total_k, -1, dtype=np.int64)
    for tok in tokens:
        if tok.factor not in offsets:
            raise CodecError(f"token factor {tok.factor!r} not in anchor set")
        k = anchors.group(tok.factor).k
        if not 0 <= tok.anchor < k:
            raise CodecError(f"anchor index {tok.anchor} out of range for {tok.factor}")
        if not 0 <= tok.bin < n_bins:
            raise CodecError(f"bin {tok.bin} out of range for n_bins={n_bins}")
        flat = offsets[tok.factor] + tok.anchor
        if bins[flat] != -1:
            raise CodecError(f"duplicate token for anchor {tok.factor}{tok.anchor}")
        bins[flat] = tok.bin
    return ControlCode(
        bins=bins,
        n_bins=n_bins,
        factors=anchors.factors,
        group_sizes=anchors.group_sizes,
    )


def topk_anchors(h: np.ndarray, anchors: AnchorSet, k: int) -> list[int]:
    """Flat indices of the k nearest anchors by cosine, descending.

    Ties break toward the lower flat index, so the ranking is
    deterministic.
    """
    affinity = project(h, anchors)
    total = affinity.k
    if not 1 <= k <= total:
        raise CodecError(f"k must be in [1, {total}], got {k}")
    order = np.argsort(-affinity.values, kind="stable")
    return [int(i) for i in order[:k]]


def _topk_flat(affinity: AffinityVector, k: int, scope: str) -> list[int]:
    """Selected flat indices for retrieval mode, canonical (ascending) order."""
    values = affinity.values
    if scope == "all":
        if not 1 <= k <= values.shape[0]:
            raise CodecError(f"k must be in [1, {values.shape[0]}], got {k}")
        order = np.argsort(-values, kind="stable")
        return sorted(int(i) for i in order[:k])
    chosen: list[int] = []
    pos = 0
    for size in affinity.group_sizes:
        block = values[pos : pos + size]
        order = np.argsort(-block, kind="stable")
        chosen.extend(int(pos + i) for i in order[: min(k, size)])
        pos += size
    return sorted(chosen)


def encode(
    h: np.ndarray,
    anchors: AnchorSet,
    n_bins: int,
    mode: str = "global",
    k: int | None = None,
    scope: str = "factor",
    vocab: TokenVocabulary | None = None,
) -> ControlPrefix:
    """Full encode path: project, quantize, select, render.

    Global mode emits one token per anchor.  Retrieval mode keeps only the
    top-k strongest anchors (k defaults to 1 per factor; scope "all" ranks
    the whole set instead), emitted in canonical order regardless of
    affinity rank so equal selections always render identically.  Without
    a vocabulary the prefix carries token objects and text but no ids.
    """
    if mode not in ("global", "retrieval"):
        raise CodecError(f"unknown encode mode {mode!r}")
    if scope not in ("factor", "all"):
        raise CodecError(f"unknown top-k scope {scope!r}")
    if vocab is not None and vocab.n_bins != n_bins:
        raise CodecError(
            f"vocabulary n_bins={vocab.n_bins} does not match encode n_bins={n_bins}"
        )
    affinity = project(h, anchors)
    code = quantize(affinity, n_bins)
    full = emit_tokens(code, anchors)
    if mode == "global":
        return _render(list(full.tokens), vocab)
    chosen = _topk_flat(affinity, 1 if k is None else k, scope)
    return _render([full.tokens[i] for i in chosen], vocab)


def build_input(prefix: ControlPrefix, input_ids: list[int] | np.ndarray) -> np.ndarray:
    """Conditioned sequence x' = [t, x]: control ids then the original ids."""
    if not prefix.token_ids and prefix.tokens:
        raise CodecError("prefix has no token ids; encode with a vocabulary first")
    x = np.asarray(input_ids, dtype=np.int64).ravel()
    return np.concatenate([np.asarray(prefix.token_ids, dtype=np.int64), x])
