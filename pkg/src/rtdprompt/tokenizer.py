"""WordPiece tokenizer with character-span tracking.

Spans matter here: the prompt engine marks the label-word characters and
needs to know exactly which token positions they became, even after
truncation, so the scorer reads replaced-probabilities at the right slots.
"""
from __future__ import annotations

import unicodedata
from dataclasses import dataclass, field

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)
MAX_WORD_CHARS = 100


class VocabError(ValueError):
    pass


class TruncationError(ValueError):
    """A marked span cannot survive truncation to max_len."""


@dataclass(frozen=True)
class Vocab:
    token_to_id: dict
    id_to_token: list
    lowercase: bool = True

    @property
    def pad_id(self) -> int:
        return self.token_to_id[PAD]

    @property
    def unk_id(self) -> int:
        return self.token_to_id[UNK]

    @property
    def cls_id(self) -> int:
        return self.token_to_id[CLS]

    @property
    def sep_id(self) -> int:
        return self.token_to_id[SEP]

    @property
    def mask_id(self) -> int:
        return self.token_to_id[MASK]

    @property
    def special_ids(self) -> frozenset:
        return frozenset(self.token_to_id[t] for t in SPECIAL_TOKENS)

    def __len__(self) -> int:
        return len(self.id_to_token)


@dataclass
class Encoding:
    """Token ids plus per-token source spans (None for special tokens)."""
    ids: list
    spans: list           # (start, end) char range within its segment, or None
    segment_ids: list
    marked: list = field(default_factory=list)  # (tok_start, tok_end) ranges

    def __post_init__(self):
        assert len(self.ids) == len(self.spans) == len(self.segment_ids)


def load_vocab(path, lowercase: bool = True) -> Vocab:
    """Read a one-token-per-line vocabulary file; id = zero-based line index."""
    token_to_id: dict = {}
    id_to_token: list = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            tok = line.rstrip("\n")
            if tok in token_to_id:
                raise VocabError(f"duplicate token {tok!r} at line {i}")
            token_to_id[tok] = i
            id_to_token.append(tok)
    for sp in SPECIAL_TOKENS:
        if sp not in token_to_id:
            raise VocabError(f"vocabulary is missing special token {sp}")
    return Vocab(token_to_id, id_to_token, lowercase=lowercase)


def _is_punct(ch: str) -> bool:
    cp = ord(ch)
    if (33 <= cp <= 47) or (58 <= cp <= 64) or (91 <= cp <= 96) or (123 <= cp <= 126):
        return True
    return unicodedata.category(ch).startswith("P")


def _normalize_word(word: str, lowercase: bool) -> str:
    if not lowercase:
        return word
    out = []
    for ch in unicodedata.normalize("NFD", word.lower()):
        if unicodedata.category(ch) != "Mn":
            out.append(ch)
    return "".join(out)


def _split_words(text: str):
    """Yield (word, start, end) split on whitespace with punctuation isolated."""
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
            continue
        if _is_punct(ch):
            yield ch, i, i + 1
            i += 1
            continue
        j = i
        while j < n and not text[j].isspace() and not _is_punct(text[j]):
            j += 1
        yield text[i:j], i, j
        i = j


def wordpiece(text: str, vocab: Vocab):
    """Greedy longest-match-first segmentation into vocabulary pieces."""
    return [tok for tok, _ in wordpiece_with_spans(text, vocab)]


def wordpiece_with_spans(text: str, vocab: Vocab):
    """Like wordpiece() but each piece carries its (start, end) char span."""
    pieces = []
    for word, start, end in _split_words(text):
        norm = _normalize_word(word, vocab.lowercase)
        if not norm:
            continue
        if len(norm) > MAX_WORD_CHARS:
            pieces.append((UNK, (start, end)))
            continue
        # Greedy matching runs over the normalized word; spans are reported
        # against the original word, which keeps span arithmetic exact as
        # long as normalization preserves length (true for lowercasing,
        # approximate under accent stripping).
        sub = []
        pos = 0
        ok = True
        while pos < len(norm):
            stop = len(norm)
            match = None
            while stop > pos:
                cand = norm[pos:stop]
                if pos > 0:
                    cand = "##" + cand
                if cand in vocab.token_to_id:
                    match = cand
                    break
                stop -= 1
            if match is None:
                ok = False
                break
            span_lo = start + min(pos, len(word))
            span_hi = start + min(stop, len(word))
            sub.append((match, (span_lo, span_hi)))
            pos = stop
        if ok:
            pieces.extend(sub)
        else:
            pieces.append((UNK, (start, end)))
    return pieces


def _mark_tokens(piece_spans, marked_spans):
    """Map each marked char span to the token-index range overlapping it."""
    ranges = []
    for lo, hi in marked_spans:
        idxs = [i for i, (s, e) in enumerate(piece_spans) if s < hi and e > lo]
        if not idxs:
            raise ValueError(f"marked span ({lo},{hi}) covers no tokens")
        ranges.append((min(idxs), max(idxs) + 1))
    return ranges


def build_sequence(segments, vocab: Vocab, max_len: int) -> Encoding:
    """Assemble [CLS] seg1 [SEP] seg2 [SEP] ... with marked spans preserved.

    segments: list of (text, marked_char_spans). Truncation drops tokens from
    the tail of the longest segment whose tail token is unmarked; a marked
    token is never dropped silently.
    """
    n_special = 1 + len(segments)
    if max_len < n_special + 1:
        raise TruncationError(f"max_len={max_len} leaves no room for content")

    seg_tokens = []   # per segment: list of (token, span)
    seg_marked = []   # per segment: list of (tok_lo, tok_hi)
    for text, marked_spans in segments:
        pieces = wordpiece_with_spans(text, vocab)
        spans = [sp for _, sp in pieces]
        seg_tokens.append(list(pieces))
        seg_marked.append(_mark_tokens(spans, marked_spans))

    def total():
        return n_special + sum(len(t) for t in seg_tokens)

    marked_high = [max((hi for _, hi in m), default=0) for m in seg_marked]
    while total() > max_len:
        # longest segment whose tail token is not inside a marked range
        best = None
        for si, toks in enumerate(seg_tokens):
            if len(toks) > marked_high[si] and len(toks) > 0:
                if best is None or len(toks) > len(seg_tokens[best]):
                    best = si
        if best is None:
            raise TruncationError(
                f"cannot fit sequence into max_len={max_len} without dropping a marked span")
        seg_tokens[best].pop()

    ids = [vocab.cls_id]
    spans: list = [None]
    segment_ids = [0]
    marked: list = []
    for si, toks in enumerate(seg_tokens):
        seg_id = 0 if si == 0 else 1
        offset = len(ids)
        for tok, sp in toks:
            ids.append(vocab.token_to_id[tok])
            spans.append(sp)
            segment_ids.append(seg_id)
        for lo, hi in seg_marked[si]:
            marked.append((offset + lo, offset + hi))
        ids.append(vocab.sep_id)
        spans.append(None)
        segment_ids.append(seg_id)
    return Encoding(ids, spans, segment_ids, marked)


def decode(ids, vocab: Vocab) -> str:
    """Join pieces back into text, merging '##' continuations."""
    words = []
    for i in ids:
        if not (0 <= i < len(vocab)):
            raise VocabError(f"id {i} outside vocabulary of size {len(vocab)}")
        tok = vocab.id_to_token[i]
        if tok.startswith("##") and words:
            words[-1] += tok[2:]
        else:
            words.append(tok)
    return " ".join(words)
