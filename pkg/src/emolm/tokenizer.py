"""Byte-level BPE tokenizer with reserved special tokens.

Tokens are byte strings. A vocabulary is learned by repeatedly merging the
most frequent adjacent symbol pair inside pre-tokenized chunks, where a chunk
is a contiguous non-whitespace run with a single preceding space folded in
(other whitespace stands alone). Special tokens never take part in merges and
occupy the highest ids, so encoding raw text can never produce a special id;
they are injected only by the sequence formatter.
"""

from __future__ import annotations

import re
import warnings
from collections import Counter
from dataclasses import dataclass, field

# A chunk is either an optional single leading space plus a non-whitespace
# run, or a lone whitespace byte. Chunks concatenate back to the input.
_CHUNK_RE = re.compile(rb" ?[^ \t\n\r\f\v]+|[ \t\n\r\f\v]")

VOCAB_HEADER = "bpe-v1"


def _chunks(data: bytes) -> list[bytes]:
    return _CHUNK_RE.findall(data)


def _byte_render_table() -> tuple[dict[int, str], dict[str, int]]:
    # Printable one-character rendering for every byte so merge-file lines can
    # be split on a single space unambiguously. Visible latin-1 bytes map to
    # themselves, the rest are shifted into an unused unicode range.
    visible = (
        list(range(ord("!"), ord("~") + 1))
        + list(range(0xA1, 0xAC + 1))
        + list(range(0xAE, 0xFF + 1))
    )
    to_char: dict[int, str] = {}
    shift = 0
    for b in range(256):
        if b in visible:
            to_char[b] = chr(b)
        else:
            to_char[b] = chr(256 + shift)
            shift += 1
    from_char = {c: b for b, c in to_char.items()}
    return to_char, from_char


_BYTE_TO_CHAR, _CHAR_TO_BYTE = _byte_render_table()


def render_token(token: bytes) -> str:
    """Render a byte token as printable, space-free text."""
    return "".join(_BYTE_TO_CHAR[b] for b in token)


def parse_token(text: str) -> bytes:
    return bytes(_CHAR_TO_BYTE[c] for c in text)


@dataclass(frozen=True)
class Vocabulary:
    """Immutable BPE vocabulary: safe to share across threads once built.

    ids are dense in [0, vocab_size): base alphabet first (byte order), then
    merge results in rank order, then specials (highest ids, in given order).
    """

    alphabet: tuple[bytes, ...]
    merges: tuple[tuple[bytes, bytes], ...]
    token_to_id: dict[bytes, int]
    id_to_token: dict[int, bytes]
    specials: dict[str, int]
    vocab_size: int
    _ranks: dict[tuple[bytes, bytes], int] = field(repr=False, default_factory=dict)
    _encode_cache: dict[bytes, tuple[int, ...]] = field(repr=False, default_factory=dict)

    @classmethod
    def from_parts(
        cls,
        alphabet: tuple[bytes, ...] | list[bytes],
        merges: list[tuple[bytes, bytes]] | tuple[tuple[bytes, bytes], ...],
        specials: list[str] | tuple[str, ...],
    ) -> "Vocabulary":
        token_to_id: dict[bytes, int] = {}
        for sym in alphabet:
            if len(sym) != 1:
                raise ValueError("alphabet symbols must be single bytes")
            if sym in token_to_id:
                raise ValueError(f"duplicate alphabet symbol: {sym!r}")
            token_to_id[sym] = len(token_to_id)
        for left, right in merges:
            if left not in token_to_id or right not in token_to_id:
                raise ValueError(f"merge refers to unknown symbol: {(left, right)!r}")
            tok = left + right
            if tok in token_to_id:
                raise ValueError(f"duplicate merge token: {tok!r}")
            token_to_id[tok] = len(token_to_id)
        special_ids: dict[str, int] = {}
        for name in specials:
            surface = name.encode("utf-8")
            if len(surface) < 2:
                raise ValueError(f"special token surface too short: {name!r}")
            if surface in token_to_id or name in special_ids:
                raise ValueError(f"special token collides with vocabulary: {name}")
            special_ids[name] = len(token_to_id)
            token_to_id[surface] = special_ids[name]
        id_to_token = {i: t for t, i in token_to_id.items()}
        ranks = {pair: r for r, pair in enumerate(merges)}
        return cls(
            alphabet=tuple(alphabet),
            merges=tuple(tuple(m) for m in merges),
            token_to_id=token_to_id,
            id_to_token=id_to_token,
            specials=special_ids,
            vocab_size=len(token_to_id),
            _ranks=ranks,
        )

    def special_id(self, name: str) -> int:
        if name not in self.specials:
            raise ValueError(f"unknown special token: {name}")
        return self.specials[name]


def _merge_all(syms: list[bytes], pair: tuple[bytes, bytes]) -> list[bytes]:
    """Replace every left-to-right occurrence of pair with its concatenation."""
    merged = pair[0] + pair[1]
    out: list[bytes] = []
    i = 0
    while i < len(syms):
        if i + 1 < len(syms) and syms[i] == pair[0] and syms[i + 1] == pair[1]:
            out.append(merged)
            i += 2
        else:
            out.append(syms[i])
            i += 1
    return out


def train_bpe(
    corpus: list[str],
    target_vocab_size: int,
    specials: list[str] | tuple[str, ...] = (),
) -> Vocabulary:
    """Learn a BPE vocabulary with exactly target_vocab_size ids.

    The base alphabet is all 256 byte values whenever the target leaves room
    for them (so any input stays encodable); for smaller targets it falls back
    to the bytes that actually occur in the corpus. Each training step merges
    the most frequent adjacent pair, breaking frequency ties by the
    lexicographically smallest (left, right) pair. Specials are appended last
    with the highest ids and are never produced by a merge.

    If the corpus runs out of mergeable pairs before the target is reached,
    training stops with a warning and the vocabulary is smaller than asked.
    """
    if not corpus or not any(text for text in corpus):
        raise ValueError("empty corpus")
    if len(set(specials)) != len(specials):
        raise ValueError("duplicate special token names")

    chunk_counts: Counter[bytes] = Counter()
    for text in corpus:
        chunk_counts.update(_chunks(text.encode("utf-8")))

    corpus_bytes = sorted({bytes([b]) for chunk in chunk_counts for b in chunk})
    if target_vocab_size < len(corpus_bytes) + len(specials):
        raise ValueError("vocab too small")
    if target_vocab_size >= 256 + len(specials):
        alphabet = tuple(bytes([b]) for b in range(256))
    else:
        alphabet = tuple(corpus_bytes)

    special_surfaces = {name.encode("utf-8") for name in specials}
    known = set(alphabet) | special_surfaces

    words: dict[bytes, list[bytes]] = {
        chunk: [bytes([b]) for b in chunk] for chunk in chunk_counts
    }
    merges: list[tuple[bytes, bytes]] = []
    n_merges = target_vocab_size - len(alphabet) - len(specials)
    for _ in range(n_merges):
        pair_counts: Counter[tuple[bytes, bytes]] = Counter()
        for chunk, syms in words.items():
            count = chunk_counts[chunk]
            for pair in zip(syms, syms[1:]):
                pair_counts[pair] += count
        # Pairs whose concatenation collides with a special surface or an
        # existing token are not mergeable (keeps token ids a bijection).
        candidates = {
            pair: n for pair, n in pair_counts.items() if pair[0] + pair[1] not in known
        }
        if not candidates:
            warnings.warn(
                f"merge pairs exhausted after {len(merges)} merges; "
                f"vocabulary has {len(alphabet) + len(merges) + len(specials)} ids "
                f"instead of {target_vocab_size}",
                stacklevel=2,
            )
            break
        best = min(candidates.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        merges.append(best)
        known.add(best[0] + best[1])
        for chunk, syms in words.items():
            if len(syms) >= 2:
                words[chunk] = _merge_all(syms, best)

    return Vocabulary.from_parts(alphabet, merges, specials)


def _encode_chunk(vocab: Vocabulary, chunk: bytes) -> tuple[int, ...]:
    cached = vocab._encode_cache.get(chunk)
    if cached is not None:
        return cached
    # Bytes outside the training alphabet (possible only for corpus-restricted
    # alphabets) have no representation and are dropped.
    base = vocab.token_to_id
    syms = [s for b in chunk if (s := bytes([b])) in base]
    ranks = vocab._ranks
    while len(syms) >= 2:
        best_rank = None
        best_pair = None
        for pair in zip(syms, syms[1:]):
            rank = ranks.get(pair)
            if rank is not None and (best_rank is None or rank < best_rank):
                best_rank, best_pair = rank, pair
        if best_pair is None:
            break
        syms = _merge_all(syms, best_pair)
    ids = tuple(vocab.token_to_id[s] for s in syms)
    vocab._encode_cache[chunk] = ids
    return ids


def encode(vocab: Vocabulary, text: str) -> list[int]:
    """Deterministic text -> ids; merges applied lowest rank first per chunk."""
    ids: list[int] = []
    for chunk in _chunks(text.encode("utf-8")):
        ids.extend(_encode_chunk(vocab, chunk))
    return ids


def decode(vocab: Vocabulary, ids: list[int]) -> str:
    """ids -> text; special ids render as their surface form."""
    parts = []
    for i in ids:
        tok = vocab.id_to_token.get(i)
        if tok is None:
            raise ValueError(f"unknown token id: {i}")
        parts.append(tok)
    return b"".join(parts).decode("utf-8", errors="replace")


def save_vocab(vocab: Vocabulary, path: str) -> None:
    """Write the text vocabulary file; reload is bit-exact.

    Layout: header "bpe-v1 <vocab_size>", one merge per line "left right",
    a "#specials" section (one name per line), then an "#alphabet" section
    recording the base symbols (required to rebuild the id assignment when
    the alphabet is corpus-restricted).
    """
    lines = [f"{VOCAB_HEADER} {vocab.vocab_size}"]
    for left, right in vocab.merges:
        lines.append(f"{render_token(left)} {render_token(right)}")
    lines.append("#specials")
    lines.extend(vocab.specials)
    lines.append("#alphabet")
    lines.extend(render_token(sym) for sym in vocab.alphabet)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_vocab(path: str) -> Vocabulary:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith(VOCAB_HEADER + " "):
        raise ValueError("not a vocabulary file: bad header")
    declared = int(lines[0].split()[1])
    merges: list[tuple[bytes, bytes]] = []
    specials: list[str] = []
    alphabet: list[bytes] = []
    section = "merges"
    for line in lines[1:]:
        if line == "#specials":
            section = "specials"
        elif line == "#alphabet":
            section = "alphabet"
        elif section == "merges":
            left, right = line.split(" ")
            merges.append((parse_token(left), parse_token(right)))
        elif section == "specials":
            specials.append(line)
        else:
            alphabet.append(parse_token(line))
    vocab = Vocabulary.from_parts(alphabet, merges, specials)
    if vocab.vocab_size != declared:
        raise ValueError(
            f"vocabulary file inconsistent: header says {declared}, found {vocab.vocab_size}"
        )
    return vocab
