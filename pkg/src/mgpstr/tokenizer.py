"""Character, BPE and WordPiece tokenizers plus per-branch target sequences.

All three vocabularies expose the same id-level surface used by the
recognition heads: ``encode_ids``/``decode_ids`` and a class space of
``num_classes`` ids whose last two entries are ``pad`` and ``eos``.
"""

from __future__ import annotations

import logging
from collections import Counter
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import CharsetError, ConfigError, DegenerateInputError, FormatError, LengthError

log = logging.getLogger(__name__)

DEFAULT_CHARSET = "0123456789abcdefghijklmnopqrstuvwxyz"
DEFAULT_MAX_LEN = 27
WP_PREFIX = "##"
WP_UNK = "[UNK]"


class CharVocab:
    """One class per symbol, then ``pad`` and ``eos``.

    With the default charset this is the 38-way layout: ids 0-9 for digits,
    10-35 for ``a``-``z``, 36 for ``pad`` and 37 for ``eos``.
    """

    branch = "char"

    def __init__(self, charset: str = DEFAULT_CHARSET, max_len: int = DEFAULT_MAX_LEN):
        if len(set(charset)) != len(charset):
            raise ConfigError("charset has duplicate symbols")
        if max_len < 2:
            raise ConfigError("max_len must leave room for at least eos")
        self.charset = charset
        self.max_len = max_len
        self._ids = {c: i for i, c in enumerate(charset)}

    @property
    def pad_id(self) -> int:
        return len(self.charset)

    @property
    def eos_id(self) -> int:
        return len(self.charset) + 1

    @property
    def num_classes(self) -> int:
        return len(self.charset) + 2

    def encode_ids(self, word: str) -> list[int]:
        try:
            return [self._ids[c] for c in word.lower()]
        except KeyError as e:
            raise CharsetError(f"symbol {e.args[0]!r} not in charset") from None

    def decode_ids(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i == self.eos_id:
                break
            if i < len(self.charset):
                out.append(self.charset[i])
        return "".join(out)

    def encode(self, word: str) -> list[int]:
        return char_encode(word, self)

    def decode(self, ids: Iterable[int]) -> str:
        return char_decode(ids, self)


def char_encode(word: str, v: CharVocab) -> list[int]:
    """Character ids, then eos, then pad up to exactly ``v.max_len``."""
    if len(word) > v.max_len - 1:
        raise LengthError(f"{word!r} longer than {v.max_len - 1} symbols")
    ids = v.encode_ids(word) + [v.eos_id]
    return ids + [v.pad_id] * (v.max_len - len(ids))


def char_decode(ids: Iterable[int], v: CharVocab) -> str:
    return v.decode_ids(ids)


# ---------------------------------------------------------------------------
# shared subword plumbing


class _SubwordVocab:
    branch = ""

    def __init__(self, tokens: list[str]):
        if len(set(tokens)) != len(tokens):
            raise ConfigError("vocabulary has duplicate tokens")
        if any(t == "" for t in tokens):
            raise ConfigError("vocabulary has an empty token")
        self.tokens = list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    @property
    def pad_id(self) -> int:
        return len(self.tokens)

    @property
    def eos_id(self) -> int:
        return len(self.tokens) + 1

    @property
    def num_classes(self) -> int:
        return len(self.tokens) + 2

    def encode(self, word: str) -> list[str]:
        raise NotImplementedError

    def decode(self, tokens: Iterable[str]) -> str:
        raise NotImplementedError

    def encode_ids(self, word: str) -> list[int]:
        return [self.token_to_id[t] for t in self.encode(word)]

    def decode_ids(self, ids: Iterable[int]) -> str:
        toks = []
        for i in ids:
            i = int(i)
            if i == self.eos_id:
                break
            if i < len(self.tokens):
                toks.append(self.tokens[i])
        return self.decode(toks)

    def save_vocab(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")


def read_vocab_file(path: str | Path) -> list[str]:
    text = Path(path).read_text(encoding="utf-8")
    tokens = text.split("\n")
    if tokens and tokens[-1] == "":
        tokens.pop()
    if any(t == "" for t in tokens):
        raise FormatError(f"{path}: blank line in vocab file")
    return tokens


# ---------------------------------------------------------------------------
# BPE


def bytes_to_unicode() -> dict[int, str]:
    """The reversible byte -> printable-character table of byte-level BPE."""
    bs = list(range(ord("!"), ord("~") + 1)) + list(range(ord("¡"), ord("¬") + 1)) \
        + list(range(ord("®"), ord("ÿ") + 1))
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, map(chr, cs)))


class BpeVocab(_SubwordVocab):
    branch = "bpe"

    def __init__(self, tokens: list[str], merges: list[tuple[str, str]], byte_level: bool = False):
        super().__init__(tokens)
        for left, right in merges:
            if left not in self.token_to_id or right not in self.token_to_id \
                    or left + right not in self.token_to_id:
                raise ConfigError(f"merge ({left!r}, {right!r}) refers to unknown tokens")
        self.merges = list(merges)
        self.ranks = {pair: i for i, pair in enumerate(merges)}
        self.byte_level = byte_level
        if byte_level:
            self._byte_enc = bytes_to_unicode()
            self._byte_dec = {c: b for b, c in self._byte_enc.items()}
            self.alphabet = frozenset(self._byte_enc.values())
        else:
            self.alphabet = frozenset(t for t in self.tokens if len(t) == 1)

    def encode(self, word: str) -> list[str]:
        return bpe_encode(word, self)

    def decode(self, tokens: Iterable[str]) -> str:
        return bpe_decode(tokens, self)

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.save_vocab(out / "vocab.txt")
        (out / "merges.txt").write_text(
            "".join(f"{a} {b}\n" for a, b in self.merges), encoding="utf-8")

    @classmethod
    def load(cls, in_dir: str | Path) -> "BpeVocab":
        d = Path(in_dir)
        return cls(read_vocab_file(d / "vocab.txt"), read_merges_file(d / "merges.txt"))

    @classmethod
    def from_gpt2_merges(cls, merges_path: str | Path) -> "BpeVocab":
        """Byte-level vocabulary rebuilt from a published ``merges.txt``.

        Token order is the 256 byte symbols, then one token per merge, then
        ``<|endoftext|>``: 50,257 entries for the standard GPT-2 file.
        """
        merges = read_merges_file(merges_path)
        tokens = list(bytes_to_unicode().values())
        seen = set(tokens)
        for a, b in merges:
            if a + b not in seen:
                seen.add(a + b)
                tokens.append(a + b)
        tokens.append("<|endoftext|>")
        return cls(tokens, merges, byte_level=True)


def read_merges_file(path: str | Path) -> list[tuple[str, str]]:
    merges = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").split("\n"), 1):
        if not line or line.startswith("#version"):
            continue
        parts = line.split(" ")
        if len(parts) != 2 or not all(parts):
            raise FormatError(f"{path}:{lineno}: expected 'left right'")
        merges.append((parts[0], parts[1]))
    return merges


def _apply_merge(symbols: tuple[str, ...], pair: tuple[str, str]) -> tuple[str, ...]:
    out = []
    i = 0
    n = len(symbols)
    while i < n:
        if i + 1 < n and symbols[i] == pair[0] and symbols[i + 1] == pair[1]:
            out.append(pair[0] + pair[1])
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


def bpe_train(corpus: Mapping[str, int], num_merges: int, alphabet: Iterable[str] | None = None) -> BpeVocab:
    """Greedy pair merging.  Ties on count go to the lexicographically smallest pair."""
    if not corpus:
        raise DegenerateInputError("BPE corpus is empty")
    chars = set(alphabet) if alphabet is not None else set()
    words: Counter[tuple[str, ...]] = Counter()
    for w, c in corpus.items():
        if not w:
            continue
        chars.update(w)
        words[tuple(w)] += int(c)
    merges: list[tuple[str, str]] = []
    for _ in range(num_merges):
        pairs: Counter[tuple[str, str]] = Counter()
        for sym, c in words.items():
            for pair in zip(sym, sym[1:]):
                pairs[pair] += c
        if not pairs:
            break
        best = min(pairs, key=lambda p: (-pairs[p], p))
        merges.append(best)
        merged: Counter[tuple[str, ...]] = Counter()
        for sym, c in words.items():
            merged[_apply_merge(sym, best)] += c
        words = merged
    tokens = sorted(chars)
    seen = set(tokens)
    for a, b in merges:
        if a + b not in seen:
            seen.add(a + b)
            tokens.append(a + b)
    return BpeVocab(tokens, merges)


def bpe_encode(word: str, v: BpeVocab) -> list[str]:
    """Repeatedly merge the adjacent pair with the lowest merge rank."""
    if not word:
        raise LengthError("cannot BPE-encode an empty word")
    if v.byte_level:
        symbols = [v._byte_enc[b] for b in word.encode("utf-8")]
    else:
        symbols = list(word)
        for c in symbols:
            if c not in v.alphabet:
                raise CharsetError(f"symbol {c!r} outside the BPE base alphabet")
    ranks = v.ranks
    while len(symbols) > 1:
        best = None
        best_rank = len(ranks)
        for pair in zip(symbols, symbols[1:]):
            r = ranks.get(pair)
            if r is not None and r < best_rank:
                best, best_rank = pair, r
        if best is None:
            break
        symbols = list(_apply_merge(tuple(symbols), best))
    return symbols


def bpe_decode(tokens: Iterable[str], v: BpeVocab | None = None) -> str:
    text = "".join(tokens)
    if v is not None and v.byte_level:
        return bytes(v._byte_dec[c] for c in text if c in v._byte_dec).decode("utf-8", errors="replace")
    return text


# ---------------------------------------------------------------------------
# WordPiece


class WpVocab(_SubwordVocab):
    branch = "wp"

    def __init__(self, tokens: list[str], unk: str = WP_UNK, prefix: str = WP_PREFIX):
        super().__init__(tokens)
        if unk not in self.token_to_id:
            raise ConfigError(f"WordPiece vocabulary lacks the unk token {unk!r}")
        if any(t == prefix for t in tokens):
            raise ConfigError("bare continuation prefix is not a token")
        self.unk = unk
        self.prefix = prefix
        self.unk_id = self.token_to_id[unk]
        self.max_token_len = max(len(t) for t in tokens)

    def encode(self, word: str) -> list[str]:
        return wp_encode(word, self)

    def decode(self, tokens: Iterable[str]) -> str:
        return wp_decode(tokens, self)

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.save_vocab(out / "vocab.txt")

    @classmethod
    def load(cls, in_dir: str | Path) -> "WpVocab":
        path = Path(in_dir)
        if path.is_dir():
            path = path / "vocab.txt"
        return cls(read_vocab_file(path))


def wp_train(corpus: Mapping[str, int], vocab_size: int, alphabet: Iterable[str] | None = None) -> WpVocab:
    """Frequency surrogate for WordPiece training.

    Keeps every single character plus unk, then fills the remaining slots
    with the most frequent word-initial substrings and ``##``-prefixed
    non-initial substrings, ordered by (count desc, token asc).  This does
    not reproduce the likelihood-based merge criterion; only the encoder is
    the standard algorithm.
    """
    words = {w: int(c) for w, c in corpus.items() if w}
    if not words:
        raise ConfigError("WordPiece corpus is empty")
    chars = set(alphabet) if alphabet is not None else set()
    for w in words:
        chars.update(w)
    base = [WP_UNK] + sorted(chars)
    if vocab_size < len(base):
        raise ConfigError(f"vocab_size {vocab_size} below the {len(base)} base tokens")
    counts: Counter[str] = Counter()
    for w, c in words.items():
        n = len(w)
        for s in range(n):
            for e in range(s + 1, n + 1):
                counts[w[s:e] if s == 0 else WP_PREFIX + w[s:e]] += c
    taken = set(base)
    ranked = sorted((t for t in counts if t not in taken), key=lambda t: (-counts[t], t))
    return WpVocab(base + ranked[: vocab_size - len(base)])


def wp_encode(word: str, v: WpVocab) -> list[str]:
    """Greedy longest-match-first; any unmatched remainder makes the whole word unk."""
    if not word:
        return [v.unk]
    out = []
    start = 0
    n = len(word)
    while start < n:
        end = min(n, start + v.max_token_len)
        piece = None
        while end > start:
            sub = word[start:end] if start == 0 else v.prefix + word[start:end]
            if sub in v.token_to_id:
                piece = sub
                break
            end -= 1
        if piece is None:
            return [v.unk]
        out.append(piece)
        start = end
    return out


def wp_decode(tokens: Iterable[str], v: WpVocab | None = None) -> str:
    prefix = v.prefix if v is not None else WP_PREFIX
    unk = v.unk if v is not None else WP_UNK
    out = []
    for t in tokens:
        if t == unk:
            continue
        out.append(t[len(prefix):] if t.startswith(prefix) else t)
    return "".join(out)


# ---------------------------------------------------------------------------
# training targets


def make_targets(label: str, vocab, max_len: int | None = None) -> np.ndarray:
    """Target ids for one branch: tokens, eos, then pad to ``max_len``.

    Character labels longer than ``max_len - 1`` are an error; subword
    sequences that long are truncated (and logged) before the eos.
    """
    label = label.lower()
    if isinstance(vocab, CharVocab):
        return np.asarray(char_encode(label, vocab), dtype=np.int64)
    if max_len is None:
        raise ConfigError("subword targets need max_len")
    ids = vocab.encode_ids(label)
    if len(ids) > max_len - 1:
        log.info("truncating %s target for %r from %d to %d tokens",
                 vocab.branch, label, len(ids), max_len - 1)
        ids = ids[: max_len - 1]
    ids = ids + [vocab.eos_id]
    return np.asarray(ids + [vocab.pad_id] * (max_len - len(ids)), dtype=np.int64)


def read_corpus(path: str | Path) -> dict[str, int]:
    """``word`` or ``word<TAB>count`` per line; repeated words add up."""
    counts: Counter[str] = Counter()
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) == 1:
            counts[parts[0].lower()] += 1
        elif len(parts) == 2:
            try:
                n = int(parts[1])
            except ValueError:
                n = -1
            if n < 0:
                raise FormatError(f"{path}:{lineno}: bad count {parts[1]!r}")
            counts[parts[0].lower()] += n
        else:
            raise FormatError(f"{path}:{lineno}: expected 'word' or 'word<TAB>count'")
    return dict(counts)
