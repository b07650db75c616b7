"""Byte-level BPE tokenizer: train, encode, decode, JSON round-trip.

Tokens are strings over a printable byte alphabet (each of the 256 byte
values maps to one unicode character, reversibly), so any UTF-8 text
encodes and every token has a unique display form. Merges apply lowest
rank first, the usual BPE scheme.
"""

from __future__ import annotations

import json
import re
from pathlib import Path


class TokenizerError(ValueError):
    """Tokenizer file is unreadable or internally inconsistent."""


def _byte_alphabet() -> dict[int, str]:
    """Bijective byte -> printable unicode char map.

    Printable ASCII and latin-1 ranges map to themselves; the rest are
    shifted into the private 0x100+ block so every token string is
    visible and JSON-safe.
    """
    keep = (list(range(ord("!"), ord("~") + 1))
            + list(range(0xA1, 0xAD)) + list(range(0xAE, 0x100)))
    table: dict[int, str] = {}
    bump = 0
    for b in range(256):
        if b in keep:
            table[b] = chr(b)
        else:
            table[b] = chr(0x100 + bump)
            bump += 1
    return table


_B2C = _byte_alphabet()
_C2B = {c: b for b, c in _B2C.items()}

# words keep their leading space so " B" can become one token
_WORD_RE = re.compile(r" ?[^\s]+|\s+")


def _to_chars(text: str) -> str:
    return "".join(_B2C[b] for b in text.encode("utf-8"))


def _from_chars(chars: str) -> str:
    return bytes(_C2B[c] for c in chars).decode("utf-8", errors="replace")


class ByteBPE:
    """Immutable tokenizer over a fixed vocab and ordered merge list."""

    def __init__(self, vocab: dict[str, int], merges: list[tuple[str, str]]):
        self.vocab = dict(vocab)
        self.merges = list(merges)
        self.ranks = {pair: i for i, pair in enumerate(merges)}
        self.id_to_token = {i: t for t, i in self.vocab.items()}
        if len(self.id_to_token) != len(self.vocab):
            raise TokenizerError("vocab maps two tokens to one id")

    # -- construction -----------------------------------------------------

    @classmethod
    def train(cls, corpus: str, n_merges: int) -> "ByteBPE":
        """Learn n_merges pair merges from corpus; ties break lexically."""
        words = [tuple(_to_chars(w)) for w in _WORD_RE.findall(corpus)]
        merges: list[tuple[str, str]] = []
        for _ in range(n_merges):
            counts: dict[tuple[str, str], int] = {}
            for word in words:
                for pair in zip(word, word[1:]):
                    counts[pair] = counts.get(pair, 0) + 1
            if not counts:
                break
            best = max(counts, key=lambda p: (counts[p], (-len(p[0] + p[1]),) + p))
            if counts[best] < 2:
                break
            merges.append(best)
            joined = best[0] + best[1]
            words = [_merge_word(w, best, joined) for w in words]
        vocab = {c: i for i, c in enumerate(sorted(_C2B))}
        for a, b in merges:
            vocab[a + b] = len(vocab)
        return cls(vocab, merges)

    @classmethod
    def load(cls, path: str | Path) -> "ByteBPE":
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise TokenizerError(f"cannot read tokenizer {path}: {exc}") from None
        vocab = obj.get("vocab")
        merges_raw = obj.get("merges")
        if not isinstance(vocab, dict) or not isinstance(merges_raw, list):
            raise TokenizerError(f"{path}: tokenizer needs 'vocab' and 'merges'")
        merges = []
        for row in merges_raw:
            parts = row.split(" ") if isinstance(row, str) else None
            if not parts or len(parts) != 2:
                raise TokenizerError(f"{path}: malformed merge entry {row!r}")
            merges.append((parts[0], parts[1]))
        return cls(vocab, merges)

    def save(self, path: str | Path) -> None:
        obj = {"vocab": self.vocab,
               "merges": [f"{a} {b}" for a, b in self.merges]}
        Path(path).write_text(json.dumps(obj, ensure_ascii=False), encoding="utf-8")

    # -- use --------------------------------------------------------------

    def __len__(self) -> int:
        return len(self.vocab)

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        for word in _WORD_RE.findall(text):
            for token in self._bpe(tuple(_to_chars(word))):
                try:
                    ids.append(self.vocab[token])
                except KeyError:
                    raise TokenizerError(f"token {token!r} missing from vocab") from None
        return ids

    def decode(self, ids: list[int]) -> str:
        try:
            chars = "".join(self.id_to_token[i] for i in ids)
        except KeyError as exc:
            raise TokenizerError(f"unknown token id {exc.args[0]}") from None
        return _from_chars(chars)

    def token_text(self, token_id: int) -> str:
        """Decoded text of one token (its bytes as UTF-8)."""
        return _from_chars(self.token_string(token_id))

    def token_string(self, token_id: int) -> str:
        """The token's vocab string: printable and unique per id."""
        token = self.id_to_token.get(token_id)
        if token is None:
            raise TokenizerError(f"unknown token id {token_id}")
        return token

    def _bpe(self, symbols: tuple[str, ...]) -> tuple[str, ...]:
        while len(symbols) > 1:
            pairs = set(zip(symbols, symbols[1:]))
            ranked = [(self.ranks[p], p) for p in pairs if p in self.ranks]
            if not ranked:
                break
            _, best = min(ranked)
            symbols = _merge_word(symbols, best, best[0] + best[1])
        return symbols


def _merge_word(word: tuple[str, ...], pair: tuple[str, str], joined: str) -> tuple[str, ...]:
    out: list[str] = []
    i = 0
    while i < len(word):
        if i + 1 < len(word) and (word[i], word[i + 1]) == pair:
            out.append(joined)
            i += 2
        else:
            out.append(word[i])
            i += 1
    return tuple(out)
