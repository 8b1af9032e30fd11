"""Whitespace tokenisation and the id <-> token table."""
from __future__ import annotations

import re
from pathlib import Path
from typing import Iterable

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
USER, SYSTEM, API, OUT = "USER:", "SYSTEM:", "API:", "OUT:"
UNK = "<unk>"
SPECIAL_TOKENS = (PAD, BOS, EOS, USER, SYSTEM, API, OUT, UNK)
PAD_ID, BOS_ID, EOS_ID = 0, 1, 2

# API strings such as ``hotel_book(area=center, stars=4)`` split at the
# punctuation of the call grammar so every slot value is its own token.
_TOKEN_RE = re.compile(r"[(),=]|[^\s(),=]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


def detokenize(tokens: Iterable[str]) -> str:
    text = " ".join(tokens)
    text = re.sub(r"\s*=\s*", "=", text)
    text = re.sub(r"\s*\(\s*", "(", text)
    text = re.sub(r"\s*\)", ")", text)
    text = re.sub(r"\s*,", ",", text)
    return text


class Vocab:
    """Token table whose first entries are the reserved special tokens."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(SPECIAL_TOKENS)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __getitem__(self, token: str) -> int:
        return self.stoi[token]

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Vocab":
        seen: dict[str, None] = {}
        for text in texts:
            for tok in tokenize(text):
                seen.setdefault(tok)
        return cls(sorted(seen))

    def encode(self, text: str, bos: bool = False, eos: bool = False) -> list[int]:
        unk = self.stoi[UNK]
        ids = [self.stoi.get(t, unk) for t in tokenize(text)]
        if bos:
            ids.insert(0, BOS_ID)
        if eos:
            ids.append(EOS_ID)
        return ids

    def decode(self, ids: Iterable[int], strip_special: bool = True) -> str:
        toks = []
        for i in ids:
            tok = self.itos[int(i)]
            if strip_special and tok in (PAD, BOS, EOS):
                continue
            toks.append(tok)
        return detokenize(toks)

    def tokens(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[int(i)] for i in ids]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError(f"{path}: vocabulary must start with the reserved special tokens")
        vocab = cls()
        for tok in lines[len(SPECIAL_TOKENS):]:
            vocab.add(tok)
        return vocab
